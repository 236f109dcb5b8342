fn main() -> std::process::ExitCode {
    recurrent_index::cli::main_entry()
}
