//! Command-line front end: `fit`, `simulate` and `reproduce`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::criteria::{parse_h_grid, CriterionContext, FitOptions, FitReport, IndexMeanModel, ThetaDomain, TrimmingPlan};
use crate::data::{load_sample, SampleSource};
use crate::error::{Error, Result};
use crate::inference::{kernel_influence, parametric_influence, select_with_pilot, SelectionObjective};
use crate::io::write_atomic;
use crate::kernel::{KernelFamily, KernelSpec, TrimmingSpec};
use crate::measure::{design_lattice, design_support, DiscreteMeasure};
use crate::simulation::{
    compare_table, records_csv, run_replications, table_configs, Pipeline, SimulationConfig, SimulationOutput,
    TableReport, LIGHT_CENSORING_SCALE,
};
use crate::survival::kaplan_meier_censoring;

pub const EXIT_DATA: u8 = 2;
pub const EXIT_OPTIMIZER: u8 = 3;
pub const EXIT_FAILURES: u8 = 4;
pub const EXIT_ACCEPTANCE: u8 = 5;

#[derive(Debug, Parser)]
#[command(name = "recurrent-index", version, about = "Mean-function regression for censored recurrent events")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a parametric or single-index model to a data file.
    Fit(FitArgs),
    /// Run a Monte-Carlo study.
    Simulate(SimulateArgs),
    /// Rerun a reference table and compare against its published values.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Parametric,
    SingleIndex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    Fixed,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrimMode {
    Box,
    Density,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Json,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveArg {
    Bias,
    BiasPlusVariance,
}

impl From<ObjectiveArg> for SelectionObjective {
    fn from(value: ObjectiveArg) -> Self {
        match value {
            ObjectiveArg::Bias => SelectionObjective::Bias,
            ObjectiveArg::BiasPlusVariance => SelectionObjective::BiasPlusVariance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineArg {
    Fixed,
    Adaptive,
    Compare,
    AdaptiveBandwidth,
    Parametric,
}

impl From<PipelineArg> for Pipeline {
    fn from(value: PipelineArg) -> Self {
        match value {
            PipelineArg::Fixed => Pipeline::Fixed,
            PipelineArg::Adaptive => Pipeline::Adaptive,
            PipelineArg::Compare => Pipeline::Compare,
            PipelineArg::AdaptiveBandwidth => Pipeline::AdaptiveBandwidth,
            PipelineArg::Parametric => Pipeline::Parametric,
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// `file.json`, or `subjects.csv,events.csv`.
    #[arg(long)]
    pub data: String,
    #[arg(long, value_enum, default_value = "single-index")]
    pub model: ModelKind,
    /// `linear`, or a JSON file `{"intercept": c, "time_power": p}`.
    #[arg(long, default_value = "linear")]
    pub mu0: String,
    /// Intercept of the built-in linear mean model.
    #[arg(long, default_value_t = 5.0)]
    pub intercept: f64,
    #[arg(long, default_value = "epanechnikov")]
    pub kernel: KernelFamily,
    /// A positive number, or `auto` to search `--h-grid`.
    #[arg(long, default_value = "0.2")]
    pub bandwidth: String,
    /// Bandwidth grid `lo:step:hi`.
    #[arg(long)]
    pub h_grid: Option<String>,
    #[arg(long, value_enum, default_value = "fixed")]
    pub weights: WeightMode,
    /// JSON array of candidate measures `[{"support": [...], "masses": [...]}, ...]`.
    #[arg(long)]
    pub weight_lattice: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "density")]
    pub trim: TrimMode,
    /// Box mode: lower quantile level of the box. Density mode: trimmed density quantile.
    #[arg(long)]
    pub trim_c: Option<f64>,
    #[arg(long, value_enum, default_value = "bias")]
    pub objective: ObjectiveArg,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    /// Directory receiving `fit.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// JSON simulation configuration; the standard design at 30% censoring when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_enum)]
    pub pipeline: Option<PipelineArg>,
    #[arg(long)]
    pub kernel: Option<KernelFamily>,
    #[arg(long)]
    pub bandwidth: Option<f64>,
    #[arg(long)]
    pub h_grid: Option<String>,
    #[arg(long)]
    pub weight_lattice: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub objective: Option<ObjectiveArg>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    /// Directory receiving `summary.json` and `records.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Refuse to run without an explicit `--seed`.
    #[arg(long)]
    pub require_seed: bool,
}

#[derive(Debug, Args)]
pub struct ReproduceArgs {
    /// Table number: 1, 2 or 3.
    #[arg(long)]
    pub table: u8,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the number of replications (reference: 100).
    #[arg(long)]
    pub reps: Option<usize>,
    /// Override the sample size (reference: 100).
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_enum)]
    pub objective: Option<ObjectiveArg>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
    /// Directory receiving `report.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub require_seed: bool,
}

/// Parses the process arguments and runs the selected subcommand.
pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn exit_code(error: &Error) -> u8 {
    match error {
        Error::DegenerateDenominator { .. }
        | Error::EmptyWindow { .. }
        | Error::AllTrimmed
        | Error::OptimizerDiverged { .. }
        | Error::SingularSigma { .. }
        | Error::AllCandidatesSingular => EXIT_OPTIMIZER,
        Error::ExcessiveFailures { .. } => EXIT_FAILURES,
        _ => EXIT_DATA,
    }
}

pub fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Fit(args) => cmd_fit(&args),
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Reproduce(args) => cmd_reproduce(&args),
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_lattice(path: &Path) -> Result<Vec<DiscreteMeasure>> {
    let lattice: Vec<DiscreteMeasure> = serde_json::from_str(&read_text(path)?)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    if lattice.is_empty() {
        return Err(Error::InvalidConfig("weight lattice is empty".into()));
    }
    Ok(lattice)
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Error::InvalidConfig(format!("serialization: {e}")))
}

fn announce<T: Serialize>(resolved: &T) -> Result<()> {
    eprintln!("resolved configuration:\n{}", to_json(resolved)?.trim_end());
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn resolve_seed(seed: Option<u64>, require: bool) -> Result<Option<u64>> {
    if require && seed.is_none() {
        return Err(Error::InvalidConfig("--require-seed is set but no --seed was given".into()));
    }
    Ok(seed)
}

#[derive(Debug, Clone, Serialize)]
struct FitSettings {
    data: String,
    model: ModelKind,
    mean_model: Option<IndexMeanModel>,
    kernel: KernelFamily,
    bandwidth: Option<f64>,
    h_grid: Option<Vec<f64>>,
    weights: WeightMode,
    pilot_weights: DiscreteMeasure,
    lattice_size: Option<usize>,
    trimming: TrimmingPlan,
    objective: SelectionObjective,
    domain: Option<ThetaDomain>,
    options: FitOptions,
}

#[derive(Debug, Serialize)]
struct FitOutput {
    settings: FitSettings,
    report: FitReport,
    /// Index of the chosen lattice candidate and every candidate's score.
    selected_index: Option<usize>,
    candidate_scores: Option<Vec<Option<f64>>>,
}

fn resolve_trimming(mode: TrimMode, c: Option<f64>) -> Result<TrimmingPlan> {
    let check = |v: f64, hi: f64| {
        if v.is_finite() && (0.0..hi).contains(&v) {
            Ok(v)
        } else {
            Err(Error::InvalidConfig(format!("--trim-c {v} outside [0, {hi})")))
        }
    };
    Ok(match mode {
        TrimMode::Box => {
            let lo = check(c.unwrap_or(0.1), 0.5)?;
            TrimmingPlan {
                box_quantiles: (lo, 1.0 - lo),
                ..TrimmingPlan::box_only()
            }
        }
        TrimMode::Density => TrimmingPlan {
            second_stage: Some(TrimmingSpec::DensityQuantile {
                quantile: check(c.unwrap_or(0.05), 1.0)?,
            }),
            ..TrimmingPlan::default()
        },
    })
}

fn cmd_fit(args: &FitArgs) -> Result<u8> {
    let source = SampleSource::parse(&args.data)?;
    let bandwidth = match args.bandwidth.as_str() {
        "auto" => None,
        text => Some(
            text.parse::<f64>()
                .ok()
                .filter(|h| h.is_finite() && *h > 0.0)
                .ok_or_else(|| Error::InvalidConfig(format!("--bandwidth {text} is neither a positive number nor auto")))?,
        ),
    };
    let h_grid = args.h_grid.as_deref().map(parse_h_grid).transpose()?;
    if bandwidth.is_none() && h_grid.is_none() && args.model == ModelKind::SingleIndex {
        return Err(Error::InvalidConfig("--bandwidth auto requires --h-grid".into()));
    }
    let mean_model = match args.model {
        ModelKind::Parametric => Some(match args.mu0.as_str() {
            "linear" => IndexMeanModel::linear(args.intercept),
            path => IndexMeanModel::from_json(&read_text(Path::new(path))?)?,
        }),
        ModelKind::SingleIndex => None,
    };
    let lattice = match (&args.weight_lattice, args.weights) {
        (Some(path), _) => Some(load_lattice(path)?),
        (None, WeightMode::Adaptive) => Some(design_lattice()),
        (None, WeightMode::Fixed) => None,
    };
    let pilot_weights = DiscreteMeasure::uniform(design_support())?;
    let sample = load_sample(&source)?;
    let settings = FitSettings {
        data: args.data.clone(),
        model: args.model,
        mean_model,
        kernel: args.kernel,
        bandwidth,
        h_grid: h_grid.clone(),
        weights: args.weights,
        pilot_weights: pilot_weights.clone(),
        lattice_size: match args.weights {
            WeightMode::Adaptive => lattice.as_ref().map(Vec::len),
            WeightMode::Fixed => None,
        },
        trimming: resolve_trimming(args.trim, args.trim_c)?,
        objective: args.objective.into(),
        domain: Some(ThetaDomain::default_for(sample.dim())),
        options: FitOptions::default(),
    };
    announce(&settings)?;

    let fit = kaplan_meier_censoring(&sample)?;
    let ctx = CriterionContext::new(&sample, &fit, &pilot_weights)?;
    let domain = settings.domain.clone().expect("set above");
    let options = settings.options;
    let mut output = FitOutput {
        settings: settings.clone(),
        report: match mean_model {
            Some(model) => {
                let mut report = ctx.fit_parametric(&model, &domain, &options.optimizer)?;
                report.variance = attach_variance(
                    parametric_influence(&ctx, &report.theta_hat, &model).and_then(|t| t.variance(&pilot_weights)),
                )?;
                report
            }
            None => {
                let mut report = match bandwidth {
                    Some(h) => ctx.fit_semiparametric(&KernelSpec::new(args.kernel, h)?, &domain, &settings.trimming, &options)?,
                    None => ctx.fit_joint_theta_h(
                        args.kernel,
                        h_grid.as_deref().expect("checked above"),
                        &domain,
                        &settings.trimming,
                        &options,
                    )?,
                };
                let spec = KernelSpec::new(args.kernel, report.bandwidth.expect("single-index fit"))?;
                report.variance = attach_variance(
                    kernel_influence(&ctx, &report.theta_hat, &spec, options.leave_one_out)
                        .and_then(|t| t.variance(&pilot_weights)),
                )?;
                report
            }
        },
        selected_index: None,
        candidate_scores: None,
    };
    if let (ModelKind::SingleIndex, WeightMode::Adaptive) = (args.model, args.weights) {
        let spec = KernelSpec::new(args.kernel, output.report.bandwidth.expect("single-index fit"))?;
        let path = std::mem::take(&mut output.report.bandwidth_path);
        let selection = select_with_pilot(
            &ctx,
            output.report.clone(),
            lattice.as_deref().expect("adaptive mode has a lattice"),
            &spec,
            &domain,
            &settings.trimming,
            &options,
            settings.objective,
        )?;
        output.report = selection.report;
        output.report.bandwidth_path = path;
        output.selected_index = Some(selection.index);
        output.candidate_scores = Some(selection.scores);
    }

    let rendered = match args.format {
        Format::Json => to_json(&output)?,
        Format::Text => fit_text(&output),
    };
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write_atomic(&dir.join("fit.json"), to_json(&output)?.as_bytes())?;
    }
    print!("{rendered}");
    Ok(0)
}

/// Keeps a variance report when `Sigma^` is invertible; a singular one is reported and dropped.
fn attach_variance(
    report: Result<crate::inference::VarianceReport>,
) -> Result<Option<crate::inference::VarianceReport>> {
    match report {
        Ok(r) => Ok(Some(r)),
        Err(e @ (Error::SingularSigma { .. } | Error::DegenerateDenominator { .. })) => {
            eprintln!("warning: no variance estimate: {e}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn fit_text(output: &FitOutput) -> String {
    let r = &output.report;
    let mut out = format!("model      {}\n", r.model);
    out.push_str(&format!("theta_hat  {:?}\n", r.theta_hat));
    out.push_str(&format!("criterion  {:.6}\n", r.criterion));
    if let Some(h) = r.bandwidth {
        out.push_str(&format!("bandwidth  {h}\n"));
    }
    out.push_str(&format!("masses     {:?}\n", r.weights.masses()));
    out.push_str(&format!("trimmed    {}\n", r.trimmed));
    if let Some(v) = &r.variance {
        out.push_str(&format!("E^2        {:.6}\n", v.mse_hat));
        for (j, row) in v.v_hat.iter().enumerate() {
            out.push_str(&format!("V^[{j}]      {row:?}\n"));
        }
    }
    out
}

fn simulation_config(args: &SimulateArgs) -> Result<SimulationConfig> {
    let mut config = match &args.config {
        Some(path) => serde_json::from_str(&read_text(path)?)
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?,
        None => SimulationConfig::design(LIGHT_CENSORING_SCALE),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(reps) = args.reps {
        config.reps = reps;
    }
    if let Some(n) = args.n {
        config.n = n;
    }
    if let Some(p) = args.pipeline {
        config.pipeline = p.into();
    }
    if let Some(k) = args.kernel {
        config.kernel = k;
    }
    if let Some(h) = args.bandwidth {
        config.bandwidth = h;
    }
    if let Some(g) = &args.h_grid {
        config.h_grid = parse_h_grid(g)?;
    }
    if let Some(path) = &args.weight_lattice {
        config.lattice = Some(load_lattice(path)?);
    }
    if let Some(o) = args.objective {
        config.objective = o.into();
    }
    config.validate()?;
    Ok(config)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<u8> {
    resolve_seed(args.seed, args.require_seed)?;
    let config = simulation_config(args)?;
    announce(&config)?;
    let output = run_replications(&config, args.jobs)?;
    let summary_json = to_json(&SummaryFile::from(&output))?;
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        let csv = records_csv(&output)?;
        write_atomic(&dir.join("records.csv"), csv.as_bytes())?;
        write_atomic(&dir.join("summary.json"), summary_json.as_bytes())?;
    }
    match args.format {
        Format::Json => print!("{summary_json}"),
        Format::Text => print!("{}", summary_text(&output)),
    }
    Ok(0)
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    config: &'a SimulationConfig,
    summary: &'a crate::simulation::ReplicationSummary,
}

impl<'a> From<&'a SimulationOutput> for SummaryFile<'a> {
    fn from(output: &'a SimulationOutput) -> Self {
        Self {
            config: &output.config,
            summary: &output.summary,
        }
    }
}

fn summary_text(output: &SimulationOutput) -> String {
    let s = &output.summary;
    let mut out = format!(
        "replications {} (failed {}), censoring {:.3}, events/subject {:.2}\n",
        s.total, s.failures, s.censoring_fraction, s.mean_events_per_subject
    );
    out.push_str(&format!("{:<12} {:>8}  {:<32} {}\n", "arm", "mse", "bias", "variance diagonal"));
    for arm in &s.arms {
        let diag: Vec<String> = (0..arm.variance.len()).map(|j| format!("{:.4}", arm.variance[j][j])).collect();
        let bias: Vec<String> = arm.bias.iter().map(|b| format!("{b:.4}")).collect();
        out.push_str(&format!(
            "{:<12} {:>8.4}  {:<32} {}\n",
            arm.arm,
            arm.mse,
            bias.join(" "),
            diag.join(" ")
        ));
        if let Some(m) = &arm.mean_selected_masses {
            let m: Vec<String> = m.iter().map(|v| format!("{v:.3}")).collect();
            out.push_str(&format!("{:<12} masses {}\n", "", m.join(" ")));
        }
    }
    out
}

fn cmd_reproduce(args: &ReproduceArgs) -> Result<u8> {
    let seed = resolve_seed(args.seed, args.require_seed)?.unwrap_or(42);
    let mut configs = table_configs(args.table, seed)?;
    for (_, config) in configs.iter_mut() {
        if let Some(reps) = args.reps {
            config.reps = reps;
        }
        if let Some(n) = args.n {
            config.n = n;
        }
        if let Some(o) = args.objective {
            config.objective = o.into();
        }
        config.validate()?;
    }
    announce(&configs)?;
    let runs = configs
        .iter()
        .map(|(label, config)| Ok((label.clone(), run_replications(config, args.jobs)?.summary)))
        .collect::<Result<Vec<_>>>()?;
    let rows = compare_table(args.table, &runs)?;
    let report = TableReport {
        table: args.table,
        runs,
        rows,
    };
    let json = to_json(&report)?;
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write_atomic(&dir.join("report.json"), json.as_bytes())?;
    }
    match args.format {
        Format::Json => print!("{json}"),
        Format::Text => print!("{}", report.to_text()),
    }
    Ok(if report.all_pass() { 0 } else { EXIT_ACCEPTANCE })
}
