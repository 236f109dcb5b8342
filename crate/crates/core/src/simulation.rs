//! Monte-Carlo harness: data generation under the Poisson/Weibull design, replication
//! runs, summaries and table reproduction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, Weibull};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criteria::{
    CriterionContext, FitOptions, FitReport, IndexMeanModel, ThetaDomain, TrimmingPlan,
};
use crate::data::{dot, validate_sample, Sample, Subject, TiePolicy};
use crate::error::{Error, Result};
use crate::inference::{kernel_influence, select_with_pilot, SelectionObjective};
use crate::kernel::{KernelFamily, KernelSpec};
use crate::measure::{design_lattice, design_support, DiscreteMeasure, FIXED_HEAD};
use crate::survival::kaplan_meier_censoring;

/// Weibull law with survival `exp(-(t / scale)^shape)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeibullLaw {
    pub shape: f64,
    pub scale: f64,
}

impl WeibullLaw {
    pub fn new(shape: f64, scale: f64) -> Self {
        Self { shape, scale }
    }

    fn distribution(&self) -> Result<Weibull<f64>> {
        Weibull::new(self.scale, self.shape)
            .map_err(|e| Error::InvalidConfig(format!("weibull({}, {}): {e}", self.shape, self.scale)))
    }
}

/// Estimation run on each simulated sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    /// Single-index fit with the fixed weight measure.
    Fixed,
    /// Adaptive weight measure selected from the lattice.
    Adaptive,
    /// Fixed and adaptive fits on the same samples.
    Compare,
    /// Joint `(theta, h)` selection over the bandwidth grid, fixed weights.
    AdaptiveBandwidth,
    /// Parametric fit of `(theta'z + intercept) t`.
    Parametric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub theta0: Vec<f64>,
    pub intercept: f64,
    /// Each covariate is uniform on `[covariate_low, covariate_high]`.
    pub covariate_low: f64,
    pub covariate_high: f64,
    pub death: WeibullLaw,
    pub censoring: WeibullLaw,
    pub pipeline: Pipeline,
    pub kernel: KernelFamily,
    pub bandwidth: f64,
    pub h_grid: Vec<f64>,
    pub weights: DiscreteMeasure,
    /// Candidate measures for the adaptive pipelines; the standard lattice when absent.
    #[serde(default)]
    pub lattice: Option<Vec<DiscreteMeasure>>,
    #[serde(default)]
    pub objective: SelectionObjective,
    #[serde(default)]
    pub domain: Option<ThetaDomain>,
    #[serde(default)]
    pub trimming: TrimmingPlan,
    #[serde(default)]
    pub fit: FitOptions,
    /// Attach plug-in variance reports to the fixed-weight fits.
    #[serde(default)]
    pub with_variance: bool,
}

impl SimulationConfig {
    /// The standard design at censoring scale `censoring_scale`.
    pub fn design(censoring_scale: f64) -> Self {
        Self {
            n: 100,
            reps: 100,
            seed: 42,
            theta0: vec![1.0, 1.6, 1.25, 0.7],
            intercept: 5.0,
            covariate_low: 1.0,
            covariate_high: 2.0,
            death: WeibullLaw::new(10.0, 1.09),
            censoring: WeibullLaw::new(4.0, censoring_scale),
            pipeline: Pipeline::Compare,
            kernel: KernelFamily::Epanechnikov,
            bandwidth: 0.2,
            h_grid: vec![0.05, 0.1, 0.15, 0.2, 0.25, 0.3],
            weights: DiscreteMeasure::uniform(design_support()).expect("valid support"),
            lattice: None,
            objective: SelectionObjective::default(),
            domain: None,
            trimming: TrimmingPlan::default(),
            fit: FitOptions::default(),
            with_variance: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n < 2 {
            return bad("n must be at least 2");
        }
        if self.reps < 1 {
            return bad("reps must be at least 1");
        }
        if self.theta0.first() != Some(&1.0) {
            return bad("theta0 must start with 1");
        }
        if self.theta0.iter().any(|v| !v.is_finite()) || !self.intercept.is_finite() {
            return bad("theta0 and intercept must be finite");
        }
        if !(self.covariate_low < self.covariate_high) {
            return bad("covariate range is empty");
        }
        for law in [self.death, self.censoring] {
            if !(law.shape > 0.0 && law.scale > 0.0 && law.shape.is_finite() && law.scale.is_finite()) {
                return bad("weibull shape and scale must be positive");
            }
        }
        KernelSpec::new(self.kernel, self.bandwidth)?;
        crate::criteria::dedup_grid(&self.h_grid)?;
        if let Some(d) = &self.domain {
            if d.free_dim() != self.theta0.len() - 1 {
                return bad("domain dimension does not match theta0");
            }
        }
        if matches!(self.lattice.as_deref(), Some([])) {
            return bad("empty weight lattice");
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.theta0.len()
    }

    pub fn domain(&self) -> ThetaDomain {
        self.domain.clone().unwrap_or_else(|| ThetaDomain::default_for(self.dim()))
    }

    pub fn lattice(&self) -> Vec<DiscreteMeasure> {
        self.lattice.clone().unwrap_or_else(design_lattice)
    }

    pub fn kernel_spec(&self) -> Result<KernelSpec> {
        KernelSpec::new(self.kernel, self.bandwidth)
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Generator for subject `subject` of replication `rep`, independent of scheduling.
pub fn subject_stream(seed: u64, rep: u64, subject: u64) -> ChaCha8Rng {
    let key = splitmix(splitmix(splitmix(seed) ^ rep) ^ subject);
    ChaCha8Rng::seed_from_u64(key)
}

/// A simulated subject together with its latent terminal and censoring times.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSubject {
    pub subject: Subject,
    pub death_time: f64,
    pub censoring_time: f64,
}

pub fn generate_subject(config: &SimulationConfig, rng: &mut ChaCha8Rng) -> Result<GeneratedSubject> {
    let covariates: Vec<f64> = (0..config.dim())
        .map(|_| config.covariate_low + (config.covariate_high - config.covariate_low) * rng.random::<f64>())
        .collect();
    let death_time = config.death.distribution()?.sample(rng);
    let censoring_time = config.censoring.distribution()?.sample(rng);
    let observation_time = death_time.min(censoring_time);
    let rate = (dot(&config.theta0, &covariates) + config.intercept) * observation_time;
    let count = if rate > 0.0 {
        Poisson::new(rate)
            .map_err(|e| Error::InvalidConfig(format!("poisson({rate}): {e}")))?
            .sample(rng) as usize
    } else {
        0
    };
    let mut events: Vec<f64> = (0..count)
        .map(|_| observation_time * (1.0 - rng.random::<f64>()))
        .collect();
    events.sort_by(f64::total_cmp);
    Ok(GeneratedSubject {
        subject: Subject::new(observation_time, death_time <= censoring_time, covariates, events),
        death_time,
        censoring_time,
    })
}

/// The sample of replication `rep`.
pub fn generate_sample(config: &SimulationConfig, rep: u64) -> Result<Sample> {
    let subjects = (0..config.n)
        .map(|i| {
            let mut rng = subject_stream(config.seed, rep, i as u64);
            generate_subject(config, &mut rng).map(|g| g.subject)
        })
        .collect::<Result<Vec<_>>>()?;
    validate_sample(subjects, TiePolicy::Reject)
}

/// Censoring fraction and mean observed events per subject over `subjects` draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub subjects: usize,
    pub censoring_fraction: f64,
    pub mean_events_per_subject: f64,
}

pub fn calibrate(config: &SimulationConfig, subjects: usize) -> Result<Calibration> {
    let mut censored = 0usize;
    let mut events = 0usize;
    for i in 0..subjects {
        let mut rng = subject_stream(config.seed, u64::MAX, i as u64);
        let g = generate_subject(config, &mut rng)?;
        censored += usize::from(!g.subject.death_observed);
        events += g.subject.event_times.len();
    }
    Ok(Calibration {
        subjects,
        censoring_fraction: censored as f64 / subjects as f64,
        mean_events_per_subject: events as f64 / subjects as f64,
    })
}

/// One estimate from one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmEstimate {
    pub arm: String,
    /// Free components of the estimate.
    pub theta_hat: Vec<f64>,
    pub masses: Vec<f64>,
    pub bandwidth: Option<f64>,
    pub criterion: f64,
    pub mse_hat: Option<f64>,
    pub v_diagonal: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub rep: usize,
    pub censoring_fraction: f64,
    pub mean_events_per_subject: f64,
    pub outcome: std::result::Result<Vec<ArmEstimate>, String>,
}

fn estimate(arm: &str, report: &FitReport) -> ArmEstimate {
    ArmEstimate {
        arm: arm.to_string(),
        theta_hat: report.free_theta().to_vec(),
        masses: report.weights.masses().to_vec(),
        bandwidth: report.bandwidth,
        criterion: report.criterion,
        mse_hat: report.variance.as_ref().map(|v| v.mse_hat),
        v_diagonal: report
            .variance
            .as_ref()
            .map(|v| (0..v.v_hat.len()).map(|k| v.v_hat[k][k]).collect()),
    }
}

/// Runs the configured pipeline on one sample.
pub fn run_pipeline(config: &SimulationConfig, sample: &Sample) -> Result<Vec<ArmEstimate>> {
    let fit = kaplan_meier_censoring(sample)?;
    let ctx = CriterionContext::new(sample, &fit, &config.weights)?;
    let domain = config.domain();
    let spec = config.kernel_spec()?;
    let plan = &config.trimming;
    let options = &config.fit;
    let fixed = |with_variance: bool| -> Result<FitReport> {
        let mut report = ctx.fit_semiparametric(&spec, &domain, plan, options)?;
        if with_variance {
            let table = kernel_influence(&ctx, &report.theta_hat, &spec, options.leave_one_out)?;
            report.variance = Some(table.variance(&config.weights)?);
        }
        Ok(report)
    };
    match config.pipeline {
        Pipeline::Fixed => Ok(vec![estimate("fixed-w", &fixed(config.with_variance)?)]),
        Pipeline::Adaptive | Pipeline::Compare => {
            let pilot = fixed(config.with_variance)?;
            let selection = select_with_pilot(
                &ctx,
                pilot.clone(),
                &config.lattice(),
                &spec,
                &domain,
                plan,
                options,
                config.objective,
            )?;
            let adaptive = estimate("adaptive-w", &selection.report);
            if config.pipeline == Pipeline::Compare {
                Ok(vec![estimate("fixed-w", &pilot), adaptive])
            } else {
                Ok(vec![adaptive])
            }
        }
        Pipeline::AdaptiveBandwidth => {
            let report = ctx.fit_joint_theta_h(config.kernel, &config.h_grid, &domain, plan, options)?;
            Ok(vec![estimate("adaptive-h", &report)])
        }
        Pipeline::Parametric => {
            let model = IndexMeanModel::linear(config.intercept);
            let report = ctx.fit_parametric(&model, &domain, &options.optimizer)?;
            Ok(vec![estimate("parametric", &report)])
        }
    }
}

fn run_one(config: &SimulationConfig, rep: usize) -> ReplicationRecord {
    let sample = match generate_sample(config, rep as u64) {
        Ok(s) => s,
        Err(e) => {
            return ReplicationRecord {
                rep,
                censoring_fraction: f64::NAN,
                mean_events_per_subject: f64::NAN,
                outcome: Err(e.to_string()),
            }
        }
    };
    ReplicationRecord {
        rep,
        censoring_fraction: sample.censoring_fraction(),
        mean_events_per_subject: sample.total_events() as f64 / sample.len() as f64,
        outcome: run_pipeline(config, &sample).map_err(|e| e.to_string()),
    }
}

/// Bias, covariance and mean squared error of one estimator across replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub replications: usize,
    pub bias: Vec<f64>,
    /// Empirical covariance with divisor equal to the replication count.
    pub variance: Vec<Vec<f64>>,
    pub mse: f64,
    pub mean_selected_masses: Option<Vec<f64>>,
    pub mean_bandwidth: Option<f64>,
    pub mean_v_diagonal: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSummary {
    pub total: usize,
    pub failures: usize,
    pub arms: Vec<ArmSummary>,
    pub mean_events_per_subject: f64,
    pub censoring_fraction: f64,
}

impl ReplicationSummary {
    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.arm == name)
    }
}

/// `(bias, covariance, mse)` of `estimates` around `truth`; covariance divisor `R`, so
/// that `mse = |bias|^2 + trace(covariance)`.
pub fn summarize_estimates(estimates: &[Vec<f64>], truth: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>, f64) {
    let r = estimates.len() as f64;
    let p = truth.len();
    let mean: Vec<f64> = (0..p)
        .map(|j| estimates.iter().map(|e| e[j]).sum::<f64>() / r)
        .collect();
    let bias: Vec<f64> = mean.iter().zip(truth).map(|(m, t)| m - t).collect();
    let variance: Vec<Vec<f64>> = (0..p)
        .map(|a| {
            (0..p)
                .map(|b| {
                    estimates
                        .iter()
                        .map(|e| (e[a] - mean[a]) * (e[b] - mean[b]))
                        .sum::<f64>()
                        / r
                })
                .collect()
        })
        .collect();
    let mse = estimates
        .iter()
        .map(|e| e.iter().zip(truth).map(|(x, t)| (x - t) * (x - t)).sum::<f64>())
        .sum::<f64>()
        / r;
    (bias, variance, mse)
}

fn mean_vectors<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Option<Vec<f64>> {
    let mut total: Option<Vec<f64>> = None;
    let mut count = 0usize;
    for row in rows {
        let acc = total.get_or_insert_with(|| vec![0.0; row.len()]);
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
        count += 1;
    }
    total.map(|t| t.into_iter().map(|v| v / count as f64).collect())
}

pub fn summarize(config: &SimulationConfig, records: &[ReplicationRecord]) -> ReplicationSummary {
    let truth = &config.theta0[1..];
    let ok: Vec<&Vec<ArmEstimate>> = records.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
    let names: Vec<String> = ok
        .first()
        .map(|arms| arms.iter().map(|a| a.arm.clone()).collect())
        .unwrap_or_default();
    let adaptive_weights = matches!(config.pipeline, Pipeline::Adaptive | Pipeline::Compare);
    let arms = names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let picks: Vec<&ArmEstimate> = ok.iter().map(|arms| &arms[k]).collect();
            let thetas: Vec<Vec<f64>> = picks.iter().map(|e| e.theta_hat.clone()).collect();
            let (bias, variance, mse) = summarize_estimates(&thetas, truth);
            let masses = (adaptive_weights && name == "adaptive-w")
                .then(|| mean_vectors(picks.iter().map(|e| &e.masses[FIXED_HEAD.min(e.masses.len())..])))
                .flatten();
            let bandwidths: Vec<f64> = picks.iter().filter_map(|e| e.bandwidth).collect();
            let mean_bandwidth = (config.pipeline == Pipeline::AdaptiveBandwidth && !bandwidths.is_empty())
                .then(|| bandwidths.iter().sum::<f64>() / bandwidths.len() as f64);
            ArmSummary {
                arm: name.clone(),
                replications: picks.len(),
                bias,
                variance,
                mse,
                mean_selected_masses: masses,
                mean_bandwidth,
                mean_v_diagonal: mean_vectors(picks.iter().filter_map(|e| e.v_diagonal.as_deref())),
            }
        })
        .collect();
    let generated: Vec<&ReplicationRecord> = records.iter().filter(|r| r.censoring_fraction.is_finite()).collect();
    let count = generated.len().max(1) as f64;
    ReplicationSummary {
        total: records.len(),
        failures: records.len() - ok.len(),
        arms,
        mean_events_per_subject: generated.iter().map(|r| r.mean_events_per_subject).sum::<f64>() / count,
        censoring_fraction: generated.iter().map(|r| r.censoring_fraction).sum::<f64>() / count,
    }
}

/// Largest tolerated share of failed replications.
pub const MAX_FAILURE_RATE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationOutput {
    pub config: SimulationConfig,
    pub summary: ReplicationSummary,
    pub records: Vec<ReplicationRecord>,
}

/// Runs all replications on `jobs` worker threads. Results do not depend on `jobs`.
pub fn run_replications(config: &SimulationConfig, jobs: usize) -> Result<SimulationOutput> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let records: Vec<ReplicationRecord> =
        pool.install(|| (0..config.reps).into_par_iter().map(|r| run_one(config, r)).collect());
    let summary = summarize(config, &records);
    if summary.failures as f64 > MAX_FAILURE_RATE * records.len() as f64 {
        return Err(Error::ExcessiveFailures {
            failed: summary.failures,
            total: records.len(),
        });
    }
    Ok(SimulationOutput {
        config: config.clone(),
        summary,
        records,
    })
}

/// Per-replication CSV: one row per (replication, arm).
pub fn records_csv(output: &SimulationOutput) -> Result<String> {
    let p = output.config.dim() - 1;
    let k = output.config.weights.support().len();
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["rep".to_string(), "arm".to_string(), "status".to_string()];
    header.extend((1..=p).map(|j| format!("theta_{j}")));
    header.extend((1..=k).map(|j| format!("mass_{j}")));
    header.extend(["h", "criterion", "censoring_fraction", "mean_events"].map(String::from));
    let csv_err = |e: csv::Error| Error::InvalidConfig(format!("csv output: {e}"));
    writer.write_record(&header).map_err(csv_err)?;
    for record in &output.records {
        let tail = [
            record.censoring_fraction.to_string(),
            record.mean_events_per_subject.to_string(),
        ];
        match &record.outcome {
            Ok(arms) => {
                for arm in arms {
                    let mut row = vec![record.rep.to_string(), arm.arm.clone(), "ok".to_string()];
                    row.extend(arm.theta_hat.iter().map(f64::to_string));
                    let mut masses: Vec<String> = arm.masses.iter().map(f64::to_string).collect();
                    masses.resize(k, String::new());
                    row.extend(masses);
                    row.push(arm.bandwidth.map(|h| h.to_string()).unwrap_or_default());
                    row.push(arm.criterion.to_string());
                    row.extend(tail.iter().cloned());
                    writer.write_record(&row).map_err(csv_err)?;
                }
            }
            Err(message) => {
                let mut row = vec![record.rep.to_string(), String::new(), format!("failed: {message}")];
                row.extend(std::iter::repeat_n(String::new(), p + k + 2));
                row.extend(tail.iter().cloned());
                writer.write_record(&row).map_err(csv_err)?;
            }
        }
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::InvalidConfig(format!("csv output: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One line of a table comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub quantity: String,
    pub target: Option<f64>,
    pub reproduced: f64,
    /// Accepted interval; `None` for informational rows.
    pub accepted: Option<(f64, f64)>,
    pub pass: bool,
}

impl ComparisonRow {
    fn checked(quantity: impl Into<String>, target: f64, reproduced: f64, lo: f64, hi: f64) -> Self {
        Self {
            quantity: quantity.into(),
            target: Some(target),
            reproduced,
            accepted: Some((lo, hi)),
            pass: (lo..=hi).contains(&reproduced),
        }
    }

    fn info(quantity: impl Into<String>, target: Option<f64>, reproduced: f64) -> Self {
        Self {
            quantity: quantity.into(),
            target,
            reproduced,
            accepted: None,
            pass: true,
        }
    }

    fn flag(quantity: impl Into<String>, holds: bool) -> Self {
        Self {
            quantity: quantity.into(),
            target: Some(1.0),
            reproduced: if holds { 1.0 } else { 0.0 },
            accepted: Some((1.0, 1.0)),
            pass: holds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableReport {
    pub table: u8,
    pub runs: Vec<(String, ReplicationSummary)>,
    pub rows: Vec<ComparisonRow>,
}

impl TableReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "table {}\n{:<40} {:>10} {:>12} {:>20}  {}\n",
            self.table, "quantity", "target", "reproduced", "accepted", "status"
        );
        for row in &self.rows {
            let target = row.target.map_or("-".to_string(), |v| format!("{v:.4}"));
            let accepted = row
                .accepted
                .map_or("-".to_string(), |(a, b)| format!("[{a:.3}, {b:.3}]"));
            let status = match (row.accepted.is_some(), row.pass) {
                (false, _) => "info",
                (true, true) => "PASS",
                (true, false) => "FAIL",
            };
            out.push_str(&format!(
                "{:<40} {:>10} {:>12.4} {:>20}  {}\n",
                row.quantity, target, row.reproduced, accepted, status
            ));
        }
        out
    }
}

/// Censoring scales giving the two censoring levels of the design.
pub const LIGHT_CENSORING_SCALE: f64 = 1.38;
pub const HEAVY_CENSORING_SCALE: f64 = 1.0;

struct WeightTargets {
    fixed_mse: (f64, f64, f64),
    adaptive_mse: (f64, f64, f64),
    fixed_bias: [f64; 3],
    adaptive_bias: [f64; 3],
    masses: [f64; 4],
}

const TABLE_ONE: WeightTargets = WeightTargets {
    fixed_mse: (1.264, 0.85, 1.70),
    adaptive_mse: (0.685, 0.45, 0.95),
    fixed_bias: [-0.322, -0.198, -0.02],
    adaptive_bias: [-0.129, -0.162, -0.042],
    masses: [0.777, 0.652, 0.607, 0.535],
};

const TABLE_TWO: WeightTargets = WeightTargets {
    fixed_mse: (1.49, 1.0, 2.0),
    adaptive_mse: (0.843, 0.55, 1.15),
    fixed_bias: [-0.428, -0.324, -0.05],
    adaptive_bias: [-0.276, -0.287, -0.096],
    masses: [0.782, 0.682, 0.575, 0.487],
};

/// Tolerance on each mean selected tail mass.
pub const MASS_TOLERANCE: f64 = 0.15;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn weight_rows(summary: &ReplicationSummary, targets: &WeightTargets) -> Result<Vec<ComparisonRow>> {
    let missing = || Error::InvalidConfig("summary lacks an expected arm".into());
    let fixed = summary.arm("fixed-w").ok_or_else(missing)?;
    let adaptive = summary.arm("adaptive-w").ok_or_else(missing)?;
    let (t, lo, hi) = targets.fixed_mse;
    let mut rows = vec![ComparisonRow::checked("fixed-w mse", t, fixed.mse, lo, hi)];
    let (t, lo, hi) = targets.adaptive_mse;
    rows.push(ComparisonRow::checked("adaptive-w mse", t, adaptive.mse, lo, hi));
    rows.push(ComparisonRow::flag("adaptive-w mse below fixed-w", adaptive.mse < fixed.mse));
    rows.push(ComparisonRow::info("fixed-w |bias|", Some(norm(&targets.fixed_bias)), norm(&fixed.bias)));
    rows.push(ComparisonRow::info("adaptive-w |bias|", Some(norm(&targets.adaptive_bias)), norm(&adaptive.bias)));
    let masses = adaptive.mean_selected_masses.clone().unwrap_or_default();
    for (k, (&target, &got)) in targets.masses.iter().zip(&masses).enumerate() {
        let label = format!("mean mass at t = {:.1}", 0.9 + 0.1 * k as f64);
        rows.push(ComparisonRow::checked(label, target, got, target - MASS_TOLERANCE, target + MASS_TOLERANCE));
    }
    rows.push(ComparisonRow::flag(
        "mean masses nonincreasing",
        masses.windows(2).all(|w| w[0] >= w[1]),
    ));
    rows.push(ComparisonRow::info("censoring fraction", None, summary.censoring_fraction));
    rows.push(ComparisonRow::info("events per subject", None, summary.mean_events_per_subject));
    rows.push(ComparisonRow::info("failed replications", Some(0.0), summary.failures as f64));
    Ok(rows)
}

/// The configuration(s) behind table `table`.
pub fn table_configs(table: u8, seed: u64) -> Result<Vec<(String, SimulationConfig)>> {
    let with = |scale: f64, pipeline: Pipeline| SimulationConfig {
        seed,
        pipeline,
        ..SimulationConfig::design(scale)
    };
    match table {
        1 => Ok(vec![("30% censoring".into(), with(LIGHT_CENSORING_SCALE, Pipeline::Compare))]),
        2 => Ok(vec![("50% censoring".into(), with(HEAVY_CENSORING_SCALE, Pipeline::Compare))]),
        3 => Ok(vec![
            ("30% censoring".into(), with(LIGHT_CENSORING_SCALE, Pipeline::AdaptiveBandwidth)),
            ("50% censoring".into(), with(HEAVY_CENSORING_SCALE, Pipeline::AdaptiveBandwidth)),
        ]),
        other => Err(Error::InvalidConfig(format!("unknown table {other}; expected 1, 2 or 3"))),
    }
}

/// Comparison rows for already computed summaries of [`table_configs`].
pub fn compare_table(table: u8, runs: &[(String, ReplicationSummary)]) -> Result<Vec<ComparisonRow>> {
    match table {
        1 => weight_rows(&runs[0].1, &TABLE_ONE),
        2 => weight_rows(&runs[0].1, &TABLE_TWO),
        3 => {
            let targets = [
                (0.967, 0.65, 1.35, [-0.19, -0.155, 0.084]),
                (1.126, 0.75, 1.55, [-0.281, -0.309, -0.114]),
            ];
            let mut rows = Vec::new();
            for ((label, summary), (t, lo, hi, bias)) in runs.iter().zip(targets) {
                let arm = summary
                    .arm("adaptive-h")
                    .ok_or_else(|| Error::InvalidConfig("summary lacks adaptive-h arm".into()))?;
                rows.push(ComparisonRow::checked(format!("adaptive-h mse, {label}"), t, arm.mse, lo, hi));
                rows.push(ComparisonRow::info(format!("adaptive-h |bias|, {label}"), Some(norm(&bias)), norm(&arm.bias)));
                rows.push(ComparisonRow::info(format!("mean selected h, {label}"), None, arm.mean_bandwidth.unwrap_or(f64::NAN)));
                rows.push(ComparisonRow::info(format!("failed replications, {label}"), Some(0.0), summary.failures as f64));
            }
            Ok(rows)
        }
        other => Err(Error::InvalidConfig(format!("unknown table {other}; expected 1, 2 or 3"))),
    }
}

pub fn reproduce_table(table: u8, seed: u64, jobs: usize) -> Result<TableReport> {
    let configs = table_configs(table, seed)?;
    let runs = configs
        .iter()
        .map(|(label, config)| Ok((label.clone(), run_replications(config, jobs)?.summary)))
        .collect::<Result<Vec<_>>>()?;
    let rows = compare_table(table, &runs)?;
    Ok(TableReport { table, runs, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(pipeline: Pipeline) -> SimulationConfig {
        SimulationConfig {
            n: 40,
            reps: 3,
            seed: 7,
            pipeline,
            bandwidth: 0.5,
            h_grid: vec![0.4, 0.6],
            ..SimulationConfig::design(LIGHT_CENSORING_SCALE)
        }
    }

    #[test]
    fn zero_intensity_gives_no_events() {
        let config = SimulationConfig {
            theta0: vec![1.0, 0.0, 0.0, 0.0],
            intercept: -1.0,
            covariate_low: 0.0,
            covariate_high: 1.0,
            ..SimulationConfig::design(1.38)
        };
        for i in 0..500 {
            let g = generate_subject(&config, &mut subject_stream(1, 0, i)).unwrap();
            assert!(g.subject.event_times.is_empty());
        }
    }

    #[test]
    fn negligible_censoring() {
        let config = SimulationConfig {
            censoring: WeibullLaw::new(4.0, 1e6),
            ..SimulationConfig::design(1.38)
        };
        let c = calibrate(&config, 2000).unwrap();
        assert_eq!(c.censoring_fraction, 0.0);
    }

    #[test]
    fn latent_bookkeeping() {
        let config = SimulationConfig::design(1.0);
        for i in 0..2000 {
            let g = generate_subject(&config, &mut subject_stream(3, 1, i)).unwrap();
            assert_eq!(g.subject.death_observed, g.death_time <= g.censoring_time);
            assert_eq!(g.subject.observation_time, g.death_time.min(g.censoring_time));
            assert!(g.subject.event_times.iter().all(|&e| e > 0.0 && e <= g.subject.observation_time));
            assert!(g.subject.event_times.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn poisson_rate_matches_intensity() {
        // no censoring, long-lived subjects: N(1) / 1 estimates theta0'Z + intercept
        let config = SimulationConfig {
            death: WeibullLaw::new(10.0, 50.0),
            censoring: WeibullLaw::new(4.0, 1e6),
            ..SimulationConfig::design(1.38)
        };
        let mut ratio = 0.0;
        let m = 10_000;
        for i in 0..m {
            let g = generate_subject(&config, &mut subject_stream(5, 0, i)).unwrap();
            let rate = dot(&config.theta0, &g.subject.covariates) + config.intercept;
            ratio += g.subject.count(1.0) as f64 / rate;
        }
        assert!((ratio / m as f64 - 1.0).abs() < 0.05);
    }

    #[test]
    fn streams_are_independent_of_order() {
        let config = small(Pipeline::Fixed);
        let a = generate_sample(&config, 2).unwrap();
        let b = generate_sample(&config, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(generate_sample(&config, 1).unwrap(), a);
    }

    #[test]
    fn summarizer_identity_and_single_rep() {
        let truth = [1.6, 1.25, 0.7];
        let one = vec![vec![1.5, 1.3, 0.9]];
        let (bias, var, mse) = summarize_estimates(&one, &truth);
        assert_eq!(bias, vec![1.5 - 1.6, 1.3 - 1.25, 0.9 - 0.7]);
        assert!(var.iter().flatten().all(|&v| v == 0.0));
        assert!((mse - norm(&bias).powi(2)).abs() < 1e-15);

        let many: Vec<Vec<f64>> = (0..37)
            .map(|k| vec![1.0 + 0.03 * k as f64, 2.0 - 0.02 * (k % 5) as f64, 0.5 + 0.01 * (k * k % 7) as f64])
            .collect();
        let (bias, var, mse) = summarize_estimates(&many, &truth);
        let trace: f64 = (0..3).map(|k| var[k][k]).sum();
        assert!((mse - norm(&bias).powi(2) - trace).abs() < 1e-10);
    }

    #[test]
    fn published_decomposition_is_consistent() {
        let bias = TABLE_ONE.fixed_bias;
        let trace = 0.452 + 0.42 + 0.249;
        assert!((norm(&bias).powi(2) + trace - 1.264).abs() < 1e-3);
    }

    #[test]
    fn parallel_runs_match_serial() {
        let config = small(Pipeline::Compare);
        let a = run_replications(&config, 1).unwrap();
        let b = run_replications(&config, 3).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(records_csv(&a).unwrap(), records_csv(&b).unwrap());
        let fixed = a.summary.arm("fixed-w").unwrap();
        let trace: f64 = (0..3).map(|k| fixed.variance[k][k]).sum();
        assert!((fixed.mse - norm(&fixed.bias).powi(2) - trace).abs() < 1e-10);
        assert_eq!(a.summary.arm("adaptive-w").unwrap().mean_selected_masses.as_ref().unwrap().len(), 4);
    }

    #[test]
    fn other_pipelines_run() {
        for pipeline in [Pipeline::AdaptiveBandwidth, Pipeline::Parametric, Pipeline::Fixed] {
            let out = run_replications(&SimulationConfig { reps: 1, ..small(pipeline) }, 1).unwrap();
            assert_eq!(out.summary.failures, 0);
            let arm = &out.summary.arms[0];
            assert!(arm.variance.iter().flatten().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn config_validation_and_json() {
        let config = SimulationConfig::design(1.38);
        config.validate().unwrap();
        let text = serde_json::to_string(&config).unwrap();
        let back: SimulationConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, config);
        assert!(SimulationConfig { n: 1, ..config.clone() }.validate().is_err());
        assert!(SimulationConfig { theta0: vec![2.0, 1.0], ..config.clone() }.validate().is_err());
        assert!(SimulationConfig { death: WeibullLaw::new(0.0, 1.0), ..config }.validate().is_err());
        assert!(table_configs(4, 1).is_err());
    }
}
