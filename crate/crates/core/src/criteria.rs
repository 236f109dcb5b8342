//! Weighted least-squares criteria for the parametric and single-index models, and the
//! estimators minimizing them.
//!
//! Both criteria have the form
//!
//! ```text
//! M(theta) = n^-1 sum_i J_i sum_k w_k [ m_i(t_k)^2 - 2 Y^_i(t_k) m_i(t_k) ]
//! ```
//!
//! over the atoms `t_k <= T_(n)` of the weight measure, where `m_i` is either the
//! parametric mean `mu0(t, Z_i; theta)` (with `J_i = 1`) or the leave-one-out kernel
//! estimate `mu^_theta(t, theta'Z_i)`.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::inference::VarianceReport;
use crate::kernel::{CovariateBox, IndexSmoother, KernelFamily, KernelSpec, SmoothedValues, TrimmingSpec};
use crate::measure::DiscreteMeasure;
use crate::optimize::{minimize_in_box, OptimizerConfig};
use crate::survival::CensoringFit;

/// A parametric mean function `mu0(t, z; theta)`, with gradient in the free components
/// `theta[1..]`.
pub trait ParametricMean: Send + Sync {
    fn mean(&self, t: f64, z: &[f64], theta: &[f64]) -> f64;

    /// Gradient with respect to `theta[1..]`, written into `out`.
    fn gradient(&self, t: f64, z: &[f64], theta: &[f64], out: &mut [f64]);

    fn label(&self) -> String;
}

/// `mu0(t, z; theta) = (theta'z + intercept) * t^time_power`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndexMeanModel {
    pub intercept: f64,
    #[serde(default = "unit_power")]
    pub time_power: f64,
}

fn unit_power() -> f64 {
    1.0
}

impl IndexMeanModel {
    /// `(theta'z + intercept) * t`.
    pub fn linear(intercept: f64) -> Self {
        Self {
            intercept,
            time_power: 1.0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)
            .map_err(|e| Error::Schema(format!("mean model: {e}")))?;
        if !model.intercept.is_finite() || !(model.time_power.is_finite() && model.time_power > 0.0) {
            return Err(Error::Schema("mean model needs finite intercept and positive time_power".into()));
        }
        Ok(model)
    }

    fn time_factor(&self, t: f64) -> f64 {
        if self.time_power == 1.0 {
            t
        } else {
            t.powf(self.time_power)
        }
    }
}

impl ParametricMean for IndexMeanModel {
    fn mean(&self, t: f64, z: &[f64], theta: &[f64]) -> f64 {
        (crate::data::dot(theta, z) + self.intercept) * self.time_factor(t)
    }

    fn gradient(&self, t: f64, z: &[f64], _theta: &[f64], out: &mut [f64]) {
        let factor = self.time_factor(t);
        for (g, zj) in out.iter_mut().zip(&z[1..]) {
            *g = zj * factor;
        }
    }

    fn label(&self) -> String {
        if self.time_power == 1.0 {
            format!("linear(intercept={})", self.intercept)
        } else {
            format!("index-power(intercept={}, power={})", self.intercept, self.time_power)
        }
    }
}

/// Box for the free components of `theta`; the first component is fixed at one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ThetaDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.iter().zip(&upper).any(|(a, b)| !(a <= b)) {
            return Err(Error::InvalidConfig("theta domain is empty".into()));
        }
        Ok(Self { lower, upper })
    }

    /// `[0, 3]` for each of the `dim - 1` free components.
    pub fn default_for(dim: usize) -> Self {
        Self {
            lower: vec![0.0; dim.saturating_sub(1)],
            upper: vec![3.0; dim.saturating_sub(1)],
        }
    }

    pub fn free_dim(&self) -> usize {
        self.lower.len()
    }

    /// Intersection with the cube of half-width `half_width` around `center`.
    pub fn around(&self, center: &[f64], half_width: f64) -> Self {
        let lower = self
            .lower
            .iter()
            .zip(center)
            .map(|(lo, c)| lo.max(c - half_width))
            .collect();
        let upper = self
            .upper
            .iter()
            .zip(center)
            .map(|(hi, c)| hi.min(c + half_width))
            .collect();
        Self { lower, upper }
    }
}

/// `(1, free...)`.
pub fn full_theta(free: &[f64]) -> Vec<f64> {
    std::iter::once(1.0).chain(free.iter().copied()).collect()
}

/// Trimming used by the two-stage single-index fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrimmingPlan {
    /// Coordinate-wise quantile levels of the preliminary box.
    pub box_quantiles: (f64, f64),
    /// Explicit preliminary box; overrides `box_quantiles` when set.
    pub preliminary: Option<CovariateBox>,
    /// Rule for the second stage. `None` stops after the preliminary stage.
    pub second_stage: Option<TrimmingSpec>,
}

impl Default for TrimmingPlan {
    fn default() -> Self {
        Self {
            box_quantiles: (0.1, 0.9),
            preliminary: None,
            second_stage: Some(TrimmingSpec::DensityQuantile { quantile: 0.05 }),
        }
    }
}

impl TrimmingPlan {
    pub fn box_only() -> Self {
        Self {
            second_stage: None,
            ..Self::default()
        }
    }

    pub fn preliminary_box(&self, sample: &Sample) -> CovariateBox {
        self.preliminary.clone().unwrap_or_else(|| {
            CovariateBox::from_quantiles(sample, self.box_quantiles.0, self.box_quantiles.1)
        })
    }
}

/// Settings shared by the single-index fits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub optimizer: OptimizerConfig,
    pub leave_one_out: bool,
    /// Half-width of the second-stage search box around the preliminary estimate.
    pub local_half_width: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            leave_one_out: true,
            local_half_width: 0.5,
        }
    }
}

/// Criterion value at one grid bandwidth in the joint `(theta, h)` search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthEntry {
    pub bandwidth: f64,
    pub criterion: f64,
    pub theta_hat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub model: String,
    /// Full index vector, first component one.
    pub theta_hat: Vec<f64>,
    pub criterion: f64,
    pub converged: bool,
    pub iterations: usize,
    pub weights: DiscreteMeasure,
    pub kernel: Option<KernelFamily>,
    pub bandwidth: Option<f64>,
    pub preliminary_theta: Option<Vec<f64>>,
    /// Subjects excluded by trimming at the final estimate.
    pub trimmed: usize,
    pub bandwidth_path: Vec<BandwidthEntry>,
    pub variance: Option<VarianceReport>,
}

impl FitReport {
    pub fn free_theta(&self) -> &[f64] {
        &self.theta_hat[1..]
    }
}

/// Sample in canonical subject order together with the rescaled processes on the active
/// atoms `t_k <= T_(n)` of a weight measure.
#[derive(Debug, Clone)]
pub struct CriterionContext {
    sample: Sample,
    fit: CensoringFit,
    smoother: IndexSmoother,
    weights: DiscreteMeasure,
    masses: Vec<f64>,
}

/// Orders subjects by observation time (unique in a validated sample), making every sum
/// over subjects independent of input order.
fn canonical(sample: &Sample) -> Sample {
    let mut order: Vec<usize> = (0..sample.len()).collect();
    let subjects = sample.subjects();
    order.sort_by(|&a, &b| {
        subjects[a]
            .observation_time
            .total_cmp(&subjects[b].observation_time)
            .then_with(|| subjects[a].covariates.partial_cmp(&subjects[b].covariates).unwrap_or(std::cmp::Ordering::Equal))
    });
    sample.permuted(&order)
}

impl CriterionContext {
    pub fn new(sample: &Sample, fit: &CensoringFit, w: &DiscreteMeasure) -> Result<Self> {
        if sample.is_empty() {
            return Err(Error::EmptySample);
        }
        let sample = canonical(sample);
        let active = w.active_len(sample.max_observation_time());
        let smoother = IndexSmoother::new(&sample, fit, &w.support()[..active])?;
        Ok(Self {
            sample,
            fit: fit.clone(),
            smoother,
            weights: w.clone(),
            masses: w.masses()[..active].to_vec(),
        })
    }

    /// Same sample under a different weight measure; reuses the rescaled table when the
    /// active support is unchanged.
    pub fn reweighted(&self, w: &DiscreteMeasure) -> Result<Self> {
        let active = w.active_len(self.sample.max_observation_time());
        if w.support()[..active] != *self.smoother.grid() {
            return Self::new(&self.sample, &self.fit, w);
        }
        Ok(Self {
            sample: self.sample.clone(),
            fit: self.fit.clone(),
            smoother: self.smoother.clone(),
            weights: w.clone(),
            masses: w.masses()[..active].to_vec(),
        })
    }

    pub fn sample(&self) -> &Sample {
        &self.sample
    }

    pub fn censoring(&self) -> &CensoringFit {
        &self.fit
    }

    pub fn smoother(&self) -> &IndexSmoother {
        &self.smoother
    }

    pub fn weights(&self) -> &DiscreteMeasure {
        &self.weights
    }

    /// Masses of the active atoms.
    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn grid(&self) -> &[f64] {
        self.smoother.grid()
    }

    pub fn parametric_value(&self, theta: &[f64], model: &dyn ParametricMean) -> f64 {
        let grid = self.smoother.grid();
        let mut total = 0.0;
        for (i, s) in self.sample.subjects().iter().enumerate() {
            let y = self.smoother.rescaled_row(i);
            for k in 0..grid.len() {
                let m = model.mean(grid[k], &s.covariates, theta);
                total += self.masses[k] * (m * m - 2.0 * y[k] * m);
            }
        }
        total / self.sample.len() as f64
    }

    pub fn parametric_gradient(&self, theta: &[f64], model: &dyn ParametricMean) -> Vec<f64> {
        let grid = self.smoother.grid();
        let p = theta.len() - 1;
        let mut grad = vec![0.0; p];
        let mut g = vec![0.0; p];
        for (i, s) in self.sample.subjects().iter().enumerate() {
            let y = self.smoother.rescaled_row(i);
            for k in 0..grid.len() {
                let m = model.mean(grid[k], &s.covariates, theta);
                model.gradient(grid[k], &s.covariates, theta, &mut g);
                let scale = 2.0 * self.masses[k] * (m - y[k]);
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += scale * b;
                }
            }
        }
        let n = self.sample.len() as f64;
        grad.iter_mut().for_each(|v| *v /= n);
        grad
    }

    /// Trimming indicators given smoother output at the same `theta`.
    pub fn trim_mask(
        &self,
        spec: &KernelSpec,
        trim: &TrimmingSpec,
        leave_one_out: bool,
        smoothed: &SmoothedValues,
    ) -> Vec<bool> {
        let n = self.sample.len() as f64;
        let self_weight = if leave_one_out { spec.family.value(0.0) } else { 0.0 };
        let densities: Vec<f64> = smoothed
            .denominators
            .iter()
            .map(|d| (d + self_weight) / (n * spec.bandwidth))
            .collect();
        trim.mask_from_densities(&self.sample, &densities)
    }

    fn semiparametric_from(&self, smoothed: &SmoothedValues, mask: &[bool]) -> Result<f64> {
        if !mask.iter().any(|&j| j) {
            return Err(Error::AllTrimmed);
        }
        let k = self.masses.len();
        let mut total = 0.0;
        for (i, _) in mask.iter().enumerate().filter(|(_, &j)| j) {
            let y = self.smoother.rescaled_row(i);
            let mu = &smoothed.values[i * k..(i + 1) * k];
            for c in 0..k {
                total += self.masses[c] * (mu[c] * mu[c] - 2.0 * y[c] * mu[c]);
            }
        }
        Ok(total / self.sample.len() as f64)
    }

    /// Single-index criterion. Subjects with an empty kernel window enter with
    /// `mu^ = 0`.
    pub fn semiparametric_value(
        &self,
        theta: &[f64],
        spec: &KernelSpec,
        trim: &TrimmingSpec,
        leave_one_out: bool,
    ) -> Result<f64> {
        let mut out = SmoothedValues::default();
        self.smoother.evaluate(theta, spec, leave_one_out, false, &mut out);
        let mask = self.trim_mask(spec, trim, leave_one_out, &out);
        self.semiparametric_from(&out, &mask)
    }

    /// Gradient of the single-index criterion in the free components, holding the
    /// trimming indicators fixed at `theta`.
    pub fn semiparametric_gradient(
        &self,
        theta: &[f64],
        spec: &KernelSpec,
        trim: &TrimmingSpec,
        leave_one_out: bool,
    ) -> Result<Vec<f64>> {
        let mut out = SmoothedValues::default();
        self.smoother.evaluate(theta, spec, leave_one_out, true, &mut out);
        let mask = self.trim_mask(spec, trim, leave_one_out, &out);
        if !mask.iter().any(|&j| j) {
            return Err(Error::AllTrimmed);
        }
        let k = self.masses.len();
        let p = theta.len() - 1;
        let mut grad = vec![0.0; p];
        for (i, _) in mask.iter().enumerate().filter(|(_, &j)| j) {
            let y = self.smoother.rescaled_row(i);
            for c in 0..k {
                let mu = out.values[i * k + c];
                let scale = 2.0 * self.masses[c] * (mu - y[c]);
                let g = &out.gradients[(i * k + c) * p..(i * k + c + 1) * p];
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += scale * b;
                }
            }
        }
        let n = self.sample.len() as f64;
        grad.iter_mut().for_each(|v| *v /= n);
        Ok(grad)
    }

    pub fn fit_parametric(
        &self,
        model: &dyn ParametricMean,
        domain: &ThetaDomain,
        optimizer: &OptimizerConfig,
    ) -> Result<FitReport> {
        let objective = |free: &[f64]| self.parametric_value(&full_theta(free), model);
        let min = minimize_in_box(objective, &domain.lower, &domain.upper, optimizer)?;
        Ok(FitReport {
            model: format!("parametric:{}", model.label()),
            theta_hat: full_theta(&min.point),
            criterion: min.value,
            converged: min.converged,
            iterations: min.iterations,
            weights: self.weights.clone(),
            kernel: None,
            bandwidth: None,
            preliminary_theta: None,
            trimmed: 0,
            bandwidth_path: Vec::new(),
            variance: None,
        })
    }

    /// Minimizes the single-index criterion under a fixed trimming rule.
    pub fn minimize_semiparametric(
        &self,
        spec: &KernelSpec,
        trim: &TrimmingSpec,
        domain: &ThetaDomain,
        options: &FitOptions,
    ) -> Result<(Vec<f64>, f64, bool, usize)> {
        let loo = options.leave_one_out;
        let objective = |free: &[f64]| {
            self.semiparametric_value(&full_theta(free), spec, trim, loo)
                .unwrap_or(f64::INFINITY)
        };
        let min = minimize_in_box(objective, &domain.lower, &domain.upper, &options.optimizer)?;
        if !min.value.is_finite() {
            return Err(Error::AllTrimmed);
        }
        Ok((full_theta(&min.point), min.value, min.converged, min.iterations))
    }

    /// Two-stage single-index fit: preliminary box trimming over `domain`, then the
    /// second-stage rule over a box around the preliminary estimate.
    pub fn fit_semiparametric(
        &self,
        spec: &KernelSpec,
        domain: &ThetaDomain,
        plan: &TrimmingPlan,
        options: &FitOptions,
    ) -> Result<FitReport> {
        let first_rule = TrimmingSpec::PreliminarySet {
            bounds: plan.preliminary_box(&self.sample),
        };
        let (preliminary, mut value, mut converged, mut iterations) =
            self.minimize_semiparametric(spec, &first_rule, domain, options)?;
        let mut theta = preliminary.clone();
        let mut final_rule = first_rule;
        if let Some(rule) = &plan.second_stage {
            let local = domain.around(&preliminary[1..], options.local_half_width);
            let (t, v, c, it) = self.minimize_semiparametric(spec, rule, &local, options)?;
            theta = t;
            value = v;
            converged = c;
            iterations += it;
            final_rule = rule.clone();
        }
        let mut out = SmoothedValues::default();
        self.smoother.evaluate(&theta, spec, options.leave_one_out, false, &mut out);
        let trimmed = self
            .trim_mask(spec, &final_rule, options.leave_one_out, &out)
            .iter()
            .filter(|&&j| !j)
            .count();
        Ok(FitReport {
            model: "single-index".into(),
            theta_hat: theta,
            criterion: value,
            converged,
            iterations,
            weights: self.weights.clone(),
            kernel: Some(spec.family),
            bandwidth: Some(spec.bandwidth),
            preliminary_theta: Some(preliminary),
            trimmed,
            bandwidth_path: Vec::new(),
            variance: None,
        })
    }

    /// Fits at every bandwidth of the grid and keeps the pair with the smallest
    /// criterion; ties go to the smaller bandwidth.
    pub fn fit_joint_theta_h(
        &self,
        family: KernelFamily,
        h_grid: &[f64],
        domain: &ThetaDomain,
        plan: &TrimmingPlan,
        options: &FitOptions,
    ) -> Result<FitReport> {
        let grid = dedup_grid(h_grid)?;
        let mut best: Option<FitReport> = None;
        let mut path = Vec::with_capacity(grid.len());
        for &h in &grid {
            let report = self.fit_semiparametric(&KernelSpec::new(family, h)?, domain, plan, options)?;
            path.push(BandwidthEntry {
                bandwidth: h,
                criterion: report.criterion,
                theta_hat: report.theta_hat.clone(),
            });
            if best.as_ref().is_none_or(|b| report.criterion < b.criterion) {
                best = Some(report);
            }
        }
        let mut best = best.expect("grid is nonempty");
        best.bandwidth_path = path;
        Ok(best)
    }
}

/// Sorted, deduplicated bandwidth grid.
pub fn dedup_grid(h_grid: &[f64]) -> Result<Vec<f64>> {
    if h_grid.is_empty() {
        return Err(Error::InvalidConfig("empty bandwidth grid".into()));
    }
    if h_grid.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
        return Err(Error::InvalidConfig("bandwidths must be positive".into()));
    }
    let mut grid = h_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    Ok(grid)
}

/// `lo:step:hi` inclusive, with the end point snapped to guard against rounding.
pub fn parse_h_grid(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = text
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidConfig(format!("bad h grid `{text}`: {e}")))?;
    let [lo, step, hi] = parts[..] else {
        return Err(Error::InvalidConfig(format!("h grid `{text}` is not lo:step:hi")));
    };
    if !(lo > 0.0 && step > 0.0 && hi >= lo) {
        return Err(Error::InvalidConfig(format!("h grid `{text}` is empty")));
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=count)
        .map(|k| ((lo + k as f64 * step) * 1e10).round() / 1e10)
        .collect())
}

pub fn criterion_parametric(
    theta: &[f64],
    model: &dyn ParametricMean,
    w: &DiscreteMeasure,
    sample: &Sample,
    fit: &CensoringFit,
) -> Result<f64> {
    Ok(CriterionContext::new(sample, fit, w)?.parametric_value(theta, model))
}

pub fn fit_parametric(
    model: &dyn ParametricMean,
    w: &DiscreteMeasure,
    sample: &Sample,
    fit: &CensoringFit,
    domain: &ThetaDomain,
    optimizer: &OptimizerConfig,
) -> Result<FitReport> {
    CriterionContext::new(sample, fit, w)?.fit_parametric(model, domain, optimizer)
}

/// Single-index criterion with leave-one-out smoothing.
pub fn criterion_semiparametric(
    theta: &[f64],
    spec: &KernelSpec,
    w: &DiscreteMeasure,
    sample: &Sample,
    fit: &CensoringFit,
    trim: &TrimmingSpec,
) -> Result<f64> {
    CriterionContext::new(sample, fit, w)?.semiparametric_value(theta, spec, trim, true)
}

pub fn fit_semiparametric(
    spec: &KernelSpec,
    w: &DiscreteMeasure,
    sample: &Sample,
    fit: &CensoringFit,
    domain: &ThetaDomain,
    plan: &TrimmingPlan,
    options: &FitOptions,
) -> Result<FitReport> {
    CriterionContext::new(sample, fit, w)?.fit_semiparametric(spec, domain, plan, options)
}

#[allow(clippy::too_many_arguments)]
pub fn fit_joint_theta_h(
    family: KernelFamily,
    h_grid: &[f64],
    w: &DiscreteMeasure,
    sample: &Sample,
    fit: &CensoringFit,
    domain: &ThetaDomain,
    plan: &TrimmingPlan,
    options: &FitOptions,
) -> Result<FitReport> {
    CriterionContext::new(sample, fit, w)?.fit_joint_theta_h(family, h_grid, domain, plan, options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Subject;
    use crate::kernel::mu_hat;
    use crate::measure::design_support;
    use crate::survival::{kaplan_meier_censoring, rescaled_process};
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sample(n: usize, dim: usize, seed: u64, censor: bool) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let subjects = (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..dim).map(|_| 1.0 + rng.random::<f64>()).collect();
                let t = 0.8 + 0.7 * rng.random::<f64>();
                let delta = !censor || rng.random::<f64>() < 0.7;
                let rate = 3.0 + 2.0 * z.iter().sum::<f64>();
                let count = (rate * t * rng.random::<f64>()).round() as usize;
                let events = (0..count).map(|_| t * (1.0 - rng.random::<f64>())).collect();
                Subject::new(t, delta, z, events)
            })
            .collect();
        crate::data::validate_sample(subjects, crate::data::TiePolicy::Reject).unwrap()
    }

    #[test]
    fn single_atom_symbolic_value() {
        // n = 1, unit atom at t*, mu0 = theta * t
        let sample = Sample::new(vec![Subject::new(2.0, true, vec![1.0, 0.0], vec![0.3, 0.9])]).unwrap();
        let fit = kaplan_meier_censoring(&sample).unwrap();
        let w = DiscreteMeasure::new(vec![1.2], vec![1.0]).unwrap();
        let model = IndexMeanModel::linear(0.0);
        let theta = [1.0, 0.0];
        let got = criterion_parametric(&theta, &model, &w, &sample, &fit).unwrap();
        let expected = 1.2f64.powi(2) - 2.0 * 2.0 * 1.2;
        assert!((got - expected).abs() < 1e-14);
    }

    #[test]
    fn zero_mean_model_gives_zero() {
        struct Zero;
        impl ParametricMean for Zero {
            fn mean(&self, _: f64, _: &[f64], _: &[f64]) -> f64 {
                0.0
            }
            fn gradient(&self, _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
                out.iter_mut().for_each(|g| *g = 0.0);
            }
            fn label(&self) -> String {
                "zero".into()
            }
        }
        let sample = random_sample(30, 3, 1, true);
        let fit = kaplan_meier_censoring(&sample).unwrap();
        let w = DiscreteMeasure::uniform(design_support()).unwrap();
        assert_eq!(criterion_parametric(&[1.0, 0.5, 0.5], &Zero, &w, &sample, &fit).unwrap(), 0.0);
    }

    #[test]
    fn atoms_beyond_last_observation_are_dropped() {
        let sample = random_sample(20, 2, 3, true);
        let fit = kaplan_meier_censoring(&sample).unwrap();
        let model = IndexMeanModel::linear(5.0);
        let upper = sample.max_observation_time();
        let inside = DiscreteMeasure::new(vec![0.5, 1.0], vec![1.0, 0.5]).unwrap();
        let extended = DiscreteMeasure::new(vec![0.5, 1.0, upper + 0.1], vec![1.0, 0.5, 7.0]).unwrap();
        let a = criterion_parametric(&[1.0, 0.3], &model, &inside, &sample, &fit).unwrap();
        let b = criterion_parametric(&[1.0, 0.3], &model, &extended, &sample, &fit).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parametric_gradient_matches_differences() {
        let sample = random_sample(40, 3, 5, true);
        let fit = kaplan_meier_censoring(&sample).unwrap();
        let w = DiscreteMeasure::uniform(design_support()).unwrap();
        let ctx = CriterionContext::new(&sample, &fit, &w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for model in [IndexMeanModel::linear(5.0), IndexMeanModel { intercept: 2.0, time_power: 1.7 }] {
            for _ in 0..10 {
                let theta = full_theta(&[3.0 * rng.random::<f64>(), 3.0 * rng.random::<f64>()]);
                let g = ctx.parametric_gradient(&theta, &model);
                for j in 0..2 {
                    let e = 1e-5;
                    let mut p = theta.clone();
                    let mut m = theta.clone();
                    p[j + 1] += e;
                    m[j + 1] -= e;
                    let fd = (ctx.parametric_value(&p, &model) - ctx.parametric_value(&m, &model)) / (2.0 * e);
                    assert!((g[j] - fd).abs() / g[j].abs().max(1e-3) < 1e-4, "{} vs {fd}", g[j]);
                }
            }
        }
    }

    /// Normal equations of the quadratic criterion of the linear model.
    fn closed_form(sample: &Sample, fit: &CensoringFit, w: &DiscreteMeasure, intercept: f64) -> Vec<f64> {
        let p = sample.dim() - 1;
        let upper = sample.max_observation_time();
        let mut a = DMatrix::<f64>::zeros(p, p);
        let mut b = DVector::<f64>::zeros(p);
        for s in sample.subjects() {
            let y = rescaled_process(s, fit).unwrap();
            for (t, m) in w.atoms().filter(|(t, _)| *t <= upper) {
                let base = (s.covariates[0] + intercept) * t;
                let slope = DVector::from_iterator(p, s.covariates[1..].iter().map(|z| z * t));
                a += m * &slope * slope.transpose();
                b += m * (y.eval(t) - base) * &slope;
            }
        }
        a.lu().solve(&b).unwrap().iter().copied().collect()
    }

    #[test]
    fn linear_model_matches_normal_equations() {
        for (seed, censor) in [(11, false), (12, true), (13, true)] {
            let sample = random_sample(60, 4, seed, censor);
            let fit = kaplan_meier_censoring(&sample).unwrap();
            let w = DiscreteMeasure::new(design_support(), (1..=12).map(|k| 1.0 / k as f64).collect()).unwrap();
            let expected = closed_form(&sample, &fit, &w, 5.0);
            let domain = ThetaDomain::new(vec![-20.0; 3], vec![20.0; 3]).unwrap();
            let report = fit_parametric(&IndexMeanModel::linear(5.0), &w, &sample, &fit, &domain, &OptimizerConfig::default()).unwrap();
            assert!(report.converged);
            for (a, b) in report.free_theta().iter().zip(&expected) {
                assert!((a - b).abs() < 1e-5, "{:?} vs {expected:?}", report.free_theta());
            }
        }
    }

    #[test]
    fn linear_argmin_invariant_under_weight_scaling() {
        let sample = random_sample(50, 3, 21, true);
        let fit = kaplan_meier_censoring(&sample).unwrap();
        let w = DiscreteMeasure::uniform(design_support()).unwrap();
        let domain = ThetaDomain::new(vec![-20.0; 2], vec![20.0; 2]).unwrap();
        let model = IndexMeanModel::linear(5.0);
        let base = fit_parametric(&model, &w, &sample, &fit, &domain, &OptimizerConfig::default()).unwrap();
        for factor in [0.1, 3.0, 250.0] {
            let scaled = fit_parametric(&model, &w.scaled(factor).unwrap(), &sample, &fit, &domain, &OptimizerConfig::default()).unwrap();
            for (a, b) in base.free_theta().iter().zip(scaled.free_theta()) {
                assert!((a - b).abs() < 1e-5);
            }
            assert!((scaled.criterion - factor * base.criterion).abs() < 1e-6 * factor.max(1.0) * base.criterion.abs());
        }
    }

    #[test]
    fn fits_are_permutation_invariant() {
        let sample = random_sample(40, 3, 31, true);
        let mut order: Vec<usize> = (0..sample.len()).collect();
        order.reverse();
        order.swap(3, 17);
        let shuffled = sample.permuted(&order);
        let w = DiscreteMeasure::uniform(design_support()).unwrap();
        let fit_a = kaplan_meier_censoring(&sample).unwrap();
        let fit_b = kaplan_meier_censoring(&shuffled).unwrap();
        let domain = ThetaDomain::default_for(3);
        let model = IndexMeanModel::linear(5.0);
        let a = fit_parametric(&model, &w, &sample, &fit_a, &domain, &OptimizerConfig::default()).unwrap();
        let b = fit_parametric(&model, &w, &shuffled, &fit_b, &domain, &OptimizerConfig::default()).unwrap();
        assert_eq!(a.theta_hat, b.theta_hat);
        let spec = KernelSpec::new(KernelFamily::Epanechnikov, 0.5).unwrap();
        let opts = FitOptions::default();
        let a = fit_semiparametric(&spec, &w, &sample, &fit_a, &domain, &TrimmingPlan::default(), &opts).unwrap();
        let b = fit_semiparametric(&spec, &w, &shuffled, &fit_b, &domain, &TrimmingPlan::default(), &opts).unwrap();
        assert_eq!(a.theta_hat, b.theta_hat);
        assert_eq!(a.criterion, b.criterion);
    }

    #[test]
    fn criteria_additive_over_concatenation() {
        let first = random_sample(25, 2, 41, true);
        let second = random_sample(15, 2, 42, true);
        let joined = Sample::new(first.subjects().iter().chain(second.subjects()).cloned().collect()).unwrap();
        let fit = kaplan_meier_censoring(&joined).unwrap();
        let w = DiscreteMeasure::uniform(design_support()).unwrap();
        let model = IndexMeanModel::linear(5.0);
        let theta = [1.0, 0.8];
        // the censoring fit is shared, so only the subject sums differ
        let part = |s: &Sample| {
            let upper = joined.max_observation_time();
            s.subjects()
                .iter()
                .map(|subj| {
                    let y = rescaled_process(subj, &fit).unwrap();
                    w.atoms()
                        .filter(|(t, _)| *t <= upper)
                        .map(|(t, m)| {
                            let mu = model.mean(t, &subj.covariates, &theta);
                            m * (mu * mu - 2.0 * y.eval(t) * mu)
                        })
                        .sum::<f64>()
                })
                .sum::<f64>()
        };
        let whole = criterion_parametric(&theta, &model, &w, &joined, &fit).unwrap();
        let pieces = (part(&first) + part(&second)) / joined.len() as f64;
        assert!((whole - pieces).abs() < 1e-10);
    }

    #[test]
    fn semiparametric_matches_direct_route() {
        let sample = random_sample(30, 3, 51, true);
        let fit = kaplan_meier_censoring(&sample).unwrap();
        let w = DiscreteMeasure::new(design_support(), (1..=12).map(|k| 0.5 + (k % 3) as f64).collect()).unwrap();
        let spec = KernelSpec::new(KernelFamily::Epanechnikov, 0.6).unwrap();
        let theta = [1.0, 0.7, 1.4];
        let bounds = CovariateBox::from_quantiles(&sample, 0.1, 0.9);
        let trim = TrimmingSpec::PreliminarySet { bounds: bounds.clone() };
        let got = criterion_semiparametric(&theta, &spec, &w, &sample, &fit, &trim).unwrap();
        let upper = sample.max_observation_time();
        let mut total = 0.0;
        for (i, s) in sample.subjects().iter().enumerate() {
            if !bounds.contains(&s.covariates) {
                continue;
            }
            let y = rescaled_process(s, &fit).unwrap();
            for (t, m) in w.atoms().filter(|(t, _)| *t <= upper) {
                let mu = mu_hat(t, s.index(&theta), &theta, &spec, &sample, &fit, Some(i)).unwrap_or(0.0);
                total += m * (mu * mu - 2.0 * y.eval(t) * mu);
            }
        }
        assert!((got - total / sample.len() as f64).abs() < 1e-10);
    }

    #[test]
    fn trimming_one_subject_drops_its_term_only() {
        let sample = random_sample(30, 2, 61, true);
        let fit = kaplan_meier_censoring(&sample).unwrap();
        let w = DiscreteMeasure::uniform(design_support()).unwrap();
        let ctx = CriterionContext::new(&sample, &fit, &w).unwrap();
        let spec = KernelSpec::new(KernelFamily::Epanechnikov, 0.5).unwrap();
        let theta = [1.0, 1.1];
        let everything = TrimmingSpec::PreliminarySet { bounds: CovariateBox::unbounded(2) };
        // exclude the subject with the largest first covariate
        let ordered = ctx.sample();
        let drop = (0..ordered.len())
            .max_by(|&a, &b| ordered.subjects()[a].covariates[0].total_cmp(&ordered.subjects()[b].covariates[0]))
            .unwrap();
        let cut = ordered.subjects()[drop].covariates[0];
        let trimmed = TrimmingSpec::PreliminarySet {
            bounds: CovariateBox::new(vec![f64::NEG_INFINITY, f64::NEG_INFINITY], vec![cut - 1e-12, f64::INFINITY]).unwrap(),
        };
        let full = ctx.semiparametric_value(&theta, &spec, &everything, true).unwrap();
        let partial = ctx.semiparametric_value(&theta, &spec, &trimmed, true).unwrap();
        // recompute the dropped subject's term with all kernel denominators intact
        let s = &ordered.subjects()[drop];
        let y = rescaled_process(s, &fit).unwrap();
        let term: f64 = w
            .atoms()
            .filter(|(t, _)| *t <= ordered.max_observation_time())
            .map(|(t, m)| {
                let mu = mu_hat(t, s.index(&theta), &theta, &spec, ordered, &fit, Some(drop)).unwrap_or(0.0);
                m * (mu * mu - 2.0 * y.eval(t) * mu)
            })
            .sum();
        assert!((full - partial - term / ordered.len() as f64).abs() < 1e-10);
    }

    #[test]
    fn semiparametric_gradient_matches_differences() {
        let sample = random_sample(40, 3, 71, true);
        let fit = kaplan_meier_censoring(&sample).unwrap();
        let w = DiscreteMeasure::uniform(design_support()).unwrap();
        let ctx = CriterionContext::new(&sample, &fit, &w).unwrap();
        let spec = KernelSpec::new(KernelFamily::Biweight, 0.8).unwrap();
        let trim = TrimmingSpec::PreliminarySet { bounds: CovariateBox::unbounded(3) };
        for theta in [[1.0, 0.5, 0.5], [1.0, 1.6, 1.25], [1.0, 2.2, 0.3]] {
            let g = ctx.semiparametric_gradient(&theta, &spec, &trim, true).unwrap();
            for j in 0..2 {
                let e = 1e-5;
                let mut p = theta;
                let mut m = theta;
                p[j + 1] += e;
                m[j + 1] -= e;
                let fd = (ctx.semiparametric_value(&p, &spec, &trim, true).unwrap()
                    - ctx.semiparametric_value(&m, &spec, &trim, true).unwrap())
                    / (2.0 * e);
                assert!((g[j] - fd).abs() / g[j].abs().max(1e-3) < 1e-4, "{} vs {fd}", g[j]);
            }
        }
    }

    #[test]
    fn zero_mass_and_full_trimming() {
        let sample = random_sample(20, 2, 81, true);
        let fit = kaplan_meier_censoring(&sample).unwrap();
        let spec = KernelSpec::new(KernelFamily::Epanechnikov, 0.5).unwrap();
        let zero = DiscreteMeasure::new(design_support(), vec![0.0; 12]).unwrap();
        let all = TrimmingSpec::PreliminarySet { bounds: CovariateBox::unbounded(2) };
        assert_eq!(criterion_semiparametric(&[1.0, 1.0], &spec, &zero, &sample, &fit, &all).unwrap(), 0.0);
        let none = TrimmingSpec::PreliminarySet {
            bounds: CovariateBox::new(vec![10.0, 10.0], vec![11.0, 11.0]).unwrap(),
        };
        let w = DiscreteMeasure::uniform(design_support()).unwrap();
        assert!(matches!(
            criterion_semiparametric(&[1.0, 1.0], &spec, &w, &sample, &fit, &none),
            Err(Error::AllTrimmed)
        ));
    }

    #[test]
    fn pooling_limit_is_flat() {
        let sample = random_sample(30, 3, 91, true);
        let fit = kaplan_meier_censoring(&sample).unwrap();
        let w = DiscreteMeasure::uniform(design_support()).unwrap();
        let spec = KernelSpec::new(KernelFamily::Epanechnikov, 1e7).unwrap();
        let ctx = CriterionContext::new(&sample, &fit, &w).unwrap();
        let report = ctx
            .fit_semiparametric(&spec, &ThetaDomain::default_for(3), &TrimmingPlan::box_only(), &FitOptions::default())
            .unwrap();
        assert!(report.converged);
        let a = ctx.semiparametric_value(&[1.0, 0.0, 0.0], &spec, &TrimmingSpec::PreliminarySet { bounds: CovariateBox::unbounded(3) }, true).unwrap();
        let b = ctx.semiparametric_value(&[1.0, 3.0, 2.0], &spec, &TrimmingSpec::PreliminarySet { bounds: CovariateBox::unbounded(3) }, true).unwrap();
        assert!((a - b).abs() < 1e-8);
    }

    #[test]
    fn full_support_box_equals_untrimmed_stage() {
        let sample = random_sample(30, 2, 101, true);
        let fit = kaplan_meier_censoring(&sample).unwrap();
        let w = DiscreteMeasure::uniform(design_support()).unwrap();
        let spec = KernelSpec::new(KernelFamily::Epanechnikov, 0.4).unwrap();
        let ctx = CriterionContext::new(&sample, &fit, &w).unwrap();
        let plan = TrimmingPlan {
            box_quantiles: (0.0, 1.0),
            preliminary: None,
            second_stage: None,
        };
        let boxed = ctx.fit_semiparametric(&spec, &ThetaDomain::default_for(2), &plan, &FitOptions::default()).unwrap();
        let open = TrimmingPlan {
            preliminary: Some(CovariateBox::unbounded(2)),
            ..plan
        };
        let untrimmed = ctx.fit_semiparametric(&spec, &ThetaDomain::default_for(2), &open, &FitOptions::default()).unwrap();
        assert_eq!(boxed.theta_hat, untrimmed.theta_hat);
        assert_eq!(boxed.trimmed, 0);
    }

    #[test]
    fn joint_selection_matches_exhaustive_table() {
        let sample = random_sample(40, 2, 111, true);
        let fit = kaplan_meier_censoring(&sample).unwrap();
        let w = DiscreteMeasure::uniform(design_support()).unwrap();
        let ctx = CriterionContext::new(&sample, &fit, &w).unwrap();
        let domain = ThetaDomain::default_for(2);
        let plan = TrimmingPlan::default();
        let opts = FitOptions::default();
        let grid = [0.3, 0.1, 0.2, 0.1, 0.4];
        let joint = ctx.fit_joint_theta_h(KernelFamily::Epanechnikov, &grid, &domain, &plan, &opts).unwrap();
        let table: Vec<(f64, FitReport)> = [0.1, 0.2, 0.3, 0.4]
            .iter()
            .map(|&h| {
                let spec = KernelSpec::new(KernelFamily::Epanechnikov, h).unwrap();
                (h, ctx.fit_semiparametric(&spec, &domain, &plan, &opts).unwrap())
            })
            .collect();
        let (h_best, r_best) = table
            .iter()
            .fold(None::<&(f64, FitReport)>, |acc, e| match acc {
                Some(a) if a.1.criterion <= e.1.criterion => Some(a),
                _ => Some(e),
            })
            .unwrap();
        assert_eq!(joint.bandwidth, Some(*h_best));
        assert_eq!(joint.theta_hat, r_best.theta_hat);
        assert_eq!(joint.bandwidth_path.len(), 4);
        let dedup = ctx.fit_joint_theta_h(KernelFamily::Epanechnikov, &[0.1, 0.2, 0.3, 0.4], &domain, &plan, &opts).unwrap();
        assert_eq!(dedup, joint);
        let single = ctx.fit_joint_theta_h(KernelFamily::Epanechnikov, &[0.2], &domain, &plan, &opts).unwrap();
        assert_eq!(single.theta_hat, table[1].1.theta_hat);
    }

    #[test]
    fn h_grid_parsing() {
        assert_eq!(parse_h_grid("0.05:0.05:0.3").unwrap(), vec![0.05, 0.1, 0.15, 0.2, 0.25, 0.3]);
        assert_eq!(parse_h_grid("0.2:0.1:0.2").unwrap(), vec![0.2]);
        assert!(parse_h_grid("0.3:0.1").is_err());
        assert!(parse_h_grid("0.3:0.1:0.2").is_err());
        assert!(dedup_grid(&[]).is_err());
    }

    #[test]
    fn mean_model_json() {
        let m = IndexMeanModel::from_json(r#"{"intercept": 5.0}"#).unwrap();
        assert_eq!(m, IndexMeanModel::linear(5.0));
        assert!(IndexMeanModel::from_json(r#"{"intercept": 1.0, "time_power": -1}"#).is_err());
        assert!(IndexMeanModel::from_json("[]").is_err());
    }

    #[test]
    fn domain_restriction() {
        let d = ThetaDomain::default_for(4);
        assert_eq!(d.free_dim(), 3);
        let local = d.around(&[0.2, 1.5, 2.9], 0.5);
        assert_eq!(local.lower, vec![0.0, 1.0, 2.4]);
        assert_eq!(local.upper, vec![0.7, 2.0, 3.0]);
    }
}
