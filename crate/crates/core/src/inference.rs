//! Plug-in sandwich variance, estimated mean squared error, and adaptive choice of the
//! weight measure.
//!
//! With `psi^_l(w) = sum_k w_k phi_{l,k}` the per-subject influence vectors and
//! `Sigma^(w) = sum_k w_k S_k`, every quantity for a candidate weight measure on a fixed
//! support is a cheap linear combination of per-atom pieces computed once per fit:
//!
//! ```text
//! phi_{l,k} = (Y^_l(t_k) - mu^_lk) grad_lk
//!           + n^-1 sum_i grad_ik int_0^{t_k} eta^_{s-}(T_l, delta_l) dmu^(s, theta'Z_i)
//! S_k       = n^-1 sum_i grad_ik grad_ik'
//! ```

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::criteria::{CriterionContext, FitOptions, FitReport, ParametricMean, ThetaDomain, TrimmingPlan};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::kernel::{IndexSmoother, KernelSpec, SmoothedValues};
use crate::measure::DiscreteMeasure;
use crate::step::StepFunction;
use crate::survival::{eta_process, CensoringFit};

/// Condition number at or above which `Sigma^` is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// A fitted mean function evaluated on a time grid at every subject's covariates.
pub trait MeanFunction {
    fn len(&self) -> usize;

    fn grid(&self) -> &[f64];

    /// Number of free index components.
    fn free_dim(&self) -> usize;

    /// `mu(t_k, Z_i)`.
    fn value(&self, i: usize, k: usize) -> f64;

    /// Gradient of `mu(t_k, Z_i)` in the free components.
    fn gradient(&self, i: usize, k: usize) -> &[f64];

    /// `int_0^{t_k} g(s-) dmu(s, Z_i)` for every subject `i` and grid point `k`,
    /// row-major by subject.
    fn integrate_left(&self, g: &StepFunction) -> Result<Vec<f64>>;
}

/// The kernel estimate `mu^_theta` at the in-sample indices.
#[derive(Debug, Clone)]
pub struct KernelMean {
    grid: Vec<f64>,
    n: usize,
    p: usize,
    smoothed: SmoothedValues,
    /// Normalized kernel weights `W_ij`, row-major.
    weights: Vec<f64>,
    /// `(event time, 1 / (1 - G^(e-)))` per subject.
    event_jumps: Vec<Vec<(f64, f64)>>,
}

impl KernelMean {
    pub fn new(
        smoother: &IndexSmoother,
        sample: &Sample,
        fit: &CensoringFit,
        theta: &[f64],
        spec: &KernelSpec,
        leave_one_out: bool,
    ) -> Result<Self> {
        let n = smoother.len();
        let mut smoothed = SmoothedValues::default();
        smoother.evaluate(theta, spec, leave_one_out, true, &mut smoothed);
        let mut weights = smoother.kernel_matrix(theta, spec, leave_one_out);
        for i in 0..n {
            let d = smoothed.denominators[i];
            let row = &mut weights[i * n..(i + 1) * n];
            if d > 0.0 {
                row.iter_mut().for_each(|v| *v /= d);
            } else {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let event_jumps = sample
            .subjects()
            .iter()
            .map(|s| {
                s.event_times
                    .iter()
                    .map(|&e| {
                        let surv = fit.censoring_survival_left(e);
                        if surv <= 0.0 {
                            Err(Error::DegenerateDenominator { time: e })
                        } else {
                            Ok((e, 1.0 / surv))
                        }
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grid: smoother.grid().to_vec(),
            n,
            p: theta.len() - 1,
            smoothed,
            weights,
            event_jumps,
        })
    }
}

impl MeanFunction for KernelMean {
    fn len(&self) -> usize {
        self.n
    }

    fn grid(&self) -> &[f64] {
        &self.grid
    }

    fn free_dim(&self) -> usize {
        self.p
    }

    fn value(&self, i: usize, k: usize) -> f64 {
        self.smoothed.values[i * self.grid.len() + k]
    }

    fn gradient(&self, i: usize, k: usize) -> &[f64] {
        let start = (i * self.grid.len() + k) * self.p;
        &self.smoothed.gradients[start..start + self.p]
    }

    fn integrate_left(&self, g: &StepFunction) -> Result<Vec<f64>> {
        let n = self.n;
        let kk = self.grid.len();
        // per-subject cumulative integrals of g(s-) dY^_j(s) on the grid
        let mut per_subject = vec![0.0; n * kk];
        for (j, jumps) in self.event_jumps.iter().enumerate() {
            let row = &mut per_subject[j * kk..(j + 1) * kk];
            let mut level = 0.0;
            let mut e = 0;
            for (k, &t) in self.grid.iter().enumerate() {
                while e < jumps.len() && jumps[e].0 <= t {
                    level += g.left_limit(jumps[e].0) * jumps[e].1;
                    e += 1;
                }
                row[k] = level;
            }
        }
        let mut out = vec![0.0; n * kk];
        for i in 0..n {
            let w = &self.weights[i * n..(i + 1) * n];
            let acc = &mut out[i * kk..(i + 1) * kk];
            for (j, &wij) in w.iter().enumerate() {
                if wij == 0.0 {
                    continue;
                }
                for (a, b) in acc.iter_mut().zip(&per_subject[j * kk..(j + 1) * kk]) {
                    *a += wij * b;
                }
            }
        }
        Ok(out)
    }
}

/// A parametric mean `mu0(t, Z_i; theta)`, continuous in `t`.
pub struct ParametricMeanFunction<'a> {
    model: &'a dyn ParametricMean,
    theta: Vec<f64>,
    covariates: Vec<Vec<f64>>,
    grid: Vec<f64>,
    values: Vec<f64>,
    gradients: Vec<f64>,
}

impl<'a> ParametricMeanFunction<'a> {
    pub fn new(model: &'a dyn ParametricMean, theta: &[f64], sample: &Sample, grid: &[f64]) -> Self {
        let p = theta.len() - 1;
        let covariates: Vec<Vec<f64>> = sample.subjects().iter().map(|s| s.covariates.clone()).collect();
        let mut values = Vec::with_capacity(covariates.len() * grid.len());
        let mut gradients = vec![0.0; covariates.len() * grid.len() * p];
        for (i, z) in covariates.iter().enumerate() {
            for (k, &t) in grid.iter().enumerate() {
                values.push(model.mean(t, z, theta));
                let start = (i * grid.len() + k) * p;
                model.gradient(t, z, theta, &mut gradients[start..start + p]);
            }
        }
        Self {
            model,
            theta: theta.to_vec(),
            covariates,
            grid: grid.to_vec(),
            values,
            gradients,
        }
    }
}

impl MeanFunction for ParametricMeanFunction<'_> {
    fn len(&self) -> usize {
        self.covariates.len()
    }

    fn grid(&self) -> &[f64] {
        &self.grid
    }

    fn free_dim(&self) -> usize {
        self.theta.len() - 1
    }

    fn value(&self, i: usize, k: usize) -> f64 {
        self.values[i * self.grid.len() + k]
    }

    fn gradient(&self, i: usize, k: usize) -> &[f64] {
        let p = self.free_dim();
        let start = (i * self.grid.len() + k) * p;
        &self.gradients[start..start + p]
    }

    fn integrate_left(&self, g: &StepFunction) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.covariates.len() * self.grid.len());
        for z in &self.covariates {
            let mu = |s: f64| self.model.mean(s, z, &self.theta);
            for &t in &self.grid {
                out.push(g.integrate_left_against(mu, t));
            }
        }
        Ok(out)
    }
}

/// Per-atom influence pieces `phi_{l,k}` and `S_k` on a fixed grid.
#[derive(Debug, Clone)]
pub struct InfluenceTable {
    n: usize,
    grid: Vec<f64>,
    p: usize,
    phi: Vec<f64>,
    sigma_parts: Vec<f64>,
}

impl InfluenceTable {
    /// `rescaled[l * K + k] = Y^_l(t_k)`, subjects in the same order as `mean`.
    pub fn new(mean: &dyn MeanFunction, rescaled: &[f64], sample: &Sample, fit: &CensoringFit) -> Result<Self> {
        let n = mean.len();
        let grid = mean.grid().to_vec();
        let kk = grid.len();
        let p = mean.free_dim();
        let mut phi = vec![0.0; n * kk * p];
        for (l, subject) in sample.subjects().iter().enumerate() {
            let eta = eta_process(fit, subject.observation_time, subject.death_observed)?;
            let inner = if eta.is_empty() && eta.initial() == 0.0 {
                None
            } else {
                Some(mean.integrate_left(&eta)?)
            };
            for k in 0..kk {
                let slot = &mut phi[(l * kk + k) * p..(l * kk + k + 1) * p];
                let resid = rescaled[l * kk + k] - mean.value(l, k);
                for (s, g) in slot.iter_mut().zip(mean.gradient(l, k)) {
                    *s = resid * g;
                }
                if let Some(inner) = &inner {
                    for i in 0..n {
                        let b = inner[i * kk + k] / n as f64;
                        if b == 0.0 {
                            continue;
                        }
                        for (s, g) in slot.iter_mut().zip(mean.gradient(i, k)) {
                            *s += g * b;
                        }
                    }
                }
            }
        }
        let mut sigma_parts = vec![0.0; kk * p * p];
        for k in 0..kk {
            let part = &mut sigma_parts[k * p * p..(k + 1) * p * p];
            for i in 0..n {
                let g = mean.gradient(i, k);
                for a in 0..p {
                    for b in 0..p {
                        part[a * p + b] += g[a] * g[b] / n as f64;
                    }
                }
            }
        }
        Ok(Self {
            n,
            grid,
            p,
            phi,
            sigma_parts,
        })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Masses of `w` aligned with the table grid. Atoms beyond the grid end must lie past
    /// the integration bound and are dropped; any other atom off the grid is an error.
    pub fn aligned_masses(&self, w: &DiscreteMeasure) -> Result<Vec<f64>> {
        let mut masses = vec![0.0; self.grid.len()];
        let last = self.grid.last().copied().unwrap_or(f64::NEG_INFINITY);
        for (t, m) in w.atoms() {
            match self.grid.iter().position(|&g| g == t) {
                Some(k) => masses[k] += m,
                None if t > last => {}
                None => {
                    return Err(Error::InvalidMeasure(format!(
                        "atom at {t} is not on the influence grid"
                    )))
                }
            }
        }
        Ok(masses)
    }

    /// `psi^_l(w)` for subject `l`.
    pub fn psi(&self, l: usize, masses: &[f64]) -> Vec<f64> {
        let kk = self.grid.len();
        let p = self.p;
        let mut out = vec![0.0; p];
        for (k, &m) in masses.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let slot = &self.phi[(l * kk + k) * p..(l * kk + k + 1) * p];
            for (o, v) in out.iter_mut().zip(slot) {
                *o += m * v;
            }
        }
        out
    }

    pub fn variance(&self, w: &DiscreteMeasure) -> Result<VarianceReport> {
        let masses = self.aligned_masses(w)?;
        let p = self.p;
        let n = self.n as f64;
        let psis: Vec<DVector<f64>> = (0..self.n)
            .map(|l| DVector::from_vec(self.psi(l, &masses)))
            .collect();
        let xi = psis.iter().fold(DVector::zeros(p), |acc, v| acc + v) / n;
        let mut delta = DMatrix::<f64>::zeros(p, p);
        for v in &psis {
            let c = v - &xi;
            delta += &c * c.transpose();
        }
        delta /= n;
        let mut sigma = DMatrix::<f64>::zeros(p, p);
        for (k, &m) in masses.iter().enumerate() {
            let part = DMatrix::from_row_slice(p, p, &self.sigma_parts[k * p * p..(k + 1) * p * p]);
            sigma += m * part;
        }
        VarianceReport::assemble(xi, sigma, delta)
    }
}

/// Plug-in variance and mean squared error at one weight measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub xi_hat: Vec<f64>,
    pub sigma_hat: Vec<Vec<f64>>,
    pub delta_hat: Vec<Vec<f64>>,
    /// Asymptotic covariance of `sqrt(n) (theta^ - theta0)`.
    pub v_hat: Vec<Vec<f64>>,
    /// `xi^' Sigma^-1 Sigma^-1 xi^`.
    pub mse_hat: f64,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

/// `Sigma^-1` through a symmetric eigendecomposition.
pub fn invert_sigma(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (sigma + sigma.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let lo = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(lo > 0.0) || !(condition < MAX_CONDITION) {
        return Err(Error::SingularSigma { condition });
    }
    let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
    let inv = &eig.eigenvectors * inv_diag * eig.eigenvectors.transpose();
    Ok((&inv + inv.transpose()) * 0.5)
}

impl VarianceReport {
    pub fn assemble(xi: DVector<f64>, sigma: DMatrix<f64>, delta: DMatrix<f64>) -> Result<Self> {
        let inv = invert_sigma(&sigma)?;
        let v = &inv * &delta * &inv;
        let v = (&v + v.transpose()) * 0.5;
        let step = &inv * &xi;
        let mse = step.dot(&step).max(0.0);
        Ok(Self {
            xi_hat: xi.iter().copied().collect(),
            sigma_hat: rows(&sigma),
            delta_hat: rows(&delta),
            v_hat: rows(&v),
            mse_hat: mse,
        })
    }

    pub fn v_matrix(&self) -> DMatrix<f64> {
        let p = self.v_hat.len();
        DMatrix::from_fn(p, p, |r, c| self.v_hat[r][c])
    }

    /// `trace(V^)`.
    pub fn v_trace(&self) -> f64 {
        (0..self.v_hat.len()).map(|k| self.v_hat[k][k]).sum()
    }
}

/// Influence table for the single-index fit at `theta`, on the context's active grid.
pub fn kernel_influence(
    ctx: &CriterionContext,
    theta: &[f64],
    spec: &KernelSpec,
    leave_one_out: bool,
) -> Result<InfluenceTable> {
    let mean = KernelMean::new(ctx.smoother(), ctx.sample(), ctx.censoring(), theta, spec, leave_one_out)?;
    let rescaled = rescaled_table(ctx.smoother());
    InfluenceTable::new(&mean, &rescaled, ctx.sample(), ctx.censoring())
}

/// Influence table for a parametric fit at `theta`.
pub fn parametric_influence(ctx: &CriterionContext, theta: &[f64], model: &dyn ParametricMean) -> Result<InfluenceTable> {
    let mean = ParametricMeanFunction::new(model, theta, ctx.sample(), ctx.grid());
    let rescaled = rescaled_table(ctx.smoother());
    InfluenceTable::new(&mean, &rescaled, ctx.sample(), ctx.censoring())
}

fn rescaled_table(smoother: &IndexSmoother) -> Vec<f64> {
    (0..smoother.len()).flat_map(|i| smoother.rescaled_row(i).to_vec()).collect()
}

/// `psi^` for subject `subject` (index into `sample`) at the single-index fit `theta`.
pub fn psi_hat(
    subject: usize,
    theta: &[f64],
    spec: &KernelSpec,
    w: &DiscreteMeasure,
    sample: &Sample,
    fit: &CensoringFit,
) -> Result<Vec<f64>> {
    // the context reorders subjects; locate the requested one by its observation time
    let ctx = CriterionContext::new(sample, fit, w)?;
    let target = sample.subjects()[subject].observation_time;
    let position = ctx
        .sample()
        .subjects()
        .iter()
        .position(|s| s.observation_time == target)
        .expect("subject present in its own sample");
    let table = kernel_influence(&ctx, theta, spec, true)?;
    Ok(table.psi(position, &table.aligned_masses(w)?))
}

pub fn variance_report(
    theta: &[f64],
    spec: &KernelSpec,
    w: &DiscreteMeasure,
    sample: &Sample,
    fit: &CensoringFit,
) -> Result<VarianceReport> {
    let ctx = CriterionContext::new(sample, fit, w)?;
    kernel_influence(&ctx, theta, spec, true)?.variance(w)
}

/// What the candidate weight measures are ranked by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionObjective {
    /// `E^2 = xi^' Sigma^-2 xi^`.
    #[default]
    Bias,
    /// `E^2 + trace(V^) / n`.
    BiasPlusVariance,
}

impl SelectionObjective {
    pub fn score(self, report: &VarianceReport, n: usize) -> f64 {
        match self {
            SelectionObjective::Bias => report.mse_hat,
            SelectionObjective::BiasPlusVariance => report.mse_hat + report.v_trace() / n as f64,
        }
    }
}

/// Outcome of the adaptive weight search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSelection {
    pub weights: DiscreteMeasure,
    pub index: usize,
    pub pilot: FitReport,
    pub report: FitReport,
    /// Score of each candidate, `None` where `Sigma^` was singular.
    pub scores: Vec<Option<f64>>,
}

/// Sorted union of the candidates' atoms at or below `upper`.
fn union_support(candidates: &[DiscreteMeasure], upper: f64) -> Vec<f64> {
    let mut all: Vec<f64> = candidates
        .iter()
        .flat_map(|w| w.support().iter().copied())
        .filter(|&t| t <= upper)
        .collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    all
}

/// Fits once at `pilot`, scores every candidate at the pilot estimate, then refits at the
/// best candidate (ties to the earliest).
#[allow(clippy::too_many_arguments)]
pub fn select_weight_measure(
    candidates: &[DiscreteMeasure],
    pilot: &DiscreteMeasure,
    spec: &KernelSpec,
    sample: &Sample,
    fit: &CensoringFit,
    domain: &ThetaDomain,
    plan: &TrimmingPlan,
    options: &FitOptions,
    objective: SelectionObjective,
) -> Result<WeightSelection> {
    let ctx = CriterionContext::new(sample, fit, pilot)?;
    let pilot_report = ctx.fit_semiparametric(spec, domain, plan, options)?;
    select_with_pilot(&ctx, pilot_report, candidates, spec, domain, plan, options, objective)
}

/// [`select_weight_measure`] reusing an existing pilot fit on `ctx`.
#[allow(clippy::too_many_arguments)]
pub fn select_with_pilot(
    ctx: &CriterionContext,
    pilot_report: FitReport,
    candidates: &[DiscreteMeasure],
    spec: &KernelSpec,
    domain: &ThetaDomain,
    plan: &TrimmingPlan,
    options: &FitOptions,
    objective: SelectionObjective,
) -> Result<WeightSelection> {
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("no candidate weight measures".into()));
    }
    let n = ctx.sample().len();
    let upper = ctx.sample().max_observation_time();
    let support = union_support(candidates, upper);
    let scoring = ctx.reweighted(&DiscreteMeasure::uniform(support)?)?;
    let table = kernel_influence(&scoring, &pilot_report.theta_hat, spec, options.leave_one_out)?;
    let scores: Vec<Option<f64>> = candidates
        .iter()
        .map(|w| match table.variance(w) {
            Ok(r) => Ok(Some(objective.score(&r, n))),
            Err(Error::SingularSigma { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let index = scores
        .iter()
        .enumerate()
        .filter_map(|(k, s)| s.map(|v| (k, v)))
        .fold(None::<(usize, f64)>, |best, (k, v)| match best {
            Some((_, b)) if b <= v => best,
            _ => Some((k, v)),
        })
        .map(|(k, _)| k)
        .ok_or(Error::AllCandidatesSingular)?;
    let chosen = candidates[index].clone();
    let refit_ctx = ctx.reweighted(&chosen)?;
    let mut report = refit_ctx.fit_semiparametric(spec, domain, plan, options)?;
    report.variance = Some(kernel_influence(&refit_ctx, &report.theta_hat, spec, options.leave_one_out)?.variance(&chosen)?);
    Ok(WeightSelection {
        weights: chosen,
        index,
        pilot: pilot_report,
        report,
        scores,
    })
}
