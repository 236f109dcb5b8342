//! Kernel smoothing of the rescaled processes along a covariate index `theta' Z`.
//!
//! The estimator of `mu_theta(t, u) = E[N*(t) | theta' Z = u]` is
//!
//! ```text
//! mu^(t, u) = sum_i K((theta'Z_i - u)/h) Y^_i(t) / sum_j K((theta'Z_j - u)/h)
//! ```
//!
//! which equals the event-time integral form because the denominator does not depend on
//! the event time. The first component of `theta` is fixed at one, so every gradient here
//! is taken with respect to the remaining `d - 1` components.

use serde::{Deserialize, Serialize};

use crate::data::{self, dot, Sample};
use crate::error::{Error, Result};
use crate::survival::{rescaled_process, CensoringFit};

/// Compactly supported second-order kernels on `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Epanechnikov,
    Biweight,
}

impl KernelFamily {
    #[inline]
    pub fn value(self, x: f64) -> f64 {
        if x.abs() > 1.0 {
            return 0.0;
        }
        let r = 1.0 - x * x;
        match self {
            KernelFamily::Epanechnikov => 0.75 * r,
            KernelFamily::Biweight => 0.9375 * r * r,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        if x.abs() >= 1.0 {
            return 0.0;
        }
        match self {
            KernelFamily::Epanechnikov => -1.5 * x,
            KernelFamily::Biweight => -3.75 * x * (1.0 - x * x),
        }
    }

    #[inline]
    pub fn second_derivative(self, x: f64) -> f64 {
        if x.abs() >= 1.0 {
            return 0.0;
        }
        match self {
            KernelFamily::Epanechnikov => -1.5,
            KernelFamily::Biweight => 3.75 * (3.0 * x * x - 1.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Epanechnikov => "epanechnikov",
            KernelFamily::Biweight => "biweight",
        }
    }
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epanechnikov" => Ok(KernelFamily::Epanechnikov),
            "biweight" => Ok(KernelFamily::Biweight),
            other => Err(Error::InvalidConfig(format!("unknown kernel `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, bandwidth: f64) -> Result<Self> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        Ok(Self { family, bandwidth })
    }

    pub fn with_bandwidth(self, bandwidth: f64) -> Result<Self> {
        Self::new(self.family, bandwidth)
    }
}

/// `K(x)` for the spec's family.
pub fn kernel_eval(spec: &KernelSpec, x: f64) -> f64 {
    spec.family.value(x)
}

fn rescaled_at(sample: &Sample, fit: &CensoringFit, i: usize, t: f64) -> Result<f64> {
    let subject = &sample.subjects()[i];
    let mut total = 0.0;
    for &s in subject.event_times.iter().take_while(|&&s| s <= t) {
        let surv = fit.censoring_survival_left(s);
        if surv <= 0.0 {
            return Err(Error::DegenerateDenominator { time: s });
        }
        total += 1.0 / surv;
    }
    Ok(total)
}

/// Kernel estimate `mu^_theta(t, u)`, optionally leaving one subject out of both sums.
pub fn mu_hat(
    t: f64,
    u: f64,
    theta: &[f64],
    spec: &KernelSpec,
    sample: &Sample,
    fit: &CensoringFit,
    leave_out: Option<usize>,
) -> Result<f64> {
    let h = spec.bandwidth;
    let mut numerator = 0.0;
    let mut denominator = 0.0;
    for (i, subject) in sample.subjects().iter().enumerate() {
        if Some(i) == leave_out {
            continue;
        }
        let k = spec.family.value((subject.index(theta) - u) / h);
        if k == 0.0 {
            continue;
        }
        denominator += k;
        numerator += k * rescaled_at(sample, fit, i, t)?;
    }
    if denominator <= 0.0 {
        return Err(Error::EmptyWindow { u });
    }
    Ok(numerator / denominator)
}

/// Analytic gradient of `theta -> mu^_theta(t, theta' z)` with respect to the free
/// components `theta[1..]`.
pub fn grad_mu_hat(
    t: f64,
    z: &[f64],
    theta: &[f64],
    spec: &KernelSpec,
    sample: &Sample,
    fit: &CensoringFit,
    leave_out: Option<usize>,
) -> Result<Vec<f64>> {
    let h = spec.bandwidth;
    let p = theta.len() - 1;
    let u = dot(theta, z);
    let mut weights = Vec::new();
    let mut denominator = 0.0;
    let mut numerator = 0.0;
    for (i, subject) in sample.subjects().iter().enumerate() {
        if Some(i) == leave_out {
            continue;
        }
        let a = (subject.index(theta) - u) / h;
        let k = spec.family.value(a);
        let dk = spec.family.derivative(a);
        if k == 0.0 && dk == 0.0 {
            continue;
        }
        let y = rescaled_at(sample, fit, i, t)?;
        denominator += k;
        numerator += k * y;
        weights.push((i, dk, y));
    }
    if denominator <= 0.0 {
        return Err(Error::EmptyWindow { u });
    }
    let mu = numerator / denominator;
    let mut grad = vec![0.0; p];
    for (i, dk, y) in weights {
        let zi = &sample.subjects()[i].covariates;
        let scale = dk * (y - mu) / (h * denominator);
        for (g, j) in grad.iter_mut().zip(1..) {
            *g += scale * (zi[j] - z[j]);
        }
    }
    Ok(grad)
}

/// Central finite-difference gradient of `theta -> mu^_theta(t, theta' z)`, step `1e-5`
/// per free component. Cross-check for [`grad_mu_hat`].
pub fn grad_mu_hat_fd(
    t: f64,
    z: &[f64],
    theta: &[f64],
    spec: &KernelSpec,
    sample: &Sample,
    fit: &CensoringFit,
    leave_out: Option<usize>,
) -> Result<Vec<f64>> {
    const STEP: f64 = 1e-5;
    let mut grad = Vec::with_capacity(theta.len() - 1);
    for j in 1..theta.len() {
        let mut plus = theta.to_vec();
        let mut minus = theta.to_vec();
        plus[j] += STEP;
        minus[j] -= STEP;
        let fp = mu_hat(t, dot(&plus, z), &plus, spec, sample, fit, leave_out)?;
        let fm = mu_hat(t, dot(&minus, z), &minus, spec, sample, fit, leave_out)?;
        grad.push((fp - fm) / (2.0 * STEP));
    }
    Ok(grad)
}

/// `f^_{theta'Z}(u) = (n h)^-1 sum_i K((theta'Z_i - u)/h)`.
pub fn density_hat(u: f64, theta: &[f64], spec: &KernelSpec, sample: &Sample) -> f64 {
    let h = spec.bandwidth;
    let total: f64 = sample
        .subjects()
        .iter()
        .map(|s| spec.family.value((s.index(theta) - u) / h))
        .sum();
    total / (sample.len() as f64 * h)
}

/// Axis-aligned box in covariate space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl CovariateBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::InvalidConfig("box bounds must have equal, nonzero length".into()));
        }
        if lower.iter().zip(&upper).any(|(a, b)| !(a <= b)) {
            return Err(Error::InvalidConfig("box lower bound exceeds upper bound".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn unbounded(dim: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
        }
    }

    /// Coordinate-wise `[q_lo, q_hi]` sample-quantile box.
    pub fn from_quantiles(sample: &Sample, lo: f64, hi: f64) -> Self {
        let (lower, upper) = (0..sample.dim())
            .map(|j| {
                let col = data::column(sample, j);
                (data::quantile(&col, lo), data::quantile(&col, hi))
            })
            .unzip();
        Self { lower, upper }
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        z.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(x, (a, b))| *a <= *x && *x <= *b)
    }
}

/// Trimming rule excluding subjects from the outer sums of the criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TrimmingSpec {
    /// `J_B(z) = 1{z in B}`.
    PreliminarySet { bounds: CovariateBox },
    /// `J(z) = 1{f^_{theta'Z}(theta'z) >= c}`.
    DensityThreshold { threshold: f64 },
    /// Density rule with `c` set to the given quantile of the in-sample densities at
    /// the same `theta`.
    DensityQuantile { quantile: f64 },
}

impl TrimmingSpec {
    /// Resolves the rule to per-subject indicators given in-sample index densities.
    pub fn mask_from_densities(&self, sample: &Sample, densities: &[f64]) -> Vec<bool> {
        match self {
            TrimmingSpec::PreliminarySet { bounds } => {
                sample.subjects().iter().map(|s| bounds.contains(&s.covariates)).collect()
            }
            TrimmingSpec::DensityThreshold { threshold } => {
                densities.iter().map(|f| f >= threshold).collect()
            }
            TrimmingSpec::DensityQuantile { quantile } => {
                let c = data::quantile(densities, *quantile);
                densities.iter().map(|&f| f >= c).collect()
            }
        }
    }
}

/// Evaluates the trimming indicator for covariate vector `z`.
pub fn trim_indicator(
    z: &[f64],
    theta: &[f64],
    trim: &TrimmingSpec,
    spec: &KernelSpec,
    sample: &Sample,
) -> bool {
    match trim {
        TrimmingSpec::PreliminarySet { bounds } => bounds.contains(z),
        TrimmingSpec::DensityThreshold { threshold } => {
            density_hat(dot(theta, z), theta, spec, sample) >= *threshold
        }
        TrimmingSpec::DensityQuantile { quantile } => {
            let c = data::quantile(&in_sample_densities(theta, spec, sample), *quantile);
            density_hat(dot(theta, z), theta, spec, sample) >= c
        }
    }
}

/// Trimming indicators for every subject of the sample.
pub fn trim_mask(theta: &[f64], trim: &TrimmingSpec, spec: &KernelSpec, sample: &Sample) -> Vec<bool> {
    trim.mask_from_densities(sample, &in_sample_densities(theta, spec, sample))
}

/// In-sample index densities `f^_{theta'Z}(theta'Z_i)`.
pub fn in_sample_densities(theta: &[f64], spec: &KernelSpec, sample: &Sample) -> Vec<f64> {
    let idx: Vec<f64> = sample.subjects().iter().map(|s| s.index(theta)).collect();
    let h = spec.bandwidth;
    let n = idx.len() as f64;
    idx.iter()
        .map(|&u| idx.iter().map(|&v| spec.family.value((v - u) / h)).sum::<f64>() / (n * h))
        .collect()
}

/// Precomputed rescaled processes on a fixed time grid, for repeated evaluation of the
/// smoother at every in-sample index `theta'Z_i` across many `theta`.
#[derive(Debug, Clone)]
pub struct IndexSmoother {
    n: usize,
    dim: usize,
    grid: Vec<f64>,
    covariates: Vec<f64>,
    rescaled: Vec<f64>,
}

/// Smoother output at every `(subject, grid point)`, row-major by subject.
#[derive(Debug, Clone, Default)]
pub struct SmoothedValues {
    pub values: Vec<f64>,
    /// `n x K x (d-1)`; empty unless gradients were requested.
    pub gradients: Vec<f64>,
    /// Kernel denominators `sum_j K_ij`.
    pub denominators: Vec<f64>,
}

impl SmoothedValues {
    /// Whether subject `i` had no neighbour within one bandwidth.
    pub fn is_empty_window(&self, i: usize) -> bool {
        self.denominators[i] <= 0.0
    }
}

impl IndexSmoother {
    pub fn new(sample: &Sample, fit: &CensoringFit, grid: &[f64]) -> Result<Self> {
        let n = sample.len();
        let k = grid.len();
        let mut rescaled = vec![0.0; n * k];
        for (i, s) in sample.subjects().iter().enumerate() {
            let y = rescaled_process(s, fit)?;
            for (c, &t) in grid.iter().enumerate() {
                rescaled[i * k + c] = y.eval(t);
            }
        }
        let covariates = sample
            .subjects()
            .iter()
            .flat_map(|s| s.covariates.iter().copied())
            .collect();
        Ok(Self {
            n,
            dim: sample.dim(),
            grid: grid.to_vec(),
            covariates,
            rescaled,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// `Y^_i(t_k)`.
    #[inline]
    pub fn rescaled(&self, i: usize, k: usize) -> f64 {
        self.rescaled[i * self.grid.len() + k]
    }

    pub fn rescaled_row(&self, i: usize) -> &[f64] {
        let k = self.grid.len();
        &self.rescaled[i * k..(i + 1) * k]
    }

    pub fn covariates(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.dim..(i + 1) * self.dim]
    }

    pub fn indices(&self, theta: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| dot(theta, self.covariates(i))).collect()
    }

    /// `K((theta'Z_j - theta'Z_i)/h)` as an `n x n` row-major matrix; the diagonal is
    /// zero when `leave_one_out` is set.
    pub fn kernel_matrix(&self, theta: &[f64], spec: &KernelSpec, leave_one_out: bool) -> Vec<f64> {
        let n = self.n;
        let u = self.indices(theta);
        let h = spec.bandwidth;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if leave_one_out && i == j {
                    continue;
                }
                out[i * n + j] = spec.family.value((u[j] - u[i]) / h);
            }
        }
        out
    }

    /// Evaluates `mu^(t_k, theta'Z_i)` for all subjects and grid points, plus the
    /// gradients in the free components when `with_gradient` is set. Subjects with an
    /// empty window get value and gradient zero.
    pub fn evaluate(
        &self,
        theta: &[f64],
        spec: &KernelSpec,
        leave_one_out: bool,
        with_gradient: bool,
        out: &mut SmoothedValues,
    ) {
        let n = self.n;
        let k = self.grid.len();
        let d = self.dim;
        let p = d - 1;
        let h = spec.bandwidth;
        let family = spec.family;
        let u = self.indices(theta);

        out.values.clear();
        out.values.resize(n * k, 0.0);
        out.denominators.clear();
        out.denominators.resize(n, 0.0);
        out.gradients.clear();
        if with_gradient {
            out.gradients.resize(n * k * p, 0.0);
        }
        let mut grad_s = vec![0.0; p];
        let mut grad_a = vec![0.0; k * p];
        let mut diff = vec![0.0; p];

        for i in 0..n {
            let ui = u[i];
            let zi = self.covariates(i);
            let acc = &mut out.values[i * k..(i + 1) * k];
            let mut denom = 0.0;
            if with_gradient {
                grad_s.iter_mut().for_each(|g| *g = 0.0);
                grad_a.iter_mut().for_each(|g| *g = 0.0);
            }
            for j in 0..n {
                if leave_one_out && i == j {
                    continue;
                }
                let a = (u[j] - ui) / h;
                if a.abs() >= 1.0 {
                    continue;
                }
                let kij = family.value(a);
                denom += kij;
                let row = &self.rescaled[j * k..(j + 1) * k];
                for (c, y) in acc.iter_mut().zip(row) {
                    *c += kij * y;
                }
                if with_gradient {
                    let dk = family.derivative(a) / h;
                    let zj = self.covariates(j);
                    for q in 0..p {
                        diff[q] = dk * (zj[q + 1] - zi[q + 1]);
                        grad_s[q] += diff[q];
                    }
                    for (c, y) in row.iter().enumerate() {
                        let slot = &mut grad_a[c * p..(c + 1) * p];
                        for q in 0..p {
                            slot[q] += diff[q] * y;
                        }
                    }
                }
            }
            out.denominators[i] = denom;
            if denom <= 0.0 {
                acc.iter_mut().for_each(|v| *v = 0.0);
                continue;
            }
            for v in acc.iter_mut() {
                *v /= denom;
            }
            if with_gradient {
                let base = i * k * p;
                for c in 0..k {
                    let mu = out.values[i * k + c];
                    for q in 0..p {
                        out.gradients[base + c * p + q] = (grad_a[c * p + q] - mu * grad_s[q]) / denom;
                    }
                }
            }
        }
    }
}
