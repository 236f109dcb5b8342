//! Bounded Nelder-Mead with deterministic multistarts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    /// Simplex diameter below which a start is considered converged.
    pub tolerance: f64,
    /// Spread of vertex values below which a start is considered converged.
    pub value_tolerance: f64,
    pub multistarts: usize,
    /// Initial simplex edge as a fraction of the box width.
    pub initial_step: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            tolerance: 1e-6,
            value_tolerance: 1e-10,
            multistarts: 5,
            initial_step: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartOutcome {
    pub start: Vec<f64>,
    pub point: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Minimum {
    pub point: Vec<f64>,
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
    pub starts: Vec<StartOutcome>,
}

impl Minimum {
    /// Largest minus smallest final value across starts.
    pub fn spread_across_starts(&self) -> f64 {
        let (lo, hi) = self
            .starts
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.value), hi.max(s.value)));
        hi - lo
    }
}

const PRIMES: [u32; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn radical_inverse(mut index: u32, base: u32) -> f64 {
    let inv = 1.0 / base as f64;
    let mut factor = inv;
    let mut out = 0.0;
    while index > 0 {
        out += (index % base) as f64 * factor;
        index /= base;
        factor *= inv;
    }
    out
}

/// Box center followed by Halton points mapped into the box.
pub fn start_points(lower: &[f64], upper: &[f64], count: usize) -> Vec<Vec<f64>> {
    let dim = lower.len();
    (0..count.max(1))
        .map(|s| {
            (0..dim)
                .map(|j| {
                    let frac = if s == 0 {
                        0.5
                    } else {
                        radical_inverse(s as u32, PRIMES[j % PRIMES.len()])
                    };
                    lower[j] + frac * (upper[j] - lower[j])
                })
                .collect()
        })
        .collect()
}

fn clamp_into(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, lo), hi) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(*lo, *hi);
    }
}

fn guarded(f: &impl Fn(&[f64]) -> f64, x: &[f64]) -> f64 {
    let v = f(x);
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

/// Restarts from each converged point with a fresh simplex, since clamping can collapse a
/// simplex onto a face of the box. A restart that does not improve shrinks the next one.
const MAX_RESTARTS: usize = 20;
const RESTART_SHRINK: f64 = 0.01;

fn nelder_mead(
    f: &impl Fn(&[f64]) -> f64,
    start: &[f64],
    lower: &[f64],
    upper: &[f64],
    config: &OptimizerConfig,
) -> StartOutcome {
    let mut step = config.initial_step;
    let mut outcome = nelder_mead_run(f, start, lower, upper, step, config, config.max_iterations);
    for _ in 0..MAX_RESTARTS {
        let budget = config.max_iterations.saturating_sub(outcome.iterations);
        if !outcome.converged || budget == 0 {
            break;
        }
        let again = nelder_mead_run(f, &outcome.point, lower, upper, step, config, budget);
        let improved = again.value < outcome.value - config.value_tolerance;
        outcome.iterations += again.iterations;
        if again.value < outcome.value {
            outcome.point = again.point;
            outcome.value = again.value;
            outcome.converged = again.converged;
        }
        if !improved {
            step *= RESTART_SHRINK;
            if step < config.tolerance {
                break;
            }
        }
    }
    outcome.start = start.to_vec();
    outcome
}

fn nelder_mead_run(
    f: &impl Fn(&[f64]) -> f64,
    start: &[f64],
    lower: &[f64],
    upper: &[f64],
    step_fraction: f64,
    config: &OptimizerConfig,
    max_iterations: usize,
) -> StartOutcome {
    let dim = start.len();
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(dim + 1);
    simplex.push(start.to_vec());
    for j in 0..dim {
        let width = upper[j] - lower[j];
        let step = if width.is_finite() && width > 0.0 {
            step_fraction * width
        } else {
            step_fraction
        };
        let mut v = start.to_vec();
        v[j] = if v[j] + step <= upper[j] { v[j] + step } else { v[j] - step };
        clamp_into(&mut v, lower, upper);
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|x| guarded(f, x)).collect();

    let mut iterations = 0;
    let mut converged = false;
    let mut order: Vec<usize> = (0..=dim).collect();
    while iterations < max_iterations {
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
        let best = order[0];
        let worst = order[dim];
        let second = order[dim.saturating_sub(1)];

        let diameter = simplex
            .iter()
            .map(|x| {
                x.iter()
                    .zip(&simplex[best])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        let spread = values[worst] - values[best];
        if diameter < config.tolerance && (spread < config.value_tolerance || spread.is_nan()) {
            converged = true;
            break;
        }
        iterations += 1;

        let mut centroid = vec![0.0; dim];
        for &k in &order[..dim] {
            for (c, x) in centroid.iter_mut().zip(&simplex[k]) {
                *c += x / dim as f64;
            }
        }
        let along = |coef: f64| -> Vec<f64> {
            let mut p: Vec<f64> = centroid
                .iter()
                .zip(&simplex[worst])
                .map(|(c, w)| c + coef * (c - w))
                .collect();
            clamp_into(&mut p, lower, upper);
            p
        };

        let reflected = along(1.0);
        let fr = guarded(f, &reflected);
        if fr < values[best] {
            let expanded = along(2.0);
            let fe = guarded(f, &expanded);
            if fe < fr {
                simplex[worst] = expanded;
                values[worst] = fe;
            } else {
                simplex[worst] = reflected;
                values[worst] = fr;
            }
            continue;
        }
        if fr < values[second] {
            simplex[worst] = reflected;
            values[worst] = fr;
            continue;
        }
        let (candidate, fc, accept) = if fr < values[worst] {
            let outside = along(0.5);
            let fo = guarded(f, &outside);
            (outside, fo, fo <= fr)
        } else {
            let inside = along(-0.5);
            let fi = guarded(f, &inside);
            (inside, fi, fi < values[worst])
        };
        if accept {
            simplex[worst] = candidate;
            values[worst] = fc;
            continue;
        }
        // shrink toward the best vertex
        let anchor = simplex[best].clone();
        for k in 0..=dim {
            if k == best {
                continue;
            }
            for (x, a) in simplex[k].iter_mut().zip(&anchor) {
                *x = a + 0.5 * (*x - a);
            }
            values[k] = guarded(f, &simplex[k]);
        }
    }
    let best = (0..=dim)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)))
        .unwrap_or(0);
    StartOutcome {
        start: start.to_vec(),
        point: simplex[best].clone(),
        value: values[best],
        iterations,
        converged,
    }
}

/// Minimizes `f` over the box `[lower, upper]`. Non-finite values count as `+inf`.
/// Returns the best point over all starts (ties go to the earlier start).
pub fn minimize_in_box(
    f: impl Fn(&[f64]) -> f64,
    lower: &[f64],
    upper: &[f64],
    config: &OptimizerConfig,
) -> Result<Minimum> {
    if lower.len() != upper.len() || lower.iter().zip(upper).any(|(a, b)| !(a <= b)) {
        return Err(Error::InvalidConfig("optimizer box is empty".into()));
    }
    if lower.is_empty() {
        let value = guarded(&f, &[]);
        let outcome = StartOutcome {
            start: Vec::new(),
            point: Vec::new(),
            value,
            iterations: 0,
            converged: true,
        };
        return Ok(Minimum {
            point: Vec::new(),
            value,
            converged: true,
            iterations: 0,
            starts: vec![outcome],
        });
    }
    let starts: Vec<StartOutcome> = start_points(lower, upper, config.multistarts)
        .iter()
        .map(|s| nelder_mead(&f, s, lower, upper, config))
        .collect();
    if starts.iter().all(|s| !s.converged) {
        return Err(Error::OptimizerDiverged { starts: starts.len() });
    }
    let best = starts
        .iter()
        .enumerate()
        .min_by(|(a, x), (b, y)| x.value.total_cmp(&y.value).then(a.cmp(b)))
        .map(|(k, _)| k)
        .expect("at least one start");
    Ok(Minimum {
        point: starts[best].point.clone(),
        value: starts[best].value,
        converged: starts[best].converged,
        iterations: starts.iter().map(|s| s.iterations).sum(),
        starts,
    })
}
