//! Censoring-distribution estimation and censoring-corrected counting processes.

use crate::data::{Sample, Subject};
use crate::error::{Error, Result};
use crate::step::StepFunction;

/// Kaplan-Meier estimate of the censoring distribution `G` and the empirical distribution
/// `H` of the observation times.
#[derive(Debug, Clone, PartialEq)]
pub struct CensoringFit {
    g_hat: StepFunction,
    h_hat: StepFunction,
    at_risk: Vec<usize>,
    n: usize,
}

impl CensoringFit {
    /// `G^`, jumping only at censored observation times.
    pub fn g_hat(&self) -> &StepFunction {
        &self.g_hat
    }

    /// `H^`, jumping by `1/n` at every observation time.
    pub fn h_hat(&self) -> &StepFunction {
        &self.h_hat
    }

    /// `#{j : T_j >= s}` at each jump `s` of `G^`.
    pub fn at_risk_counts(&self) -> &[usize] {
        &self.at_risk
    }

    pub fn sample_size(&self) -> usize {
        self.n
    }

    /// `1 - G^(t-)`.
    pub fn censoring_survival_left(&self, t: f64) -> f64 {
        1.0 - self.g_hat.left_limit(t)
    }
}

/// Product-limit estimator of the censoring c.d.f.:
/// `G^(t) = 1 - prod_{i: T_i <= t} (1 - 1 / #{j: T_j >= T_i})^(1 - delta_i)`.
pub fn kaplan_meier_censoring(sample: &Sample) -> Result<CensoringFit> {
    let n = sample.len();
    if n == 0 {
        return Err(Error::EmptySample);
    }
    let mut obs: Vec<(f64, bool)> = sample
        .subjects()
        .iter()
        .map(|s| (s.observation_time, s.death_observed))
        .collect();
    obs.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut g_times = Vec::new();
    let mut g_values = Vec::new();
    let mut at_risk = Vec::new();
    let mut h_times = Vec::new();
    let mut h_values = Vec::new();
    let mut survival = 1.0;
    let mut k = 0;
    while k < n {
        let t = obs[k].0;
        let mut end = k;
        let mut censored = 0usize;
        while end < n && obs[end].0 == t {
            if !obs[end].1 {
                censored += 1;
            }
            end += 1;
        }
        let risk = n - k;
        if censored > 0 {
            // one factor per censored observation at t
            let factor = 1.0 - 1.0 / risk as f64;
            survival *= factor.powi(censored as i32);
            g_times.push(t);
            g_values.push(1.0 - survival);
            at_risk.push(risk);
        }
        h_times.push(t);
        h_values.push(end as f64 / n as f64);
        k = end;
    }

    let fit = CensoringFit {
        g_hat: StepFunction::new(0.0, g_times, g_values),
        h_hat: StepFunction::new(0.0, h_times, h_values),
        at_risk,
        n,
    };
    debug_assert!(fit
        .g_hat
        .values()
        .windows(2)
        .all(|w| w[0] <= w[1] && (0.0..=1.0).contains(&w[1])));
    Ok(fit)
}

/// `Y^(t) = int_0^t dN(s) / (1 - G^(s-))`: each event inflated by the inverse probability
/// of still being uncensored just before it.
pub fn rescaled_process(subject: &Subject, fit: &CensoringFit) -> Result<StepFunction> {
    let mut level = 0.0;
    let mut values = Vec::with_capacity(subject.event_times.len());
    for &s in &subject.event_times {
        level += inverse_censoring_weight(fit, s)?;
        values.push(level);
    }
    Ok(StepFunction::new(0.0, subject.event_times.clone(), values))
}

/// `1 / (1 - G^(s-))`.
pub fn inverse_censoring_weight(fit: &CensoringFit, s: f64) -> Result<f64> {
    let surv = fit.censoring_survival_left(s);
    if surv <= 0.0 {
        return Err(Error::DegenerateDenominator { time: s });
    }
    Ok(1.0 / surv)
}

/// The Kaplan-Meier influence term `t -> eta^_t(T, delta)` as a step function in `t`:
///
/// `(1 - delta) 1{T <= t} / (1 - H^(T-)) - sum_{s <= t, s <= T} dG^(s) / ((1 - H^(s-)) (1 - G^(s-)))`,
///
/// the sum running over the jumps of `G^`.
pub fn eta_process(fit: &CensoringFit, observation_time: f64, death_observed: bool) -> Result<StepFunction> {
    let mut increments = Vec::new();
    if !death_observed {
        let at_risk = 1.0 - fit.h_hat.left_limit(observation_time);
        if at_risk <= 0.0 {
            return Err(Error::DegenerateDenominator {
                time: observation_time,
            });
        }
        increments.push((observation_time, 1.0 / at_risk));
    }
    for (s, dg) in fit.g_hat.jumps() {
        if s > observation_time {
            break;
        }
        let denom = (1.0 - fit.h_hat.left_limit(s)) * (1.0 - fit.g_hat.left_limit(s));
        if denom <= 0.0 {
            return Err(Error::DegenerateDenominator { time: s });
        }
        increments.push((s, -dg / denom));
    }
    Ok(StepFunction::from_increments(0.0, increments))
}

/// `eta^_t(T, delta)` at a single `t`.
pub fn eta_hat(fit: &CensoringFit, observation_time: f64, death_observed: bool, t: f64) -> Result<f64> {
    Ok(eta_process(fit, observation_time, death_observed)?.eval(t))
}
