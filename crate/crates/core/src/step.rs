//! Right-continuous piecewise-constant functions of time.

use serde::{Deserialize, Serialize};

/// A right-continuous step function.
///
/// `values[k]` holds the value on `[jump_times[k], jump_times[k + 1])`; before the
/// first jump the function equals `initial`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    initial: f64,
    jump_times: Vec<f64>,
    values: Vec<f64>,
}

impl StepFunction {
    /// Builds a step function from post-jump values. Panics if the jump times are not
    /// strictly increasing or the lengths differ.
    pub fn new(initial: f64, jump_times: Vec<f64>, values: Vec<f64>) -> Self {
        assert_eq!(jump_times.len(), values.len(), "one value per jump time");
        assert!(
            jump_times.windows(2).all(|w| w[0] < w[1]),
            "jump times must be strictly increasing"
        );
        Self {
            initial,
            jump_times,
            values,
        }
    }

    pub fn constant(value: f64) -> Self {
        Self::new(value, Vec::new(), Vec::new())
    }

    /// Accumulates `(time, increment)` pairs, merging equal times. The input need not be
    /// sorted.
    pub fn from_increments(initial: f64, mut increments: Vec<(f64, f64)>) -> Self {
        increments.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut jump_times: Vec<f64> = Vec::with_capacity(increments.len());
        let mut values: Vec<f64> = Vec::with_capacity(increments.len());
        let mut level = initial;
        for (time, inc) in increments {
            level += inc;
            match jump_times.last() {
                Some(&last) if last == time => *values.last_mut().unwrap() = level,
                _ => {
                    jump_times.push(time);
                    values.push(level);
                }
            }
        }
        Self {
            initial,
            jump_times,
            values,
        }
    }

    pub fn initial(&self) -> f64 {
        self.initial
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.jump_times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.jump_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jump_times.is_empty()
    }

    /// Value at `t` (right-continuous).
    pub fn eval(&self, t: f64) -> f64 {
        let idx = self.jump_times.partition_point(|&s| s <= t);
        self.value_before(idx)
    }

    /// Limit from the left at `t`, i.e. the value on `(t - eps, t)`.
    pub fn left_limit(&self, t: f64) -> f64 {
        let idx = self.jump_times.partition_point(|&s| s < t);
        self.value_before(idx)
    }

    fn value_before(&self, idx: usize) -> f64 {
        if idx == 0 {
            self.initial
        } else {
            self.values[idx - 1]
        }
    }

    /// Iterates over `(time, jump size)`.
    pub fn jumps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.jump_times.iter().enumerate().map(move |(k, &t)| {
            let before = self.value_before(k);
            (t, self.values[k] - before)
        })
    }

    /// Size of the jump at exactly `t` (zero if `t` is not a jump time).
    pub fn jump_at(&self, t: f64) -> f64 {
        self.eval(t) - self.left_limit(t)
    }

    /// `sup_t f(t)` over the finitely many levels.
    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(self.initial, f64::max)
    }

    /// Integral of `t -> self(t-)` against the measure `d mu`, where `mu` is the
    /// continuous function `cumulative`, over `(0, upper]`.
    ///
    /// Exact: the integrand is constant between jump times, so each piece contributes
    /// `level * (mu(b) - mu(a))`.
    pub fn integrate_left_against(&self, cumulative: impl Fn(f64) -> f64, upper: f64) -> f64 {
        if upper <= 0.0 {
            return 0.0;
        }
        let mut total = 0.0;
        let mut start = 0.0;
        let mut level = self.initial;
        for (k, &t) in self.jump_times.iter().enumerate() {
            if t <= start {
                level = self.values[k];
                continue;
            }
            if t >= upper {
                break;
            }
            total += level * (cumulative(t) - cumulative(start));
            start = t;
            level = self.values[k];
        }
        total + level * (cumulative(upper) - cumulative(start))
    }
}
