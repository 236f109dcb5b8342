//! Finite-support weight measures on the time axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A finite measure `w = sum_k m_k * delta_{t_k}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMeasure", into = "RawMeasure")]
pub struct DiscreteMeasure {
    support: Vec<f64>,
    masses: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawMeasure {
    support: Vec<f64>,
    masses: Vec<f64>,
}

impl TryFrom<RawMeasure> for DiscreteMeasure {
    type Error = Error;

    fn try_from(raw: RawMeasure) -> Result<Self> {
        DiscreteMeasure::new(raw.support, raw.masses)
    }
}

impl From<DiscreteMeasure> for RawMeasure {
    fn from(m: DiscreteMeasure) -> Self {
        RawMeasure {
            support: m.support,
            masses: m.masses,
        }
    }
}

impl DiscreteMeasure {
    pub fn new(support: Vec<f64>, masses: Vec<f64>) -> Result<Self> {
        if support.len() != masses.len() {
            return Err(Error::InvalidMeasure(format!(
                "{} support points but {} masses",
                support.len(),
                masses.len()
            )));
        }
        if support.iter().any(|t| !t.is_finite()) || !support.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidMeasure(
                "support must be finite and strictly increasing".into(),
            ));
        }
        if masses.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::InvalidMeasure(
                "masses must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { support, masses })
    }

    /// Unit mass at every support point.
    pub fn uniform(support: Vec<f64>) -> Result<Self> {
        let masses = vec![1.0; support.len()];
        Self::new(support, masses)
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn atoms(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.support.iter().copied().zip(self.masses.iter().copied())
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.support.clone(),
            self.masses.iter().map(|m| m * factor).collect(),
        )
    }

    /// Mass at exactly `t`, zero off the support.
    pub fn mass_at(&self, t: f64) -> f64 {
        self.support
            .iter()
            .position(|&s| s == t)
            .map_or(0.0, |k| self.masses[k])
    }

    /// Number of support points `<= upper`.
    pub fn active_len(&self, upper: f64) -> usize {
        self.support.partition_point(|&s| s <= upper)
    }
}

/// `int_{[0, upper]} f dw`: atoms beyond `upper` contribute nothing.
pub fn measure_integrate(w: &DiscreteMeasure, f: impl Fn(f64) -> f64, upper: f64) -> f64 {
    w.atoms()
        .take_while(|&(t, _)| t <= upper)
        .map(|(t, m)| f(t) * m)
        .sum()
}

/// Support points `0.1, 0.2, ..., 1.2` of the simulation design.
pub fn design_support() -> Vec<f64> {
    (1..=12).map(|k| k as f64 / 10.0).collect()
}

/// Mass levels allowed at the adaptive tail points.
pub const TAIL_LEVELS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

/// Number of leading support points whose mass is held at one.
pub const FIXED_HEAD: usize = 8;

/// Every measure on [`design_support`] with mass 1 on the first eight points and a mass
/// from [`TAIL_LEVELS`] on each of the last four, in lexicographic order of the tail
/// masses (256 candidates).
pub fn design_lattice() -> Vec<DiscreteMeasure> {
    let support = design_support();
    let tail = support.len() - FIXED_HEAD;
    let count = TAIL_LEVELS.len().pow(tail as u32);
    (0..count)
        .map(|code| {
            let mut masses = vec![1.0; support.len()];
            let mut rest = code;
            for slot in (0..tail).rev() {
                masses[FIXED_HEAD + slot] = TAIL_LEVELS[rest % TAIL_LEVELS.len()];
                rest /= TAIL_LEVELS.len();
            }
            DiscreteMeasure::new(support.clone(), masses).expect("lattice measure is valid")
        })
        .collect()
}
