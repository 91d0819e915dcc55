//! Discrete mismatch scenarios `μ, μ ± m_j·σ` with moment-matched probabilities.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("multiplier {0} must be positive and finite")]
    BadMultiplier(f64),
    #[error("multipliers must be distinct")]
    RepeatedMultiplier,
    #[error("moment matching infeasible: {0}")]
    Infeasible(String),
    #[error("standard deviation must be nonnegative and finite, got {0:?}")]
    BadSpread([f64; 2]),
    #[error("bounds must be strictly positive, got {0:?}")]
    BadBounds([f64; 2]),
}

pub type Result<T> = std::result::Result<T, ScenarioError>;

/// Worst-case magnitude of each mismatch component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyBounds(pub [f64; 2]);

impl Default for UncertaintyBounds {
    fn default() -> Self {
        Self([0.21, 0.85])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    MomentMatched,
    UniformFallback,
}

/// Values ordered `[μ, μ + m₁σ, μ − m₁σ, μ + m₂σ, …]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub values: Vec<[f64; 2]>,
    pub probs: Vec<f64>,
    pub provenance: Provenance,
}

impl ScenarioSet {
    /// A single certain realization.
    pub fn certain(g: [f64; 2]) -> Self {
        Self {
            values: vec![g],
            probs: vec![1.0],
            provenance: Provenance::MomentMatched,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Componentwise `(min, max)` over the scenario values.
    pub fn envelope(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in &self.values {
            for j in 0..2 {
                lo[j] = lo[j].min(v[j]);
                hi[j] = hi[j].max(v[j]);
            }
        }
        (lo, hi)
    }

    pub fn contains(&self, g: [f64; 2]) -> bool {
        let (lo, hi) = self.envelope();
        (0..2).all(|j| lo[j] <= g[j] && g[j] <= hi[j])
    }
}

/// `(2r − 1)!!`, the `2r`-th moment of a standard normal.
fn normal_even_moment(r: usize) -> f64 {
    (1..=r).map(|k| (2 * k - 1) as f64).product()
}

/// Probabilities `[p₀, p₁, p₁, p₂, p₂, …]` for the multipliers `m_j`.
///
/// One multiplier matches the variance: `p± = 1/(2m²)`. With `J` multipliers the
/// even moments up to order `2J` of a standard normal are matched.
pub fn moment_match_probs(multipliers: &[f64]) -> Result<Vec<f64>> {
    for &m in multipliers {
        if !(m > 0.0 && m.is_finite()) {
            return Err(ScenarioError::BadMultiplier(m));
        }
    }
    for (a, &ma) in multipliers.iter().enumerate() {
        if multipliers[a + 1..].contains(&ma) {
            return Err(ScenarioError::RepeatedMultiplier);
        }
    }
    let pairs: Vec<f64> = match multipliers {
        [] => vec![],
        [m] => vec![1.0 / (2.0 * m * m)],
        ms => {
            let j = ms.len();
            // Row r: Σ_j 2 p_j m_j^{2r} = (2r−1)!!, r = 1..J.
            let a = DMatrix::from_fn(j, j, |r, c| 2.0 * (ms[c] * ms[c]).powi(r as i32 + 1));
            let b = DVector::from_fn(j, |r, _| normal_even_moment(r + 1));
            let sol = a
                .lu()
                .solve(&b)
                .ok_or_else(|| ScenarioError::Infeasible("moment system is singular".into()))?;
            sol.iter().copied().collect()
        }
    };
    let p0 = 1.0 - 2.0 * pairs.iter().sum::<f64>();
    if p0 < -1e-12 {
        return Err(ScenarioError::Infeasible(format!(
            "center probability would be {p0:.6} < 0 (multipliers too small)"
        )));
    }
    if let Some((j, p)) = pairs.iter().enumerate().find(|(_, p)| **p < 0.0) {
        return Err(ScenarioError::Infeasible(format!(
            "pair {} probability would be {p:.6} < 0",
            j + 1
        )));
    }
    let mut probs = vec![p0.max(0.0)];
    for p in pairs {
        probs.push(p);
        probs.push(p);
    }
    Ok(probs)
}

/// Builds the scenario set; out-of-bound components are clamped and the
/// probabilities switch to uniform.
pub fn generate(
    mean: [f64; 2],
    std: [f64; 2],
    multipliers: &[f64],
    bounds: UncertaintyBounds,
) -> Result<ScenarioSet> {
    if std.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(ScenarioError::BadSpread(std));
    }
    if bounds.0.iter().any(|b| !(*b > 0.0)) {
        return Err(ScenarioError::BadBounds(bounds.0));
    }
    let probs = moment_match_probs(multipliers)?;
    let mut values = vec![mean];
    for &m in multipliers {
        values.push([mean[0] + m * std[0], mean[1] + m * std[1]]);
        values.push([mean[0] - m * std[0], mean[1] - m * std[1]]);
    }
    let mut clamped = false;
    for v in values.iter_mut() {
        for j in 0..2 {
            let b = bounds.0[j];
            if v[j].abs() > b {
                v[j] = b.copysign(v[j]);
                clamped = true;
            }
        }
    }
    if clamped {
        let s = values.len();
        Ok(ScenarioSet {
            values,
            probs: vec![1.0 / s as f64; s],
            provenance: Provenance::UniformFallback,
        })
    } else {
        Ok(ScenarioSet {
            values,
            probs,
            provenance: Provenance::MomentMatched,
        })
    }
}
