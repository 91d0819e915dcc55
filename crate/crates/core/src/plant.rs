//! Ground-truth continuous-time plant and the transition datasets drawn from it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::Dynamics;
use crate::{Input, State};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("integration diverged; last finite state {last_finite:?}")]
    Diverged { last_finite: State },
    #[error("sampling time must be positive, got {0}")]
    BadStep(f64),
    #[error("invalid collection setup: {0}")]
    BadCollection(String),
}

/// Axis-aligned box in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl BoxSet {
    pub const fn new(lo: [f64; 2], hi: [f64; 2]) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        (0..2).all(|i| p[i] >= self.lo[i] && p[i] <= self.hi[i])
    }

    /// Largest per-axis distance outside the box; zero inside.
    pub fn violation(&self, p: [f64; 2]) -> f64 {
        (0..2)
            .map(|i| (self.lo[i] - p[i]).max(p[i] - self.hi[i]).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn clamp(&self, p: [f64; 2]) -> [f64; 2] {
        [
            p[0].clamp(self.lo[0], self.hi[0]),
            p[1].clamp(self.lo[1], self.hi[1]),
        ]
    }

    /// Same center, half-widths multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = *self;
        for i in 0..2 {
            let c = 0.5 * (self.lo[i] + self.hi[i]);
            let h = 0.5 * (self.hi[i] - self.lo[i]) * factor;
            out.lo[i] = c - h;
            out.hi[i] = c + h;
        }
        out
    }
}

/// State constraint set X.
pub const STATE_SET: BoxSet = BoxSet::new([-5.0, 0.0], [3.0, 10.0]);
/// Input constraint set U.
pub const INPUT_SET: BoxSet = BoxSet::new([-1.0, -1.0], [1.0, 1.0]);

pub const DEFAULT_SUBSTEPS: usize = 100;

pub fn clamp_input(u: Input) -> Input {
    INPUT_SET.clamp(u)
}

/// Right-hand side of the plant ODE.
pub fn plant_derivative(x: State, u: Input) -> [f64; 2] {
    let [x1, x2] = x;
    let [u1, u2] = u;
    [
        10.0 * x1 - x1 * x2 * x2 + 0.5 * x1 * x1 + 0.5 * x1 * u1 + 0.5 * u2,
        -x2 + 0.1 * x1 * x1 + 3.0 * x1 * x1 * x2 - x1 * x2 * u1,
    ]
}

/// One sampling period with zero-order-hold input (clamped to U), RK4 with
/// [`DEFAULT_SUBSTEPS`] equal substeps.
pub fn step(x: State, u: Input, dt: f64) -> Result<State, PlantError> {
    step_with(x, u, dt, DEFAULT_SUBSTEPS)
}

pub fn step_with(x: State, u: Input, dt: f64, substeps: usize) -> Result<State, PlantError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(PlantError::BadStep(dt));
    }
    let u = clamp_input(u);
    let h = dt / substeps.max(1) as f64;
    let axpy = |a: State, s: f64, k: [f64; 2]| [a[0] + s * k[0], a[1] + s * k[1]];
    let mut s = x;
    for _ in 0..substeps.max(1) {
        let k1 = plant_derivative(s, u);
        let k2 = plant_derivative(axpy(s, 0.5 * h, k1), u);
        let k3 = plant_derivative(axpy(s, 0.5 * h, k2), u);
        let k4 = plant_derivative(axpy(s, h, k3), u);
        let next = [
            s[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            s[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ];
        if !(next[0].is_finite() && next[1].is_finite()) {
            return Err(PlantError::Diverged { last_finite: s });
        }
        s = next;
    }
    Ok(s)
}

/// The sampled plant as a discrete-time map.
#[derive(Debug, Clone, Copy)]
pub struct SampledPlant {
    pub dt: f64,
}

impl Dynamics for SampledPlant {
    fn eval(&self, x: State, u: Input) -> State {
        step(x, u, self.dt).unwrap_or([f64::NAN; 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub x: State,
    pub u: Input,
    pub x_next: State,
    /// Mismatch target `x_next - f(x, u)` once a nominal model is chosen.
    pub g: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransitionDataset {
    pub records: Vec<Transition>,
}

/// Collection protocol for [`collect_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectSpec {
    pub n: usize,
    pub dt: f64,
    pub u_low: f64,
    pub u_high: f64,
    pub x0: State,
    /// Leaving this box restarts the trajectory from a uniform state in X.
    pub collection_box: BoxSet,
    pub seed: u64,
}

impl Default for CollectSpec {
    /// Under small random inputs the plant either settles near `x₁ ≈ 0` or falls
    /// into a relaxation oscillation in `x₁`, depending on the input draw. The
    /// default start and seed give a settling run, which the LPV fit handles well.
    fn default() -> Self {
        Self {
            n: 1000,
            dt: 0.1,
            u_low: -0.5,
            u_high: 0.5,
            x0: [-1.0, 5.0],
            collection_box: STATE_SET.scaled(2.0),
            seed: 8,
        }
    }
}

/// Simulates one trajectory under i.i.d. uniform inputs and records `n` transitions.
pub fn collect_dataset(spec: &CollectSpec) -> Result<TransitionDataset, PlantError> {
    if spec.n == 0 {
        return Err(PlantError::BadCollection("n must be at least 1".into()));
    }
    if !(spec.u_low <= spec.u_high) {
        return Err(PlantError::BadCollection(format!(
            "input bounds [{}, {}] are empty",
            spec.u_low, spec.u_high
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draw_u = |rng: &mut ChaCha8Rng| -> f64 {
        if spec.u_low == spec.u_high {
            spec.u_low
        } else {
            rng.random_range(spec.u_low..spec.u_high)
        }
    };
    let mut records = Vec::with_capacity(spec.n);
    let mut x = spec.x0;
    // Guards against a box that is left on every single step.
    let mut consecutive_restarts = 0usize;
    while records.len() < spec.n {
        let u = [draw_u(&mut rng), draw_u(&mut rng)];
        let next = step(x, u, spec.dt);
        match next {
            Ok(xn) if spec.collection_box.contains(xn) => {
                records.push(Transition {
                    x,
                    u,
                    x_next: xn,
                    g: None,
                });
                x = xn;
                consecutive_restarts = 0;
            }
            _ => {
                consecutive_restarts += 1;
                if consecutive_restarts > 10_000 {
                    return Err(PlantError::BadCollection(
                        "trajectory leaves the collection box immediately".into(),
                    ));
                }
                x = [
                    rng.random_range(STATE_SET.lo[0]..STATE_SET.hi[0]),
                    rng.random_range(STATE_SET.lo[1]..STATE_SET.hi[1]),
                ];
            }
        }
    }
    Ok(TransitionDataset { records })
}

/// Populates `g = x_next - f(x, u)` for every record.
pub fn build_mismatch_dataset<F: Dynamics + ?Sized>(
    data: &TransitionDataset,
    f: &F,
) -> TransitionDataset {
    let records = data
        .records
        .iter()
        .map(|r| {
            let p = f.eval(r.x, r.u);
            Transition {
                g: Some([r.x_next[0] - p[0], r.x_next[1] - p[1]]),
                ..*r
            }
        })
        .collect();
    TransitionDataset { records }
}

impl TransitionDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Random disjoint split; the first part has `round(frac * n)` records.
    pub fn split_indices(&self, frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let n = self.len();
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Fisher-Yates
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        let cut = ((frac * n as f64).round() as usize).min(n);
        let mut train = idx[..cut].to_vec();
        let mut test = idx[cut..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        (train, test)
    }

    pub fn subset(&self, indices: &[usize]) -> TransitionDataset {
        TransitionDataset {
            records: indices.iter().map(|&i| self.records[i]).collect(),
        }
    }

    /// True when record `i + 1` starts exactly where record `i` ends.
    pub fn continues(&self, i: usize) -> bool {
        i + 1 < self.len() && self.records[i + 1].x == self.records[i].x_next
    }

    /// Whether records `start..=end` form one uninterrupted trajectory piece.
    pub fn is_contiguous(&self, start: usize, end: usize) -> bool {
        end < self.len() && (start..end).all(|i| self.continues(i))
    }

    pub fn targets(&self) -> Option<Vec<[f64; 2]>> {
        self.records.iter().map(|r| r.g).collect()
    }

    pub fn max_abs_g(&self) -> Option<[f64; 2]> {
        let g = self.targets()?;
        Some(g.iter().fold([0.0f64; 2], |m, g| {
            [m[0].max(g[0].abs()), m[1].max(g[1].abs())]
        }))
    }
}
