//! Scenario-fan optimal control problem with a shared first input.
//!
//! Scenario `j` evolves as `x⁺ = f(x, u) + g_j` with `g_j` fixed over the horizon.
//! The decision vector is `[u(0); u¹(1..N−1); …; u^S(1..N−1)]`, so every
//! scenario shares `u(0)` by construction. Inputs stay in their box through
//! projection; state bounds are a quadratic penalty with escalating weight.
//! Each round runs projected BFGS with Armijo backtracking.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Tape, Tensor, Var};
use crate::dynamics::{column, DiffDynamics};
use crate::plant::{BoxSet, INPUT_SET, STATE_SET};
use crate::scenario::ScenarioSet;
use crate::{Input, State};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OcpError {
    #[error("prediction diverged in scenario {scenario} at step {step}")]
    Diverged { scenario: usize, step: usize },
    #[error("invalid problem: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Autodiff(#[from] AdError),
}

pub type Result<T> = std::result::Result<T, OcpError>;

/// Problem data that does not change between time steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcpSpec {
    pub horizon: usize,
    /// Row-major 2×2 weights.
    pub q: [f64; 4],
    pub r: [f64; 4],
    pub p: [f64; 4],
    pub state_box: BoxSet,
    pub input_box: BoxSet,
    pub penalty_weights: Vec<f64>,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for OcpSpec {
    fn default() -> Self {
        Self {
            horizon: 7,
            q: diag(1.0),
            r: diag(100.0),
            p: diag(1.0),
            state_box: STATE_SET,
            input_box: INPUT_SET,
            penalty_weights: vec![1e2, 1e4, 1e6],
            max_iters: 200,
            tol: 1e-6,
        }
    }
}

pub fn diag(s: f64) -> [f64; 4] {
    [s, 0.0, 0.0, s]
}

fn quad(m: &[f64; 4], v: [f64; 2]) -> f64 {
    v[0] * (m[0] * v[0] + m[1] * v[1]) + v[1] * (m[2] * v[0] + m[3] * v[1])
}

impl OcpSpec {
    fn check(&self, scen: &ScenarioSet) -> Result<()> {
        if self.horizon == 0 {
            return Err(OcpError::BadSpec("horizon must be at least 1".into()));
        }
        if scen.is_empty() || scen.values.len() != scen.probs.len() {
            return Err(OcpError::BadSpec("scenario values and probabilities must match".into()));
        }
        if self.penalty_weights.is_empty() {
            return Err(OcpError::BadSpec("need at least one penalty weight".into()));
        }
        for m in [&self.q, &self.r, &self.p] {
            if m[1] != m[2] || m[0] < 0.0 || m[3] < 0.0 || m[0] * m[3] < m[1] * m[2] {
                return Err(OcpError::BadSpec("weights must be symmetric PSD".into()));
            }
        }
        Ok(())
    }

    /// Decision-vector length for `s` scenarios.
    pub fn dim(&self, s: usize) -> usize {
        2 + 2 * s * (self.horizon - 1)
    }

    fn lower_upper(&self, s: usize) -> (Vec<f64>, Vec<f64>) {
        let n = self.dim(s);
        let lo = (0..n).map(|i| self.input_box.lo[i % 2]).collect();
        let hi = (0..n).map(|i| self.input_box.hi[i % 2]).collect();
        (lo, hi)
    }

    /// Input `step` of scenario `j` inside the decision vector.
    fn index(&self, j: usize, step: usize) -> usize {
        if step == 0 {
            0
        } else {
            2 + 2 * (j * (self.horizon - 1) + step - 1)
        }
    }
}

/// Per-scenario input sequences (length `N`, identical first entries).
pub fn unpack(spec: &OcpSpec, s: usize, z: &[f64]) -> Vec<Vec<Input>> {
    (0..s)
        .map(|j| {
            (0..spec.horizon)
                .map(|k| {
                    let i = spec.index(j, k);
                    [z[i], z[i + 1]]
                })
                .collect()
        })
        .collect()
}

/// Inverse of [`unpack`]; the first input of scenario 0 is used for `u(0)`.
pub fn pack(spec: &OcpSpec, inputs: &[Vec<Input>]) -> Vec<f64> {
    let mut z = vec![0.0; spec.dim(inputs.len())];
    for (j, seq) in inputs.iter().enumerate() {
        for (k, u) in seq.iter().enumerate().take(spec.horizon) {
            if k == 0 && j > 0 {
                continue;
            }
            let i = spec.index(j, k);
            z[i] = u[0];
            z[i + 1] = u[1];
        }
    }
    z
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    /// `N + 1` states per scenario, starting at `x0`.
    pub states: Vec<Vec<State>>,
    /// Expected cost `Σ_j p_j [Σ_i ℓ + V_N]`.
    pub cost: f64,
    /// `Σ_j Σ_{i≥1} ‖state-box violation‖²`.
    pub violation_sq: f64,
    /// Largest per-axis state-box violation over all predicted states.
    pub max_violation: f64,
}

/// Plain rollout of every scenario under the given input sequences.
pub fn rollout<F: DiffDynamics + ?Sized>(
    spec: &OcpSpec,
    f: &F,
    scen: &ScenarioSet,
    x0: State,
    inputs: &[Vec<Input>],
) -> Result<Rollout> {
    spec.check(scen)?;
    if inputs.len() != scen.len() || inputs.iter().any(|s| s.len() != spec.horizon) {
        return Err(OcpError::BadSpec(format!(
            "need {} sequences of {} inputs",
            scen.len(),
            spec.horizon
        )));
    }
    if inputs.iter().any(|s| s[0] != inputs[0][0]) {
        return Err(OcpError::BadSpec("scenarios must share the first input".into()));
    }
    let mut out = Rollout {
        states: Vec::with_capacity(scen.len()),
        cost: 0.0,
        violation_sq: 0.0,
        max_violation: 0.0,
    };
    for (j, (g, seq)) in scen.values.iter().zip(inputs).enumerate() {
        let mut x = x0;
        let mut states = vec![x];
        let mut c = 0.0;
        for (k, &u) in seq.iter().enumerate() {
            c += quad(&spec.q, x) + quad(&spec.r, u);
            let fx = f.eval(x, u);
            x = [fx[0] + g[0], fx[1] + g[1]];
            if !(x[0].is_finite() && x[1].is_finite()) {
                return Err(OcpError::Diverged { scenario: j, step: k });
            }
            for a in 0..2 {
                let v = (spec.state_box.lo[a] - x[a]).max(x[a] - spec.state_box.hi[a]).max(0.0);
                out.violation_sq += v * v;
                out.max_violation = out.max_violation.max(v);
            }
            states.push(x);
        }
        c += quad(&spec.p, x);
        out.cost += scen.probs[j] * c;
        out.states.push(states);
    }
    Ok(out)
}

fn quad_var<'t>(m: Var<'t>, v: Var<'t>) -> crate::autodiff::Result<Var<'t>> {
    v.reshape(vec![1, 2])?.matmul(m.matmul(v)?)?.reshape(vec![1])
}

/// Penalized objective and its gradient w.r.t. `z`.
pub fn objective_grad<F: DiffDynamics + ?Sized>(
    spec: &OcpSpec,
    f: &F,
    scen: &ScenarioSet,
    x0: State,
    z: &[f64],
    weight: f64,
) -> Result<(f64, Vec<f64>)> {
    spec.check(scen)?;
    let tape = Tape::new();
    let zv = tape.param(Tensor::vector(z.to_vec()));
    let mat = |m: &[f64; 4]| tape.constant(Tensor::matrix(2, 2, m.to_vec()).expect("2x2"));
    let (q, r, p) = (mat(&spec.q), mat(&spec.r), mat(&spec.p));
    let mut terms: Vec<Var> = Vec::new();
    for (j, g) in scen.values.iter().enumerate() {
        let gv = tape.constant(column(*g));
        let mut x = tape.constant(column(x0));
        let mut scen_terms: Vec<Var> = Vec::new();
        for k in 0..spec.horizon {
            let i = spec.index(j, k);
            let u = zv.slice(i, 2)?.reshape(vec![2, 1])?;
            scen_terms.push(quad_var(q, x)?);
            scen_terms.push(quad_var(r, u)?);
            x = f.eval_var(x, u)?.add(gv)?;
            let xv = x.value();
            for a in 0..2 {
                let val = xv.data()[a];
                let (lo, hi) = (spec.state_box.lo[a], spec.state_box.hi[a]);
                if val > hi || val < lo {
                    let bound = if val > hi { hi } else { lo };
                    let v = x.slice(a, 1)?.offset(-bound)?.square()?.scale(weight)?;
                    terms.push(v);
                }
            }
        }
        scen_terms.push(quad_var(p, x)?);
        let mut c = scen_terms[0];
        for t in &scen_terms[1..] {
            c = c.add(*t)?;
        }
        terms.push(c.scale(scen.probs[j])?);
    }
    let mut loss = terms[0];
    for t in &terms[1..] {
        loss = loss.add(*t)?;
    }
    let value = loss.item();
    let g = loss.backward()?.wrt_or_zero(zv).into_data();
    Ok((value, g))
}

/// Penalized objective without the tape.
pub fn objective_value<F: DiffDynamics + ?Sized>(
    spec: &OcpSpec,
    f: &F,
    scen: &ScenarioSet,
    x0: State,
    z: &[f64],
    weight: f64,
) -> Result<f64> {
    let r = rollout(spec, f, scen, x0, &unpack(spec, scen.len(), z))?;
    Ok(r.cost + weight * r.violation_sq)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    /// Penalized objective at the last penalty weight.
    pub penalized_cost: f64,
    pub max_violation: f64,
    /// The warm start was returned because the solver could not improve on it.
    pub fallback: bool,
    pub converged: bool,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcpSolution {
    pub u0: Input,
    /// Per-scenario inputs `u^j(1..N−1)`.
    pub tails: Vec<Vec<Input>>,
    /// Per-scenario predicted states `x^j(0..N)`.
    pub states: Vec<Vec<State>>,
    pub cost: f64,
    pub diagnostics: SolverDiagnostics,
}

impl OcpSolution {
    /// Full sequences `[u0, tail…]` per scenario.
    pub fn sequences(&self) -> Vec<Vec<Input>> {
        self.tails
            .iter()
            .map(|t| std::iter::once(self.u0).chain(t.iter().copied()).collect())
            .collect()
    }

    /// Initial guess for the next step: sequences shifted by one, last input repeated,
    /// with the center scenario's second input as the new shared first input.
    pub fn shifted(&self) -> Vec<Vec<Input>> {
        let center = self.sequences()[0].get(1).copied().unwrap_or(self.u0);
        self.sequences()
            .into_iter()
            .map(|seq| {
                let mut s: Vec<Input> = seq[1..].to_vec();
                s.push(*seq.last().expect("nonempty"));
                s[0] = center;
                s
            })
            .collect()
    }
}

fn project(z: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..z.len() {
        z[i] = z[i].clamp(lo[i], hi[i]);
    }
}

fn projected_gradient_norm(z: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    (0..z.len())
        .map(|i| ((z[i] - g[i]).clamp(lo[i], hi[i]) - z[i]).abs())
        .fold(0.0, f64::max)
}

struct Problem<'a, F: ?Sized> {
    spec: &'a OcpSpec,
    f: &'a F,
    scen: &'a ScenarioSet,
    x0: State,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl<F: DiffDynamics + ?Sized> Problem<'_, F> {
    /// One penalty round of projected BFGS. Returns iterations used and convergence.
    fn minimize(&self, z: &mut Vec<f64>, weight: f64) -> Result<(usize, bool)> {
        let n = z.len();
        let (mut fz, mut g) = objective_grad(self.spec, self.f, self.scen, self.x0, z, weight)?;
        let mut h = DMatrix::<f64>::identity(n, n) * (1.0 / self.curvature_guess());
        for it in 0..self.spec.max_iters {
            if projected_gradient_norm(z, &g, &self.lo, &self.hi) < self.spec.tol {
                return Ok((it, true));
            }
            // Variables held at a bound by the gradient stay fixed this iteration.
            let free: Vec<bool> = (0..n)
                .map(|i| {
                    !((z[i] <= self.lo[i] && g[i] > 0.0) || (z[i] >= self.hi[i] && g[i] < 0.0))
                })
                .collect();
            let gf = DVector::from_fn(n, |i, _| if free[i] { g[i] } else { 0.0 });
            let mut d = -(&h * &gf);
            for i in 0..n {
                if !free[i] {
                    d[i] = 0.0;
                }
            }
            if d.dot(&gf) >= 0.0 {
                h = DMatrix::identity(n, n) * (1.0 / self.curvature_guess());
                d = -(&h * &gf);
            }
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..40 {
                let mut trial: Vec<f64> = (0..n).map(|i| z[i] + alpha * d[i]).collect();
                project(&mut trial, &self.lo, &self.hi);
                let decrease: f64 = (0..n).map(|i| g[i] * (trial[i] - z[i])).sum();
                match objective_value(self.spec, self.f, self.scen, self.x0, &trial, weight) {
                    Ok(ft) if ft <= fz + 1e-4 * decrease && decrease < 0.0 => {
                        accepted = Some(trial);
                        break;
                    }
                    Ok(_) | Err(OcpError::Diverged { .. }) => alpha *= 0.5,
                    Err(e) => return Err(e),
                }
            }
            let Some(trial) = accepted else {
                // No descent along the projected direction: at numerical precision.
                return Ok((it, false));
            };
            let (ft, gt) = objective_grad(self.spec, self.f, self.scen, self.x0, &trial, weight)?;
            let s = DVector::from_fn(n, |i, _| trial[i] - z[i]);
            let y = DVector::from_fn(n, |i, _| gt[i] - g[i]);
            let sy = s.dot(&y);
            if sy > 1e-12 * s.norm() * y.norm() {
                let rho = 1.0 / sy;
                let hy = &h * &y;
                let yhy = y.dot(&hy);
                h += (&s * s.transpose()) * (rho * (1.0 + rho * yhy))
                    - (&hy * s.transpose() + &s * hy.transpose()) * rho;
            }
            *z = trial;
            fz = ft;
            g = gt;
        }
        let done = projected_gradient_norm(z, &g, &self.lo, &self.hi) < self.spec.tol;
        Ok((self.spec.max_iters, done))
    }

    /// Scale of the input Hessian used for the initial inverse approximation.
    fn curvature_guess(&self) -> f64 {
        2.0 * self.spec.r[0].max(self.spec.r[3]).max(1.0)
    }
}

/// Minimizes the penalized expected cost from `warm` (or zeros).
pub fn solve<F: DiffDynamics + ?Sized>(
    spec: &OcpSpec,
    f: &F,
    scen: &ScenarioSet,
    x0: State,
    warm: Option<&[Vec<Input>]>,
) -> Result<OcpSolution> {
    let start = Instant::now();
    spec.check(scen)?;
    if !(x0[0].is_finite() && x0[1].is_finite()) {
        return Err(OcpError::BadSpec("initial state must be finite".into()));
    }
    let s = scen.len();
    let (lo, hi) = spec.lower_upper(s);
    let mut z0 = match warm {
        Some(w) if w.len() == s && w.iter().all(|q| q.len() == spec.horizon) => pack(spec, w),
        _ => vec![0.0; spec.dim(s)],
    };
    project(&mut z0, &lo, &hi);
    let problem = Problem {
        spec,
        f,
        scen,
        x0,
        lo,
        hi,
    };
    let mut z = z0.clone();
    let mut iterations = 0;
    let mut converged = false;
    for &w in &spec.penalty_weights {
        let (it, ok) = problem.minimize(&mut z, w)?;
        iterations += it;
        converged = ok;
    }
    let last = *spec.penalty_weights.last().expect("checked");
    let final_obj = objective_value(spec, f, scen, x0, &z, last)?;
    let warm_obj = objective_value(spec, f, scen, x0, &z0, last).unwrap_or(f64::INFINITY);
    let fallback = final_obj > warm_obj;
    if fallback {
        z = z0;
    }
    let seqs = unpack(spec, s, &z);
    let r = rollout(spec, f, scen, x0, &seqs)?;
    Ok(OcpSolution {
        u0: seqs[0][0],
        tails: seqs.iter().map(|q| q[1..].to_vec()).collect(),
        states: r.states,
        cost: r.cost,
        diagnostics: SolverDiagnostics {
            iterations,
            penalized_cost: r.cost + last * r.violation_sq,
            max_violation: r.max_violation,
            fallback,
            converged,
            wall_time_s: start.elapsed().as_secs_f64(),
        },
    })
}
