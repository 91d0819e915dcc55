//! Closed-loop runs: adapt, estimate the mismatch, build scenarios, solve, apply.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bnn::{self, BnnModel, DenseLayer};
use crate::dynamics::DiffDynamics;
use crate::meta::{MetaKnowledge, TrajectoryWindow};
use crate::plant::{self, DEFAULT_SUBSTEPS};
use crate::scenario::{self, ScenarioSet, UncertaintyBounds};
use crate::smpc::{self, OcpSpec};
use crate::{Input, State};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid closed-loop setup: {0}")]
    BadConfig(String),
    #[error("runs are not comparable: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Bnn(#[from] bnn::BnnError),
    #[error(transparent)]
    Meta(#[from] crate::meta::MetaError),
    #[error(transparent)]
    Scenario(#[from] scenario::ScenarioError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClosedLoopConfig {
    pub x0: State,
    pub steps: usize,
    pub dt: f64,
    pub substeps: usize,
    /// Posterior draws behind each mismatch estimate.
    pub n_mc: usize,
    /// Spread multipliers; `[3]` gives the scenarios `μ, μ ± 3σ`.
    pub multipliers: Vec<f64>,
    pub bounds: UncertaintyBounds,
    pub ocp: OcpSpec,
    pub seed: u64,
}

impl Default for ClosedLoopConfig {
    fn default() -> Self {
        Self {
            x0: [-1.0, 5.0],
            steps: 150,
            dt: 0.1,
            substeps: DEFAULT_SUBSTEPS,
            n_mc: 50,
            multipliers: vec![3.0],
            bounds: UncertaintyBounds::default(),
            ocp: OcpSpec::default(),
            seed: 0,
        }
    }
}

/// Which residual model drives the controller.
#[derive(Debug, Clone, Copy)]
pub enum Residual<'a> {
    /// Head re-adapted at every step from the last `M` state-input pairs.
    Adaptive(&'a MetaKnowledge),
    /// One fixed posterior for the whole run.
    Fixed(&'a BnnModel),
}

impl Residual<'_> {
    pub fn kind(&self) -> ModelKind {
        match self {
            Residual::Adaptive(_) => ModelKind::Adaptive,
            Residual::Fixed(_) => ModelKind::Fixed,
        }
    }

    fn body(&self) -> &[DenseLayer] {
        match self {
            Residual::Adaptive(mk) => &mk.body,
            Residual::Fixed(m) => &m.body,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Adaptive,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub k: usize,
    pub x: State,
    pub u: Input,
    pub x_next: State,
    /// Realized mismatch `x(k+1) − f(x(k), u(k))`.
    pub g_real: [f64; 2],
    pub g_mean: [f64; 2],
    pub g_std: [f64; 2],
    pub scenarios: ScenarioSet,
    pub envelope_lo: [f64; 2],
    pub envelope_hi: [f64; 2],
    pub contained: bool,
    pub cost_step: f64,
    /// Distance of `x(k+1)` outside the state box.
    pub viol_x: f64,
    pub viol_u: f64,
    pub solver_iters: usize,
    /// Expected OCP cost; NaN when the solver failed outright.
    pub solver_cost: f64,
    pub solver_fallback: bool,
    pub solver_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopLog {
    pub model: ModelKind,
    pub config: ClosedLoopConfig,
    pub steps: Vec<StepLog>,
    /// Set when the plant produced a non-finite state and the run stopped early.
    pub aborted: Option<String>,
}

impl ClosedLoopLog {
    /// `x(0), …, x(n)`.
    pub fn states(&self) -> Vec<State> {
        let mut xs: Vec<State> = self.steps.iter().map(|s| s.x).collect();
        match self.steps.last() {
            Some(s) => xs.push(s.x_next),
            None => xs.push(self.config.x0),
        }
        xs
    }
}

fn step_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64)
}

fn quad(m: &[f64; 4], v: [f64; 2]) -> f64 {
    v[0] * (m[0] * v[0] + m[1] * v[1]) + v[1] * (m[2] * v[0] + m[3] * v[1])
}

/// Runs the adaptive scenario MPC loop on the true plant.
pub fn run_closed_loop<F: DiffDynamics + ?Sized>(
    residual: Residual<'_>,
    nominal: &F,
    cfg: &ClosedLoopConfig,
) -> Result<ClosedLoopLog> {
    let true_plant = |x: State, u: Input| plant::step_with(x, u, cfg.dt, cfg.substeps);
    run_closed_loop_on(residual, nominal, &true_plant, cfg)
}

/// Same loop against an arbitrary sampled plant.
pub fn run_closed_loop_on<F: DiffDynamics + ?Sized>(
    residual: Residual<'_>,
    nominal: &F,
    plant_step: &dyn Fn(State, Input) -> std::result::Result<State, plant::PlantError>,
    cfg: &ClosedLoopConfig,
) -> Result<ClosedLoopLog> {
    if !(cfg.dt > 0.0) || cfg.n_mc < 2 {
        return Err(HarnessError::BadConfig("dt must be positive and n_mc at least 2".into()));
    }
    if !(cfg.x0[0].is_finite() && cfg.x0[1].is_finite()) {
        return Err(HarnessError::BadConfig("x0 must be finite".into()));
    }
    let fixed_theta = match residual {
        Residual::Fixed(m) => {
            m.validate()?;
            Some(m.theta())
        }
        Residual::Adaptive(_) => None,
    };
    let mut window = match residual {
        Residual::Adaptive(mk) => Some(TrajectoryWindow::filled(mk.window(), cfg.x0, [0.0; 2])),
        Residual::Fixed(_) => None,
    };
    let mut log = ClosedLoopLog {
        model: residual.kind(),
        config: cfg.clone(),
        steps: Vec::with_capacity(cfg.steps),
        aborted: None,
    };
    let mut x = cfg.x0;
    let mut warm: Option<Vec<Vec<Input>>> = None;
    for k in 0..cfg.steps {
        let theta = match (&residual, &window) {
            (Residual::Adaptive(mk), Some(w)) => mk.adapt(&w.flat())?,
            _ => fixed_theta.clone().expect("fixed model"),
        };
        // The planned next input stands in for u(k) when estimating g(k).
        let u_est = warm.as_ref().map_or([0.0; 2], |w| w[0][0]);
        let stats =
            bnn::mc_stats_with_head(residual.body(), &theta, x, u_est, cfg.n_mc, step_seed(cfg.seed, k))?;
        let scen = scenario::generate(stats.mean, stats.std, &cfg.multipliers, cfg.bounds)?;
        let (u, iters, cost, fallback, err) =
            match smpc::solve(&cfg.ocp, nominal, &scen, x, warm.as_deref()) {
                Ok(sol) => {
                    warm = Some(sol.shifted());
                    let d = &sol.diagnostics;
                    (sol.u0, d.iterations, sol.cost, d.fallback, None)
                }
                Err(e) => {
                    let u = warm.as_ref().map_or([0.0; 2], |w| w[0][0]);
                    warm = None;
                    (u, 0, f64::NAN, true, Some(e.to_string()))
                }
            };
        let viol_u = cfg.ocp.input_box.violation(u);
        let u = cfg.ocp.input_box.clamp(u);
        let x_next = match plant_step(x, u) {
            Ok(xn) => xn,
            Err(e) => {
                log.aborted = Some(format!("step {k}: {e}"));
                break;
            }
        };
        let fx = nominal.eval(x, u);
        let g_real = [x_next[0] - fx[0], x_next[1] - fx[1]];
        let (envelope_lo, envelope_hi) = scen.envelope();
        log.steps.push(StepLog {
            k,
            x,
            u,
            x_next,
            g_real,
            g_mean: stats.mean,
            g_std: stats.std,
            contained: scen.contains(g_real),
            scenarios: scen,
            envelope_lo,
            envelope_hi,
            cost_step: quad(&cfg.ocp.q, x) + quad(&cfg.ocp.r, u),
            viol_x: cfg.ocp.state_box.violation(x_next),
            viol_u,
            solver_iters: iters,
            solver_cost: cost,
            solver_fallback: fallback,
            solver_error: err,
        });
        if let Some(w) = window.as_mut() {
            w.push(x, u);
        }
        x = x_next;
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyReport {
    pub steps: usize,
    /// Fraction of steps with `u(k) ∈ U` and `x(k+1) ∈ X`.
    pub safe_fraction: f64,
    pub violation_fraction: f64,
    pub containment_rate: f64,
    pub closed_loop_cost: f64,
    pub final_state: State,
    pub final_norm_inf: f64,
    pub solver_fallbacks: usize,
    pub aborted: bool,
}

pub fn safety_report(log: &ClosedLoopLog) -> Result<SafetyReport> {
    let n = log.steps.len();
    if n == 0 {
        return Err(HarnessError::BadConfig("empty log".into()));
    }
    let safe = log
        .steps
        .iter()
        .filter(|s| s.viol_x == 0.0 && s.viol_u == 0.0)
        .count();
    let contained = log.steps.iter().filter(|s| s.contained).count();
    let last = log.steps.last().expect("nonempty").x_next;
    Ok(SafetyReport {
        steps: n,
        safe_fraction: safe as f64 / n as f64,
        violation_fraction: (n - safe) as f64 / n as f64,
        containment_rate: contained as f64 / n as f64,
        closed_loop_cost: log.steps.iter().map(|s| s.cost_step).sum(),
        final_state: last,
        final_norm_inf: last[0].abs().max(last[1].abs()),
        solver_fallbacks: log.steps.iter().filter(|s| s.solver_fallback).count(),
        aborted: log.aborted.is_some(),
    })
}

/// `max ‖x(k)‖∞` over `k ≥ from`, or `None` if the run is shorter.
pub fn tail_norm(log: &ClosedLoopLog, from: usize) -> Option<f64> {
    let xs = log.states();
    (from < xs.len()).then(|| {
        xs[from..]
            .iter()
            .map(|x| x[0].abs().max(x[1].abs()))
            .fold(0.0, f64::max)
    })
}

/// First `k` with `|x₁(k)| ≤ tol`.
pub fn first_settle_x1(log: &ClosedLoopLog, tol: f64) -> Option<usize> {
    log.states().iter().position(|x| x[0].abs() <= tol)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub adaptive: SafetyReport,
    pub fixed: SafetyReport,
    /// Adaptive minus fixed closed-loop cost.
    pub cost_difference: f64,
    pub adaptive_cost_lower: bool,
    /// Whether `|x₁|` of the fixed-model run ever reaches 0.1.
    pub fixed_reaches_x1_tol: bool,
    pub adaptive_reaches_x1_tol: bool,
}

/// Side-by-side summary of two runs that differ only in the residual model.
pub fn compare_runs(adaptive: &ClosedLoopLog, fixed: &ClosedLoopLog) -> Result<Comparison> {
    if adaptive.config != fixed.config {
        return Err(HarnessError::Mismatch("closed-loop configs differ".into()));
    }
    let a = safety_report(adaptive)?;
    let f = safety_report(fixed)?;
    Ok(Comparison {
        cost_difference: a.closed_loop_cost - f.closed_loop_cost,
        adaptive_cost_lower: a.closed_loop_cost < f.closed_loop_cost,
        fixed_reaches_x1_tol: first_settle_x1(fixed, 0.1).is_some(),
        adaptive_reaches_x1_tol: first_settle_x1(adaptive, 0.1).is_some(),
        adaptive: a,
        fixed: f,
    })
}
