//! End-to-end stages: collect, fit the nominal model, train the residual network,
//! meta-train the update law, and run the controller.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bnn::{self, BnnModel, TrainReport};
use crate::config::RunConfig;
use crate::harness::{self, ClosedLoopLog, Residual};
use crate::lpv::{self, BfrScore, LpvModel};
use crate::meta::{self, MetaKnowledge, MetaReport};
use crate::plant::{self, CollectSpec, TransitionDataset};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Plant(#[from] plant::PlantError),
    #[error(transparent)]
    Lpv(#[from] lpv::LpvError),
    #[error(transparent)]
    Bnn(#[from] bnn::BnnError),
    #[error(transparent)]
    Meta(#[from] meta::MetaError),
    #[error(transparent)]
    Harness(#[from] harness::HarnessError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// The training trajectory and a second trajectory kept for evaluation.
pub fn collect(cfg: &RunConfig) -> Result<(TransitionDataset, TransitionDataset)> {
    let data = plant::collect_dataset(&cfg.collect)?;
    let heldout = plant::collect_dataset(&CollectSpec {
        seed: cfg.heldout_seed,
        ..cfg.collect.clone()
    })?;
    Ok((data, heldout))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NominalFit {
    pub model: LpvModel,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    /// One-step BFR on the test split.
    pub bfr: BfrScore,
}

pub fn fit_nominal(cfg: &RunConfig, data: &TransitionDataset) -> Result<NominalFit> {
    let (train_idx, test_idx) = data.split_indices(cfg.split.train_fraction, cfg.split.seed);
    let model = lpv::fit_lpv(&data.subset(&train_idx), cfg.ridge)?;
    let bfr = lpv::one_step_bfr(&model, &data.subset(&test_idx))?;
    Ok(NominalFit {
        model,
        train_idx,
        test_idx,
        bfr,
    })
}

/// Pretrains a deterministic network, then trains the Bayesian head on the
/// mismatch of the training split, keeping the best epoch on the test split.
pub fn train_residual(
    cfg: &RunConfig,
    data: &TransitionDataset,
    fit: &NominalFit,
) -> Result<(BnnModel, TrainReport)> {
    let d = plant::build_mismatch_dataset(data, &fit.model);
    let (train, test) = (d.subset(&fit.train_idx), d.subset(&fit.test_idx));
    let c = &cfg.bnn;
    let (ann, _) = bnn::pretrain_ann(&BnnModel::new(c.seed, c.rho_init), &train, c)?;
    let (model, report) = bnn::train_bnn(&BnnModel::transfer_from(&ann, c.rho_init), &train, Some(&test), c)?;
    Ok((model, report))
}

/// Meta-trains over time-shifted windows of the whole collected trajectory.
pub fn meta_train(
    cfg: &RunConfig,
    data: &TransitionDataset,
    nominal: &LpvModel,
    model: &BnnModel,
) -> Result<(MetaKnowledge, MetaReport)> {
    let d = plant::build_mismatch_dataset(data, nominal);
    let mk0 = MetaKnowledge::from_bnn(model, cfg.meta.window);
    let rollout_model: Option<&dyn crate::dynamics::DiffDynamics> =
        if cfg.meta.rollout { Some(nominal) } else { None };
    Ok(meta::meta_train(&mk0, rollout_model, &d, &cfg.meta)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationGain {
    pub anchors: usize,
    pub adapted_mse: f64,
    pub global_mse: f64,
}

/// Mean one-step squared error with and without adaptation on held-out data.
pub fn adaptation_gain(
    mk: &MetaKnowledge,
    nominal: &LpvModel,
    heldout: &TransitionDataset,
) -> Result<AdaptationGain> {
    let d = plant::build_mismatch_dataset(heldout, nominal);
    let anchors = meta::valid_anchors(&d, mk.window(), 1);
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(AdaptationGain {
        anchors: anchors.len(),
        adapted_mse: mean(meta::one_step_errors(mk, &d, &anchors, true)?),
        global_mse: mean(meta::one_step_errors(mk, &d, &anchors, false)?),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    /// Meta-learned update law, re-adapted every step.
    Maml,
    /// The trained network without adaptation.
    Global,
}

impl ModelChoice {
    pub fn name(self) -> &'static str {
        match self {
            ModelChoice::Maml => "maml",
            ModelChoice::Global => "global",
        }
    }
}

pub fn run(cfg: &RunConfig, nominal: &LpvModel, mk: &MetaKnowledge, which: ModelChoice) -> Result<ClosedLoopLog> {
    let log = match which {
        ModelChoice::Maml => harness::run_closed_loop(Residual::Adaptive(mk), nominal, &cfg.closed_loop)?,
        ModelChoice::Global => {
            let base = mk.base_model();
            harness::run_closed_loop(Residual::Fixed(&base), nominal, &cfg.closed_loop)?
        }
    };
    Ok(log)
}

/// Every artifact of one full pipeline pass.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub data: TransitionDataset,
    pub heldout: TransitionDataset,
    pub nominal: NominalFit,
    pub bnn: BnnModel,
    pub bnn_report: TrainReport,
    pub meta: MetaKnowledge,
    pub meta_report: MetaReport,
}

pub fn train_all(cfg: &RunConfig) -> Result<Artifacts> {
    let (data, heldout) = collect(cfg)?;
    let nominal = fit_nominal(cfg, &data)?;
    let (bnn, bnn_report) = train_residual(cfg, &data, &nominal)?;
    let (meta, meta_report) = meta_train(cfg, &data, &nominal.model, &bnn)?;
    Ok(Artifacts {
        data,
        heldout,
        nominal,
        bnn,
        bnn_report,
        meta,
        meta_report,
    })
}

/// Summary written next to each run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub model: ModelChoice,
    pub safety: harness::SafetyReport,
    /// `max ‖x(k)‖∞` over `k ≥ settle_from`.
    pub tail_norm: Option<f64>,
    pub settle_from: usize,
    /// First step with `|x₁| ≤ 0.1`.
    pub first_x1_within_tol: Option<usize>,
}

pub fn summarize(cfg: &RunConfig, which: ModelChoice, log: &ClosedLoopLog) -> Result<RunSummary> {
    Ok(RunSummary {
        model: which,
        safety: harness::safety_report(log)?,
        tail_norm: harness::tail_norm(log, cfg.eval.settle_from),
        settle_from: cfg.eval.settle_from,
        first_x1_within_tol: harness::first_settle_x1(log, 0.1),
    })
}

/// Threshold checks on a run summary; each failure is described in one line.
pub fn check_run(cfg: &RunConfig, s: &RunSummary) -> Vec<String> {
    let t = &cfg.eval;
    let name = s.model.name();
    let mut fails = Vec::new();
    if s.safety.violation_fraction > t.max_violation_fraction {
        fails.push(format!(
            "{name}: constraint-violation fraction {:.3} > {}",
            s.safety.violation_fraction, t.max_violation_fraction
        ));
    }
    if s.safety.containment_rate < t.min_containment {
        fails.push(format!(
            "{name}: containment rate {:.3} < {}",
            s.safety.containment_rate, t.min_containment
        ));
    }
    match s.tail_norm {
        Some(n) if n <= t.settle_norm => {}
        Some(n) => fails.push(format!(
            "{name}: max ‖x‖∞ after step {} is {n:.3} > {}",
            t.settle_from, t.settle_norm
        )),
        None => fails.push(format!("{name}: run shorter than {} steps", t.settle_from)),
    }
    fails
}

pub fn check_bfr(cfg: &RunConfig, bfr: &BfrScore) -> Vec<String> {
    (0..2)
        .filter(|&j| bfr.0[j] < cfg.eval.min_bfr)
        .map(|j| format!("nominal: one-step BFR of x{} is {:.2}% < {}%", j + 1, bfr.0[j], cfg.eval.min_bfr))
        .collect()
}

pub fn check_gain(cfg: &RunConfig, g: &AdaptationGain) -> Vec<String> {
    let mut fails = Vec::new();
    if g.adapted_mse > g.global_mse * cfg.eval.max_adapted_ratio {
        fails.push(format!(
            "adaptation: adapted MSE {:.3e} > {} × global MSE {:.3e}",
            g.adapted_mse, cfg.eval.max_adapted_ratio, g.global_mse
        ));
    }
    if g.adapted_mse >= g.global_mse {
        fails.push(format!(
            "adaptation: adapted MSE {:.3e} is not below global MSE {:.3e}",
            g.adapted_mse, g.global_mse
        ));
    }
    fails
}

/// Rows of the per-figure CSVs.
pub mod plots {
    use serde::Serialize;

    use super::*;
    use crate::dynamics::Dynamics;
    use crate::io::RunRow;
    use crate::meta::TrajectoryWindow;

    /// One-step nominal predictions on the test split.
    #[derive(Debug, Clone, Copy, Serialize)]
    pub struct NominalRow {
        pub i: usize,
        pub x1: f64,
        pub x1_pred: f64,
        pub x2: f64,
        pub x2_pred: f64,
    }

    pub fn nominal_rows(model: &LpvModel, test: &TransitionDataset) -> Vec<NominalRow> {
        test.records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let p = model.eval(r.x, r.u);
                NominalRow {
                    i,
                    x1: r.x_next[0],
                    x1_pred: p[0],
                    x2: r.x_next[1],
                    x2_pred: p[1],
                }
            })
            .collect()
    }

    /// Mismatch predictions of the fixed and the adapted network with their spreads.
    #[derive(Debug, Clone, Copy, Serialize)]
    pub struct ResidualRow {
        pub i: usize,
        pub g1: f64,
        pub g2: f64,
        pub global_g1_mean: f64,
        pub global_g1_std: f64,
        pub global_g2_mean: f64,
        pub global_g2_std: f64,
        pub adapted_g1_mean: f64,
        pub adapted_g1_std: f64,
        pub adapted_g2_mean: f64,
        pub adapted_g2_std: f64,
    }

    pub fn residual_rows(
        mk: &MetaKnowledge,
        nominal: &LpvModel,
        heldout: &TransitionDataset,
        n_mc: usize,
        seed: u64,
    ) -> Result<Vec<ResidualRow>> {
        let d = plant::build_mismatch_dataset(heldout, nominal);
        let m = mk.window();
        let base = mk.prior_frozen.head().to_flat();
        meta::valid_anchors(&d, m, 1)
            .into_iter()
            .map(|i| {
                let r = &d.records[i];
                let g = r.g.expect("targets were just built");
                let adapted = mk.adapt(&TrajectoryWindow::from_records(&d, i - m, m).flat())?;
                let s_g = bnn::mc_stats_with_head(&mk.body, &base, r.x, r.u, n_mc, seed)?;
                let s_a = bnn::mc_stats_with_head(&mk.body, &adapted, r.x, r.u, n_mc, seed)?;
                Ok(ResidualRow {
                    i,
                    g1: g[0],
                    g2: g[1],
                    global_g1_mean: s_g.mean[0],
                    global_g1_std: s_g.std[0],
                    global_g2_mean: s_g.mean[1],
                    global_g2_std: s_g.std[1],
                    adapted_g1_mean: s_a.mean[0],
                    adapted_g1_std: s_a.std[0],
                    adapted_g2_mean: s_a.mean[1],
                    adapted_g2_std: s_a.std[1],
                })
            })
            .collect()
    }

    /// Closed-loop trajectory with the band of next states the scenarios predicted.
    #[derive(Debug, Clone, Copy, Serialize)]
    pub struct TrajectoryRow {
        pub k: usize,
        pub t: f64,
        pub x1: f64,
        pub x2: f64,
        pub u1: f64,
        pub u2: f64,
        pub x1_next_lo: f64,
        pub x1_next_hi: f64,
        pub x2_next_lo: f64,
        pub x2_next_hi: f64,
    }

    pub fn trajectory_rows(rows: &[RunRow], nominal: &LpvModel, dt: f64) -> Vec<TrajectoryRow> {
        rows.iter()
            .map(|r| {
                let f = nominal.eval([r.x1, r.x2], [r.u1, r.u2]);
                TrajectoryRow {
                    k: r.k,
                    t: r.k as f64 * dt,
                    x1: r.x1,
                    x2: r.x2,
                    u1: r.u1,
                    u2: r.u2,
                    x1_next_lo: f[0] + r.scen_lo_g1,
                    x1_next_hi: f[0] + r.scen_hi_g1,
                    x2_next_lo: f[1] + r.scen_lo_g2,
                    x2_next_hi: f[1] + r.scen_hi_g2,
                }
            })
            .collect()
    }
}
