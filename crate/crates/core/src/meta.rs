//! Meta-learned adaptation of the head posterior.
//!
//! The adapted posterior at time `k` is `θ(k) = w + τ·Ψ_W + Ψ_b`, where `τ` is the
//! flattened window of the last `M` (state, input) pairs. Training follows the
//! first-order MAML loop: `Ψ` steps after every task, `w` steps once per
//! iteration on the task-averaged gradient. The body and the frozen prior never change.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{concat, AdError, Tape, Tensor, Var};
use crate::bnn::{
    self, body_features, body_flat, body_shapes, body_var, draw_noise, head_g_var, head_mean_var,
    log_prior_var, sample_head_var, BnnError, BnnModel, DenseLayer, FrozenPosterior,
    HeadPosterior, Prior, HEAD_PARAMS,
};
use crate::dynamics::DiffDynamics;
use crate::optim::Adam;
use crate::plant::TransitionDataset;
use crate::{Input, State};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetaError {
    #[error("window must hold {expected} values, got {got}")]
    BadWindow { expected: usize, got: usize },
    #[error("anchor {anchor} needs contiguous records {start}..={end}")]
    BadAnchor {
        anchor: usize,
        start: usize,
        end: usize,
    },
    #[error("dataset has no contiguous stretch of {0} records")]
    TooShort(usize),
    #[error("record {0} has no mismatch target g")]
    MissingTargets(usize),
    #[error("rollout mode needs a nominal model")]
    NeedsNominal,
    #[error("invalid setting: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Bnn(#[from] BnnError),
    #[error(transparent)]
    Autodiff(#[from] AdError),
}

pub type Result<T> = std::result::Result<T, MetaError>;

/// Affine update law, `w` indexed `[window entry][head parameter]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateLaw {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl UpdateLaw {
    pub fn zeros(window: usize) -> Self {
        Self {
            w: vec![vec![0.0; HEAD_PARAMS]; 4 * window],
            b: vec![0.0; HEAD_PARAMS],
        }
    }

    /// Window length `M`.
    pub fn window(&self) -> usize {
        self.w.len() / 4
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.w.iter().flatten().copied().collect();
        p.extend(&self.b);
        p
    }

    pub fn from_flat(window: usize, p: &[f64]) -> Result<Self> {
        let n = 4 * window * HEAD_PARAMS;
        if p.len() != n + HEAD_PARAMS {
            return Err(MetaError::BadConfig(format!(
                "update law for window {window} needs {} values, got {}",
                n + HEAD_PARAMS,
                p.len()
            )));
        }
        Ok(Self {
            w: p[..n].chunks(HEAD_PARAMS).map(|r| r.to_vec()).collect(),
            b: p[n..].to_vec(),
        })
    }
}

/// The last `M` (state, input) pairs, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryWindow {
    len: usize,
    steps: VecDeque<[f64; 4]>,
}

impl TrajectoryWindow {
    /// `len` copies of `(x, u)`.
    pub fn filled(len: usize, x: State, u: Input) -> Self {
        Self {
            len,
            steps: std::iter::repeat_n([x[0], x[1], u[0], u[1]], len).collect(),
        }
    }

    pub fn from_records(data: &TransitionDataset, start: usize, len: usize) -> Self {
        Self {
            len,
            steps: data.records[start..start + len]
                .iter()
                .map(|r| [r.x[0], r.x[1], r.u[0], r.u[1]])
                .collect(),
        }
    }

    /// Appends the newest pair and drops the oldest.
    pub fn push(&mut self, x: State, u: Input) {
        self.steps.push_back([x[0], x[1], u[0], u[1]]);
        while self.steps.len() > self.len {
            self.steps.pop_front();
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.steps.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaKnowledge {
    pub body: Vec<DenseLayer>,
    /// Global head posterior `w`.
    pub head: HeadPosterior,
    /// Prior the base network was trained with (kept for reference).
    pub prior: Prior,
    pub psi: UpdateLaw,
    /// The trained base posterior `θ₀`, used as the prior during meta-training.
    pub prior_frozen: FrozenPosterior,
}

impl MetaKnowledge {
    /// Starts from a trained network: `w = θ₀`, `Ψ = 0`.
    pub fn from_bnn(bnn: &BnnModel, window: usize) -> Self {
        Self {
            body: bnn.body.clone(),
            head: bnn.head.clone(),
            prior: bnn.prior.clone(),
            psi: UpdateLaw::zeros(window),
            prior_frozen: FrozenPosterior::new(bnn.head.clone()),
        }
    }

    pub fn window(&self) -> usize {
        self.psi.window()
    }

    /// `θ = w + τ·Ψ_W + Ψ_b`.
    pub fn adapt(&self, window: &[f64]) -> Result<Vec<f64>> {
        if window.len() != 4 * self.window() {
            return Err(MetaError::BadWindow {
                expected: 4 * self.window(),
                got: window.len(),
            });
        }
        let mut theta = self.head.to_flat();
        for (j, t) in theta.iter_mut().enumerate() {
            let mut s = 0.0;
            for (r, tau) in window.iter().enumerate() {
                s += tau * self.psi.w[r][j];
            }
            *t += s + self.psi.b[j];
        }
        Ok(theta)
    }

    /// The network with the global posterior `w` and no adaptation.
    pub fn global_model(&self) -> BnnModel {
        BnnModel {
            body: self.body.clone(),
            head: self.head.clone(),
            prior: self.prior.clone(),
        }
    }

    /// The base network `θ₀` the meta-training started from.
    pub fn base_model(&self) -> BnnModel {
        BnnModel {
            body: self.body.clone(),
            head: self.prior_frozen.head().clone(),
            prior: self.prior.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    /// Window length `M`.
    pub window: usize,
    /// Prediction steps per task `K`.
    pub horizon: usize,
    pub epochs: usize,
    pub tasks_per_iter: usize,
    pub lr_psi: f64,
    pub lr_w: f64,
    pub kl_weight: f64,
    /// Weight draws for the KL estimate.
    pub n_samples: usize,
    /// Re-adapt at every step of the task from the window preceding it.
    pub readapt: bool,
    /// Feed predicted states forward instead of recorded ones.
    pub rollout: bool,
    /// Use a sampled head in the squared-error term instead of the means.
    pub sample_mse: bool,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            window: 5,
            horizon: 5,
            epochs: 100,
            tasks_per_iter: 10,
            lr_psi: 1e-5,
            lr_w: 1e-5,
            kl_weight: 1e-6,
            n_samples: 1,
            readapt: false,
            rollout: false,
            sample_mse: false,
            seed: 0,
        }
    }
}

impl MetaConfig {
    fn check(&self) -> Result<()> {
        if self.window == 0 || self.horizon == 0 || self.n_samples == 0 {
            return Err(MetaError::BadConfig(
                "window, horizon and n_samples must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Adapted posteriors used per task.
    fn uses(&self) -> usize {
        if self.readapt {
            self.horizon
        } else {
            1
        }
    }

    /// Noise vectors a task consumes.
    pub fn noise_per_task(&self) -> usize {
        self.uses() * self.n_samples
    }
}

/// Anchors `i` whose records `i−M ..= i+K−1` exist, carry targets and are contiguous.
pub fn valid_anchors(data: &TransitionDataset, window: usize, horizon: usize) -> Vec<usize> {
    if data.len() < window + horizon {
        return Vec::new();
    }
    (window..=data.len() - horizon)
        .filter(|&i| {
            data.is_contiguous(i - window, i + horizon - 1)
                && data.records[i - window..i + horizon].iter().all(|r| r.g.is_some())
        })
        .collect()
}

fn check_anchor(data: &TransitionDataset, i: usize, window: usize, horizon: usize) -> Result<()> {
    let bad = MetaError::BadAnchor {
        anchor: i,
        start: i.saturating_sub(window),
        end: i + horizon - 1,
    };
    if i < window || i + horizon > data.len() || !data.is_contiguous(i - window, i + horizon - 1) {
        return Err(bad);
    }
    for j in i..i + horizon {
        if data.records[j].g.is_none() {
            return Err(MetaError::MissingTargets(j));
        }
    }
    Ok(())
}

/// Task loss with its gradients w.r.t. `w` (144) and `Ψ` (flat).
#[derive(Debug, Clone)]
pub struct TaskGrad {
    pub loss: f64,
    pub grad_w: Vec<f64>,
    pub grad_psi: Vec<f64>,
}

fn row(v: [f64; 2]) -> Tensor {
    Tensor::matrix(1, 2, v.to_vec()).expect("1x2")
}

fn adapt_var<'t>(
    w: Var<'t>,
    psi_w: Var<'t>,
    psi_b: Var<'t>,
    data: &TransitionDataset,
    start: usize,
    m: usize,
) -> crate::autodiff::Result<Var<'t>> {
    let tau = TrajectoryWindow::from_records(data, start, m).flat();
    let tau = w.tape().constant(Tensor::matrix(1, 4 * m, tau)?);
    w.add(tau.matmul(psi_w)?.reshape(vec![HEAD_PARAMS])?)?
        .add(psi_b)
}

/// Loss over the `K` transitions after anchor `i`, with fixed noise
/// (`cfg.noise_per_task()` vectors).
pub fn task_loss_with_noise(
    mk: &MetaKnowledge,
    nominal: Option<&dyn DiffDynamics>,
    data: &TransitionDataset,
    i: usize,
    cfg: &MetaConfig,
    eps: &[Vec<f64>],
) -> Result<TaskGrad> {
    cfg.check()?;
    let (m, k) = (cfg.window, cfg.horizon);
    if m != mk.window() {
        return Err(MetaError::BadWindow {
            expected: 4 * mk.window(),
            got: 4 * m,
        });
    }
    check_anchor(data, i, m, k)?;
    if cfg.rollout && nominal.is_none() {
        return Err(MetaError::NeedsNominal);
    }
    if eps.len() != cfg.noise_per_task() {
        return Err(MetaError::BadConfig(format!(
            "expected {} noise vectors, got {}",
            cfg.noise_per_task(),
            eps.len()
        )));
    }

    let tape = Tape::new();
    let w = tape.param(Tensor::vector(mk.head.to_flat()));
    let psi = tape.param(Tensor::vector(mk.psi.to_flat()));
    let n_w = 4 * m * HEAD_PARAMS;
    let psi_w = psi.slice(0, n_w)?.reshape(vec![4 * m, HEAD_PARAMS])?;
    let psi_b = psi.slice(n_w, HEAD_PARAMS)?;
    let adapt_at = |start: usize| -> crate::autodiff::Result<Var<'_>> {
        adapt_var(w, psi_w, psi_b, data, start, m)
    };
    let prior = Prior::Frozen(mk.prior_frozen.clone());
    let body = tape.constant(Tensor::vector(body_flat(&mk.body)));
    let shapes = body_shapes(&mk.body);
    let one = tape.constant(Tensor::full(vec![1, 1], 1.0));

    let mut thetas = Vec::new();
    let mut kl_sum: Option<Var> = None;
    let mut sq_sum: Option<Var> = None;
    let mut x_hat: Option<Var> = None;
    for step in 0..k {
        let rec = &data.records[i + step];
        let use_idx = if cfg.readapt { step } else { 0 };
        if thetas.len() == use_idx {
            let theta = adapt_at(i + step - m)?;
            for s in 0..cfg.n_samples {
                let sh = sample_head_var(theta, &eps[use_idx * cfg.n_samples + s])?;
                let kl = sh.log_q.sub(log_prior_var(&prior, sh.w)?)?;
                kl_sum = Some(match kl_sum {
                    None => kl,
                    Some(a) => a.add(kl)?,
                });
            }
            thetas.push(theta);
        }
        let theta = thetas[use_idx];
        let head = if cfg.sample_mse {
            sample_head_var(theta, &eps[use_idx * cfg.n_samples])?.w
        } else {
            head_mean_var(theta)?
        };
        let u = tape.constant(row(rec.u));
        let x = x_hat.unwrap_or_else(|| tape.constant(row(rec.x)));
        let feats = if x.is_tracked() || cfg.rollout && step > 0 {
            body_var(body, &shapes, x, one)?
        } else {
            tape.constant(Tensor::matrix(1, 8, body_features(&mk.body, rec.x))?)
        };
        let x1 = x.slice(0, 1)?;
        let phi = concat(&[x1, x1.mul(x.slice(1, 1)?)?, u.slice(0, 1)?, u.slice(1, 1)?])?;
        let phi2 = concat(&[phi, phi])?.reshape(vec![1, 8])?;
        let g_hat = head_g_var(feats, head, phi2, one)?;
        let err = if cfg.rollout {
            let f = nominal.expect("checked above");
            let next = f
                .eval_var(x.reshape(vec![2, 1])?, u.reshape(vec![2, 1])?)?
                .add(g_hat.reshape(vec![2, 1])?)?
                .reshape(vec![1, 2])?;
            x_hat = Some(next);
            next.sub(tape.constant(row(rec.x_next)))?
        } else {
            g_hat.sub(tape.constant(row(rec.g.expect("checked above"))))?
        };
        let sq = err.square()?.sum()?;
        sq_sum = Some(match sq_sum {
            None => sq,
            Some(a) => a.add(sq)?,
        });
    }
    let mse = sq_sum.expect("horizon ≥ 1").scale(1.0 / k as f64)?;
    let kl = kl_sum
        .expect("at least one use")
        .scale(1.0 / cfg.noise_per_task() as f64)?;
    let loss = mse.add(kl.scale(cfg.kl_weight)?)?;
    let value = loss.item();
    let grads = loss.backward()?;
    Ok(TaskGrad {
        loss: value,
        grad_w: grads.wrt_or_zero(w).into_data(),
        grad_psi: grads.wrt_or_zero(psi).into_data(),
    })
}

/// Task loss value with noise drawn from `seed`.
pub fn task_loss(
    mk: &MetaKnowledge,
    nominal: Option<&dyn DiffDynamics>,
    data: &TransitionDataset,
    i: usize,
    cfg: &MetaConfig,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps: Vec<Vec<f64>> = (0..cfg.noise_per_task()).map(|_| draw_noise(&mut rng)).collect();
    Ok(task_loss_with_noise(mk, nominal, data, i, cfg, &eps)?.loss)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetaReport {
    /// Mean task loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub iterations_per_epoch: usize,
}

/// First-order MAML over time-shifted windows of `data`.
pub fn meta_train(
    mk0: &MetaKnowledge,
    nominal: Option<&dyn DiffDynamics>,
    data: &TransitionDataset,
    cfg: &MetaConfig,
) -> Result<(MetaKnowledge, MetaReport)> {
    cfg.check()?;
    let anchors = valid_anchors(data, cfg.window, cfg.horizon);
    if anchors.is_empty() {
        return Err(MetaError::TooShort(cfg.window + cfg.horizon));
    }
    let mut mk = mk0.clone();
    let mut report = MetaReport::default();
    if cfg.tasks_per_iter == 0 {
        return Ok((mk, report));
    }
    let iters = anchors.len().div_ceil(cfg.tasks_per_iter);
    report.iterations_per_epoch = iters;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = mk.head.to_flat();
    let mut psi = mk.psi.to_flat();
    let mut opt_w = Adam::new(w.len(), cfg.lr_w);
    let mut opt_psi = Adam::new(psi.len(), cfg.lr_psi);
    for _ in 0..cfg.epochs {
        let mut sum = 0.0;
        for _ in 0..iters {
            let mut acc = vec![0.0; w.len()];
            for _ in 0..cfg.tasks_per_iter {
                let i = anchors[rng.random_range(0..anchors.len())];
                let eps: Vec<Vec<f64>> =
                    (0..cfg.noise_per_task()).map(|_| draw_noise(&mut rng)).collect();
                let tg = task_loss_with_noise(&mk, nominal, data, i, cfg, &eps)?;
                opt_psi.step(&mut psi, &tg.grad_psi);
                mk.psi = UpdateLaw::from_flat(cfg.window, &psi)?;
                for (a, g) in acc.iter_mut().zip(&tg.grad_w) {
                    *a += g;
                }
                sum += tg.loss;
            }
            for a in acc.iter_mut() {
                *a /= cfg.tasks_per_iter as f64;
            }
            opt_w.step(&mut w, &acc);
            mk.head = HeadPosterior::from_flat(&w)?;
        }
        report
            .epoch_loss
            .push(sum / (iters * cfg.tasks_per_iter) as f64);
    }
    Ok((mk, report))
}

/// Squared one-step error `‖ĝ − g‖²` of the mean network at each anchor, with the head
/// adapted from the preceding window (`adapted = true`) or at the base posterior `θ₀`.
pub fn one_step_errors(
    mk: &MetaKnowledge,
    data: &TransitionDataset,
    anchors: &[usize],
    adapted: bool,
) -> Result<Vec<f64>> {
    let m = mk.window();
    let base = mk.prior_frozen.head().to_flat();
    anchors
        .iter()
        .map(|&i| {
            check_anchor(data, i, m, 1)?;
            let theta = if adapted {
                mk.adapt(&TrajectoryWindow::from_records(data, i - m, m).flat())?
            } else {
                base.clone()
            };
            let r = &data.records[i];
            let p = bnn::predict_from_features(
                &body_features(&mk.body, r.x),
                &bnn::head_means(&theta),
                r.x,
                r.u,
            );
            let g = r.g.ok_or(MetaError::MissingTargets(i))?;
            Ok((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2))
        })
        .collect()
}
