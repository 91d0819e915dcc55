//! Bayesian residual model `g(x, u) = h(x)·[x₁; x₁x₂; u₁; u₂]`.
//!
//! A deterministic ELU body maps the state to 8 features. A single variational
//! dense layer (no activation) maps those to 8 outputs, read row-major as the
//! 2×4 matrix `h(x)`. Only the head is Bayesian; its posterior is a diagonal
//! Gaussian with `σ = softplus(ρ)`, trained by Bayes-by-Backprop.
//!
//! Head parameters travel as one flat 144-vector in the order
//! `μ_W (8×8 row-major), ρ_W, μ_b (8), ρ_b`. A sampled head is a 72-vector `[W, b]`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{concat, scalar, AdError, Tape, Tensor, Var};
use crate::plant::{Transition, TransitionDataset};
use crate::{Input, State};

pub const FEATURES: usize = 8;
pub const HEAD_OUT: usize = 8;
/// Entries of one sampled head `[W, b]`.
pub const HEAD_WEIGHTS: usize = FEATURES * HEAD_OUT + HEAD_OUT;
/// Entries of the head posterior (means and ρ's).
pub const HEAD_PARAMS: usize = 2 * HEAD_WEIGHTS;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;
const NW: usize = FEATURES * HEAD_OUT;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BnnError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("record {0} has no mismatch target g")]
    MissingTargets(usize),
    #[error("expected {expected} parameters, got {got}")]
    BadParams { expected: usize, got: usize },
    #[error("training diverged (last finite epoch: {last_finite_epoch:?})")]
    Diverged { last_finite_epoch: Option<usize> },
    #[error("invalid setting: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Autodiff(#[from] AdError),
}

pub type Result<T> = std::result::Result<T, BnnError>;

/// Deterministic dense layer, `w` indexed `[input][output]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl DenseLayer {
    pub fn inputs(&self) -> usize {
        self.w.len()
    }
    pub fn outputs(&self) -> usize {
        self.b.len()
    }
}

/// Diagonal Gaussian posterior over the head weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadPosterior {
    pub mu_w: Vec<Vec<f64>>,
    pub rho_w: Vec<Vec<f64>>,
    pub mu_b: Vec<f64>,
    pub rho_b: Vec<f64>,
}

impl HeadPosterior {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(HEAD_PARAMS);
        out.extend(self.mu_w.iter().flatten());
        out.extend(self.rho_w.iter().flatten());
        out.extend(&self.mu_b);
        out.extend(&self.rho_b);
        out
    }

    pub fn from_flat(p: &[f64]) -> Result<Self> {
        if p.len() != HEAD_PARAMS {
            return Err(BnnError::BadParams {
                expected: HEAD_PARAMS,
                got: p.len(),
            });
        }
        let rows = |s: &[f64]| s.chunks(HEAD_OUT).map(|r| r.to_vec()).collect();
        Ok(Self {
            mu_w: rows(&p[..NW]),
            rho_w: rows(&p[NW..2 * NW]),
            mu_b: p[2 * NW..2 * NW + HEAD_OUT].to_vec(),
            rho_b: p[2 * NW + HEAD_OUT..].to_vec(),
        })
    }

    fn check(&self) -> Result<()> {
        let ok = self.mu_w.len() == FEATURES
            && self.rho_w.len() == FEATURES
            && self
                .mu_w
                .iter()
                .chain(&self.rho_w)
                .all(|r| r.len() == HEAD_OUT)
            && self.mu_b.len() == HEAD_OUT
            && self.rho_b.len() == HEAD_OUT;
        if ok {
            Ok(())
        } else {
            Err(BnnError::BadConfig("head posterior must be 8x8 plus 8".into()))
        }
    }
}

/// Means `[W, b]` of a flat head posterior.
pub fn head_means(theta: &[f64]) -> Vec<f64> {
    let mut m = theta[..NW].to_vec();
    m.extend_from_slice(&theta[2 * NW..2 * NW + HEAD_OUT]);
    m
}

/// Standard deviations `[σ_W, σ_b]` of a flat head posterior.
pub fn head_sigmas(theta: &[f64]) -> Vec<f64> {
    theta[NW..2 * NW]
        .iter()
        .chain(&theta[2 * NW + HEAD_OUT..])
        .map(|&r| scalar::softplus(r))
        .collect()
}

/// Reparameterized draw `μ + softplus(ρ)·ε`.
pub fn sample_head(theta: &[f64], eps: &[f64]) -> Vec<f64> {
    let mu = head_means(theta);
    let sigma = head_sigmas(theta);
    (0..HEAD_WEIGHTS).map(|i| mu[i] + sigma[i] * eps[i]).collect()
}

pub fn draw_noise(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..HEAD_WEIGHTS).map(|_| StandardNormal.sample(rng)).collect()
}

/// Independent generator for draw `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Two-component zero-mean scale-mixture prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixturePrior {
    pub pi: f64,
    pub sigma1: f64,
    pub sigma2: f64,
}

impl Default for MixturePrior {
    fn default() -> Self {
        Self {
            pi: 0.5,
            sigma1: 1.5,
            sigma2: 0.1,
        }
    }
}

impl MixturePrior {
    pub fn log_density(&self, w: &[f64]) -> f64 {
        let comp = |s: f64, wi: f64| -0.5 * LN_2PI - s.ln() - wi * wi / (2.0 * s * s);
        w.iter()
            .map(|&wi| {
                let a = self.pi.ln() + comp(self.sigma1, wi);
                let b = (1.0 - self.pi).ln() + comp(self.sigma2, wi);
                let m = a.max(b);
                m + ((a - m).exp() + (b - m).exp()).ln()
            })
            .sum()
    }
}

/// A trained posterior reused as a prior density. Read-only once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenPosterior {
    head: HeadPosterior,
}

impl FrozenPosterior {
    pub fn new(head: HeadPosterior) -> Self {
        Self { head }
    }
    pub fn head(&self) -> &HeadPosterior {
        &self.head
    }
    pub fn log_density(&self, w: &[f64]) -> f64 {
        let theta = self.head.to_flat();
        diag_gaussian_log_density(w, &head_means(&theta), &head_sigmas(&theta))
    }
}

pub fn diag_gaussian_log_density(w: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    w.iter()
        .zip(mu)
        .zip(sigma)
        .map(|((w, m), s)| {
            let z = (w - m) / s;
            -0.5 * LN_2PI - s.ln() - 0.5 * z * z
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prior {
    Mixture(MixturePrior),
    Frozen(FrozenPosterior),
}

impl Prior {
    pub fn log_density(&self, w: &[f64]) -> f64 {
        match self {
            Prior::Mixture(p) => p.log_density(w),
            Prior::Frozen(p) => p.log_density(w),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnnModel {
    pub body: Vec<DenseLayer>,
    pub head: HeadPosterior,
    pub prior: Prior,
}

/// Monte-Carlo prediction summary with population (1/N) standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McStats {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

pub fn sample_stats(draws: &[[f64; 2]]) -> McStats {
    let n = draws.len() as f64;
    let mut mean = [0.0; 2];
    let mut std = [0.0; 2];
    for j in 0..2 {
        // Shifted by the first draw so identical draws give exactly zero spread.
        let pivot = draws.first().map_or(0.0, |d| d[j]);
        let shift = draws.iter().map(|d| d[j] - pivot).sum::<f64>() / n;
        mean[j] = pivot + shift;
        let var = draws.iter().map(|d| (d[j] - pivot - shift).powi(2)).sum::<f64>() / n;
        std[j] = var.sqrt();
    }
    McStats { mean, std }
}

/// `[x₁, x₁x₂, u₁, u₂]`, the vector `h(x)` multiplies.
pub fn regressor(x: State, u: Input) -> [f64; 4] {
    [x[0], x[0] * x[1], u[0], u[1]]
}

pub fn body_features(body: &[DenseLayer], x: State) -> Vec<f64> {
    let mut h = x.to_vec();
    for layer in body {
        h = (0..layer.outputs())
            .map(|j| {
                let mut s = 0.0;
                for (i, hi) in h.iter().enumerate() {
                    s += hi * layer.w[i][j];
                }
                scalar::elu(s + layer.b[j])
            })
            .collect();
    }
    h
}

/// Head output for features and one sampled (or mean) head `[W, b]`.
pub fn head_output(feats: &[f64], w: &[f64]) -> [f64; HEAD_OUT] {
    let mut out = [0.0; HEAD_OUT];
    for (j, o) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for (i, f) in feats.iter().enumerate() {
            s += f * w[i * HEAD_OUT + j];
        }
        *o = s + w[NW + j];
    }
    out
}

pub fn apply_h(out: &[f64; HEAD_OUT], phi: [f64; 4]) -> [f64; 2] {
    let mut g = [0.0; 2];
    for (r, gr) in g.iter_mut().enumerate() {
        for c in 0..4 {
            *gr += out[4 * r + c] * phi[c];
        }
    }
    g
}

/// Prediction for precomputed body features.
pub fn predict_from_features(feats: &[f64], w: &[f64], x: State, u: Input) -> [f64; 2] {
    apply_h(&head_output(feats, w), regressor(x, u))
}

/// Monte-Carlo statistics for an explicit head posterior. Draw `d` uses stream `d`
/// of `seed`, so the result does not depend on how draws are scheduled.
pub fn mc_stats_with_head(
    body: &[DenseLayer],
    theta: &[f64],
    x: State,
    u: Input,
    n_mc: usize,
    seed: u64,
) -> Result<McStats> {
    if n_mc < 2 {
        return Err(BnnError::BadConfig("n_mc must be at least 2".into()));
    }
    let feats = body_features(body, x);
    let draws: Vec<[f64; 2]> = (0..n_mc as u64)
        .into_par_iter()
        .map(|d| {
            let eps = draw_noise(&mut stream_rng(seed, d));
            predict_from_features(&feats, &sample_head(theta, &eps), x, u)
        })
        .collect();
    Ok(sample_stats(&draws))
}

pub(crate) fn body_shapes(body: &[DenseLayer]) -> Vec<(usize, usize)> {
    body.iter().map(|l| (l.inputs(), l.outputs())).collect()
}

/// Body layers flattened as `w` row-major then `b`, layer by layer.
pub(crate) fn body_flat(body: &[DenseLayer]) -> Vec<f64> {
    let mut p = Vec::new();
    for l in body {
        p.extend(l.w.iter().flatten());
        p.extend(&l.b);
    }
    p
}

/// Glorot-uniform layer with zero bias.
fn glorot(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize) -> DenseLayer {
    use rand::Rng;
    let lim = (6.0 / (inputs + outputs) as f64).sqrt();
    DenseLayer {
        w: (0..inputs)
            .map(|_| (0..outputs).map(|_| rng.random_range(-lim..lim)).collect())
            .collect(),
        b: vec![0.0; outputs],
    }
}

impl BnnModel {
    /// Fresh model with `2→8→8` body, head means Glorot-initialized and `ρ = rho_init`.
    pub fn new(seed: u64, rho_init: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let body = vec![glorot(&mut rng, 2, FEATURES), glorot(&mut rng, FEATURES, FEATURES)];
        let head = glorot(&mut rng, FEATURES, HEAD_OUT);
        Self {
            body,
            head: HeadPosterior {
                mu_w: head.w,
                rho_w: vec![vec![rho_init; HEAD_OUT]; FEATURES],
                mu_b: head.b,
                rho_b: vec![rho_init; HEAD_OUT],
            },
            prior: Prior::Mixture(MixturePrior::default()),
        }
    }

    /// Keeps the means of `ann` and resets every `ρ` to `rho_init`.
    pub fn transfer_from(ann: &BnnModel, rho_init: f64) -> Self {
        let mut m = ann.clone();
        for r in m.head.rho_w.iter_mut() {
            r.fill(rho_init);
        }
        m.head.rho_b.fill(rho_init);
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.head.check()?;
        let mut width = 2;
        for l in &self.body {
            if l.inputs() != width || l.w.iter().any(|r| r.len() != l.outputs()) {
                return Err(BnnError::BadConfig("body layer shapes do not chain".into()));
            }
            width = l.outputs();
        }
        if width != FEATURES {
            return Err(BnnError::BadConfig("body must end with 8 features".into()));
        }
        Ok(())
    }

    pub fn theta(&self) -> Vec<f64> {
        self.head.to_flat()
    }

    fn body_shapes(&self) -> Vec<(usize, usize)> {
        body_shapes(&self.body)
    }

    fn body_len(&self) -> usize {
        self.body.iter().map(|l| (l.inputs() + 1) * l.outputs()).sum()
    }

    /// Trainable parameters: every body layer (`w` row-major, then `b`), then the head posterior.
    pub fn params(&self) -> Vec<f64> {
        let mut p = body_flat(&self.body);
        p.extend(self.head.to_flat());
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        let expected = self.body_len() + HEAD_PARAMS;
        if p.len() != expected {
            return Err(BnnError::BadParams {
                expected,
                got: p.len(),
            });
        }
        let mut off = 0;
        for l in &mut self.body {
            let (i, o) = (l.inputs(), l.outputs());
            for r in 0..i {
                l.w[r].copy_from_slice(&p[off + r * o..off + (r + 1) * o]);
            }
            off += i * o;
            l.b.copy_from_slice(&p[off..off + o]);
            off += o;
        }
        self.head = HeadPosterior::from_flat(&p[off..])?;
        Ok(())
    }

    /// Prediction with an explicit sampled head `[W, b]`.
    pub fn forward(&self, x: State, u: Input, w: &[f64]) -> [f64; 2] {
        predict_from_features(&body_features(&self.body, x), w, x, u)
    }

    /// Deterministic network with head weights at their means.
    pub fn forward_mean(&self, x: State, u: Input) -> [f64; 2] {
        self.forward(x, u, &head_means(&self.theta()))
    }

    pub fn mc_stats(&self, x: State, u: Input, n_mc: usize, seed: u64) -> Result<McStats> {
        mc_stats_with_head(&self.body, &self.theta(), x, u, n_mc, seed)
    }
}

/// Gaussian negative log-likelihood summed over entries.
pub fn gaussian_nll(pred: &[f64], target: &[f64], sigma_obs: f64) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, t)| 0.5 * LN_2PI + sigma_obs.ln() + (p - t).powi(2) / (2.0 * sigma_obs * sigma_obs))
        .sum()
}

/// Constant tensors for one minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub len: usize,
    pub x: Tensor,
    /// `[φ, φ]` per row, so that `(out ⊙ phi2)·S` applies `h` row by row.
    pub phi2: Tensor,
    pub ones: Tensor,
    pub targets: Tensor,
}

impl Batch {
    pub fn from_records<'a, I>(records: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Transition>,
    {
        let (mut x, mut phi2, mut targets) = (Vec::new(), Vec::new(), Vec::new());
        let mut len = 0;
        for (i, r) in records.into_iter().enumerate() {
            let g = r.g.ok_or(BnnError::MissingTargets(i))?;
            x.extend(r.x);
            let phi = regressor(r.x, r.u);
            phi2.extend(phi);
            phi2.extend(phi);
            targets.extend(g);
            len += 1;
        }
        if len == 0 {
            return Err(BnnError::EmptyBatch);
        }
        Ok(Self {
            len,
            x: Tensor::matrix(len, 2, x)?,
            phi2: Tensor::matrix(len, 2 * 4, phi2)?,
            ones: Tensor::full(vec![len, 1], 1.0),
            targets: Tensor::matrix(len, 2, targets)?,
        })
    }
}

fn summing_matrix() -> Tensor {
    let mut s = vec![0.0; HEAD_OUT * 2];
    for j in 0..HEAD_OUT {
        s[j * 2 + j / 4] = 1.0;
    }
    Tensor::matrix(HEAD_OUT, 2, s).expect("8x2")
}

pub(crate) fn body_var<'t>(
    p: Var<'t>,
    shapes: &[(usize, usize)],
    x: Var<'t>,
    ones: Var<'t>,
) -> crate::autodiff::Result<Var<'t>> {
    let mut h = x;
    let mut off = 0;
    for &(i, o) in shapes {
        let w = p.slice(off, i * o)?.reshape(vec![i, o])?;
        off += i * o;
        let b = p.slice(off, o)?.reshape(vec![1, o])?;
        off += o;
        h = h.matmul(w)?.add(ones.matmul(b)?)?.elu()?;
    }
    Ok(h)
}

/// `g` for every row given features `[B, 8]`, a head `[W, b]` (72 entries),
/// the doubled regressor `[B, 8]` and a ones column `[B, 1]`.
pub(crate) fn head_g_var<'t>(
    feats: Var<'t>,
    w: Var<'t>,
    phi2: Var<'t>,
    ones: Var<'t>,
) -> crate::autodiff::Result<Var<'t>> {
    let wm = w.slice(0, NW)?.reshape(vec![FEATURES, HEAD_OUT])?;
    let b = w.slice(NW, HEAD_OUT)?.reshape(vec![1, HEAD_OUT])?;
    let out = feats.matmul(wm)?.add(ones.matmul(b)?)?;
    out.mul(phi2)?.matmul(feats.tape().constant(summing_matrix()))
}

impl Batch {
    fn g_var<'t>(&self, feats: Var<'t>, w: Var<'t>) -> crate::autodiff::Result<Var<'t>> {
        let tape = feats.tape();
        head_g_var(
            feats,
            w,
            tape.constant(self.phi2.clone()),
            tape.constant(self.ones.clone()),
        )
    }
}

pub(crate) fn head_mean_var<'t>(theta: Var<'t>) -> crate::autodiff::Result<Var<'t>> {
    concat(&[theta.slice(0, NW)?, theta.slice(2 * NW, HEAD_OUT)?])
}

/// Sampled head on the tape together with `log q` evaluated at the sample.
pub(crate) struct SampledHead<'t> {
    pub w: Var<'t>,
    pub log_q: Var<'t>,
}

pub(crate) fn sample_head_var<'t>(
    theta: Var<'t>,
    eps: &[f64],
) -> crate::autodiff::Result<SampledHead<'t>> {
    let tape = theta.tape();
    let mu = head_mean_var(theta)?;
    let rho = concat(&[theta.slice(NW, NW)?, theta.slice(2 * NW + HEAD_OUT, HEAD_OUT)?])?;
    let sigma = rho.softplus()?;
    let e = tape.constant(Tensor::vector(eps.to_vec()));
    let w = mu.add(sigma.mul(e)?)?;
    let z = w.sub(mu)?.div(sigma)?;
    let log_q = z
        .square()?
        .sum()?
        .scale(-0.5)?
        .sub(sigma.ln()?.sum()?)?
        .offset(-0.5 * LN_2PI * HEAD_WEIGHTS as f64)?;
    Ok(SampledHead { w, log_q })
}

pub(crate) fn log_prior_var<'t>(prior: &Prior, w: Var<'t>) -> crate::autodiff::Result<Var<'t>> {
    let tape = w.tape();
    match prior {
        Prior::Mixture(p) => {
            let comp = |s: f64, weight: f64| {
                w.square()?
                    .scale(-1.0 / (2.0 * s * s))?
                    .offset(weight.ln() - s.ln() - 0.5 * LN_2PI)
            };
            if p.pi >= 1.0 {
                comp(p.sigma1, 1.0)?.sum()
            } else if p.pi <= 0.0 {
                comp(p.sigma2, 1.0)?.sum()
            } else {
                comp(p.sigma1, p.pi)?
                    .logaddexp(comp(p.sigma2, 1.0 - p.pi)?)?
                    .sum()
            }
        }
        Prior::Frozen(f) => {
            let theta = f.head.to_flat();
            let mu = head_means(&theta);
            let sigma = head_sigmas(&theta);
            let c: f64 = sigma.iter().map(|s| -s.ln() - 0.5 * LN_2PI).sum();
            w.sub(tape.constant(Tensor::vector(mu)))?
                .div(tape.constant(Tensor::vector(sigma)))?
                .square()?
                .sum()?
                .scale(-0.5)?
                .offset(c)
        }
    }
}

pub(crate) fn nll_var<'t>(
    pred: Var<'t>,
    targets: &Tensor,
    sigma_obs: f64,
) -> crate::autodiff::Result<Var<'t>> {
    let n = targets.numel() as f64;
    pred.sub(pred.tape().constant(targets.clone()))?
        .square()?
        .sum()?
        .scale(1.0 / (2.0 * sigma_obs * sigma_obs))?
        .offset(n * (0.5 * LN_2PI + sigma_obs.ln()))
}

/// Which loss to build over the full parameter vector.
enum Objective<'a> {
    /// Bayes-by-Backprop with one noise vector per draw.
    Elbo {
        eps: &'a [Vec<f64>],
        kl_weight: f64,
        sigma_obs: f64,
    },
    /// Deterministic pretraining at the head means.
    Mse,
}

fn value_and_grad(
    model: &BnnModel,
    params: &[f64],
    batch: &Batch,
    objective: Objective<'_>,
) -> Result<(f64, Vec<f64>)> {
    let body_len = model.body_len();
    if params.len() != body_len + HEAD_PARAMS {
        return Err(BnnError::BadParams {
            expected: body_len + HEAD_PARAMS,
            got: params.len(),
        });
    }
    let tape = Tape::new();
    let p = tape.param(Tensor::vector(params.to_vec()));
    let x = tape.constant(batch.x.clone());
    let ones = tape.constant(batch.ones.clone());
    let feats = body_var(p, &model.body_shapes(), x, ones)?;
    let theta = p.slice(body_len, HEAD_PARAMS)?;
    let loss = match objective {
        Objective::Elbo {
            eps,
            kl_weight,
            sigma_obs,
        } => {
            if eps.is_empty() {
                return Err(BnnError::BadConfig("need at least one weight draw".into()));
            }
            let mut total: Option<Var> = None;
            for e in eps {
                let s = sample_head_var(theta, e)?;
                let kl = s.log_q.sub(log_prior_var(&model.prior, s.w)?)?;
                let nll = nll_var(batch.g_var(feats, s.w)?, &batch.targets, sigma_obs)?;
                let term = kl.scale(kl_weight)?.add(nll)?;
                total = Some(match total {
                    None => term,
                    Some(t) => t.add(term)?,
                });
            }
            total.expect("nonempty").scale(1.0 / eps.len() as f64)?
        }
        Objective::Mse => {
            let g = batch.g_var(feats, head_mean_var(theta)?)?;
            g.sub(tape.constant(batch.targets.clone()))?.square()?.mean()?
        }
    };
    let value = loss.item();
    let grads = loss.backward()?;
    Ok((value, grads.wrt_or_zero(p).into_data()))
}

/// ELBO and its gradient w.r.t. [`BnnModel::params`] for fixed noise, one vector per draw.
pub fn elbo_with_noise(
    model: &BnnModel,
    params: &[f64],
    batch: &Batch,
    eps: &[Vec<f64>],
    kl_weight: f64,
    sigma_obs: f64,
) -> Result<(f64, Vec<f64>)> {
    value_and_grad(
        model,
        params,
        batch,
        Objective::Elbo {
            eps,
            kl_weight,
            sigma_obs,
        },
    )
}

/// Monte-Carlo ELBO estimate with `n_samples` fresh weight draws.
pub fn elbo_loss(
    model: &BnnModel,
    batch: &[Transition],
    n_samples: usize,
    kl_weight: f64,
    sigma_obs: f64,
    seed: u64,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(BnnError::BadConfig("n_samples must be at least 1".into()));
    }
    let batch = Batch::from_records(batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps: Vec<Vec<f64>> = (0..n_samples).map(|_| draw_noise(&mut rng)).collect();
    Ok(elbo_with_noise(model, &model.params(), &batch, &eps, kl_weight, sigma_obs)?.0)
}

/// Training settings shared by pretraining and Bayes-by-Backprop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BnnTrainConfig {
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub sigma_obs: f64,
    pub n_samples: usize,
    /// Defaults to one over the number of minibatches per epoch.
    pub kl_weight: Option<f64>,
    /// Initial `ρ` of every head weight after transfer from the pretrained network.
    pub rho_init: f64,
    pub seed: u64,
}

impl Default for BnnTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3000,
            pretrain_epochs: 1000,
            batch_size: 32,
            lr: 1e-3,
            sigma_obs: 0.05,
            n_samples: 1,
            kl_weight: None,
            rho_init: -5.0,
            seed: 0,
        }
    }
}

impl BnnTrainConfig {
    fn check(&self) -> Result<()> {
        if self.batch_size == 0 || self.n_samples == 0 {
            return Err(BnnError::BadConfig("batch_size and n_samples must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.sigma_obs > 0.0) {
            return Err(BnnError::BadConfig("lr and sigma_obs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Held-out NLL at the head means, per epoch (empty without a held-out set).
    pub heldout_nll: Vec<f64>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
}

/// Held-out Gaussian NLL of the mean network.
pub fn mean_nll(model: &BnnModel, data: &TransitionDataset, sigma_obs: f64) -> Result<f64> {
    let mut total = 0.0;
    for (i, r) in data.records.iter().enumerate() {
        let g = r.g.ok_or(BnnError::MissingTargets(i))?;
        total += gaussian_nll(&model.forward_mean(r.x, r.u), &g, sigma_obs);
    }
    Ok(total)
}

fn run_epochs(
    model: &BnnModel,
    train: &TransitionDataset,
    heldout: Option<&TransitionDataset>,
    cfg: &BnnTrainConfig,
    epochs: usize,
    bayesian: bool,
) -> Result<(BnnModel, TrainReport)> {
    cfg.check()?;
    model.validate()?;
    if train.is_empty() {
        return Err(BnnError::EmptyBatch);
    }
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let kl_weight = cfg.kl_weight.unwrap_or(1.0 / batches_per_epoch as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = model.params();
    let mut opt = crate::optim::Adam::new(params.len(), cfg.lr);
    let mut current = model.clone();
    let mut best = (f64::INFINITY, model.clone());
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::from_records(chunk.iter().map(|&i| &train.records[i]))?;
            let objective = if bayesian {
                Objective::Elbo {
                    eps: &(0..cfg.n_samples).map(|_| draw_noise(&mut rng)).collect::<Vec<_>>(),
                    kl_weight,
                    sigma_obs: cfg.sigma_obs,
                }
            } else {
                Objective::Mse
            };
            let diverged = || BnnError::Diverged {
                last_finite_epoch: epoch.checked_sub(1),
            };
            let (loss, grad) = match value_and_grad(&current, &params, &batch, objective) {
                Ok(v) => v,
                Err(BnnError::Autodiff(AdError::NonFinite { .. })) => return Err(diverged()),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(diverged());
            }
            sum += loss;
            opt.step(&mut params, &grad);
        }
        current.set_params(&params)?;
        report.epoch_loss.push(sum / batches_per_epoch as f64);
        if let Some(h) = heldout {
            let nll = mean_nll(&current, h, cfg.sigma_obs)?;
            report.heldout_nll.push(nll);
            if nll < best.0 {
                best = (nll, current.clone());
                report.best_epoch = Some(epoch);
            }
        }
    }
    if heldout.is_some() && report.best_epoch.is_some() {
        Ok((best.1, report))
    } else {
        report.best_epoch = epochs.checked_sub(1);
        Ok((current, report))
    }
}

/// Deterministic pretraining (MSE at the head means) for `cfg.pretrain_epochs`.
pub fn pretrain_ann(
    model: &BnnModel,
    train: &TransitionDataset,
    cfg: &BnnTrainConfig,
) -> Result<(BnnModel, TrainReport)> {
    run_epochs(model, train, None, cfg, cfg.pretrain_epochs, false)
}

/// Bayes-by-Backprop with Adam, keeping the epoch with the lowest held-out NLL.
pub fn train_bnn(
    model: &BnnModel,
    train: &TransitionDataset,
    heldout: Option<&TransitionDataset>,
    cfg: &BnnTrainConfig,
) -> Result<(BnnModel, TrainReport)> {
    run_epochs(model, train, heldout, cfg, cfg.epochs, true)
}
