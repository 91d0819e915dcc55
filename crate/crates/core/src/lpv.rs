//! Nominal LPV model `x⁺ = A(ρ) x + B(ρ) u` with scheduling `ρ = [x₁; x₁x₂]`.
//!
//! Both matrices depend affinely on ρ: `A(ρ) = A₀ + ρ₁A₁ + ρ₂A₂`, and the same
//! for `B`. There is no constant offset, so the origin maps to `B₀u`.
//! Identification is closed-form ridge least squares over the 24 coefficients.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, Var};
use crate::dynamics::{mat_const, matvec, DiffDynamics, Dynamics};
use crate::plant::TransitionDataset;
use crate::{Input, State};

/// Number of identified coefficients.
pub const LPV_PARAMS: usize = 24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpvError {
    #[error("need at least {LPV_PARAMS} records to identify the model, got {0}")]
    TooFewRecords(usize),
    #[error("normal equations are singular; use a nonzero ridge weight")]
    Singular,
    #[error("best-fit rate needs equal-length sequences of at least 2 samples ({0} vs {1})")]
    BadSequences(usize, usize),
    #[error("best-fit rate undefined for state {0}: actual sequence is constant")]
    UndefinedScore(usize),
}

/// Three 2×2 row-major matrices per function: index 0 is the constant part,
/// 1 and 2 multiply ρ₁ and ρ₂.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpvModel {
    #[serde(rename = "A")]
    pub a: [[f64; 4]; 3],
    #[serde(rename = "B")]
    pub b: [[f64; 4]; 3],
}

pub fn scheduling(x: State) -> [f64; 2] {
    [x[0], x[0] * x[1]]
}

fn regressors(x: State, u: Input) -> [f64; 12] {
    let [r1, r2] = scheduling(x);
    let base = [x[0], x[1], u[0], u[1]];
    let mut phi = [0.0; 12];
    for (k, s) in [1.0, r1, r2].into_iter().enumerate() {
        for j in 0..4 {
            phi[4 * k + j] = s * base[j];
        }
    }
    phi
}

impl LpvModel {
    pub fn zeros() -> Self {
        Self {
            a: [[0.0; 4]; 3],
            b: [[0.0; 4]; 3],
        }
    }

    /// `A(ρ)` and `B(ρ)` at a given scheduling value.
    pub fn matrices(&self, rho: [f64; 2]) -> ([f64; 4], [f64; 4]) {
        let mut a = [0.0; 4];
        let mut b = [0.0; 4];
        for i in 0..4 {
            a[i] = self.a[0][i] + rho[0] * self.a[1][i] + rho[1] * self.a[2][i];
            b[i] = self.b[0][i] + rho[0] * self.b[1][i] + rho[1] * self.b[2][i];
        }
        (a, b)
    }

    fn coeff_row(&self, r: usize) -> [f64; 12] {
        let mut c = [0.0; 12];
        for k in 0..3 {
            c[4 * k] = self.a[k][2 * r];
            c[4 * k + 1] = self.a[k][2 * r + 1];
            c[4 * k + 2] = self.b[k][2 * r];
            c[4 * k + 3] = self.b[k][2 * r + 1];
        }
        c
    }

    fn from_coeff_rows(rows: [[f64; 12]; 2]) -> Self {
        let mut m = Self::zeros();
        for (r, c) in rows.iter().enumerate() {
            for k in 0..3 {
                m.a[k][2 * r] = c[4 * k];
                m.a[k][2 * r + 1] = c[4 * k + 1];
                m.b[k][2 * r] = c[4 * k + 2];
                m.b[k][2 * r + 1] = c[4 * k + 3];
            }
        }
        m
    }
}

/// Exact evaluation `A(ρ(x)) x + B(ρ(x)) u`.
pub fn eval_nominal(m: &LpvModel, x: State, u: Input) -> State {
    let [r1, r2] = scheduling(x);
    let term = |k: usize| {
        let ax = matvec(&m.a[k], x);
        let bu = matvec(&m.b[k], u);
        [ax[0] + bu[0], ax[1] + bu[1]]
    };
    let (t0, t1, t2) = (term(0), term(1), term(2));
    [
        t0[0] + r1 * t1[0] + r2 * t2[0],
        t0[1] + r1 * t1[1] + r2 * t2[1],
    ]
}

impl Dynamics for LpvModel {
    fn eval(&self, x: State, u: Input) -> State {
        eval_nominal(self, x, u)
    }
}

impl DiffDynamics for LpvModel {
    fn eval_var<'t>(&self, x: Var<'t>, u: Var<'t>) -> autodiff::Result<Var<'t>> {
        let tape = x.tape();
        let r1 = x.slice(0, 1)?;
        let r2 = r1.mul(x.slice(1, 1)?)?;
        let term = |k: usize| -> autodiff::Result<Var<'t>> {
            let ax = mat_const(tape, &self.a[k]).matmul(x)?;
            let bu = mat_const(tape, &self.b[k]).matmul(u)?;
            ax.add(bu)
        };
        term(0)?
            .add(r1.scalar_mul(term(1)?)?)?
            .add(r2.scalar_mul(term(2)?)?)
    }
}

/// Ridge least-squares identification on `x_next`.
pub fn fit_lpv(train: &TransitionDataset, ridge: f64) -> Result<LpvModel, LpvError> {
    if train.len() < LPV_PARAMS {
        return Err(LpvError::TooFewRecords(train.len()));
    }
    let n = train.len();
    let phi = DMatrix::from_fn(n, 12, |i, j| {
        let r = &train.records[i];
        regressors(r.x, r.u)[j]
    });
    let mut normal = phi.transpose() * &phi;
    for i in 0..12 {
        normal[(i, i)] += ridge;
    }
    let chol = normal.clone().cholesky().ok_or(LpvError::Singular)?;
    if ridge == 0.0 {
        // Cholesky can succeed on numerically rank-deficient matrices.
        let l = chol.l();
        let diag: Vec<f64> = (0..12).map(|i| l[(i, i)].abs()).collect();
        let max = diag.iter().cloned().fold(0.0, f64::max);
        let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(max > 0.0) || min / max < 1e-7 {
            return Err(LpvError::Singular);
        }
    }
    let mut rows = [[0.0; 12]; 2];
    for (r, row) in rows.iter_mut().enumerate() {
        let y = DVector::from_fn(n, |i, _| train.records[i].x_next[r]);
        let rhs = phi.transpose() * y;
        let c = chol.solve(&rhs);
        row.copy_from_slice(c.as_slice());
    }
    Ok(LpvModel::from_coeff_rows(rows))
}

/// Normal-equation residual `Φᵀ(y − Φc) − ridge·c`, largest magnitude over both rows.
pub fn normal_residual(m: &LpvModel, train: &TransitionDataset, ridge: f64) -> f64 {
    let mut worst = 0.0f64;
    for r in 0..2 {
        let c = m.coeff_row(r);
        let mut grad = [0.0; 12];
        for rec in &train.records {
            let phi = regressors(rec.x, rec.u);
            let pred: f64 = phi.iter().zip(&c).map(|(p, c)| p * c).sum();
            let e = rec.x_next[r] - pred;
            for j in 0..12 {
                grad[j] += phi[j] * e;
            }
        }
        for j in 0..12 {
            worst = worst.max((grad[j] - ridge * c[j]).abs());
        }
    }
    worst
}

/// Per-state best-fit rate in percent, `100·max(0, 1 − ‖x − x̂‖ / ‖x − mean(x)‖)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BfrScore(pub [f64; 2]);

pub fn bfr(predicted: &[State], actual: &[State]) -> Result<BfrScore, LpvError> {
    if predicted.len() != actual.len() || actual.len() < 2 {
        return Err(LpvError::BadSequences(predicted.len(), actual.len()));
    }
    let mut out = [0.0; 2];
    for j in 0..2 {
        let mean = actual.iter().map(|a| a[j]).sum::<f64>() / actual.len() as f64;
        let den = actual
            .iter()
            .map(|a| (a[j] - mean).powi(2))
            .sum::<f64>()
            .sqrt();
        if den == 0.0 {
            return Err(LpvError::UndefinedScore(j));
        }
        let num = predicted
            .iter()
            .zip(actual)
            .map(|(p, a)| (a[j] - p[j]).powi(2))
            .sum::<f64>()
            .sqrt();
        out[j] = 100.0 * (1.0 - num / den).max(0.0);
    }
    Ok(BfrScore(out))
}

/// One-step-ahead BFR on a set of transitions.
pub fn one_step_bfr<F: Dynamics + ?Sized>(
    f: &F,
    data: &TransitionDataset,
) -> Result<BfrScore, LpvError> {
    let pred: Vec<State> = data.records.iter().map(|r| f.eval(r.x, r.u)).collect();
    let actual: Vec<State> = data.records.iter().map(|r| r.x_next).collect();
    bfr(&pred, &actual)
}

/// Free-run BFR over the longest contiguous piece of `data`, driven by its recorded inputs.
pub fn free_run_bfr<F: Dynamics + ?Sized>(
    f: &F,
    data: &TransitionDataset,
) -> Result<BfrScore, LpvError> {
    let (mut best, mut start) = ((0, 0), 0);
    for i in 0..data.len() {
        if i + 1 == data.len() || !data.continues(i) {
            if i + 1 - start > best.1 - best.0 {
                best = (start, i + 1);
            }
            start = i + 1;
        }
    }
    let piece = &data.records[best.0..best.1];
    let mut x = piece.first().map(|r| r.x).unwrap_or([0.0; 2]);
    let mut pred = Vec::with_capacity(piece.len());
    for r in piece {
        x = f.eval(x, r.u);
        if !(x[0].is_finite() && x[1].is_finite()) {
            x = [f64::MAX.sqrt(); 2];
        }
        pred.push(x);
    }
    let actual: Vec<State> = piece.iter().map(|r| r.x_next).collect();
    bfr(&pred, &actual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::dynamics::column;
    use crate::plant::{collect_dataset, CollectSpec, Transition};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(rng: &mut ChaCha8Rng) -> LpvModel {
        let mut m = LpvModel::zeros();
        for k in 0..3 {
            for i in 0..4 {
                m.a[k][i] = rng.random_range(-1.0..1.0);
                m.b[k][i] = rng.random_range(-1.0..1.0);
            }
        }
        m
    }

    fn random_data(rng: &mut ChaCha8Rng, n: usize, truth: &LpvModel) -> TransitionDataset {
        let records = (0..n)
            .map(|_| {
                let x = [rng.random_range(-2.0..2.0), rng.random_range(0.0..4.0)];
                let u = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                Transition {
                    x,
                    u,
                    x_next: eval_nominal(truth, x, u),
                    g: None,
                }
            })
            .collect();
        TransitionDataset { records }
    }

    #[test]
    fn recovers_synthetic_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth = random_model(&mut rng);
        let data = random_data(&mut rng, 200, &truth);
        let fit = fit_lpv(&data, 1e-10).unwrap();
        for k in 0..3 {
            for i in 0..4 {
                assert!((fit.a[k][i] - truth.a[k][i]).abs() < 1e-6);
                assert!((fit.b[k][i] - truth.b[k][i]).abs() < 1e-6);
            }
        }
        assert!(normal_residual(&fit, &data, 1e-10) < 1e-8);
    }

    #[test]
    fn zero_targets_give_zero_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut data = random_data(&mut rng, 50, &LpvModel::zeros());
        for r in &mut data.records {
            r.x_next = [0.0, 0.0];
        }
        let fit = fit_lpv(&data, 1e-3).unwrap();
        assert_eq!(fit, LpvModel::zeros());
    }

    #[test]
    fn singular_without_ridge() {
        let rec = Transition {
            x: [0.0, 0.0],
            u: [0.0, 0.0],
            x_next: [0.0, 0.0],
            g: None,
        };
        let data = TransitionDataset {
            records: vec![rec; 40],
        };
        assert_eq!(fit_lpv(&data, 0.0), Err(LpvError::Singular));
        assert!(fit_lpv(&data, 1e-6).is_ok());
        assert_eq!(
            fit_lpv(&TransitionDataset { records: vec![rec; 3] }, 1.0),
            Err(LpvError::TooFewRecords(3))
        );
    }

    #[test]
    fn origin_maps_to_b0_u() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random_model(&mut rng);
        let u = [0.3, -0.7];
        let y = eval_nominal(&m, [0.0, 0.0], u);
        let b0u = matvec(&m.b[0], u);
        assert_eq!(y, b0u);
    }

    #[test]
    fn identity_a0_returns_state() {
        let mut m = LpvModel::zeros();
        m.a[0] = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(eval_nominal(&m, [0.4, 2.5], [0.0, 0.0]), [0.4, 2.5]);
    }

    #[test]
    fn matches_independent_matrix_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let m = random_model(&mut rng);
            let x = [rng.random_range(-3.0..3.0), rng.random_range(0.0..6.0)];
            let u = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            // Assemble A(ρ), B(ρ) as nalgebra matrices and multiply.
            let rho = [x[0], x[0] * x[1]];
            let mat = |c: &[[f64; 4]; 3]| {
                let mut out = nalgebra::Matrix2::zeros();
                for (k, s) in [1.0, rho[0], rho[1]].iter().enumerate() {
                    out += nalgebra::Matrix2::from_row_slice(&c[k]) * *s;
                }
                out
            };
            let y = mat(&m.a) * nalgebra::Vector2::from(x) + mat(&m.b) * nalgebra::Vector2::from(u);
            let p = eval_nominal(&m, x, u);
            assert!((p[0] - y[0]).abs() < 1e-12 && (p[1] - y[1]).abs() < 1e-12);

            let tape = Tape::new();
            let v = m
                .eval_var(tape.constant(column(x)), tape.constant(column(u)))
                .unwrap()
                .value();
            assert!((v.data()[0] - p[0]).abs() < 1e-12 && (v.data()[1] - p[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn lipschitz_on_bounded_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = random_model(&mut rng);
        // Bound from the coefficient magnitudes on X×U.
        let mut worst = 0.0f64;
        let h = 1e-3;
        for i in 0..=16 {
            for j in 0..=20 {
                let x = [-5.0 + 0.5 * i as f64, 0.5 * j as f64];
                let u = [0.5, -0.5];
                let y = eval_nominal(&m, x, u);
                for d in [[h, 0.0], [0.0, h]] {
                    let y2 = eval_nominal(&m, [x[0] + d[0], x[1] + d[1]], u);
                    let slope = ((y2[0] - y[0]).abs()).max((y2[1] - y[1]).abs()) / h;
                    worst = worst.max(slope);
                }
            }
        }
        let coeff_max = m.a.iter().chain(&m.b).flatten().fold(0.0f64, |a, b| a.max(b.abs()));
        // |∂f/∂x| ≤ Σ terms with |x| ≤ 10, |x₁x₂| ≤ 50.
        let bound = coeff_max * (2.0 + 2.0 * 10.0 + 2.0 * 2.0 * 50.0 + 2.0 + 2.0 * 10.0) * 2.0;
        assert!(worst.is_finite() && worst < bound, "{worst} vs {bound}");
    }

    #[test]
    fn bfr_examples() {
        let actual: Vec<State> = [0.0, 1.0, 2.0, 3.0].iter().map(|&v| [v, v]).collect();
        assert_eq!(bfr(&actual, &actual).unwrap().0, [100.0, 100.0]);
        let mean: Vec<State> = vec![[1.5, 1.5]; 4];
        assert_eq!(bfr(&mean, &actual).unwrap().0, [0.0, 0.0]);
        let pred: Vec<State> = [0.0, 1.0, 2.0, 4.0].iter().map(|&v| [v, v]).collect();
        let s = bfr(&pred, &actual).unwrap().0[0];
        let expected = 100.0 * (1.0 - 1.0 / 5.0f64.sqrt());
        assert!((s - expected).abs() < 1e-12);
        assert!((s - 55.28).abs() < 0.01);
        let flat = vec![[1.0, 0.0]; 3];
        assert_eq!(bfr(&flat, &flat), Err(LpvError::UndefinedScore(0)));
        assert!(matches!(bfr(&flat[..1], &flat[..1]), Err(LpvError::BadSequences(1, 1))));
    }

    #[test]
    fn paper_scale_fit_is_accurate() {
        let data = collect_dataset(&CollectSpec::default()).unwrap();
        let (tr, te) = data.split_indices(0.75, 2);
        let m = fit_lpv(&data.subset(&tr), 1e-8).unwrap();
        let s = one_step_bfr(&m, &data.subset(&te)).unwrap();
        assert!(s.0[0] >= 85.0 && s.0[1] >= 85.0, "{s:?}");
    }

    proptest! {
        #[test]
        fn bfr_invariant_under_joint_affine_map(
            scale in 0.1f64..10.0,
            shift in -5.0f64..5.0,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let actual: Vec<State> = (0..20).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
            let pred: Vec<State> = actual.iter().map(|a| [a[0] + rng.random_range(-0.3..0.3), a[1] * 0.9]).collect();
            let t = |v: &Vec<State>| -> Vec<State> { v.iter().map(|p| [scale * p[0] + shift, scale * p[1] + shift]).collect() };
            let a = bfr(&pred, &actual).unwrap().0;
            let b = bfr(&t(&pred), &t(&actual)).unwrap().0;
            prop_assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
        }
    }
}
