//! Discrete-time model interface shared by the nominal model, the OCP and test stubs.

use crate::autodiff::{self, Tensor, Var};
use crate::{Input, State};

/// A discrete-time map `x⁺ = f(x, u)`.
pub trait Dynamics {
    fn eval(&self, x: State, u: Input) -> State;
}

/// A model that can also be evaluated on the tape. `x` and `u` are `[2, 1]` columns.
pub trait DiffDynamics: Dynamics {
    fn eval_var<'t>(&self, x: Var<'t>, u: Var<'t>) -> autodiff::Result<Var<'t>>;
}

/// `x⁺ = A x + B u` with 2×2 row-major matrices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearModel {
    pub a: [f64; 4],
    pub b: [f64; 4],
}

impl LinearModel {
    pub fn identity() -> Self {
        Self {
            a: [1.0, 0.0, 0.0, 1.0],
            b: [0.0; 4],
        }
    }
}

pub(crate) fn matvec(m: &[f64; 4], v: [f64; 2]) -> [f64; 2] {
    [m[0] * v[0] + m[1] * v[1], m[2] * v[0] + m[3] * v[1]]
}

pub(crate) fn mat_const<'t>(tape: &'t autodiff::Tape, m: &[f64; 4]) -> Var<'t> {
    tape.constant(Tensor::matrix(2, 2, m.to_vec()).expect("2x2"))
}

impl Dynamics for LinearModel {
    fn eval(&self, x: State, u: Input) -> State {
        let ax = matvec(&self.a, x);
        let bu = matvec(&self.b, u);
        [ax[0] + bu[0], ax[1] + bu[1]]
    }
}

impl DiffDynamics for LinearModel {
    fn eval_var<'t>(&self, x: Var<'t>, u: Var<'t>) -> autodiff::Result<Var<'t>> {
        let tape = x.tape();
        let ax = mat_const(tape, &self.a).matmul(x)?;
        let bu = mat_const(tape, &self.b).matmul(u)?;
        ax.add(bu)
    }
}

/// Lifts a pair into a `[2, 1]` tape column.
pub fn column(v: [f64; 2]) -> Tensor {
    Tensor::matrix(2, 1, v.to_vec()).expect("2x1")
}
