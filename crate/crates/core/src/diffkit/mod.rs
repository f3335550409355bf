//! Small differentiable-computation kit: flat parameter vectors with named
//! layouts, tanh MLPs and a gated recurrent cell with hand-derived backward
//! passes, a scalar reverse-mode tape, Adam, and finite-difference checks.

mod adam;
mod check;
mod gru;
pub mod hexf64;
mod mlp;
mod params;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use check::{finite_diff_check, FdReport, Objective};
pub use gru::{recurrent_forward, GruTrace, RecurrentSpec};
pub use mlp::{mlp_forward, MlpSpec, MlpTrace};
pub use params::{Block, LayoutBuilder, ParamVector};
pub use tape::{grad, Tape, TapeObjective, Var};

/// Dot product with four independent accumulators so the loop vectorises.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
