//! Dense arrays and the reverse-mode tape the model is trained with.
//!
//! All arithmetic is carried out in `f64`. When the thread-local precision is
//! switched to [`Precision::F32`], every forward result is rounded through
//! `f32` so training observes single-precision values while verification
//! suites keep full double precision.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, grad_check_with};
pub use graph::{Gradients, Graph, ParamId, ParamStore, Parameter, Var};
pub use kernels::{gemm, layer_norm, log_softmax, log_sum_exp, sigmoid, silu, softmax};
pub use tensor::Tensor;

use serde::{Deserialize, Serialize};
use std::cell::Cell;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

thread_local! {
    static PRECISION: Cell<Precision> = const { Cell::new(Precision::F64) };
}

/// Current precision of the calling thread.
pub fn precision() -> Precision {
    PRECISION.with(|p| p.get())
}

pub fn set_precision(p: Precision) {
    PRECISION.with(|c| c.set(p));
}

/// Runs `f` with the given precision and restores the previous one.
pub fn with_precision<R>(p: Precision, f: impl FnOnce() -> R) -> R {
    let prev = precision();
    set_precision(p);
    let out = f();
    set_precision(prev);
    out
}

#[inline]
pub(crate) fn round_to_precision(values: &mut [f64]) {
    if precision() == Precision::F32 {
        for v in values.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}
