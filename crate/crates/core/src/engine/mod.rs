//! A small reverse-mode engine: dense tensors, the handful of layers the
//! next-place model needs, Adam, global-norm clipping and a finite-difference
//! gradient checker.
//!
//! Layers are explicit forward/backward function pairs. Forward passes return
//! the activations their backward pass needs; backward passes accumulate into
//! [`Parameter::grad`].

mod fastmath;
mod gradcheck;
mod lstm;
mod ops;
mod tensor;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gradcheck::{
    finite_difference_check, GradCheck, GradCheckOptions, GradReport, ParamReport,
};
pub use lstm::{lstm_backward, lstm_forward, lstm_step, LstmParams, LstmState, LstmTrace, Packing};
pub use ops::{
    add_column_sums, affine, affine_backward, embedding_backward, embedding_lookup,
    embedding_lookup_into, softmax_cross_entropy, softmax_cross_entropy_rows, softmax_in_place,
};
pub use tensor::{gemm, Op, Scalar, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index {index} out of range for {bound} rows")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("non-finite values in {what}")]
    NonFinite { what: String },
}

/// A trainable tensor with its gradient and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    pub adam_m: Tensor<F>,
    pub adam_v: Tensor<F>,
    pub step_count: u64,
}

impl<F: Scalar> Parameter<F> {
    pub fn new(name: impl Into<String>, value: Tensor<F>) -> Self {
        let [r, c] = value.shape();
        Self {
            name: name.into(),
            grad: Tensor::zeros(r, c),
            adam_m: Tensor::zeros(r, c),
            adam_v: Tensor::zeros(r, c),
            value,
            step_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// One bias-corrected Adam update of every parameter. Nothing is updated
    /// if any gradient is non-finite.
    pub fn step<F: Scalar>(&self, params: &mut [&mut Parameter<F>]) -> Result<(), EngineError> {
        if let Some(p) = params.iter().find(|p| !p.grad.all_finite()) {
            return Err(EngineError::NonFinite {
                what: format!("gradient of `{}`", p.name),
            });
        }
        let b1 = F::from_f64_lossy(self.beta1);
        let b2 = F::from_f64_lossy(self.beta2);
        let one = F::one();
        for p in params.iter_mut() {
            p.step_count += 1;
            let t = p.step_count as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            // lr * m_hat / (sqrt(v_hat) + eps) with the corrections folded in.
            let step = F::from_f64_lossy(self.lr / bc1);
            let inv_sqrt_bc2 = F::from_f64_lossy(1.0 / bc2.sqrt());
            let eps = F::from_f64_lossy(self.eps);
            let Parameter {
                value,
                grad,
                adam_m,
                adam_v,
                ..
            } = &mut **p;
            for (((w, &g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(adam_m.data_mut())
                .zip(adam_v.data_mut())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *w -= step * *m / (v.sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of all gradients.
pub fn global_grad_norm<F: Scalar>(params: &[&mut Parameter<F>]) -> f64 {
    params.iter().map(|p| p.grad.sum_sq()).sum::<f64>().sqrt()
}

/// Scales all gradients by `max_norm / norm` when the global norm exceeds
/// `max_norm`. Returns the factor applied (1.0 when unchanged).
pub fn clip_global_norm<F: Scalar>(params: &mut [&mut Parameter<F>], max_norm: f64) -> f64 {
    let norm = global_grad_norm(params);
    if !(norm > max_norm) {
        return 1.0;
    }
    let factor = max_norm / norm;
    let f = F::from_f64_lossy(factor);
    for p in params.iter_mut() {
        p.grad.data_mut().iter_mut().for_each(|g| *g *= f);
    }
    factor
}
