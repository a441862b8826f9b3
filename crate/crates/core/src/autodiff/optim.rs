//! Adam and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Hyperparameters of the Adam update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let first: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        let second = first.clone();
        Self {
            config,
            step: 0,
            first,
            second,
        }
    }

    /// Bias-corrected Adam update, in place.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor<T>>,
        grads: &[Tensor<T>],
    ) -> Result<(), TensorError> {
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let one = T::one();
        let bias1 = one - T::lit(c.beta1.powi(self.step as i32));
        let bias2 = one - T::lit(c.beta2.powi(self.step as i32));
        let lr = T::lit(c.learning_rate);
        let eps = T::lit(c.epsilon);

        let mut count = 0;
        for (i, p) in params.into_iter().enumerate() {
            let (g, m, v) = match (grads.get(i), self.first.get_mut(i), self.second.get_mut(i)) {
                (Some(g), Some(m), Some(v)) => (g, m, v),
                _ => {
                    return Err(TensorError::Invalid {
                        op: "adam_step",
                        msg: format!("no gradient or moment for parameter {i}"),
                    })
                }
            };
            if g.shape() != p.shape() || m.shape() != p.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                md[j] = b1 * md[j] + (one - b1) * gj;
                vd[j] = b2 * vd[j] + (one - b2) * gj * gj;
                let m_hat = md[j] / bias1;
                let v_hat = vd[j] / bias2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            count += 1;
        }
        if count != grads.len() {
            return Err(TensorError::Invalid {
                op: "adam_step",
                msg: format!("{count} parameters for {} gradients", grads.len()),
            });
        }
        Ok(())
    }
}

/// Global L2 norm across all gradient tensors.
pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> T {
    grads.iter().map(|g| g.sq_norm()).sum::<T>().sqrt()
}

/// Rescales all gradients by `max_norm / norm` when their global norm
/// exceeds `max_norm`. Returns the norm measured before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: T) -> Result<T, TensorError> {
    if max_norm <= T::zero() {
        return Err(TensorError::Invalid {
            op: "clip_global_norm",
            msg: "max_norm must be positive".into(),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TensorError::NonFinite { op: "clip_global_norm" });
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(norm)
}
