//! Adam with bias correction and L2 folded into the gradient.

use crate::model::Param;
use crate::tensor::{Float, Tensor};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, zero at `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Float>(params: &[Param<T>]) -> Self {
        Self {
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }
}

/// One update. Parameters whose gradient is `None` are frozen: neither they
/// nor their moments change. For `penalized[i]`, `2·l2_lambda·W` is added to
/// the gradient before the moment update.
pub fn adam_step<T: Float>(
    params: &mut [Param<T>],
    grads: &[Option<Tensor<T>>],
    penalized: &[bool],
    l2_lambda: f64,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), penalized.len());
    for (p, g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.value.shape() {
                return Err(TrainError::Config(format!(
                    "gradient for {} has shape {:?}, parameter {:?}",
                    p.name,
                    g.shape(),
                    p.value.shape()
                )));
            }
            if !g.is_finite() {
                return Err(TrainError::NonFiniteGradient {
                    param: p.name.clone(),
                });
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let mut gj = g.data()[j].as_f64();
            if penalized[i] {
                gj += 2.0 * l2_lambda * w.as_f64();
            }
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let step = cfg.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
            *w = T::from_f64_lossy(w.as_f64() - step);
        }
        if !p.value.is_finite() {
            return Err(TrainError::NonFiniteGradient {
                param: p.name.clone(),
            });
        }
    }
    Ok(())
}
