//! Adam optimiser with coupled L2 regularisation.

use super::Tensor;
use crate::error::{IonError, Result};
use crate::scalar::Scalar;
use std::collections::BTreeMap;

/// Optimiser hyperparameters. Defaults follow the training setup used
/// throughout: lr 1e-4, L2 1e-6, standard betas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub l2: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, l2: 1e-6 }
    }
}

struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Per-model Adam state. Moment buffers are keyed by parameter name and
/// created lazily, so freezing or unfreezing parameters between steps does
/// not disturb the state of the others.
pub struct Adam<T> {
    pub hyper: AdamHyper,
    t: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(hyper: AdamHyper) -> Self {
        Adam { hyper, t: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one update to every parameter that requires a gradient and
    /// has one. The L2 penalty is coupled: g <- grad + l2 * param before the
    /// moment updates. Gradients are cleared after a successful step; a
    /// non-finite gradient aborts before any parameter is touched.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        for p in params.iter() {
            if !p.requires_grad {
                continue;
            }
            if let Some(g) = &p.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(IonError::NonFiniteGrad { param: p.name.clone() });
                }
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.hyper.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.hyper.beta2.powi(self.t as i32);
        let (b1, b2) = (T::from_f64(self.hyper.beta1), T::from_f64(self.hyper.beta2));
        let one_m_b1 = T::from_f64(1.0 - self.hyper.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.hyper.beta2);
        let lr = T::from_f64(self.hyper.lr);
        let eps = T::from_f64(self.hyper.eps);
        let l2 = T::from_f64(self.hyper.l2);
        let inv_bc1 = T::from_f64(1.0 / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);

        for p in params.iter_mut() {
            if !p.requires_grad {
                continue;
            }
            let Some(grad) = p.grad.take() else { continue };
            let entry = self.moments.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![T::zero(); grad.len()],
                v: vec![T::zero(); grad.len()],
            });
            for (i, val) in p.value.data.iter_mut().enumerate() {
                let g = grad[i] + l2 * *val;
                entry.m[i] = b1 * entry.m[i] + one_m_b1 * g;
                entry.v[i] = b2 * entry.v[i] + one_m_b2 * g * g;
                let m_hat = entry.m[i] * inv_bc1;
                let v_hat = entry.v[i] * inv_bc2;
                *val = *val - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorData;

    fn scalar_param(v: f64) -> Tensor<f64> {
        Tensor::new("p", TensorData::scalar(v), true)
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // grad = 1, l2 = 0: m_hat = 1, v_hat = 1 after bias correction, so
        // the update is lr / (1 + eps') ~= lr.
        let mut p = scalar_param(0.0);
        p.grad = Some(vec![1.0]);
        let hyper = AdamHyper { l2: 0.0, ..Default::default() };
        let mut opt = Adam::new(hyper);
        opt.step(&mut [&mut p]).unwrap();
        let update = -p.value.data[0];
        assert!((update - hyper.lr).abs() < 1e-9, "update {update}");
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_grad_zero_l2_leaves_param_unchanged() {
        let mut p = scalar_param(0.7);
        p.grad = Some(vec![0.0]);
        let mut opt = Adam::new(AdamHyper { l2: 0.0, ..Default::default() });
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value.data[0], 0.7);
    }

    #[test]
    fn zero_grad_positive_l2_decays_param() {
        let mut p = scalar_param(1.0);
        p.grad = Some(vec![0.0]);
        let mut opt = Adam::new(AdamHyper { l2: 1e-6, ..Default::default() });
        opt.step(&mut [&mut p]).unwrap();
        assert!(p.value.data[0] < 1.0);
        assert!(p.value.data[0] > 0.99);
    }

    #[test]
    fn nan_grad_aborts_step() {
        let mut p = scalar_param(1.0);
        p.grad = Some(vec![f64::NAN]);
        let mut opt = Adam::new(AdamHyper::default());
        let err = opt.step(&mut [&mut p]).unwrap_err();
        assert!(matches!(err, IonError::NonFiniteGrad { .. }));
        assert_eq!(p.value.data[0], 1.0);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn frozen_param_skipped() {
        let mut p = scalar_param(1.0);
        p.requires_grad = false;
        let mut opt = Adam::new(AdamHyper::default());
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value.data[0], 1.0);
    }
}
