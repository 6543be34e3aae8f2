//! Adam with bias correction, and the cosine-annealed learning rate.

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Learning rate used by every objective.
pub const DEFAULT_LR: f64 = 5e-4;

/// Moment accumulators for every parameter of one store.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
        }
    }

    /// One Adam update at learning rate `lr`.
    pub fn adam_step(&mut self, params: &mut ParamStore, gradients: &[Tensor], lr: f64) -> Result<()> {
        if gradients.len() != params.len() || self.first_moment.len() != params.len() {
            return Err(Error::shape(format!(
                "{} gradients for {} parameters",
                gradients.len(),
                params.len()
            )));
        }
        for (k, (p, g)) in params.tensors().iter().zip(gradients).enumerate() {
            if p.shape() != g.shape() || self.first_moment[k].shape() != p.shape() {
                return Err(Error::shape(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (k, p) in params.tensors_mut().iter_mut().enumerate() {
            let m = self.first_moment[k].data_mut();
            let v = self.second_moment[k].data_mut();
            for (((x, &g), m), v) in p.data_mut().iter_mut().zip(gradients[k].data()).zip(m).zip(v) {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: u64, total: u64, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::invalid("cosine schedule needs total > 0"));
    }
    if step > total {
        return Err(Error::invalid(format!("step {step} beyond schedule length {total}")));
    }
    let frac = step as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::vector(values.to_vec())).unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = store(&[1.0, -2.0]);
        let mut st = OptimizerState::new(&s);
        for _ in 0..10 {
            st.adam_step(&mut s, &[Tensor::zeros(&[2])], 0.1).unwrap();
        }
        assert_eq!(s.tensors()[0].data(), &[1.0, -2.0]);
        assert_eq!(st.step, 10);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(&[0.0]);
        let mut st = OptimizerState::new(&s);
        st.adam_step(&mut s, &[Tensor::vector(vec![1.0])], 0.1).unwrap();
        assert!((s.tensors()[0].data()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut s = store(&[0.0, 1.0]);
        let mut st = OptimizerState::new(&s);
        assert!(st.adam_step(&mut s, &[Tensor::zeros(&[3])], 0.1).is_err());
        assert!(st.adam_step(&mut s, &[], 0.1).is_err());
        assert_eq!(st.step, 0);
    }

    #[test]
    fn deterministic_trajectories() {
        let run = || {
            let mut s = store(&[0.3, -0.7]);
            let mut st = OptimizerState::new(&s);
            for k in 0..50 {
                let x = s.tensors()[0].data().to_vec();
                let g = Tensor::vector(vec![2.0 * x[0] + k as f64 * 0.01, (x[1] * 3.0).sin()]);
                st.adam_step(&mut s, &[g], 0.05).unwrap();
            }
            s
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn cosine_values() {
        assert_eq!(cosine_lr(0, 100, DEFAULT_LR, 0.0).unwrap(), 5e-4);
        assert!((cosine_lr(100, 100, 5e-4, 1e-6).unwrap() - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 5e-4, 0.0).unwrap() - 2.5e-4).abs() < 1e-18);
        assert!(cosine_lr(101, 100, 5e-4, 0.0).is_err());
        assert!(cosine_lr(0, 0, 5e-4, 0.0).is_err());
    }
}
