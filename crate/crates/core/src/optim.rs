//! Bias-corrected Adam.

use crate::error::{mismatch, TensorError};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for a fixed list of parameters.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar = f32> {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    /// One accumulator pair per parameter, shaped like `params`.
    pub fn new(cfg: AdamConfig, params: &[Tensor<T>]) -> Result<Self, TensorError> {
        for (name, b) in [("beta1", cfg.beta1), ("beta2", cfg.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(TensorError::Domain {
                    op: "adam",
                    detail: format!("{name} must lie in (0, 1), got {b}"),
                });
            }
        }
        if !(cfg.lr > 0.0 && cfg.eps > 0.0) {
            return Err(TensorError::Domain {
                op: "adam",
                detail: "lr and eps must be positive".into(),
            });
        }
        Ok(Adam {
            cfg,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First and second moments, in parameter order.
    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Applies one update. `None` gradients mark frozen parameters: they and
    /// their moments are left untouched.
    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>]) -> Result<(), TensorError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(mismatch("adam", &[self.m.len()], &[params.len(), grads.len()]));
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(mismatch("adam", p.shape(), g.shape()));
                }
            }
        }
        for (i, p) in params.iter().enumerate() {
            if p.shape() != self.m[i].shape() {
                return Err(mismatch("adam", self.m[i].shape(), p.shape()));
            }
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2): (T, T) = (T::from_f64(beta1), T::from_f64(beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step_size = T::from_f64(lr / bc1);
        let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(eps);

        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let Some(g) = g else { continue };
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *pi -= step_size * *mi / ((*vi).sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![Tensor::<f32>::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig::default(), &p).unwrap();
        opt.update(&mut p, &[Some(Tensor::zeros(vec![3]))]).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_by_hand() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut p = vec![Tensor::<f64>::scalar(1.0)];
        let mut opt = Adam::new(cfg, &p).unwrap();
        opt.update(&mut p, &[Some(Tensor::scalar(1.0))]).unwrap();
        // m̂ = v̂ = 1, so the step is lr·1/(1 + ε).
        assert!((p[0].item() - 0.9).abs() < 1e-6);
    }

    #[test]
    fn rejects_shape_mismatch_and_bad_decay() {
        let mut p = vec![Tensor::<f32>::zeros(vec![2])];
        let mut opt = Adam::new(AdamConfig::default(), &p).unwrap();
        assert!(opt.update(&mut p, &[Some(Tensor::zeros(vec![3]))]).is_err());
        let bad = AdamConfig {
            beta1: 1.0,
            ..AdamConfig::default()
        };
        assert!(Adam::<f32>::new(bad, &p).is_err());
    }
}
