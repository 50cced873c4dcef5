//! ADAM optimizer with bias correction.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig<F> {
    pub learning_rate: F,
    pub beta1: F,
    pub beta2: F,
    pub epsilon: F,
}

impl<F: Scalar> AdamConfig<F> {
    /// Canonical constants; the learning rate is the caller's choice.
    pub fn with_lr(learning_rate: F) -> Self {
        AdamConfig {
            learning_rate,
            beta1: F::cast(0.9),
            beta2: F::cast(0.999),
            epsilon: F::cast(1e-8),
        }
    }
}

/// Optimizer state: step counter plus first/second moment buffers, one pair
/// per parameter tensor, matched by position. Moments are allocated on the
/// first step and must keep their shapes afterwards.
pub struct Adam<F> {
    config: AdamConfig<F>,
    step: u64,
    moments: Vec<(Tensor<F>, Tensor<F>)>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(config: AdamConfig<F>) -> Self {
        if !(config.beta1 >= F::zero()
            && config.beta1 < F::one()
            && config.beta2 >= F::zero()
            && config.beta2 < F::one()
            && config.epsilon > F::zero()
            && config.learning_rate > F::zero())
        {
            panic!("invalid ADAM configuration");
        }
        Adam {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over a parameter group. `grads[i]` of `None` means the
    /// parameter received no gradient this step and is treated as zero.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<F>],
        grads: &[Option<&Tensor<F>>],
    ) -> Result<()> {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
                .collect();
        }
        assert_eq!(self.moments.len(), params.len(), "parameter group changed size");
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != params[i].shape() {
                    return Err(Error::shape("adam", "gradient shape mismatch"));
                }
                if !g.is_finite() {
                    return Err(Error::NonFinite { op: "adam" });
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = F::from_f64(self.step as f64).unwrap();
        let bc1 = F::one() - c.beta1.powf(t);
        let bc2 = F::one() - c.beta2.powf(t);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.moments.iter_mut())
        {
            let zero = F::zero();
            for j in 0..param.len() {
                let g = grad.map_or(zero, |g| g.data()[j]);
                let mj = &mut m.data_mut()[j];
                *mj = c.beta1 * *mj + (F::one() - c.beta1) * g;
                let vj = &mut v.data_mut()[j];
                *vj = c.beta2 * *vj + (F::one() - c.beta2) * g * g;
                let m_hat = *mj / bc1;
                let v_hat = *vj / bc2;
                param.data_mut()[j] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point_from_init() {
        let mut p = Tensor::new(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig::with_lr(0.01));
        let zero = Tensor::zeros(&[3]);
        opt.step(&mut [&mut p], &[Some(&zero)]).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut p = Tensor::new(vec![1], vec![0.0f64]).unwrap();
        let g = Tensor::new(vec![1], vec![0.7]).unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(0.01));
        let mut prev = p.data()[0];
        for _ in 0..50 {
            opt.step(&mut [&mut p], &[Some(&g)]).unwrap();
            assert!(p.data()[0] < prev, "positive gradient must decrease the parameter");
            prev = p.data()[0];
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(w) = ‖w‖², lr 1e-2, 2000 steps, from ‖w0‖ <= 1
        for seed in [[0.6f64, -0.8], [1.0, 0.0], [-0.3, 0.2]] {
            let mut w = Tensor::new(vec![2], seed.to_vec()).unwrap();
            let mut opt = Adam::new(AdamConfig::with_lr(0.01));
            for _ in 0..2000 {
                let g: Vec<f64> = w.data().iter().map(|&x| 2.0 * x).collect();
                let g = Tensor::new(vec![2], g).unwrap();
                opt.step(&mut [&mut w], &[Some(&g)]).unwrap();
            }
            let norm: f64 = w.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(norm < 1e-3, "‖w‖ = {norm} after 2000 steps from {seed:?}");
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = Tensor::new(vec![1], vec![0.0f64]).unwrap();
        let mut g = Tensor::zeros(&[1]);
        g.data_mut()[0] = f64::NAN;
        let mut opt = Adam::new(AdamConfig::with_lr(0.01));
        assert!(opt.step(&mut [&mut p], &[Some(&g)]).is_err());
    }
}
