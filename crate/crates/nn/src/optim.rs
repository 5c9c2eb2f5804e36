//! Adam.

use crate::params::ParamSet;
use crate::{NnError, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam state for one [`ParamSet`]. The learning rate is passed per step so
/// that a schedule can drive it.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = params.value_mut(i).data_mut();
            for (((w, m), v), &g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grad.data()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// Moment estimates as named tensors, for checkpoints.
    pub fn state(&self) -> (u64, Vec<Tensor>, Vec<Tensor>) {
        (self.step, self.m.clone(), self.v.clone())
    }

    pub fn restore(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        let ok = m.len() == self.m.len()
            && v.len() == self.v.len()
            && m.iter().zip(&self.m).all(|(a, b)| a.shape() == b.shape())
            && v.iter().zip(&self.v).all(|(a, b)| a.shape() == b.shape());
        if !ok {
            return Err(NnError::Checkpoint("optimizer state does not match parameters".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_each_weight_by_lr_against_the_gradient_sign() {
        let mut params = ParamSet::new();
        params.push("w", Tensor::from_vec(&[3], vec![1.0, 1.0, 1.0]).unwrap());
        let mut adam = Adam::new(&params, AdamConfig::default());
        let g = Tensor::from_vec(&[3], vec![2.0, -0.5, 0.0]).unwrap();
        adam.step(&mut params, &[Some(g)], 0.1);
        let w = params.value(0).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 1.1).abs() < 1e-6);
        assert_eq!(w[2], 1.0);
    }

    #[test]
    fn missing_gradient_leaves_parameter_bitwise_identical() {
        let mut params = ParamSet::new();
        params.push("a", Tensor::from_vec(&[2], vec![0.3, -0.7]).unwrap());
        params.push("b", Tensor::from_vec(&[1], vec![5.0]).unwrap());
        let before = params.value(0).clone();
        let mut adam = Adam::new(&params, AdamConfig::default());
        adam.step(&mut params, &[None, Some(Tensor::scalar(1.0))], 0.01);
        assert_eq!(params.value(0), &before);
        assert_ne!(params.value(1).item(), 5.0);
    }
}
