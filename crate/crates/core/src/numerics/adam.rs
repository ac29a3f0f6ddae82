use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction.
///
/// Moments are allocated lazily on the first step. A parameter whose
/// gradient is `None` for a step is left untouched and its moments are not
/// advanced, so parts of a model that a loss does not reach stay frozen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    param_steps: Vec<u64>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        assert!(learning_rate > 0.0, "learning rate must be positive");
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            param_steps: Vec::new(),
        }
    }

    /// One update over `params`; `grads[i]` belongs to `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<Tensor>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape {
                op: "adam_step",
                detail: format!("{} parameters but {} gradients", params.len(), grads.len()),
            });
        }
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.second_moment = self.first_moment.clone();
            self.param_steps = vec![0; params.len()];
        } else if self.first_moment.len() != params.len() {
            return Err(Error::Shape {
                op: "adam_step",
                detail: format!(
                    "state tracks {} parameters, step got {}",
                    self.first_moment.len(),
                    params.len()
                ),
            });
        }
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() || self.first_moment[i].shape() != p.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    detail: format!("parameter {:?} with gradient {:?}", p.shape(), g.shape()),
                });
            }
            self.param_steps[i] += 1;
            let t = self.param_steps[i] as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *x -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        self.step_count += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let mut adam = AdamState::new(0.1);
        for _ in 0..10 {
            adam.step(&mut [&mut p], &[Some(Tensor::zeros(&[2]))]).unwrap();
        }
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(adam.step_count, 10);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m1 = 0.1, v1 = 0.001; bias-corrected both equal 1, so the step is
        // lr * 1 / (1 + eps).
        let mut p = Tensor::scalar(0.5);
        let mut adam = AdamState::new(0.1);
        adam.step(&mut [&mut p], &[Some(Tensor::scalar(1.0))]).unwrap();
        let expected = 0.5 - 0.1 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
        assert!((0.5 - p.item() - 0.1).abs() < 1e-8);
    }

    #[test]
    fn missing_gradient_skips_parameter() {
        let mut a = Tensor::scalar(1.0);
        let mut b = Tensor::scalar(1.0);
        let mut adam = AdamState::new(0.1);
        adam.step(&mut [&mut a, &mut b], &[Some(Tensor::scalar(1.0)), None]).unwrap();
        adam.step(&mut [&mut a, &mut b], &[None, None]).unwrap();
        assert!(a.item() < 1.0);
        assert_eq!(b.item(), 1.0);
        assert_eq!(adam.step_count, 2);
    }

    #[test]
    fn mismatched_gradient_shape_rejected() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let mut adam = AdamState::new(0.1);
        assert!(adam.step(&mut [&mut p], &[Some(Tensor::zeros(&[3]))]).is_err());
    }
}
