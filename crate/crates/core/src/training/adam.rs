//! Adam with bias correction over a [`ParamSet`].

use crate::error::{CoreError, Result};
use crate::lgfnet::ParamSet;
use crate::tensor::Tensor;

/// Optimizer state; moment tensors track the parameter set's canonical
/// order.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let m: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        let v = m.clone();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. `grads` is aligned with the parameter set's canonical
    /// order; `None` entries leave their parameter and moments untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(CoreError::ShapeMismatch {
                op: "adam step",
                got: vec![grads.len(), params.len()],
                expected: format!("{} gradients and parameters", self.m.len()),
            });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, tensor) in params.tensors_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            if g.shape() != tensor.shape() {
                return Err(CoreError::ShapeMismatch {
                    op: "adam step",
                    got: g.shape().to_vec(),
                    expected: format!("{:?}", tensor.shape()),
                });
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = tensor.data_mut();
            for ((pj, mj), (vj, gj)) in p
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut().zip(g.data()))
            {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                let m_hat = *mj / bc1;
                let v_hat = *vj / bc2;
                *pj -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    use crate::lgfnet::ParamId;

    fn scalar_params(value: f64) -> (ParamSet, ParamId) {
        let mut p = ParamSet::new();
        let id = p.add("w", Tensor::scalar(value));
        (p, id)
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // With bias correction the very first update is lr * g/(|g| + eps').
        for g in [2.5, -0.03] {
            let (mut params, id) = scalar_params(1.0);
            let mut adam = Adam::new(&params, 0.01);
            adam.step(&mut params, &[Some(Tensor::scalar(g))]).unwrap();
            let moved = params.get(id).data()[0] - 1.0;
            assert!(
                (moved + 0.01 * g.signum()).abs() < 1e-6,
                "g={g}: moved {moved}"
            );
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut params, id) = scalar_params(3.25);
        let mut adam = Adam::new(&params, 0.1);
        adam
            .step(&mut params, &[Some(Tensor::scalar(0.0))])
            .unwrap();
        assert_eq!(params.get(id).data()[0], 3.25);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn missing_gradient_skips_parameter() {
        let (mut params, id) = scalar_params(-1.5);
        let mut adam = Adam::new(&params, 0.1);
        adam.step(&mut params, &[None]).unwrap();
        assert_eq!(params.get(id).data()[0], -1.5);
    }

    /// Three steps on the quadratic 0.5*(w - 2)^2 against a hand-rolled
    /// scalar Adam.
    #[test]
    fn matches_scalar_reference_over_three_steps() {
        let lr = 0.05;
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut w_ref = 0.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut history = Vec::new();
        for t in 1..=3 {
            let g = w_ref - 2.0;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            w_ref -= lr * m_hat / (v_hat.sqrt() + eps);
            history.push(w_ref);
        }

        let (mut params, id) = scalar_params(0.0);
        let mut adam = Adam::new(&params, lr);
        for want in history {
            let g = params.get(id).data()[0] - 2.0;
            adam.step(&mut params, &[Some(Tensor::scalar(g))]).unwrap();
            let got = params.get(id).data()[0];
            assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
        }
    }

    #[test]
    fn rejects_mismatched_gradient_count() {
        let (mut params, _) = scalar_params(0.0);
        let mut adam = Adam::new(&params, 0.1);
        assert!(adam.step(&mut params, &[]).is_err());
    }
}
