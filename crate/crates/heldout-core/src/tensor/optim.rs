//! Stochastic gradient descent with (Nesterov) momentum and weight decay.

use super::Tensor;
use crate::{Error, Result};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

/// SGD over a fixed parameter list. Momentum buffers live here and persist
/// across steps; gradients are consumed (cleared) by each step.
///
/// The update follows the common deep-learning formulation:
///
/// ```text
/// g   = grad + weight_decay · param
/// buf = momentum · buf + g
/// d   = g + momentum · buf   (nesterov)      d = buf   (plain)
/// param -= lr · d
/// ```
///
/// With constant grad 1 and lr 0.1 the first two displacements are
/// 0.1, 0.19 (plain) and 0.19, 0.271 (nesterov); the two-step test below
/// freezes that recurrence.
pub struct Sgd {
    params: Vec<Tensor>,
    momentum: f64,
    nesterov: bool,
    weight_decay: f64,
    buffers: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: Vec<Tensor>, momentum: f64, nesterov: bool, weight_decay: f64) -> Sgd {
        let buffers = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Sgd {
            params,
            momentum,
            nesterov,
            weight_decay,
            buffers,
        }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Momentum buffer of parameter `i` (inspection by tests).
    pub fn buffer(&self, i: usize) -> &[f64] {
        &self.buffers[i]
    }

    /// One optimizer step at learning rate `lr`. Every parameter must have
    /// an accumulated gradient; all gradients are cleared afterwards.
    pub fn step(&mut self, lr: f64) -> Result<()> {
        // Validate up front so a missing grad can't leave the parameter
        // list half-updated.
        for p in &self.params {
            if p.grad_ref().is_none() {
                return Err(Error::MissingGrad {
                    param: format!("{:?}", p.shape_ref()),
                });
            }
        }
        for (p, buf) in self.params.iter().zip(self.buffers.iter_mut()) {
            let grad = p.take_grad()?;
            let mut data = p.data_mut();
            let m = self.momentum;
            for ((v, b), &gr) in data.iter_mut().zip(buf.iter_mut()).zip(&grad) {
                let g = gr + self.weight_decay * *v;
                *b = m * *b + g;
                let d = if self.nesterov { g + m * *b } else { *b };
                *v -= lr * d;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    fn one_param(v: f64) -> Tensor {
        Tensor::param(&[1], vec![v]).unwrap()
    }

    fn give_grad(p: &Tensor, g: f64) {
        p.grad_mut()[0] += g;
    }

    #[test]
    fn vanilla_step() {
        let p = one_param(1.0);
        let mut opt = Sgd::new(vec![p.clone()], 0.0, false, 0.0);
        give_grad(&p, 1.0);
        opt.step(0.1).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-15);
        assert!(p.grad().is_none(), "grads are consumed by the step");
    }

    #[test]
    fn momentum_grows_second_displacement() {
        let p = one_param(0.0);
        let mut opt = Sgd::new(vec![p.clone()], 0.9, false, 0.0);
        give_grad(&p, 1.0);
        opt.step(0.1).unwrap();
        let d1 = -p.data()[0];
        give_grad(&p, 1.0);
        opt.step(0.1).unwrap();
        let d2 = -p.data()[0] - d1;
        assert!(d2 > d1, "second displacement {d2} ≤ first {d1}");
        assert!((d1 - 0.1).abs() < 1e-15);
        assert!((d2 - 0.19).abs() < 1e-15);
    }

    #[test]
    fn nesterov_two_step_recurrence() {
        // Constant grad 1, lr 0.1, momentum 0.9.
        // plain:    buf 1, 1.9      → displacements 0.1, 0.19
        // nesterov: d = g + m·buf   → displacements 0.19, 0.271
        let plain = one_param(1.0);
        let nest = one_param(1.0);
        let mut opt_p = Sgd::new(vec![plain.clone()], 0.9, false, 0.0);
        let mut opt_n = Sgd::new(vec![nest.clone()], 0.9, true, 0.0);
        for _ in 0..2 {
            give_grad(&plain, 1.0);
            give_grad(&nest, 1.0);
            opt_p.step(0.1).unwrap();
            opt_n.step(0.1).unwrap();
        }
        assert!((plain.data()[0] - 0.71).abs() < 1e-12);
        assert!((nest.data()[0] - 0.539).abs() < 1e-12);
        assert!(plain.data()[0] != nest.data()[0]);
    }

    #[test]
    fn weight_decay_shrinks_without_grad_signal() {
        let p = one_param(2.0);
        let mut opt = Sgd::new(vec![p.clone()], 0.0, false, 0.01);
        give_grad(&p, 0.0);
        opt.step(0.1).unwrap();
        // g = 0 + 0.01·2 = 0.02 → p = 2 − 0.1·0.02
        assert!((p.data()[0] - 1.998).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_an_error_and_updates_nothing() {
        let a = one_param(1.0);
        let b = one_param(1.0);
        let mut opt = Sgd::new(vec![a.clone(), b.clone()], 0.9, true, 0.0);
        give_grad(&a, 1.0);
        let err = opt.step(0.1).unwrap_err();
        assert!(matches!(err, Error::MissingGrad { .. }));
        assert_eq!(a.data()[0], 1.0, "no partial update");
        // a's grad is still there for a later, complete step.
        give_grad(&b, 1.0);
        opt.step(0.1).unwrap();
        assert!(a.data()[0] < 1.0 && b.data()[0] < 1.0);
    }

    #[test]
    fn buffers_persist_across_steps() {
        let p = one_param(0.0);
        let mut opt = Sgd::new(vec![p.clone()], 0.9, false, 0.0);
        give_grad(&p, 1.0);
        opt.step(1.0).unwrap();
        assert_eq!(opt.buffer(0), &[1.0]);
        give_grad(&p, 1.0);
        opt.step(1.0).unwrap();
        assert!((opt.buffer(0)[0] - 1.9).abs() < 1e-15);
    }
}
