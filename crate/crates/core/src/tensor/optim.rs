use std::collections::HashMap;

use super::{Param, ParamId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer. Adam keeps per-parameter moment buffers keyed by
/// parameter identity; SGD keeps none.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step_count: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::contract(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self {
            kind,
            lr,
            step_count: 0,
            moments: HashMap::new(),
        })
    }

    pub fn sgd(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::adam(), lr)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        self.moments.get(&id).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Applies one update to every parameter, then clears their gradients.
    /// Every parameter must carry a gradient.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.grad().is_none()) {
            return Err(Error::contract(format!("parameter {} has no gradient", p.name())));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        for p in params.iter_mut() {
            let grad = p.grad().expect("checked above").data().to_vec();
            let id = p.id();
            let lr = self.lr;
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in p.value_mut().data_mut().iter_mut().zip(&grad) {
                        *w -= lr * g;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let n = grad.len();
                    let (m, v) = self
                        .moments
                        .entry(id)
                        .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    for (i, w) in p.value_mut().data_mut().iter_mut().enumerate() {
                        let g = grad[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    fn step_once(opt: &mut Optimizer, p: &mut Param, loss_of: impl Fn(&mut Tape<'_>, crate::tensor::Var) -> crate::tensor::Var) {
        let grads = {
            let mut tape = Tape::new();
            let w = tape.param(p);
            let l = loss_of(&mut tape, w);
            tape.backward(l).unwrap()
        };
        p.accumulate(&grads);
        opt.step(&mut [p]).unwrap();
    }

    #[test]
    fn sgd_single_step() {
        let mut p = Param::new("w", Tensor::scalar(1.0));
        let mut opt = Optimizer::sgd(0.1).unwrap();
        step_once(&mut opt, &mut p, |t, w| t.sum(w));
        assert!((p.value().item() - 0.9).abs() < 1e-15);
        assert!(p.grad().is_none());
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn sgd_zero_grad_is_noop() {
        let mut p = Param::new("w", Tensor::vector(vec![0.5, -1.5]));
        let mut opt = Optimizer::sgd(0.1).unwrap();
        step_once(&mut opt, &mut p, |t, w| {
            let s = t.sum(w);
            t.scale(s, 0.0)
        });
        assert_eq!(p.value().data(), &[0.5, -1.5]);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut p = Param::new("w", Tensor::scalar(1.0));
        let mut opt = Optimizer::adam(0.1).unwrap();
        assert!(matches!(opt.step(&mut [&mut p]), Err(Error::Contract(_))));
    }

    #[test]
    fn adam_converges_on_quadratic_bowl() {
        let mut p = Param::new("w", Tensor::vector(vec![3.0, -2.0, 0.7]));
        let mut opt = Optimizer::adam(0.05).unwrap();
        let mut steps = 0;
        while steps < 2000 {
            step_once(&mut opt, &mut p, |t, w| {
                let sq = t.mul(w, w).unwrap();
                t.sum(sq)
            });
            steps += 1;
            if p.value().data().iter().all(|w| w.abs() < 1e-3) {
                break;
            }
        }
        assert!(p.value().data().iter().all(|w| w.abs() < 1e-3), "{:?}", p.value());
        let (m, v) = opt.moments(p.id()).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn sgd_keeps_no_moments() {
        let mut p = Param::new("w", Tensor::scalar(1.0));
        let mut opt = Optimizer::sgd(0.1).unwrap();
        step_once(&mut opt, &mut p, |t, w| t.sum(w));
        assert!(opt.moments(p.id()).is_none());
    }
}
