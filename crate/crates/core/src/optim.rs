//! SGD with momentum and Adam, both with L2 weight decay folded into the
//! gradient.

use crate::config::{OptimizerConfig, OptimizerKind};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Per-parameter state: one slot (velocity) for SGD, two (first and second
/// moments) for Adam. Slots are created on a parameter's first update.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub kind: OptimizerKind,
    pub t: u64,
    pub slots: Vec<Vec<Option<Tensor<T>>>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, params: usize) -> Self {
        let n = match kind {
            OptimizerKind::Sgd => 1,
            OptimizerKind::Adam => 2,
        };
        Self { kind, t: 0, slots: vec![vec![None; params]; n] }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub cfg: OptimizerConfig,
    pub state: OptimizerState<T>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: &OptimizerConfig, params: usize) -> Self {
        Self { cfg: cfg.clone(), state: OptimizerState::new(cfg.kind, params) }
    }

    /// Learning rate after `step` of `total` steps.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        if self.cfg.poly_decay && total > 0 {
            self.cfg.lr * (1.0 - step.min(total) as f64 / total as f64).powf(self.cfg.poly_power)
        } else {
            self.cfg.lr
        }
    }

    /// Updates every parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.state.slots[0].len() != store.len() {
            return Err(Error::shape(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        self.state.t += 1;
        let t = self.state.t as i32;
        let c = &self.cfg;
        for (id, g) in store.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            let Some(g) = g else { continue };
            let i = id.index();
            let p = store.get_mut(id);
            let n = p.numel();
            match c.kind {
                OptimizerKind::Sgd => {
                    let v = self.state.slots[0][i].get_or_insert_with(|| Tensor::zeros(p.shape()));
                    for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        let gd = gv.f64() + c.weight_decay * pv.f64();
                        let nv = c.momentum * vv.f64() + gd;
                        *vv = T::of(nv);
                        *pv = T::of(pv.f64() - lr * nv);
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = (c.beta1, c.beta2);
                    let (bc1, bc2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
                    let (first, rest) = self.state.slots.split_at_mut(1);
                    let m = first[0][i].get_or_insert_with(|| Tensor::zeros(p.shape()));
                    let v = rest[0][i].get_or_insert_with(|| Tensor::zeros(p.shape()));
                    let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
                    for j in 0..n {
                        let gd = g.data()[j].f64() + c.weight_decay * pd[j].f64();
                        let mj = b1 * md[j].f64() + (1.0 - b1) * gd;
                        let vj = b2 * vd[j].f64() + (1.0 - b2) * gd * gd;
                        md[j] = T::of(mj);
                        vd[j] = T::of(vj);
                        let upd = lr * (mj / bc1) / ((vj / bc2).sqrt() + c.eps);
                        pd[j] = T::of(pd[j].f64() - upd);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::full(&[1], v)).unwrap();
        s
    }

    #[test]
    fn sgd_momentum_by_hand() {
        let cfg = OptimizerConfig { kind: OptimizerKind::Sgd, lr: 0.1, momentum: 0.9, weight_decay: 0.0, ..Default::default() };
        let mut s = store(1.0);
        let mut o = Optimizer::new(&cfg, 1);
        let g = vec![Some(Tensor::full(&[1], 2.0))];
        o.step(&mut s, &g, 0.1).unwrap();
        assert!((s.iter().next().unwrap().1.data()[0] - 0.8).abs() < 1e-15);
        o.step(&mut s, &g, 0.1).unwrap();
        // v = 0.9 * 2 + 2 = 3.8
        assert!((s.iter().next().unwrap().1.data()[0] - 0.42).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let cfg = OptimizerConfig { kind: OptimizerKind::Adam, lr: 1e-3, weight_decay: 0.0, ..Default::default() };
        let mut s = store(0.5);
        let mut o = Optimizer::new(&cfg, 1);
        o.step(&mut s, &[Some(Tensor::full(&[1], -3.0))], 1e-3).unwrap();
        assert!((s.iter().next().unwrap().1.data()[0] - 0.501).abs() < 1e-9);
    }

    #[test]
    fn missing_gradient_leaves_parameter() {
        let cfg = OptimizerConfig::default();
        let mut s = store(0.5);
        Optimizer::new(&cfg, 1).step(&mut s, &[None], 0.1).unwrap();
        assert_eq!(s.iter().next().unwrap().1.data()[0], 0.5);
    }

    #[test]
    fn poly_decay() {
        let cfg = OptimizerConfig { lr: 1.0, poly_decay: true, poly_power: 1.0, ..Default::default() };
        let o = Optimizer::<f64>::new(&cfg, 0);
        assert_eq!(o.lr_at(0, 10), 1.0);
        assert_eq!(o.lr_at(5, 10), 0.5);
        assert_eq!(Optimizer::<f64>::new(&OptimizerConfig::default(), 0).lr_at(5, 10), 0.04);
    }
}
