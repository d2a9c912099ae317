use crate::error::{NnError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub trait Optimizer {
    /// Apply one update. `grads` is aligned with the set's ids; `None`
    /// entries (buffers, untouched params) are skipped.
    fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) -> Result<()>;
}

fn check_attachable(params: &ParamSet) -> Result<()> {
    if params.is_frozen() {
        Err(NnError::FrozenOptimizer)
    } else {
        Ok(())
    }
}

/// Stochastic gradient descent with optional heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(params: &ParamSet, lr: f64, momentum: f64) -> Result<Self> {
        check_attachable(params)?;
        Ok(Self {
            lr,
            momentum,
            velocity: vec![None; params.len()],
        })
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) -> Result<()> {
        check_attachable(params)?;
        let ids: Vec<_> = params.ids().collect();
        for (i, (id, g)) in ids.into_iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if !params.is_trainable(id) {
                continue;
            }
            let update = if self.momentum > 0.0 {
                let v = self.velocity[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
                for (vv, gv) in v.data_mut().iter_mut().zip(g.data()) {
                    *vv = self.momentum * *vv + gv;
                }
                v.clone()
            } else {
                g.clone()
            };
            let p = params.get_mut(id)?;
            for (pv, u) in p.data_mut().iter_mut().zip(update.data()) {
                *pv -= self.lr * u;
            }
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Result<Self> {
        check_attachable(params)?;
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![None; params.len()],
            v: vec![None; params.len()],
        })
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) -> Result<()> {
        check_attachable(params)?;
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = params.ids().collect();
        for (i, (id, g)) in ids.into_iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if !params.is_trainable(id) {
                continue;
            }
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = params.get_mut(id)?;
            for (((pv, mv), vv), gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv -= self.lr * (*mv / bc1) / ((*vv / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
