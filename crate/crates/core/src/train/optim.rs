//! SGD with Nesterov momentum and Adam, operating on [`ParamSet`]s.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nets::ParamSet;
use crate::tensor::Tensor;

pub type Grads = BTreeMap<String, Tensor<f32>>;

fn check_grads(params: &ParamSet, grads: &Grads) -> Result<()> {
    if grads.len() != params.len()
        || params
            .iter()
            .any(|(k, t)| grads.get(k).map(|g| g.shape()) != Some(t.shape()))
    {
        return Err(Error::Shape("gradients do not match the parameter layout".into()));
    }
    if let Some((k, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::Numeric {
            term: format!("gradient of {k}"),
        });
    }
    Ok(())
}

/// `v ← μ·v + g`, `θ ← θ − lr·(g + μ·v)` (Nesterov) or `θ ← θ − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f32,
    pub nesterov: bool,
    pub velocity: ParamSet,
    pub steps: u64,
}

impl Sgd {
    pub fn new(params: &ParamSet, momentum: f32, nesterov: bool) -> Self {
        Sgd {
            momentum,
            nesterov,
            velocity: params.map(|_| 0.0),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads, lr: f32) -> Result<()> {
        check_grads(params, grads)?;
        let mu = self.momentum;
        for (k, p) in params.iter_mut() {
            let g = grads[k].data();
            let v = self.velocity.get_mut(k).expect("velocity layout").data_mut();
            for ((p, v), &g) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *v = mu * *v + g;
                let d = if self.nesterov { g + mu * *v } else { *v };
                *p -= lr * d;
            }
        }
        self.steps += 1;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub m: ParamSet,
    pub v: ParamSet,
    pub steps: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f32, betas: [f32; 2]) -> Self {
        Adam {
            lr,
            beta1: betas[0],
            beta2: betas[1],
            eps: 1e-8,
            m: params.map(|_| 0.0),
            v: params.map(|_| 0.0),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) -> Result<()> {
        check_grads(params, grads)?;
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (k, p) in params.iter_mut() {
            let g = grads[k].data();
            let m = self.m.get_mut(k).expect("moment layout").data_mut();
            let v = self.v.get_mut(k).expect("moment layout").data_mut();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p.data_mut()[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
