use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamStore};
use super::{KernelError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let m: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Self { cfg, t: 0, v: m.clone(), m }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Descends along `grads`. Parameters without a gradient are untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) -> Result<()> {
        if !grads.is_finite() {
            return Err(KernelError::NonFinite { op: "adam" });
        }
        self.t += 1;
        if self.cfg.lr == 0.0 {
            return Ok(());
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                p[k] -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Plain gradient descent.
#[derive(Clone, Copy, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step(&self, store: &mut ParamStore, grads: &Grads) -> Result<()> {
        if !grads.is_finite() {
            return Err(KernelError::NonFinite { op: "sgd" });
        }
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            for (p, gv) in store.get_mut(id).data_mut().iter_mut().zip(g) {
                *p -= self.lr * gv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndkernel::{Tape, Tensor};

    #[test]
    fn adam_minimises_quadratic() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row(vec![3.0, -2.0])).unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &store);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let v = store.bind(&mut tape, w);
            let sq = tape.mul(v, v).unwrap();
            let l = tape.sum(sq).unwrap();
            tape.backward(l).unwrap();
            let mut g = Grads::zeros_like(&store);
            g.add_tape(&tape);
            opt.step(&mut store, &g).unwrap();
        }
        assert!(store.get(w).data().iter().all(|v| v.abs() < 1e-2));
    }
}
