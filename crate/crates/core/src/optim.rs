//! Adam over named parameters.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

/// Adds `scale * src` into `dst`, key by key.
pub fn accumulate(dst: &mut BTreeMap<String, Tensor>, src: BTreeMap<String, Tensor>, scale: f64) {
    for (k, g) in src {
        match dst.get_mut(&k) {
            Some(d) => d.scaled_add(scale, &g),
            None => {
                dst.insert(k, g * scale);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter of `p` (visited under `prefix`) that has an
    /// entry in `grads`. Others are left untouched.
    pub fn step<P: ParamSet + ?Sized>(
        &mut self,
        p: &mut P,
        prefix: &str,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        if grads.values().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let lr = self.lr;
        let eps = self.eps;
        let (ms, vs) = (&mut self.m, &mut self.v);
        p.visit_mut(prefix, &mut |name, w| {
            let Some(g) = grads.get(name) else { return };
            let m = ms.entry(name.to_string()).or_insert_with(|| Tensor::zeros(w.raw_dim()));
            let v = vs.entry(name.to_string()).or_insert_with(|| Tensor::zeros(w.raw_dim()));
            ndarray::Zip::from(w).and(m).and(v).and(g).for_each(|w, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        });
        Ok(())
    }
}
