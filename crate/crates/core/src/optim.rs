//! Optimizers: plain SGD and AdamW with decoupled weight decay.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Element;

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_weight_decay() -> f64 {
    0.01
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Adamw {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_weight_decay")]
        weight_decay: f64,
    },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adamw {
            beta1: default_beta1(),
            beta2: default_beta2(),
            weight_decay: default_weight_decay(),
        }
    }
}

const ADAM_EPS: f64 = 1e-8;

pub struct Optimizer<T: Element> {
    kind: OptimizerKind,
    lr: f64,
    step_count: usize,
    m: IndexMap<String, Vec<T>>,
    v: IndexMap<String, Vec<T>>,
}

impl<T: Element> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {lr} must be non-negative")));
        }
        Ok(Optimizer { kind, lr, step_count: 0, m: IndexMap::new(), v: IndexMap::new() })
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    /// One update over every parameter that has a gradient, in store
    /// order. Parameters without gradients are untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &IndexMap<String, Vec<T>>,
    ) -> Result<()> {
        self.step_count += 1;
        let lr = T::from_f64(self.lr).unwrap();
        match self.kind {
            OptimizerKind::Sgd => {
                for (name, param) in store.iter_mut() {
                    let Some(g) = grads.get(name) else { continue };
                    for (p, &gv) in param.data.iter_mut().zip(g) {
                        *p = *p - lr * gv;
                    }
                }
            }
            OptimizerKind::Adamw { beta1, beta2, weight_decay } => {
                let b1 = T::from_f64(beta1).unwrap();
                let b2 = T::from_f64(beta2).unwrap();
                let wd = T::from_f64(weight_decay).unwrap();
                let eps = T::from_f64(ADAM_EPS).unwrap();
                let t = self.step_count as i32;
                let c1 = T::one() - T::from_f64(beta1.powi(t)).unwrap();
                let c2 = T::one() - T::from_f64(beta2.powi(t)).unwrap();
                for (name, param) in store.iter_mut() {
                    let Some(g) = grads.get(name) else { continue };
                    let m = self
                        .m
                        .entry(name.to_string())
                        .or_insert_with(|| vec![T::zero(); param.data.len()]);
                    let v = self
                        .v
                        .entry(name.to_string())
                        .or_insert_with(|| vec![T::zero(); param.data.len()]);
                    for i in 0..param.data.len() {
                        let gv = g[i];
                        m[i] = b1 * m[i] + (T::one() - b1) * gv;
                        v[i] = b2 * v[i] + (T::one() - b2) * gv * gv;
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        let p = param.data[i];
                        param.data[i] = p - lr * (m_hat / (v_hat.sqrt() + eps) + wd * p);
                    }
                }
            }
        }
        Ok(())
    }
}
