//! Adam with bias correction.

use crate::autograd::{Grads, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter, kept in f64.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<F: Real>(store: &ParamStore<F>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `vars` are the parameter leaves of the forward
    /// pass, in store order; their gradients are consumed from `grads`.
    pub fn step<F: Real>(&mut self, store: &mut ParamStore<F>, vars: &[Var<F>], grads: &mut Grads<F>) -> Result<()> {
        if vars.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, store has {}, forward bound {}",
                self.m.len(),
                store.len(),
                vars.len()
            )));
        }
        let taken = vars
            .iter()
            .enumerate()
            .map(|(i, v)| {
                grads.take(v).ok_or_else(|| {
                    Error::Contract(format!("no gradient for parameter `{}`", store.name(ParamId(i))))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, g) in taken.into_iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(ParamId(i));
            for (((w, g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let g = g.widen();
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let update = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                *w = F::narrow(w.widen() - update);
            }
        }
        Ok(())
    }
}
