//! AdamW with decoupled weight decay.
//!
//! The optimizer only ever touches parameters it receives gradients for;
//! everything else in the store stays bit-identical, which is how stage
//! freezing is enforced.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::mathfn;
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    state: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update using `grads` (name -> flat gradient). Names
    /// absent from `grads` are untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - mathfn::powi(self.beta1, t);
        let bc2 = 1.0 - mathfn::powi(self.beta2, t);
        for (name, grad) in grads {
            let param = store.get_mut(name);
            assert_eq!(param.len(), grad.len(), "gradient size mismatch for {name}");
            let (m, v) = self
                .state
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let p = &mut param.data[i];
                *p -= self.lr * (m_hat / (mathfn::sqrt(v_hat) + self.eps) + self.weight_decay * *p);
            }
        }
    }
}
