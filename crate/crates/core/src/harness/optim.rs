use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    ids: Vec<ParamId>,
}

impl Adam {
    pub fn new(ids: Vec<ParamId>, store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |id: &ParamId| vec![0.0; store.get(*id).numel()];
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
            ids,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// `grads[i]` belongs to the `i`-th managed parameter; `None` is treated as
    /// a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<&Tensor>]) -> Result<()> {
        if grads.len() != self.ids.len() {
            return Err(Error::Numeric(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                self.ids.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, &id) in self.ids.iter().enumerate() {
            let Some(g) = grads[i] else {
                // moments decay toward zero exactly as with a zero gradient
                for (m, v) in self.m[i].iter_mut().zip(self.v[i].iter_mut()) {
                    *m *= self.beta1;
                    *v *= self.beta2;
                }
                let mut w = store.get(id).to_vec();
                for ((w, m), v) in w.iter_mut().zip(&self.m[i]).zip(&self.v[i]) {
                    *w -= self.lr * (m / c1) / ((v / c2).sqrt() + self.eps);
                }
                store.set_data(id, w)?;
                continue;
            };
            let mut w = store.get(id).to_vec();
            for (j, &gj) in g.data().iter().enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gj;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gj * gj;
                w[j] -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
            store.set_data(id, w)?;
        }
        Ok(())
    }
}
