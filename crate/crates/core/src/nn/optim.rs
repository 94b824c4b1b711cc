//! Adam optimizer over a [`ParamBank`].

use super::graph::{Gradients, Graph, Mat};
use super::layers::{BoundParams, ParamBank};

/// Adam with bias correction. Default betas (0.9, 0.999), eps 1e-8.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Apply one update. `grads` must be aligned with the bank's tensor order.
    pub fn step(&mut self, bank: &mut ParamBank, grads: &[Mat]) {
        assert_eq!(grads.len(), bank.len(), "gradient/parameter count mismatch");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Mat::zeros(g.dim())).collect();
            self.v = grads.iter().map(|g| Mat::zeros(g.dim())).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let p = bank.tensor_mut(i);
            ndarray::Zip::from(&mut *p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// Pull gradients for every bank parameter out of a backward pass, in bank
/// order (zeros for parameters the loss does not reach).
pub fn collect_grads(graph: &Graph, grads: &Gradients, bound: &BoundParams) -> Vec<Mat> {
    bound.ids().iter().map(|&id| grads.wrt(graph, id)).collect()
}
