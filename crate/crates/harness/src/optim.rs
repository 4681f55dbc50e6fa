//! First-order optimizers over a [`ParamSet`].

use fairmoe_core::tensor::ParamSet;

use crate::config::OptimizerKind;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    /// Per-parameter learning rate, in declaration order.
    lrs: Vec<f64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    /// `lr_of(path)` gives each parameter's learning rate.
    pub fn new(kind: OptimizerKind, params: &ParamSet, lr_of: impl Fn(&str) -> f64) -> Self {
        let lrs = params.iter().map(|(name, _)| lr_of(name)).collect();
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            kind,
            lrs,
            m: zeros(),
            v: zeros(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the gradients currently held by the leaves.
    /// Leaves without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &ParamSet) {
        self.steps += 1;
        let t = self.steps as f64;
        let (c1, c2) = (1.0 - BETA1.powf(t), 1.0 - BETA2.powf(t));
        for (i, (_, p)) in params.iter().enumerate() {
            let grad = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
            let lr = self.lrs[i];
            let mut data = p.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in data.iter_mut().zip(&grad) {
                        *w -= lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (j, g) in grad.iter().enumerate() {
                        m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
                        v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
                        data[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}
