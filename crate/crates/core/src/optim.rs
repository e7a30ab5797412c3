//! First-order optimisers over flat parameter blocks.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Stateful optimiser. Blocks must be passed in the same order on every step.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient block count");
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    p.iter_mut().zip(g.iter()).for_each(|(pi, gi)| *pi -= lr * gi);
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.v = self.m.clone();
                }
                self.t += 1;
                let c1 = 1.0 - BETA1.powi(self.t as i32);
                let c2 = 1.0 - BETA2.powi(self.t as i32);
                for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for i in 0..p.len() {
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        p[i] -= lr * mhat / (vhat.sqrt() + EPS);
                    }
                }
            }
        }
    }
}
