use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{visit_params_mut, GradientSet, ParamId};
use crate::moe::Model;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    Cosine,
    Linear,
}

impl Schedule {
    /// Learning-rate multiplier for `step` out of `total` (0-based).
    pub fn factor(self, step: usize, total: usize) -> f64 {
        let t = if total <= 1 {
            0.0
        } else {
            step as f64 / total as f64
        };
        match self {
            Schedule::Constant => 1.0,
            Schedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * t).cos()),
            Schedule::Linear => 1.0 - t,
        }
    }
}

/// Optimizer state keyed by parameter identity.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr`. A zero rate leaves every parameter untouched.
    pub fn apply(&mut self, model: &mut Model, grads: &GradientSet, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let kind = self.kind;
        let moments = &mut self.moments;
        visit_params_mut(model, &mut |id, w| {
            let Some(g) = grads.get(&id) else { return };
            match kind {
                OptimizerKind::Sgd => {
                    if lr == 0.0 {
                        return;
                    }
                    for (wi, gi) in w.iter_mut().zip(g) {
                        *wi -= lr * gi;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (m, v) = moments
                        .entry(id)
                        .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for i in 0..w.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        if lr != 0.0 {
                            w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                        }
                    }
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules() {
        assert_eq!(Schedule::Constant.factor(5, 10), 1.0);
        assert_eq!(Schedule::Cosine.factor(0, 10), 1.0);
        assert!((Schedule::Cosine.factor(5, 10) - 0.5).abs() < 1e-12);
        assert!((Schedule::Linear.factor(5, 10) - 0.5).abs() < 1e-12);
        assert!(Schedule::Linear.factor(9, 10) > 0.0);
    }
}
