//! Training on synthetic tasks: exact gradients, optimizers and the train loop.

mod grad;
mod optim;
mod params;
mod task;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{DersError, Result};
use crate::moe::{model_forward, Model};
use crate::numkern::RngStream;

pub use grad::{
    cross_entropy, loss_and_grads, loss_only, mse, selected_experts, task_loss, LossBreakdown,
};
pub use optim::{Optimizer, OptimizerKind, Schedule};
pub use params::{
    param_ids, param_value, set_param_value, trainable_count, visit_params, visit_params_mut,
    DeltaPart, GradientSet, ParamClass, ParamId,
};
pub use task::{make_task, Dataset, SyntheticTask, Targets, TaskSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "default_aux")]
    pub aux_loss_coeff: f64,
    /// Evaluate every this many steps; the last step is always evaluated.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    pub seed: u64,
}

fn default_aux() -> f64 {
    0.01
}

fn default_eval_every() -> usize {
    50
}

impl TrainConfig {
    pub fn new(steps: usize, batch_size: usize, lr: f64, seed: u64) -> Self {
        Self {
            steps,
            batch_size,
            lr,
            optimizer: OptimizerKind::default(),
            schedule: Schedule::default(),
            aux_loss_coeff: default_aux(),
            eval_every: default_eval_every(),
            seed,
        }
    }

    /// A zero learning rate is accepted so that a run can be checked for side effects.
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(DersError::Config(
                "steps, batch_size and eval_every must be at least 1".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(DersError::Config(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if !(self.aux_loss_coeff.is_finite() && self.aux_loss_coeff >= 0.0) {
            return Err(DersError::Config(format!(
                "aux_loss_coeff must be >= 0, got {}",
                self.aux_loss_coeff
            )));
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                return Err(DersError::Config(
                    "adam needs betas in [0, 1) and eps > 0".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Evaluation summary. `score` is higher-is-better on a 0..100 scale:
/// accuracy in percent for classification, `100 * R^2` for regression.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub score: f64,
    pub loss: f64,
    pub n: usize,
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<EvalResult> {
    let pred = model_forward(model, &data.x)?;
    let loss = task_loss(&pred, &data.targets)?;
    let score = match &data.targets {
        Targets::Regression(y) => {
            let cols = y.cols();
            let mut mean = vec![0.0; cols];
            for r in 0..y.rows() {
                for (m, v) in mean.iter_mut().zip(y.row(r)) {
                    *m += v / y.rows() as f64;
                }
            }
            let ss_tot: f64 = (0..y.rows())
                .flat_map(|r| {
                    y.row(r)
                        .iter()
                        .zip(&mean)
                        .map(|(v, m)| (v - m) * (v - m))
                        .collect::<Vec<_>>()
                })
                .sum();
            let ss_res = loss * y.len() as f64;
            if ss_tot > 0.0 {
                100.0 * (1.0 - ss_res / ss_tot)
            } else {
                0.0
            }
        }
        Targets::Classes(labels) => {
            let hits = labels
                .iter()
                .enumerate()
                .filter(|(r, &c)| argmax(pred.row(*r)) == c)
                .count();
            100.0 * hits as f64 / labels.len() as f64
        }
    };
    Ok(EvalResult {
        score,
        loss,
        n: data.len(),
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub aux_loss: f64,
    pub eval_metric: Option<f64>,
}

pub fn metrics_csv(trace: &[MetricRow]) -> String {
    let mut s = String::from("step,loss,aux_loss,eval_metric\n");
    for r in trace {
        let e = r.eval_metric.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.aux_loss, e));
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    pub best: Model,
    pub best_step: usize,
    pub best_metric: f64,
    pub trace: Vec<MetricRow>,
}

/// Training stopped early; carries the trace recorded so far.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainAbort {
    pub error: DersError,
    pub trace: Vec<MetricRow>,
}

impl fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "training aborted after {} steps: {}",
            self.trace.len(),
            self.error
        )
    }
}

impl std::error::Error for TrainAbort {}

impl From<TrainAbort> for DersError {
    fn from(a: TrainAbort) -> Self {
        a.error
    }
}

const BATCH_STREAM: u64 = 0xBA7C;

/// Shuffled passes over the training set, cut into batches.
struct Batches {
    rng: RngStream,
    order: Vec<usize>,
    pos: usize,
}

impl Batches {
    fn new(n: usize, seed: u64) -> Self {
        let mut b = Self {
            rng: RngStream::scoped(seed, &[BATCH_STREAM]),
            order: (0..n).collect(),
            pos: n,
        };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        for i in (1..self.order.len()).rev() {
            let j = self.rng.below(i as u64 + 1) as usize;
            self.order.swap(i, j);
        }
        self.pos = 0;
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            let take = (size - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

pub fn train_loop(
    model: Model,
    task: &SyntheticTask,
    cfg: &TrainConfig,
) -> std::result::Result<TrainOutcome, TrainAbort> {
    let abort = |error: DersError, trace: &[MetricRow]| TrainAbort {
        error,
        trace: trace.to_vec(),
    };
    cfg.validate().map_err(|e| abort(e, &[]))?;
    model.validate().map_err(|e| abort(e, &[]))?;
    if task.train.is_empty() || task.eval.is_empty() {
        return Err(abort(
            DersError::Config("task has an empty split".into()),
            &[],
        ));
    }
    let mut model = model;
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut batches = Batches::new(task.train.len(), cfg.seed);
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut best = model.clone();
    let mut best_step = 0;
    let mut best_metric = f64::NEG_INFINITY;
    for step in 0..cfg.steps {
        let rows = batches.next(cfg.batch_size);
        let batch = task.train.select(&rows);
        let (loss, grads) = loss_and_grads(&model, &batch.x, &batch.targets, cfg.aux_loss_coeff)
            .map_err(|e| abort(e, &trace))?;
        if !loss.total.is_finite() {
            let e = DersError::Numeric {
                location: format!("step {step}"),
                detail: "non-finite loss".into(),
            };
            return Err(abort(e, &trace));
        }
        opt.apply(
            &mut model,
            &grads,
            cfg.lr * cfg.schedule.factor(step, cfg.steps),
        );
        let done = step + 1;
        let eval_metric = if done % cfg.eval_every == 0 || done == cfg.steps {
            let r = evaluate(&model, &task.eval).map_err(|e| abort(e, &trace))?;
            if r.score > best_metric {
                best_metric = r.score;
                best_step = done;
                best = model.clone();
            }
            Some(r.score)
        } else {
            None
        };
        trace.push(MetricRow {
            step: done,
            loss: loss.total,
            aux_loss: loss.aux,
            eval_metric,
        });
    }
    Ok(TrainOutcome {
        model,
        best,
        best_step,
        best_metric,
        trace,
    })
}
