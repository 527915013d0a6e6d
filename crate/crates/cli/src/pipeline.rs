//! Pipeline stages shared by the command line and the tests.

use ders_core::accounting::count_report;
use ders_core::compress::{ders_compress, CompressionReport, CompressionSpec, Technique};
use ders_core::moe::Model;
use ders_core::train::{
    evaluate, make_task, metrics_csv, train_loop, EvalResult, MetricRow, SyntheticTask, TaskSpec,
    TrainConfig,
};
use ders_core::upcycle::{upcycle, UpcycleConfig, UpcycleMethod};
use serde::Serialize;

use crate::checkpoint::{encode, sha256_hex, Checkpoint, CheckpointMeta, Dtype};
use crate::config::{ExperimentConfig, SweepSection};
use crate::error::CliResult;

pub struct Trained {
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub trace: Vec<MetricRow>,
}

impl Trained {
    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.trace)
    }
}

fn checkpoint_hash(c: &Checkpoint) -> CliResult<String> {
    Ok(sha256_hex(&encode(c)?))
}

pub fn pretrain_dense(cfg: &ExperimentConfig, dtype: Dtype) -> CliResult<Trained> {
    let dims = cfg.dims()?;
    let m = cfg.model()?;
    let tc = cfg.pretrain()?;
    let task = make_task(cfg.pretrain_task())?;
    let model = Model::dense(dims, m.activation, m.seed);
    let out = train_loop(model, &task, tc)?;
    let meta = |stage: &str| CheckpointMeta {
        stage: stage.into(),
        seeds: [
            ("model_init".to_string(), m.seed),
            ("pretrain".to_string(), tc.seed),
            ("pretrain_task".to_string(), cfg.pretrain_task().seed()),
        ]
        .into_iter()
        .collect(),
        task: Some(cfg.pretrain_task().clone()),
        ancestor_sha256: None,
    };
    Ok(Trained {
        last: Checkpoint {
            meta: meta("pretrain-dense"),
            dtype,
            model: out.model,
        },
        best: Checkpoint {
            meta: meta("pretrain-dense/best"),
            dtype,
            model: out.best,
        },
        trace: out.trace,
    })
}

pub fn upcycle_checkpoint(dense: &Checkpoint, ucfg: &UpcycleConfig) -> CliResult<Checkpoint> {
    let model = upcycle(&dense.model, ucfg)?;
    let mut meta = dense.meta.clone();
    meta.stage = format!("upcycle/{}", ucfg.method.as_str());
    meta.seeds.insert("upcycle".into(), ucfg.seed);
    meta.ancestor_sha256 = Some(checkpoint_hash(dense)?);
    Ok(Checkpoint {
        meta,
        dtype: dense.dtype,
        model,
    })
}

pub fn train_checkpoint(
    input: &Checkpoint,
    task_spec: &TaskSpec,
    tc: &TrainConfig,
) -> CliResult<Trained> {
    let task = make_task(task_spec)?;
    let out = train_loop(input.model.clone(), &task, tc)?;
    let ancestor = checkpoint_hash(input)?;
    let meta = |stage: &str| {
        let mut m = input.meta.clone();
        m.stage = stage.into();
        m.seeds.insert("train".into(), tc.seed);
        m.seeds.insert("task".into(), task_spec.seed());
        m.task = Some(task_spec.clone());
        m.ancestor_sha256 = Some(ancestor.clone());
        m
    };
    Ok(Trained {
        last: Checkpoint {
            meta: meta("train"),
            dtype: input.dtype,
            model: out.model,
        },
        best: Checkpoint {
            meta: meta("train/best"),
            dtype: input.dtype,
            model: out.best,
        },
        trace: out.trace,
    })
}

pub fn compress_checkpoint(
    input: &Checkpoint,
    spec: &CompressionSpec,
) -> CliResult<(Checkpoint, CompressionReport)> {
    let (model, report) = ders_compress(&input.model, spec)?;
    let mut meta = input.meta.clone();
    meta.stage = "compress".into();
    meta.seeds.insert("compress".into(), spec.seed);
    meta.ancestor_sha256 = Some(checkpoint_hash(input)?);
    Ok((
        Checkpoint {
            meta,
            dtype: input.dtype,
            model,
        },
        report,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub metric: &'static str,
    pub score: f64,
    pub loss: f64,
    pub n: usize,
}

pub fn eval_model(model: &Model, task: &SyntheticTask) -> CliResult<EvalReport> {
    let r: EvalResult = evaluate(model, &task.eval)?;
    let metric = match task.spec {
        TaskSpec::ClusterRegression { .. } => "r2_percent",
        TaskSpec::ModularClassification { .. } => "accuracy_percent",
    };
    Ok(EvalReport {
        metric,
        score: r.score,
        loss: r.loss,
        n: r.n,
    })
}

/// One row of a sweep table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub setting: String,
    pub value: f64,
    pub score: f64,
    pub delta_vs_reference: f64,
    pub added_values: i64,
    pub stored_bits: u64,
}

pub struct SweepTables {
    pub sparse_rate: Vec<SweepRow>,
    pub rank: Vec<SweepRow>,
    pub compress: Vec<SweepRow>,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("setting,value,score,delta_vs_reference,added_values,stored_bits\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.setting, r.value, r.score, r.delta_vs_reference, r.added_values, r.stored_bits
        ));
    }
    s
}

/// Upcycles the dense checkpoint with each sweep setting, trains with the same
/// budget, and compresses the trained vanilla model at each drop rate and bit width.
/// Each table's reference is the vanilla-upcycled model after training.
pub fn sweep(
    dense: &Checkpoint,
    cfg: &ExperimentConfig,
    grid: &SweepSection,
) -> CliResult<SweepTables> {
    let base_u = cfg.upcycle()?;
    let tc = cfg.train()?;
    let task = make_task(&cfg.task)?;
    let run = |u: &UpcycleConfig| -> CliResult<(Model, f64)> {
        let moe = upcycle(&dense.model, u)?;
        let out = train_loop(moe, &task, tc)?;
        let score = eval_model(&out.model, &task)?.score;
        Ok((out.model, score))
    };
    let mut vanilla_cfg = base_u.clone();
    vanilla_cfg.method = UpcycleMethod::Vanilla;
    vanilla_cfg.extended = false;
    let (vanilla, reference) = run(&vanilla_cfg)?;
    let row = |setting: &str, value: f64, model: &Model, score: f64| {
        let r = count_report(model);
        SweepRow {
            setting: setting.into(),
            value,
            score,
            delta_vs_reference: score - reference,
            added_values: r.added_values_only,
            stored_bits: r.totals.stored_bits,
        }
    };
    let mut sparse_rate = vec![row("vanilla", 0.0, &vanilla, reference)];
    for &p in &grid.sparse_rates {
        let mut u = base_u.clone();
        u.method = UpcycleMethod::DersSm;
        u.sparse_rate = p;
        let (m, s) = run(&u)?;
        sparse_rate.push(row("ders-sm", p, &m, s));
    }
    let mut rank = vec![row("vanilla", 0.0, &vanilla, reference)];
    for &r in &grid.ranks {
        let mut u = base_u.clone();
        u.method = UpcycleMethod::DersLm;
        u.rank = r;
        let (m, s) = run(&u)?;
        rank.push(row("ders-lm", r as f64, &m, s));
    }
    let mut compress = vec![row("uncompressed", 0.0, &vanilla, reference)];
    let base_spec = cfg.compress.clone().unwrap_or(CompressionSpec {
        technique: Technique::Dense,
        extended: false,
        seed: tc.seed,
        mask: Default::default(),
    });
    let techniques = grid
        .drop_rates
        .iter()
        .map(|&p| ("sparsify", p, Technique::Sparsify { drop_rate: p }))
        .chain(grid.bit_widths.iter().map(|&k| {
            (
                "quantize",
                f64::from(k),
                Technique::Quantize { bit_width: k },
            )
        }));
    for (name, value, technique) in techniques {
        let spec = CompressionSpec {
            technique,
            ..base_spec.clone()
        };
        let (m, _) = ders_compress(&vanilla, &spec)?;
        let s = eval_model(&m, &task)?.score;
        compress.push(row(name, value, &m, s));
    }
    Ok(SweepTables {
        sparse_rate,
        rank,
        compress,
    })
}
