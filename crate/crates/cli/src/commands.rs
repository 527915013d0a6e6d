use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ders_core::accounting::{count_report, report_csv};
use ders_core::analysis::{cosine_report, delta_stats, delta_stats_csv, heatmap_csv};
use ders_core::compress::{CompressionSpec, Technique};
use ders_core::train::make_task;
use ders_core::upcycle::UpcycleMethod;

use crate::checkpoint::{self, write_atomic, Checkpoint};
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::pipeline::{self, sweep_csv};

#[derive(Debug, Parser)]
#[command(
    name = "ders",
    version,
    about = "Upcycle, train and compress delta-decomposed MoE models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: Opts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train a dense model on the pretraining task.
    PretrainDense,
    /// Convert a dense checkpoint into an MoE checkpoint.
    Upcycle,
    /// Fine-tune a checkpoint; writes the last and best models and a metrics CSV.
    Train,
    /// Compress a trained vanilla-upcycled checkpoint.
    Compress,
    /// Score a checkpoint on the evaluation split.
    Eval,
    /// Parameter and storage accounting.
    ReportParams,
    /// Cosine similarity among the initial FFN and the experts.
    AnalyzeSimilarity,
    /// Grid over sparse rate, rank, drop rate and bit width.
    Sweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Vanilla,
    DersSm,
    DersLm,
}

impl From<Method> for UpcycleMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Vanilla => UpcycleMethod::Vanilla,
            Method::DersSm => UpcycleMethod::DersSm,
            Method::DersLm => UpcycleMethod::DersLm,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    #[default]
    Json,
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct Opts {
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Replaces every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Input checkpoint; defaults to the previous stage's output in the output directory.
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub method: Option<Method>,
    /// Sparse rate when upcycling, drop rate when compressing.
    #[arg(long, global = true)]
    pub drop_rate: Option<f64>,
    #[arg(long, global = true)]
    pub bit_width: Option<u8>,
    #[arg(long, global = true)]
    pub rank: Option<usize>,
    #[arg(long, global = true)]
    pub extended: bool,
    #[arg(long, global = true)]
    pub freeze_shared: bool,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
}

pub const DENSE_FILE: &str = "dense.ders";
pub const MOE_FILE: &str = "moe.ders";
pub const TRAINED_FILE: &str = "trained.ders";
pub const BEST_FILE: &str = "best.ders";
pub const COMPRESSED_FILE: &str = "compressed.ders";

struct Ctx {
    cfg: Option<ExperimentConfig>,
    out: PathBuf,
    opts: Opts,
}

impl Ctx {
    fn cfg(&self) -> CliResult<&ExperimentConfig> {
        self.cfg
            .as_ref()
            .ok_or_else(|| CliError::Config("this subcommand needs --config".into()))
    }

    fn input(&self, default: &str) -> PathBuf {
        self.opts
            .input
            .clone()
            .unwrap_or_else(|| self.out.join(default))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn format(&self) -> Format {
        self.opts.format.unwrap_or_default()
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    write_atomic(path, text.as_bytes())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::Checkpoint(e.to_string()))?;
    s.push('\n');
    write_text(path, &s)
}

pub fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.opts.config {
        Some(p) => Some(ExperimentConfig::load(p)?),
        None => None,
    };
    if let (Some(c), Some(seed)) = (&mut cfg, cli.opts.seed) {
        c.override_seed(seed);
    }
    let out = cli
        .opts
        .out
        .clone()
        .or_else(|| cfg.as_ref().and_then(|c| c.output.dir.clone()))
        .unwrap_or_else(|| PathBuf::from("out"));
    let ctx = Ctx {
        cfg,
        out,
        opts: cli.opts,
    };
    match cli.command {
        Command::PretrainDense => pretrain(&ctx),
        Command::Upcycle => upcycle(&ctx),
        Command::Train => train(&ctx),
        Command::Compress => compress(&ctx),
        Command::Eval => eval(&ctx),
        Command::ReportParams => report_params(&ctx),
        Command::AnalyzeSimilarity => analyze(&ctx),
        Command::Sweep => sweep(&ctx),
    }
}

fn pretrain(ctx: &Ctx) -> CliResult<()> {
    let cfg = ctx.cfg()?;
    let t = pipeline::pretrain_dense(cfg, cfg.output.dtype)?;
    checkpoint::save(&t.last, &ctx.path(DENSE_FILE))?;
    write_text(&ctx.path("pretrain_metrics.csv"), &t.metrics_csv())?;
    println!("wrote {}", ctx.path(DENSE_FILE).display());
    Ok(())
}

fn upcycle(ctx: &Ctx) -> CliResult<()> {
    let cfg = ctx.cfg()?;
    let mut u = cfg.upcycle()?.clone();
    let o = &ctx.opts;
    if let Some(m) = o.method {
        u.method = m.into();
    }
    if let Some(p) = o.drop_rate {
        u.sparse_rate = p;
    }
    if let Some(r) = o.rank {
        u.rank = r;
    }
    if o.extended {
        u.extended = true;
        u.parallel_universal = true;
    }
    if o.freeze_shared {
        u.freeze_shared = true;
    }
    if let Some(s) = o.seed {
        u.seed = s;
    }
    u.validate()?;
    let dense = checkpoint::load(&ctx.input(DENSE_FILE))?;
    let moe = pipeline::upcycle_checkpoint(&dense, &u)?;
    checkpoint::save(&moe, &ctx.path(MOE_FILE))?;
    println!("wrote {}", ctx.path(MOE_FILE).display());
    Ok(())
}

fn train(ctx: &Ctx) -> CliResult<()> {
    let cfg = ctx.cfg()?;
    let input = checkpoint::load(&ctx.input(MOE_FILE))?;
    let t = match pipeline::train_checkpoint(&input, &cfg.task, cfg.train()?) {
        Err(CliError::Aborted(a)) => {
            write_text(
                &ctx.path("metrics.csv"),
                &ders_core::train::metrics_csv(&a.trace),
            )?;
            return Err(CliError::Aborted(a));
        }
        other => other?,
    };
    checkpoint::save(&t.last, &ctx.path(TRAINED_FILE))?;
    checkpoint::save(&t.best, &ctx.path(BEST_FILE))?;
    write_text(&ctx.path("metrics.csv"), &t.metrics_csv())?;
    println!("wrote {}", ctx.path(TRAINED_FILE).display());
    Ok(())
}

fn compression_spec(ctx: &Ctx) -> CliResult<CompressionSpec> {
    let o = &ctx.opts;
    let from_flags = match (o.drop_rate, o.bit_width) {
        (Some(_), Some(_)) => {
            return Err(CliError::Config(
                "--drop-rate and --bit-width are exclusive".into(),
            ))
        }
        (Some(p), None) => Some(Technique::Sparsify { drop_rate: p }),
        (None, Some(k)) => Some(Technique::Quantize { bit_width: k }),
        (None, None) => None,
    };
    let mut spec = match (
        ctx.cfg.as_ref().and_then(|c| c.compress.clone()),
        from_flags,
    ) {
        (Some(s), None) => s,
        (Some(s), Some(t)) => CompressionSpec { technique: t, ..s },
        (None, Some(t)) => CompressionSpec {
            technique: t,
            extended: false,
            seed: o.seed.ok_or_else(|| {
                CliError::Config("compression without a [compress] section needs --seed".into())
            })?,
            mask: Default::default(),
        },
        (None, None) => return Err(CliError::Config("missing [compress] section".into())),
    };
    if o.extended {
        spec.extended = true;
    }
    if let Some(s) = o.seed {
        spec.seed = s;
    }
    spec.validate()?;
    Ok(spec)
}

fn compress(ctx: &Ctx) -> CliResult<()> {
    let spec = compression_spec(ctx)?;
    let input = checkpoint::load(&ctx.input(TRAINED_FILE))?;
    let (c, report) = pipeline::compress_checkpoint(&input, &spec)?;
    checkpoint::save(&c, &ctx.path(COMPRESSED_FILE))?;
    write_json(&ctx.path("compression_report.json"), &report)?;
    println!("wrote {}", ctx.path(COMPRESSED_FILE).display());
    Ok(())
}

fn task_for(ctx: &Ctx, ckpt: &Checkpoint) -> CliResult<ders_core::train::TaskSpec> {
    if let Some(c) = &ctx.cfg {
        return Ok(c.task.clone());
    }
    ckpt.meta
        .task
        .clone()
        .ok_or_else(|| CliError::Config("checkpoint records no task; pass --config".into()))
}

fn eval(ctx: &Ctx) -> CliResult<()> {
    let path = ctx.input(TRAINED_FILE);
    let ckpt = checkpoint::load(&path)?;
    let task = make_task(&task_for(ctx, &ckpt)?)?;
    let r = pipeline::eval_model(&ckpt.model, &task)?;
    match ctx.format() {
        Format::Json => write_json(&ctx.path("eval.json"), &r)?,
        Format::Csv => write_text(
            &ctx.path("eval.csv"),
            &format!(
                "metric,score,loss,n\n{},{},{},{}\n",
                r.metric, r.score, r.loss, r.n
            ),
        )?,
    }
    println!("{} {} ({}) = {:.4}", path.display(), r.metric, r.n, r.score);
    Ok(())
}

fn report_params(ctx: &Ctx) -> CliResult<()> {
    let ckpt = checkpoint::load(&ctx.input(TRAINED_FILE))?;
    let r = count_report(&ckpt.model);
    match ctx.format() {
        Format::Json => write_json(&ctx.path("params.json"), &r)?,
        Format::Csv => write_text(&ctx.path("params.csv"), &report_csv(&r))?,
    }
    println!(
        "trainable {} stored {} bits {} added {}",
        r.totals.trainable_values,
        r.totals.stored_values,
        r.totals.stored_bits,
        r.added_values_only
    );
    Ok(())
}

fn analyze(ctx: &Ctx) -> CliResult<()> {
    let ckpt = checkpoint::load(&ctx.input(TRAINED_FILE))?;
    let r = cosine_report(&ckpt.model)?;
    match ctx.format() {
        Format::Json => write_json(&ctx.path("similarity.json"), &r)?,
        Format::Csv => write_text(&ctx.path("similarity.csv"), &heatmap_csv(&r))?,
    }
    write_text(
        &ctx.path("delta_stats.csv"),
        &delta_stats_csv(&delta_stats(&ckpt.model)?),
    )?;
    for l in &r.layers {
        println!(
            "block {} min similarity {:?}",
            l.block,
            l.min_off_diagonal()
        );
    }
    Ok(())
}

fn sweep(ctx: &Ctx) -> CliResult<()> {
    let cfg = ctx.cfg()?;
    let dense = checkpoint::load(&ctx.input(DENSE_FILE))?;
    let t = pipeline::sweep(&dense, cfg, cfg.sweep()?)?;
    for (name, rows) in [
        ("sweep_sparse_rate", &t.sparse_rate),
        ("sweep_rank", &t.rank),
        ("sweep_compress", &t.compress),
    ] {
        match ctx.format() {
            Format::Csv => write_text(&ctx.path(&format!("{name}.csv")), &sweep_csv(rows))?,
            Format::Json => write_json(&ctx.path(&format!("{name}.json")), rows)?,
        }
    }
    println!("wrote sweep tables to {}", ctx.out.display());
    Ok(())
}
