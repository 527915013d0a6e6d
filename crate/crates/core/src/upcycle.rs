//! Turning a dense model into an MoE model.
//!
//! Vanilla upcycling replicates the FFN into `N` experts. The delta-based
//! variants keep one shared FFN (initialized from the dense one) and give each
//! expert a zero-initialized sparse or low-rank delta.

use serde::{Deserialize, Serialize};

use crate::deltas::{
    default_lowrank_init_scale, init_lowrank_trainable, init_sparse_trainable, kept_count,
    DeltaWeight, ExpertGroup,
};
use crate::error::{DersError, Result};
use crate::moe::{
    zero_dense_deltas, BaseRole, Block, Ffn, FfnMatrix, LayerOrigin, MoELayer, Model, Router,
    Universal,
};
use crate::numkern::{Matrix, RngStream};

const ROUTER_STREAM: u64 = 0x2007E;
const DELTA_STREAM: u64 = 0xDE17A;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpcycleMethod {
    #[default]
    Vanilla,
    DersSm,
    DersLm,
}

impl UpcycleMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            UpcycleMethod::Vanilla => "vanilla",
            UpcycleMethod::DersSm => "ders-sm",
            UpcycleMethod::DersLm => "ders-lm",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerPattern {
    #[default]
    EveryLayer,
    /// Blocks 0, 2, 4, ...
    EveryOtherLayer,
}

impl LayerPattern {
    pub fn selects(self, block: usize) -> bool {
        match self {
            LayerPattern::EveryLayer => true,
            LayerPattern::EveryOtherLayer => block % 2 == 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpcycleConfig {
    pub n_experts: usize,
    pub topk_count: usize,
    #[serde(default)]
    pub sparse_rate: f64,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default)]
    pub method: UpcycleMethod,
    #[serde(default)]
    pub layer_pattern: LayerPattern,
    #[serde(default)]
    pub parallel_universal: bool,
    /// Folds the universal FFN into the expert groups (delta-based methods only).
    #[serde(default)]
    pub extended: bool,
    #[serde(default)]
    pub freeze_shared: bool,
    pub seed: u64,
    /// Bound of the uniform init for low-rank `a` factors; `1/sqrt(rows)` when unset.
    #[serde(default)]
    pub lowrank_init_scale: Option<f64>,
}

fn default_rank() -> usize {
    4
}

impl UpcycleConfig {
    pub fn new(method: UpcycleMethod, n_experts: usize, topk_count: usize, seed: u64) -> Self {
        Self {
            n_experts,
            topk_count,
            sparse_rate: 0.0,
            rank: default_rank(),
            method,
            layer_pattern: LayerPattern::EveryLayer,
            parallel_universal: false,
            extended: false,
            freeze_shared: false,
            seed,
            lowrank_init_scale: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DersError::Config(m));
        if self.n_experts == 0 {
            return bad("n_experts must be at least 1".into());
        }
        if self.topk_count == 0 || self.topk_count > self.n_experts {
            return bad(format!(
                "topk_count {} outside [1, n_experts = {}]",
                self.topk_count, self.n_experts
            ));
        }
        if !(0.0..1.0).contains(&self.sparse_rate) {
            return bad(format!("sparse_rate {} outside [0, 1)", self.sparse_rate));
        }
        if self.rank == 0 {
            return bad("rank must be at least 1".into());
        }
        if self.extended && !self.parallel_universal {
            return bad("extended requires parallel_universal".into());
        }
        if let Some(s) = self.lowrank_init_scale {
            if !(s.is_finite() && s > 0.0) {
                return bad(format!("lowrank_init_scale {s} must be positive"));
            }
        }
        Ok(())
    }
}

/// Dispatches on `cfg.method`.
pub fn upcycle(dense: &Model, cfg: &UpcycleConfig) -> Result<Model> {
    match cfg.method {
        UpcycleMethod::Vanilla => vanilla_upcycle(dense, cfg),
        UpcycleMethod::DersSm => ders_sm_upcycle(dense, cfg),
        UpcycleMethod::DersLm => ders_lm_upcycle(dense, cfg),
    }
}

pub fn vanilla_upcycle(dense: &Model, cfg: &UpcycleConfig) -> Result<Model> {
    expect_method(cfg, UpcycleMethod::Vanilla)?;
    build(dense, cfg, |layer, f, cfg| {
        let n = cfg.n_experts;
        Ok(MoELayer {
            router: init_router(f.w_in.rows(), cfg, layer)?,
            w_in: ExpertGroup::new(f.w_in.clone(), zero_dense_deltas(n, f.w_in.shape()))?,
            w_out: ExpertGroup::new(f.w_out.clone(), zero_dense_deltas(n, f.w_out.shape()))?,
            activation: f.activation,
            base_role: BaseRole::InitRecord,
            universal: if cfg.parallel_universal {
                Universal::Parallel(f.clone())
            } else {
                Universal::None
            },
            origin: LayerOrigin::Vanilla,
            init_record: None,
        })
    })
}

pub fn ders_sm_upcycle(dense: &Model, cfg: &UpcycleConfig) -> Result<Model> {
    expect_method(cfg, UpcycleMethod::DersSm)?;
    build(dense, cfg, |layer, f, cfg| {
        for w in [&f.w_in, &f.w_out] {
            if kept_count(w.len(), cfg.sparse_rate) == 0 {
                return Err(DersError::Config(format!(
                    "sparse_rate {} keeps no entries of a {}x{} matrix",
                    cfg.sparse_rate,
                    w.rows(),
                    w.cols()
                )));
            }
        }
        delta_layer(layer, f, cfg, LayerOrigin::DersSm, |rows, cols, rng| {
            Ok(DeltaWeight::Sparse(init_sparse_trainable(
                rows,
                cols,
                cfg.sparse_rate,
                rng,
            )?))
        })
    })
}

pub fn ders_lm_upcycle(dense: &Model, cfg: &UpcycleConfig) -> Result<Model> {
    expect_method(cfg, UpcycleMethod::DersLm)?;
    build(dense, cfg, |layer, f, cfg| {
        let max = f.w_in.rows().min(f.w_in.cols());
        if cfg.rank > max {
            return Err(DersError::Config(format!(
                "rank {} exceeds min(d, d_h) = {max}",
                cfg.rank
            )));
        }
        delta_layer(layer, f, cfg, LayerOrigin::DersLm, |rows, cols, rng| {
            let scale = cfg
                .lowrank_init_scale
                .unwrap_or_else(|| default_lowrank_init_scale(rows));
            Ok(DeltaWeight::LowRank(init_lowrank_trainable(
                rows, cols, cfg.rank, rng, scale,
            )?))
        })
    })
}

fn expect_method(cfg: &UpcycleConfig, want: UpcycleMethod) -> Result<()> {
    cfg.validate()?;
    if cfg.method != want {
        return Err(DersError::Config(format!(
            "method is {}, expected {}",
            cfg.method.as_str(),
            want.as_str()
        )));
    }
    Ok(())
}

fn build(
    dense: &Model,
    cfg: &UpcycleConfig,
    mut make: impl FnMut(usize, &Ffn, &UpcycleConfig) -> Result<MoELayer>,
) -> Result<Model> {
    if !dense.is_dense() {
        return Err(DersError::State("upcycling requires a dense model".into()));
    }
    let mut blocks = Vec::with_capacity(dense.blocks.len());
    let mut upcycled = 0;
    for (l, b) in dense.blocks.iter().enumerate() {
        let Block::Dense(f) = b else { unreachable!() };
        if cfg.layer_pattern.selects(l) {
            blocks.push(Block::Moe(make(l, f, cfg)?));
            upcycled += 1;
        } else {
            blocks.push(b.clone());
        }
    }
    if upcycled == 0 {
        return Err(DersError::Config("layer pattern selects no blocks".into()));
    }
    Ok(Model {
        embed: dense.embed.clone(),
        blocks,
        readout: dense.readout.clone(),
        ancestor_params: dense.ancestor_params,
    })
}

fn init_router(d: usize, cfg: &UpcycleConfig, layer: usize) -> Result<Router> {
    let mut rng = RngStream::scoped(cfg.seed, &[ROUTER_STREAM, layer as u64]);
    let bound = 1.0 / (d as f64).sqrt();
    Router::new(
        Matrix::uniform(d, cfg.n_experts, bound, &mut rng),
        cfg.topk_count,
    )
}

/// Stream for one delta, keyed by (layer, matrix, member).
pub fn delta_stream(seed: u64, layer: usize, matrix: FfnMatrix, member: usize) -> RngStream {
    RngStream::scoped(
        seed,
        &[DELTA_STREAM, layer as u64, matrix.index(), member as u64],
    )
}

fn delta_layer(
    layer: usize,
    f: &Ffn,
    cfg: &UpcycleConfig,
    origin: LayerOrigin,
    mut init: impl FnMut(usize, usize, &mut RngStream) -> Result<DeltaWeight>,
) -> Result<MoELayer> {
    let members = cfg.n_experts + usize::from(cfg.extended);
    let mut groups = Vec::with_capacity(2);
    for which in FfnMatrix::BOTH {
        let w = f.matrix(which);
        let deltas = (0..members)
            .map(|i| {
                init(
                    w.rows(),
                    w.cols(),
                    &mut delta_stream(cfg.seed, layer, which, i),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        groups.push(ExpertGroup::new(w.clone(), deltas)?);
    }
    let w_out = groups.pop().expect("two groups");
    let w_in = groups.pop().expect("two groups");
    let universal = match (cfg.parallel_universal, cfg.extended) {
        (_, true) => Universal::Folded,
        (true, false) => Universal::Parallel(f.clone()),
        (false, false) => Universal::None,
    };
    Ok(MoELayer {
        router: init_router(f.w_in.rows(), cfg, layer)?,
        w_in,
        w_out,
        activation: f.activation,
        base_role: BaseRole::Shared {
            frozen: cfg.freeze_shared,
        },
        universal,
        origin,
        init_record: Some((f.w_in.clone(), f.w_out.clone())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deltas::DeltaWeight;
    use crate::moe::{model_forward, Activation, DenseDims};

    fn dense(d: usize, dh: usize, depth: usize) -> Model {
        Model::dense(
            DenseDims {
                d_in: 5,
                d_model: d,
                d_hidden: dh,
                depth,
                d_out: 2,
            },
            Activation::Gelu,
            17,
        )
    }

    fn cfg(method: UpcycleMethod) -> UpcycleConfig {
        let mut c = UpcycleConfig::new(method, 4, 4, 3);
        c.sparse_rate = 0.75;
        c.rank = 2;
        c
    }

    #[test]
    fn identity_at_init_for_every_method() {
        let m = dense(8, 16, 2);
        let x = Matrix::normal(10, 5, 1.0, &mut RngStream::new(2, 2));
        let want = model_forward(&m, &x).unwrap();
        for method in [
            UpcycleMethod::Vanilla,
            UpcycleMethod::DersSm,
            UpcycleMethod::DersLm,
        ] {
            let up = upcycle(&m, &cfg(method)).unwrap();
            let got = model_forward(&up, &x).unwrap();
            let err = got.sub(&want).unwrap().max_abs();
            assert!(err < 1e-12, "{method:?}: {err}");
        }
    }

    #[test]
    fn sm_counts_and_reproducible_indices() {
        let m = dense(8, 16, 1);
        let up = ders_sm_upcycle(&m, &cfg(UpcycleMethod::DersSm)).unwrap();
        let again = ders_sm_upcycle(&m, &cfg(UpcycleMethod::DersSm)).unwrap();
        assert_eq!(up, again);
        let (_, layer) = up.moe_layers().next().unwrap();
        let values: usize = layer
            .w_in
            .deltas
            .iter()
            .map(|d| match d {
                DeltaWeight::Sparse(s) => s.nnz(),
                _ => panic!(),
            })
            .sum();
        assert_eq!(128 + values, 256);
        // Distinct experts draw distinct index sets.
        let idx: Vec<&[u32]> = layer
            .w_in
            .deltas
            .iter()
            .map(|d| match d {
                DeltaWeight::Sparse(s) => s.index(),
                _ => panic!(),
            })
            .collect();
        assert_ne!(idx[0], idx[1]);
    }

    #[test]
    fn lm_counts_and_rank_boundary() {
        let m = dense(8, 16, 1);
        let up = ders_lm_upcycle(&m, &cfg(UpcycleMethod::DersLm)).unwrap();
        let (_, layer) = up.moe_layers().next().unwrap();
        let values: usize = layer
            .w_in
            .deltas
            .iter()
            .map(|d| match d {
                DeltaWeight::LowRank(l) => l.a.len() + l.b.len(),
                _ => panic!(),
            })
            .sum();
        assert_eq!(128 + values, 320);
        let mut c = cfg(UpcycleMethod::DersLm);
        c.rank = 8;
        assert!(ders_lm_upcycle(&m, &c).is_ok());
        c.rank = 9;
        assert!(matches!(ders_lm_upcycle(&m, &c), Err(DersError::Config(_))));
    }

    #[test]
    fn routers_differ_across_layers() {
        let up = vanilla_upcycle(&dense(6, 6, 2), &cfg(UpcycleMethod::Vanilla)).unwrap();
        let routers: Vec<&Matrix> = up.moe_layers().map(|(_, l)| &l.router.w_r).collect();
        assert_eq!(routers.len(), 2);
        assert_ne!(routers[0], routers[1]);
        let again = vanilla_upcycle(&dense(6, 6, 2), &cfg(UpcycleMethod::Vanilla)).unwrap();
        assert_eq!(up, again);
    }

    #[test]
    fn extended_adds_one_member() {
        let mut c = cfg(UpcycleMethod::DersSm);
        c.parallel_universal = true;
        c.extended = true;
        let up = ders_sm_upcycle(&dense(8, 16, 1), &c).unwrap();
        let (_, layer) = up.moe_layers().next().unwrap();
        assert_eq!(layer.w_in.deltas.len(), 5);
        assert!(layer.is_extended());
        c.parallel_universal = false;
        assert!(ders_sm_upcycle(&dense(8, 16, 1), &c).is_err());
    }

    #[test]
    fn config_errors() {
        let m = dense(4, 4, 1);
        let mut c = cfg(UpcycleMethod::Vanilla);
        c.topk_count = 5;
        assert!(matches!(vanilla_upcycle(&m, &c), Err(DersError::Config(_))));
        let c = cfg(UpcycleMethod::DersSm);
        assert!(vanilla_upcycle(&m, &c).is_err());
        let mut c = cfg(UpcycleMethod::DersSm);
        c.sparse_rate = 0.99;
        assert!(matches!(ders_sm_upcycle(&m, &c), Err(DersError::Config(_))));
        let mut c = cfg(UpcycleMethod::Vanilla);
        c.layer_pattern = LayerPattern::EveryOtherLayer;
        let no_blocks = Model {
            blocks: vec![],
            ..m.clone()
        };
        assert!(matches!(
            vanilla_upcycle(&no_blocks, &c),
            Err(DersError::Config(_))
        ));
        let up = vanilla_upcycle(&m, &cfg(UpcycleMethod::Vanilla)).unwrap();
        assert!(matches!(
            vanilla_upcycle(&up, &cfg(UpcycleMethod::Vanilla)),
            Err(DersError::State(_))
        ));
    }
}
