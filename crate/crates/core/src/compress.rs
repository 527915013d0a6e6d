//! Post-training compression of vanilla-upcycled models.
//!
//! Each trained expert weight is decomposed against the recorded upcycle-time
//! FFN weight, the per-expert delta is replaced by a sparse or quantized form,
//! and the forward pass synthesizes `base + F(Δ_i)` on demand.

use serde::{Deserialize, Serialize};

use crate::accounting::layer_report;
use crate::deltas::{
    check_bit_width, decompose, quantize, sparsify_with, synthesize, DeltaWeight, DenseDelta,
    ExpertGroup, MaskMode,
};
use crate::error::{DersError, Result};
use crate::moe::{BaseRole, Block, FfnMatrix, LayerOrigin, MoELayer, Model, Universal};
use crate::numkern::{Matrix, RngStream};

const COMPRESS_STREAM: u64 = 0xC0C0A;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Technique {
    Sparsify {
        drop_rate: f64,
    },
    Quantize {
        bit_width: u8,
    },
    /// Keep dense deltas (the lossless path).
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionSpec {
    pub technique: Technique,
    #[serde(default)]
    pub extended: bool,
    pub seed: u64,
    #[serde(default)]
    pub mask: MaskMode,
}

impl CompressionSpec {
    pub fn validate(&self) -> Result<()> {
        match self.technique {
            Technique::Sparsify { drop_rate } if !(0.0..1.0).contains(&drop_rate) => Err(
                DersError::Config(format!("drop rate {drop_rate} outside [0, 1)")),
            ),
            Technique::Quantize { bit_width } => {
                check_bit_width(bit_width).map_err(|e| DersError::Config(e.to_string()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCompression {
    pub block: usize,
    pub deltas_per_matrix: usize,
    pub stored_values_before: u64,
    pub stored_values_after: u64,
    pub stored_bits_before: u64,
    pub stored_bits_after: u64,
    pub equivalent_expert_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub spec: CompressionSpec,
    pub reference_bits: u32,
    pub layers: Vec<LayerCompression>,
}

/// The recorded pre-fine-tuning FFN weights `(w_in, w_out)` of every MoE layer.
pub fn choose_base(model: &Model) -> Result<Vec<(usize, Matrix, Matrix)>> {
    let mut out = Vec::new();
    for (i, m) in model.moe_layers() {
        if m.base_role != BaseRole::InitRecord {
            return Err(not_vanilla(i));
        }
        out.push((i, m.w_in.base.clone(), m.w_out.base.clone()));
    }
    if out.is_empty() {
        return Err(DersError::State(
            "not a vanilla-upcycled checkpoint: no MoE layers".into(),
        ));
    }
    Ok(out)
}

fn not_vanilla(block: usize) -> DersError {
    DersError::State(format!(
        "not a vanilla-upcycled checkpoint: block {block} has no recorded init base"
    ))
}

pub fn ders_compress(model: &Model, spec: &CompressionSpec) -> Result<(Model, CompressionReport)> {
    compress_with_bits(model, spec, 16)
}

pub fn compress_with_bits(
    model: &Model,
    spec: &CompressionSpec,
    reference_bits: u32,
) -> Result<(Model, CompressionReport)> {
    spec.validate()?;
    choose_base(model)?;
    let k = reference_bits as u64;
    let mut out = model.clone();
    let mut layers = Vec::new();
    for (i, block) in out.blocks.iter_mut().enumerate() {
        let Block::Moe(m) = block else { continue };
        let before = layer_report(i, m, k);
        compress_layer(i, m, spec)?;
        let after = layer_report(i, m, k);
        layers.push(LayerCompression {
            block: i,
            deltas_per_matrix: m.w_in.deltas.len(),
            stored_values_before: before.stored_values,
            stored_values_after: after.stored_values,
            stored_bits_before: before.stored_bits,
            stored_bits_after: after.stored_bits,
            equivalent_expert_ratio: after.equivalent_expert_ratio.unwrap_or(1.0),
        });
    }
    Ok((
        out,
        CompressionReport {
            spec: spec.clone(),
            reference_bits,
            layers,
        },
    ))
}

fn compress_layer(block: usize, m: &mut MoELayer, spec: &CompressionSpec) -> Result<()> {
    let universal = match (&m.universal, spec.extended) {
        (Universal::Parallel(u), true) => Some(u.clone()),
        (_, true) => {
            return Err(DersError::State(format!(
                "extended compression needs a parallel universal FFN in block {block}"
            )))
        }
        _ => None,
    };
    for which in FfnMatrix::BOTH {
        let group = m.group(which);
        let mut deltas: Vec<DenseDelta> = group
            .deltas
            .iter()
            .map(|d| expert_delta(&group.base, d))
            .collect::<Result<_>>()?;
        if let Some(u) = &universal {
            deltas.push(decompose(&group.base, u.matrix(which))?);
        }
        let replaced = deltas
            .iter()
            .enumerate()
            .map(|(member, d)| replace(d, spec, block, which, member))
            .collect::<Result<Vec<_>>>()?;
        let base = group.base.clone();
        *m.group_mut(which) = ExpertGroup::new(base, replaced)?;
    }
    if universal.is_some() {
        m.universal = Universal::Folded;
    }
    m.base_role = BaseRole::Shared { frozen: true };
    m.origin = LayerOrigin::Compressed;
    Ok(())
}

/// `W_i - W_base`. Vanilla experts already hold exactly that as a dense delta.
fn expert_delta(base: &Matrix, d: &DeltaWeight) -> Result<DenseDelta> {
    match d {
        DeltaWeight::Dense(dd) => Ok(dd.clone()),
        other => decompose(base, &synthesize(base, other)?),
    }
}

fn replace(
    d: &DenseDelta,
    spec: &CompressionSpec,
    block: usize,
    which: FfnMatrix,
    member: usize,
) -> Result<DeltaWeight> {
    Ok(match spec.technique {
        Technique::Sparsify { drop_rate } => {
            let mut rng = RngStream::scoped(
                spec.seed,
                &[COMPRESS_STREAM, block as u64, which.index(), member as u64],
            );
            DeltaWeight::Sparse(sparsify_with(d, drop_rate, spec.mask, &mut rng)?)
        }
        Technique::Quantize { bit_width } => DeltaWeight::Quantized(quantize(d, bit_width)?),
        Technique::Dense => DeltaWeight::Dense(d.clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::{model_forward, Activation, DenseDims};
    use crate::upcycle::{upcycle, UpcycleConfig, UpcycleMethod};

    fn trained_vanilla(universal: bool) -> Model {
        let dense = Model::dense(
            DenseDims {
                d_in: 4,
                d_model: 6,
                d_hidden: 10,
                depth: 2,
                d_out: 2,
            },
            Activation::Gelu,
            3,
        );
        let mut cfg = UpcycleConfig::new(UpcycleMethod::Vanilla, 4, 2, 1);
        cfg.parallel_universal = universal;
        let mut m = upcycle(&dense, &cfg).unwrap();
        // Stand-in for fine-tuning: perturb every expert delta.
        let mut rng = RngStream::new(9, 9);
        for b in &mut m.blocks {
            if let Block::Moe(l) = b {
                for g in [&mut l.w_in, &mut l.w_out] {
                    for d in &mut g.deltas {
                        if let DeltaWeight::Dense(dd) = d {
                            dd.mat = Matrix::normal(dd.mat.rows(), dd.mat.cols(), 0.01, &mut rng);
                        }
                    }
                }
            }
        }
        m
    }

    fn spec(t: Technique) -> CompressionSpec {
        CompressionSpec {
            technique: t,
            extended: false,
            seed: 4,
            mask: MaskMode::ExactCount,
        }
    }

    #[test]
    fn lossless_paths_are_exact() {
        let m = trained_vanilla(false);
        let x = Matrix::normal(16, 4, 1.0, &mut RngStream::new(1, 1));
        let want = model_forward(&m, &x).unwrap();
        let (c, _) = ders_compress(&m, &spec(Technique::Dense)).unwrap();
        assert_eq!(model_forward(&c, &x).unwrap(), want);
        let (c, _) = ders_compress(&m, &spec(Technique::Sparsify { drop_rate: 0.0 })).unwrap();
        let err = model_forward(&c, &x).unwrap().sub(&want).unwrap().max_abs();
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn sixteen_bit_quantization_is_close() {
        let m = trained_vanilla(false);
        let x = Matrix::normal(16, 4, 1.0, &mut RngStream::new(1, 1));
        let want = model_forward(&m, &x).unwrap();
        let (c, _) = ders_compress(&m, &spec(Technique::Quantize { bit_width: 16 })).unwrap();
        let err = model_forward(&c, &x).unwrap().sub(&want).unwrap().max_abs();
        assert!(err <= 1e-2, "{err}");
    }

    #[test]
    fn choose_base_returns_records() {
        let dense = Model::dense(
            DenseDims {
                d_in: 2,
                d_model: 3,
                d_hidden: 4,
                depth: 1,
                d_out: 1,
            },
            Activation::Gelu,
            0,
        );
        let up = upcycle(&dense, &UpcycleConfig::new(UpcycleMethod::Vanilla, 3, 1, 0)).unwrap();
        let bases = choose_base(&up).unwrap();
        let (_, layer) = up.moe_layers().next().unwrap();
        for e in 0..3 {
            let (wi, wo) = layer.synthesize_member(e).unwrap();
            assert_eq!(wi, bases[0].1);
            assert_eq!(wo, bases[0].2);
        }
        let trained = trained_vanilla(false);
        let bases = choose_base(&trained).unwrap();
        let (_, layer) = trained.moe_layers().next().unwrap();
        let moved = (0..4).any(|e| {
            let (wi, _) = layer.synthesize_member(e).unwrap();
            decompose(&bases[0].1, &wi).unwrap().mat.max_abs() > 0.0
        });
        assert!(moved);
    }

    #[test]
    fn rejects_non_vanilla_and_dense() {
        let dense = Model::dense(
            DenseDims {
                d_in: 2,
                d_model: 4,
                d_hidden: 4,
                depth: 1,
                d_out: 1,
            },
            Activation::Gelu,
            0,
        );
        assert!(matches!(
            ders_compress(&dense, &spec(Technique::Dense)),
            Err(DersError::State(_))
        ));
        let mut cfg = UpcycleConfig::new(UpcycleMethod::DersLm, 2, 1, 0);
        cfg.rank = 1;
        let lm = upcycle(&dense, &cfg).unwrap();
        assert!(matches!(
            ders_compress(&lm, &spec(Technique::Dense)),
            Err(DersError::State(_))
        ));
        let m = trained_vanilla(false);
        let mut s = spec(Technique::Dense);
        s.extended = true;
        assert!(matches!(ders_compress(&m, &s), Err(DersError::State(_))));
        assert!(matches!(
            ders_compress(&m, &spec(Technique::Quantize { bit_width: 3 })),
            Err(DersError::Config(_))
        ));
    }

    #[test]
    fn extended_compresses_n_plus_one_deltas() {
        let m = trained_vanilla(true);
        let mut s = spec(Technique::Sparsify { drop_rate: 0.5 });
        s.extended = true;
        let (c, report) = ders_compress(&m, &s).unwrap();
        for (_, l) in c.moe_layers() {
            assert_eq!(l.w_in.deltas.len(), 5);
            assert_eq!(l.w_out.deltas.len(), 5);
            assert!(l.is_extended());
        }
        assert!(report.layers.iter().all(|l| l.deltas_per_matrix == 5));
        // Non-extended leaves the universal FFN alone.
        let (c, _) = ders_compress(&m, &spec(Technique::Sparsify { drop_rate: 0.5 })).unwrap();
        for ((_, a), (_, b)) in c.moe_layers().zip(m.moe_layers()) {
            assert_eq!(a.universal, b.universal);
            assert_eq!(a.w_in.deltas.len(), 4);
        }
    }

    #[test]
    fn extended_dense_path_is_close() {
        let m = trained_vanilla(true);
        let x = Matrix::normal(8, 4, 1.0, &mut RngStream::new(1, 3));
        let want = model_forward(&m, &x).unwrap();
        let mut s = spec(Technique::Dense);
        s.extended = true;
        let (c, _) = ders_compress(&m, &s).unwrap();
        let err = model_forward(&c, &x).unwrap().sub(&want).unwrap().max_abs();
        assert!(err < 1e-12);
    }
}
