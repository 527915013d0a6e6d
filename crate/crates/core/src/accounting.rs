//! Parameter and storage accounting.
//!
//! Counts come from walking every stored array of a model. The closed-form
//! per-matrix laws for the delta layouts live in [`formula_check`], which builds
//! single-layer models and compares walk against formula.
//!
//! Conventions:
//! * Float values cost `reference_bits` (K) bits; quantized codes cost their
//!   bit width; indices cost 32 bits; per-delta scales and rescale factors are
//!   counted as separate scale values of K bits.
//! * A vanilla layer's base is the recorded initialization, not an expert
//!   parameter, so it appears under `record_values` only.
//! * Router weights are added parameters (they only exist after upcycling).

use serde::{Deserialize, Serialize};

use crate::compress::{ders_compress, CompressionSpec, Technique};
use crate::deltas::{DeltaWeight, ExpertGroup, MaskMode};
use crate::moe::{
    Activation, BaseRole, Block, DenseDims, FfnMatrix, LayerOrigin, MoELayer, Model, Universal,
};
use crate::upcycle::{upcycle, UpcycleConfig, UpcycleMethod};

pub const INDEX_BITS: u64 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportOptions {
    /// Bit width K of an unquantized stored value.
    pub reference_bits: u32,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self { reference_bits: 16 }
    }
}

/// Counts for one expert group (one FFN matrix of one MoE layer).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupCount {
    pub matrix: Option<FfnMatrix>,
    /// `d · d_h` of this matrix
    pub logical_size: u64,
    pub members: u64,
    pub trainable_values: u64,
    pub stored_values: u64,
    pub stored_bits: u64,
    pub index_values: u64,
    pub scale_values: u64,
    pub record_values: u64,
}

impl GroupCount {
    /// Stored bits relative to storing every member as a full K-bit matrix.
    pub fn equivalent_expert_ratio(&self, k: u64) -> f64 {
        self.stored_bits as f64 / (self.members * self.logical_size * k) as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub block: usize,
    pub kind: String,
    pub groups: Vec<GroupCount>,
    pub router_values: u64,
    pub universal_values: u64,
    pub trainable_values: u64,
    pub stored_values: u64,
    pub stored_bits: u64,
    pub index_values: u64,
    pub scale_values: u64,
    pub record_values: u64,
    /// Expert-group storage over `members · d · d_h · K`; absent for dense blocks.
    pub equivalent_expert_ratio: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub trainable_values: u64,
    pub stored_values: u64,
    pub stored_bits: u64,
    pub index_values: u64,
    pub scale_values: u64,
    pub record_values: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub schema_version: u32,
    pub reference_bits: u32,
    pub ancestor_params: u64,
    pub embed_values: u64,
    pub readout_values: u64,
    pub layers: Vec<LayerReport>,
    pub totals: Totals,
    /// Stored values minus the ancestor's parameter count.
    pub added_values_only: i64,
    /// As above, plus index vectors and scale factors.
    pub added_with_indices: i64,
    /// Stored bits minus `ancestor_params · K`.
    pub added_bits: i64,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub fn count_report(model: &Model) -> ParamReport {
    count_report_with(model, ReportOptions::default())
}

pub fn count_report_with(model: &Model, opts: ReportOptions) -> ParamReport {
    let k = opts.reference_bits as u64;
    let embed_values = model.embed.as_ref().map_or(0, |e| e.len() as u64);
    let readout_values = model.readout.len() as u64;
    let layers: Vec<LayerReport> = model
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| match b {
            Block::Dense(f) => {
                let n = (f.w_in.len() + f.w_out.len()) as u64;
                LayerReport {
                    block: i,
                    kind: "dense".into(),
                    trainable_values: n,
                    stored_values: n,
                    stored_bits: n * k,
                    ..Default::default()
                }
            }
            Block::Moe(m) => layer_report(i, m, k),
        })
        .collect();

    let mut totals = Totals {
        trainable_values: embed_values + readout_values,
        stored_values: embed_values + readout_values,
        stored_bits: (embed_values + readout_values) * k,
        ..Default::default()
    };
    for l in &layers {
        totals.trainable_values += l.trainable_values;
        totals.stored_values += l.stored_values;
        totals.stored_bits += l.stored_bits;
        totals.index_values += l.index_values;
        totals.scale_values += l.scale_values;
        totals.record_values += l.record_values;
    }
    let added = totals.stored_values as i64 - model.ancestor_params as i64;
    ParamReport {
        schema_version: REPORT_SCHEMA_VERSION,
        reference_bits: opts.reference_bits,
        ancestor_params: model.ancestor_params,
        embed_values,
        readout_values,
        added_values_only: added,
        added_with_indices: added + (totals.index_values + totals.scale_values) as i64,
        added_bits: totals.stored_bits as i64 - (model.ancestor_params * k) as i64,
        layers,
        totals,
    }
}

pub fn layer_report(block: usize, m: &MoELayer, k: u64) -> LayerReport {
    let trainable_groups = m.origin != LayerOrigin::Compressed;
    let groups: Vec<GroupCount> = FfnMatrix::BOTH
        .iter()
        .map(|&w| group_count(w, m.group(w), m.base_role, trainable_groups, k))
        .collect();
    let router_values = m.router.w_r.len() as u64;
    let universal_values = match &m.universal {
        Universal::Parallel(u) => (u.w_in.len() + u.w_out.len()) as u64,
        _ => 0,
    };
    let mut r = LayerReport {
        block,
        kind: format!("moe:{}", origin_name(m.origin)),
        router_values,
        universal_values,
        trainable_values: router_values + universal_values,
        stored_values: router_values + universal_values,
        stored_bits: (router_values + universal_values) * k,
        ..Default::default()
    };
    let mut expert_bits = 0;
    let mut full_bits = 0;
    for g in &groups {
        r.trainable_values += g.trainable_values;
        r.stored_values += g.stored_values;
        r.stored_bits += g.stored_bits;
        r.index_values += g.index_values;
        r.scale_values += g.scale_values;
        r.record_values += g.record_values;
        expert_bits += g.stored_bits;
        full_bits += g.members * g.logical_size * k;
    }
    r.equivalent_expert_ratio = Some(expert_bits as f64 / full_bits as f64);
    r.groups = groups;
    r
}

pub fn origin_name(o: LayerOrigin) -> &'static str {
    match o {
        LayerOrigin::Vanilla => "vanilla",
        LayerOrigin::DersSm => "ders-sm",
        LayerOrigin::DersLm => "ders-lm",
        LayerOrigin::Compressed => "compressed",
    }
}

pub fn group_count(
    which: FfnMatrix,
    g: &ExpertGroup,
    role: BaseRole,
    deltas_trainable: bool,
    k: u64,
) -> GroupCount {
    let size = g.base.len() as u64;
    let mut c = GroupCount {
        matrix: Some(which),
        logical_size: size,
        members: g.deltas.len() as u64,
        ..Default::default()
    };
    match role {
        BaseRole::InitRecord => c.record_values += size,
        BaseRole::Shared { frozen } => {
            c.stored_values += size;
            c.stored_bits += size * k;
            if !frozen {
                c.trainable_values += size;
            }
        }
    }
    for d in &g.deltas {
        let (values, bits, index, scales) = match d {
            DeltaWeight::Dense(x) => {
                let n = x.mat.len() as u64;
                (n, n * k, 0, 0)
            }
            DeltaWeight::Sparse(s) => {
                let n = s.nnz() as u64;
                (n, n * k, n, u64::from(s.rescale() != 1.0))
            }
            DeltaWeight::LowRank(l) => {
                let n = (l.a.len() + l.b.len()) as u64;
                (n, n * k, 0, 0)
            }
            DeltaWeight::Quantized(q) => {
                let n = q.code_count() as u64;
                (n, n * q.bit_width() as u64, 0, 1)
            }
        };
        c.stored_values += values;
        c.stored_bits += bits;
        c.index_values += index;
        c.scale_values += scales;
        if deltas_trainable && !matches!(d, DeltaWeight::Quantized(_)) {
            c.trainable_values += values;
        }
    }
    c
}

/// One configuration for the closed-form laws.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum FormulaCase {
    /// Trainable values, `N · d · d_h`.
    Vanilla { d: usize, d_h: usize, n: usize },
    /// Trainable values, `(1 + N(1-p)) · d · d_h`.
    SparseUpcycle {
        d: usize,
        d_h: usize,
        n: usize,
        p: f64,
    },
    /// Trainable values, `d · d_h + N · r · (d + d_h)`.
    LowRankUpcycle {
        d: usize,
        d_h: usize,
        n: usize,
        r: usize,
    },
    /// Stored values after compression, `(1 + N(1-p)) · d · d_h`.
    SparseCompress {
        d: usize,
        d_h: usize,
        n: usize,
        p: f64,
    },
    /// Stored bits after compression, `(K + N · k) · d · d_h` (scales flagged separately).
    QuantCompress {
        d: usize,
        d_h: usize,
        n: usize,
        k: u8,
        big_k: u32,
    },
}

impl FormulaCase {
    pub fn n(&self) -> usize {
        match *self {
            FormulaCase::Vanilla { n, .. }
            | FormulaCase::SparseUpcycle { n, .. }
            | FormulaCase::LowRankUpcycle { n, .. }
            | FormulaCase::SparseCompress { n, .. }
            | FormulaCase::QuantCompress { n, .. } => n,
        }
    }

    pub fn formula(&self) -> f64 {
        match *self {
            FormulaCase::Vanilla { d, d_h, n } => (n * d * d_h) as f64,
            FormulaCase::SparseUpcycle { d, d_h, n, p }
            | FormulaCase::SparseCompress { d, d_h, n, p } => {
                (1.0 + n as f64 * (1.0 - p)) * (d * d_h) as f64
            }
            FormulaCase::LowRankUpcycle { d, d_h, n, r } => (d * d_h + n * r * (d + d_h)) as f64,
            FormulaCase::QuantCompress {
                d,
                d_h,
                n,
                k,
                big_k,
            } => ((big_k as usize + n * k as usize) * d * d_h) as f64,
        }
    }

    /// Builds the single-layer model and walks its `w_in` group.
    pub fn walk(&self) -> crate::Result<u64> {
        let (d, d_h, n) = match *self {
            FormulaCase::Vanilla { d, d_h, n }
            | FormulaCase::SparseUpcycle { d, d_h, n, .. }
            | FormulaCase::LowRankUpcycle { d, d_h, n, .. }
            | FormulaCase::SparseCompress { d, d_h, n, .. }
            | FormulaCase::QuantCompress { d, d_h, n, .. } => (d, d_h, n),
        };
        let dense = Model::dense(
            DenseDims {
                d_in: d,
                d_model: d,
                d_hidden: d_h,
                depth: 1,
                d_out: 1,
            },
            Activation::Gelu,
            (d * 131 + d_h * 7 + n) as u64,
        );
        let mut cfg = UpcycleConfig::new(UpcycleMethod::Vanilla, n, 1, 11);
        let big_k = match *self {
            FormulaCase::QuantCompress { big_k, .. } => big_k as u64,
            _ => 16,
        };
        let model = match *self {
            FormulaCase::Vanilla { .. } => upcycle(&dense, &cfg)?,
            FormulaCase::SparseUpcycle { p, .. } => {
                cfg.method = UpcycleMethod::DersSm;
                cfg.sparse_rate = p;
                upcycle(&dense, &cfg)?
            }
            FormulaCase::LowRankUpcycle { r, .. } => {
                cfg.method = UpcycleMethod::DersLm;
                cfg.rank = r;
                upcycle(&dense, &cfg)?
            }
            FormulaCase::SparseCompress { p, .. } => {
                let up = upcycle(&dense, &cfg)?;
                let spec = CompressionSpec {
                    technique: Technique::Sparsify { drop_rate: p },
                    extended: false,
                    seed: 5,
                    mask: MaskMode::ExactCount,
                };
                ders_compress(&up, &spec)?.0
            }
            FormulaCase::QuantCompress { k, .. } => {
                let up = upcycle(&dense, &cfg)?;
                let spec = CompressionSpec {
                    technique: Technique::Quantize { bit_width: k },
                    extended: false,
                    seed: 5,
                    mask: MaskMode::ExactCount,
                };
                ders_compress(&up, &spec)?.0
            }
        };
        let (_, layer) = model.moe_layers().next().expect("one MoE layer");
        let g = group_count(
            FfnMatrix::In,
            &layer.w_in,
            layer.base_role,
            layer.origin != LayerOrigin::Compressed,
            big_k,
        );
        Ok(match self {
            FormulaCase::Vanilla { .. }
            | FormulaCase::SparseUpcycle { .. }
            | FormulaCase::LowRankUpcycle { .. } => g.trainable_values,
            FormulaCase::SparseCompress { .. } => g.stored_values,
            FormulaCase::QuantCompress { .. } => g.stored_bits,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormulaRow {
    pub case: FormulaCase,
    pub walked: u64,
    pub formula: f64,
    pub deviation: f64,
    pub pass: bool,
}

/// Walk-versus-formula comparison; a row passes when the deviation is at most `N`.
pub fn formula_check(cases: &[FormulaCase]) -> crate::Result<Vec<FormulaRow>> {
    cases
        .iter()
        .map(|c| {
            let walked = c.walk()?;
            let formula = c.formula();
            let deviation = (walked as f64 - formula).abs();
            Ok(FormulaRow {
                case: *c,
                walked,
                formula,
                deviation,
                pass: deviation <= c.n() as f64,
            })
        })
        .collect()
}

/// CSV rendering of a report, one row per block plus a total row.
pub fn report_csv(r: &ParamReport) -> String {
    let mut out = String::from(
        "block,kind,trainable_values,stored_values,stored_bits,index_values,scale_values,record_values,equivalent_expert_ratio\n",
    );
    for l in &r.layers {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            l.block,
            l.kind,
            l.trainable_values,
            l.stored_values,
            l.stored_bits,
            l.index_values,
            l.scale_values,
            l.record_values,
            l.equivalent_expert_ratio
                .map_or(String::new(), |v| v.to_string())
        ));
    }
    out.push_str(&format!(
        "total,all,{},{},{},{},{},{},\n",
        r.totals.trainable_values,
        r.totals.stored_values,
        r.totals.stored_bits,
        r.totals.index_values,
        r.totals.scale_values,
        r.totals.record_values
    ));
    out
}
