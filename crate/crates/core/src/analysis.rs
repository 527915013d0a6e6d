//! Weight-space redundancy diagnostics: pairwise cosine similarity among an
//! MoE layer's initial FFN and its experts, and delta magnitudes relative to
//! the initial weights.
//!
//! Only FFN matrices are compared. Router weights are left out.

use serde::{Deserialize, Serialize};

use crate::deltas::decompose;
use crate::error::{DersError, Result};
use crate::moe::{FfnMatrix, MoELayer, Model};
use crate::numkern::Matrix;

pub const SCOPE_NOTE: &str =
    "FFN matrices only (router weights excluded); entry 0 is the upcycle-time FFN";

/// Symmetric similarity table; `None` marks pairs involving a zero-norm weight.
pub type SimMatrix = Vec<Vec<Option<f64>>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaStat {
    pub block: usize,
    pub matrix: FfnMatrix,
    pub expert: usize,
    pub delta_norm: f64,
    pub base_norm: f64,
    /// `delta_norm / base_norm`, undefined for a zero base.
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSimilarity {
    pub block: usize,
    pub labels: Vec<String>,
    pub w_in: SimMatrix,
    pub w_out: SimMatrix,
    pub mean: SimMatrix,
    pub deltas: Vec<DeltaStat>,
}

impl LayerSimilarity {
    /// Smallest defined off-diagonal entry of the averaged matrix.
    pub fn min_off_diagonal(&self) -> Option<f64> {
        off_diagonal(&self.mean).into_iter().reduce(f64::min)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub scope: String,
    pub layers: Vec<LayerSimilarity>,
}

impl SimilarityReport {
    pub fn min_off_diagonal(&self) -> Option<f64> {
        self.layers
            .iter()
            .filter_map(LayerSimilarity::min_off_diagonal)
            .reduce(f64::min)
    }
}

fn off_diagonal(m: &SimMatrix) -> Vec<f64> {
    let mut out = Vec::new();
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                if let Some(v) = v {
                    out.push(*v);
                }
            }
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity of two flattened weights. Identical inputs give exactly 1.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<Option<f64>> {
    if u.len() != v.len() {
        return Err(DersError::dim("cosine", (1, u.len()), (1, v.len())));
    }
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Ok(None);
    }
    if u == v {
        return Ok(Some(1.0));
    }
    Ok(Some((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0)))
}

/// `cos(base, base + delta)` computed from the base and delta alone.
pub fn cosine_from_delta(base: &Matrix, delta: &Matrix) -> Result<Option<f64>> {
    if base.shape() != delta.shape() {
        return Err(DersError::dim(
            "cosine_from_delta",
            base.shape(),
            delta.shape(),
        ));
    }
    let b = base.data();
    let d = delta.data();
    if d.iter().all(|&x| x == 0.0) {
        return Ok(if b.iter().all(|&x| x == 0.0) {
            None
        } else {
            Some(1.0)
        });
    }
    let bb = dot(b, b);
    let bd = dot(b, d);
    let dd = dot(d, d);
    let nw = (bb + 2.0 * bd + dd).max(0.0).sqrt();
    if bb == 0.0 || nw == 0.0 {
        return Ok(None);
    }
    Ok(Some(((bb + bd) / (bb.sqrt() * nw)).clamp(-1.0, 1.0)))
}

fn sim_matrix(ws: &[&Matrix]) -> Result<SimMatrix> {
    let n = ws.len();
    let mut out = vec![vec![None; n]; n];
    for i in 0..n {
        out[i][i] = cosine(ws[i].data(), ws[i].data())?;
        for j in i + 1..n {
            let c = cosine(ws[i].data(), ws[j].data())?;
            out[i][j] = c;
            out[j][i] = c;
        }
    }
    Ok(out)
}

fn init_weights(block: usize, m: &MoELayer) -> Result<(Matrix, Matrix)> {
    m.initial_weights()
        .map(|(a, b)| (a.clone(), b.clone()))
        .ok_or_else(|| {
            DersError::State(format!("block {block} has no recorded initial FFN weights"))
        })
}

fn layer_similarity(block: usize, m: &MoELayer) -> Result<LayerSimilarity> {
    let (init_in, init_out) = init_weights(block, m)?;
    let experts: Vec<(Matrix, Matrix)> = (0..m.n_experts())
        .map(|i| m.synthesize_member(i))
        .collect::<Result<_>>()?;
    let mut labels = vec!["ffn_init".to_string()];
    labels.extend((1..=experts.len()).map(|i| format!("expert_{i}")));
    let ins: Vec<&Matrix> = std::iter::once(&init_in)
        .chain(experts.iter().map(|e| &e.0))
        .collect();
    let outs: Vec<&Matrix> = std::iter::once(&init_out)
        .chain(experts.iter().map(|e| &e.1))
        .collect();
    let w_in = sim_matrix(&ins)?;
    let w_out = sim_matrix(&outs)?;
    let mean = w_in
        .iter()
        .zip(&w_out)
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(x, y)| match (x, y) {
                    (Some(x), Some(y)) if x == y => Some(*x),
                    (Some(x), Some(y)) => Some(0.5 * (x + y)),
                    _ => None,
                })
                .collect()
        })
        .collect();
    Ok(LayerSimilarity {
        block,
        labels,
        w_in,
        w_out,
        mean,
        deltas: layer_delta_stats(block, &init_in, &init_out, &experts)?,
    })
}

fn layer_delta_stats(
    block: usize,
    init_in: &Matrix,
    init_out: &Matrix,
    experts: &[(Matrix, Matrix)],
) -> Result<Vec<DeltaStat>> {
    let mut out = Vec::new();
    for matrix in FfnMatrix::BOTH {
        let base = match matrix {
            FfnMatrix::In => init_in,
            FfnMatrix::Out => init_out,
        };
        let base_norm = base.frobenius_norm();
        for (expert, e) in experts.iter().enumerate() {
            let w = match matrix {
                FfnMatrix::In => &e.0,
                FfnMatrix::Out => &e.1,
            };
            let delta_norm = decompose(base, w)?.mat.frobenius_norm();
            out.push(DeltaStat {
                block,
                matrix,
                expert,
                delta_norm,
                base_norm,
                ratio: (base_norm > 0.0).then(|| delta_norm / base_norm),
            });
        }
    }
    Ok(out)
}

pub fn cosine_report(model: &Model) -> Result<SimilarityReport> {
    let layers: Vec<LayerSimilarity> = model
        .moe_layers()
        .map(|(b, m)| layer_similarity(b, m))
        .collect::<Result<_>>()?;
    if layers.is_empty() {
        return Err(DersError::State("model has no MoE layers".into()));
    }
    Ok(SimilarityReport {
        scope: SCOPE_NOTE.into(),
        layers,
    })
}

/// Per-expert delta norms relative to the upcycle-time FFN, per layer and matrix.
pub fn delta_stats(model: &Model) -> Result<Vec<DeltaStat>> {
    let mut out = Vec::new();
    let mut any = false;
    for (block, m) in model.moe_layers() {
        any = true;
        let (init_in, init_out) = init_weights(block, m)?;
        let experts: Vec<(Matrix, Matrix)> = (0..m.n_experts())
            .map(|i| m.synthesize_member(i))
            .collect::<Result<_>>()?;
        out.extend(layer_delta_stats(block, &init_in, &init_out, &experts)?);
    }
    if !any {
        return Err(DersError::State("model has no MoE layers".into()));
    }
    Ok(out)
}

fn matrix_name(m: FfnMatrix) -> &'static str {
    match m {
        FfnMatrix::In => "w_in",
        FfnMatrix::Out => "w_out",
    }
}

/// Long-format heatmap rows: `block,matrix,row,col,value`. Undefined entries leave `value` empty.
pub fn heatmap_csv(r: &SimilarityReport) -> String {
    let mut s = format!("# {}\nblock,matrix,row,col,value\n", r.scope);
    for l in &r.layers {
        for (name, m) in [("w_in", &l.w_in), ("w_out", &l.w_out), ("mean", &l.mean)] {
            for (i, row) in m.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    let v = v.map(|x| x.to_string()).unwrap_or_default();
                    s.push_str(&format!(
                        "{},{},{},{},{}\n",
                        l.block, name, l.labels[i], l.labels[j], v
                    ));
                }
            }
        }
    }
    s
}

pub fn delta_stats_csv(stats: &[DeltaStat]) -> String {
    let mut s = String::from("block,matrix,expert,delta_norm,base_norm,ratio\n");
    for d in stats {
        let ratio = d.ratio.map(|x| x.to_string()).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            d.block,
            matrix_name(d.matrix),
            d.expert + 1,
            d.delta_norm,
            d.base_norm,
            ratio
        ));
    }
    s
}
