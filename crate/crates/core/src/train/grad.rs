//! Loss and exact reverse-mode gradients.
//!
//! The forward pass records what the backward pass needs, layer by layer over
//! the whole batch. Backward runs over fixed-size row chunks in parallel; chunk
//! results are summed in chunk order so gradients do not depend on thread
//! scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::params::{deltas_trainable, shared_trainable, DeltaPart, GradientSet, ParamId};
use super::task::Targets;
use crate::deltas::DeltaWeight;
use crate::error::{DersError, Result};
use crate::moe::{
    ffn_row, route_detail, Activation, Block, FfnMatrix, FfnRow, MoELayer, Model, RouteDetail,
    Universal,
};
use crate::numkern::{add_outer, matmul, matvec_t, softmax, Matrix};

const CHUNK_ROWS: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub task: f64,
    pub aux: f64,
}

/// Mean over rows and outputs of the squared error.
pub fn mse(pred: &Matrix, y: &Matrix) -> Result<f64> {
    if pred.shape() != y.shape() {
        return Err(DersError::dim("mse", pred.shape(), y.shape()));
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(s / pred.len() as f64)
}

/// Mean negative log-likelihood of the labelled class.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(DersError::dim(
            "cross_entropy",
            logits.shape(),
            (labels.len(), 1),
        ));
    }
    let mut total = 0.0;
    for (r, &c) in labels.iter().enumerate() {
        if c >= logits.cols() {
            return Err(DersError::param(format!(
                "label {c} outside {} classes",
                logits.cols()
            )));
        }
        total -= log_softmax_at(logits.row(r), c);
    }
    Ok(total / labels.len() as f64)
}

fn log_softmax_at(z: &[f64], c: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    z[c] - lse
}

pub fn task_loss(pred: &Matrix, targets: &Targets) -> Result<f64> {
    match targets {
        Targets::Regression(y) => mse(pred, y),
        Targets::Classes(c) => cross_entropy(pred, c),
    }
}

fn task_loss_grad(pred: &Matrix, targets: &Targets) -> Result<Matrix> {
    match targets {
        Targets::Regression(y) => {
            let n = pred.len() as f64;
            let data = pred
                .data()
                .iter()
                .zip(y.data())
                .map(|(a, b)| 2.0 * (a - b) / n)
                .collect();
            Matrix::from_vec(pred.rows(), pred.cols(), data)
        }
        Targets::Classes(labels) => {
            let b = labels.len() as f64;
            let mut g = Matrix::zeros(pred.rows(), pred.cols());
            for (r, &c) in labels.iter().enumerate() {
                let p = softmax(pred.row(r))?;
                let row = g.row_mut(r);
                for (j, pj) in p.iter().enumerate() {
                    row[j] = (pj - f64::from(u8::from(j == c))) / b;
                }
            }
            Ok(g)
        }
    }
}

struct MoeTape {
    /// Synthesized weights for every member used by the batch.
    members: Vec<Option<(Matrix, Matrix)>>,
    routes: Vec<RouteDetail>,
    /// Per row, the selected experts' activations in `routes[r].selected` order.
    expert_rows: Vec<Vec<FfnRow>>,
    extra_rows: Vec<Option<FfnRow>>,
    /// `coeff * N * f_i / B`, added to the routing-probability gradient.
    aux_dp: Vec<f64>,
}

enum BlockTape {
    Dense(Vec<FfnRow>),
    Moe(MoeTape),
}

struct Tape {
    /// Inputs to each block, then the readout input.
    hs: Vec<Matrix>,
    blocks: Vec<BlockTape>,
    out: Matrix,
    aux: f64,
}

fn forward_tape(model: &Model, x: &Matrix, aux_coeff: f64) -> Result<Tape> {
    if x.cols() != model.d_in() {
        return Err(DersError::dim(
            "forward",
            x.shape(),
            (model.d_in(), model.d_model()),
        ));
    }
    let b = x.rows();
    if b == 0 {
        return Err(DersError::param("empty batch"));
    }
    let mut h = match &model.embed {
        Some(e) => x.matmul(e)?,
        None => x.clone(),
    };
    let mut hs = Vec::with_capacity(model.blocks.len() + 1);
    let mut blocks = Vec::with_capacity(model.blocks.len());
    let mut aux = 0.0;
    for (l, block) in model.blocks.iter().enumerate() {
        let (tape, delta) = match block {
            Block::Dense(f) => {
                let rows: Vec<FfnRow> = (0..b)
                    .into_par_iter()
                    .map(|r| ffn_row(&f.w_in, &f.w_out, f.activation, h.row(r)))
                    .collect::<Result<_>>()?;
                let data = rows.iter().flat_map(|fr| fr.out.iter().copied()).collect();
                let delta = Matrix::from_vec(b, h.cols(), data)?;
                (BlockTape::Dense(rows), delta)
            }
            Block::Moe(m) => {
                let (tape, delta, a) = moe_tape(m, &h, aux_coeff)?;
                aux += a;
                (BlockTape::Moe(tape), delta)
            }
        };
        let mut next = h.clone();
        next.add_assign(&delta)?;
        if !next.is_finite() {
            return Err(DersError::Numeric {
                location: format!("block {l}"),
                detail: "non-finite activation".into(),
            });
        }
        hs.push(h);
        blocks.push(tape);
        h = next;
    }
    let out = h.matmul(&model.readout)?;
    hs.push(h);
    if !out.is_finite() {
        return Err(DersError::Numeric {
            location: "readout".into(),
            detail: "non-finite output".into(),
        });
    }
    Ok(Tape {
        hs,
        blocks,
        out,
        aux,
    })
}

fn moe_tape(m: &MoELayer, h: &Matrix, aux_coeff: f64) -> Result<(MoeTape, Matrix, f64)> {
    let b = h.rows();
    let n = m.n_experts();
    let routes: Vec<RouteDetail> = (0..b)
        .map(|r| route_detail(&m.router, h.row(r)))
        .collect::<Result<_>>()?;
    let mut members: Vec<Option<(Matrix, Matrix)>> = vec![None; m.n_members()];
    let need = |i: usize, members: &mut Vec<Option<(Matrix, Matrix)>>| -> Result<()> {
        if members[i].is_none() {
            members[i] = Some(m.synthesize_member(i)?);
        }
        Ok(())
    };
    for rd in &routes {
        for &i in &rd.selected {
            need(i, &mut members)?;
        }
    }
    if m.is_extended() {
        need(n, &mut members)?;
    }
    let act = m.activation;
    let per_row: Vec<(Vec<FfnRow>, Option<FfnRow>, Vec<f64>)> = (0..b)
        .into_par_iter()
        .map(|r| {
            let x = h.row(r);
            let mut y = vec![0.0; h.cols()];
            let mut rows = Vec::with_capacity(routes[r].selected.len());
            for &i in &routes[r].selected {
                let (wi, wo) = members[i].as_ref().expect("synthesized");
                let e = ffn_row(wi, wo, act, x)?;
                let s = routes[r].probs[i];
                for (yy, ee) in y.iter_mut().zip(&e.out) {
                    *yy += s * ee;
                }
                rows.push(e);
            }
            let extra = match &m.universal {
                Universal::None => None,
                Universal::Parallel(u) => Some(ffn_row(&u.w_in, &u.w_out, u.activation, x)?),
                Universal::Folded => {
                    let (wi, wo) = members[n].as_ref().expect("synthesized");
                    Some(ffn_row(wi, wo, act, x)?)
                }
            };
            if let Some(e) = &extra {
                for (yy, ee) in y.iter_mut().zip(&e.out) {
                    *yy += ee;
                }
            }
            Ok((rows, extra, y))
        })
        .collect::<Result<_>>()?;
    let mut expert_rows = Vec::with_capacity(b);
    let mut extra_rows = Vec::with_capacity(b);
    let mut data = Vec::with_capacity(b * h.cols());
    for (rows, extra, y) in per_row {
        expert_rows.push(rows);
        extra_rows.push(extra);
        data.extend(y);
    }
    let (aux, aux_dp) = aux_terms(&routes, n, m.router.topk_count, aux_coeff);
    let tape = MoeTape {
        members,
        routes,
        expert_rows,
        extra_rows,
        aux_dp,
    };
    Ok((tape, Matrix::from_vec(b, h.cols(), data)?, aux))
}

/// Load-balancing loss `coeff * N * sum_i f_i * P_i` and its gradient with
/// respect to each row's routing probabilities. `f_i` is the fraction of
/// routing slots assigned to expert `i` and is treated as a constant.
fn aux_terms(routes: &[RouteDetail], n: usize, k: usize, coeff: f64) -> (f64, Vec<f64>) {
    let b = routes.len() as f64;
    let mut counts = vec![0.0; n];
    let mut mean_p = vec![0.0; n];
    for rd in routes {
        for &i in &rd.selected {
            counts[i] += 1.0;
        }
        for (mp, p) in mean_p.iter_mut().zip(&rd.probs) {
            *mp += p / b;
        }
    }
    let f: Vec<f64> = counts.iter().map(|c| c / (b * k as f64)).collect();
    let scale = coeff * n as f64;
    let loss = scale * f.iter().zip(&mean_p).map(|(a, p)| a * p).sum::<f64>();
    let dp = f.iter().map(|fi| scale * fi / b).collect();
    (loss, dp)
}

/// Gradients with respect to synthesized weights, before mapping onto stored parameters.
struct Acc {
    embed: Option<Matrix>,
    blocks: Vec<BlockAcc>,
    readout: Matrix,
}

enum BlockAcc {
    Dense(Matrix, Matrix),
    Moe {
        router: Matrix,
        members: Vec<Option<(Matrix, Matrix)>>,
        universal: Option<(Matrix, Matrix)>,
    },
}

impl Acc {
    fn zeros(model: &Model, tape: &Tape) -> Self {
        let blocks = model
            .blocks
            .iter()
            .zip(&tape.blocks)
            .map(|(b, t)| match (b, t) {
                (Block::Dense(f), _) => BlockAcc::Dense(
                    Matrix::zeros(f.w_in.rows(), f.w_in.cols()),
                    Matrix::zeros(f.w_out.rows(), f.w_out.cols()),
                ),
                (Block::Moe(m), BlockTape::Moe(mt)) => BlockAcc::Moe {
                    router: Matrix::zeros(m.router.w_r.rows(), m.router.w_r.cols()),
                    members: mt
                        .members
                        .iter()
                        .map(|w| w.as_ref().map(|(a, b)| (zeros_like(a), zeros_like(b))))
                        .collect(),
                    universal: match &m.universal {
                        Universal::Parallel(u) => Some((zeros_like(&u.w_in), zeros_like(&u.w_out))),
                        _ => None,
                    },
                },
                (Block::Moe(_), BlockTape::Dense(_)) => unreachable!("tape matches model"),
            })
            .collect();
        Acc {
            embed: model.embed.as_ref().map(zeros_like),
            blocks,
            readout: zeros_like(&model.readout),
        }
    }

    fn add(&mut self, other: &Acc) {
        if let (Some(a), Some(b)) = (&mut self.embed, &other.embed) {
            add_m(a, b);
        }
        add_m(&mut self.readout, &other.readout);
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            match (a, b) {
                (BlockAcc::Dense(a1, a2), BlockAcc::Dense(b1, b2)) => {
                    add_m(a1, b1);
                    add_m(a2, b2);
                }
                (
                    BlockAcc::Moe {
                        router,
                        members,
                        universal,
                    },
                    BlockAcc::Moe {
                        router: r2,
                        members: m2,
                        universal: u2,
                    },
                ) => {
                    add_m(router, r2);
                    for (x, y) in members.iter_mut().zip(m2) {
                        if let (Some((x1, x2)), Some((y1, y2))) = (x, y) {
                            add_m(x1, y1);
                            add_m(x2, y2);
                        }
                    }
                    if let (Some((x1, x2)), Some((y1, y2))) = (universal, u2) {
                        add_m(x1, y1);
                        add_m(x2, y2);
                    }
                }
                _ => unreachable!("accumulators share layout"),
            }
        }
    }
}

fn zeros_like(m: &Matrix) -> Matrix {
    Matrix::zeros(m.rows(), m.cols())
}

fn add_m(a: &mut Matrix, b: &Matrix) {
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}

/// Backward through one FFN row. Adds weight gradients and returns `dL/dx`.
fn ffn_backward(
    w_in: &Matrix,
    w_out: &Matrix,
    act: Activation,
    x: &[f64],
    fr: &FfnRow,
    g: &[f64],
    g_in: &mut Matrix,
    g_out: &mut Matrix,
) -> Vec<f64> {
    add_outer(g_out, &fr.act, g);
    let dact = matvec_t(w_out, g).expect("ffn shape");
    let dpre: Vec<f64> = dact
        .iter()
        .zip(&fr.pre)
        .map(|(d, p)| d * act.derivative(*p))
        .collect();
    add_outer(g_in, x, &dpre);
    matvec_t(w_in, &dpre).expect("ffn shape")
}

fn backward_row(model: &Model, tape: &Tape, input: &Matrix, r: usize, dout: &[f64], acc: &mut Acc) {
    let h_last = tape.hs.last().expect("readout input").row(r);
    add_outer(&mut acc.readout, h_last, dout);
    let mut g = matvec_t(&model.readout, dout).expect("readout shape");
    for l in (0..model.blocks.len()).rev() {
        let x = tape.hs[l].row(r);
        let mut dx = g.clone();
        match (&model.blocks[l], &tape.blocks[l], &mut acc.blocks[l]) {
            (Block::Dense(f), BlockTape::Dense(rows), BlockAcc::Dense(gi, go)) => {
                let d = ffn_backward(&f.w_in, &f.w_out, f.activation, x, &rows[r], &g, gi, go);
                add_v(&mut dx, &d);
            }
            (
                Block::Moe(m),
                BlockTape::Moe(mt),
                BlockAcc::Moe {
                    router,
                    members,
                    universal,
                },
            ) => {
                let rd = &mt.routes[r];
                let mut dp = mt.aux_dp.clone();
                for (slot, &i) in rd.selected.iter().enumerate() {
                    let fr = &mt.expert_rows[r][slot];
                    let s = rd.probs[i];
                    dp[i] += dot(&g, &fr.out);
                    let ge: Vec<f64> = g.iter().map(|v| s * v).collect();
                    let (wi, wo) = mt.members[i].as_ref().expect("synthesized");
                    let (gi, go) = members[i].as_mut().expect("allocated");
                    let d = ffn_backward(wi, wo, m.activation, x, fr, &ge, gi, go);
                    add_v(&mut dx, &d);
                }
                if let Some(fr) = &mt.extra_rows[r] {
                    let d = match (&m.universal, universal.as_mut()) {
                        (Universal::Parallel(u), Some((gi, go))) => {
                            ffn_backward(&u.w_in, &u.w_out, u.activation, x, fr, &g, gi, go)
                        }
                        _ => {
                            let n = m.n_experts();
                            let (wi, wo) = mt.members[n].as_ref().expect("synthesized");
                            let (gi, go) = members[n].as_mut().expect("allocated");
                            ffn_backward(wi, wo, m.activation, x, fr, &g, gi, go)
                        }
                    };
                    add_v(&mut dx, &d);
                }
                let inner = dot(&rd.probs, &dp);
                let dz: Vec<f64> = rd
                    .probs
                    .iter()
                    .zip(&dp)
                    .map(|(p, d)| p * (d - inner))
                    .collect();
                add_outer(router, x, &dz);
                add_v(
                    &mut dx,
                    &matvec_t(&m.router.w_r, &dz).expect("router shape"),
                );
            }
            _ => unreachable!("tape matches model"),
        }
        g = dx;
    }
    if let Some(ge) = &mut acc.embed {
        add_outer(ge, input.row(r), &g);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_v(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Maps a weight gradient `g` for member `member` of a group onto its stored delta.
fn delta_grads(
    grads: &mut GradientSet,
    block: usize,
    matrix: FfnMatrix,
    member: usize,
    d: &DeltaWeight,
    g: &Matrix,
) {
    let id = |part| ParamId::Delta {
        block,
        matrix,
        member,
        part,
    };
    match d {
        DeltaWeight::Dense(_) => grads.accumulate(id(DeltaPart::Dense), g.data()),
        DeltaWeight::Sparse(s) => {
            let gv: Vec<f64> = s
                .index()
                .iter()
                .map(|&i| g.data()[i as usize] * s.rescale())
                .collect();
            grads.accumulate(id(DeltaPart::Values), &gv);
        }
        DeltaWeight::LowRank(l) => {
            let ga = matmul(g, &l.b.transpose()).expect("low-rank shape");
            let gb = matmul(&l.a.transpose(), g).expect("low-rank shape");
            grads.accumulate(id(DeltaPart::A), ga.data());
            grads.accumulate(id(DeltaPart::B), gb.data());
        }
        DeltaWeight::Quantized(_) => {}
    }
}

fn to_gradient_set(model: &Model, acc: &Acc) -> GradientSet {
    let mut grads = GradientSet::zeros_for(model);
    if let Some(e) = &acc.embed {
        grads.accumulate(ParamId::Embed, e.data());
    }
    grads.accumulate(ParamId::Readout, acc.readout.data());
    for (block, (b, a)) in model.blocks.iter().zip(&acc.blocks).enumerate() {
        match (b, a) {
            (Block::Dense(_), BlockAcc::Dense(gi, go)) => {
                grads.accumulate(
                    ParamId::DenseFfn {
                        block,
                        matrix: FfnMatrix::In,
                    },
                    gi.data(),
                );
                grads.accumulate(
                    ParamId::DenseFfn {
                        block,
                        matrix: FfnMatrix::Out,
                    },
                    go.data(),
                );
            }
            (
                Block::Moe(m),
                BlockAcc::Moe {
                    router,
                    members,
                    universal,
                },
            ) => {
                grads.accumulate(ParamId::Router { block }, router.data());
                for matrix in FfnMatrix::BOTH {
                    let group = m.group(matrix);
                    for (member, mg) in members.iter().enumerate() {
                        let Some(pair) = mg else { continue };
                        let g = match matrix {
                            FfnMatrix::In => &pair.0,
                            FfnMatrix::Out => &pair.1,
                        };
                        if shared_trainable(m) {
                            grads.accumulate(ParamId::Shared { block, matrix }, g.data());
                        }
                        if deltas_trainable(m) {
                            delta_grads(
                                &mut grads,
                                block,
                                matrix,
                                member,
                                &group.deltas[member],
                                g,
                            );
                        }
                    }
                }
                if let Some((gi, go)) = universal {
                    grads.accumulate(
                        ParamId::Universal {
                            block,
                            matrix: FfnMatrix::In,
                        },
                        gi.data(),
                    );
                    grads.accumulate(
                        ParamId::Universal {
                            block,
                            matrix: FfnMatrix::Out,
                        },
                        go.data(),
                    );
                }
            }
            _ => unreachable!("accumulator matches model"),
        }
    }
    grads
}

/// Total loss (task plus `aux_coeff`-weighted load balancing) and its exact
/// gradient with respect to every trainable parameter.
pub fn loss_and_grads(
    model: &Model,
    x: &Matrix,
    targets: &Targets,
    aux_coeff: f64,
) -> Result<(LossBreakdown, GradientSet)> {
    if targets.len() != x.rows() {
        return Err(DersError::dim(
            "targets",
            x.shape(),
            (targets.len(), model.d_out()),
        ));
    }
    let tape = forward_tape(model, x, aux_coeff)?;
    let task = task_loss(&tape.out, targets)?;
    let dout = task_loss_grad(&tape.out, targets)?;
    let chunks: Vec<Acc> = (0..x.rows().div_ceil(CHUNK_ROWS))
        .into_par_iter()
        .map(|c| {
            let mut acc = Acc::zeros(model, &tape);
            let end = ((c + 1) * CHUNK_ROWS).min(x.rows());
            for r in c * CHUNK_ROWS..end {
                backward_row(model, &tape, x, r, dout.row(r), &mut acc);
            }
            acc
        })
        .collect();
    let mut chunks = chunks.into_iter();
    let mut acc = chunks.next().expect("non-empty batch");
    for c in chunks {
        acc.add(&c);
    }
    let grads = to_gradient_set(model, &acc);
    if grads.iter().any(|(_, v)| v.iter().any(|g| !g.is_finite())) {
        return Err(DersError::Numeric {
            location: "backward".into(),
            detail: "non-finite gradient".into(),
        });
    }
    let loss = LossBreakdown {
        total: task + tape.aux,
        task,
        aux: tape.aux,
    };
    Ok((loss, grads))
}

/// Loss without gradients.
pub fn loss_only(
    model: &Model,
    x: &Matrix,
    targets: &Targets,
    aux_coeff: f64,
) -> Result<LossBreakdown> {
    let tape = forward_tape(model, x, aux_coeff)?;
    let task = task_loss(&tape.out, targets)?;
    Ok(LossBreakdown {
        total: task + tape.aux,
        task,
        aux: tape.aux,
    })
}

/// Top-k expert sets chosen for each row, one entry per MoE block in block order.
pub fn selected_experts(model: &Model, x: &Matrix) -> Result<Vec<Vec<Vec<usize>>>> {
    let tape = forward_tape(model, x, 0.0)?;
    Ok(tape
        .blocks
        .iter()
        .filter_map(|b| match b {
            BlockTape::Moe(mt) => Some(mt.routes.iter().map(|r| r.selected.clone()).collect()),
            BlockTape::Dense(_) => None,
        })
        .collect())
}
