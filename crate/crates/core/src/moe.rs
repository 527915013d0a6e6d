//! Router, feed-forward blocks, MoE layers and the model forward pass.
//!
//! An MoE layer computes `y = Σ_i s_i(x) · E_i(x)` with
//! `s(x) = TopK(softmax(x · W_R), k)`. Expert weights are synthesized from the
//! layer's expert groups on demand: only experts selected by at least one row
//! of the current batch are built. Blocks are residual (`h ← h + block(h)`).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deltas::{DeltaWeight, ExpertGroup};
use crate::error::{DersError, Result};
use crate::numkern::{softmax, topk_indices, vecmat, Matrix, RngStream};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// tanh approximation
    #[default]
    Gelu,
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnMatrix {
    In,
    Out,
}

impl FfnMatrix {
    pub const BOTH: [FfnMatrix; 2] = [FfnMatrix::In, FfnMatrix::Out];

    pub fn index(self) -> u64 {
        match self {
            FfnMatrix::In => 0,
            FfnMatrix::Out => 1,
        }
    }
}

/// Two-matrix feed-forward network `act(x · w_in) · w_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ffn {
    pub w_in: Matrix,
    pub w_out: Matrix,
    pub activation: Activation,
}

impl Ffn {
    pub fn new(w_in: Matrix, w_out: Matrix, activation: Activation) -> Result<Self> {
        if w_in.cols() != w_out.rows() || w_in.rows() != w_out.cols() {
            return Err(DersError::dim("ffn", w_in.shape(), w_out.shape()));
        }
        Ok(Self {
            w_in,
            w_out,
            activation,
        })
    }

    pub fn random(d: usize, d_hidden: usize, activation: Activation, rng: &mut RngStream) -> Self {
        Self {
            w_in: Matrix::uniform(d, d_hidden, 1.0 / (d as f64).sqrt(), rng),
            w_out: Matrix::uniform(d_hidden, d, 1.0 / (d_hidden as f64).sqrt(), rng),
            activation,
        }
    }

    pub fn matrix(&self, which: FfnMatrix) -> &Matrix {
        match which {
            FfnMatrix::In => &self.w_in,
            FfnMatrix::Out => &self.w_out,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(ffn_row(&self.w_in, &self.w_out, self.activation, x)?.out)
    }
}

/// Intermediate values of one FFN evaluation on one row.
#[derive(Clone, Debug)]
pub(crate) struct FfnRow {
    pub pre: Vec<f64>,
    pub act: Vec<f64>,
    pub out: Vec<f64>,
}

pub(crate) fn ffn_row(w_in: &Matrix, w_out: &Matrix, act: Activation, x: &[f64]) -> Result<FfnRow> {
    let pre = vecmat(x, w_in)?;
    let a: Vec<f64> = pre.iter().map(|&v| act.apply(v)).collect();
    let out = vecmat(&a, w_out)?;
    Ok(FfnRow { pre, act: a, out })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Router {
    pub w_r: Matrix,
    pub topk_count: usize,
}

impl Router {
    pub fn new(w_r: Matrix, topk_count: usize) -> Result<Self> {
        if topk_count == 0 || topk_count > w_r.cols() {
            return Err(DersError::param(format!(
                "top-k count {topk_count} outside [1, {}]",
                w_r.cols()
            )));
        }
        Ok(Self { w_r, topk_count })
    }

    pub fn n_experts(&self) -> usize {
        self.w_r.cols()
    }
}

/// Routing scores: softmax probabilities with everything outside the top-k zeroed.
pub fn route(router: &Router, x: &[f64]) -> Result<Vec<f64>> {
    let d = route_detail(router, x)?;
    Ok(d.scores())
}

#[derive(Clone, Debug)]
pub(crate) struct RouteDetail {
    pub probs: Vec<f64>,
    pub selected: Vec<usize>,
}

impl RouteDetail {
    pub fn scores(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.probs.len()];
        for &i in &self.selected {
            s[i] = self.probs[i];
        }
        s
    }
}

pub(crate) fn route_detail(router: &Router, x: &[f64]) -> Result<RouteDetail> {
    let logits = vecmat(x, &router.w_r)?;
    let probs = softmax(&logits)?;
    let mut selected = topk_indices(&probs, router.topk_count)?;
    selected.sort_unstable();
    Ok(RouteDetail { probs, selected })
}

/// How the layer's expert-group base is used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "role")]
pub enum BaseRole {
    /// The base is the recorded pre-fine-tuning weight; experts train through
    /// their dense deltas and the base itself never changes.
    InitRecord,
    /// The base is a shared weight that trains unless frozen.
    Shared { frozen: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Universal {
    None,
    /// Always-active FFN summed with the MoE output.
    Parallel(Ffn),
    /// The universal FFN lives in the expert groups as the last member and is always active.
    Folded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerOrigin {
    Vanilla,
    DersSm,
    DersLm,
    Compressed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoELayer {
    pub router: Router,
    pub w_in: ExpertGroup,
    pub w_out: ExpertGroup,
    pub activation: Activation,
    pub base_role: BaseRole,
    pub universal: Universal,
    pub origin: LayerOrigin,
    /// FFN weights at upcycle time, kept for layers whose base moves during training.
    pub init_record: Option<(Matrix, Matrix)>,
}

impl MoELayer {
    pub fn n_experts(&self) -> usize {
        self.router.n_experts()
    }

    pub fn is_extended(&self) -> bool {
        matches!(self.universal, Universal::Folded)
    }

    /// Number of group members: `N`, or `N + 1` when the universal FFN is folded in.
    pub fn n_members(&self) -> usize {
        self.n_experts() + usize::from(self.is_extended())
    }

    pub fn group(&self, which: FfnMatrix) -> &ExpertGroup {
        match which {
            FfnMatrix::In => &self.w_in,
            FfnMatrix::Out => &self.w_out,
        }
    }

    pub fn group_mut(&mut self, which: FfnMatrix) -> &mut ExpertGroup {
        match which {
            FfnMatrix::In => &mut self.w_in,
            FfnMatrix::Out => &mut self.w_out,
        }
    }

    /// The FFN weights this layer was upcycled from.
    pub fn initial_weights(&self) -> Option<(&Matrix, &Matrix)> {
        match (&self.init_record, self.base_role) {
            (Some((a, b)), _) => Some((a, b)),
            (None, BaseRole::InitRecord) => Some((&self.w_in.base, &self.w_out.base)),
            _ => None,
        }
    }

    pub fn synthesize_member(&self, member: usize) -> Result<(Matrix, Matrix)> {
        Ok((
            self.w_in.synthesize(member)?,
            self.w_out.synthesize(member)?,
        ))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_members();
        for g in [&self.w_in, &self.w_out] {
            if g.deltas.len() != n {
                return Err(DersError::State(format!(
                    "expert group has {} deltas, expected {n}",
                    g.deltas.len()
                )));
            }
            for d in &g.deltas {
                if d.shape() != g.base.shape() {
                    return Err(DersError::dim("expert_group", g.base.shape(), d.shape()));
                }
            }
        }
        if self.router.w_r.rows() != self.w_in.base.rows() {
            return Err(DersError::dim(
                "router",
                self.router.w_r.shape(),
                self.w_in.base.shape(),
            ));
        }
        if self.w_in.base.cols() != self.w_out.base.rows()
            || self.w_in.base.rows() != self.w_out.base.cols()
        {
            return Err(DersError::dim(
                "moe",
                self.w_in.base.shape(),
                self.w_out.base.shape(),
            ));
        }
        Ok(())
    }
}

/// Lazily synthesized expert weights for one layer and one batch.
pub(crate) struct ExpertCache<'a> {
    layer: &'a MoELayer,
    slots: Vec<Option<(Matrix, Matrix)>>,
    pub synthesized: usize,
}

impl<'a> ExpertCache<'a> {
    pub fn new(layer: &'a MoELayer) -> Self {
        Self {
            layer,
            slots: vec![None; layer.n_members()],
            synthesized: 0,
        }
    }

    pub fn ensure(&mut self, member: usize) -> Result<()> {
        if self.slots[member].is_none() {
            self.slots[member] = Some(self.layer.synthesize_member(member)?);
            self.synthesized += 1;
        }
        Ok(())
    }

    pub fn get(&self, member: usize) -> &(Matrix, Matrix) {
        self.slots[member].as_ref().expect("expert not synthesized")
    }
}

/// MoE output for one row.
pub fn moe_forward(layer: &MoELayer, x: &[f64]) -> Result<Vec<f64>> {
    let batch = Matrix::row_vector(x);
    let (out, _) = moe_forward_batch(layer, &batch)?;
    Ok(out.row(0).to_vec())
}

/// MoE output for every row of `batch`, plus the number of expert syntheses performed.
pub fn moe_forward_batch(layer: &MoELayer, batch: &Matrix) -> Result<(Matrix, usize)> {
    let d = layer.w_in.base.rows();
    if batch.cols() != d {
        return Err(DersError::dim(
            "moe_forward",
            batch.shape(),
            layer.w_in.base.shape(),
        ));
    }
    let routes: Vec<RouteDetail> = (0..batch.rows())
        .map(|r| route_detail(&layer.router, batch.row(r)))
        .collect::<Result<_>>()?;
    let mut cache = ExpertCache::new(layer);
    for rd in &routes {
        for &i in &rd.selected {
            cache.ensure(i)?;
        }
    }
    let folded = layer.n_experts();
    if layer.is_extended() {
        cache.ensure(folded)?;
    }
    let act = layer.activation;
    let rows: Vec<Vec<f64>> = (0..batch.rows())
        .into_par_iter()
        .map(|r| {
            let x = batch.row(r);
            let mut y = vec![0.0; d];
            for &i in &routes[r].selected {
                let (wi, wo) = cache.get(i);
                let e = ffn_row(wi, wo, act, x)?;
                let s = routes[r].probs[i];
                for (yy, ee) in y.iter_mut().zip(&e.out) {
                    *yy += s * ee;
                }
            }
            match &layer.universal {
                Universal::None => {}
                Universal::Parallel(u) => add_into(&mut y, &u.forward(x)?),
                Universal::Folded => {
                    let (wi, wo) = cache.get(folded);
                    add_into(&mut y, &ffn_row(wi, wo, act, x)?.out);
                }
            }
            Ok(y)
        })
        .collect::<Result<_>>()?;
    let data = rows.into_iter().flatten().collect();
    Ok((Matrix::from_vec(batch.rows(), d, data)?, cache.synthesized))
}

fn add_into(y: &mut [f64], v: &[f64]) {
    for (a, b) in y.iter_mut().zip(v) {
        *a += b;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Dense(Ffn),
    Moe(MoELayer),
}

/// Embedding, residual blocks and a linear readout.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    /// `d_in × d_model`; `None` feeds inputs straight into the blocks.
    pub embed: Option<Matrix>,
    pub blocks: Vec<Block>,
    /// `d_model × d_out`
    pub readout: Matrix,
    /// Parameter count of the dense model this one descends from.
    pub ancestor_params: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseDims {
    pub d_in: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub depth: usize,
    pub d_out: usize,
}

impl Model {
    /// Randomly initialized dense model. Its own parameter count becomes `ancestor_params`.
    pub fn dense(dims: DenseDims, activation: Activation, seed: u64) -> Self {
        let mut rng = RngStream::scoped(seed, &[0xDE45E, 0]);
        let embed = Matrix::uniform(
            dims.d_in,
            dims.d_model,
            1.0 / (dims.d_in as f64).sqrt(),
            &mut rng,
        );
        let blocks = (0..dims.depth)
            .map(|l| {
                let mut r = RngStream::scoped(seed, &[0xDE45E, 1, l as u64]);
                Block::Dense(Ffn::random(dims.d_model, dims.d_hidden, activation, &mut r))
            })
            .collect();
        let mut r = RngStream::scoped(seed, &[0xDE45E, 2]);
        let readout = Matrix::uniform(
            dims.d_model,
            dims.d_out,
            1.0 / (dims.d_model as f64).sqrt(),
            &mut r,
        );
        let mut m = Model {
            embed: Some(embed),
            blocks,
            readout,
            ancestor_params: 0,
        };
        m.ancestor_params = m.dense_param_count();
        m
    }

    pub fn d_in(&self) -> usize {
        self.embed
            .as_ref()
            .map_or(self.readout.rows(), |e| e.rows())
    }

    pub fn d_model(&self) -> usize {
        self.readout.rows()
    }

    pub fn d_out(&self) -> usize {
        self.readout.cols()
    }

    /// Plain parameter count for models without MoE layers.
    fn dense_param_count(&self) -> u64 {
        let mut n = self.readout.len() + self.embed.as_ref().map_or(0, Matrix::len);
        for b in &self.blocks {
            if let Block::Dense(f) = b {
                n += f.w_in.len() + f.w_out.len();
            }
        }
        n as u64
    }

    pub fn moe_layers(&self) -> impl Iterator<Item = (usize, &MoELayer)> {
        self.blocks.iter().enumerate().filter_map(|(i, b)| match b {
            Block::Moe(m) => Some((i, m)),
            Block::Dense(_) => None,
        })
    }

    pub fn is_dense(&self) -> bool {
        self.blocks.iter().all(|b| matches!(b, Block::Dense(_)))
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        if let Some(e) = &self.embed {
            if e.cols() != d {
                return Err(DersError::dim("embed", e.shape(), self.readout.shape()));
            }
        }
        for b in &self.blocks {
            match b {
                Block::Dense(f) => {
                    if f.w_in.rows() != d || f.w_out.cols() != d || f.w_in.cols() != f.w_out.rows()
                    {
                        return Err(DersError::dim("block", f.w_in.shape(), f.w_out.shape()));
                    }
                }
                Block::Moe(m) => {
                    m.validate()?;
                    if m.w_in.base.rows() != d {
                        return Err(DersError::dim(
                            "block",
                            m.w_in.base.shape(),
                            self.readout.shape(),
                        ));
                    }
                    if let Universal::Parallel(u) = &m.universal {
                        if u.w_in.shape() != m.w_in.base.shape()
                            || u.w_out.shape() != m.w_out.base.shape()
                        {
                            return Err(DersError::dim(
                                "universal",
                                u.w_in.shape(),
                                m.w_in.base.shape(),
                            ));
                        }
                    }
                }
            }
        }
        if self.ancestor_params == 0 {
            return Err(DersError::State("ancestor parameter count is zero".into()));
        }
        Ok(())
    }
}

/// Per-block synthesis counts from one forward call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardStats {
    pub synthesized: Vec<(usize, usize)>,
}

pub fn model_forward(model: &Model, batch: &Matrix) -> Result<Matrix> {
    Ok(model_forward_traced(model, batch)?.0)
}

pub fn model_forward_traced(model: &Model, batch: &Matrix) -> Result<(Matrix, ForwardStats)> {
    if batch.cols() != model.d_in() {
        return Err(DersError::dim(
            "model_forward",
            batch.shape(),
            (model.d_in(), model.d_model()),
        ));
    }
    let mut h = match &model.embed {
        Some(e) => batch.matmul(e)?,
        None => batch.clone(),
    };
    let mut stats = ForwardStats::default();
    for (l, block) in model.blocks.iter().enumerate() {
        let delta = match block {
            Block::Dense(f) => {
                let rows: Vec<Vec<f64>> = (0..h.rows())
                    .into_par_iter()
                    .map(|r| f.forward(h.row(r)))
                    .collect::<Result<_>>()?;
                Matrix::from_vec(h.rows(), h.cols(), rows.into_iter().flatten().collect())?
            }
            Block::Moe(m) => {
                let (out, n) = moe_forward_batch(m, &h)?;
                stats.synthesized.push((l, n));
                out
            }
        };
        h.add_assign(&delta)?;
        if !h.is_finite() {
            return Err(DersError::Numeric {
                location: format!("block {l}"),
                detail: "non-finite activation".into(),
            });
        }
    }
    Ok((h.matmul(&model.readout)?, stats))
}

/// Builds a layer's delta list from dense zero deltas (vanilla experts over a recorded base).
pub(crate) fn zero_dense_deltas(n: usize, shape: (usize, usize)) -> Vec<DeltaWeight> {
    (0..n)
        .map(|_| DeltaWeight::zero_dense(shape.0, shape.1))
        .collect()
}
