//! Expert delta weights: the per-expert difference from a shared base weight,
//! in dense, sparse (index/value), low-rank, and bit-packed quantized form.

use serde::{Deserialize, Serialize};

use crate::error::{DersError, Result};
use crate::numkern::{bernoulli_mask, matmul, sample_unique_indices, Matrix, RngStream};

/// Bit widths accepted by [`quantize`].
pub const SUPPORTED_BIT_WIDTHS: [u8; 5] = [1, 2, 4, 8, 16];

#[derive(Clone, Debug, PartialEq)]
pub struct DenseDelta {
    pub mat: Matrix,
}

/// A delta stored as flat row-major positions plus values.
///
/// Materializes to `value[j] * rescale` at `index[j]` and zero elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDelta {
    rows: usize,
    cols: usize,
    index: Vec<u32>,
    value: Vec<f64>,
    rescale: f64,
}

impl SparseDelta {
    pub fn new(
        rows: usize,
        cols: usize,
        index: Vec<u32>,
        value: Vec<f64>,
        rescale: f64,
    ) -> Result<Self> {
        if index.len() != value.len() {
            return Err(DersError::Corruption(format!(
                "{} indices but {} values",
                index.len(),
                value.len()
            )));
        }
        if index.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DersError::Corruption(
                "sparse index not strictly increasing".into(),
            ));
        }
        if let Some(&last) = index.last() {
            if last as usize >= rows * cols {
                return Err(DersError::Corruption(format!(
                    "index {last} outside {rows}x{cols}"
                )));
            }
        }
        if !rescale.is_finite() {
            return Err(DersError::Corruption("non-finite rescale".into()));
        }
        Ok(Self {
            rows,
            cols,
            index,
            value,
            rescale,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn index(&self) -> &[u32] {
        &self.index
    }

    pub fn values(&self) -> &[f64] {
        &self.value
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.value
    }

    pub fn rescale(&self) -> f64 {
        self.rescale
    }

    pub fn nnz(&self) -> usize {
        self.index.len()
    }
}

/// `a · b` with `a: rows × rank` and `b: rank × cols`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankDelta {
    pub a: Matrix,
    pub b: Matrix,
}

impl LowRankDelta {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        if a.cols() != b.rows() || a.cols() == 0 {
            return Err(DersError::Corruption(format!(
                "low-rank factors {:?} and {:?} do not share a positive rank",
                a.shape(),
                b.shape()
            )));
        }
        Ok(Self { a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.a.rows(), self.b.cols())
    }
}

/// Codes of `bit_width` bits each, packed LSB-first in row-major order, with a
/// single per-matrix scale.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedDelta {
    rows: usize,
    cols: usize,
    bit_width: u8,
    packed: Vec<u8>,
    scale: f64,
}

impl QuantizedDelta {
    pub fn from_parts(
        rows: usize,
        cols: usize,
        bit_width: u8,
        packed: Vec<u8>,
        scale: f64,
    ) -> Result<Self> {
        check_bit_width(bit_width).map_err(|e| DersError::Corruption(e.to_string()))?;
        let want = packed_len(rows * cols, bit_width);
        if packed.len() != want {
            return Err(DersError::Corruption(format!(
                "packed payload has {} bytes, expected {want}",
                packed.len()
            )));
        }
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(DersError::Corruption(format!("invalid scale {scale}")));
        }
        Ok(Self {
            rows,
            cols,
            bit_width,
            packed,
            scale,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn bit_width(&self) -> u8 {
        self.bit_width
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn code_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Signed integer codes (`±1` for 1-bit).
    pub fn codes(&self) -> Vec<i32> {
        let k = self.bit_width as usize;
        (0..self.code_count())
            .map(|j| {
                let raw = read_bits(&self.packed, j * k, k);
                if k == 1 {
                    if raw == 1 {
                        1
                    } else {
                        -1
                    }
                } else {
                    sign_extend(raw, k)
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DeltaWeight {
    Dense(DenseDelta),
    Sparse(SparseDelta),
    LowRank(LowRankDelta),
    Quantized(QuantizedDelta),
}

impl DeltaWeight {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            DeltaWeight::Dense(d) => d.mat.shape(),
            DeltaWeight::Sparse(s) => s.shape(),
            DeltaWeight::LowRank(l) => l.shape(),
            DeltaWeight::Quantized(q) => q.shape(),
        }
    }

    pub fn encoding(&self) -> DeltaEncoding {
        match self {
            DeltaWeight::Dense(_) => DeltaEncoding::Dense,
            DeltaWeight::Sparse(_) => DeltaEncoding::Sparse,
            DeltaWeight::LowRank(_) => DeltaEncoding::LowRank,
            DeltaWeight::Quantized(_) => DeltaEncoding::Quantized,
        }
    }

    pub fn zero_dense(rows: usize, cols: usize) -> Self {
        DeltaWeight::Dense(DenseDelta {
            mat: Matrix::zeros(rows, cols),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaEncoding {
    Dense,
    Sparse,
    LowRank,
    Quantized,
}

/// One shared base weight plus per-expert deltas.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertGroup {
    pub base: Matrix,
    pub deltas: Vec<DeltaWeight>,
}

impl ExpertGroup {
    pub fn new(base: Matrix, deltas: Vec<DeltaWeight>) -> Result<Self> {
        for d in &deltas {
            if d.shape() != base.shape() {
                return Err(DersError::dim("expert_group", base.shape(), d.shape()));
            }
        }
        Ok(Self { base, deltas })
    }

    pub fn synthesize(&self, member: usize) -> Result<Matrix> {
        synthesize(&self.base, &self.deltas[member])
    }
}

pub fn decompose(base: &Matrix, trained: &Matrix) -> Result<DenseDelta> {
    if base.shape() != trained.shape() {
        return Err(DersError::dim("decompose", base.shape(), trained.shape()));
    }
    Ok(DenseDelta {
        mat: trained.sub(base)?,
    })
}

pub fn synthesize(base: &Matrix, delta: &DeltaWeight) -> Result<Matrix> {
    if base.shape() != delta.shape() {
        return Err(DersError::dim("synthesize", base.shape(), delta.shape()));
    }
    match delta {
        DeltaWeight::Sparse(s) => {
            // Only touch stored positions.
            let mut out = base.clone();
            let data = out.data_mut();
            for (&i, &v) in s.index.iter().zip(&s.value) {
                data[i as usize] += v * s.rescale;
            }
            Ok(out)
        }
        _ => base.add(&materialize(delta)?),
    }
}

pub fn materialize(delta: &DeltaWeight) -> Result<Matrix> {
    match delta {
        DeltaWeight::Dense(d) => Ok(d.mat.clone()),
        DeltaWeight::Sparse(s) => {
            let mut out = Matrix::zeros(s.rows, s.cols);
            let data = out.data_mut();
            for (&i, &v) in s.index.iter().zip(&s.value) {
                let slot = data.get_mut(i as usize).ok_or_else(|| {
                    DersError::Corruption(format!("index {i} outside {}x{}", s.rows, s.cols))
                })?;
                *slot = v * s.rescale;
            }
            Ok(out)
        }
        DeltaWeight::LowRank(l) => {
            matmul(&l.a, &l.b).map_err(|e| DersError::Corruption(e.to_string()))
        }
        DeltaWeight::Quantized(q) => {
            let data = q.codes().into_iter().map(|c| c as f64 * q.scale).collect();
            Matrix::from_vec(q.rows, q.cols, data)
        }
    }
}

/// How sparsification picks the kept positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Each entry dropped independently with probability `p`.
    Bernoulli,
    /// Exactly `round(len · (1 - p))` entries kept, chosen uniformly without replacement.
    #[default]
    ExactCount,
}

fn check_drop_rate(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(DersError::param(format!("drop rate {p} outside [0, 1)")));
    }
    Ok(())
}

/// Number of positions kept at drop rate `p` (round to nearest).
pub fn kept_count(total: usize, p: f64) -> usize {
    (total as f64 * (1.0 - p)).round() as usize
}

/// Random drop with `1/(1-p)` rescale, masking each entry with an i.i.d. Bernoulli(p) draw.
pub fn sparsify(delta: &DenseDelta, p: f64, rng: &mut RngStream) -> Result<SparseDelta> {
    sparsify_with(delta, p, MaskMode::Bernoulli, rng)
}

pub fn sparsify_with(
    delta: &DenseDelta,
    p: f64,
    mode: MaskMode,
    rng: &mut RngStream,
) -> Result<SparseDelta> {
    check_drop_rate(p)?;
    let (rows, cols) = delta.mat.shape();
    let index: Vec<u32> = match mode {
        MaskMode::Bernoulli => {
            let mask = bernoulli_mask(p, rows, cols, rng)?;
            mask.data()
                .iter()
                .enumerate()
                .filter(|(_, &m)| m == 0.0)
                .map(|(i, _)| i as u32)
                .collect()
        }
        MaskMode::ExactCount => {
            sample_unique_indices(rows * cols, kept_count(rows * cols, p), rng)?
        }
    };
    let src = delta.mat.data();
    let value = index.iter().map(|&i| src[i as usize]).collect();
    SparseDelta::new(rows, cols, index, value, 1.0 / (1.0 - p))
}

pub fn check_bit_width(k: u8) -> Result<()> {
    if SUPPORTED_BIT_WIDTHS.contains(&k) {
        Ok(())
    } else {
        Err(DersError::param(format!(
            "bit width {k} not in {SUPPORTED_BIT_WIDTHS:?}"
        )))
    }
}

/// Largest code magnitude for `k ≥ 2`.
pub fn max_code(k: u8) -> i64 {
    (1i64 << (k - 1)) - 1
}

/// Per-matrix quantization. `k ≥ 2`: symmetric absmax with
/// `scale = absmax / (2^(k-1) - 1)`. `k == 1`: sign with `scale = mean |x|`.
pub fn quantize(delta: &DenseDelta, k: u8) -> Result<QuantizedDelta> {
    check_bit_width(k)?;
    let (rows, cols) = delta.mat.shape();
    let data = delta.mat.data();
    let n = data.len();
    let mut packed = vec![0u8; packed_len(n, k)];
    let kk = k as usize;
    let scale;
    if k == 1 {
        scale = if n == 0 {
            0.0
        } else {
            data.iter().map(|x| x.abs()).sum::<f64>() / n as f64
        };
        for (j, &x) in data.iter().enumerate() {
            write_bits(&mut packed, j, 1, u64::from(x >= 0.0));
        }
    } else {
        let absmax = delta.mat.max_abs();
        let qmax = max_code(k);
        scale = absmax / qmax as f64;
        for (j, &x) in data.iter().enumerate() {
            let code = if scale == 0.0 {
                0
            } else {
                ((x / scale).round() as i64).clamp(-qmax, qmax)
            };
            write_bits(&mut packed, j * kk, kk, (code as u64) & mask(kk));
        }
    }
    QuantizedDelta::from_parts(rows, cols, k, packed, scale)
}

pub fn packed_len(codes: usize, k: u8) -> usize {
    (codes * k as usize).div_ceil(8)
}

fn mask(k: usize) -> u64 {
    if k == 64 {
        u64::MAX
    } else {
        (1u64 << k) - 1
    }
}

fn write_bits(buf: &mut [u8], bit_offset: usize, k: usize, value: u64) {
    for b in 0..k {
        if (value >> b) & 1 == 1 {
            let pos = bit_offset + b;
            buf[pos / 8] |= 1 << (pos % 8);
        }
    }
}

fn read_bits(buf: &[u8], bit_offset: usize, k: usize) -> u64 {
    let mut v = 0u64;
    for b in 0..k {
        let pos = bit_offset + b;
        if (buf[pos / 8] >> (pos % 8)) & 1 == 1 {
            v |= 1 << b;
        }
    }
    v
}

fn sign_extend(raw: u64, k: usize) -> i32 {
    let shift = 64 - k;
    (((raw << shift) as i64) >> shift) as i32
}

/// Trainable sparse delta: fixed random positions, zero values, rescale 1.
pub fn init_sparse_trainable(
    rows: usize,
    cols: usize,
    sparse_rate: f64,
    rng: &mut RngStream,
) -> Result<SparseDelta> {
    check_drop_rate(sparse_rate)?;
    let total = rows * cols;
    let keep = kept_count(total, sparse_rate);
    if keep == 0 {
        return Err(DersError::param(format!(
            "sparse rate {sparse_rate} keeps no entries of a {rows}x{cols} matrix"
        )));
    }
    let index = sample_unique_indices(total, keep, rng)?;
    SparseDelta::new(rows, cols, index, vec![0.0; keep], 1.0)
}

/// Default bound for the random factor: `1/sqrt(rows)`.
pub fn default_lowrank_init_scale(rows: usize) -> f64 {
    1.0 / (rows as f64).sqrt()
}

/// Trainable low-rank delta: `a` uniform in `(-init_scale, init_scale)`, `b` zero.
pub fn init_lowrank_trainable(
    rows: usize,
    cols: usize,
    rank: usize,
    rng: &mut RngStream,
    init_scale: f64,
) -> Result<LowRankDelta> {
    if rank == 0 || rank > rows.min(cols) {
        return Err(DersError::param(format!(
            "rank {rank} outside [1, {}]",
            rows.min(cols)
        )));
    }
    let a = Matrix::uniform(rows, rank, init_scale, rng);
    LowRankDelta::new(a, Matrix::zeros(rank, cols))
}
