//! Binary checkpoint format.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! header    magic "DERS" | version u16 | dtype u8 | reserved u8 | section count u32
//! table     per section: tag [u8; 4] | offset u64 | length u64
//! sections  META (JSON metadata), MODL (model walk)
//! trailer   SHA-256 of every preceding byte
//! ```
//!
//! Floats in MODL use the header dtype. Sparse indices are u32, quantized codes
//! stay bit-packed exactly as held in memory. The checksum is verified before
//! anything else is parsed, and a newer format version is refused outright.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ders_core::deltas::{
    DeltaWeight, DenseDelta, ExpertGroup, LowRankDelta, QuantizedDelta, SparseDelta,
};
use ders_core::moe::{
    Activation, BaseRole, Block, Ffn, LayerOrigin, MoELayer, Model, Router, Universal,
};
use ders_core::numkern::Matrix;
use ders_core::train::TaskSpec;

use crate::error::{CliError, CliResult};

pub const MAGIC: [u8; 4] = *b"DERS";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 12;
const ENTRY_LEN: usize = 20;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    #[default]
    F64,
    /// Storage experiments only; values are rounded to f32 on save.
    F32,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }

    fn from_tag(t: u8) -> CliResult<Self> {
        match t {
            0 => Ok(Dtype::F64),
            1 => Ok(Dtype::F32),
            _ => Err(bad(format!("unknown dtype tag {t}"))),
        }
    }
}

/// Human-readable provenance stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Pipeline stage that wrote the file.
    pub stage: String,
    /// Every seed that influenced the weights, by purpose.
    pub seeds: BTreeMap<String, u64>,
    #[serde(default)]
    pub task: Option<TaskSpec>,
    /// SHA-256 of the checkpoint this one was derived from.
    #[serde(default)]
    pub ancestor_sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub dtype: Dtype,
    pub model: Model,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Checkpoint(msg.into())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn encode(ckpt: &Checkpoint) -> CliResult<Vec<u8>> {
    let meta = serde_json::to_vec(&ckpt.meta).map_err(|e| bad(e.to_string()))?;
    let mut model = Vec::new();
    ModelWriter {
        out: &mut model,
        dtype: ckpt.dtype,
    }
    .model(&ckpt.model);
    let sections: [(&[u8; 4], &[u8]); 2] = [(b"META", &meta), (b"MODL", &model)];
    let mut out = Vec::with_capacity(
        HEADER_LEN + sections.len() * ENTRY_LEN + meta.len() + model.len() + DIGEST_LEN,
    );
    out.extend_from_slice(&MAGIC);
    out.write_u16::<LittleEndian>(FORMAT_VERSION).unwrap();
    out.push(ckpt.dtype.tag());
    out.push(0);
    out.write_u32::<LittleEndian>(sections.len() as u32)
        .unwrap();
    let mut offset = (HEADER_LEN + sections.len() * ENTRY_LEN) as u64;
    for (tag, body) in &sections {
        out.extend_from_slice(*tag);
        out.write_u64::<LittleEndian>(offset).unwrap();
        out.write_u64::<LittleEndian>(body.len() as u64).unwrap();
        offset += body.len() as u64;
    }
    for (_, body) in &sections {
        out.extend_from_slice(body);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> CliResult<Checkpoint> {
    if bytes.len() < HEADER_LEN + DIGEST_LEN {
        return Err(bad(format!("truncated: {} bytes", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(bad("bad magic, not a DERS checkpoint"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version > FORMAT_VERSION {
        return Err(bad(format!(
            "format version {version} is newer than the supported version {FORMAT_VERSION}; upgrade the tool"
        )));
    }
    if version == 0 {
        return Err(bad("format version 0 is invalid"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch (file corrupted or truncated)"));
    }
    let dtype = Dtype::from_tag(bytes[6])?;
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if HEADER_LEN + count * ENTRY_LEN > body.len() {
        return Err(bad("section table runs past end of file"));
    }
    let mut sections = BTreeMap::new();
    for i in 0..count {
        let e = &body[HEADER_LEN + i * ENTRY_LEN..HEADER_LEN + (i + 1) * ENTRY_LEN];
        let tag: [u8; 4] = e[..4].try_into().unwrap();
        let off = u64::from_le_bytes(e[4..12].try_into().unwrap()) as usize;
        let len = u64::from_le_bytes(e[12..20].try_into().unwrap()) as usize;
        let end = off.checked_add(len).filter(|&end| end <= body.len());
        let Some(end) = end else {
            return Err(bad(format!(
                "section {} out of bounds",
                String::from_utf8_lossy(&tag)
            )));
        };
        sections.insert(tag, &body[off..end]);
    }
    let meta_bytes = sections
        .get(b"META")
        .ok_or_else(|| bad("missing META section"))?;
    let meta: CheckpointMeta =
        serde_json::from_slice(meta_bytes).map_err(|e| bad(format!("META: {e}")))?;
    let model_bytes = sections
        .get(b"MODL")
        .ok_or_else(|| bad("missing MODL section"))?;
    let mut r = ModelReader {
        cur: Cursor::new(model_bytes),
        dtype,
    };
    let model = r.model()?;
    if (r.cur.position() as usize) != model_bytes.len() {
        return Err(bad("trailing bytes in MODL section"));
    }
    model
        .validate()
        .map_err(|e| bad(format!("model does not validate: {e}")))?;
    Ok(Checkpoint { meta, dtype, model })
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Serialize)]
struct Sidecar<'a> {
    format_version: u16,
    dtype: Dtype,
    sha256: String,
    bytes: usize,
    blocks: Vec<&'static str>,
    meta: &'a CheckpointMeta,
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.as_file()
        .sync_all()
        .map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

/// Saves the checkpoint and its JSON sidecar; returns the file's SHA-256.
pub fn save(ckpt: &Checkpoint, path: &Path) -> CliResult<String> {
    let bytes = encode(ckpt)?;
    let sha = sha256_hex(&bytes);
    write_atomic(path, &bytes)?;
    let side = Sidecar {
        format_version: FORMAT_VERSION,
        dtype: ckpt.dtype,
        sha256: sha.clone(),
        bytes: bytes.len(),
        blocks: ckpt
            .model
            .blocks
            .iter()
            .map(|b| match b {
                Block::Dense(_) => "dense",
                Block::Moe(_) => "moe",
            })
            .collect(),
        meta: &ckpt.meta,
    };
    let mut json = serde_json::to_vec_pretty(&side).map_err(|e| bad(e.to_string()))?;
    json.push(b'\n');
    write_atomic(&sidecar_path(path), &json)?;
    Ok(sha)
}

pub fn load(path: &Path) -> CliResult<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes)
}

/// Loads a checkpoint and returns its SHA-256 too.
pub fn load_with_hash(path: &Path) -> CliResult<(Checkpoint, String)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok((decode(&bytes)?, sha256_hex(&bytes)))
}

struct ModelWriter<'a> {
    out: &'a mut Vec<u8>,
    dtype: Dtype,
}

impl ModelWriter<'_> {
    fn u8(&mut self, v: u8) {
        self.out.push(v);
    }

    fn u32(&mut self, v: usize) {
        self.out.write_u32::<LittleEndian>(v as u32).unwrap();
    }

    fn float(&mut self, v: f64) {
        match self.dtype {
            Dtype::F64 => self.out.write_f64::<LittleEndian>(v).unwrap(),
            Dtype::F32 => self.out.write_f32::<LittleEndian>(v as f32).unwrap(),
        }
    }

    fn floats(&mut self, v: &[f64]) {
        for &x in v {
            self.float(x);
        }
    }

    fn matrix(&mut self, m: &Matrix) {
        self.u32(m.rows());
        self.u32(m.cols());
        self.floats(m.data());
    }

    fn activation(&mut self, a: Activation) {
        self.u8(match a {
            Activation::Gelu => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
            Activation::Identity => 3,
        });
    }

    fn ffn(&mut self, f: &Ffn) {
        self.activation(f.activation);
        self.matrix(&f.w_in);
        self.matrix(&f.w_out);
    }

    fn delta(&mut self, d: &DeltaWeight) {
        match d {
            DeltaWeight::Dense(x) => {
                self.u8(0);
                self.matrix(&x.mat);
            }
            DeltaWeight::Sparse(s) => {
                self.u8(1);
                let (r, c) = s.shape();
                self.u32(r);
                self.u32(c);
                self.u32(s.nnz());
                for &i in s.index() {
                    self.out.write_u32::<LittleEndian>(i).unwrap();
                }
                self.floats(s.values());
                self.float(s.rescale());
            }
            DeltaWeight::LowRank(l) => {
                self.u8(2);
                self.matrix(&l.a);
                self.matrix(&l.b);
            }
            DeltaWeight::Quantized(q) => {
                self.u8(3);
                let (r, c) = q.shape();
                self.u32(r);
                self.u32(c);
                self.u8(q.bit_width());
                self.float(q.scale());
                self.u32(q.packed().len());
                self.out.extend_from_slice(q.packed());
            }
        }
    }

    fn group(&mut self, g: &ExpertGroup) {
        self.matrix(&g.base);
        self.u32(g.deltas.len());
        for d in &g.deltas {
            self.delta(d);
        }
    }

    fn moe(&mut self, m: &MoELayer) {
        self.activation(m.activation);
        self.u32(m.router.topk_count);
        self.matrix(&m.router.w_r);
        self.u8(match m.base_role {
            BaseRole::InitRecord => 0,
            BaseRole::Shared { frozen: false } => 1,
            BaseRole::Shared { frozen: true } => 2,
        });
        self.u8(match m.origin {
            LayerOrigin::Vanilla => 0,
            LayerOrigin::DersSm => 1,
            LayerOrigin::DersLm => 2,
            LayerOrigin::Compressed => 3,
        });
        match &m.universal {
            Universal::None => self.u8(0),
            Universal::Parallel(f) => {
                self.u8(1);
                self.ffn(f);
            }
            Universal::Folded => self.u8(2),
        }
        match &m.init_record {
            None => self.u8(0),
            Some((a, b)) => {
                self.u8(1);
                self.matrix(a);
                self.matrix(b);
            }
        }
        self.group(&m.w_in);
        self.group(&m.w_out);
    }

    fn model(&mut self, m: &Model) {
        self.out
            .write_u64::<LittleEndian>(m.ancestor_params)
            .unwrap();
        match &m.embed {
            None => self.u8(0),
            Some(e) => {
                self.u8(1);
                self.matrix(e);
            }
        }
        self.matrix(&m.readout);
        self.u32(m.blocks.len());
        for b in &m.blocks {
            match b {
                Block::Dense(f) => {
                    self.u8(0);
                    self.ffn(f);
                }
                Block::Moe(l) => {
                    self.u8(1);
                    self.moe(l);
                }
            }
        }
    }
}

/// Upper bound on any element count read from a file, to refuse absurd allocations.
const MAX_ELEMS: usize = 1 << 28;

struct ModelReader<'a> {
    cur: Cursor<&'a [u8]>,
    dtype: Dtype,
}

fn eof(e: std::io::Error) -> CliError {
    bad(format!("truncated model section ({e})"))
}

impl ModelReader<'_> {
    fn u8(&mut self) -> CliResult<u8> {
        self.cur.read_u8().map_err(eof)
    }

    fn u32(&mut self) -> CliResult<usize> {
        Ok(self.cur.read_u32::<LittleEndian>().map_err(eof)? as usize)
    }

    fn count(&mut self) -> CliResult<usize> {
        let n = self.u32()?;
        if n > MAX_ELEMS {
            return Err(bad(format!("element count {n} too large")));
        }
        Ok(n)
    }

    fn float(&mut self) -> CliResult<f64> {
        match self.dtype {
            Dtype::F64 => self.cur.read_f64::<LittleEndian>().map_err(eof),
            Dtype::F32 => Ok(f64::from(self.cur.read_f32::<LittleEndian>().map_err(eof)?)),
        }
    }

    fn floats(&mut self, n: usize) -> CliResult<Vec<f64>> {
        (0..n).map(|_| self.float()).collect()
    }

    fn matrix(&mut self) -> CliResult<Matrix> {
        let r = self.count()?;
        let c = self.count()?;
        let n = r
            .checked_mul(c)
            .filter(|&n| n <= MAX_ELEMS)
            .ok_or_else(|| bad("matrix too large"))?;
        let data = self.floats(n)?;
        Ok(Matrix::from_vec(r, c, data)?)
    }

    fn activation(&mut self) -> CliResult<Activation> {
        Ok(match self.u8()? {
            0 => Activation::Gelu,
            1 => Activation::Relu,
            2 => Activation::Tanh,
            3 => Activation::Identity,
            t => return Err(bad(format!("unknown activation tag {t}"))),
        })
    }

    fn ffn(&mut self) -> CliResult<Ffn> {
        let act = self.activation()?;
        let w_in = self.matrix()?;
        let w_out = self.matrix()?;
        Ok(Ffn::new(w_in, w_out, act)?)
    }

    fn delta(&mut self) -> CliResult<DeltaWeight> {
        Ok(match self.u8()? {
            0 => DeltaWeight::Dense(DenseDelta {
                mat: self.matrix()?,
            }),
            1 => {
                let r = self.count()?;
                let c = self.count()?;
                let n = self.count()?;
                let index = (0..n)
                    .map(|_| self.cur.read_u32::<LittleEndian>().map_err(eof))
                    .collect::<CliResult<Vec<u32>>>()?;
                let values = self.floats(n)?;
                let rescale = self.float()?;
                DeltaWeight::Sparse(
                    SparseDelta::new(r, c, index, values, rescale)
                        .map_err(|e| bad(e.to_string()))?,
                )
            }
            2 => {
                let a = self.matrix()?;
                let b = self.matrix()?;
                DeltaWeight::LowRank(LowRankDelta::new(a, b).map_err(|e| bad(e.to_string()))?)
            }
            3 => {
                let r = self.count()?;
                let c = self.count()?;
                let k = self.u8()?;
                let scale = self.float()?;
                let n = self.count()?;
                let mut packed = vec![0u8; n];
                self.cur.read_exact(&mut packed).map_err(eof)?;
                DeltaWeight::Quantized(
                    QuantizedDelta::from_parts(r, c, k, packed, scale)
                        .map_err(|e| bad(e.to_string()))?,
                )
            }
            t => return Err(bad(format!("unknown delta encoding tag {t}"))),
        })
    }

    fn group(&mut self) -> CliResult<ExpertGroup> {
        let base = self.matrix()?;
        let n = self.count()?;
        let deltas = (0..n)
            .map(|_| self.delta())
            .collect::<CliResult<Vec<_>>>()?;
        ExpertGroup::new(base, deltas).map_err(|e| bad(e.to_string()))
    }

    fn moe(&mut self) -> CliResult<MoELayer> {
        let activation = self.activation()?;
        let k = self.u32()?;
        let w_r = self.matrix()?;
        let router = Router::new(w_r, k).map_err(|e| bad(e.to_string()))?;
        let base_role = match self.u8()? {
            0 => BaseRole::InitRecord,
            1 => BaseRole::Shared { frozen: false },
            2 => BaseRole::Shared { frozen: true },
            t => return Err(bad(format!("unknown base role tag {t}"))),
        };
        let origin = match self.u8()? {
            0 => LayerOrigin::Vanilla,
            1 => LayerOrigin::DersSm,
            2 => LayerOrigin::DersLm,
            3 => LayerOrigin::Compressed,
            t => return Err(bad(format!("unknown layer origin tag {t}"))),
        };
        let universal = match self.u8()? {
            0 => Universal::None,
            1 => Universal::Parallel(self.ffn()?),
            2 => Universal::Folded,
            t => return Err(bad(format!("unknown universal tag {t}"))),
        };
        let init_record = match self.u8()? {
            0 => None,
            1 => Some((self.matrix()?, self.matrix()?)),
            t => return Err(bad(format!("unknown init record flag {t}"))),
        };
        let w_in = self.group()?;
        let w_out = self.group()?;
        Ok(MoELayer {
            router,
            w_in,
            w_out,
            activation,
            base_role,
            universal,
            origin,
            init_record,
        })
    }

    fn model(&mut self) -> CliResult<Model> {
        let ancestor_params = self.cur.read_u64::<LittleEndian>().map_err(eof)?;
        let embed = match self.u8()? {
            0 => None,
            1 => Some(self.matrix()?),
            t => return Err(bad(format!("unknown embed flag {t}"))),
        };
        let readout = self.matrix()?;
        let n = self.count()?;
        let mut blocks = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            blocks.push(match self.u8()? {
                0 => Block::Dense(self.ffn()?),
                1 => Block::Moe(self.moe()?),
                t => return Err(bad(format!("unknown block tag {t}"))),
            });
        }
        Ok(Model {
            embed,
            blocks,
            readout,
            ancestor_params,
        })
    }
}
