//! Trainable-parameter registry: stable identities and visitors over a model's
//! trainable arrays.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::deltas::DeltaWeight;
use crate::moe::{BaseRole, Block, FfnMatrix, LayerOrigin, MoELayer, Model, Universal};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaPart {
    Dense,
    Values,
    A,
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "param", rename_all = "snake_case")]
pub enum ParamId {
    Embed,
    DenseFfn {
        block: usize,
        matrix: FfnMatrix,
    },
    Router {
        block: usize,
    },
    Shared {
        block: usize,
        matrix: FfnMatrix,
    },
    Delta {
        block: usize,
        matrix: FfnMatrix,
        member: usize,
        part: DeltaPart,
    },
    Universal {
        block: usize,
        matrix: FfnMatrix,
    },
    Readout,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamClass {
    Embed,
    DenseFfn,
    Router,
    Shared,
    DenseDelta,
    SparseValues,
    LowRankA,
    LowRankB,
    Universal,
    Readout,
}

impl ParamId {
    pub fn class(&self) -> ParamClass {
        match self {
            ParamId::Embed => ParamClass::Embed,
            ParamId::DenseFfn { .. } => ParamClass::DenseFfn,
            ParamId::Router { .. } => ParamClass::Router,
            ParamId::Shared { .. } => ParamClass::Shared,
            ParamId::Delta { part, .. } => match part {
                DeltaPart::Dense => ParamClass::DenseDelta,
                DeltaPart::Values => ParamClass::SparseValues,
                DeltaPart::A => ParamClass::LowRankA,
                DeltaPart::B => ParamClass::LowRankB,
            },
            ParamId::Universal { .. } => ParamClass::Universal,
            ParamId::Readout => ParamClass::Readout,
        }
    }
}

pub(crate) fn shared_trainable(m: &MoELayer) -> bool {
    matches!(m.base_role, BaseRole::Shared { frozen: false })
}

pub(crate) fn deltas_trainable(m: &MoELayer) -> bool {
    m.origin != LayerOrigin::Compressed
}

/// Calls `f` on every trainable array in a fixed order.
pub fn visit_params(model: &Model, f: &mut dyn FnMut(ParamId, &[f64])) {
    if let Some(e) = &model.embed {
        f(ParamId::Embed, e.data());
    }
    for (block, b) in model.blocks.iter().enumerate() {
        match b {
            Block::Dense(ffn) => {
                for matrix in FfnMatrix::BOTH {
                    f(
                        ParamId::DenseFfn { block, matrix },
                        ffn.matrix(matrix).data(),
                    );
                }
            }
            Block::Moe(m) => {
                f(ParamId::Router { block }, m.router.w_r.data());
                for matrix in FfnMatrix::BOTH {
                    let g = m.group(matrix);
                    if shared_trainable(m) {
                        f(ParamId::Shared { block, matrix }, g.base.data());
                    }
                    if deltas_trainable(m) {
                        for (member, d) in g.deltas.iter().enumerate() {
                            let id = |part| ParamId::Delta {
                                block,
                                matrix,
                                member,
                                part,
                            };
                            match d {
                                DeltaWeight::Dense(x) => f(id(DeltaPart::Dense), x.mat.data()),
                                DeltaWeight::Sparse(s) => f(id(DeltaPart::Values), s.values()),
                                DeltaWeight::LowRank(l) => {
                                    f(id(DeltaPart::A), l.a.data());
                                    f(id(DeltaPart::B), l.b.data());
                                }
                                DeltaWeight::Quantized(_) => {}
                            }
                        }
                    }
                }
                if let Universal::Parallel(u) = &m.universal {
                    for matrix in FfnMatrix::BOTH {
                        f(
                            ParamId::Universal { block, matrix },
                            u.matrix(matrix).data(),
                        );
                    }
                }
            }
        }
    }
    f(ParamId::Readout, model.readout.data());
}

/// Mutable counterpart of [`visit_params`], same order.
pub fn visit_params_mut(model: &mut Model, f: &mut dyn FnMut(ParamId, &mut [f64])) {
    if let Some(e) = &mut model.embed {
        f(ParamId::Embed, e.data_mut());
    }
    for (block, b) in model.blocks.iter_mut().enumerate() {
        match b {
            Block::Dense(ffn) => {
                f(
                    ParamId::DenseFfn {
                        block,
                        matrix: FfnMatrix::In,
                    },
                    ffn.w_in.data_mut(),
                );
                f(
                    ParamId::DenseFfn {
                        block,
                        matrix: FfnMatrix::Out,
                    },
                    ffn.w_out.data_mut(),
                );
            }
            Block::Moe(m) => {
                f(ParamId::Router { block }, m.router.w_r.data_mut());
                let shared = shared_trainable(m);
                let deltas = deltas_trainable(m);
                for matrix in FfnMatrix::BOTH {
                    let g = m.group_mut(matrix);
                    if shared {
                        f(ParamId::Shared { block, matrix }, g.base.data_mut());
                    }
                    if deltas {
                        for (member, d) in g.deltas.iter_mut().enumerate() {
                            let id = |part| ParamId::Delta {
                                block,
                                matrix,
                                member,
                                part,
                            };
                            match d {
                                DeltaWeight::Dense(x) => f(id(DeltaPart::Dense), x.mat.data_mut()),
                                DeltaWeight::Sparse(s) => f(id(DeltaPart::Values), s.values_mut()),
                                DeltaWeight::LowRank(l) => {
                                    f(id(DeltaPart::A), l.a.data_mut());
                                    f(id(DeltaPart::B), l.b.data_mut());
                                }
                                DeltaWeight::Quantized(_) => {}
                            }
                        }
                    }
                }
                if let Universal::Parallel(u) = &mut m.universal {
                    f(
                        ParamId::Universal {
                            block,
                            matrix: FfnMatrix::In,
                        },
                        u.w_in.data_mut(),
                    );
                    f(
                        ParamId::Universal {
                            block,
                            matrix: FfnMatrix::Out,
                        },
                        u.w_out.data_mut(),
                    );
                }
            }
        }
    }
    f(ParamId::Readout, model.readout.data_mut());
}

pub fn param_ids(model: &Model) -> Vec<ParamId> {
    let mut ids = Vec::new();
    visit_params(model, &mut |id, _| ids.push(id));
    ids
}

pub fn trainable_count(model: &Model) -> usize {
    let mut n = 0;
    visit_params(model, &mut |_, v| n += v.len());
    n
}

/// Reads one scalar parameter.
pub fn param_value(model: &Model, id: ParamId, index: usize) -> Option<f64> {
    let mut out = None;
    visit_params(model, &mut |pid, v| {
        if pid == id {
            out = v.get(index).copied();
        }
    });
    out
}

/// Overwrites one scalar parameter; returns false if absent.
pub fn set_param_value(model: &mut Model, id: ParamId, index: usize, value: f64) -> bool {
    let mut done = false;
    visit_params_mut(model, &mut |pid, v| {
        if pid == id {
            if let Some(slot) = v.get_mut(index) {
                *slot = value;
                done = true;
            }
        }
    });
    done
}

/// Gradients keyed by parameter identity. Holds exactly the trainable parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientSet {
    grads: BTreeMap<ParamId, Vec<f64>>,
}

impl GradientSet {
    pub fn zeros_for(model: &Model) -> Self {
        let mut grads = BTreeMap::new();
        visit_params(model, &mut |id, v| {
            grads.insert(id, vec![0.0; v.len()]);
        });
        Self { grads }
    }

    pub fn get(&self, id: &ParamId) -> Option<&[f64]> {
        self.grads.get(id).map(Vec::as_slice)
    }

    pub fn contains(&self, id: &ParamId) -> bool {
        self.grads.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Vec<f64>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|v| v.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Adds `src` into the entry for `id` if that parameter is trainable.
    pub(crate) fn accumulate(&mut self, id: ParamId, src: &[f64]) {
        if let Some(dst) = self.grads.get_mut(&id) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}
