//! Delta-decomposed mixture-of-experts: upcycle small dense models into MoE
//! models, train them with exact gradients, and compress trained experts into a
//! shared base plus lightweight per-expert deltas.

pub mod accounting;
pub mod analysis;
pub mod compress;
pub mod deltas;
pub mod error;
pub mod moe;
pub mod numkern;
pub mod train;
pub mod upcycle;

pub use error::{DersError, Result};
