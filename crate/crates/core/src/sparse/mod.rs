//! Masks, sparse initialization and prune/grow primitives.

mod dst;
mod init;
mod param;

pub use dst::{
    dst_step, global_sparsity, grow_gradient, grow_random, growth_candidates, magnitude_prune,
    Anneal, DstOutcome, GrowOutcome, GrowPolicy, Position, PruneRateSchedule, UpdateScope,
};
pub(crate) use dst::{activate, deactivate};
pub use init::{erk_densities, erk_score, init_masks, SparseInitKind, SparseInitMethod};
pub use param::MaskedParam;
