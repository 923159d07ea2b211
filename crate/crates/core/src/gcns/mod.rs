//! Continual concept learning by gradient-selected cross-attention
//! coordinates.
//!
//! Each task refreshes a saliency mask every `e` iterations and ORs the
//! phase masks into its task mask. Only the concept embedding row and the
//! current phase's coordinates move; coordinates that were already claimed
//! by earlier tasks are pulled toward the previous snapshot.

mod ledger;
mod mask;
mod train;

pub use ledger::{mask_storage_bytes, MaskStorage, TaskLedger, TaskRecord};
pub use mask::{conflict_reg_loss, merge_phase_masks, select_mask, selection_size, ConceptMask};
pub use train::{compute_saliency, item_index, train_task, GcnsConfig, LossParts, TaskOutcome, TaskSpec};

#[cfg(test)]
pub(crate) use train::reg_on_tape;
