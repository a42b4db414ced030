//! Text editing with copy-aware latent CTC alignments.
//!
//! Every upsampled source position emits one label from
//! `tokens ∪ {KEEP, BLANK}`. KEEP copies the source token the position
//! belongs to and BLANK deletes it. The output is recovered by translating
//! KEEPs and collapsing repeats and blanks. Training marginalizes over all
//! alignments that recover the target ([`loss`]).

pub mod emission;
pub mod error;
pub mod glancing;
pub mod harness;
pub mod lattice;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod util;
pub mod vocab;

pub use emission::{EmissionLattice, Variant};
pub use error::{Error, Result};
pub use lattice::{AlignmentLabel, AlignmentPath, EditSample};
pub use vocab::{TokenId, Vocab};
