//! Desk-scale contrastive multiview coding for RGB and multispectral chips.
//!
//! The pipeline: construct two channel-disjoint views per image chip,
//! encode each view with its own small conv network, project to unit-norm
//! contrastive representations, and minimize the symmetric k-negative
//! contrastive objective with negatives drawn from a memory bank.
//! Pretrained encoders are then evaluated by linear probing and finetuning.

pub mod config;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod testing;
pub mod train;
pub mod views;

pub use error::{Error, Result};
