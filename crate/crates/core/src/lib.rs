//! Action unit memory network (AUMN) for weakly supervised temporal action
//! localization: a learnable bank of action-unit templates read through
//! key/value attention, trained from video-level labels only, and a
//! proposal/evaluation pipeline around it.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
