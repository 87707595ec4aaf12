//! Soft decision-tree prediction heads trained with randomized decision routing.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod losses;
pub mod objective;
pub mod routing;
pub mod stats;
pub mod taskgen;
pub mod train;

pub use error::{Error, Result};
