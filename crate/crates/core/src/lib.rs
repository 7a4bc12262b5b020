//! MAML with per-layer adaptation patterns.

pub mod bench;
pub mod checkpoint;
pub mod episodes;
pub mod error;
pub mod maml;
pub mod nn;
pub mod pattern;
pub mod search;

pub use error::{Error, Result};
