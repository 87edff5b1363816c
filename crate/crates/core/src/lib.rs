//! Attribute-based open-world detection: attribute scoring, attribute
//! selection and adaptation, unknown-object scoring, open-world metrics and
//! benchmark construction.
//!
//! The crate is `no_std` (it needs `alloc`) and performs no IO.

#![no_std]
extern crate alloc;

pub mod attribpipe;
pub mod benchkit;
pub mod embedspace;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod linalg;
pub mod owdeval;
pub mod scene;

pub use error::{Error, Result};
