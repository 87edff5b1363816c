//! File formats, persistence and the command-line driver around
//! `fomo-core`.

pub mod cli;
pub mod config;
pub mod manifest;
pub mod persist;
pub mod tensorio;
