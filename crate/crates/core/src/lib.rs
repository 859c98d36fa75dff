//! Channel-aware time-domain speech separation.
//!
//! A dual-path recurrent separator is conditioned, through feature-wise
//! linear modulation, on an embedding of the recording channel extracted
//! from an auxiliary mixture. The crate ships its own reverse-mode gradient
//! engine, a synthetic multi-channel corpus generator, training and
//! evaluation loops, and the `casnet` command-line tool.

pub mod chanenc;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod film;
pub mod gradcore;
pub mod nn;
pub mod objectives;
pub mod selfcheck;
pub mod separator;
pub mod trainer;

pub use error::{Error, Result};
