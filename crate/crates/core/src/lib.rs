//! Pilot/Copilot sequence models.
//!
//! A Pilot transformer is trained with cross-entropy while every training
//! round's input representation, hidden states and token-level errors are
//! written to a bounded mistake log. A Copilot transformer regresses those
//! errors and, at decode time, its output is added to the Pilot's token
//! distribution before each decoding step.
//!
//! The crate also ships a Monte Carlo lab for the bias/variance bound on the
//! fusion weight, synthetic sequence tasks, and the `tcopilot` command-line
//! tool.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod copilot;
pub mod error;
pub mod inference;
pub mod kv;
pub mod mistake_log;
pub mod nn;
pub mod numerics;
pub mod pilot;
pub mod tasks;
pub mod theorem_lab;
pub mod training;

pub use error::{Error, Result};
