//! Distributed independent component analysis over simulated sensor
//! networks, with the centralized FastICA solver it builds on.

pub mod config;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod fastica;
pub mod network;
pub mod signal;
pub mod stats;
pub mod trace;

pub use error::{Error, Result};
