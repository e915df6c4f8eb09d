//! File formats, command line and verification harness around
//! [`comfield_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fmap;
pub mod fsio;
pub mod oracles;
pub mod pnm;
pub mod report;
pub mod selftest;

pub use error::{HarnessError, Result};
