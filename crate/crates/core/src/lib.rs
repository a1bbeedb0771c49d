//! Link-level testbench for uncertainty-aware deep MIMO receivers.
//!
//! The receive chain is a DeepSIC soft equalizer followed by a weighted
//! belief-propagation decoder. Both can be trained as point estimates
//! (frequentist), as one Bayesian model over the whole architecture
//! (end-to-end), or module by module with ensembling inside the iterations
//! (modular Bayesian). The crate also ships the synthetic channels, the
//! polar code, calibration metrics and the experiment harness used to
//! compare these variants.

pub mod channel;
pub mod deepsic;
pub mod error;
pub mod gf2;
pub mod harness;
pub mod metrics;
pub mod modem;
pub mod nn;
pub mod polar;
pub mod seed;
pub mod tanner;
pub mod wbp;

pub use error::{Error, Result};
