//! Likelihood-based inference for panels of partially observed Markov
//! processes (PanelPOMPs).

// `!(x > 0.0)` is used on purpose so that NaN fails domain checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod driver;
pub mod exec;
pub mod io;
pub mod model;
pub mod mif;
pub mod models;
pub mod optim;
pub mod params;
pub mod profile;
pub mod rng;
pub mod smc;

pub use error::{Error, Result, Slot};
