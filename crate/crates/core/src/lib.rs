//! Self-supervised video representation learning by predicting the
//! temporally pooled features of a frozen per-frame image model.
//!
//! The crate covers the synthetic corpus and clip sampling
//! ([`dataset`]), clip-consistent augmentation ([`augment`]), the online
//! video network with target adapters and momentum branch ([`encoders`]),
//! the cosine-distance loss family ([`objective`]), LARS with the
//! warmup/cosine schedule ([`optim`]), the evaluation battery ([`eval`]) and
//! the training/evaluation driver ([`harness`]).

pub mod augment;
pub mod container;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod harness;
pub mod objective;
pub mod optim;
pub mod rng;

pub use error::{Error, Result};
