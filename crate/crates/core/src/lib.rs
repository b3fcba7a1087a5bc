//! Deep meta-learning in the concept space.
//!
//! A concept generator feeds two pipelines: a few-shot meta-learner
//! (Matching Nets, MAML or Meta-SGD) and a concept discriminator trained on
//! an external labeled dataset. Both losses are minimized jointly with Adam.
//! Everything here is built on a small reverse-mode autodiff engine whose
//! gradients are graph nodes, so MAML-style inner updates are differentiated
//! exactly.
//!
//! The crate is `no_std` and only needs `alloc`; file formats, the CLI and
//! threaded evaluation live in the companion `deml` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod benchmark;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod metalearners;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, NodeId, Op};
pub use error::{Error, Result};
pub use tensor::Tensor;
