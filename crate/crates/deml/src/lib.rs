//! File formats, configuration, threaded evaluation and the command line
//! around [`deml_core`].

pub mod cli;
pub mod config;
pub mod formats;
pub mod output;
pub mod parallel;

pub use deml_core as core;
