//! Partial-label graph classification with potential-cause discovery.

pub mod autodiff;
pub mod causes;
pub mod cli;
pub mod cluster;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod theorem;
pub mod train;
