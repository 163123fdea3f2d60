pub mod cluster_process;
pub mod error;
pub mod finite_volume;
pub mod gaussian_cluster;
pub mod oracle_mcmc;
pub mod renewal;
pub mod stats;
pub mod streams;
pub mod tilting;

pub use error::{Error, Result};
