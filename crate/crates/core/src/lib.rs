pub mod attention;
pub mod augment;
pub mod complexity;
pub mod config;
pub mod error;
pub mod graph;
pub mod model;
pub mod numkernel;
pub mod params;
pub mod partition;
pub mod rng;
pub mod selfcheck;
pub mod skeldata;
pub mod training;

pub use error::{Error, Result};
