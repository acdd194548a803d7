//! Multi-agent deep covering option discovery.

pub mod attention;
pub mod buffer;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod connectivity;
pub mod discovery;
pub mod env;
pub mod experiment;
pub mod flat;
pub mod metrics;
pub mod plot;
pub mod hier;
pub mod nn;
pub mod options;
pub mod spectral;
pub mod stack;
pub mod trainer;
