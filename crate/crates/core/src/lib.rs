pub mod annotation_loop;
pub mod assignment;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod learner;
pub mod metrics;
pub mod par;
pub mod rng;
pub mod workers;
