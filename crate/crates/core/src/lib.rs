pub mod action;
pub mod dataset;
pub mod describe;
pub mod eval;
pub mod executor;
pub mod harness;
pub mod model;
pub mod prompts;
pub mod retrieval;
pub mod store;
