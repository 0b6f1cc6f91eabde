//! Library side of the `ttcloc` command: experiment configuration and the
//! synthetic train/evaluate runs shared by `ablate` and the acceptance tests.

pub mod config;
pub mod experiment;
