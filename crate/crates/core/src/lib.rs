//! Positional code-recall benchmark harness.
//!
//! Generates SemTrace tasks, hides target functions among distractors at
//! controlled depths, queries chat models, scores their answers and fits
//! positional and decay curves to the results.

pub mod corpus;
pub mod exec;
pub mod literal;
pub mod mixer;
pub mod scoring;
pub mod seed;
pub mod semtrace;
pub mod sensitivity;
pub mod tasks;
pub mod analysis;
pub mod fit;
pub mod record;
pub mod client;
pub mod runner;
