//! The guide's chapters, included as documentation so that every Rust
//! snippet in `book/src` is compiled and run by `cargo test`.
//!
//! One module per chapter keeps a failing snippet traceable to its file.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/semtrace.md")]
pub mod semtrace {}

#[doc = include_str!("../../../book/src/contexts.md")]
pub mod contexts {}

#[doc = include_str!("../../../book/src/prompts-and-scoring.md")]
pub mod prompts_and_scoring {}

#[doc = include_str!("../../../book/src/sensitivity.md")]
pub mod sensitivity {}

#[doc = include_str!("../../../book/src/running.md")]
pub mod running {}

#[doc = include_str!("../../../book/src/analysis.md")]
pub mod analysis {}
