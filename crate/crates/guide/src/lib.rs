//! The book chapters under `book/src` are included here as doc comments so
//! that `cargo test --doc -p guide` runs every fenced Rust snippet in the
//! guide. mdBook itself cannot execute snippets against the local crate, so
//! this crate is what keeps the book honest.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/geometry.md")]
pub mod geometry {}
#[doc = include_str!("../../../book/src/anchors.md")]
pub mod anchors {}
#[doc = include_str!("../../../book/src/cascade.md")]
pub mod cascade {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
