//! Doc-test companion of the guide in `book/`.
//!
//! Each chapter is included verbatim as module documentation, so every
//! fenced Rust block in the book compiles and runs under
//! `cargo test --workspace`. If the library drifts from the prose, a test
//! here fails before a reader can hit the mismatch.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/rough-paths.md")]
pub mod rough_paths {}

#[doc = include_str!("../../../book/src/brownian-drivers.md")]
pub mod brownian_drivers {}

#[doc = include_str!("../../../book/src/solving.md")]
pub mod solving {}

#[doc = include_str!("../../../book/src/foliated.md")]
pub mod foliated {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}

#[doc = include_str!("../../../README.md")]
pub mod readme {}
