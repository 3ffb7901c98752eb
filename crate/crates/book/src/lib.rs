//! The guide under `book/` is plain mdbook, which cannot link against
//! workspace crates when testing. Each chapter is included here instead, so
//! `cargo test` runs every snippet as a doc-test.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod chapter0 {}

#[doc = include_str!("../../../book/src/tensors.md")]
pub mod chapter1 {}

#[doc = include_str!("../../../book/src/geometry.md")]
pub mod chapter2 {}

#[doc = include_str!("../../../book/src/proposals.md")]
pub mod chapter3 {}

#[doc = include_str!("../../../book/src/assembly.md")]
pub mod chapter4 {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod chapter5 {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod chapter6 {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod chapter7 {}
