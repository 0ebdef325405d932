//! Runs the guide's code blocks as doc-tests.
//!
//! mdbook cannot link external crates when testing, so each chapter is
//! pulled in as the docs of an empty module and rustdoc does the rest.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/factorization.md")]
pub mod factorization {}
#[doc = include_str!("../../../book/src/decode.md")]
pub mod decode {}
#[doc = include_str!("../../../book/src/cost.md")]
pub mod cost {}
#[doc = include_str!("../../../book/src/diversity.md")]
pub mod diversity {}
#[doc = include_str!("../../../book/src/svd.md")]
pub mod svd {}
#[doc = include_str!("../../../book/src/archive.md")]
pub mod archive {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
