//! The zotune guide as doc-tested modules. Each module includes one book
//! chapter, so `cargo test -p zotune-book` compiles and runs every code
//! snippet the book shows.
//!
//! The chapters live in `book/src/` at the repository root and render with
//! `mdbook build book`. Keeping them included here means a snippet that
//! drifts from the real API fails the build, not the reader.

#[doc = include_str!("../../../book/src/overview.md")]
pub mod overview {}

#[doc = include_str!("../../../book/src/estimator.md")]
pub mod estimator {}

#[doc = include_str!("../../../book/src/seeds.md")]
pub mod seeds {}

#[doc = include_str!("../../../book/src/model.md")]
pub mod model {}

#[doc = include_str!("../../../book/src/stacking.md")]
pub mod stacking {}

#[doc = include_str!("../../../book/src/dual.md")]
pub mod dual {}

#[doc = include_str!("../../../book/src/quantization.md")]
pub mod quantization {}

#[doc = include_str!("../../../book/src/tasks.md")]
pub mod tasks {}

#[doc = include_str!("../../../book/src/running.md")]
pub mod running {}

#[doc = include_str!("../../../book/src/benchmarking.md")]
pub mod benchmarking {}

#[doc = include_str!("../../../book/src/verification.md")]
pub mod verification {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
