//! Doc-tested chapters of the driftbridge book.
//!
//! mdbook renders `book/` for reading, but it cannot run the embedded Rust
//! snippets against the workspace crates. This shim includes every chapter as
//! a doc comment, so `cargo test -p guide --doc` compiles and executes each
//! code block — the book cannot silently drift from the library.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/getting-started.md")]
pub mod getting_started {}

#[doc = include_str!("../../../book/src/numerics.md")]
pub mod numerics {}

#[doc = include_str!("../../../book/src/reference-fields.md")]
pub mod reference_fields {}

#[doc = include_str!("../../../book/src/interpolants.md")]
pub mod interpolants {}

#[doc = include_str!("../../../book/src/couplings.md")]
pub mod couplings {}

#[doc = include_str!("../../../book/src/bridge-training.md")]
pub mod bridge_training {}

#[doc = include_str!("../../../book/src/simulation.md")]
pub mod simulation {}

#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}

#[doc = include_str!("../../../book/src/datasets.md")]
pub mod datasets {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
