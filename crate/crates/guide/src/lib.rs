//! The book lives in `book/`. mdbook cannot resolve crate dependencies when
//! testing listings, so every chapter is pulled in here and `cargo test`
//! runs its Rust blocks as doctests.

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/quickstart.md")]
pub mod quickstart {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/configuration.md")]
pub mod configuration {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/playing-a-game.md")]
pub mod playing_a_game {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/protocol.md")]
pub mod protocol {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/analysis.md")]
pub mod analysis {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/regression.md")]
pub mod regression {}
