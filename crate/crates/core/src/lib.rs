//! A tiny tool-using agent policy, trained from scratch, with the tooling to
//! measure whether learning to reason and learning to search interfere.
//!
//! [`router`] labels tokens by role, [`trainer`] turns those labels into
//! masked policy-gradient updates, and [`variants`] builds the models that
//! [`leas`] and [`gradconflict`] compare. The guide in `book/` walks through
//! each piece.

pub mod autodiff;
pub mod error;
pub mod gradconflict;
pub mod leas;
pub mod policy;
pub mod router;
pub mod toolenv;
pub mod trainer;
pub mod variants;

pub use error::{Error, Result};

// The guide in book/ is compiled as doctests so its examples stay current.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/routing.md")]
    mod routing {}
    #[doc = include_str!("../../../book/src/environment.md")]
    mod environment {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/attribution.md")]
    mod attribution {}
    #[doc = include_str!("../../../book/src/angles.md")]
    mod angles {}
    #[doc = include_str!("../../../book/src/running.md")]
    mod running {}
}
