//! Cross-modal image-text retrieval. Each sample is encoded into one global
//! vector and a set of local tokens; search ranks a gallery by global cosine
//! and re-ranks the head with a mix of global and token-level similarity.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod encoder;
pub mod engine;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod index;
pub mod loss;
pub mod reference;
pub mod similarity;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/features.md")]
    mod features {}
    #[doc = include_str!("../../../book/src/similarity.md")]
    mod similarity {}
    #[doc = include_str!("../../../book/src/loss.md")]
    mod loss {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/search.md")]
    mod search {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
