//! CPU implementation of a manipulation-localisation network built on a
//! bidirectional WKV backbone, with its losses, metrics, training loop and
//! complexity accounting. The guide in `book/` walks through each part.

pub mod backbone;
pub mod block;
pub mod complexity;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod wkv;

pub use config::RunConfig;
pub use error::{Error, ErrorKind, Result};
pub use model::{Model, ModelConfig};
pub use tensor::{Scalar, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/wkv.md")]
    mod wkv {}
    #[doc = include_str!("../../../book/src/block.md")]
    mod block {}
    #[doc = include_str!("../../../book/src/backbone.md")]
    mod backbone {}
    #[doc = include_str!("../../../book/src/loss.md")]
    mod loss {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/complexity.md")]
    mod complexity {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
