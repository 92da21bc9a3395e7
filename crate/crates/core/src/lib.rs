#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bayes;
pub mod checkpoint;
pub mod cli;
pub mod embed;
pub mod error;
pub mod field;
pub mod latent;
pub mod model;
pub mod nn;
pub mod optimizer;
pub mod seed;
pub mod uncertainty;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/proxy-field.md")]
    mod proxy_field {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/uncertainty.md")]
    mod uncertainty {}
    #[doc = include_str!("../../../book/src/optimization.md")]
    mod optimization {}
    #[doc = include_str!("../../../book/src/embeddings.md")]
    mod embeddings {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
