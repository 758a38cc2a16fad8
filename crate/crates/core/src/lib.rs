pub mod config;
pub mod error;
pub mod eval;
pub mod events;
pub mod geo;
pub mod impact;
pub mod io;
pub mod models;
pub mod network;
pub mod nn;
pub mod pipeline;
pub mod query;
pub mod speed;
pub mod synth;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/queries.md")]
    mod queries {}
    #[doc = include_str!("../../../book/src/speeds.md")]
    mod speeds {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/impact.md")]
    mod impact {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
}
