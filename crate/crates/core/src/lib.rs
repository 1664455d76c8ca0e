//! Evolves per-layer cell search spaces with a weight-sharing supernet, then
//! searches and trains architectures inside them. See the `book/` guide.

pub mod artifacts;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evolution;
pub mod genome;
pub mod population;
pub mod search;
pub mod supernet;
pub mod tensor;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/genomes.md")]
    mod genomes {}
    #[doc = include_str!("../../../book/src/supernet.md")]
    mod supernet {}
    #[doc = include_str!("../../../book/src/evolution.md")]
    mod evolution {}
    #[doc = include_str!("../../../book/src/search.md")]
    mod search {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
