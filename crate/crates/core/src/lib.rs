pub mod data;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod ot;
pub mod protocols;
pub mod rng;
pub mod testbed;
pub mod cli;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/transport.md")]
    mod transport {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/selection.md")]
    mod selection {}
    #[doc = include_str!("../../../book/src/testbed.md")]
    mod testbed {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
