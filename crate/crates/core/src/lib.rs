//! Training-energy model for fully connected networks.

pub mod advisor;
pub mod arch;
pub mod cli;
pub mod energy_model;
pub mod fitting;
pub mod formats;
pub mod ingest;
pub mod synth;
pub mod worksets;

#[cfg(test)]
mod testutil;

// The guide's listings run as doctests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/architectures.md")]
    mod architectures {}
    #[doc = include_str!("../../../book/src/working-sets.md")]
    mod working_sets {}
    #[doc = include_str!("../../../book/src/energy-model.md")]
    mod energy_model {}
    #[doc = include_str!("../../../book/src/fitting.md")]
    mod fitting {}
    #[doc = include_str!("../../../book/src/ingest.md")]
    mod ingest {}
    #[doc = include_str!("../../../book/src/advisor.md")]
    mod advisor {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
