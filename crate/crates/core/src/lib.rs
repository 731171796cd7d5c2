//! Respiration recovery from FMCW radar phase with a residual diffusion
//! model: scene simulator, radar front end, diffusion kernels, the
//! transformer denoiser, training and evaluation.

pub mod config;
pub mod diffusion;
pub mod eval;
pub mod io;
pub mod rdt;
pub mod rng;
pub mod signal;
pub mod synth;
pub mod train;

// The guide's snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/diffusion.md")]
    mod diffusion {}
    #[doc = include_str!("../../../book/src/denoiser.md")]
    mod denoiser {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
