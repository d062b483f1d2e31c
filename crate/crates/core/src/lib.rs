//! Gated plug-and-play prompts for multi-aspect controllable generation on a
//! toy encoder–decoder, with prompt and prefix baselines and tools for
//! measuring how separately trained plugins interfere when combined.

pub mod error;
pub mod harness;
pub mod interference;
pub mod linalg;
pub mod optim;
pub mod plugins;
pub mod rng;
pub mod taskgen;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};

/// The guide in `book/`, compiled so its snippets run as doc-tests.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/task.md")]
    pub mod task {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    pub mod autodiff {}
    #[doc = include_str!("../../../book/src/model.md")]
    pub mod model {}
    #[doc = include_str!("../../../book/src/plugins.md")]
    pub mod plugins {}
    #[doc = include_str!("../../../book/src/interference.md")]
    pub mod interference {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
