pub mod autodiff;
pub mod config;
pub mod datagen;
pub mod eqnn;
pub mod error;
pub mod gtensor;
pub mod invmap;
pub mod losses;
pub mod matcheval;
pub mod orientation;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/group-features.md")]
    mod group_features {}
    #[doc = include_str!("../../../book/src/alignment.md")]
    mod alignment {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/gradients.md")]
    mod gradients {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
