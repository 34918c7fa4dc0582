pub mod autodiff;
pub mod data;
pub mod encoders;
pub mod error;
pub mod filter;
pub mod gradcheck;
pub mod lm;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod modality;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod qformer;
pub mod region;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use modality::ModalityId;
pub use region::{RegionKind, RegionSpec};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/adapters.md")]
    mod adapters {}
    #[doc = include_str!("../../../book/src/queries.md")]
    mod queries {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/mining.md")]
    mod mining {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
