//! Lithography simulation, numerical inverse lithography and a learned
//! weight-tied mask update operator, all on the CPU in `f64`.

pub mod error;
pub mod fft;
pub mod grad;
pub mod harness;
pub mod ilt;
pub mod litho;
pub mod metrics;
pub mod model;
pub mod raster;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/imaging.md")]
    mod imaging {}
    #[doc = include_str!("../../../book/src/ilt.md")]
    mod ilt {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/operator.md")]
    mod operator {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
