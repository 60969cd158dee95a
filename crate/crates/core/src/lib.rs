//! Refinement of ensemble tumour segmentations on PET/CT volumes.
//!
//! Cases enter as a PET volume, a CT volume and a set of probability maps on one grid.
//! [`uncertainty`] scores how well the members agree; poorly agreeing cases are re-segmented by
//! [`hybrid::refine`], which minimizes a PET/CT/probability energy with a convolution and
//! thresholding scheme. [`io`] and [`preprocess`] bring files onto a common grid, [`metrics`]
//! compares masks, and [`phantom`] produces synthetic cases with known ground truth.
//!
//! ```
//! use hac_refine::hybrid::{refine, HybridParams};
//! use hac_refine::phantom::{make_phantom, PhantomSpec};
//! use hac_refine::uncertainty::EnsemblePrediction;
//! use hac_refine::volume::binarize;
//!
//! let case = make_phantom(&PhantomSpec::default())?;
//! let fused = EnsemblePrediction::new(case.members)?.fused().clone();
//! let u0 = binarize(&fused, 0.5)?;
//! let out = refine(&case.pet, &case.ct, &fused, &u0, &HybridParams::default()).unwrap();
//! assert!(hac_refine::metrics::dsc(&out.mask, &case.gt)? > 0.9);
//! # Ok::<(), hac_refine::Error>(())
//! ```

pub mod error;
pub mod gauss;
pub mod hybrid;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod preprocess;
pub mod uncertainty;
pub mod volume;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    pub struct Readme;
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/volumes.md")]
    pub struct Volumes;
    #[doc = include_str!("../../../book/src/preprocessing.md")]
    pub struct Preprocessing;
    #[doc = include_str!("../../../book/src/uncertainty.md")]
    pub struct Uncertainty;
    #[doc = include_str!("../../../book/src/hybrid-energy.md")]
    pub struct HybridEnergy;
    #[doc = include_str!("../../../book/src/solver.md")]
    pub struct Solver;
    #[doc = include_str!("../../../book/src/phantoms.md")]
    pub struct Phantoms;
}
