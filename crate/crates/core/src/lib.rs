//! ROI corruption saliency for classifiers on registered images.
//!
//! The pipeline trains a small convolutional classifier, then asks which
//! atlas regions drive its decisions: each region is replaced by content
//! sampled from other images of the dataset, the corrupted predictions are
//! compared against the originals with bootstrap Jensen–Shannon bounds and
//! one-tailed Wilcoxon tests, and every region is sorted into one of four
//! categories (important for both classes, class 0 only, class 1 only, or
//! not important).
//!
//! Module map:
//!
//! * [`data`], [`nifti`] — tensors, images, atlases, datasets and their files
//! * [`preprocess`] — sliding-window mean/std channels and downsampling
//! * [`nn`] — a from-scratch CNN with manual backpropagation
//! * [`corruption`] — frequency-normalized ROI replacement sampling
//! * [`interpret`] — JSD, bootstrap, Wilcoxon, FDR and ROI categorization
//! * [`synth`] — the striped-image benchmark and its misclassification table
//!
//! The guide under `book/` walks through each stage; its snippets are
//! compiled as doctests of this crate.

pub mod corruption;
pub mod data;
mod error;
pub mod interpret;
pub mod io;
pub mod nifti;
pub mod nn;
pub mod preprocess;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/sliding_windows.md")]
    mod sliding_windows {}
    #[doc = include_str!("../../../book/src/classifier.md")]
    mod classifier {}
    #[doc = include_str!("../../../book/src/corruption.md")]
    mod corruption {}
    #[doc = include_str!("../../../book/src/statistics.md")]
    mod statistics {}
    #[doc = include_str!("../../../book/src/categorization.md")]
    mod categorization {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/command_line.md")]
    mod command_line {}
}
