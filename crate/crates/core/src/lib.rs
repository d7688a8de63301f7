//! Block-wise self-supervised architecture search for gridded ensemble
//! rainfall post-processing, plus the verification, baseline and
//! significance-testing tools used to judge the result.
//!
//! The pipeline: [`data`] builds or loads ensemble/observation grids,
//! [`search`] picks one operation per block of the [`supernet`] by
//! contrastive self-supervision, [`retrain`] fits the chosen network under
//! an MSE + HSS objective, and [`metrics`], [`baselines`] and [`dm`] score
//! it.

pub mod baselines;
pub mod data;
pub mod dm;
pub mod error;
pub mod grad;
pub mod layers;
pub mod metrics;
pub mod retrain;
pub mod search;
pub mod search_space;
pub mod supernet;

pub use error::{Error, Result};
