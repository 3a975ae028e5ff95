//! Bias similarity measurement: fairness metrics, distribution and
//! representation comparisons, pairwise signatures and audit workflows over
//! recorded model outputs.

pub mod audit;
pub mod dist;
pub mod loader;
pub mod model;
pub mod normalize;
pub mod openended;
pub mod reference;
pub mod repr;
pub mod scalar;
pub mod signature;
pub mod synth;
