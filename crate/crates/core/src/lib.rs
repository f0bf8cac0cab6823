pub mod autodiff;
pub mod causal;
pub mod dataset;
pub mod dea;
pub mod gbm;
pub mod linalg;
pub mod lp;
#[cfg(any(test, feature = "oracles"))]
pub mod oracle;
pub mod rng;
pub mod spectral;
