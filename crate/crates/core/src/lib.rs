// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod video;
pub mod codec;
pub mod optim;
pub mod analyzer;
pub mod container;
pub mod params;
pub mod preprocessor;
pub mod training;
pub mod harness;
pub mod evaluation;
