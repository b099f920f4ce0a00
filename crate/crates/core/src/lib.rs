// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod geometry;
pub mod harness;
pub mod mcd;
pub mod metrics;
pub mod rng;
pub mod scene;
pub mod scn;
pub mod tensor;
