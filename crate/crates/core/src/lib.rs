// Casts between `Real` and `f64` are no-ops only without the `f32` feature;
// negated comparisons deliberately reject NaN.
#![allow(
    clippy::unnecessary_cast,
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod cells;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod sequence;
pub mod tasks;
pub mod training;
