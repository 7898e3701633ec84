// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod backends;
pub mod datamodel;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod rng;
pub mod training;
pub mod workflows;
