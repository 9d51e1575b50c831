#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod model;
pub mod solver;
pub mod analysis;
pub mod cli;
