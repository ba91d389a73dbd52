#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod central;
pub mod cli;
pub mod ctm;
pub mod dcadmm;
pub mod network;
pub mod pha;
pub mod qp;
