// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod cnn;
pub mod deadreck;
pub mod drive;
pub mod features;
pub mod forest;
pub mod io;
pub mod error;
pub mod eval;
pub mod par;
pub mod positioning;
pub mod preprocess;
pub mod route;
pub mod sim;
pub mod types;
