//! Promptable representation distribution learning (PRDL) and promptable
//! representation sampling (PRS) at desk scale.

// `!(x > 0.0)` also rejects NaN; index loops mirror the formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod augment;
pub mod autodiff;
pub mod dataset;
pub mod error;
mod io;
pub mod loss;
pub mod mil;
pub mod model;
pub mod prs;
pub mod trainer;

pub use error::{Error, Result};
