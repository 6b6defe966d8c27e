// NaN must fail comparisons, so `!(a <= b)` is deliberate throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod convex_sets;
pub mod dynamics;
pub mod environment;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod metrics;
pub mod offline;
pub mod shepherd;

pub use convex_sets::ConvexSet;
pub use environment::Environment;
pub use error::{Error, Result};
