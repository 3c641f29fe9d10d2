//! Inner and outer polyhedral approximations of Minkowski sums of generalized
//! battery flexibility sets, computed with linear programs.

pub mod disaggregation;
pub mod error;
pub mod ev;
pub mod experiments;
pub mod inner;
pub mod containment;
pub mod lp;
pub mod oracle2d;
pub mod outer;
pub mod polytope;

pub use error::{Error, Result};
