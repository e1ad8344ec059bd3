//! Self-training reader for answer and evidence extraction.
//!
//! A hierarchical-attention reader is trained from answer supervision alone,
//! then iteratively labels its own most confident unlabeled instances with
//! pseudo evidence sentences and retrains with joint answer/evidence loss.
//! Synthetic corpora with planted evidence make the whole loop testable end
//! to end.

pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod seeding;
pub mod selftrain;
#[cfg(any(test, feature = "testtools"))]
pub mod testtools;

pub use error::{Result, StmError};
