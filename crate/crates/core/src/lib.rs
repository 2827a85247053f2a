//! Hip osteoarthritis grading from CT.
//!
//! The pipeline crops a cube around each femoral-head centre, projects it
//! antero-posteriorly into a 150x150 radiograph, and grades it on a
//! seven-class ordinal scale built from Crowe and Kellgren-Lawrence grades.
//! Grading runs as classification or regression, with either one combined
//! head or two separated heads, and Monte-Carlo dropout provides a
//! per-image uncertainty. Evaluation covers exact and one-neighbour
//! accuracy, balanced accuracy, regression error, and the significance
//! tests used to compare settings.

pub mod drr;
pub mod error;
pub mod experiments;
pub mod grading;
pub mod io_util;
pub mod labels;
pub mod metrics;
pub mod plot;
pub mod stats;
pub mod uncertainty;
pub mod volume;

pub use error::{Error, Result};
