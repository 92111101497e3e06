//! Asymmetric branched mean teaching at desk scale.
//!
//! Two-stage unsupervised domain adaptation for re-identification style
//! retrieval: supervised pre-training of a two-branch encoder on a labeled
//! source domain, then pseudo-label adaptation on an unlabeled target domain
//! with an EMA mean teacher and cross-branch soft supervision. Everything,
//! including the autodiff engine, is implemented here over `f64`.

pub mod config;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod losses;
pub mod mean_teacher;
pub mod pipeline;
pub mod pseudo_labels;
pub mod tensor;

pub use error::{AbmtError, Result};
