//! Auxiliary experts: multi-scale Gram (SOS), style-descriptor similarity
//! (CSD) and antonym-prompt quality (QA) losses, each with a gradient on the
//! rendered views.

mod csd;
mod qa;
mod sos;

use thiserror::Error;

use crate::image::Image;
use crate::priors::PriorError;

pub use csd::{csd_loss, CsdTarget};
pub use qa::{clip_iqa_score, qa_loss, qa_loss_with_grad, QaConfig, QaCriterion};
pub use sos::{gram, sos_loss, SosConfig, SosTarget};

#[derive(Debug, Error, PartialEq)]
pub enum ExpertError {
    #[error("{0}")]
    Argument(String),
    #[error("invalid expert config: {0}")]
    Config(String),
    #[error("style descriptor has zero norm")]
    Degenerate,
    #[error(transparent)]
    Prior(#[from] PriorError),
}

/// Scalar loss averaged over views, with one gradient per view.
#[derive(Debug, Clone)]
pub struct ExpertOutput {
    pub loss: f64,
    pub grads: Vec<Image>,
}

fn require_views(views: &[Image]) -> Result<(), ExpertError> {
    if views.is_empty() {
        return Err(ExpertError::Argument("at least one view is required".into()));
    }
    Ok(())
}
