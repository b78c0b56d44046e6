use super::{require_views, ExpertError, ExpertOutput};
use crate::image::Image;
use crate::priors::{l2_norm, normalize, StyleDescriptorProvider};

/// Normalized reference descriptor.
pub struct CsdTarget {
    unit: Vec<f64>,
}

impl CsdTarget {
    pub fn new(reference: &Image, provider: &dyn StyleDescriptorProvider) -> Result<Self, ExpertError> {
        let d = provider.describe(reference);
        if l2_norm(&d) == 0.0 {
            return Err(ExpertError::Degenerate);
        }
        Ok(Self { unit: normalize(&d) })
    }

    /// Mean over views of `1 - cos(d(view), d(ref))`, with gradients.
    pub fn loss(&self, views: &[Image], provider: &dyn StyleDescriptorProvider) -> Result<ExpertOutput, ExpertError> {
        require_views(views)?;
        let n = views.len() as f64;
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(views.len());
        for v in views {
            let d = provider.describe(v);
            let norm = l2_norm(&d);
            if norm == 0.0 {
                return Err(ExpertError::Degenerate);
            }
            let u: Vec<f64> = d.iter().map(|x| x / norm).collect();
            let cos: f64 = u.iter().zip(&self.unit).map(|(a, b)| a * b).sum();
            loss += (1.0 - cos) / n;
            // d(-cos)/dd = -(r - cos u) / |d|
            let gd: Vec<f64> = self.unit.iter().zip(&u).map(|(r, ui)| -(r - cos * ui) / norm / n).collect();
            grads.push(provider.describe_vjp(v, &gd));
        }
        Ok(ExpertOutput { loss, grads })
    }
}

pub fn csd_loss(views: &[Image], reference: &Image, provider: &dyn StyleDescriptorProvider) -> Result<f64, ExpertError> {
    Ok(CsdTarget::new(reference, provider)?.loss(views, provider)?.loss)
}
