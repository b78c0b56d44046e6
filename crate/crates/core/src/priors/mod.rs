//! Provider interfaces for the pretrained priors, plus deterministic toy
//! backends.
//!
//! Each differentiable provider exposes a vector-Jacobian product next to its
//! forward map so image-space losses can be pulled back onto the renders. Real
//! backends (diffusion UNet, CLIP, VGG, CSD, LPIPS) implement the same traits
//! out of tree; see [`external`].

pub mod external;
mod features;
mod toy;

use thiserror::Error;

use crate::image::Image;
use crate::style_cleaning::StyleEmbedding;

pub use features::{FeatureMap, ToyFeatureExtractor, TOY_LAYER_CHANNELS};
pub use toy::{
    cosine_alpha_bar, ToyDescriptorProvider, ToyEmbeddingProvider, ToyScoreProvider,
    ToyStylizer,
};

#[derive(Debug, Error, PartialEq)]
pub enum PriorError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("unknown feature layer {layer} (extractor has {available})")]
    UnknownLayer { layer: usize, available: usize },
    #[error("timestep {t} outside [0, {total}]")]
    Timestep { t: usize, total: usize },
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
}

/// Joint image/text embedding space (CLIP-like).
pub trait EmbeddingProvider {
    fn dimension(&self) -> usize;
    fn embed_image(&self, image: &Image) -> Vec<f64>;
    fn embed_text(&self, text: &str) -> Vec<f64>;
    /// Pulls `grad` (w.r.t. the embedding) back onto the image.
    fn embed_image_vjp(&self, image: &Image, grad: &[f64]) -> Image;
}

/// Convolutional feature pyramid (VGG-like).
pub trait FeatureExtractor {
    /// Declared channel count of each layer id.
    fn layer_channels(&self) -> &[usize];
    fn features(&self, image: &Image, layers: &[usize]) -> Result<Vec<FeatureMap>, PriorError>;
    /// Pulls one gradient per requested layer back onto the image.
    fn features_vjp(
        &self,
        image: &Image,
        layers: &[usize],
        grads: &[FeatureMap],
    ) -> Result<Image, PriorError>;
}

/// Style descriptor network (CSD-like).
pub trait StyleDescriptorProvider {
    fn dimension(&self) -> usize;
    fn describe(&self, image: &Image) -> Vec<f64>;
    fn describe_vjp(&self, image: &Image, grad: &[f64]) -> Image;
}

/// Noise predictor of a style-conditioned diffusion model.
pub trait DiffusionScoreProvider {
    fn total_timesteps(&self) -> usize;
    /// Cumulative signal fraction at timestep `t`.
    fn alpha_bar(&self, t: usize) -> Result<f64, PriorError>;
    /// `epsilon_phi(noised | prompt, style, t)`; the unconditional-style branch
    /// is `style = None`.
    fn predict_noise(
        &self,
        noised: &Image,
        prompt: &str,
        style: Option<&StyleEmbedding>,
        t: usize,
    ) -> Result<Image, PriorError>;
    fn encode(&self, image: &Image) -> Image;
    fn decode(&self, latent: &Image) -> Image;
    /// Pulls a latent-space gradient back through `encode`.
    fn encode_vjp(&self, image: &Image, grad_latent: &Image) -> Image;
}

/// Produces pre-stylized views used as pixel targets.
pub trait StylizedViewProvider {
    fn stylize(&self, image: &Image, style_reference: &Image) -> Image;
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Unit vector along `v`; zero vectors pass through unchanged.
pub(crate) fn normalize(v: &[f64]) -> Vec<f64> {
    let n = l2_norm(v);
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// VJP of `v -> v / |v|` at `v`.
pub(crate) fn normalize_vjp(v: &[f64], grad: &[f64]) -> Vec<f64> {
    let n = l2_norm(v);
    if n == 0.0 {
        return vec![0.0; v.len()];
    }
    let u: Vec<f64> = v.iter().map(|x| x / n).collect();
    let ug: f64 = u.iter().zip(grad).map(|(a, b)| a * b).sum();
    grad.iter().zip(&u).map(|(g, ui)| (g - ui * ug) / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_vjp_matches_finite_differences() {
        let v = [0.3, -1.2, 0.7];
        let g = [0.5, 0.1, -0.4];
        let analytic = normalize_vjp(&v, &g);
        let f = |v: &[f64]| normalize(v).iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
        for i in 0..3 {
            let mut p = v;
            let mut m = v;
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - analytic[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn normalize_leaves_zero_alone() {
        assert_eq!(normalize(&[0.0, 0.0]), vec![0.0, 0.0]);
    }
}
