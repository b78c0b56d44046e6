//! Isolates a style direction in the joint embedding space by removing what
//! the content descriptor explains about the style image.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;
use crate::priors::{l2_norm, normalize, EmbeddingProvider};

#[derive(Debug, Error, PartialEq)]
pub enum StyleError {
    #[error("content descriptor text must be nonempty")]
    EmptyContent,
    #[error("style embedding cancelled to zero norm")]
    Degenerate,
}

/// Where a [`StyleEmbedding`] came from, with the intermediate legs kept so the
/// arithmetic can be audited or undone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_image: String,
    pub content_text: String,
    pub style_text: Option<String>,
    /// Normalized image embedding.
    pub image_leg: Vec<f64>,
    /// Normalized content-text embedding (zero if the text embeds to zero).
    pub content_leg: Vec<f64>,
    pub style_leg: Option<Vec<f64>>,
    /// `image_leg - content_leg (+ style_leg)` before the final normalization.
    pub combined: Vec<f64>,
}

/// Unit-length style vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleEmbedding {
    vector: Vec<f64>,
    pub provenance: Provenance,
}

impl StyleEmbedding {
    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn dimension(&self) -> usize {
        self.vector.len()
    }
}

/// `normalize(img - content [+ style])`, each leg normalized first so the
/// result does not depend on the provider's output scale.
pub fn clean_style(
    style_image: &Image,
    source_id: &str,
    content_text: &str,
    style_text: Option<&str>,
    provider: &dyn EmbeddingProvider,
) -> Result<StyleEmbedding, StyleError> {
    if content_text.trim().is_empty() {
        return Err(StyleError::EmptyContent);
    }
    let image_leg = normalize(&provider.embed_image(style_image));
    let content_leg = normalize(&provider.embed_text(content_text));
    let style_leg = style_text.map(|t| normalize(&provider.embed_text(t)));

    let mut combined: Vec<f64> = image_leg.iter().zip(&content_leg).map(|(a, b)| a - b).collect();
    if let Some(s) = &style_leg {
        combined.iter_mut().zip(s).for_each(|(a, b)| *a += b);
    }
    let norm = l2_norm(&combined);
    if !(norm > 1e-12) {
        return Err(StyleError::Degenerate);
    }
    Ok(StyleEmbedding {
        vector: combined.iter().map(|v| v / norm).collect(),
        provenance: Provenance {
            source_image: source_id.to_string(),
            content_text: content_text.to_string(),
            style_text: style_text.map(str::to_string),
            image_leg,
            content_leg,
            style_leg,
            combined,
        },
    })
}
