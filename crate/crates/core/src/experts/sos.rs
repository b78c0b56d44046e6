use serde::{Deserialize, Serialize};

use super::{require_views, ExpertError, ExpertOutput};
use crate::image::{scaled_dims, Image, ResamplePlan};
use crate::priors::{FeatureExtractor, FeatureMap, TOY_LAYER_CHANNELS};

/// Channel Gram matrix `F F^T` (row-major `[C][C]`), unnormalized.
pub fn gram(f: &FeatureMap) -> Vec<f64> {
    let c = f.channels;
    let hw = f.spatial();
    let mut g = vec![0.0; c * c];
    for i in 0..c {
        let fi = &f.data[i * hw..(i + 1) * hw];
        for j in i..c {
            let fj = &f.data[j * hw..(j + 1) * hw];
            let v: f64 = fi.iter().zip(fj).map(|(a, b)| a * b).sum();
            g[i * c + j] = v;
            g[j * c + i] = v;
        }
    }
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SosConfig {
    pub layers: Vec<usize>,
    pub weights: Vec<f64>,
    pub scales: Vec<f64>,
    /// Steps below this use only `pretrain_scale`.
    pub pretrain_iterations: usize,
    /// Fixed scale of the pretraining phase; `None` means the smallest scale.
    pub pretrain_scale: Option<f64>,
}

impl Default for SosConfig {
    fn default() -> Self {
        Self::for_channels(&[0, 1, 2, 3, 4], &TOY_LAYER_CHANNELS)
    }
}

impl SosConfig {
    /// `1e3 / C_l^2` weights for the given layers.
    pub fn for_channels(layers: &[usize], channels: &[usize]) -> Self {
        Self {
            layers: layers.to_vec(),
            weights: layers.iter().map(|&l| 1e3 / (channels[l] as f64).powi(2)).collect(),
            scales: vec![1.0, 0.5, 0.25],
            pretrain_iterations: 10_000,
            pretrain_scale: Some(0.5),
        }
    }

    /// Three-layer variant (first, third and fifth style layers).
    pub fn three_layer(channels: &[usize]) -> Self {
        Self::for_channels(&[0, 2, 4], channels)
    }

    /// Five VGG-19 style layers with 64/128/256/512/512 channels.
    pub fn vgg19() -> Self {
        Self::for_channels(&[0, 1, 2, 3, 4], &[64, 128, 256, 512, 512])
    }

    pub fn validate(&self) -> Result<(), ExpertError> {
        if self.layers.is_empty() || self.layers.len() != self.weights.len() {
            return Err(ExpertError::Config(format!(
                "{} SOS layers but {} weights",
                self.layers.len(),
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !(*w > 0.0)) {
            return Err(ExpertError::Config("SOS weights must be > 0".into()));
        }
        let in_range = |s: &f64| *s > 0.0 && *s <= 1.0;
        if self.scales.is_empty() || !self.scales.iter().all(in_range) {
            return Err(ExpertError::Config("SOS scales must be nonempty and in (0, 1]".into()));
        }
        if let Some(s) = self.pretrain_scale {
            if !in_range(&s) {
                return Err(ExpertError::Config(format!("SOS pretrain scale {s} not in (0, 1]")));
            }
        }
        Ok(())
    }

    /// Scales in effect at `step`.
    pub fn active_scales(&self, step: usize) -> Vec<f64> {
        if step < self.pretrain_iterations {
            let fixed = self
                .pretrain_scale
                .unwrap_or_else(|| self.scales.iter().copied().fold(f64::INFINITY, f64::min));
            vec![fixed]
        } else {
            self.scales.clone()
        }
    }
}

fn check_scale(img: &Image, scale: f64, what: &str) -> Result<(), ExpertError> {
    if (img.width() as f64 * scale) < 1.0 || (img.height() as f64 * scale) < 1.0 {
        return Err(ExpertError::Argument(format!(
            "{what} {}x{} is too small for scale {scale}",
            img.width(),
            img.height()
        )));
    }
    Ok(())
}

fn rescale(img: &Image, scale: f64) -> (Image, ResamplePlan) {
    let (w, h) = scaled_dims(img.width(), img.height(), scale);
    let plan = ResamplePlan::bilinear(img.width(), img.height(), w, h);
    (plan.apply(img), plan)
}

/// Reference Grams cached per scale.
pub struct SosTarget {
    cfg: SosConfig,
    grams: Vec<(f64, Vec<Vec<f64>>)>,
}

impl SosTarget {
    pub fn new(reference: &Image, extractor: &dyn FeatureExtractor, cfg: &SosConfig) -> Result<Self, ExpertError> {
        cfg.validate()?;
        let mut scales = cfg.scales.clone();
        scales.extend(cfg.pretrain_scale);
        let mut grams = Vec::new();
        for s in scales {
            if grams.iter().any(|(g, _): &(f64, _)| *g == s) {
                continue;
            }
            check_scale(reference, s, "reference")?;
            let (r, _) = rescale(reference, s);
            let feats = extractor.features(&r, &cfg.layers)?;
            grams.push((s, feats.iter().map(gram).collect()));
        }
        Ok(Self { cfg: cfg.clone(), grams })
    }

    pub fn config(&self) -> &SosConfig {
        &self.cfg
    }

    fn grams_at(&self, scale: f64) -> &[Vec<f64>] {
        &self.grams.iter().find(|(s, _)| *s == scale).expect("scale cached").1
    }

    /// Mean over views of the weighted squared Frobenius Gram distance summed
    /// over active scales and layers, with gradients.
    pub fn loss(&self, views: &[Image], extractor: &dyn FeatureExtractor, step: usize) -> Result<ExpertOutput, ExpertError> {
        require_views(views)?;
        let n = views.len() as f64;
        let scales = self.cfg.active_scales(step);
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(views.len());
        for view in views {
            let mut grad = Image::zeros(view.width(), view.height(), view.channels());
            for &s in &scales {
                check_scale(view, s, "view")?;
                let (v, plan) = rescale(view, s);
                let feats = extractor.features(&v, &self.cfg.layers)?;
                let mut fgrads = Vec::with_capacity(feats.len());
                for ((f, w), r) in feats.iter().zip(&self.cfg.weights).zip(self.grams_at(s)) {
                    let g = gram(f);
                    let d: Vec<f64> = g.iter().zip(r).map(|(a, b)| a - b).collect();
                    loss += w * d.iter().map(|x| x * x).sum::<f64>() / n;
                    // d/dF w |F F^T - R|^2 = 4 w (G - R) F
                    let c = f.channels;
                    let hw = f.spatial();
                    let mut gf = FeatureMap::zeros(c, f.height, f.width);
                    for i in 0..c {
                        for j in 0..c {
                            let k = 4.0 * w * d[i * c + j] / n;
                            if k == 0.0 {
                                continue;
                            }
                            let src = &f.data[j * hw..(j + 1) * hw];
                            gf.data[i * hw..(i + 1) * hw].iter_mut().zip(src).for_each(|(a, b)| *a += k * b);
                        }
                    }
                    fgrads.push(gf);
                }
                let gv = extractor.features_vjp(&v, &self.cfg.layers, &fgrads)?;
                grad = grad.axpby(1.0, &plan.apply_transpose(&gv), 1.0).expect("view shape");
            }
            grads.push(grad);
        }
        Ok(ExpertOutput { loss, grads })
    }
}

/// One-shot SOS loss; build a [`SosTarget`] to reuse the reference Grams.
pub fn sos_loss(
    views: &[Image],
    reference: &Image,
    extractor: &dyn FeatureExtractor,
    cfg: &SosConfig,
    step: usize,
) -> Result<f64, ExpertError> {
    Ok(SosTarget::new(reference, extractor, cfg)?.loss(views, extractor, step)?.loss)
}
