//! Dynamic style score distillation and the style objective built on it.
//!
//! The distillation residual mixes the style-free and style-conditioned
//! noise predictions with the scheduled coefficient `delta_lambda`:
//! `(1 - dl) * eps(x_t | y, t) + dl * eps(x_t | y, s, t) - eps`. It is used as
//! a gradient on the render, once in latent space (pulled back through the
//! encoder) and once in pixel space.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gs_model::{ColorGradient, GaussianCloud};
use crate::image::Image;
use crate::metrics;
use crate::priors::{DiffusionScoreProvider, FeatureExtractor, PriorError};
use crate::renderer::{CameraView, RenderError, RenderPlan};
use crate::scheduler::{dynamic_cfg, sample_timestep, GuidanceState, ScheduleError};
use crate::style_cleaning::StyleEmbedding;

#[derive(Debug, Error, PartialEq)]
pub enum DssdError {
    #[error("provider returned shape {got:?}, expected {expected:?}")]
    ShapeContract {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("invalid distillation config: {0}")]
    Config(String),
    #[error("RGB loss is active but view {view} has no pre-stylized guidance image")]
    MissingGuidance { view: usize },
}

/// Timestep weighting of the distillation gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Omega {
    ConstantOne,
    OneMinusAlphaBar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DssdConfig {
    /// Latent-branch weight.
    pub lambda_z: f64,
    /// Pixel-branch weight.
    pub lambda_x: f64,
    pub lambda_dssd: f64,
    /// Applied only while the RGB overlay (or an RGB-only phase) is active.
    pub lambda_rgb: f64,
    pub lambda_mask: f64,
    /// Optional extra alignment terms against the pre-stylized views.
    pub lambda_ssim: f64,
    pub lambda_lpips: f64,
    pub omega: Omega,
    pub total_timesteps: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub lambda_max: f64,
}

impl Default for DssdConfig {
    fn default() -> Self {
        Self {
            lambda_z: 1.0,
            lambda_x: 1.0,
            lambda_dssd: 1.0,
            lambda_rgb: 1.0,
            lambda_mask: 0.1,
            lambda_ssim: 0.0,
            lambda_lpips: 0.0,
            omega: Omega::ConstantOne,
            total_timesteps: 1000,
            t_min: 20,
            t_max: 750,
            lambda_max: 20.0,
        }
    }
}

impl DssdConfig {
    pub fn validate(&self) -> Result<(), DssdError> {
        let weights = [
            ("lambda_z", self.lambda_z),
            ("lambda_x", self.lambda_x),
            ("lambda_dssd", self.lambda_dssd),
            ("lambda_rgb", self.lambda_rgb),
            ("lambda_mask", self.lambda_mask),
            ("lambda_ssim", self.lambda_ssim),
            ("lambda_lpips", self.lambda_lpips),
        ];
        for (name, w) in weights {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(DssdError::Config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        if !(self.lambda_z > 0.0 || self.lambda_x > 0.0) {
            return Err(DssdError::Config("at least one of lambda_z, lambda_x must be > 0".into()));
        }
        if self.t_min > self.t_max || self.t_max > self.total_timesteps {
            return Err(ScheduleError::TimestepBounds {
                t_min: self.t_min,
                t_max: self.t_max,
                total: self.total_timesteps,
            }
            .into());
        }
        if !(self.lambda_max >= crate::scheduler::CFG_FLOOR) {
            return Err(DssdError::Config(format!("lambda_max must be >= 7.5, got {}", self.lambda_max)));
        }
        Ok(())
    }

    pub fn omega(&self, alpha_bar: f64) -> f64 {
        match self.omega {
            Omega::ConstantOne => 1.0,
            Omega::OneMinusAlphaBar => 1.0 - alpha_bar,
        }
    }
}

/// `sqrt(abar) * x + sqrt(1 - abar) * eps`.
pub fn forward_noise(x: &Image, eps: &Image, alpha_bar: f64) -> Image {
    x.axpby(alpha_bar.sqrt(), eps, (1.0 - alpha_bar).sqrt())
        .expect("noise matches image shape")
}

pub fn sample_noise<R: Rng + ?Sized>(rng: &mut R, like: &Image) -> Image {
    let data = (0..like.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Image::from_vec(like.width(), like.height(), like.channels(), data).expect("same length")
}

fn check_shape(expected: &Image, got: &Image) -> Result<(), DssdError> {
    if expected.shape() != got.shape() {
        return Err(DssdError::ShapeContract {
            expected: expected.shape(),
            got: got.shape(),
        });
    }
    Ok(())
}

/// Mixes the two noise predictions at `noised` and subtracts the injected noise.
pub fn dssd_residual(
    noised: &Image,
    prompt: &str,
    style: Option<&StyleEmbedding>,
    t: usize,
    delta_lambda: f64,
    eps: &Image,
    provider: &dyn DiffusionScoreProvider,
) -> Result<Image, DssdError> {
    check_shape(noised, eps)?;
    let plain = provider.predict_noise(noised, prompt, None, t)?;
    check_shape(noised, &plain)?;
    let styled = match style {
        Some(_) => {
            let s = provider.predict_noise(noised, prompt, style, t)?;
            check_shape(noised, &s)?;
            s
        }
        None => plain.clone(),
    };
    let data = plain
        .data()
        .iter()
        .zip(styled.data())
        .zip(eps.data())
        .map(|((u, s), e)| (1.0 - delta_lambda) * u + delta_lambda * s - e)
        .collect();
    Ok(Image::from_vec(noised.width(), noised.height(), noised.channels(), data).expect("same shape"))
}

/// Scheduled quantities for one distillation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceSample {
    pub alpha_step: f64,
    pub t: usize,
    pub delta_lambda: f64,
}

impl GuidanceSample {
    pub fn from_state(state: &GuidanceState, cfg: &DssdConfig) -> Result<Self, DssdError> {
        let alpha_step = state.alpha_step();
        Ok(Self {
            alpha_step,
            t: sample_timestep(alpha_step, cfg.total_timesteps, cfg.t_min, cfg.t_max)?,
            delta_lambda: dynamic_cfg(alpha_step, cfg.lambda_max),
        })
    }
}

/// Distillation term on one render.
#[derive(Debug, Clone)]
pub struct DssdOutput {
    /// Surrogate scalar `omega * sum_b lambda_b * mean(r_b^2) / 2`.
    pub loss: f64,
    /// Gradient of the surrogate w.r.t. the render.
    pub grad: Image,
}

/// Latent and pixel branches on `render`, with fresh noise drawn from `rng`.
pub fn dssd_image_gradient<R: Rng + ?Sized>(
    render: &Image,
    prompt: &str,
    style: Option<&StyleEmbedding>,
    sample: &GuidanceSample,
    cfg: &DssdConfig,
    provider: &dyn DiffusionScoreProvider,
    rng: &mut R,
) -> Result<DssdOutput, DssdError> {
    let abar = provider.alpha_bar(sample.t)?;
    let omega = cfg.omega(abar);
    let mut loss = 0.0;
    let mut grad = Image::zeros(render.width(), render.height(), render.channels());

    if cfg.lambda_z > 0.0 {
        let z = provider.encode(render);
        let eps = sample_noise(rng, &z);
        let zt = forward_noise(&z, &eps, abar);
        let res = dssd_residual(&zt, prompt, style, sample.t, sample.delta_lambda, &eps, provider)?;
        let n = res.len() as f64;
        loss += omega * cfg.lambda_z * 0.5 * res.data().iter().map(|r| r * r).sum::<f64>() / n;
        let g = provider.encode_vjp(render, &res.map(|r| omega * cfg.lambda_z * r / n));
        check_shape(render, &g)?;
        grad = grad.axpby(1.0, &g, 1.0).expect("same shape");
    }
    if cfg.lambda_x > 0.0 {
        let eps = sample_noise(rng, render);
        let xt = forward_noise(render, &eps, abar);
        let res = dssd_residual(&xt, prompt, style, sample.t, sample.delta_lambda, &eps, provider)?;
        let n = res.len() as f64;
        loss += omega * cfg.lambda_x * 0.5 * res.data().iter().map(|r| r * r).sum::<f64>() / n;
        grad = grad.axpby(1.0, &res, omega * cfg.lambda_x / n).expect("same shape");
    }
    Ok(DssdOutput { loss, grad })
}

/// Distillation gradient over the color parameters for one view. Geometry
/// receives no gradient: the result type only carries color fields.
#[allow(clippy::too_many_arguments)]
pub fn dssd_color_gradient<R: Rng + ?Sized>(
    cloud: &GaussianCloud,
    view: &CameraView,
    background: [f64; 3],
    prompt: &str,
    style: Option<&StyleEmbedding>,
    state: &GuidanceState,
    cfg: &DssdConfig,
    provider: &dyn DiffusionScoreProvider,
    rng: &mut R,
) -> Result<(f64, ColorGradient), DssdError> {
    let plan = RenderPlan::build(cloud, view)?;
    let render = plan.render(cloud, background);
    let sample = GuidanceSample::from_state(state, cfg)?;
    let out = dssd_image_gradient(&render, prompt, style, &sample, cfg, provider, rng)?;
    Ok((out.loss, plan.sh_gradient(&out.grad)))
}

/// Everything the style objective needs about one view.
pub struct StyleView<'a> {
    pub render: &'a Image,
    pub alpha: &'a Image,
    pub mask: &'a Image,
    pub guidance: Option<&'a Image>,
    pub dssd: Option<&'a DssdOutput>,
}

#[derive(Debug, Clone)]
pub struct StyleObjective {
    pub total: f64,
    pub dssd: f64,
    pub rgb: f64,
    pub mask: f64,
    pub ssim: f64,
    pub lpips: f64,
    /// Gradient of `total` w.r.t. each render.
    pub grads: Vec<Image>,
}

/// `lambda_dssd * L_dssd + lambda_rgb * L_rgb + lambda_mask * L_mask`, each
/// term averaged over views. `rgb_active` gates the RGB term (and the optional
/// SSIM/LPIPS alignment terms, which share its guidance images).
pub fn style_objective(
    views: &[StyleView<'_>],
    cfg: &DssdConfig,
    rgb_active: bool,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<StyleObjective, DssdError> {
    let n = views.len().max(1) as f64;
    let align = rgb_active && (cfg.lambda_rgb > 0.0 || cfg.lambda_ssim > 0.0 || cfg.lambda_lpips > 0.0);
    let mut out = StyleObjective {
        total: 0.0,
        dssd: 0.0,
        rgb: 0.0,
        mask: 0.0,
        ssim: 0.0,
        lpips: 0.0,
        grads: Vec::with_capacity(views.len()),
    };
    for (k, v) in views.iter().enumerate() {
        let mut grad = Image::zeros(v.render.width(), v.render.height(), v.render.channels());
        if let Some(d) = v.dssd {
            out.dssd += d.loss / n;
            grad = grad.axpby(1.0, &d.grad, cfg.lambda_dssd / n).expect("render shape");
        }
        out.mask += v.alpha.mse(v.mask).map_err(|e| DssdError::Config(e.to_string()))? / n;
        if align {
            let target = v.guidance.ok_or(DssdError::MissingGuidance { view: k })?;
            let diff = v.render.axpby(1.0, target, -1.0).map_err(|e| DssdError::Config(e.to_string()))?;
            let m = diff.len() as f64;
            out.rgb += diff.data().iter().map(|d| d * d).sum::<f64>() / m / n;
            grad = grad.axpby(1.0, &diff, cfg.lambda_rgb * 2.0 / m / n).expect("render shape");
            if cfg.lambda_ssim > 0.0 {
                let (s, g) = metrics::ssim_with_grad(v.render, target).map_err(|e| DssdError::Config(e.to_string()))?;
                out.ssim += (1.0 - s) / n;
                grad = grad.axpby(1.0, &g, -cfg.lambda_ssim / n).expect("render shape");
            }
            if cfg.lambda_lpips > 0.0 {
                let fx = extractor.ok_or_else(|| DssdError::Config("LPIPS term needs a feature extractor".into()))?;
                let (l, g) = metrics::lpips_with_grad(v.render, target, fx, &metrics::DEFAULT_LPIPS_LAYERS)
                    .map_err(|e| DssdError::Config(e.to_string()))?;
                out.lpips += l / n;
                grad = grad.axpby(1.0, &g, cfg.lambda_lpips / n).expect("render shape");
            }
        }
        out.grads.push(grad);
    }
    let rgb_w = if rgb_active { cfg.lambda_rgb } else { 0.0 };
    out.total = cfg.lambda_dssd * out.dssd
        + rgb_w * out.rgb
        + cfg.lambda_mask * out.mask
        + cfg.lambda_ssim * out.ssim
        + cfg.lambda_lpips * out.lpips;
    Ok(out)
}
