//! The color-only optimization loop.
//!
//! Each step renders the scheduled view, evaluates the weighted sum
//! `l1 * style + l2 * sos + l3 * csd + l4 * qa`, pulls the image gradient back
//! onto the SH coefficients and applies one Adam update. Geometry is only ever
//! borrowed immutably, so it comes out bitwise identical.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dssd::{dssd_image_gradient, style_objective, DssdConfig, DssdError, GuidanceSample, StyleView};
use crate::experts::{qa_loss_with_grad, CsdTarget, ExpertError, QaConfig, SosConfig, SosTarget};
use crate::gs_model::{ColorGradient, GaussianCloud};
use crate::image::Image;
use crate::priors::{
    DiffusionScoreProvider, EmbeddingProvider, FeatureExtractor, StyleDescriptorProvider, StylizedViewProvider,
};
use crate::renderer::{CameraView, RenderError, RenderPlan};
use crate::scheduler::{view_order, GuidanceState, ModeTimetable, Phase, PhaseAt, ViewSchedule};
use crate::style_cleaning::StyleEmbedding;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Dssd(#[from] DssdError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error("non-finite {what} at step {step}")]
    NonFinite {
        step: usize,
        what: String,
        /// Cloud as it was before the failing step.
        snapshot: Box<GaussianCloud>,
        record: RunRecord,
    },
    #[error("step hook failed: {0}")]
    Hook(String),
}

/// Coefficients of the four expert losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertWeights {
    pub style: f64,
    pub sos: f64,
    pub csd: f64,
    pub qa: f64,
}

impl Default for ExpertWeights {
    fn default() -> Self {
        Self { style: 1.0, sos: 10.0, csd: 1.0, qa: 0.5 }
    }
}

impl ExpertWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        let all = [self.style, self.sos, self.csd, self.qa];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(TrainError::Config(format!("expert weights must be finite and >= 0: {all:?}")));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(TrainError::Config("all expert weights are zero; nothing to optimize".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self { style: self.style * k, sos: self.sos * k, csd: self.csd * k, qa: self.qa * k }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr_dc: f64,
    pub lr_rest: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr_dc: 2.5e-3, lr_rest: 1.25e-4, beta1: 0.9, beta2: 0.999, eps: 1e-15 }
    }
}

/// First and second moments over the color parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m_dc: Vec<[f64; 3]>,
    pub v_dc: Vec<[f64; 3]>,
    pub m_rest: Vec<f64>,
    pub v_rest: Vec<f64>,
}

impl AdamState {
    pub fn new(cloud: &GaussianCloud) -> Self {
        Self {
            t: 0,
            m_dc: vec![[0.0; 3]; cloud.len()],
            v_dc: vec![[0.0; 3]; cloud.len()],
            m_rest: vec![0.0; cloud.sh_rest.len()],
            v_rest: vec![0.0; cloud.sh_rest.len()],
        }
    }

    /// Updates the color parameters in place; geometry is untouched.
    pub fn step(&mut self, cloud: &mut GaussianCloud, grad: &ColorGradient, cfg: &AdamConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64, lr: f64| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
        };
        let colors = cloud.partition().trainable;
        for (i, p) in colors.sh_dc.iter_mut().enumerate() {
            for c in 0..3 {
                update(&mut p[c], grad.sh_dc[i][c], &mut self.m_dc[i][c], &mut self.v_dc[i][c], cfg.lr_dc);
            }
        }
        for (i, p) in colors.sh_rest.iter_mut().enumerate() {
            update(p, grad.sh_rest[i], &mut self.m_rest[i], &mut self.v_rest[i], cfg.lr_rest);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub weights: ExpertWeights,
    pub dssd: DssdConfig,
    pub sos: SosConfig,
    pub qa: QaConfig,
    pub adam: AdamConfig,
    pub timetable: ModeTimetable,
    pub n_opt: u64,
    pub start_view: usize,
    pub seed: u64,
    pub background: [f64; 3],
    /// Stops after this many steps even if the timetable is longer.
    pub max_steps: Option<usize>,
    /// Binarizes the initial alpha into the mask target; `None` keeps it soft.
    pub mask_threshold: Option<f64>,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            weights: ExpertWeights::default(),
            dssd: DssdConfig::default(),
            sos: SosConfig::default(),
            qa: QaConfig::default(),
            adam: AdamConfig::default(),
            timetable: ModeTimetable::default_schedule(),
            n_opt: 10,
            start_view: 0,
            seed,
            background: [0.0; 3],
            max_steps: None,
            mask_threshold: None,
        }
    }

    pub fn total_steps(&self) -> usize {
        let t = self.timetable.total_steps();
        self.max_steps.map_or(t, |m| m.min(t))
    }

    /// True if some step needs pre-stylized guidance views.
    pub fn needs_guidance(&self) -> bool {
        self.weights.style > 0.0
            && (self.dssd.lambda_rgb > 0.0 || self.dssd.lambda_ssim > 0.0 || self.dssd.lambda_lpips > 0.0)
            && self
                .timetable
                .entries()
                .iter()
                .any(|e| e.start < self.total_steps() && (e.overlay || e.phase == Phase::LocalRgb))
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.weights.validate()?;
        self.dssd.validate()?;
        self.sos.validate()?;
        self.qa.validate()?;
        if self.n_opt == 0 {
            return Err(TrainError::Config("n_opt must be >= 1".into()));
        }
        if let Some(t) = self.mask_threshold {
            if !(t > 0.0 && t < 1.0) {
                return Err(TrainError::Config(format!("mask threshold {t} not in (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Style inputs shared by every step.
#[derive(Debug, Clone)]
pub struct StyleBundle {
    pub reference: Image,
    pub embedding: StyleEmbedding,
    /// Content descriptor used as the diffusion text condition.
    pub prompt: String,
    /// Pre-stylized target per camera, if the RGB term is used.
    pub guidance: Option<Vec<Image>>,
}

impl StyleBundle {
    /// Fills `guidance` by stylizing the current renders of every camera.
    pub fn with_stylized_guidance(
        mut self,
        cloud: &GaussianCloud,
        cameras: &[CameraView],
        background: [f64; 3],
        stylizer: &dyn StylizedViewProvider,
    ) -> Result<Self, TrainError> {
        let mut out = Vec::with_capacity(cameras.len());
        for cam in cameras {
            let r = RenderPlan::build(cloud, cam)?.render(cloud, background);
            out.push(stylizer.stylize(&r, &self.reference));
        }
        self.guidance = Some(out);
        Ok(self)
    }
}

#[derive(Clone, Copy)]
pub struct Providers<'a> {
    pub score: &'a dyn DiffusionScoreProvider,
    pub features: &'a dyn FeatureExtractor,
    pub descriptor: &'a dyn StyleDescriptorProvider,
    pub embedding: &'a dyn EmbeddingProvider,
}

/// What one step does.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSpec {
    pub step: usize,
    pub phase: PhaseAt,
    pub view: usize,
    pub state: GuidanceState,
}

#[derive(Debug, Clone)]
pub struct CompositeLoss {
    pub total: f64,
    /// Unweighted per-expert values.
    pub style: f64,
    pub dssd: f64,
    pub rgb: f64,
    pub mask: f64,
    pub sos: f64,
    pub csd: f64,
    pub qa: f64,
    pub sample: GuidanceSample,
    pub grad: ColorGradient,
}

/// Per-step log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    pub overlay: bool,
    pub view: usize,
    pub total: f64,
    pub style: f64,
    pub dssd: f64,
    pub rgb: f64,
    pub mask: f64,
    pub sos: f64,
    pub csd: f64,
    pub qa: f64,
    pub alpha_step: f64,
    pub t: usize,
    pub delta_lambda: f64,
    pub grad_norm: f64,
    /// `|g_t - g_{t-1}|` of the gradient norm; absent on the first step.
    pub oscillation: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub steps: Vec<StepRecord>,
}

impl RunRecord {
    pub fn to_jsonl(&self) -> String {
        self.steps
            .iter()
            .map(|s| serde_json::to_string(s).expect("records serialize") + "\n")
            .collect()
    }

    pub fn grad_norms(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.grad_norm).collect()
    }
}

/// Absolute differences of consecutive gradient norms.
pub fn oscillation_metric(record: &RunRecord) -> Vec<f64> {
    record.grad_norms().windows(2).map(|w| (w[1] - w[0]).abs()).collect()
}

/// Called after every applied step.
pub trait TrainHooks {
    fn on_step(&mut self, _record: &StepRecord, _cloud: &GaussianCloud, _adam: &AdamState) -> Result<(), TrainError> {
        Ok(())
    }
}

pub struct NoHooks;
impl TrainHooks for NoHooks {}

/// Everything derived once from the frozen geometry and the style inputs.
pub struct Trainer<'a> {
    cameras: &'a [CameraView],
    bundle: &'a StyleBundle,
    cfg: &'a TrainConfig,
    providers: Providers<'a>,
    plans: Vec<RenderPlan>,
    alphas: Vec<Image>,
    masks: Vec<Image>,
    schedule: ViewSchedule,
    sos: Option<SosTarget>,
    csd: Option<CsdTarget>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        cloud: &GaussianCloud,
        cameras: &'a [CameraView],
        bundle: &'a StyleBundle,
        cfg: &'a TrainConfig,
        providers: Providers<'a>,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if cameras.is_empty() {
            return Err(TrainError::Config("at least one camera is required".into()));
        }
        if let Some(g) = &bundle.guidance {
            if g.len() != cameras.len() {
                return Err(TrainError::Config(format!("{} guidance views for {} cameras", g.len(), cameras.len())));
            }
        } else if cfg.needs_guidance() {
            return Err(TrainError::Config("RGB guidance is scheduled but no pre-stylized views were given".into()));
        }
        let plans = cameras.iter().map(|c| RenderPlan::build(cloud, c)).collect::<Result<Vec<_>, _>>()?;
        let alphas: Vec<Image> = plans.iter().map(RenderPlan::alpha).collect();
        let masks = match cfg.mask_threshold {
            Some(t) => alphas.iter().map(|a| a.map(|v| if v >= t { 1.0 } else { 0.0 })).collect(),
            None => alphas.clone(),
        };
        let order = view_order(cameras, cfg.start_view);
        let sos = (cfg.weights.sos > 0.0)
            .then(|| SosTarget::new(&bundle.reference, providers.features, &cfg.sos))
            .transpose()?;
        let csd = (cfg.weights.csd > 0.0)
            .then(|| CsdTarget::new(&bundle.reference, providers.descriptor))
            .transpose()?;
        Ok(Self {
            cameras,
            bundle,
            cfg,
            providers,
            plans,
            alphas,
            masks,
            schedule: ViewSchedule::new(order, cfg.n_opt, cfg.seed),
            sos,
            csd,
        })
    }

    pub fn cameras(&self) -> &[CameraView] {
        self.cameras
    }

    pub fn plan(&self, view: usize) -> &RenderPlan {
        &self.plans[view]
    }

    pub fn step_spec(&self, step: usize) -> Result<StepSpec, TrainError> {
        let phase = self
            .cfg
            .timetable
            .phase_at(step)
            .ok_or_else(|| TrainError::Config(format!("step {step} is outside the timetable")))?;
        Ok(StepSpec {
            step,
            phase,
            view: self.schedule.view_at(step as u64, phase.phase),
            state: GuidanceState {
                i_step: step as u64,
                n_view: self.schedule.n_view(),
                n_opt: self.cfg.n_opt,
                mode: phase.phase.mode(),
            },
        })
    }

    /// Noise stream of one step; independent of every other step.
    pub fn step_rng(&self, step: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(step as u64);
        rng
    }

    /// Weighted expert sum on the step's view with its gradient over colors.
    pub fn composite(
        &self,
        cloud: &GaussianCloud,
        spec: &StepSpec,
        weights: &ExpertWeights,
    ) -> Result<CompositeLoss, TrainError> {
        weights.validate()?;
        let v = spec.view;
        let plan = &self.plans[v];
        let render = plan.render(cloud, self.cfg.background);
        let sample = GuidanceSample::from_state(&spec.state, &self.cfg.dssd)?;
        let mut rng = self.step_rng(spec.step);
        let mut grad_img = Image::zeros(render.width(), render.height(), render.channels());
        let mut out = CompositeLoss {
            total: 0.0,
            style: 0.0,
            dssd: 0.0,
            rgb: 0.0,
            mask: 0.0,
            sos: 0.0,
            csd: 0.0,
            qa: 0.0,
            sample,
            grad: ColorGradient::zeros(cloud),
        };

        if weights.style > 0.0 {
            let dssd = if spec.phase.phase.uses_distillation() {
                Some(dssd_image_gradient(
                    &render,
                    &self.bundle.prompt,
                    Some(&self.bundle.embedding),
                    &sample,
                    &self.cfg.dssd,
                    self.providers.score,
                    &mut rng,
                )?)
            } else {
                None
            };
            let rgb_active = spec.phase.overlay || spec.phase.phase == Phase::LocalRgb;
            let views = [StyleView {
                render: &render,
                alpha: &self.alphas[v],
                mask: &self.masks[v],
                guidance: self.bundle.guidance.as_ref().map(|g| &g[v]),
                dssd: dssd.as_ref(),
            }];
            let obj = style_objective(&views, &self.cfg.dssd, rgb_active, Some(self.providers.features))?;
            out.style = obj.total;
            out.dssd = obj.dssd;
            out.rgb = obj.rgb;
            out.mask = obj.mask;
            grad_img = grad_img.axpby(1.0, &obj.grads[0], weights.style).expect("render shape");
        }
        let one = std::slice::from_ref(&render);
        if weights.sos > 0.0 {
            let target = self.sos.as_ref().ok_or_else(|| TrainError::Config("SOS target not prepared".into()))?;
            let o = target.loss(one, self.providers.features, spec.step)?;
            out.sos = o.loss;
            grad_img = grad_img.axpby(1.0, &o.grads[0], weights.sos).expect("render shape");
        }
        if weights.csd > 0.0 {
            let target = self.csd.as_ref().ok_or_else(|| TrainError::Config("CSD target not prepared".into()))?;
            let o = target.loss(one, self.providers.descriptor)?;
            out.csd = o.loss;
            grad_img = grad_img.axpby(1.0, &o.grads[0], weights.csd).expect("render shape");
        }
        if weights.qa > 0.0 {
            let o = qa_loss_with_grad(one, &self.cfg.qa, self.providers.embedding)?;
            out.qa = o.loss;
            grad_img = grad_img.axpby(1.0, &o.grads[0], weights.qa).expect("render shape");
        }
        out.total = weights.style * out.style + weights.sos * out.sos + weights.csd * out.csd + weights.qa * out.qa;
        out.grad = plan.sh_gradient(&grad_img);
        Ok(out)
    }

    /// Runs the timetable from `cloud`, returning the stylized copy.
    pub fn run(&self, cloud: &GaussianCloud, hooks: &mut dyn TrainHooks) -> Result<(GaussianCloud, RunRecord), TrainError> {
        let mut current = cloud.clone();
        let mut adam = AdamState::new(cloud);
        let mut record = RunRecord::default();
        for step in 0..self.cfg.total_steps() {
            let spec = self.step_spec(step)?;
            let loss = self.composite(&current, &spec, &self.cfg.weights)?;
            let bad = if !loss.total.is_finite() {
                Some("loss")
            } else if !loss.grad.is_finite() {
                Some("gradient")
            } else {
                None
            };
            if let Some(what) = bad {
                return Err(TrainError::NonFinite {
                    step,
                    what: what.into(),
                    snapshot: Box::new(current),
                    record,
                });
            }
            adam.step(&mut current, &loss.grad, &self.cfg.adam);
            let grad_norm = loss.grad.norm();
            let oscillation = record.steps.last().map(|p| (grad_norm - p.grad_norm).abs());
            record.steps.push(StepRecord {
                step,
                phase: spec.phase.phase,
                overlay: spec.phase.overlay,
                view: spec.view,
                total: loss.total,
                style: loss.style,
                dssd: loss.dssd,
                rgb: loss.rgb,
                mask: loss.mask,
                sos: loss.sos,
                csd: loss.csd,
                qa: loss.qa,
                alpha_step: loss.sample.alpha_step,
                t: loss.sample.t,
                delta_lambda: loss.sample.delta_lambda,
                grad_norm,
                oscillation,
            });
            hooks.on_step(record.steps.last().expect("just pushed"), &current, &adam)?;
        }
        Ok((current, record))
    }
}

/// One composite evaluation at `step` (see [`Trainer::composite`]).
pub fn composite_loss(
    cloud: &GaussianCloud,
    cameras: &[CameraView],
    bundle: &StyleBundle,
    cfg: &TrainConfig,
    providers: Providers<'_>,
    step: usize,
) -> Result<CompositeLoss, TrainError> {
    let trainer = Trainer::new(cloud, cameras, bundle, cfg, providers)?;
    let spec = trainer.step_spec(step)?;
    trainer.composite(cloud, &spec, &cfg.weights)
}

pub fn stylize(
    cloud: &GaussianCloud,
    cameras: &[CameraView],
    bundle: &StyleBundle,
    cfg: &TrainConfig,
    providers: Providers<'_>,
    hooks: &mut dyn TrainHooks,
) -> Result<(GaussianCloud, RunRecord), TrainError> {
    Trainer::new(cloud, cameras, bundle, cfg, providers)?.run(cloud, hooks)
}
