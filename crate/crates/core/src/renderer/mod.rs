//! Forward splatting renderer: project, global depth sort, front-to-back
//! alpha compositing.
//!
//! With geometry held fixed the image is linear in the per-Gaussian colors,
//! so a [`RenderPlan`] stores the compositing weights once per view and
//! serves both the forward image and the exact color gradient.

mod camera;

use nalgebra::{Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::gs_model::{logistic, sh, ColorGradient, GaussianCloud};
use crate::image::Image;

pub use camera::CameraView;

/// Gaussians closer than this (camera-space depth) are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Splat footprint is cut at this many standard deviations.
pub const SUPPORT_SIGMAS: f64 = 3.0;
/// Contributions with `alpha_hat` below this are dropped.
pub const ALPHA_FLOOR: f64 = 1.0 / 255.0;
/// Upper bound on `N * H * W` for dense weight tensors.
pub const DENSE_WEIGHT_LIMIT: usize = 1 << 24;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("image must have nonzero width and height")]
    ZeroSize,
    #[error("invalid camera: {0}")]
    Camera(String),
    #[error("dense weights need {needed} entries, limit is {limit}; use the sparse render plan instead")]
    Capacity { needed: usize, limit: usize },
    #[error("mask threshold must lie in (0, 1), got {0}")]
    Threshold(f64),
}

/// One Gaussian after projection into a view.
#[derive(Debug, Clone)]
pub struct ProjectedGaussian {
    /// Index into the source cloud.
    pub index: usize,
    /// Pixel-space mean; pixel `(i, j)` is sampled at `(i + 0.5, j + 0.5)`.
    pub mean: [f64; 2],
    /// Symmetric 2D covariance `[a, b, c]` for `[[a, b], [b, c]]`.
    pub cov: [f64; 3],
    /// Inverse of `cov`, same packing.
    pub conic: [f64; 3],
    pub depth: f64,
    /// Activated opacity.
    pub opacity: f64,
    /// Half-extent of the support box in pixels.
    pub radius: f64,
    /// SH basis at this Gaussian's view direction.
    pub basis: [f64; 16],
}

impl ProjectedGaussian {
    /// Unnormalized Gaussian falloff at a pixel-space point; zero outside the
    /// truncated support.
    #[inline]
    pub fn falloff(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.mean[0];
        let dy = y - self.mean[1];
        let [a, b, c] = self.conic;
        let m2 = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
        if m2 > SUPPORT_SIGMAS * SUPPORT_SIGMAS {
            0.0
        } else {
            (-0.5 * m2).exp()
        }
    }
}

pub fn quaternion_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let uq = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
    uq.to_rotation_matrix().into_inner()
}

/// 3D covariance `R S S^T R^T`.
pub fn covariance_3d(rotation: [f64; 4], log_scale: [f64; 3]) -> Matrix3<f64> {
    let r = quaternion_to_matrix(rotation);
    let s = Matrix3::from_diagonal(&Vector3::from(log_scale.map(f64::exp)));
    let m = r * s;
    m * m.transpose()
}

/// Projects every visible Gaussian. Output order follows the cloud.
pub fn project_gaussians(cloud: &GaussianCloud, view: &CameraView) -> Vec<ProjectedGaussian> {
    let rot = view.rotation();
    let trans = view.translation();
    let center = view.center();
    let mut out = Vec::with_capacity(cloud.len());
    for i in 0..cloud.len() {
        let mu = Vector3::from(cloud.positions[i]);
        let p = rot * mu + trans;
        if !(p.z > NEAR_PLANE) {
            continue;
        }
        let (x, y, z) = (p.x, p.y, p.z);
        let jac = Matrix2x3::new(
            view.fx / z,
            0.0,
            -view.fx * x / (z * z),
            0.0,
            view.fy / z,
            -view.fy * y / (z * z),
        );
        let sigma = covariance_3d(cloud.rotations[i], cloud.log_scales[i]);
        let t = jac * rot;
        let cov = t * sigma * t.transpose();
        let (a, b, c) = (cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]);
        let det = a * c - b * b;
        if !(det > 0.0) || !det.is_finite() {
            continue;
        }
        let mid = 0.5 * (a + c);
        let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
        let dir = (mu - center).normalize();
        out.push(ProjectedGaussian {
            index: i,
            mean: [view.fx * x / z + view.cx, view.fy * y / z + view.cy],
            cov: [a, b, c],
            conic: [c / det, -b / det, a / det],
            depth: z,
            opacity: logistic(cloud.opacity_logits[i]),
            radius: SUPPORT_SIGMAS * lambda_max.sqrt(),
            basis: sh::basis(&dir, cloud.sh_degree),
        });
    }
    out
}

/// Per-Gaussian RGB evaluated once per view.
pub fn gaussian_colors(cloud: &GaussianCloud, projected: &[ProjectedGaussian]) -> Vec<[f64; 3]> {
    projected
        .iter()
        .map(|g| sh::eval_color(&g.basis, cloud.sh_degree, &cloud.sh_dc[g.index], cloud.rest_row(g.index)))
        .collect()
}

/// Compositing weights of one view with geometry fixed.
///
/// Each pixel holds its contributors in front-to-back order as
/// `(slot, weight)` where `slot` indexes [`RenderPlan::projected`].
#[derive(Debug, Clone)]
pub struct RenderPlan {
    width: usize,
    height: usize,
    sh_degree: u8,
    num_gaussians: usize,
    projected: Vec<ProjectedGaussian>,
    offsets: Vec<usize>,
    entries: Vec<(u32, f64)>,
    background_weight: Vec<f64>,
}

impl RenderPlan {
    pub fn build(cloud: &GaussianCloud, view: &CameraView) -> Result<Self, RenderError> {
        view.validate()?;
        let (w, h) = (view.width, view.height);
        let mut projected = project_gaussians(cloud, view);
        // stable: ties keep cloud order
        projected.sort_by(|a, b| a.depth.total_cmp(&b.depth));

        let mut per_pixel: Vec<Vec<(u32, f64)>> = vec![Vec::new(); w * h];
        for (slot, g) in projected.iter().enumerate() {
            let x0 = ((g.mean[0] - g.radius - 0.5).floor().max(0.0)) as usize;
            let y0 = ((g.mean[1] - g.radius - 0.5).floor().max(0.0)) as usize;
            let x1 = (g.mean[0] + g.radius - 0.5).ceil();
            let y1 = (g.mean[1] + g.radius - 0.5).ceil();
            if x1 < 0.0 || y1 < 0.0 {
                continue;
            }
            let x1 = (x1 as usize).min(w - 1);
            let y1 = (y1 as usize).min(h - 1);
            for py in y0..=y1 {
                for px in x0..=x1 {
                    let a = g.opacity * g.falloff(px as f64 + 0.5, py as f64 + 0.5);
                    if a >= ALPHA_FLOOR {
                        per_pixel[py * w + px].push((slot as u32, a));
                    }
                }
            }
        }

        let mut offsets = Vec::with_capacity(w * h + 1);
        let mut entries = Vec::new();
        let mut background_weight = Vec::with_capacity(w * h);
        offsets.push(0);
        for list in per_pixel {
            let mut transmittance = 1.0;
            for (slot, a) in list {
                entries.push((slot, a * transmittance));
                transmittance *= 1.0 - a;
            }
            background_weight.push(transmittance);
            offsets.push(entries.len());
        }
        Ok(Self {
            width: w,
            height: h,
            sh_degree: cloud.sh_degree,
            num_gaussians: cloud.len(),
            projected,
            offsets,
            entries,
            background_weight,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Visible Gaussians sorted by depth.
    pub fn projected(&self) -> &[ProjectedGaussian] {
        &self.projected
    }

    /// Front-to-back `(cloud index, weight)` pairs of pixel `(x, y)`.
    pub fn pixel_weights(&self, x: usize, y: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let p = y * self.width + x;
        self.entries[self.offsets[p]..self.offsets[p + 1]]
            .iter()
            .map(|&(slot, w)| (self.projected[slot as usize].index, w))
    }

    pub fn background_weight(&self, x: usize, y: usize) -> f64 {
        self.background_weight[y * self.width + x]
    }

    /// Accumulated opacity, `1 - background weight`.
    pub fn alpha(&self) -> Image {
        let data = self.background_weight.iter().map(|t| 1.0 - t).collect();
        Image::from_vec(self.width, self.height, 1, data).expect("plan dimensions")
    }

    /// Colors per depth-sorted slot for the current color parameters.
    pub fn slot_colors(&self, cloud: &GaussianCloud) -> Vec<[f64; 3]> {
        gaussian_colors(cloud, &self.projected)
    }

    /// Composites `colors` (one per depth-sorted slot) over `background`.
    pub fn composite(&self, colors: &[[f64; 3]], background: [f64; 3]) -> Image {
        let mut rgb = Image::zeros(self.width, self.height, 3);
        let data = rgb.data_mut();
        for p in 0..self.width * self.height {
            let mut acc = [0.0; 3];
            for &(slot, w) in &self.entries[self.offsets[p]..self.offsets[p + 1]] {
                let c = &colors[slot as usize];
                for k in 0..3 {
                    acc[k] += w * c[k];
                }
            }
            let t = self.background_weight[p];
            for k in 0..3 {
                data[p * 3 + k] = acc[k] + t * background[k];
            }
        }
        rgb
    }

    pub fn render(&self, cloud: &GaussianCloud, background: [f64; 3]) -> Image {
        self.composite(&self.slot_colors(cloud), background)
    }

    /// Adjoint of [`composite`](Self::composite) in the colors: gradient per slot.
    pub fn backprop_colors(&self, grad_rgb: &Image) -> Vec<[f64; 3]> {
        let g = grad_rgb.data();
        let mut out = vec![[0.0; 3]; self.projected.len()];
        for p in 0..self.width * self.height {
            for &(slot, w) in &self.entries[self.offsets[p]..self.offsets[p + 1]] {
                let o = &mut out[slot as usize];
                for k in 0..3 {
                    o[k] += w * g[p * 3 + k];
                }
            }
        }
        out
    }

    /// Chains slot color gradients through the SH evaluation onto `sh_dc` and
    /// `sh_rest`.
    pub fn color_to_sh_gradient(&self, slot_grads: &[[f64; 3]]) -> ColorGradient {
        let k = sh::rest_per_channel(self.sh_degree);
        let mut grad = ColorGradient {
            sh_dc: vec![[0.0; 3]; self.num_gaussians],
            sh_rest: vec![0.0; self.num_gaussians * 3 * k],
        };
        for (g, dc) in self.projected.iter().zip(slot_grads) {
            for c in 0..3 {
                grad.sh_dc[g.index][c] += g.basis[0] * dc[c];
                for j in 0..k {
                    grad.sh_rest[g.index * 3 * k + c * k + j] += g.basis[j + 1] * dc[c];
                }
            }
        }
        grad
    }

    /// Gradient of a scalar loss over `sh_dc`/`sh_rest` given `dL/d rgb`.
    pub fn sh_gradient(&self, grad_rgb: &Image) -> ColorGradient {
        self.color_to_sh_gradient(&self.backprop_colors(grad_rgb))
    }

    /// Dense weights `[N][H][W]` indexed by cloud order, plus the background
    /// weight per pixel.
    pub fn dense_weights(&self) -> Result<DenseWeights, RenderError> {
        let hw = self.width * self.height;
        let needed = self.num_gaussians.saturating_mul(hw);
        if needed > DENSE_WEIGHT_LIMIT {
            return Err(RenderError::Capacity {
                needed,
                limit: DENSE_WEIGHT_LIMIT,
            });
        }
        let mut weights = vec![0.0; needed];
        for p in 0..hw {
            for &(slot, w) in &self.entries[self.offsets[p]..self.offsets[p + 1]] {
                weights[self.projected[slot as usize].index * hw + p] += w;
            }
        }
        Ok(DenseWeights {
            num_gaussians: self.num_gaussians,
            width: self.width,
            height: self.height,
            weights,
            background: self.background_weight.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct DenseWeights {
    pub num_gaussians: usize,
    pub width: usize,
    pub height: usize,
    pub weights: Vec<f64>,
    pub background: Vec<f64>,
}

impl DenseWeights {
    #[inline]
    pub fn get(&self, gaussian: usize, x: usize, y: usize) -> f64 {
        self.weights[(gaussian * self.height + y) * self.width + x]
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub rgb: Image,
    pub alpha: Image,
    pub weights: Option<DenseWeights>,
}

pub fn render(
    cloud: &GaussianCloud,
    view: &CameraView,
    background: [f64; 3],
) -> Result<RenderOutput, RenderError> {
    let plan = RenderPlan::build(cloud, view)?;
    Ok(RenderOutput {
        rgb: plan.render(cloud, background),
        alpha: plan.alpha(),
        weights: None,
    })
}

/// Like [`render`] but also returns the dense weight tensor.
pub fn render_with_weights(
    cloud: &GaussianCloud,
    view: &CameraView,
    background: [f64; 3],
) -> Result<RenderOutput, RenderError> {
    let plan = RenderPlan::build(cloud, view)?;
    Ok(RenderOutput {
        rgb: plan.render(cloud, background),
        alpha: plan.alpha(),
        weights: Some(plan.dense_weights()?),
    })
}

/// Per-Gaussian, per-pixel compositing weights for the view.
pub fn color_jacobian(cloud: &GaussianCloud, view: &CameraView) -> Result<DenseWeights, RenderError> {
    RenderPlan::build(cloud, view)?.dense_weights()
}

/// Binary coverage mask (`1.0` where accumulated alpha reaches `threshold`).
pub fn render_mask(
    cloud: &GaussianCloud,
    view: &CameraView,
    threshold: f64,
) -> Result<Image, RenderError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(RenderError::Threshold(threshold));
    }
    let alpha = RenderPlan::build(cloud, view)?.alpha();
    Ok(alpha.map(|a| if a >= threshold { 1.0 } else { 0.0 }))
}
