//! Image fidelity metrics: PSNR, windowed SSIM and a feature-space LPIPS.

use thiserror::Error;

use crate::image::Image;
use crate::priors::{FeatureExtractor, FeatureMap, PriorError};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const DEFAULT_LPIPS_LAYERS: [usize; 3] = [0, 1, 2];

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    Shape {
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },
    #[error("image {width}x{height} is smaller than the {window}x{window} SSIM window")]
    TooSmall { width: usize, height: usize, window: usize },
    #[error("peak must be positive, got {0}")]
    Peak(f64),
    #[error(transparent)]
    Prior(#[from] PriorError),
}

fn same_shape(a: &Image, b: &Image) -> Result<(), MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::Shape { left: a.shape(), right: b.shape() });
    }
    Ok(())
}

pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64, MetricError> {
    same_shape(a, b)?;
    if !(peak > 0.0) {
        return Err(MetricError::Peak(peak));
    }
    let mse = a.mse(b).expect("shape checked");
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Normalized 1-D Gaussian; the 2-D window is its outer product.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - mid).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable correlation of a `w x h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a valid-size map back to `w x h`.
fn filter_valid_transpose(map: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            for i in 0..n {
                tmp[(y + i) * ow + x] += k[i] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for i in 0..n {
                out[y * w + x + i] += k[i] * v;
            }
        }
    }
    out
}

fn channel_plane(img: &Image, c: usize) -> Vec<f64> {
    img.data().chunks(img.channels()).map(|p| p[c]).collect()
}

struct SsimChannel {
    mean: f64,
    grad: Option<Vec<f64>>,
}

fn ssim_channel(x: &[f64], y: &[f64], w: usize, h: usize, peak: f64, want_grad: bool) -> SsimChannel {
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(x, w, h, &k);
    let my = filter_valid(y, w, h, &k);
    let exx = filter_valid(&xx, w, h, &k);
    let eyy = filter_valid(&yy, w, h, &k);
    let exy = filter_valid(&xy, w, h, &k);
    let m = mx.len();

    let mut total = 0.0;
    let (mut g1, mut g2, mut g3) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    for i in 0..m {
        let (ux, uy) = (mx[i], my[i]);
        let sxx = exx[i] - ux * ux;
        let syy = eyy[i] - uy * uy;
        let sxy = exy[i] - ux * uy;
        let a1 = 2.0 * ux * uy + c1;
        let a2 = 2.0 * sxy + c2;
        let b1 = ux * ux + uy * uy + c1;
        let b2 = sxx + syy + c2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            let d_mu = 2.0 * uy * a2 / (b1 * b2) - s * 2.0 * ux / b1;
            let d_sxx = -s / b2;
            let d_sxy = 2.0 * a1 / (b1 * b2);
            g1[i] = (d_mu - 2.0 * ux * d_sxx - uy * d_sxy) / m as f64;
            g2[i] = 2.0 * d_sxx / m as f64;
            g3[i] = d_sxy / m as f64;
        }
    }
    let grad = want_grad.then(|| {
        let t1 = filter_valid_transpose(&g1, w, h, &k);
        let t2 = filter_valid_transpose(&g2, w, h, &k);
        let t3 = filter_valid_transpose(&g3, w, h, &k);
        (0..w * h).map(|p| t1[p] + x[p] * t2[p] + y[p] * t3[p]).collect()
    });
    SsimChannel { mean: total / m as f64, grad }
}

fn ssim_impl(a: &Image, b: &Image, peak: f64, want_grad: bool) -> Result<(f64, Option<Image>), MetricError> {
    same_shape(a, b)?;
    if !(peak > 0.0) {
        return Err(MetricError::Peak(peak));
    }
    let (w, h, ch) = a.shape();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricError::TooSmall { width: w, height: h, window: SSIM_WINDOW });
    }
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::zeros(w, h, ch));
    for c in 0..ch {
        let r = ssim_channel(&channel_plane(a, c), &channel_plane(b, c), w, h, peak, want_grad);
        total += r.mean / ch as f64;
        if let (Some(g), Some(rg)) = (grad.as_mut(), r.grad) {
            for (p, v) in rg.into_iter().enumerate() {
                g.data_mut()[p * ch + c] = v / ch as f64;
            }
        }
    }
    Ok((total, grad))
}

/// Mean local SSIM (peak 1), averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, MetricError> {
    ssim_with_peak(a, b, 1.0)
}

pub fn ssim_with_peak(a: &Image, b: &Image, peak: f64) -> Result<f64, MetricError> {
    Ok(ssim_impl(a, b, peak, false)?.0)
}

/// SSIM and its gradient w.r.t. `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image), MetricError> {
    let (s, g) = ssim_impl(a, b, 1.0, true)?;
    Ok((s, g.expect("gradient requested")))
}

/// Unit-normalizes the channel vector at every spatial position.
fn unit_channels(f: &FeatureMap) -> (FeatureMap, Vec<f64>) {
    let hw = f.spatial();
    let mut norms = vec![0.0; hw];
    for c in 0..f.channels {
        for (p, n) in norms.iter_mut().enumerate() {
            *n += f.data[c * hw + p].powi(2);
        }
    }
    norms.iter_mut().for_each(|n| *n = n.sqrt() + 1e-10);
    let mut out = f.clone();
    for c in 0..f.channels {
        for p in 0..hw {
            out.data[c * hw + p] /= norms[p];
        }
    }
    (out, norms)
}

fn lpips_impl(
    a: &Image,
    b: &Image,
    extractor: &dyn FeatureExtractor,
    layers: &[usize],
    want_grad: bool,
) -> Result<(f64, Option<Image>), MetricError> {
    same_shape(a, b)?;
    if layers.is_empty() {
        return Ok((0.0, want_grad.then(|| Image::zeros(a.width(), a.height(), a.channels()))));
    }
    let fa = extractor.features(a, layers)?;
    let fb = extractor.features(b, layers)?;
    let nl = layers.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::new();
    for (la, lb) in fa.iter().zip(&fb) {
        let (ua, na) = unit_channels(la);
        let (ub, _) = unit_channels(lb);
        let count = ua.data.len() as f64;
        let diff: Vec<f64> = ua.data.iter().zip(&ub.data).map(|(x, y)| x - y).collect();
        total += diff.iter().map(|d| d * d).sum::<f64>() / count / nl;
        if want_grad {
            // d/df of f/|f| applied to g: (g - u (u.g)) / |f|
            let hw = la.spatial();
            let g: Vec<f64> = diff.iter().map(|d| 2.0 * d / count / nl).collect();
            let mut dots = vec![0.0; hw];
            for c in 0..la.channels {
                for p in 0..hw {
                    dots[p] += ua.data[c * hw + p] * g[c * hw + p];
                }
            }
            let mut gf = FeatureMap::zeros(la.channels, la.height, la.width);
            for c in 0..la.channels {
                for p in 0..hw {
                    let i = c * hw + p;
                    gf.data[i] = (g[i] - ua.data[i] * dots[p]) / na[p];
                }
            }
            grads.push(gf);
        }
    }
    let grad = if want_grad { Some(extractor.features_vjp(a, layers, &grads)?) } else { None };
    Ok((total, grad))
}

/// Mean over layers of the mean squared difference of channel-normalized
/// feature maps.
pub fn lpips(a: &Image, b: &Image, extractor: &dyn FeatureExtractor, layers: &[usize]) -> Result<f64, MetricError> {
    Ok(lpips_impl(a, b, extractor, layers, false)?.0)
}

/// LPIPS and its gradient w.r.t. `a`.
pub fn lpips_with_grad(
    a: &Image,
    b: &Image,
    extractor: &dyn FeatureExtractor,
    layers: &[usize],
) -> Result<(f64, Image), MetricError> {
    let (v, g) = lpips_impl(a, b, extractor, layers, true)?;
    Ok((v, g.expect("gradient requested")))
}
