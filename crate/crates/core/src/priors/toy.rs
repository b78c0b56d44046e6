//! Seeded stand-ins for the pretrained priors. Every output is a pure function
//! of `(seed, input)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    normalize, normalize_vjp, DiffusionScoreProvider, EmbeddingProvider, PriorError,
    StyleDescriptorProvider, StylizedViewProvider,
};
use crate::image::{Image, ResamplePlan};
use crate::style_cleaning::StyleEmbedding;

const EMBED_GRID: usize = 8;
const DESCRIPTOR_GRID: usize = 4;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>()
}

fn matvec(m: &[f64], rows: usize, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| m[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn matvec_t(m: &[f64], cols: usize, g: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (r, gr) in g.iter().enumerate() {
        for (o, a) in out.iter_mut().zip(&m[r * cols..(r + 1) * cols]) {
            *o += a * gr;
        }
    }
    out
}

/// Text tokens: lowercase alphanumeric runs.
fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

/// CLIP stand-in: a fixed random affine map of an 8x8 bilinear thumbnail for
/// images, a hashed bag of tokens for text, both L2-normalized. Text with no
/// alphanumeric tokens embeds to the zero vector.
#[derive(Debug, Clone)]
pub struct ToyEmbeddingProvider {
    seed: u64,
    dim: usize,
    projection: Vec<f64>,
    bias: Vec<f64>,
}

impl ToyEmbeddingProvider {
    pub fn new(seed: u64, dim: usize) -> Result<Self, PriorError> {
        if dim < 2 {
            return Err(PriorError::Argument(format!("embedding dimension must be >= 2, got {dim}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = EMBED_GRID * EMBED_GRID * 3;
        Ok(Self {
            seed,
            dim,
            projection: gaussian_matrix(&mut rng, dim, inputs, 1.0 / (inputs as f64).sqrt()),
            bias: gaussian_matrix(&mut rng, dim, 1, 0.5),
        })
    }

    fn raw_image(&self, image: &Image) -> (ResamplePlan, Vec<f64>) {
        let plan = ResamplePlan::bilinear(image.width(), image.height(), EMBED_GRID, EMBED_GRID);
        let thumb = plan.apply(&rgb_view(image));
        let mut v = matvec(&self.projection, self.dim, thumb.data());
        v.iter_mut().zip(&self.bias).for_each(|(a, b)| *a += b);
        (plan, v)
    }
}

/// First three channels (gray replicated) so every provider sees RGB.
fn rgb_view(image: &Image) -> Image {
    if image.channels() == 3 {
        return image.clone();
    }
    Image::from_fn(image.width(), image.height(), 3, |x, y, c| {
        image.get(x, y, c.min(image.channels() - 1))
    })
}

impl EmbeddingProvider for ToyEmbeddingProvider {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, image: &Image) -> Vec<f64> {
        normalize(&self.raw_image(image).1)
    }

    fn embed_text(&self, text: &str) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for tok in tokens(text) {
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(self.seed, tok.as_bytes()));
            for a in acc.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *a += z;
            }
        }
        normalize(&acc)
    }

    fn embed_image_vjp(&self, image: &Image, grad: &[f64]) -> Image {
        let (plan, raw) = self.raw_image(image);
        let g_raw = normalize_vjp(&raw, grad);
        let g_thumb = matvec_t(&self.projection, EMBED_GRID * EMBED_GRID * 3, &g_raw);
        let g_thumb = Image::from_vec(EMBED_GRID, EMBED_GRID, 3, g_thumb).expect("thumbnail shape");
        fold_rgb_grad(image, plan.apply_transpose(&g_thumb))
    }
}

/// Maps a gradient w.r.t. `rgb_view(image)` back to `image`'s channel layout.
fn fold_rgb_grad(image: &Image, g: Image) -> Image {
    if image.channels() == 3 {
        return g;
    }
    let mut out = Image::zeros(image.width(), image.height(), image.channels());
    for y in 0..image.height() {
        for x in 0..image.width() {
            for c in 0..3 {
                let dst = c.min(image.channels() - 1);
                let v = out.get(x, y, dst) + g.get(x, y, c);
                out.set(x, y, dst, v);
            }
        }
    }
    out
}

/// CSD stand-in: random projection of color statistics (4x4 thumbnail,
/// channel means and second moments). No bias, so only the black image maps
/// to zero.
#[derive(Debug, Clone)]
pub struct ToyDescriptorProvider {
    dim: usize,
    projection: Vec<f64>,
}

const DESCRIPTOR_INPUTS: usize = DESCRIPTOR_GRID * DESCRIPTOR_GRID * 3 + 3 + 6;
const MOMENT_PAIRS: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];

impl ToyDescriptorProvider {
    pub fn new(seed: u64, dim: usize) -> Result<Self, PriorError> {
        if dim < 2 {
            return Err(PriorError::Argument(format!("descriptor dimension must be >= 2, got {dim}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c5d0);
        Ok(Self {
            dim,
            projection: gaussian_matrix(&mut rng, dim, DESCRIPTOR_INPUTS, 1.0 / (DESCRIPTOR_INPUTS as f64).sqrt()),
        })
    }

    fn statistics(image: &Image) -> (ResamplePlan, Vec<f64>) {
        let plan = ResamplePlan::bilinear(image.width(), image.height(), DESCRIPTOR_GRID, DESCRIPTOR_GRID);
        let mut s = plan.apply(image).into_vec();
        let n = (image.width() * image.height()) as f64;
        for c in 0..3 {
            s.push(image.channel_mean(c));
        }
        for (a, b) in MOMENT_PAIRS {
            let m: f64 = image.data().chunks_exact(3).map(|p| p[a] * p[b]).sum();
            s.push(m / n);
        }
        (plan, s)
    }
}

impl StyleDescriptorProvider for ToyDescriptorProvider {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn describe(&self, image: &Image) -> Vec<f64> {
        let (_, s) = Self::statistics(&rgb_view(image));
        matvec(&self.projection, self.dim, &s)
    }

    fn describe_vjp(&self, image: &Image, grad: &[f64]) -> Image {
        let rgb = rgb_view(image);
        let (plan, _) = Self::statistics(&rgb);
        let gs = matvec_t(&self.projection, DESCRIPTOR_INPUTS, grad);
        let thumb_len = DESCRIPTOR_GRID * DESCRIPTOR_GRID * 3;
        let g_thumb = Image::from_vec(DESCRIPTOR_GRID, DESCRIPTOR_GRID, 3, gs[..thumb_len].to_vec())
            .expect("thumbnail shape");
        let mut g = plan.apply_transpose(&g_thumb);
        let n = (rgb.width() * rgb.height()) as f64;
        let means = &gs[thumb_len..thumb_len + 3];
        let moments = &gs[thumb_len + 3..];
        for (px, gp) in rgb.data().chunks_exact(3).zip(g.data_mut().chunks_exact_mut(3)) {
            for c in 0..3 {
                gp[c] += means[c] / n;
            }
            for (k, &(a, b)) in MOMENT_PAIRS.iter().enumerate() {
                gp[a] += moments[k] * px[b] / n;
                gp[b] += moments[k] * px[a] / n;
            }
        }
        fold_rgb_grad(image, g)
    }
}

/// Cosine cumulative-signal schedule, clamped away from 0 and 1.
pub fn cosine_alpha_bar(t: usize, total: usize) -> f64 {
    const S: f64 = 0.008;
    let f = |u: f64| ((u + S) / (1.0 + S) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    (f(t as f64 / total as f64) / f(0.0)).clamp(1e-4, 0.9999)
}

/// Denoiser whose implied clean image is always a fixed target.
///
/// `predict_noise(x_t, t) = (x_t - sqrt(abar_t) * x0) / sqrt(1 - abar_t)` with
/// `x0` the target resized to the input. With a style argument, `x0` is the
/// target plus a seeded zero-mean perturbation, so style-conditioned and
/// unconditioned branches differ. Encode and decode are identity.
#[derive(Debug, Clone)]
pub struct ToyScoreProvider {
    target: Image,
    total: usize,
    seed: u64,
    style_shift: f64,
}

impl ToyScoreProvider {
    pub const DEFAULT_STYLE_SHIFT: f64 = 0.005;

    pub fn new(target: Image, total: usize, seed: u64) -> Result<Self, PriorError> {
        if total < 2 {
            return Err(PriorError::Argument(format!("T_total must be >= 2, got {total}")));
        }
        Ok(Self {
            target,
            total,
            seed,
            style_shift: Self::DEFAULT_STYLE_SHIFT,
        })
    }

    pub fn with_style_shift(mut self, amplitude: f64) -> Self {
        self.style_shift = amplitude;
        self
    }

    pub fn target(&self) -> &Image {
        &self.target
    }

    /// Clean image implied by the denoiser for inputs of this shape.
    pub fn implied_clean(&self, width: usize, height: usize, styled: bool) -> Image {
        let mut x0 = if (width, height) == (self.target.width(), self.target.height()) {
            self.target.clone()
        } else {
            self.target.resize_bilinear(width, height)
        };
        if styled && self.style_shift != 0.0 {
            let ch = x0.channels();
            let key = [(width as u64).to_le_bytes(), (height as u64).to_le_bytes()].concat();
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(self.seed, &key));
            let mut field: Vec<f64> = (0..x0.len())
                .map(|_| rng.random_range(-self.style_shift..self.style_shift))
                .collect();
            for c in 0..ch {
                let mean = field.iter().skip(c).step_by(ch).sum::<f64>() / (width * height) as f64;
                field.iter_mut().skip(c).step_by(ch).for_each(|v| *v -= mean);
            }
            x0.data_mut().iter_mut().zip(field).for_each(|(a, d)| *a += d);
        }
        x0
    }
}

impl DiffusionScoreProvider for ToyScoreProvider {
    fn total_timesteps(&self) -> usize {
        self.total
    }

    fn alpha_bar(&self, t: usize) -> Result<f64, PriorError> {
        if t > self.total {
            return Err(PriorError::Timestep { t, total: self.total });
        }
        Ok(cosine_alpha_bar(t, self.total))
    }

    fn predict_noise(
        &self,
        noised: &Image,
        _prompt: &str,
        style: Option<&StyleEmbedding>,
        t: usize,
    ) -> Result<Image, PriorError> {
        let abar = self.alpha_bar(t)?;
        if noised.channels() != self.target.channels() {
            return Err(PriorError::Argument(format!(
                "toy denoiser target has {} channels, input has {}",
                self.target.channels(),
                noised.channels()
            )));
        }
        let x0 = self.implied_clean(noised.width(), noised.height(), style.is_some());
        let (sa, sb) = (abar.sqrt(), (1.0 - abar).sqrt());
        let data = noised
            .data()
            .iter()
            .zip(x0.data())
            .map(|(xt, c)| (xt - sa * c) / sb)
            .collect();
        Ok(Image::from_vec(noised.width(), noised.height(), noised.channels(), data).expect("same shape"))
    }

    fn encode(&self, image: &Image) -> Image {
        image.clone()
    }

    fn decode(&self, latent: &Image) -> Image {
        latent.clone()
    }

    fn encode_vjp(&self, _image: &Image, grad_latent: &Image) -> Image {
        grad_latent.clone()
    }
}

/// Pre-stylizer stand-in: per-channel mean/std transfer from the reference.
#[derive(Debug, Clone, Default)]
pub struct ToyStylizer;

impl StylizedViewProvider for ToyStylizer {
    fn stylize(&self, image: &Image, style_reference: &Image) -> Image {
        let stats = |img: &Image, c: usize| {
            let m = img.channel_mean(c);
            let n = (img.width() * img.height()) as f64;
            let var = img.data().iter().skip(c).step_by(img.channels()).map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            (m, var.sqrt())
        };
        let ch = image.channels().min(style_reference.channels());
        let mut out = image.clone();
        for c in 0..ch {
            let (mi, si) = stats(image, c);
            let (mr, sr) = stats(style_reference, c);
            let k = sr / (si + 1e-5);
            let stride = out.channels();
            out.data_mut().iter_mut().skip(c).step_by(stride).for_each(|v| *v = (*v - mi) * k + mr);
        }
        out
    }
}
