use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{FeatureExtractor, PriorError};
use crate::image::Image;

/// Channel-major feature map `[C][H][W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let s = self.spatial();
        &self.data[c * s..(c + 1) * s]
    }

    /// CHW view of an HWC image.
    pub fn from_image(img: &Image) -> Self {
        let (w, h, ch) = img.shape();
        let mut m = Self::zeros(ch, h, w);
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    m.data[(c * h + y) * w + x] = img.get(x, y, c);
                }
            }
        }
        m
    }

    pub fn to_image(&self) -> Image {
        Image::from_fn(self.width, self.height, self.channels, |x, y, c| self.at(c, y, x))
    }
}

/// Declared channel counts of the five toy style layers.
pub const TOY_LAYER_CHANNELS: [usize; 5] = [8, 16, 32, 64, 64];

/// Small random CNN standing in for the shallow layers of a VGG.
///
/// Layer 0 is a pointwise (1x1) convolution of the pixels, so its features
/// permute with the pixels. Layer `l >= 1` halves the resolution of layer
/// `l - 1` by 2x2 average pooling, then applies a 3x3 convolution with
/// edge-replicate padding. Every layer ends in `tanh`.
#[derive(Debug, Clone)]
pub struct ToyFeatureExtractor {
    channels: Vec<usize>,
    layers: Vec<ConvLayer>,
}

#[derive(Debug, Clone)]
struct ConvLayer {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    /// `[out][in][ky][kx]`
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ConvLayer {
    fn random(rng: &mut ChaCha8Rng, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let std = 1.5 / fan_in.sqrt();
        let weights = (0..out_ch * in_ch * kernel * kernel)
            .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect::<Vec<f64>>();
        let bias = (0..out_ch).map(|_| 0.1 * Distribution::<f64>::sample(&StandardNormal, rng)).collect::<Vec<f64>>();
        Self {
            in_ch,
            out_ch,
            kernel,
            weights,
            bias,
        }
    }

    #[inline]
    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((o * self.in_ch + i) * self.kernel + ky) * self.kernel + kx]
    }

    /// Pre-activation output.
    fn forward(&self, input: &FeatureMap) -> FeatureMap {
        let (h, w) = (input.height, input.width);
        let r = (self.kernel / 2) as isize;
        let mut out = FeatureMap::zeros(self.out_ch, h, w);
        for o in 0..self.out_ch {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = self.bias[o];
                    for i in 0..self.in_ch {
                        for ky in 0..self.kernel {
                            let sy = clamp_index(y as isize + ky as isize - r, h);
                            for kx in 0..self.kernel {
                                let sx = clamp_index(x as isize + kx as isize - r, w);
                                acc += self.w(o, i, ky, kx) * input.at(i, sy, sx);
                            }
                        }
                    }
                    out.data[(o * h + y) * w + x] = acc;
                }
            }
        }
        out
    }

    fn backward(&self, input_shape: (usize, usize), grad_out: &FeatureMap) -> FeatureMap {
        let (h, w) = input_shape;
        let r = (self.kernel / 2) as isize;
        let mut grad_in = FeatureMap::zeros(self.in_ch, h, w);
        for o in 0..self.out_ch {
            for y in 0..h {
                for x in 0..w {
                    let g = grad_out.at(o, y, x);
                    if g == 0.0 {
                        continue;
                    }
                    for i in 0..self.in_ch {
                        for ky in 0..self.kernel {
                            let sy = clamp_index(y as isize + ky as isize - r, h);
                            for kx in 0..self.kernel {
                                let sx = clamp_index(x as isize + kx as isize - r, w);
                                grad_in.data[(i * h + sy) * w + sx] += self.w(o, i, ky, kx) * g;
                            }
                        }
                    }
                }
            }
        }
        grad_in
    }
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

fn pooled_len(n: usize) -> usize {
    (n / 2).max(1)
}

/// 2x2 average pooling; a trailing odd row/column is dropped, a length-1 axis kept.
fn avg_pool(input: &FeatureMap) -> FeatureMap {
    let (h, w) = (pooled_len(input.height), pooled_len(input.width));
    let mut out = FeatureMap::zeros(input.channels, h, w);
    for c in 0..input.channels {
        for y in 0..h {
            for x in 0..w {
                let ys = pool_window(y, input.height);
                let xs = pool_window(x, input.width);
                let mut acc = 0.0;
                for &sy in &ys {
                    for &sx in &xs {
                        acc += input.at(c, sy, sx);
                    }
                }
                out.data[(c * h + y) * w + x] = acc / (ys.len() * xs.len()) as f64;
            }
        }
    }
    out
}

fn pool_window(o: usize, n: usize) -> Vec<usize> {
    if n == 1 {
        vec![0]
    } else {
        vec![2 * o, 2 * o + 1]
    }
}

fn avg_pool_backward(input_shape: (usize, usize, usize), grad_out: &FeatureMap) -> FeatureMap {
    let (ch, ih, iw) = input_shape;
    let mut grad = FeatureMap::zeros(ch, ih, iw);
    for c in 0..ch {
        for y in 0..grad_out.height {
            for x in 0..grad_out.width {
                let ys = pool_window(y, ih);
                let xs = pool_window(x, iw);
                let g = grad_out.at(c, y, x) / (ys.len() * xs.len()) as f64;
                for &sy in &ys {
                    for &sx in &xs {
                        grad.data[(c * ih + sy) * iw + sx] += g;
                    }
                }
            }
        }
    }
    grad
}

struct Trace {
    /// Input to each conv (after pooling for `l >= 1`).
    conv_inputs: Vec<FeatureMap>,
    /// Post-activation output of each layer.
    outputs: Vec<FeatureMap>,
}

impl ToyFeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut in_ch = 3;
        for (l, &out_ch) in TOY_LAYER_CHANNELS.iter().enumerate() {
            let kernel = if l == 0 { 1 } else { 3 };
            layers.push(ConvLayer::random(&mut rng, in_ch, out_ch, kernel));
            in_ch = out_ch;
        }
        Self {
            channels: TOY_LAYER_CHANNELS.to_vec(),
            layers,
        }
    }

    fn check(&self, layers: &[usize]) -> Result<usize, PriorError> {
        let mut deepest = 0;
        for &l in layers {
            if l >= self.layers.len() {
                return Err(PriorError::UnknownLayer {
                    layer: l,
                    available: self.layers.len(),
                });
            }
            deepest = deepest.max(l);
        }
        Ok(deepest)
    }

    fn trace(&self, image: &Image, deepest: usize) -> Result<Trace, PriorError> {
        if image.channels() != 3 {
            return Err(PriorError::Argument(format!(
                "feature extractor expects 3 channels, got {}",
                image.channels()
            )));
        }
        let mut conv_inputs = Vec::new();
        let mut outputs: Vec<FeatureMap> = Vec::new();
        let mut x = FeatureMap::from_image(image);
        for (l, layer) in self.layers.iter().enumerate().take(deepest + 1) {
            if l > 0 {
                x = avg_pool(&x);
            }
            let mut y = layer.forward(&x);
            y.data.iter_mut().for_each(|v| *v = v.tanh());
            conv_inputs.push(x);
            x = y.clone();
            outputs.push(y);
        }
        Ok(Trace {
            conv_inputs,
            outputs,
        })
    }
}

impl FeatureExtractor for ToyFeatureExtractor {
    fn layer_channels(&self) -> &[usize] {
        &self.channels
    }

    fn features(&self, image: &Image, layers: &[usize]) -> Result<Vec<FeatureMap>, PriorError> {
        let deepest = self.check(layers)?;
        if layers.is_empty() {
            return Ok(Vec::new());
        }
        let trace = self.trace(image, deepest)?;
        Ok(layers.iter().map(|&l| trace.outputs[l].clone()).collect())
    }

    fn features_vjp(
        &self,
        image: &Image,
        layers: &[usize],
        grads: &[FeatureMap],
    ) -> Result<Image, PriorError> {
        if grads.len() != layers.len() {
            return Err(PriorError::Argument(format!(
                "{} gradients for {} layers",
                grads.len(),
                layers.len()
            )));
        }
        let deepest = self.check(layers)?;
        if layers.is_empty() {
            return Ok(Image::zeros(image.width(), image.height(), image.channels()));
        }
        let trace = self.trace(image, deepest)?;
        let mut carry: Option<FeatureMap> = None;
        for l in (0..=deepest).rev() {
            let out = &trace.outputs[l];
            let mut g = carry.take().unwrap_or_else(|| FeatureMap::zeros(out.channels, out.height, out.width));
            for (&ll, gl) in layers.iter().zip(grads) {
                if ll == l {
                    if gl.data.len() != g.data.len() {
                        return Err(PriorError::Argument(format!("gradient shape mismatch at layer {l}")));
                    }
                    g.data.iter_mut().zip(&gl.data).for_each(|(a, b)| *a += b);
                }
            }
            // tanh' = 1 - y^2
            g.data.iter_mut().zip(&out.data).for_each(|(gv, y)| *gv *= 1.0 - y * y);
            let input = &trace.conv_inputs[l];
            let mut gin = self.layers[l].backward((input.height, input.width), &g);
            if l > 0 {
                let prev = &trace.outputs[l - 1];
                gin = avg_pool_backward((prev.channels, prev.height, prev.width), &gin);
            }
            carry = Some(gin);
        }
        Ok(carry.expect("at least one layer").to_image())
    }
}
