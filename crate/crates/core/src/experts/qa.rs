use serde::{Deserialize, Serialize};

use super::{require_views, ExpertError, ExpertOutput};
use crate::image::Image;
use crate::priors::{l2_norm, normalize, EmbeddingProvider};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaCriterion {
    pub label: String,
    pub positive: String,
    pub negative: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaConfig {
    pub criteria: Vec<QaCriterion>,
}

impl Default for QaConfig {
    fn default() -> Self {
        let c = |label: &str, pos: &str, neg: &str, weight| QaCriterion {
            label: label.into(),
            positive: format!("{pos} photo."),
            negative: format!("{neg} photo."),
            weight,
        };
        Self {
            criteria: vec![
                c("quality", "Good", "Bad", 0.4),
                c("sharpness", "Sharp", "Blurry", 0.4),
                c("colorfullness", "Colorful", "Dull", 0.2),
            ],
        }
    }
}

impl QaConfig {
    pub fn validate(&self) -> Result<(), ExpertError> {
        if self.criteria.is_empty() {
            return Err(ExpertError::Config("QA needs at least one criterion".into()));
        }
        if self.criteria.iter().any(|c| !(c.weight >= 0.0)) {
            return Err(ExpertError::Config("QA weights must be >= 0".into()));
        }
        let sum: f64 = self.criteria.iter().map(|c| c.weight).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ExpertError::Config(format!("QA weights sum to {sum}, expected 1")));
        }
        for c in &self.criteria {
            if c.positive.trim().is_empty() || c.negative.trim().is_empty() {
                return Err(ExpertError::Config(format!("QA criterion '{}' has an empty prompt", c.label)));
            }
        }
        Ok(())
    }
}

fn two_way_softmax(s1: f64, s2: f64) -> f64 {
    1.0 / (1.0 + (s2 - s1).exp())
}

/// Softmax over the two prompt cosines, taking the positive entry.
pub fn clip_iqa_score(
    image: &Image,
    positive: &str,
    negative: &str,
    provider: &dyn EmbeddingProvider,
) -> Result<f64, ExpertError> {
    if positive.trim().is_empty() || negative.trim().is_empty() {
        return Err(ExpertError::Argument("prompt texts must be nonempty".into()));
    }
    let e = normalize(&provider.embed_image(image));
    let cos = |t: &str| -> f64 { e.iter().zip(normalize(&provider.embed_text(t))).map(|(a, b)| a * b).sum() };
    Ok(two_way_softmax(cos(positive), cos(negative)))
}

struct Prompts {
    weight: f64,
    pos: Vec<f64>,
    neg: Vec<f64>,
}

/// `mean_v (1 - sum_k w_k s_k(v))`, with gradients.
pub fn qa_loss_with_grad(
    views: &[Image],
    cfg: &QaConfig,
    provider: &dyn EmbeddingProvider,
) -> Result<ExpertOutput, ExpertError> {
    require_views(views)?;
    cfg.validate()?;
    let prompts: Vec<Prompts> = cfg
        .criteria
        .iter()
        .map(|c| Prompts {
            weight: c.weight,
            pos: normalize(&provider.embed_text(&c.positive)),
            neg: normalize(&provider.embed_text(&c.negative)),
        })
        .collect();
    let n = views.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(views.len());
    for v in views {
        let raw = provider.embed_image(v);
        let norm = l2_norm(&raw);
        let e: Vec<f64> = if norm > 0.0 { raw.iter().map(|x| x / norm).collect() } else { raw.clone() };
        let dot = |t: &[f64]| -> f64 { e.iter().zip(t).map(|(a, b)| a * b).sum() };
        let mut score = 0.0;
        // gradient of -score w.r.t. the unit embedding
        let mut ge = vec![0.0; e.len()];
        for p in &prompts {
            let s = two_way_softmax(dot(&p.pos), dot(&p.neg));
            score += p.weight * s;
            let k = -p.weight * s * (1.0 - s) / n;
            for (i, g) in ge.iter_mut().enumerate() {
                *g += k * (p.pos[i] - p.neg[i]);
            }
        }
        loss += (1.0 - score) / n;
        let graw = crate::priors::normalize_vjp(&raw, &ge);
        grads.push(provider.embed_image_vjp(v, &graw));
    }
    Ok(ExpertOutput { loss, grads })
}

pub fn qa_loss(views: &[Image], cfg: &QaConfig, provider: &dyn EmbeddingProvider) -> Result<f64, ExpertError> {
    Ok(qa_loss_with_grad(views, cfg, provider)?.loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::ToyEmbeddingProvider;

    fn image() -> Image {
        Image::from_fn(16, 16, 3, |x, y, c| ((x * 3 + y * 5 + c * 7) % 11) as f64 / 11.0)
    }

    /// Image embeds to e1; "pos" to e1, "neg" to -e1, anything else to e2.
    struct Axis;
    impl EmbeddingProvider for Axis {
        fn dimension(&self) -> usize {
            2
        }
        fn embed_image(&self, _: &Image) -> Vec<f64> {
            vec![2.0, 0.0]
        }
        fn embed_text(&self, t: &str) -> Vec<f64> {
            match t {
                "pos" => vec![1.0, 0.0],
                "neg" => vec![-5.0, 0.0],
                _ => vec![0.0, 1.0],
            }
        }
        fn embed_image_vjp(&self, i: &Image, _: &[f64]) -> Image {
            Image::zeros(i.width(), i.height(), i.channels())
        }
    }

    #[test]
    fn score_identities() {
        let e = std::f64::consts::E;
        let s = clip_iqa_score(&image(), "pos", "neg", &Axis).unwrap();
        assert!((s - e / (e + 1.0 / e)).abs() < 1e-12);
        assert!((s - 0.88080).abs() < 1e-5);
        assert_eq!(clip_iqa_score(&image(), "a", "b", &Axis).unwrap(), 0.5);
        let p = ToyEmbeddingProvider::new(1, 32).unwrap();
        let a = clip_iqa_score(&image(), "Good photo.", "Bad photo.", &p).unwrap();
        let b = clip_iqa_score(&image(), "Bad photo.", "Good photo.", &p).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
        assert!(a > 0.0 && a < 1.0);
        assert!(clip_iqa_score(&image(), "", "Bad photo.", &p).is_err());
    }

    #[test]
    fn loss_identities() {
        let half = QaConfig {
            criteria: vec![
                QaCriterion { label: "q".into(), positive: "a".into(), negative: "b".into(), weight: 0.4 },
                QaCriterion { label: "s".into(), positive: "c".into(), negative: "d".into(), weight: 0.4 },
                QaCriterion { label: "c".into(), positive: "e".into(), negative: "f".into(), weight: 0.2 },
            ],
        };
        assert!((qa_loss(&[image()], &half, &Axis).unwrap() - 0.5).abs() < 1e-12);

        let p = ToyEmbeddingProvider::new(4, 32).unwrap();
        let mut only_q = QaConfig::default();
        only_q.criteria[0].weight = 1.0;
        only_q.criteria[1].weight = 0.0;
        only_q.criteria[2].weight = 0.0;
        let views = [image(), image().map(|v| v * 0.5)];
        let expected: f64 = views
            .iter()
            .map(|v| 1.0 - clip_iqa_score(v, "Good photo.", "Bad photo.", &p).unwrap())
            .sum::<f64>()
            / 2.0;
        assert!((qa_loss(&views, &only_q, &p).unwrap() - expected).abs() < 1e-12);

        let mut bad = QaConfig::default();
        bad.criteria[2].weight = 0.3;
        assert!(matches!(qa_loss(&views, &bad, &p), Err(ExpertError::Config(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = ToyEmbeddingProvider::new(4, 32).unwrap();
        let cfg = QaConfig::default();
        let v = image();
        let out = qa_loss_with_grad(std::slice::from_ref(&v), &cfg, &p).unwrap();
        for idx in [0, 100, 400, 767] {
            let mut a = v.clone();
            let mut b = v.clone();
            a.data_mut()[idx] += 1e-6;
            b.data_mut()[idx] -= 1e-6;
            let fd = (qa_loss(&[a], &cfg, &p).unwrap() - qa_loss(&[b], &cfg, &p).unwrap()) / 2e-6;
            assert!((fd - out.grads[0].data()[idx]).abs() < 1e-7, "{idx}");
        }
    }
}
