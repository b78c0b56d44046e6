//! One line per acceptance criterion. Exits nonzero if any check fails.

mod common;

use std::fs;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatstyle::dssd::{dssd_residual, forward_noise, sample_noise, DssdConfig, GuidanceSample};
use splatstyle::experts::{clip_iqa_score, csd_loss, gram, sos_loss, SosConfig};
use splatstyle::gs_model::sh::{rgb_to_dc, SH_C0};
use splatstyle::metrics::{psnr, ssim};
use splatstyle::priors::{
    DiffusionScoreProvider, FeatureMap, ToyDescriptorProvider, ToyEmbeddingProvider, ToyFeatureExtractor,
    ToyScoreProvider, ToyStylizer,
};
use splatstyle::renderer::{color_jacobian, render, RenderPlan};
use splatstyle::scheduler::{
    alpha_step, dynamic_cfg, sample_timestep, GuidanceMode, GuidanceState, ModeTimetable, Phase,
};
use splatstyle::style_cleaning::clean_style;
use splatstyle::trainer::{stylize, ExpertWeights, NoHooks, Providers, StyleBundle, TrainConfig, Trainer};
use splatstyle::{CameraView, GaussianCloud, Image};

type Outcome = Result<String, String>;

struct Report {
    failed: usize,
}

impl Report {
    fn check(&mut self, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
            .unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if elapsed <= limit => (true, d),
            Ok(d) => (false, format!("{d}; over time limit")),
            Err(d) => (false, d),
        };
        if !ok {
            self.failed += 1;
        }
        println!(
            "[{}] {name} ({detail}, {:.2}s / {:.0}s)",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            limit.as_secs_f64()
        );
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
    q.map(|v| v / n)
}

fn random_scene(rng: &mut ChaCha8Rng, n: usize, degree: u8) -> GaussianCloud {
    let mut c = GaussianCloud::empty(degree);
    for _ in 0..n {
        let pos = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let q = random_quat(rng);
        let s = std::array::from_fn(|_| rng.random_range(-2.5..-0.7));
        let logit = rng.random_range(-2.0..4.0);
        let dc = std::array::from_fn(|_| rng.random_range(-1.5..1.5));
        c.push(pos, q, s, logit, dc);
    }
    for v in c.sh_rest.iter_mut() {
        *v = rng.random_range(-0.4..0.4);
    }
    c
}

fn random_camera(rng: &mut ChaCha8Rng) -> CameraView {
    let w = rng.random_range(8..=32);
    let h = rng.random_range(8..=32);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let r = rng.random_range(3.0..5.0);
    let eye = [r * theta.sin(), rng.random_range(-1.0..1.0), -r * theta.cos()];
    let f = rng.random_range(0.8..1.4) * w.max(h) as f64;
    CameraView::look_at(eye, [0.0; 3], [0.0, -1.0, 0.0], f, f, w, h, 0)
}

/// Splatting written out per pixel: EWA projection, depth order, 3-sigma
/// support, alpha floor and front-to-back accumulation.
fn oracle_render(cloud: &GaussianCloud, cam: &CameraView, bg: [f64; 3]) -> Image {
    const C1: f64 = 0.488_602_511_902_919_9;
    let m = cam.world_to_camera;
    let mut rot = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            rot[r][c] = m[r][c];
        }
    }
    // camera center = -R^T t
    let center: [f64; 3] = std::array::from_fn(|k| -(0..3).map(|r| rot[r][k] * m[r][3]).sum::<f64>());
    struct Splat {
        depth: f64,
        mean: [f64; 2],
        inv: [f64; 3],
        opacity: f64,
        color: [f64; 3],
    }
    let mut splats = Vec::new();
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        let cam_p: [f64; 3] = std::array::from_fn(|r| (0..3).map(|k| rot[r][k] * p[k]).sum::<f64>() + m[r][3]);
        let [x, y, z] = cam_p;
        if z <= 0.01 {
            continue;
        }
        let [w, a, b, c] = cloud.rotations[i];
        let rq = [
            [1.0 - 2.0 * (b * b + c * c), 2.0 * (a * b - w * c), 2.0 * (a * c + w * b)],
            [2.0 * (a * b + w * c), 1.0 - 2.0 * (a * a + c * c), 2.0 * (b * c - w * a)],
            [2.0 * (a * c - w * b), 2.0 * (b * c + w * a), 1.0 - 2.0 * (a * a + b * b)],
        ];
        let s = cloud.log_scales[i].map(f64::exp);
        let sigma: [[f64; 3]; 3] =
            std::array::from_fn(|u| std::array::from_fn(|v| (0..3).map(|k| rq[u][k] * s[k] * s[k] * rq[v][k]).sum()));
        let jac = [[cam.fx / z, 0.0, -cam.fx * x / (z * z)], [0.0, cam.fy / z, -cam.fy * y / (z * z)]];
        let t: [[f64; 3]; 2] = std::array::from_fn(|u| std::array::from_fn(|v| (0..3).map(|k| jac[u][k] * rot[k][v]).sum()));
        let cov: [[f64; 2]; 2] = std::array::from_fn(|u| {
            std::array::from_fn(|v| {
                let mut acc = 0.0;
                for k in 0..3 {
                    for l in 0..3 {
                        acc += t[u][k] * sigma[k][l] * t[v][l];
                    }
                }
                acc
            })
        });
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        if det <= 0.0 {
            continue;
        }
        let d: [f64; 3] = std::array::from_fn(|k| p[k] - center[k]);
        let dn = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let (dx, dy, dz) = (d[0] / dn, d[1] / dn, d[2] / dn);
        let color = std::array::from_fn(|ch| {
            let mut v = SH_C0 * cloud.sh_dc[i][ch] + 0.5;
            if cloud.sh_degree >= 1 {
                let r = &cloud.sh_rest[i * 9 + ch * 3..i * 9 + ch * 3 + 3];
                v += -C1 * dy * r[0] + C1 * dz * r[1] - C1 * dx * r[2];
            }
            v
        });
        splats.push(Splat {
            depth: z,
            mean: [cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy],
            inv: [cov[1][1] / det, -cov[0][1] / det, cov[0][0] / det],
            opacity: 1.0 / (1.0 + (-cloud.opacity_logits[i]).exp()),
            color,
        });
    }
    splats.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap());
    Image::from_fn(cam.width, cam.height, 3, |px, py, ch| {
        let (sx, sy) = (px as f64 + 0.5, py as f64 + 0.5);
        let mut out = 0.0;
        let mut trans = 1.0;
        for g in &splats {
            let (ex, ey) = (sx - g.mean[0], sy - g.mean[1]);
            let m2 = g.inv[0] * ex * ex + 2.0 * g.inv[1] * ex * ey + g.inv[2] * ey * ey;
            if m2 > 9.0 {
                continue;
            }
            let a = g.opacity * (-0.5 * m2).exp();
            if a < 1.0 / 255.0 {
                continue;
            }
            out += g.color[ch] * a * trans;
            trans *= 1.0 - a;
        }
        out + trans * bg[ch]
    })
}

fn renderer_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for s in 0..50 {
        let n = rng.random_range(1..=20);
        let degree = (s % 2) as u8;
        let cloud = random_scene(&mut rng, n, degree);
        let cam = random_camera(&mut rng);
        let bg = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let got = render(&cloud, &cam, bg).map_err(|e| e.to_string())?.rgb;
        let want = oracle_render(&cloud, &cam, bg);
        let diff = got.data().iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(diff);
        ensure(diff <= 1e-6, format!("scene {s}: max diff {diff:.3e}"))?;
    }
    Ok(format!("50 scenes, max diff {worst:.2e}"))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
    num / den
}

fn gradient_fd() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    let h = 1e-5;
    for s in 0..10 {
        let cloud = random_scene(&mut rng, 5, 1);
        let mut cam = random_camera(&mut rng);
        cam = CameraView::look_at(cam.center().into(), [0.0; 3], [0.0, -1.0, 0.0], 20.0, 20.0, 20, 20, 0);
        let bg = [0.2, 0.3, 0.4];
        let jac = color_jacobian(&cloud, &cam).map_err(|e| e.to_string())?;
        let img = |c: &GaussianCloud| render(c, &cam, bg).unwrap().rgb;

        // d pixel / d dc = weight * SH_C0 for every Gaussian, pixel and channel
        for g in 0..cloud.len() {
            for ch in 0..3 {
                let (mut p, mut m) = (cloud.clone(), cloud.clone());
                p.sh_dc[g][ch] += h;
                m.sh_dc[g][ch] -= h;
                let (ip, im) = (img(&p), img(&m));
                let mut fd = Vec::new();
                let mut an = Vec::new();
                for y in 0..cam.height {
                    for x in 0..cam.width {
                        fd.push((ip.get(x, y, ch) - im.get(x, y, ch)) / (2.0 * h));
                        an.push(jac.get(g, x, y) * SH_C0);
                    }
                }
                if an.iter().any(|v| *v != 0.0) {
                    let e = rel_err(&an, &fd);
                    worst = worst.max(e);
                    ensure(e < 1e-4, format!("scene {s} gaussian {g} ch {ch}: rel err {e:.2e}"))?;
                }
            }
        }

        // full trainable gradient of a linear readout
        let readout = Image::from_fn(cam.width, cam.height, 3, |x, y, c| ((x * 3 + y * 5 + c * 7) % 11) as f64 / 11.0 - 0.4);
        let loss = |c: &GaussianCloud| img(c).data().iter().zip(readout.data()).map(|(a, b)| a * b).sum::<f64>();
        let grad = RenderPlan::build(&cloud, &cam).unwrap().sh_gradient(&readout);
        let mut an: Vec<f64> = grad.sh_dc.iter().flatten().copied().collect();
        an.extend(&grad.sh_rest);
        let mut fd = Vec::new();
        for g in 0..cloud.len() {
            for ch in 0..3 {
                let (mut p, mut m) = (cloud.clone(), cloud.clone());
                p.sh_dc[g][ch] += h;
                m.sh_dc[g][ch] -= h;
                fd.push((loss(&p) - loss(&m)) / (2.0 * h));
            }
        }
        for k in 0..cloud.sh_rest.len() {
            let (mut p, mut m) = (cloud.clone(), cloud.clone());
            p.sh_rest[k] += h;
            m.sh_rest[k] -= h;
            fd.push((loss(&p) - loss(&m)) / (2.0 * h));
        }
        let e = rel_err(&an, &fd);
        worst = worst.max(e);
        ensure(e < 1e-4, format!("scene {s} sh gradient: rel err {e:.2e}"))?;
    }
    Ok(format!("10 scenes, worst rel err {worst:.2e}"))
}

struct Toys {
    score: ToyScoreProvider,
    features: ToyFeatureExtractor,
    descriptor: ToyDescriptorProvider,
    embedding: ToyEmbeddingProvider,
}

impl Toys {
    fn new(target: Image) -> Self {
        Self {
            score: ToyScoreProvider::new(target, 1000, 3).unwrap(),
            features: ToyFeatureExtractor::new(3),
            descriptor: ToyDescriptorProvider::new(3, 16).unwrap(),
            embedding: ToyEmbeddingProvider::new(3, 16).unwrap(),
        }
    }

    fn providers(&self) -> Providers<'_> {
        Providers { score: &self.score, features: &self.features, descriptor: &self.descriptor, embedding: &self.embedding }
    }

    fn bundle(&self, reference: &Image, prompt: &str) -> StyleBundle {
        let embedding = clean_style(reference, "ref", prompt, None, &self.embedding).unwrap();
        StyleBundle { reference: reference.clone(), embedding, prompt: prompt.into(), guidance: None }
    }
}

fn three_blob_scene() -> GaussianCloud {
    common::three_gaussians()
}

fn geometry_freeze() -> Outcome {
    let cams = CameraView::orbit(8, [0.0; 3], 4.0, 360.0, 12.0, 16, 16);
    let scene = three_blob_scene();
    let snap = scene.geometry_snapshot();
    let target = Image::solid(16, 16, [0.7, 0.2, 0.2]);
    let toys = Toys::new(target.clone());
    let bundle = toys
        .bundle(&target, "three blobs")
        .with_stylized_guidance(&scene, &cams, [0.0; 3], &ToyStylizer)
        .map_err(|e| e.to_string())?;
    let cfg = TrainConfig::new(11);
    ensure(cfg.total_steps() == 2800, format!("default schedule has {} steps", cfg.total_steps()))?;
    let (out, rec) = stylize(&scene, &cams, &bundle, &cfg, toys.providers(), &mut NoHooks).map_err(|e| e.to_string())?;
    ensure(rec.steps.len() == 2800, format!("ran {} steps", rec.steps.len()))?;
    ensure(snap.bitwise_eq(&out), "frozen arrays changed")?;
    ensure(out.sh_dc != scene.sh_dc, "colors did not move")?;
    Ok("2800 steps, positions/rotations/scales/opacities bitwise equal".into())
}

fn schedule_tables() -> Outcome {
    let cfg = DssdConfig::default();
    ensure(
        (cfg.total_timesteps, cfg.t_min, cfg.t_max, cfg.lambda_max) == (1000, 20, 750, 20.0),
        "default constants",
    )?;
    use GuidanceMode::{Global, Local};
    let alpha_rows: [(u64, u64, u64, GuidanceMode, f64); 10] = [
        (0, 4, 10, Global, 0.0),
        (3, 4, 10, Global, 0.0),
        (4, 4, 10, Global, 0.1),
        (39, 4, 10, Global, 0.9),
        (40, 4, 10, Global, 0.0),
        (0, 4, 10, Local, 0.0),
        (7, 4, 10, Local, 0.7),
        (13, 4, 10, Local, 0.3),
        (5, 1, 4, Global, 0.25),
        (6, 3, 4, Global, 0.5),
    ];
    for (i, nv, no, mode, want) in alpha_rows {
        let got = alpha_step(i, nv, no, mode);
        ensure(got == want, format!("alpha_step({i},{nv},{no},{mode:?}) = {got}, want {want}"))?;
    }
    let t_rows: [(f64, usize); 7] = [(0.0, 750), (0.04, 750), (0.0625, 750), (0.25, 500), (0.5, 293), (0.81, 100), (1.0, 20)];
    for (a, want) in t_rows {
        let got = sample_timestep(a, 1000, 20, 750).map_err(|e| e.to_string())?;
        ensure(got == want, format!("sample_timestep({a}) = {got}, want {want}"))?;
    }
    let cfg_rows: [(f64, f64); 6] = [(0.0, 7.5), (0.25, 7.5), (0.5, 7.5), (0.75, 11.25), (0.875, 15.3125), (1.0, 20.0)];
    for (a, want) in cfg_rows {
        let got = dynamic_cfg(a, 20.0);
        ensure(got == want, format!("dynamic_cfg({a}) = {got}, want {want}"))?;
    }
    let at = |i: u64| {
        GuidanceSample::from_state(&GuidanceState { i_step: i, n_view: 1, n_opt: 4, mode: Local }, &cfg).unwrap()
    };
    let first = at(0);
    ensure((first.t, first.delta_lambda) == (750, 7.5), format!("alpha=0 gives {first:?}"))?;
    let ends = GuidanceSample { alpha_step: 1.0, t: sample_timestep(1.0, 1000, 20, 750).unwrap(), delta_lambda: dynamic_cfg(1.0, 20.0) };
    ensure((ends.t, ends.delta_lambda) == (20, 20.0), format!("alpha=1 gives {ends:?}"))?;
    Ok(format!("{} table rows exact", alpha_rows.len() + t_rows.len() + cfg_rows.len() + 2))
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Image::from_fn(32, 32, 3, |_, _, _| rng.random_range(0.0..1.0));
    let fx = ToyFeatureExtractor::new(4);
    let sos = sos_loss(std::slice::from_ref(&x), &x, &fx, &SosConfig::default(), 0).map_err(|e| e.to_string())?;
    ensure(sos == 0.0, format!("sos_loss(x,x) = {sos:e}"))?;
    let desc = ToyDescriptorProvider::new(4, 32).unwrap();
    let csd = csd_loss(std::slice::from_ref(&x), &x, &desc).map_err(|e| e.to_string())?;
    ensure(csd.abs() <= 1e-12, format!("csd_loss(x,x) = {csd:e}"))?;

    let emb = ToyEmbeddingProvider::new(4, 32).unwrap();
    let mut worst_qa: f64 = 0.0;
    for (p, n) in [("Good photo.", "Bad photo."), ("Sharp photo.", "Blurry photo."), ("Colorful photo.", "Dull photo.")] {
        let s = clip_iqa_score(&x, p, n, &emb).unwrap() + clip_iqa_score(&x, n, p, &emb).unwrap();
        worst_qa = worst_qa.max((s - 1.0).abs());
    }
    ensure(worst_qa <= 1e-6, format!("qa complement off by {worst_qa:e}"))?;

    let mut worst_gram: f64 = 0.0;
    for _ in 0..20 {
        let (c, h, w) = (rng.random_range(1..6), rng.random_range(1..7), rng.random_range(1..7));
        let f = FeatureMap { channels: c, height: h, width: w, data: (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let g = gram(&f);
        for a in 0..c {
            for b in 0..c {
                let mut naive = 0.0;
                for y in 0..h {
                    for xx in 0..w {
                        naive += f.data[(a * h + y) * w + xx] * f.data[(b * h + y) * w + xx];
                    }
                }
                worst_gram = worst_gram.max((g[a * c + b] - naive).abs());
            }
        }
    }
    ensure(worst_gram <= 1e-6, format!("gram off by {worst_gram:e}"))?;

    let cams = CameraView::orbit(3, [0.0; 3], 4.0, 40.0, 16.0, 16, 16);
    let target = Image::solid(16, 16, [0.8, 0.3, 0.1]);
    let toys = Toys::new(target.clone());
    let bundle = toys.bundle(&target, "blobs");
    let mut cfg = TrainConfig::new(1);
    cfg.timetable = ModeTimetable::uniform(10, Phase::GlobalAdaptive, false).unwrap();
    let scene = three_blob_scene();
    let tr = Trainer::new(&scene, &cams, &bundle, &cfg, toys.providers()).map_err(|e| e.to_string())?;
    let spec = tr.step_spec(2).map_err(|e| e.to_string())?;
    let base = tr.composite(&scene, &spec, &cfg.weights).map_err(|e| e.to_string())?;
    for k in [2.0, 0.5] {
        let s = tr.composite(&scene, &spec, &cfg.weights.scaled(k)).map_err(|e| e.to_string())?;
        let mut g = base.grad.clone();
        g.scale(k);
        ensure(s.total == k * base.total && s.grad == g, format!("homogeneity fails for k={k}"))?;
    }
    let only = |w: ExpertWeights| tr.composite(&scene, &spec, &w).map(|c| c.total).unwrap();
    let w = cfg.weights;
    let parts = [
        only(ExpertWeights { style: w.style, sos: 0.0, csd: 0.0, qa: 0.0 }),
        only(ExpertWeights { style: 0.0, sos: w.sos, csd: 0.0, qa: 0.0 }),
        only(ExpertWeights { style: 0.0, sos: 0.0, csd: w.csd, qa: 0.0 }),
        only(ExpertWeights { style: 0.0, sos: 0.0, csd: 0.0, qa: w.qa }),
    ];
    let sum: f64 = parts.iter().sum();
    ensure((sum - base.total).abs() <= 1e-9 * base.total.abs().max(1.0), format!("sum of single experts {sum} vs {}", base.total))?;
    Ok(format!("sos {sos:e}, csd {csd:.1e}, qa {worst_qa:.1e}, gram {worst_gram:.1e}, homogeneity exact"))
}

fn dssd_algebra() -> Outcome {
    let target = Image::from_fn(12, 10, 3, |x, y, c| ((x * 5 + y * 3 + c) % 13) as f64 / 13.0);
    let provider = ToyScoreProvider::new(target.clone(), 1000, 8).unwrap().with_style_shift(0.05);
    let emb = clean_style(&target, "ref", "a pattern", None, &ToyEmbeddingProvider::new(1, 16).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = Image::from_fn(12, 10, 3, |_, _, _| rng.random_range(0.0..1.0));
    let mut worst_col: f64 = 0.0;
    for t in [20, 300, 750] {
        let abar = provider.alpha_bar(t).unwrap();
        let eps = sample_noise(&mut rng, &x);
        let noised = forward_noise(&x, &eps, abar);
        let r = |dl: f64| dssd_residual(&noised, "p", Some(&emb), t, dl, &eps, &provider).unwrap();
        let (r0, r1) = (r(0.0), r(1.0));
        for dl in [7.5, 12.0, 20.0] {
            let rd = r(dl);
            for i in 0..rd.len() {
                let affine = r0.data()[i] + dl * (r1.data()[i] - r0.data()[i]);
                worst_col = worst_col.max((rd.data()[i] - affine).abs());
            }
        }
    }
    ensure(worst_col <= 1e-6, format!("collinearity off by {worst_col:e}"))?;

    let mut worst_eps: f64 = 0.0;
    for t in [20, 400, 750] {
        let abar = provider.alpha_bar(t).unwrap();
        let eps = sample_noise(&mut rng, &target);
        let noised = forward_noise(&target, &eps, abar);
        let r = dssd_residual(&noised, "p", Some(&emb), t, 0.0, &eps, &provider).unwrap();
        worst_eps = worst_eps.max(r.data().iter().fold(0.0, |m, v| m.max(v.abs())));
    }
    ensure(worst_eps <= 1e-7, format!("eps recovery off by {worst_eps:e}"))?;
    Ok(format!("collinearity {worst_col:.1e}, eps recovery {worst_eps:.1e}"))
}

fn dssd_convergence() -> Outcome {
    let cam = vec![CameraView::look_at([0.0, 0.0, -4.0], [0.0; 3], [0.0, -1.0, 0.0], 12.0, 12.0, 16, 16, 0)];
    let blob = |rgb| {
        let mut c = GaussianCloud::empty(0);
        c.push([0.0; 3], [1.0, 0.0, 0.0, 0.0], [1.0, 1.0, -1.0], 8.0, rgb_to_dc(rgb));
        c
    };
    let goal = [1.0, 0.0, 0.0];
    let target = render(&blob(goal), &cam[0], [0.0; 3]).unwrap().rgb;
    let toys = Toys::new(target.clone());
    let bundle = toys.bundle(&target, "a blob");
    let mut cfg = TrainConfig::new(1);
    cfg.weights = ExpertWeights { style: 1.0, sos: 0.0, csd: 0.0, qa: 0.0 };
    cfg.timetable = ModeTimetable::uniform(500, Phase::Local, false).unwrap();
    cfg.adam.lr_dc = 0.05;
    let (out, _) = stylize(&blob([1.0, 1.0, 1.0]), &cam, &bundle, &cfg, toys.providers(), &mut NoHooks).map_err(|e| e.to_string())?;
    let r = render(&out, &cam[0], [0.0; 3]).unwrap();
    let mut fg = 0;
    let mut worst: f64 = 0.0;
    for y in 0..16 {
        for x in 0..16 {
            if r.alpha.get(x, y, 0) >= 0.99 {
                fg += 1;
                for c in 0..3 {
                    worst = worst.max((r.rgb.get(x, y, c) - goal[c]).abs());
                }
            }
        }
    }
    ensure(fg > 0, "no foreground pixels")?;
    ensure(worst <= 0.05, format!("foreground off target by {worst:.4} after 500 steps"))?;
    Ok(format!("500 steps, {fg} foreground px, max channel error {worst:.4}"))
}

fn composite_reduction() -> Outcome {
    let cams = CameraView::orbit(4, [0.0; 3], 4.0, 40.0, 20.0, 24, 24);
    let scene = three_blob_scene();
    let mut styled = scene.clone();
    styled.sh_dc = vec![rgb_to_dc([0.8, 0.3, 0.1]), rgb_to_dc([0.9, 0.5, 0.2]), rgb_to_dc([0.6, 0.2, 0.1])];
    let target = render(&styled, &cams[0], [0.0; 3]).unwrap().rgb;
    let toys = Toys::new(target.clone());
    let bundle = toys.bundle(&target, "blobs");
    let mut cfg = TrainConfig::new(2);
    cfg.timetable = ModeTimetable::uniform(400, Phase::GlobalAdaptive, false).unwrap();
    cfg.adam.lr_dc = 0.01;
    let tr = Trainer::new(&scene, &cams, &bundle, &cfg, toys.providers()).map_err(|e| e.to_string())?;
    let (out, _) = tr.run(&scene, &mut NoHooks).map_err(|e| e.to_string())?;
    let spec = tr.step_spec(0).map_err(|e| e.to_string())?;
    let before = tr.composite(&scene, &spec, &cfg.weights).map_err(|e| e.to_string())?.total;
    let after = tr.composite(&out, &spec, &cfg.weights).map_err(|e| e.to_string())?.total;
    let reduction = 1.0 - after / before;
    ensure(reduction >= 0.9, format!("composite {before:.4} -> {after:.4}, reduction {:.1}%", 100.0 * reduction))?;
    Ok(format!("composite {before:.2} -> {after:.4}, reduction {:.2}%", 100.0 * reduction))
}

/// Mean SSIM with the 11x11 window applied directly at each valid position.
fn ssim_direct(a: &Image, b: &Image) -> f64 {
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let gs: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / gs).collect();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (w, h, ch) = a.shape();
    let mut total = 0.0;
    let mut count = 0.0;
    for c in 0..ch {
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for j in 0..11 {
                    for i in 0..11 {
                        let k = g[i] * g[j];
                        let (p, q) = (a.get(x0 + i, y0 + j, c), b.get(x0 + i, y0 + j, c));
                        mx += k * p;
                        my += k * q;
                        sxx += k * p * p;
                        syy += k * q * q;
                        sxy += k * p * q;
                    }
                }
                sxx -= mx * mx;
                syy -= my * my;
                sxy -= mx * my;
                total += (2.0 * mx * my + c1) * (2.0 * sxy + c2) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
                count += 1.0;
            }
        }
    }
    total / count
}

fn metrics_sanity() -> Outcome {
    let base = Image::from_fn(16, 16, 3, |x, y, c| ((x * 7 + y * 3 + c * 20) % 200) as f64 / 255.0);
    let shifted = base.map(|v| v + 16.0 / 255.0);
    let p = psnr(&base, &shifted, 1.0).map_err(|e| e.to_string())?;
    let closed = 20.0 * (255.0f64 / 16.0).log10();
    ensure((p - closed).abs() <= 1e-3, format!("psnr {p:.4} vs closed form {closed:.4}"))?;
    let self_ssim = ssim(&base, &base).unwrap();
    ensure((self_ssim - 1.0).abs() <= 1e-12, format!("ssim(x,x) = {self_ssim}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let (w, h) = (rng.random_range(11..24), rng.random_range(11..24));
        let a = Image::from_fn(w, h, 3, |_, _, _| rng.random_range(0.0..1.0));
        let b = a.map(|v| (v + 0.1).min(1.0) * 0.9);
        worst = worst.max((ssim(&a, &b).unwrap() - ssim_direct(&a, &b)).abs());
    }
    ensure(worst <= 1e-5, format!("ssim vs direct window off by {worst:e}"))?;
    Ok(format!("psnr {p:.4} dB (closed form 20log10(255/16), stated literal 24.0327), ssim(x,x)=1, oracle diff {worst:.1e}"))
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = common::write_experiment(dir.path(), "", "");
    let once = |tag: &str| -> Result<(Vec<u8>, Vec<u8>), String> {
        let o = common::run(&["stylize", cfg.to_str().unwrap()]);
        if !o.status.success() {
            return Err(format!("run {tag} failed: {}", common::stderr(&o)));
        }
        let out = dir.path().join("out");
        let r = (fs::read(out.join("summary.json")).unwrap(), fs::read(out.join("stylized.ply")).unwrap());
        fs::rename(&out, dir.path().join(format!("out_{tag}"))).unwrap();
        Ok(r)
    };
    let a = once("a")?;
    let b = once("b")?;
    ensure(a.0 == b.0, "summary.json differs")?;
    ensure(a.1 == b.1, "stylized.ply differs")?;
    let summary: serde_json::Value = serde_json::from_slice(&a.0).unwrap();
    Ok(format!("two {}-step runs byte-identical", summary["steps"]))
}

fn main() {
    let mut report = Report { failed: 0 };
    let secs = Duration::from_secs;
    report.check("renderer oracle equivalence", secs(10), renderer_oracle);
    report.check("color gradient vs finite differences", secs(30), gradient_fd);
    report.check("geometry freeze over full run", secs(300), geometry_freeze);
    report.check("schedule tables", secs(1), schedule_tables);
    report.check("loss identities", secs(5), loss_identities);
    report.check("dssd residual algebra", secs(5), dssd_algebra);
    report.check("dssd-only toy convergence", secs(60), dssd_convergence);
    report.check("four-expert composite reduction", secs(300), composite_reduction);
    report.check("metrics sanity", secs(10), metrics_sanity);
    report.check("stylize reproducibility", secs(600), reproducibility);
    println!("{} failed", report.failed);
    if report.failed > 0 {
        std::process::exit(1);
    }
}
