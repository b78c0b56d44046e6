use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use splatstyle::config::{ConfigError, ResolvedConfig, RunConfig};
use splatstyle::gs_model::{load_ply, logistic, save_ply, GaussianCloud};
use splatstyle::image::Transfer;
use splatstyle::metrics::{lpips, psnr, ssim, DEFAULT_LPIPS_LAYERS};
use splatstyle::priors::{ToyDescriptorProvider, ToyEmbeddingProvider, ToyFeatureExtractor, ToyScoreProvider, ToyStylizer};
use splatstyle::renderer::RenderPlan;
use splatstyle::scheduler::{Phase, PhaseAt};
use splatstyle::style_cleaning::clean_style;
use splatstyle::trainer::{oscillation_metric, AdamState, Providers, StepRecord, StyleBundle, TrainError, TrainHooks, Trainer};
use splatstyle::{CameraView, Image};

#[derive(Parser)]
#[command(name = "splatstyle", version, about = "Color-only stylization of Gaussian splatting scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the stylization described by a TOML config.
    Stylize { config: PathBuf },
    /// Render a PLY scene from every camera in a JSON camera list.
    Render {
        ply: PathBuf,
        cameras: PathBuf,
        out_dir: PathBuf,
        /// Background color as `r,g,b` in [0, 1].
        #[arg(long, value_parser = parse_rgb, default_value = "0,0,0")]
        background: [f64; 3],
    },
    /// Compare two directories of PNGs with matching file names.
    Eval {
        dir_a: PathBuf,
        dir_b: PathBuf,
        /// Seed of the feature extractor used for LPIPS.
        #[arg(long, default_value_t = 0)]
        lpips_seed: u64,
    },
    /// Print a summary of a PLY scene.
    Inspect { ply: PathBuf },
}

fn parse_rgb(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad component '{p}': {e}")))
        .collect::<Result<_, _>>()?;
    match parts.as_slice() {
        [r, g, b] => Ok([*r, *g, *b]),
        _ => Err(format!("expected r,g,b, got '{s}'")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Stylize { config } => cmd_stylize(&config),
        Command::Render { ply, cameras, out_dir, background } => cmd_render(&ply, &cameras, &out_dir, background),
        Command::Eval { dir_a, dir_b, lpips_seed } => cmd_eval(&dir_a, &dir_b, lpips_seed),
        Command::Inspect { ply } => cmd_inspect(&ply),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = if e.downcast_ref::<ConfigError>().is_some() { 2 } else { 1 };
            ExitCode::from(code)
        }
    }
}

fn load_cameras(path: &Path) -> Result<Vec<CameraView>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading cameras {}", path.display()))?;
    let cams: Vec<CameraView> =
        serde_json::from_str(&text).with_context(|| format!("parsing cameras {}", path.display()))?;
    for (i, c) in cams.iter().enumerate() {
        c.validate().with_context(|| format!("camera {i}"))?;
    }
    Ok(cams)
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value serializes"));
}

fn cmd_render(ply: &Path, cameras: &Path, out_dir: &Path, background: [f64; 3]) -> Result<()> {
    let cloud = load_ply(ply).with_context(|| format!("loading {}", ply.display()))?;
    let cams = load_cameras(cameras)?;
    fs::create_dir_all(out_dir)?;
    for (i, cam) in cams.iter().enumerate() {
        let img = RenderPlan::build(&cloud, cam)?.render(&cloud, background);
        img.save_png(&out_dir.join(format!("view_{i:03}.png")), Transfer::Identity)?;
    }
    print_json(&json!({ "rendered": cams.len() }));
    Ok(())
}

fn png_names(dir: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            out.insert(name);
        }
    }
    Ok(out)
}

fn cmd_eval(dir_a: &Path, dir_b: &Path, lpips_seed: u64) -> Result<()> {
    let a = png_names(dir_a)?;
    let b = png_names(dir_b)?;
    if a != b {
        let only_a: Vec<_> = a.difference(&b).collect();
        let only_b: Vec<_> = b.difference(&a).collect();
        bail!("image sets differ: only in {}: {only_a:?}; only in {}: {only_b:?}", dir_a.display(), dir_b.display());
    }
    let fx = ToyFeatureExtractor::new(lpips_seed);
    let mut pairs = Vec::new();
    let (mut sp, mut ss, mut sl) = (0.0, 0.0, 0.0);
    for name in &a {
        let x = Image::load_png(&dir_a.join(name), Transfer::Identity)?;
        let y = Image::load_png(&dir_b.join(name), Transfer::Identity)?;
        let p = psnr(&x, &y, 1.0).with_context(|| name.clone())?;
        let s = ssim(&x, &y).with_context(|| name.clone())?;
        let l = lpips(&x, &y, &fx, &DEFAULT_LPIPS_LAYERS).with_context(|| name.clone())?;
        sp += p;
        ss += s;
        sl += l;
        pairs.push(json!({ "name": name, "psnr": p, "ssim": s, "lpips": l }));
    }
    let n = a.len().max(1) as f64;
    let mean = if a.is_empty() {
        Value::Null
    } else {
        json!({ "psnr": sp / n, "ssim": ss / n, "lpips": sl / n })
    };
    print_json(&json!({ "pairs": pairs, "mean": mean }));
    Ok(())
}

fn cmd_inspect(ply: &Path) -> Result<()> {
    let cloud = load_ply(ply).with_context(|| format!("loading {}", ply.display()))?;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &cloud.positions {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let ops: Vec<f64> = cloud.opacity_logits.iter().map(|l| logistic(*l)).collect();
    let stats = if ops.is_empty() {
        Value::Null
    } else {
        json!({
            "min": ops.iter().copied().fold(f64::INFINITY, f64::min),
            "max": ops.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            "mean": ops.iter().sum::<f64>() / ops.len() as f64,
        })
    };
    let bbox = if cloud.is_empty() { Value::Null } else { json!({ "min": lo, "max": hi }) };
    print_json(&json!({
        "count": cloud.len(),
        "sh_degree": cloud.sh_degree,
        "bbox": bbox,
        "opacity": stats,
    }));
    Ok(())
}

/// Writes checkpoints and per-phase previews while the trainer runs.
struct RunHooks<'a> {
    out: &'a Path,
    cfg: &'a ResolvedConfig,
    preview_plan: RenderPlan,
    total_steps: usize,
}

impl RunHooks<'_> {
    fn phase_at(&self, step: usize) -> Option<PhaseAt> {
        self.cfg.train.timetable.phase_at(step)
    }
}

fn phase_name(p: PhaseAt) -> String {
    let base = p.phase.name();
    if p.overlay {
        format!("{base}+rgb")
    } else {
        base.to_string()
    }
}

impl TrainHooks for RunHooks<'_> {
    fn on_step(&mut self, record: &StepRecord, cloud: &GaussianCloud, adam: &AdamState) -> Result<(), TrainError> {
        let hook = |e: String| TrainError::Hook(e);
        let step = record.step;
        let this = PhaseAt { phase: record.phase, overlay: record.overlay };
        let last = step + 1 == self.total_steps;
        if last || self.phase_at(step + 1) != Some(this) {
            let dir = self.out.join("previews");
            fs::create_dir_all(&dir).map_err(|e| hook(e.to_string()))?;
            let img = self.preview_plan.render(cloud, self.cfg.train.background);
            img.save_png(&dir.join(format!("{:05}_{}.png", step + 1, phase_name(this))), Transfer::Identity)
                .map_err(|e| hook(e.to_string()))?;
        }
        if let Some(every) = self.cfg.raw.checkpoint_every {
            if (step + 1).is_multiple_of(every) {
                let dir = self.out.join("checkpoints");
                fs::create_dir_all(&dir).map_err(|e| hook(e.to_string()))?;
                let stem = format!("step_{:05}", step + 1);
                save_ply(cloud, &dir.join(format!("{stem}.ply"))).map_err(|e| hook(e.to_string()))?;
                let state = json!({
                    "step": step + 1,
                    "seed": self.cfg.train.seed,
                    "provider_seed": self.cfg.provider_seed,
                    "adam": adam,
                });
                fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&state).expect("serializes"))
                    .map_err(|e| hook(e.to_string()))?;
            }
        }
        Ok(())
    }
}

fn cmd_stylize(config: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let cloud = load_ply(&cfg.ply).with_context(|| format!("loading {}", cfg.ply.display()))?;
    let cams = load_cameras(&cfg.cameras)?;
    if cams.is_empty() {
        bail!(ConfigError::Key { key: "scene.cameras".into(), message: "camera list is empty".into() });
    }
    let style_image = Image::load_png(&cfg.style_image, Transfer::Identity)?;
    let target = Image::load_png(&cfg.score_target, Transfer::Identity)?;

    let p = &cfg.raw.providers;
    let seed = cfg.provider_seed;
    let mut score = ToyScoreProvider::new(target, cfg.train.dssd.total_timesteps, seed)?;
    if let Some(s) = p.style_shift {
        score = score.with_style_shift(s);
    }
    let features = ToyFeatureExtractor::new(seed);
    let descriptor = ToyDescriptorProvider::new(seed, p.descriptor_dim)?;
    let embedding = ToyEmbeddingProvider::new(seed, p.embedding_dim)?;
    let providers = Providers { score: &score, features: &features, descriptor: &descriptor, embedding: &embedding };

    let source = cfg.raw.style.image.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
    let style = clean_style(&style_image, &source, &cfg.content, cfg.raw.style.style_text.as_deref(), &embedding)?;
    let mut bundle = StyleBundle { reference: style_image, embedding: style, prompt: cfg.content.clone(), guidance: None };
    if cfg.train.needs_guidance() {
        bundle = bundle.with_stylized_guidance(&cloud, &cams, cfg.train.background, &ToyStylizer)?;
    }

    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let trainer = Trainer::new(&cloud, &cams, &bundle, &cfg.train, providers)?;
    let mut hooks = RunHooks {
        out: &out,
        cfg: &cfg,
        preview_plan: trainer.plan(0).clone(),
        total_steps: cfg.train.total_steps(),
    };
    let snapshot = cloud.geometry_snapshot();
    let (stylized, record) = match trainer.run(&cloud, &mut hooks) {
        Ok(r) => r,
        Err(TrainError::NonFinite { step, what, snapshot, record }) => {
            save_ply(&snapshot, &out.join("abort_snapshot.ply"))?;
            fs::write(out.join("record.jsonl"), record.to_jsonl())?;
            bail!("non-finite {what} at step {step}; last good state written to abort_snapshot.ply");
        }
        Err(e) => return Err(e.into()),
    };

    save_ply(&stylized, &out.join("stylized.ply"))?;
    fs::write(out.join("record.jsonl"), record.to_jsonl())?;
    let osc = oscillation_metric(&record);
    let mut phases: Vec<Value> = Vec::new();
    for s in &record.steps {
        let name = phase_name(PhaseAt { phase: s.phase, overlay: s.overlay });
        match phases.last_mut() {
            Some(p) if p["phase"] == name.as_str() => {
                p["end"] = json!(s.step + 1);
                p["final_total"] = json!(s.total);
            }
            _ => phases.push(json!({ "phase": name, "start": s.step, "end": s.step + 1, "final_total": s.total })),
        }
    }
    let summary = json!({
        "steps": record.steps.len(),
        "gaussians": stylized.len(),
        "seed": cfg.train.seed,
        "provider_seed": cfg.provider_seed,
        "first_total": record.steps.first().map(|s| s.total),
        "final_total": record.steps.last().map(|s| s.total),
        "final": record.steps.last(),
        "phases": phases,
        "geometry_unchanged": snapshot.bitwise_eq(&stylized),
        "oscillation": {
            "count": osc.len(),
            "mean": if osc.is_empty() { Value::Null } else { json!(osc.iter().sum::<f64>() / osc.len() as f64) },
            "max": osc.iter().copied().reduce(f64::max),
        },
        "distillation_steps": record.steps.iter().filter(|s| s.phase != Phase::LocalRgb).count(),
    });
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(out.join("summary.json"), &text)?;
    println!("{text}");
    Ok(())
}
