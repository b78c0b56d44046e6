#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use splatstyle::gs_model::sh::rgb_to_dc;
use splatstyle::gs_model::save_ply;
use splatstyle::image::Transfer;
use splatstyle::{CameraView, GaussianCloud, Image};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_splatstyle"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn unit(q: [f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

pub fn two_gaussians() -> GaussianCloud {
    let mut c = GaussianCloud::empty(0);
    c.push([0.0, 0.0, 0.0], unit([1.0, 0.0, 0.0, 0.0]), [-1.0; 3], 1.5, rgb_to_dc([0.9, 0.2, 0.1]));
    c.push([0.2, -0.1, 0.8], unit([0.9, 0.2, 0.0, 0.1]), [-0.8, -1.1, -0.9], 0.5, rgb_to_dc([0.1, 0.3, 0.8]));
    c
}

pub fn three_gaussians() -> GaussianCloud {
    let mut c = GaussianCloud::empty(1);
    c.push([0.0, 0.0, 0.3], unit([1.0, 0.0, 0.0, 0.0]), [0.4, 0.4, 0.4], 4.0, rgb_to_dc([0.9, 0.9, 0.9]));
    c.push([0.3, 0.2, -0.5], unit([0.9, 0.1, 0.3, 0.0]), [-0.5, -0.3, -0.6], 2.0, rgb_to_dc([0.2, 0.6, 0.3]));
    c.push([-0.4, -0.2, -0.4], unit([0.8, 0.0, -0.2, 0.4]), [-0.4, -0.6, -0.3], 2.0, rgb_to_dc([0.5, 0.1, 0.7]));
    c
}

pub fn front_camera(size: usize) -> CameraView {
    CameraView::look_at([0.0, 0.0, -4.0], [0.0; 3], [0.0, -1.0, 0.0], 20.0, 20.0, size, size, 0)
}

pub fn style_image(size: usize) -> Image {
    Image::from_fn(size, size, 3, |x, y, c| {
        let stripe = ((x / 2 + y / 3) % 2) as f64;
        [0.85 - 0.4 * stripe, 0.35 + 0.2 * stripe, 0.15][c]
    })
}

/// Short timetable touching every phase.
pub const SHORT_TIMETABLE: &str = r#"timetable = [
  { start = 0, end = 20, phase = "global_adaptive" },
  { start = 20, end = 40, phase = "global_adaptive", overlay = true },
  { start = 40, end = 50, phase = "global_fix" },
  { start = 50, end = 60, phase = "global_free" },
  { start = 60, end = 80, phase = "local" },
  { start = 80, end = 90, phase = "local_rgb" },
]"#;

/// Writes scene, cameras, style image and `config.toml` into `dir`.
pub fn write_experiment(dir: &Path, schedule: &str, extra: &str) -> PathBuf {
    save_ply(&three_gaussians(), &dir.join("scene.ply")).unwrap();
    let cams = CameraView::orbit(4, [0.0; 3], 4.0, 60.0, 16.0, 16, 16);
    fs::write(dir.join("cameras.json"), serde_json::to_string_pretty(&cams).unwrap()).unwrap();
    style_image(16).save_png(&dir.join("style.png"), Transfer::Identity).unwrap();
    let cfg = format!(
        r#"seed = 5
output_dir = "out"
checkpoint_every = 30

[scene]
ply = "scene.ply"
cameras = "cameras.json"

[style]
image = "style.png"
content = "three colored blobs"
style_text = "warm stripes"

[adam]
lr_dc = 0.01

[schedule]
n_opt = 4
{schedule}

[providers]
seed = 9
embedding_dim = 16
descriptor_dim = 16
{extra}
"#
    );
    let path = dir.join("config.toml");
    fs::write(&path, cfg).unwrap();
    path
}
