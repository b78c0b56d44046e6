//! Guidance bookkeeping: the cycle position `alpha_step`, the timestep and CFG
//! laws derived from it, view ordering, and the step timetable.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::renderer::CameraView;

/// Lower bound of the dynamic CFG coefficient.
pub const CFG_FLOOR: f64 = 7.5;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("timestep bounds require 0 <= t_min <= t_max <= T, got t_min={t_min} t_max={t_max} T={total}")]
    TimestepBounds { t_min: usize, t_max: usize, total: usize },
    #[error("alpha_step must lie in [0, 1], got {0}")]
    Alpha(f64),
    #[error("timetable is empty")]
    EmptyTimetable,
    #[error("timetable leaves steps [{start}, {end}) uncovered")]
    Uncovered { start: usize, end: usize },
    #[error("timetable entries overlap on [{start}, {end})")]
    Overlap { start: usize, end: usize },
    #[error("timetable entry [{start}, {end}) is empty or reversed")]
    BadRange { start: usize, end: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    Global,
    Local,
}

/// Position within one optimization cycle.
///
/// Global: `(floor(i / n_view) mod n_opt) / n_opt`, so every view in a sweep
/// sees the same noise level. Local: `(i mod n_opt) / n_opt`.
pub fn alpha_step(i_step: u64, n_view: u64, n_opt: u64, mode: GuidanceMode) -> f64 {
    let n_view = n_view.max(1);
    let n_opt = n_opt.max(1);
    let k = match mode {
        GuidanceMode::Global => (i_step / n_view) % n_opt,
        GuidanceMode::Local => i_step % n_opt,
    };
    k as f64 / n_opt as f64
}

/// `round((1 - sqrt(alpha)) * T)` clipped to `[t_min, t_max]`.
pub fn sample_timestep(
    alpha: f64,
    total: usize,
    t_min: usize,
    t_max: usize,
) -> Result<usize, ScheduleError> {
    if t_min > t_max || t_max > total {
        return Err(ScheduleError::TimestepBounds { t_min, t_max, total });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ScheduleError::Alpha(alpha));
    }
    let t = ((1.0 - alpha.sqrt()) * total as f64).round() as usize;
    Ok(t.clamp(t_min, t_max))
}

/// `max(7.5, lambda_max * alpha^2)`.
pub fn dynamic_cfg(alpha: f64, lambda_max: f64) -> f64 {
    CFG_FLOOR.max(lambda_max * alpha * alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GuidanceState {
    pub i_step: u64,
    pub n_view: u64,
    pub n_opt: u64,
    pub mode: GuidanceMode,
}

impl GuidanceState {
    pub fn alpha_step(&self) -> f64 {
        alpha_step(self.i_step, self.n_view, self.n_opt, self.mode)
    }
}

/// Indices of `views` sorted by azimuth (stable on ties), rotated so that the
/// `start`-th view in sorted order comes first.
pub fn view_order(views: &[CameraView], start: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..views.len()).collect();
    idx.sort_by_key(|&i| views[i].azimuth);
    if !idx.is_empty() {
        let s = start % idx.len();
        idx.rotate_left(s);
    }
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Single-view RGB loss only.
    LocalRgb,
    /// Global sweep, fixed view order.
    GlobalAdaptive,
    /// Global sweep, fixed view order.
    GlobalFix,
    /// Global sweep, seeded random view order per cycle.
    GlobalFree,
    /// Single-view guidance.
    Local,
}

impl Phase {
    pub fn mode(self) -> GuidanceMode {
        match self {
            Phase::LocalRgb | Phase::Local => GuidanceMode::Local,
            _ => GuidanceMode::Global,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::LocalRgb => "local_rgb",
            Phase::GlobalAdaptive => "global_adaptive",
            Phase::GlobalFix => "global_fix",
            Phase::GlobalFree => "global_free",
            Phase::Local => "local",
        }
    }

    /// Whether the score-distillation term runs in this phase.
    pub fn uses_distillation(self) -> bool {
        self != Phase::LocalRgb
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimetableEntry {
    pub start: usize,
    pub end: usize,
    pub phase: Phase,
    /// RGB loss against pre-stylized views is active on top of `phase`.
    #[serde(default)]
    pub overlay: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseAt {
    pub phase: Phase,
    pub overlay: bool,
}

/// Sorted, gap-free, non-overlapping cover of `[0, total_steps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeTimetable {
    entries: Vec<TimetableEntry>,
}

impl ModeTimetable {
    pub fn new(mut entries: Vec<TimetableEntry>) -> Result<Self, ScheduleError> {
        if entries.is_empty() {
            return Err(ScheduleError::EmptyTimetable);
        }
        entries.sort_by_key(|e| e.start);
        let mut cursor = 0;
        for e in &entries {
            if e.end <= e.start {
                return Err(ScheduleError::BadRange { start: e.start, end: e.end });
            }
            if e.start > cursor {
                return Err(ScheduleError::Uncovered { start: cursor, end: e.start });
            }
            if e.start < cursor {
                return Err(ScheduleError::Overlap {
                    start: e.start,
                    end: cursor.min(e.end),
                });
            }
            cursor = e.end;
        }
        Ok(Self { entries })
    }

    /// Validates and also requires the table to end exactly at `total_steps`.
    pub fn covering(entries: Vec<TimetableEntry>, total_steps: usize) -> Result<Self, ScheduleError> {
        let t = Self::new(entries)?;
        if t.total_steps() < total_steps {
            return Err(ScheduleError::Uncovered {
                start: t.total_steps(),
                end: total_steps,
            });
        }
        Ok(t)
    }

    pub fn entries(&self) -> &[TimetableEntry] {
        &self.entries
    }

    pub fn total_steps(&self) -> usize {
        self.entries.last().map_or(0, |e| e.end)
    }

    pub fn phase_at(&self, i_step: usize) -> Option<PhaseAt> {
        let pos = self.entries.partition_point(|e| e.end <= i_step);
        self.entries.get(pos).filter(|e| e.start <= i_step).map(|e| PhaseAt {
            phase: e.phase,
            overlay: e.overlay,
        })
    }

    /// 2800-step schedule: global-adaptive on `[0, 1000)` with the RGB overlay
    /// on `[100, 600)`, fix/free alternating in 100-step blocks on
    /// `[1000, 1900)`, local on `[1900, 2800)`.
    pub fn default_schedule() -> Self {
        let mut entries = vec![
            entry(0, 100, Phase::GlobalAdaptive, false),
            entry(100, 600, Phase::GlobalAdaptive, true),
            entry(600, 1000, Phase::GlobalAdaptive, false),
        ];
        for (k, start) in (1000..1900).step_by(100).enumerate() {
            let phase = if k % 2 == 0 { Phase::GlobalFix } else { Phase::GlobalFree };
            entries.push(entry(start, start + 100, phase, false));
        }
        entries.push(entry(1900, 2800, Phase::Local, false));
        Self::new(entries).expect("default schedule is valid")
    }

    /// One phase over `[0, total_steps)`.
    pub fn uniform(total_steps: usize, phase: Phase, overlay: bool) -> Result<Self, ScheduleError> {
        Self::new(vec![entry(0, total_steps, phase, overlay)])
    }
}

fn entry(start: usize, end: usize, phase: Phase, overlay: bool) -> TimetableEntry {
    TimetableEntry { start, end, phase, overlay }
}

/// Chooses the view for each step.
///
/// Global phases sweep the ordered ring one view per step; `GlobalFree`
/// reshuffles the ring once per sweep from `seed`. Local phases hold one view
/// for `n_opt` steps, then move to its neighbour.
#[derive(Debug, Clone)]
pub struct ViewSchedule {
    order: Vec<usize>,
    n_opt: u64,
    seed: u64,
}

impl ViewSchedule {
    pub fn new(order: Vec<usize>, n_opt: u64, seed: u64) -> Self {
        assert!(!order.is_empty(), "view schedule needs at least one view");
        Self {
            order,
            n_opt: n_opt.max(1),
            seed,
        }
    }

    pub fn n_view(&self) -> u64 {
        self.order.len() as u64
    }

    pub fn view_at(&self, i_step: u64, phase: Phase) -> usize {
        let n = self.n_view();
        match phase {
            Phase::Local | Phase::LocalRgb => self.order[((i_step / self.n_opt) % n) as usize],
            Phase::GlobalAdaptive | Phase::GlobalFix => self.order[(i_step % n) as usize],
            Phase::GlobalFree => {
                let sweep = i_step / n;
                let mut perm = self.order.clone();
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ sweep.wrapping_mul(0x9e37_79b9_7f4a_7c15));
                perm.shuffle(&mut rng);
                perm[(i_step % n) as usize]
            }
        }
    }
}
