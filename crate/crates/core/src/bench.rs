//! Latency and memory sweeps over memory policies and video lengths.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{MemoryPolicy, MemoryStats, EVAL_DELTA};
use crate::segmenter::{Segmenter, SegmenterConfig, Tracker};
use crate::synthgen::{generate, random_script, Frame, SceneKind, SceneRecipe};
use crate::tensor::{Precision, Scalar};

pub const CSV_HEADER: &str = "policy,video_length,frame_index,tokens_stored,logical_bytes,ms_per_frame";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub policies: Vec<MemoryPolicy>,
    pub lengths: Vec<usize>,
    pub delta: usize,
    pub grid: usize,
    pub stride: usize,
    pub dim: usize,
    pub levels: usize,
    pub precision: Precision,
    /// Untimed rounds over the sampled frames before the timed repetitions.
    pub warmup: usize,
    pub repetitions: usize,
    /// Frames `t` with `t % sample_every == 0` are timed and reported.
    pub sample_every: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let model = SegmenterConfig::default();
        Self {
            policies: vec![MemoryPolicy::Mca, MemoryPolicy::FullBank],
            lengths: vec![2000],
            delta: EVAL_DELTA,
            grid: model.grid,
            stride: model.stride,
            dim: model.dim,
            levels: model.levels,
            precision: Precision::F64,
            warmup: 1,
            repetitions: 5,
            sample_every: 100,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() || self.lengths.contains(&0) {
            return Err(Error::Validation("lengths must be a nonempty list of positive counts".into()));
        }
        if self.policies.is_empty() {
            return Err(Error::Validation("at least one policy is required".into()));
        }
        if self.repetitions == 0 || self.sample_every == 0 || self.delta == 0 {
            return Err(Error::Validation("repetitions, sample_every and delta must be >= 1".into()));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> SegmenterConfig {
        SegmenterConfig {
            grid: self.grid,
            stride: self.stride,
            dim: self.dim,
            levels: self.levels,
            ..SegmenterConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub policy: MemoryPolicy,
    pub video_length: usize,
    pub frame_index: usize,
    pub tokens_stored: usize,
    pub logical_bytes: usize,
    /// Median over repetitions, rounded to 4 decimals.
    pub ms_per_frame: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

/// Streams one synthetic video per (policy, length) with fixed random weights.
pub fn run(cfg: &BenchConfig, on_row: impl FnMut(&BenchRow)) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg, on_row),
        Precision::F64 => run_typed::<f64>(cfg, on_row),
    }
}

fn run_typed<T: Scalar>(cfg: &BenchConfig, mut on_row: impl FnMut(&BenchRow)) -> Result<Vec<BenchRow>> {
    let model = Segmenter::<T>::init(cfg.model_config(), cfg.seed)?;
    let mut rows = Vec::new();
    for &policy in &cfg.policies {
        for &length in &cfg.lengths {
            let recipe = SceneRecipe::new("bench", length.max(2), 2, SceneKind::Plain).with_grid(cfg.grid);
            let video = generate(&random_script(&recipe, cfg.seed))?;
            let mut tracker = Tracker::new(&model, policy, cfg.delta)?;
            tracker.reset(&video.frames[0], &video.masks[0])?;
            let mut batch = Vec::new();
            for t in 1..length {
                if t % cfg.sample_every == 0 {
                    batch.push(Sample { frame_index: t, before: tracker.clone(), after: None });
                }
                tracker.step(&video.frames[t])?;
                if let Some(s) = batch.last_mut().filter(|s| s.frame_index == t) {
                    s.after = tracker.memory_stats();
                }
                if batch.len() == TIMING_BATCH || (t + 1 == length && !batch.is_empty()) {
                    for (sample, ms) in batch.iter().zip(time_batch(cfg, &batch, &video.frames)?) {
                        let stats = sample.after.as_ref().expect("tracker was reset");
                        let row = BenchRow {
                            policy,
                            video_length: length,
                            frame_index: sample.frame_index,
                            tokens_stored: stats.token_count,
                            logical_bytes: stats.logical_bytes,
                            ms_per_frame: round4(ms),
                        };
                        on_row(&row);
                        rows.push(row);
                    }
                    batch.clear();
                }
            }
        }
    }
    Ok(rows)
}

/// Most tracker snapshots held at once while timing.
const TIMING_BATCH: usize = 256;

struct Sample<T: Scalar> {
    frame_index: usize,
    /// Tracker state just before the sampled frame.
    before: Tracker<T>,
    after: Option<MemoryStats>,
}

/// Median step time per sample. Samples are visited in rounds, alternating
/// direction, so slow drift in machine speed is shared by every frame index
/// instead of showing up as a trend along the stream.
fn time_batch<T: Scalar>(cfg: &BenchConfig, batch: &[Sample<T>], frames: &[Frame]) -> Result<Vec<f64>> {
    let mut times = vec![Vec::with_capacity(cfg.repetitions); batch.len()];
    for round in 0..cfg.warmup + cfg.repetitions {
        let order: Vec<usize> = if round % 2 == 0 {
            (0..batch.len()).collect()
        } else {
            (0..batch.len()).rev().collect()
        };
        for i in order {
            let mut probe = batch[i].before.clone();
            let frame = &frames[batch[i].frame_index];
            let start = Instant::now();
            probe.step(frame)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            if round >= cfg.warmup {
                times[i].push(ms);
            }
        }
    }
    Ok(times.into_iter().map(median).collect())
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.4}",
            r.policy, r.video_length, r.frame_index, r.tokens_stored, r.logical_bytes, r.ms_per_frame
        );
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<BenchRow>> {
    let mut lines = text.split('\n');
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Validation("bench csv header mismatch".into()));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Validation(format!("bench csv line {}: bad {what}", i + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad("field count"));
        }
        rows.push(BenchRow {
            policy: f[0].parse()?,
            video_length: f[1].parse().map_err(|_| bad("video_length"))?,
            frame_index: f[2].parse().map_err(|_| bad("frame_index"))?,
            tokens_stored: f[3].parse().map_err(|_| bad("tokens_stored"))?,
            logical_bytes: f[4].parse().map_err(|_| bad("logical_bytes"))?,
            ms_per_frame: f[5].parse().map_err(|_| bad("ms_per_frame"))?,
        });
    }
    Ok(rows)
}

/// Least-squares slope of `y` against `x`.
pub fn slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Whether latency over frames `[from, to]` is flat: `|slope| * to < 0.2 * median`.
pub fn is_flat(rows: &[BenchRow], from: usize, to: usize) -> (bool, f64, f64) {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.frame_index >= from && r.frame_index <= to)
        .map(|r| (r.frame_index as f64, r.ms_per_frame))
        .collect();
    let s = slope(&pts);
    let m = median(pts.iter().map(|p| p.1).collect());
    let last = to as f64;
    (s.abs() * last < 0.2 * m, s, m)
}
