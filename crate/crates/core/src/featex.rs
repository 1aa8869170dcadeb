//! Windowed frame samples for app recognition and per-second burst
//! statistics for action recognition.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace_model::{Direction, FrameMeta, TrafficTrace};

pub const MAX_FRAME_BYTES: f64 = 1500.0;
pub const APP_CHANNELS: usize = 3;
pub const BURST_FEATURES: usize = 22;
/// Sub-bins per burst used for the frame-rate moments.
pub const RATE_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceKind {
    #[default]
    Population,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KurtosisKind {
    #[default]
    Excess,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConventions {
    pub variance: VarianceKind,
    pub kurtosis: KurtosisKind,
}

/// One-second slice of a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Burst {
    pub index: usize,
    pub start: f64,
    /// Frame indices into the trace.
    pub range: Range<usize>,
}

/// Splits a trace into `floor(duration) + 1` consecutive one-second bursts
/// starting at the first frame. Empty bursts are kept.
pub fn burstify(trace: &TrafficTrace) -> Vec<Burst> {
    let frames = trace.frames();
    if frames.is_empty() {
        return Vec::new();
    }
    let t1 = trace.start_time();
    let n = trace.duration().floor() as usize + 1;
    let mut bursts = Vec::with_capacity(n);
    let mut lo = 0usize;
    for i in 0..n {
        let mut hi = lo;
        while hi < frames.len() && (i == n - 1 || bin_of(frames[hi].t, t1, n) == i) {
            hi += 1;
        }
        bursts.push(Burst {
            index: i,
            start: t1 + i as f64,
            range: lo..hi,
        });
        lo = hi;
    }
    bursts
}

fn bin_of(t: f64, t1: f64, n: usize) -> usize {
    ((t - t1).floor().max(0.0) as usize).min(n - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurstFeatures {
    pub index: usize,
    pub start: f64,
    /// `p[0]` is p1 and so on.
    pub p: [f64; BURST_FEATURES],
}

impl BurstFeatures {
    pub fn get(&self, tag: usize) -> f64 {
        self.p[tag - 1]
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn variance(xs: &[f64], kind: VarianceKind) -> f64 {
    let n = xs.len();
    let denom = match kind {
        VarianceKind::Population => n,
        VarianceKind::Sample => n.saturating_sub(1),
    };
    if denom == 0 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / denom as f64
}

fn mean_gap(times: &[f64]) -> f64 {
    if times.len() < 2 {
        0.0
    } else {
        (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64
    }
}

/// Mean and variance of the low 20%, mid 60% and high 20% size groups.
fn group_stats(sizes: &mut [f64], kind: VarianceKind) -> [(f64, f64); 3] {
    sizes.sort_by(f64::total_cmp);
    let n = sizes.len();
    let lo = n / 5;
    let hi = 4 * n / 5;
    let g = |s: &[f64]| (mean(s), variance(s, kind));
    [g(&sizes[..lo]), g(&sizes[lo..hi]), g(&sizes[hi..])]
}

fn rate_moments(frames: &[FrameMeta], start: f64, conv: FeatureConventions) -> (f64, f64) {
    let mut counts = [0f64; RATE_BINS];
    for f in frames {
        let b = (((f.t - start) * RATE_BINS as f64).floor().max(0.0) as usize).min(RATE_BINS - 1);
        counts[b] += 1.0;
    }
    let m = mean(&counts);
    let m2 = counts.iter().map(|c| (c - m).powi(2)).sum::<f64>() / RATE_BINS as f64;
    if m2 <= 0.0 {
        return (0.0, 0.0);
    }
    let m3 = counts.iter().map(|c| (c - m).powi(3)).sum::<f64>() / RATE_BINS as f64;
    let m4 = counts.iter().map(|c| (c - m).powi(4)).sum::<f64>() / RATE_BINS as f64;
    let raw = m4 / (m2 * m2);
    let kurt = match conv.kurtosis {
        KurtosisKind::Excess => raw - 3.0,
        KurtosisKind::Raw => raw,
    };
    (kurt, m3 / m2.powf(1.5))
}

pub fn burst_features(frames: &[FrameMeta], start: f64) -> [f64; BURST_FEATURES] {
    burst_features_with(frames, start, FeatureConventions::default())
}

pub fn burst_features_with(frames: &[FrameMeta], start: f64, conv: FeatureConventions) -> [f64; BURST_FEATURES] {
    let mut p = [0f64; BURST_FEATURES];
    if frames.is_empty() {
        return p;
    }
    let sizes: Vec<f64> = frames.iter().map(|f| f.size as f64).collect();
    let times: Vec<f64> = frames.iter().map(|f| f.t).collect();
    let (mut up, mut down) = (Vec::new(), Vec::new());
    let (mut up_t, mut down_t) = (Vec::new(), Vec::new());
    for f in frames {
        match f.dir {
            Direction::Uplink => {
                up.push(f.size as f64);
                up_t.push(f.t);
            }
            Direction::Downlink => {
                down.push(f.size as f64);
                down_t.push(f.t);
            }
        }
    }
    p[0] = frames.len() as f64;
    p[1] = mean(&sizes);
    p[2] = mean_gap(&times);
    p[3] = up.len() as f64 / frames.len() as f64;
    let (kurt, skew) = rate_moments(frames, start, conv);
    p[4] = kurt;
    p[5] = skew;
    p[6] = mean(&up);
    let g = group_stats(&mut up, conv.variance);
    for k in 0..3 {
        p[7 + k] = g[k].0;
        p[10 + k] = g[k].1;
    }
    p[13] = mean_gap(&up_t);
    p[14] = mean(&down);
    let g = group_stats(&mut down, conv.variance);
    for k in 0..3 {
        p[15 + k] = g[k].0;
        p[18 + k] = g[k].1;
    }
    p[21] = mean_gap(&down_t);
    p
}

/// Features of every burst of a trace.
pub fn trace_burst_features(trace: &TrafficTrace, conv: FeatureConventions) -> Vec<BurstFeatures> {
    burstify(trace)
        .into_iter()
        .map(|b| BurstFeatures {
            index: b.index,
            start: b.start,
            p: burst_features_with(&trace.frames()[b.range], b.start, conv),
        })
        .collect()
}

/// `W_s` rows of (normalized gap, normalized size, direction) centered on a frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppSample {
    pub window: usize,
    /// Row-major `window × APP_CHANNELS`.
    pub data: Vec<f64>,
    pub center_index: usize,
    pub center_time: f64,
}

/// Nearest odd window not below `w`, with a flag telling whether it changed.
pub fn effective_window(w: usize) -> (usize, bool) {
    if w % 2 == 1 {
        (w, false)
    } else {
        (w + 1, true)
    }
}

fn check_window(w: usize) -> Result<()> {
    if w < 3 || w % 2 == 0 {
        return Err(Error::InvalidArgument(format!("window must be odd and at least 3, got {w}")));
    }
    Ok(())
}

/// Per-frame channels before windowing.
pub fn frame_channels(frames: &[FrameMeta]) -> Vec<[f64; APP_CHANNELS]> {
    frames
        .iter()
        .enumerate()
        .map(|(m, f)| {
            let dt = if m == 0 { 0.0 } else { (f.t - frames[m - 1].t).min(1.0) };
            [dt, f.size as f64 / MAX_FRAME_BYTES, f.dir.sign()]
        })
        .collect()
}

fn app_window(channels: &[[f64; APP_CHANNELS]], m: usize, w: usize) -> Vec<f64> {
    let half = (w / 2) as isize;
    let last = channels.len() as isize - 1;
    let mut data = Vec::with_capacity(w * APP_CHANNELS);
    for off in -half..=half {
        let i = (m as isize + off).clamp(0, last) as usize;
        data.extend_from_slice(&channels[i]);
    }
    data
}

pub fn extract_app_samples(trace: &TrafficTrace, w: usize) -> Result<Vec<AppSample>> {
    extract_app_samples_at(trace, w, 0..trace.len())
}

/// Samples centered only at the given frame indices.
pub fn extract_app_samples_at(
    trace: &TrafficTrace,
    w: usize,
    centers: impl IntoIterator<Item = usize>,
) -> Result<Vec<AppSample>> {
    check_window(w)?;
    let channels = frame_channels(trace.frames());
    centers
        .into_iter()
        .map(|m| {
            if m >= channels.len() {
                return Err(Error::IndexOutOfRange { index: m, dims: channels.len() });
            }
            Ok(AppSample {
                window: w,
                data: app_window(&channels, m, w),
                center_index: m,
                center_time: trace.frames()[m].t,
            })
        })
        .collect()
}

/// Per-column standardization fit on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const SCALE_EPS: f64 = 1e-12;

impl StandardScaler {
    pub fn identity(dims: usize) -> Self {
        StandardScaler { mean: vec![0.0; dims], std: vec![1.0; dims] }
    }

    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut collected: Vec<&[f64]> = Vec::new();
        for r in rows {
            if n == 0 {
                sum = vec![0.0; r.len()];
                sq = vec![0.0; r.len()];
            } else if r.len() != sum.len() {
                return Err(Error::shape(sum.len(), r.len()));
            }
            for (s, x) in sum.iter_mut().zip(r) {
                *s += x;
            }
            collected.push(r);
            n += 1;
        }
        if n == 0 {
            return Err(Error::InvalidArgument("cannot fit a scaler on zero rows".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        for r in &collected {
            for ((q, x), m) in sq.iter_mut().zip(r.iter()).zip(&mean) {
                *q += (x - m) * (x - m);
            }
        }
        let std = sq.iter().map(|q| (q / n as f64).sqrt()).collect();
        Ok(StandardScaler { mean, std })
    }

    pub fn dims(&self) -> usize {
        self.mean.len()
    }

    pub fn transform_row(&self, row: &[f64], out: &mut Vec<f64>) {
        for ((x, m), s) in row.iter().zip(&self.mean).zip(&self.std) {
            out.push(if *s > SCALE_EPS { (x - m) / s } else { 0.0 });
        }
    }
}

/// `W_a` standardized burst rows centered on one burst.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSample {
    pub window: usize,
    /// Row-major `window × BURST_FEATURES`.
    pub data: Vec<f64>,
    pub center_index: usize,
}

pub fn extract_action_samples(
    features: &[BurstFeatures],
    w: usize,
    scaler: &StandardScaler,
) -> Result<Vec<ActionSample>> {
    check_window(w)?;
    if scaler.dims() != BURST_FEATURES {
        return Err(Error::shape(BURST_FEATURES, scaler.dims()));
    }
    if features.is_empty() {
        return Ok(Vec::new());
    }
    let rows: Vec<Vec<f64>> = features
        .iter()
        .map(|f| {
            let mut v = Vec::with_capacity(BURST_FEATURES);
            scaler.transform_row(&f.p, &mut v);
            v
        })
        .collect();
    let half = (w / 2) as isize;
    let last = rows.len() as isize - 1;
    Ok((0..rows.len())
        .map(|n| {
            let mut data = Vec::with_capacity(w * BURST_FEATURES);
            for off in -half..=half {
                data.extend_from_slice(&rows[(n as isize + off).clamp(0, last) as usize]);
            }
            ActionSample { window: w, data, center_index: n }
        })
        .collect())
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for it in items {
        serde_json::to_writer(&mut out, it)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Gaussian kernel density on an evenly spaced grid, Silverman bandwidth.
pub fn kde_points(values: &[f64], grid: usize) -> Vec<(f64, f64)> {
    if values.is_empty() || grid == 0 {
        return Vec::new();
    }
    let n = values.len() as f64;
    let sd = variance(values, VarianceKind::Sample).sqrt();
    let bw = if sd > 0.0 { 1.06 * sd * n.powf(-0.2) } else { 1.0 };
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min) - 3.0 * bw;
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 3.0 * bw;
    let norm = 1.0 / (n * bw * (2.0 * std::f64::consts::PI).sqrt());
    (0..grid)
        .map(|i| {
            let x = if grid == 1 { (lo + hi) / 2.0 } else { lo + (hi - lo) * i as f64 / (grid - 1) as f64 };
            let d = values.iter().map(|v| (-0.5 * ((x - v) / bw).powi(2)).exp()).sum::<f64>() * norm;
            (x, d)
        })
        .collect()
}

/// CSV rows `feature,action,x,density` for the given feature tags.
pub fn kde_csv(features: &[(usize, &BurstFeatures)], tags: &[usize], grid: usize) -> String {
    let mut out = String::from("feature,action,x,density\n");
    let mut actions: Vec<usize> = features.iter().map(|(a, _)| *a).collect();
    actions.sort_unstable();
    actions.dedup();
    for &tag in tags {
        for &a in &actions {
            let vals: Vec<f64> = features.iter().filter(|(x, _)| *x == a).map(|(_, f)| f.get(tag)).collect();
            for (x, d) in kde_points(&vals, grid) {
                out.push_str(&format!("p{tag},{a},{x},{d}\n"));
            }
        }
    }
    out
}
