//! Asynchronously sampled datasets.
//!
//! Every channel lives on its own grid: channel `i` with sampling factor
//! `r_i` holds `⌊base_len / r_i⌋` samples, the `k`-th taken at fine step
//! `k * r_i`. Window lengths `L` and horizons `H` are expressed on the fine
//! grid and must be multiples of the largest factor so that every channel's
//! slice spans the same absolute interval.

use std::ops::Range;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CtfError, Result};
use crate::rng::rng_from;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub name: String,
    pub factor: usize,
    pub index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Split boundaries on the fine grid; `[0, train_end)`, `[train_end,
/// val_end)`, `[val_end, base_len)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBounds {
    pub train_end: usize,
    pub val_end: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsyncDataset {
    pub channels: Vec<ChannelSpec>,
    pub values: Vec<Vec<f64>>,
    pub observed: Vec<Vec<bool>>,
    pub base_len: usize,
    pub splits: SplitBounds,
    pub stats: NormStats,
    /// Whether `values` are already standardized with `stats`.
    pub normalized: bool,
}

impl AsyncDataset {
    /// Validate per-channel lengths, place split boundaries (rounded down to
    /// multiples of the largest factor) and compute training-split statistics.
    pub fn new(
        channels: Vec<ChannelSpec>,
        values: Vec<Vec<f64>>,
        observed: Vec<Vec<bool>>,
        base_len: usize,
        fractions: SplitFractions,
    ) -> Result<Self> {
        if channels.is_empty() || base_len == 0 {
            return Err(CtfError::InvalidInput("dataset has no channels or no steps".into()));
        }
        if channels.iter().any(|c| c.factor == 0) {
            return Err(CtfError::InvalidInput("sampling factors must be >= 1".into()));
        }
        if !channels.iter().any(|c| c.factor == 1) {
            return Err(CtfError::InvalidInput(
                "at least one channel needs sampling factor 1".into(),
            ));
        }
        if values.len() != channels.len() || observed.len() != channels.len() {
            return Err(CtfError::InvalidInput("channel count mismatch".into()));
        }
        for (i, c) in channels.iter().enumerate() {
            let want = base_len / c.factor;
            if values[i].len() != want || observed[i].len() != want {
                return Err(CtfError::InvalidInput(format!(
                    "channel {} has {} values / {} mask entries, expected {want}",
                    c.name,
                    values[i].len(),
                    observed[i].len()
                )));
            }
        }
        let total = fractions.train + fractions.val + fractions.test;
        if fractions.train <= 0.0
            || fractions.val < 0.0
            || fractions.test < 0.0
            || (total - 1.0).abs() > 1e-9
        {
            return Err(CtfError::InvalidInput(format!(
                "split fractions must be non-negative and sum to 1, got {fractions:?}"
            )));
        }
        let rmax = channels.iter().map(|c| c.factor).max().unwrap();
        let round = |f: f64| ((f * base_len as f64 + 1e-9).floor() as usize / rmax) * rmax;
        let train_end = if fractions.val + fractions.test == 0.0 {
            base_len
        } else {
            round(fractions.train)
        };
        let val_end = if fractions.test == 0.0 {
            base_len
        } else {
            round(fractions.train + fractions.val).max(train_end)
        };
        let mut ds = AsyncDataset {
            channels,
            values,
            observed,
            base_len,
            splits: SplitBounds { train_end, val_end },
            stats: NormStats {
                mean: vec![],
                std: vec![],
            },
            normalized: false,
        };
        ds.stats = ds.training_stats();
        Ok(ds)
    }

    fn training_stats(&self) -> NormStats {
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for (i, c) in self.channels.iter().enumerate() {
            let pts: Vec<f64> = self.values[i]
                .iter()
                .zip(&self.observed[i])
                .enumerate()
                .filter(|(k, (_, &o))| o && k * c.factor < self.splits.train_end)
                .map(|(_, (&v, _))| v)
                .collect();
            let n = pts.len().max(1) as f64;
            let m = pts.iter().sum::<f64>() / n;
            let var = pts.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean.push(m);
            std.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        NormStats { mean, std }
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn factors(&self) -> Vec<usize> {
        self.channels.iter().map(|c| c.factor).collect()
    }

    pub fn max_factor(&self) -> usize {
        self.channels.iter().map(|c| c.factor).max().unwrap_or(1)
    }

    pub fn split_range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => 0..self.splits.train_end,
            Split::Val => self.splits.train_end..self.splits.val_end,
            Split::Test => self.splits.val_end..self.base_len,
        }
    }

    /// Z-score every observed point with the training statistics.
    /// Unobserved points are set to zero.
    pub fn normalized(&self) -> AsyncDataset {
        if self.normalized {
            return self.clone();
        }
        let mut out = self.clone();
        for i in 0..self.n_channels() {
            let (m, s) = (self.stats.mean[i], self.stats.std[i]);
            for (v, &o) in out.values[i].iter_mut().zip(&self.observed[i]) {
                *v = if o { (*v - m) / s } else { 0.0 };
            }
        }
        out.normalized = true;
        out
    }

    pub fn denormalize(&self, channel: usize, v: f64) -> f64 {
        v * self.stats.std[channel] + self.stats.mean[channel]
    }

    pub fn normalize(&self, channel: usize, v: f64) -> f64 {
        (v - self.stats.mean[channel]) / self.stats.std[channel]
    }
}

/// Downsample a regularly sampled dataset. `columns[i]` is channel `i` on the
/// fine grid; channel `i` keeps every `factors[i]`-th point from offset 0.
/// `NaN` entries become unobserved points.
pub fn resample_practical(
    columns: &[Vec<f64>],
    names: &[String],
    factors: &[usize],
    fractions: SplitFractions,
) -> Result<AsyncDataset> {
    if columns.is_empty() || columns[0].is_empty() {
        return Err(CtfError::InvalidInput("empty input matrix".into()));
    }
    if names.len() != columns.len() || factors.len() != columns.len() {
        return Err(CtfError::InvalidInput("names/factors do not match columns".into()));
    }
    let base_len = columns[0].len();
    if columns.iter().any(|c| c.len() != base_len) {
        return Err(CtfError::InvalidInput("ragged input matrix".into()));
    }
    if factors.contains(&0) {
        return Err(CtfError::InvalidInput("sampling factors must be >= 1".into()));
    }
    let mut channels = Vec::new();
    let mut values = Vec::new();
    let mut observed = Vec::new();
    for (i, col) in columns.iter().enumerate() {
        let r = factors[i];
        let picked: Vec<f64> = (0..base_len / r).map(|k| col[k * r]).collect();
        observed.push(picked.iter().map(|v| !v.is_nan()).collect());
        values.push(picked.iter().map(|v| if v.is_nan() { 0.0 } else { *v }).collect());
        channels.push(ChannelSpec {
            name: names[i].clone(),
            factor: r,
            index: i,
        });
    }
    AsyncDataset::new(channels, values, observed, base_len, fractions)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSample {
    /// First fine step covered by the input.
    pub origin: usize,
    pub factors: Vec<usize>,
    pub inputs: Vec<Vec<f64>>,
    pub input_observed: Vec<Vec<bool>>,
    pub targets: Vec<Vec<f64>>,
}

impl WindowSample {
    pub fn n_channels(&self) -> usize {
        self.inputs.len()
    }

    pub fn input_lens(&self) -> Vec<usize> {
        self.inputs.iter().map(Vec::len).collect()
    }

    /// Fine-grid offset (from `origin`) of the first input sample of a channel.
    pub fn phase(&self, channel: usize) -> usize {
        let r = self.factors[channel];
        (r - self.origin % r) % r
    }

    /// Mark everything older than the newest `keep` fine steps unobserved
    /// (zero-filled), emulating a shorter input with unchanged shapes.
    pub fn truncate_to(&self, keep: usize) -> WindowSample {
        let mut out = self.clone();
        for i in 0..self.n_channels() {
            let r = self.factors[i];
            let fine_len = self.inputs[i].len() * r;
            let cut = fine_len.saturating_sub(keep);
            let phase = self.phase(i);
            for (j, (v, o)) in out.inputs[i]
                .iter_mut()
                .zip(out.input_observed[i].iter_mut())
                .enumerate()
            {
                if j * r + phase < cut {
                    *v = 0.0;
                    *o = false;
                }
            }
        }
        out
    }
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Sliding windows inside one split. The test split always steps by the
/// largest sampling factor. Windows with an unobserved target point are
/// skipped so targets are always fully observed.
pub fn make_windows(
    ds: &AsyncDataset,
    input_len: usize,
    horizon: usize,
    stride: usize,
    split: Split,
) -> Result<Vec<WindowSample>> {
    let rmax = ds.max_factor();
    if input_len == 0 || horizon == 0 || !input_len.is_multiple_of(rmax) || !horizon.is_multiple_of(rmax) {
        return Err(CtfError::InvalidInput(format!(
            "input length {input_len} and horizon {horizon} must be positive multiples of {rmax}"
        )));
    }
    if stride == 0 {
        return Err(CtfError::InvalidInput("stride must be >= 1".into()));
    }
    let stride = if split == Split::Test { rmax } else { stride };
    let range = ds.split_range(split);
    let mut out = Vec::new();
    let mut origin = range.start;
    while origin + input_len + horizon <= range.end {
        if let Some(w) = window_at(ds, origin, input_len, horizon) {
            out.push(w);
        }
        origin += stride;
    }
    Ok(out)
}

/// The window starting at fine step `origin`, or `None` when a target point
/// is unobserved.
pub fn window_at(
    ds: &AsyncDataset,
    origin: usize,
    input_len: usize,
    horizon: usize,
) -> Option<WindowSample> {
    let mut w = WindowSample {
        origin,
        factors: ds.factors(),
        inputs: Vec::new(),
        input_observed: Vec::new(),
        targets: Vec::new(),
    };
    for (i, c) in ds.channels.iter().enumerate() {
        let r = c.factor;
        let start = ceil_div(origin, r);
        let (li, hi) = (input_len / r, horizon / r);
        if start + li + hi > ds.values[i].len() {
            return None;
        }
        let tgt = start + li..start + li + hi;
        if !ds.observed[i][tgt.clone()].iter().all(|&o| o) {
            return None;
        }
        w.inputs.push(ds.values[i][start..start + li].to_vec());
        w.input_observed
            .push(ds.observed[i][start..start + li].to_vec());
        w.targets.push(ds.values[i][tgt].to_vec());
    }
    Some(w)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingProtocol {
    /// Blocks of exactly one patch, aligned to the channel's patch grid.
    PatchAligned,
    /// Blocks of 5 to 20 channel steps at arbitrary positions.
    ShortRange,
}

impl std::str::FromStr for MissingProtocol {
    type Err = CtfError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "patch_aligned" => Ok(MissingProtocol::PatchAligned),
            "short_range" => Ok(MissingProtocol::ShortRange),
            other => Err(CtfError::Config(format!("unknown missing protocol `{other}`"))),
        }
    }
}

pub const SHORT_BLOCK_MIN: usize = 5;
pub const SHORT_BLOCK_MAX: usize = 20;

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

/// Patch grid of a channel: `(patch_len, count, dropped)` with the remainder
/// dropped from the oldest end.
pub fn patch_grid(input_len: usize, patch_len: usize) -> (usize, usize, usize) {
    if patch_len == 0 || patch_len >= input_len {
        return (input_len, 1, 0);
    }
    (patch_len, input_len / patch_len, input_len % patch_len)
}

/// Inject block-wise missing intervals into the inputs of a window. Targets
/// are never touched. `patch_lens[i]` is the patch length used for channel
/// `i`; at least one of its patches always stays fully observed.
pub fn inject_block_missing(
    w: &WindowSample,
    protocol: MissingProtocol,
    ratio: f64,
    patch_lens: &[usize],
    seed: u64,
) -> Result<WindowSample> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(CtfError::InvalidInput(format!(
            "missing ratio must lie in [0, 1), got {ratio}"
        )));
    }
    if patch_lens.len() != w.n_channels() {
        return Err(CtfError::InvalidInput("one patch length per channel required".into()));
    }
    let mut out = w.clone();
    if ratio == 0.0 {
        return Ok(out);
    }
    for i in 0..w.n_channels() {
        let li = w.inputs[i].len();
        let (pl, count, dropped) = patch_grid(li, patch_lens[i]);
        let mut rng = rng_from(seed, &[w.origin as u64, i as u64]);
        let mut mask = vec![false; li];
        match protocol {
            MissingProtocol::PatchAligned => {
                let blocks = (ratio * li as f64 / pl as f64).round() as usize;
                if blocks >= count {
                    return Err(CtfError::InvalidInput(format!(
                        "missing ratio {ratio} would mask all {count} patches of channel {i}"
                    )));
                }
                for p in sample(&mut rng, count, blocks).into_iter() {
                    let s = dropped + p * pl;
                    mask[s..s + pl].iter_mut().for_each(|m| *m = true);
                }
            }
            MissingProtocol::ShortRange => {
                let target = ratio * li as f64;
                if target > (li - pl) as f64 {
                    return Err(CtfError::InvalidInput(format!(
                        "missing ratio {ratio} leaves no intact patch in channel {i}"
                    )));
                }
                let survives = |m: &[bool]| {
                    (0..count).any(|p| {
                        let s = dropped + p * pl;
                        m[s..s + pl].iter().all(|&x| !x)
                    })
                };
                let mut masked = 0usize;
                let mut attempts = 0;
                while (masked as f64) < target && attempts < MAX_PLACEMENT_ATTEMPTS {
                    attempts += 1;
                    let len = rng.gen_range(SHORT_BLOCK_MIN..=SHORT_BLOCK_MAX).min(li);
                    let start = rng.gen_range(0..=li - len);
                    let mut trial = mask.clone();
                    trial[start..start + len].iter_mut().for_each(|m| *m = true);
                    if survives(&trial) {
                        mask = trial;
                        masked = mask.iter().filter(|&&m| m).count();
                    }
                }
            }
        }
        for (j, &m) in mask.iter().enumerate() {
            if m {
                out.inputs[i][j] = 0.0;
                out.input_observed[i][j] = false;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FillMethod {
    Linear,
    Forward,
    Zero,
}

/// Dense fine-grid reconstruction of every input channel of a window.
pub fn fill_baseline(w: &WindowSample, method: FillMethod) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(w.n_channels());
    for i in 0..w.n_channels() {
        let r = w.factors[i];
        let phase = w.phase(i);
        let fine_len = w.inputs[i].len() * r;
        let points: Vec<(usize, f64)> = w.inputs[i]
            .iter()
            .zip(&w.input_observed[i])
            .enumerate()
            .filter(|(_, (_, &o))| o)
            .map(|(j, (&v, _))| (j * r + phase, v))
            .filter(|(p, _)| *p < fine_len)
            .collect();
        if points.is_empty() {
            return Err(CtfError::InvalidInput(format!(
                "channel {i} has no observed input point"
            )));
        }
        let mut series = vec![0.0; fine_len];
        match method {
            FillMethod::Zero => {
                for &(p, v) in &points {
                    series[p] = v;
                }
            }
            FillMethod::Forward => {
                let mut next = 0;
                let mut current = points[0].1;
                for (t, s) in series.iter_mut().enumerate() {
                    while next < points.len() && points[next].0 <= t {
                        current = points[next].1;
                        next += 1;
                    }
                    *s = current;
                }
            }
            FillMethod::Linear => {
                let mut seg = 0;
                for (t, s) in series.iter_mut().enumerate() {
                    while seg + 1 < points.len() && points[seg + 1].0 <= t {
                        seg += 1;
                    }
                    let (p0, v0) = points[seg];
                    *s = if t <= p0 {
                        v0
                    } else if let Some(&(p1, v1)) = points.get(seg + 1) {
                        v0 + (v1 - v0) * (t - p0) as f64 / (p1 - p0) as f64
                    } else {
                        v0
                    };
                }
            }
        }
        out.push(series);
    }
    Ok(out)
}

/// Parameters of the seeded coupled-sinusoid generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_channels: usize,
    pub base_len: usize,
    pub factors: Vec<usize>,
    pub coupling: f64,
    pub noise_sd: f64,
    pub seed: u64,
    /// Channel `j` follows channel 0 with a delay of `j * lag` fine steps.
    pub lag: usize,
    /// AR(1) coefficient of the noise; the noise keeps standard deviation
    /// `noise_sd` regardless.
    pub noise_ar: f64,
    /// Periods (fine steps) of the two tones in channel 0.
    pub base_periods: (f64, f64),
    pub fractions: SplitFractions,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_channels: 3,
            base_len: 20_000,
            factors: vec![1, 1, 4],
            coupling: 0.8,
            noise_sd: 0.4,
            seed: 0,
            lag: 8,
            noise_ar: 0.95,
            base_periods: (24.0, 10.0),
            fractions: SplitFractions::default(),
        }
    }
}

/// Periods of each follower channel's own tone.
const OWN_PERIODS: [f64; 6] = [17.0, 31.0, 13.0, 41.0, 7.0, 53.0];

fn ar_noise(rng: &mut impl Rng, len: usize, sd: f64, phi: f64) -> Vec<f64> {
    let innov = sd * (1.0 - phi * phi).max(0.0).sqrt();
    let mut x: f64 = if sd > 0.0 { sd * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
    (0..len)
        .map(|_| {
            let eps: f64 = rng.sample(StandardNormal);
            x = phi * x + innov * eps;
            x
        })
        .collect()
}

/// Channel 0 is two seeded tones plus AR(1) noise; channel `j > 0` is
/// `coupling * x0(t - j*lag) + (1 - coupling) * (own tone + own noise)`,
/// then every channel is subsampled by its factor.
pub fn synth_coupled(cfg: &SynthConfig) -> Result<AsyncDataset> {
    if !(0.0..=1.0).contains(&cfg.coupling) {
        return Err(CtfError::InvalidInput("coupling must lie in [0, 1]".into()));
    }
    if cfg.factors.len() != cfg.n_channels {
        return Err(CtfError::InvalidInput("one factor per channel required".into()));
    }
    let max_lag = cfg.lag * cfg.n_channels.saturating_sub(1);
    let ext = cfg.base_len + max_lag;
    let mut rng = rng_from(cfg.seed, &[0]);
    let two_pi = 2.0 * std::f64::consts::PI;
    let (p1, p2) = cfg.base_periods;
    let ph1: f64 = rng.gen_range(0.0..two_pi);
    let ph2: f64 = rng.gen_range(0.0..two_pi);
    let noise0 = ar_noise(&mut rng, ext, cfg.noise_sd, cfg.noise_ar);
    let base: Vec<f64> = (0..ext)
        .map(|t| {
            let t = t as f64;
            (two_pi * t / p1 + ph1).sin() + 0.5 * (two_pi * t / p2 + ph2).sin()
        })
        .zip(&noise0)
        .map(|(s, n)| s + n)
        .collect();
    // base[max_lag + t] is channel 0 at fine step t
    let mut columns = vec![base[max_lag..].to_vec()];
    for j in 1..cfg.n_channels {
        let mut crng = rng_from(cfg.seed, &[j as u64]);
        let period = OWN_PERIODS[(j - 1) % OWN_PERIODS.len()];
        let phase: f64 = crng.gen_range(0.0..two_pi);
        let noise = ar_noise(&mut crng, cfg.base_len, cfg.noise_sd, cfg.noise_ar);
        let lag = j * cfg.lag;
        columns.push(
            (0..cfg.base_len)
                .map(|t| {
                    let own = (two_pi * t as f64 / period + phase).sin() + noise[t];
                    cfg.coupling * base[max_lag + t - lag] + (1.0 - cfg.coupling) * own
                })
                .collect(),
        );
    }
    let names: Vec<String> = (0..cfg.n_channels).map(|j| format!("ch{j}")).collect();
    resample_practical(&columns, &names, &cfg.factors, cfg.fractions)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_dataset(base_len: usize, factors: &[usize], fractions: SplitFractions) -> AsyncDataset {
        let cols: Vec<Vec<f64>> = factors
            .iter()
            .enumerate()
            .map(|(i, _)| (0..base_len).map(|t| (t * (i + 1)) as f64).collect())
            .collect();
        let names: Vec<String> = (0..factors.len()).map(|i| format!("c{i}")).collect();
        resample_practical(&cols, &names, factors, fractions).unwrap()
    }

    #[test]
    fn resample_keeps_strided_points() {
        let ds = ramp_dataset(8, &[1, 4], SplitFractions::default());
        assert_eq!(ds.values[0].len(), 8);
        assert_eq!(ds.values[1], vec![0.0, 8.0]);
        assert!(ds.observed.iter().flatten().all(|&o| o));
        assert!(resample_practical(&[], &[], &[], SplitFractions::default()).is_err());
    }

    #[test]
    fn resample_identity_for_unit_factors() {
        let cols = vec![vec![1.5, -2.0, 3.25], vec![0.0, 7.0, 1.0]];
        let names = vec!["a".to_string(), "b".to_string()];
        let ds = resample_practical(&cols, &names, &[1, 1], SplitFractions::default()).unwrap();
        assert_eq!(ds.values, cols);
    }

    #[test]
    fn stats_use_training_split_only() {
        let cols = vec![vec![1.0, 3.0, 100.0, 100.0]];
        let names = vec!["a".to_string()];
        let fr = SplitFractions {
            train: 0.5,
            val: 0.25,
            test: 0.25,
        };
        let ds = resample_practical(&cols, &names, &[1], fr).unwrap();
        assert_eq!(ds.stats.mean, vec![2.0]);
        assert_eq!(ds.stats.std, vec![1.0]);
    }

    #[test]
    fn normalization_round_trip() {
        let ds = synth_coupled(&SynthConfig {
            base_len: 400,
            ..SynthConfig::default()
        })
        .unwrap();
        let n = ds.normalized();
        for i in 0..ds.n_channels() {
            for (k, &v) in ds.values[i].iter().enumerate() {
                assert!((n.denormalize(i, n.values[i][k]) - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn window_lengths_follow_factors() {
        let fr = SplitFractions {
            train: 1.0,
            val: 0.0,
            test: 0.0,
        };
        let ds = ramp_dataset(2000, &[1, 4], fr);
        let ws = make_windows(&ds, 192, 336, 1, Split::Train).unwrap();
        assert_eq!(ws[0].inputs[0].len(), 192);
        assert_eq!(ws[0].targets[0].len(), 336);
        assert_eq!(ws[0].inputs[1].len(), 48);
        assert_eq!(ws[0].targets[1].len(), 84);
    }

    #[test]
    fn window_count_matches_enumeration() {
        let fr = SplitFractions {
            train: 1.0,
            val: 0.0,
            test: 0.0,
        };
        let ds = ramp_dataset(1000, &[1], fr);
        let ws = make_windows(&ds, 192, 192, 1, Split::Train).unwrap();
        let enumerated = (0..1000).filter(|o| o + 192 + 192 <= 1000).count();
        assert_eq!(enumerated, 617);
        assert_eq!(ws.len(), enumerated);
        assert!(make_windows(&ds, 800, 400, 1, Split::Train).unwrap().is_empty());
    }

    #[test]
    fn windows_cover_the_same_span() {
        let ds = ramp_dataset(400, &[1, 4], SplitFractions::default());
        for w in make_windows(&ds, 16, 8, 1, Split::Train).unwrap() {
            // channel 1 stores 2t at fine step t
            let first_fine = w.inputs[1][0] / 2.0;
            assert!(first_fine >= w.origin as f64 && first_fine < (w.origin + 4) as f64);
            assert_eq!(w.inputs[1].len() * 4, 16);
        }
    }

    #[test]
    fn test_split_stride_is_max_factor() {
        let ds = ramp_dataset(400, &[1, 4], SplitFractions::default());
        let ws = make_windows(&ds, 16, 8, 1, Split::Test).unwrap();
        assert!(ws.len() > 2);
        for pair in ws.windows(2) {
            assert_eq!(pair[1].origin - pair[0].origin, 4);
        }
    }

    #[test]
    fn misaligned_lengths_rejected() {
        let ds = ramp_dataset(400, &[1, 4], SplitFractions::default());
        assert!(make_windows(&ds, 18, 8, 1, Split::Train).is_err());
        assert!(make_windows(&ds, 16, 8, 0, Split::Train).is_err());
    }

    fn plain_window(li: usize) -> WindowSample {
        WindowSample {
            origin: 0,
            factors: vec![1],
            inputs: vec![(0..li).map(|v| v as f64 + 1.0).collect()],
            input_observed: vec![vec![true; li]],
            targets: vec![vec![9.0; 4]],
        }
    }

    #[test]
    fn zero_ratio_is_identity() {
        let w = plain_window(48);
        let out = inject_block_missing(&w, MissingProtocol::PatchAligned, 0.0, &[12], 1).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn patch_aligned_masks_whole_patches() {
        let w = plain_window(48);
        for seed in 0..20 {
            let out =
                inject_block_missing(&w, MissingProtocol::PatchAligned, 0.5, &[12], seed).unwrap();
            let full: Vec<bool> = out.input_observed[0]
                .chunks(12)
                .map(|c| c.iter().all(|&o| !o))
                .collect();
            assert_eq!(full.iter().filter(|&&f| f).count(), 2);
            // the other patches are untouched
            for (p, chunk) in out.input_observed[0].chunks(12).enumerate() {
                assert!(full[p] || chunk.iter().all(|&o| o));
            }
            assert_eq!(out.targets, w.targets);
        }
        assert!(inject_block_missing(&w, MissingProtocol::PatchAligned, 0.9, &[12], 0).is_err());
    }

    #[test]
    fn short_range_blocks_and_survival() {
        let w = plain_window(96);
        let base = inject_block_missing(&w, MissingProtocol::ShortRange, 0.0, &[24], 0).unwrap();
        assert_eq!(base, w);
        for seed in 0..30 {
            let out =
                inject_block_missing(&w, MissingProtocol::ShortRange, 0.25, &[24], seed).unwrap();
            let obs = &out.input_observed[0];
            let masked = obs.iter().filter(|&&o| !o).count();
            assert!(masked as f64 >= 0.25 * 96.0);
            assert!((masked as f64) < 0.25 * 96.0 + SHORT_BLOCK_MAX as f64);
            assert!(obs.chunks(24).any(|c| c.iter().all(|&o| o)));
            // runs of missing points are at least one minimal block long
            let mut run = 0;
            for &o in obs.iter().chain([true].iter()) {
                if !o {
                    run += 1;
                } else {
                    assert!(run == 0 || run >= SHORT_BLOCK_MIN);
                    run = 0;
                }
            }
            for (j, &o) in obs.iter().enumerate() {
                if !o {
                    assert_eq!(out.inputs[0][j], 0.0);
                }
            }
            assert_eq!(out.targets, w.targets);
        }
        assert!(inject_block_missing(&w, MissingProtocol::ShortRange, 0.8, &[24], 0).is_err());
    }

    #[test]
    fn fill_rules() {
        let w = WindowSample {
            origin: 0,
            factors: vec![1],
            inputs: vec![vec![1.0, 0.0, 0.0, 5.0]],
            input_observed: vec![vec![true, false, false, true]],
            targets: vec![vec![0.0]],
        };
        let lin = fill_baseline(&w, FillMethod::Linear).unwrap();
        let want = [1.0, 7.0 / 3.0, 11.0 / 3.0, 5.0];
        for (a, b) in lin[0].iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(fill_baseline(&w, FillMethod::Forward).unwrap()[0], vec![1., 1., 1., 5.]);
        assert_eq!(fill_baseline(&w, FillMethod::Zero).unwrap()[0], vec![1., 0., 0., 5.]);
        let mut empty = w.clone();
        empty.input_observed[0] = vec![false; 4];
        assert!(fill_baseline(&empty, FillMethod::Linear).is_err());
    }

    #[test]
    fn fill_places_coarse_samples_on_fine_grid() {
        let w = WindowSample {
            origin: 2,
            factors: vec![4],
            inputs: vec![vec![4.0, 8.0]],
            input_observed: vec![vec![true, true]],
            targets: vec![vec![0.0]],
        };
        // samples sit at fine offsets 2 and 6
        let lin = fill_baseline(&w, FillMethod::Linear).unwrap();
        assert_eq!(lin[0], vec![4.0, 4.0, 4.0, 5.0, 6.0, 7.0, 8.0, 8.0]);
    }

    #[test]
    fn truncation_masks_oldest_points() {
        let w = WindowSample {
            origin: 0,
            factors: vec![1, 4],
            inputs: vec![vec![1.0; 8], vec![1.0; 2]],
            input_observed: vec![vec![true; 8], vec![true; 2]],
            targets: vec![vec![0.0; 4], vec![0.0]],
        };
        let t = w.truncate_to(4);
        assert_eq!(t.input_observed[0], [false, false, false, false, true, true, true, true]);
        assert_eq!(t.input_observed[1], [false, true]);
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn uncoupled_channels_are_uncorrelated() {
        let ds = synth_coupled(&SynthConfig {
            base_len: 10_000,
            factors: vec![1, 1, 1],
            coupling: 0.0,
            ..SynthConfig::default()
        })
        .unwrap();
        assert!(correlation(&ds.values[0], &ds.values[1]).abs() < 0.1);
        assert!(correlation(&ds.values[0], &ds.values[2]).abs() < 0.1);
    }

    #[test]
    fn fully_coupled_noise_free_channel_is_a_lagged_copy() {
        let cfg = SynthConfig {
            base_len: 500,
            factors: vec![1, 1, 1],
            coupling: 1.0,
            noise_sd: 0.0,
            ..SynthConfig::default()
        };
        let ds = synth_coupled(&cfg).unwrap();
        for j in 1..3 {
            let lag = j * cfg.lag;
            for t in lag..500 {
                assert_eq!(ds.values[j][t], ds.values[0][t - lag]);
            }
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = SynthConfig {
            base_len: 2000,
            seed: 42,
            ..SynthConfig::default()
        };
        assert_eq!(synth_coupled(&cfg).unwrap(), synth_coupled(&cfg).unwrap());
        let other = SynthConfig { seed: 43, ..cfg.clone() };
        assert_ne!(synth_coupled(&cfg).unwrap(), synth_coupled(&other).unwrap());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn injection_preserves_targets_and_bounds_fraction(
                seed in 0u64..1000,
                ratio in 0.0f64..0.6,
                origin in 0usize..64,
            ) {
                let w = WindowSample {
                    origin,
                    factors: vec![1, 2],
                    inputs: vec![vec![1.0; 96], vec![2.0; 48]],
                    input_observed: vec![vec![true; 96], vec![true; 48]],
                    targets: vec![vec![3.0; 8], vec![4.0; 4]],
                };
                for protocol in [MissingProtocol::PatchAligned, MissingProtocol::ShortRange] {
                    let out = inject_block_missing(&w, protocol, ratio, &[12, 6], seed).unwrap();
                    prop_assert_eq!(&out.targets, &w.targets);
                    for (i, pl) in [(0usize, 12usize), (1, 6)] {
                        let li = w.inputs[i].len() as f64;
                        let masked = out.input_observed[i].iter().filter(|&&o| !o).count() as f64;
                        let block = match protocol {
                            MissingProtocol::PatchAligned => pl as f64,
                            MissingProtocol::ShortRange => SHORT_BLOCK_MAX as f64,
                        };
                        prop_assert!((masked - ratio * li).abs() <= block);
                    }
                }
            }
        }
    }
}
