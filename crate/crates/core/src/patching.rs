//! Frequency-based patch planning and tokenization.
//!
//! Each channel's input is cut into non-overlapping patches whose length
//! follows the channel's dominant period (or, failing that, its sampling
//! factor). The leftover `L_i mod ℓ_i` points are dropped from the oldest end
//! so the newest patch always ends on the newest observation.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::{make_windows, patch_grid, AsyncDataset, Split, WindowSample};
use crate::error::{CtfError, Result};
use crate::params::ParamStore;
use crate::spectral::{dominant_bin, exact_spectrum, zero_centered};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_BASE_PATCH_LEN: usize = 24;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchPlan {
    pub input_lens: Vec<usize>,
    pub lens: Vec<usize>,
    pub counts: Vec<usize>,
    pub dropped: Vec<usize>,
}

impl PatchPlan {
    pub fn from_lens(input_lens: &[usize], lens: &[usize]) -> Result<Self> {
        if input_lens.len() != lens.len() {
            return Err(CtfError::InvalidInput("one patch length per channel required".into()));
        }
        let mut plan = PatchPlan {
            input_lens: input_lens.to_vec(),
            lens: Vec::new(),
            counts: Vec::new(),
            dropped: Vec::new(),
        };
        for (&li, &pl) in input_lens.iter().zip(lens) {
            if li == 0 || pl == 0 {
                return Err(CtfError::InvalidInput("zero-length channel or patch".into()));
            }
            let (pl, p, d) = patch_grid(li, pl);
            plan.lens.push(pl);
            plan.counts.push(p);
            plan.dropped.push(d);
        }
        Ok(plan)
    }

    pub fn n_channels(&self) -> usize {
        self.lens.len()
    }

    pub fn max_patches(&self) -> usize {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    /// Distinct patch lengths in ascending order.
    pub fn distinct_lens(&self) -> Vec<usize> {
        let mut v = self.lens.clone();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn check_window(&self, w: &WindowSample) -> Result<()> {
        if w.input_lens() != self.input_lens {
            return Err(CtfError::InvalidInput(format!(
                "window input lengths {:?} do not match the patch plan {:?}",
                w.input_lens(),
                self.input_lens
            )));
        }
        Ok(())
    }
}

/// Patch length for one channel. `cycles` is the dominant number of cycles
/// per input window, if one was detected.
pub fn select_patch_len(input_len: usize, cycles: Option<usize>, factor: usize, base: usize) -> usize {
    if input_len < 4 {
        return input_len;
    }
    let raw = match cycles {
        Some(f) if f > 0 => input_len / f,
        _ => (base as f64 / factor.max(1) as f64).round() as usize,
    };
    raw.clamp(2, input_len / 2)
}

/// Mean zero-centered amplitude spectrum (bins `0..=n/2`) over equal-length
/// sequences.
fn mean_amplitudes<'a>(series: impl Iterator<Item = &'a [f64]>) -> Result<Vec<f64>> {
    let mut acc: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for x in series {
        let spec = exact_spectrum(&zero_centered(x))?;
        let amps: Vec<f64> = spec[..=x.len() / 2].iter().map(|c| c.norm()).collect();
        if acc.is_empty() {
            acc = amps;
        } else {
            acc.iter_mut().zip(&amps).for_each(|(a, b)| *a += b);
        }
        count += 1;
    }
    acc.iter_mut().for_each(|a| *a /= count.max(1) as f64);
    Ok(acc)
}

fn dominant_cycles(series: &[&[f64]], kappa: f64) -> Result<Option<usize>> {
    let n = series[0].len();
    if n < 4 {
        return Ok(None);
    }
    let amps = mean_amplitudes(series.iter().copied())?;
    let scale = series
        .iter()
        .flat_map(|x| x.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-300);
    if amps.iter().skip(1).all(|&a| a <= 1e-12 * scale * n as f64) {
        return Ok(None);
    }
    Ok(dominant_bin(&amps, kappa))
}

/// Plan from the averaged spectrum of several windows (one window gives the
/// per-window rule).
pub fn plan_from_windows(windows: &[WindowSample], kappa: f64, base: usize) -> Result<PatchPlan> {
    let first = windows
        .first()
        .ok_or_else(|| CtfError::InvalidInput("no windows to plan patches from".into()))?;
    let input_lens = first.input_lens();
    if input_lens.iter().any(|&l| l < 2) {
        return Err(CtfError::InvalidInput("every channel needs at least 2 input points".into()));
    }
    let mut lens = Vec::new();
    for (i, &li) in input_lens.iter().enumerate() {
        let series: Vec<&[f64]> = windows.iter().map(|w| w.inputs[i].as_slice()).collect();
        let cycles = dominant_cycles(&series, kappa)?;
        lens.push(select_patch_len(li, cycles, first.factors[i], base));
    }
    PatchPlan::from_lens(&input_lens, &lens)
}

pub fn plan_patches(w: &WindowSample, kappa: f64, base: usize) -> Result<PatchPlan> {
    plan_from_windows(std::slice::from_ref(w), kappa, base)
}

/// Dataset-level plan from up to `max_windows` evenly spaced training
/// windows of fine length `input_len`.
pub fn plan_from_dataset(
    ds: &AsyncDataset,
    input_len: usize,
    kappa: f64,
    base: usize,
    max_windows: usize,
) -> Result<PatchPlan> {
    let rmax = ds.max_factor();
    let all = make_windows(ds, input_len, rmax, rmax, Split::Train)?;
    if all.is_empty() {
        return Err(CtfError::InvalidInput(
            "training split too short for a single window".into(),
        ));
    }
    let step = all.len().div_ceil(max_windows.max(1));
    let picked: Vec<WindowSample> = all.into_iter().step_by(step).collect();
    plan_from_windows(&picked, kappa, base)
}

/// Plan that ignores spectra and sampling factors: `ℓ = clamp(base, 2, L_i/2)`.
pub fn fixed_plan(input_lens: &[usize], base: usize) -> Result<PatchPlan> {
    let lens: Vec<usize> = input_lens
        .iter()
        .map(|&li| select_patch_len(li, None, 1, base))
        .collect();
    PatchPlan::from_lens(input_lens, &lens)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenKind {
    Local,
    Channel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenRef {
    pub channel: usize,
    pub kind: TokenKind,
    pub index: usize,
}

/// Token order `[L1; C1; L2; C2; ...]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub local_counts: Vec<usize>,
    pub channel_tokens: usize,
    starts: Vec<usize>,
    total: usize,
}

impl TokenLayout {
    pub fn new(local_counts: &[usize], channel_tokens: usize) -> Result<Self> {
        if channel_tokens == 0 {
            return Err(CtfError::InvalidInput("at least one channel token required".into()));
        }
        let mut starts = Vec::with_capacity(local_counts.len());
        let mut t = 0;
        for &p in local_counts {
            starts.push(t);
            t += p + channel_tokens;
        }
        Ok(TokenLayout {
            local_counts: local_counts.to_vec(),
            channel_tokens,
            starts,
            total: t,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.local_counts.len()
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn local(&self, channel: usize, j: usize) -> usize {
        debug_assert!(j < self.local_counts[channel]);
        self.starts[channel] + j
    }

    pub fn channel_token(&self, channel: usize, c: usize) -> usize {
        debug_assert!(c < self.channel_tokens);
        self.starts[channel] + self.local_counts[channel] + c
    }

    pub fn channel_token_rows(&self, channel: usize) -> Vec<usize> {
        (0..self.channel_tokens)
            .map(|c| self.channel_token(channel, c))
            .collect()
    }

    pub fn lookup(&self, t: usize) -> Option<TokenRef> {
        if t >= self.total {
            return None;
        }
        let channel = self.starts.partition_point(|&s| s <= t) - 1;
        let off = t - self.starts[channel];
        let p = self.local_counts[channel];
        Some(if off < p {
            TokenRef {
                channel,
                kind: TokenKind::Local,
                index: off,
            }
        } else {
            TokenRef {
                channel,
                kind: TokenKind::Channel,
                index: off - p,
            }
        })
    }

    pub fn position(&self, r: TokenRef) -> Option<usize> {
        if r.channel >= self.n_channels() {
            return None;
        }
        match r.kind {
            TokenKind::Local if r.index < self.local_counts[r.channel] => {
                Some(self.local(r.channel, r.index))
            }
            TokenKind::Channel if r.index < self.channel_tokens => {
                Some(self.channel_token(r.channel, r.index))
            }
            _ => None,
        }
    }
}

/// Sinusoidal table: `e[j, 2k] = sin(j / 10000^(2k/d))`, `e[j, 2k+1] = cos(..)`.
pub fn positional_table(max_patches: usize, d: usize) -> Result<Tensor> {
    if !d.is_multiple_of(2) {
        return Err(CtfError::InvalidInput(format!("positional width must be even, got {d}")));
    }
    let mut data = vec![0.0; max_patches * d];
    for j in 0..max_patches {
        for k in 0..d / 2 {
            let angle = j as f64 / 10000f64.powf(2.0 * k as f64 / d as f64);
            data[j * d + 2 * k] = angle.sin();
            data[j * d + 2 * k + 1] = angle.cos();
        }
    }
    Tensor::matrix(max_patches, d, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffineIdx {
    pub weight: usize,
    pub bias: usize,
}

/// Registry indices of the tokenizer's learnable tensors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingBank {
    /// Patch length to projection `[ℓ×d]` plus bias `[d]`.
    pub projections: BTreeMap<usize, AffineIdx>,
    /// `[N×d]`.
    pub channel_embedding: usize,
    /// Per channel `[C×d]`.
    pub channel_tokens: Vec<usize>,
}

pub(crate) fn uniform_tensor(rng: &mut impl Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}

pub(crate) fn normal_tensor(rng: &mut impl Rng, shape: Vec<usize>, sd: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, sd).expect("finite sd");
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}

impl EmbeddingBank {
    /// Register the bank's tensors: one projection per distinct patch length,
    /// channel embeddings and channel tokens.
    pub fn init(
        store: &mut ParamStore<Tensor>,
        plan: &PatchPlan,
        d: usize,
        channel_tokens: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut projections = BTreeMap::new();
        for pl in plan.distinct_lens() {
            let bound = 1.0 / (pl as f64).sqrt();
            let weight = store.push(format!("patch.{pl}.weight"), uniform_tensor(rng, vec![pl, d], bound))?;
            let bias = store.push(format!("patch.{pl}.bias"), uniform_tensor(rng, vec![d], bound))?;
            projections.insert(pl, AffineIdx { weight, bias });
        }
        let n = plan.n_channels();
        let channel_embedding =
            store.push("channel_embedding", normal_tensor(rng, vec![n, d], 0.02))?;
        let mut tokens = Vec::with_capacity(n);
        for i in 0..n {
            tokens.push(store.push(
                format!("channel_token.{i}"),
                normal_tensor(rng, vec![channel_tokens, d], 0.02),
            )?);
        }
        Ok(EmbeddingBank {
            projections,
            channel_embedding,
            channel_tokens: tokens,
        })
    }
}

/// Patch matrix `[P×ℓ]` of one channel and its per-patch observation flags.
pub fn extract_patches(w: &WindowSample, plan: &PatchPlan, channel: usize) -> (Tensor, Vec<bool>) {
    let (pl, p, dropped) = (plan.lens[channel], plan.counts[channel], plan.dropped[channel]);
    let x = &w.inputs[channel][dropped..dropped + pl * p];
    let obs = &w.input_observed[channel][dropped..dropped + pl * p];
    let flags = obs.chunks(pl).map(|c| c.iter().any(|&o| o)).collect();
    (Tensor::matrix(p, pl, x.to_vec()).expect("patch grid"), flags)
}

pub struct Tokens {
    /// `[T×d]` in layout order.
    pub matrix: Var,
    pub layout: TokenLayout,
    /// Per channel, per patch: `false` iff every point of the patch is unobserved.
    pub patch_observed: Vec<Vec<bool>>,
}

/// Embed a window. `vars` are the tape handles of the parameter registry the
/// bank indexes into.
#[allow(clippy::too_many_arguments)]
pub fn tokenize(
    tape: &mut Tape,
    w: &WindowSample,
    plan: &PatchPlan,
    bank: &EmbeddingBank,
    vars: &[Var],
    positional: &Tensor,
    channel_tokens: usize,
    use_channel_embedding: bool,
) -> Result<Tokens> {
    plan.check_window(w)?;
    let d = positional.shape()[1];
    if positional.shape()[0] < plan.max_patches() {
        return Err(CtfError::InvalidInput("positional table has too few rows".into()));
    }
    let layout = TokenLayout::new(&plan.counts, channel_tokens)?;
    let mut parts = Vec::with_capacity(2 * plan.n_channels());
    let mut flags = Vec::with_capacity(plan.n_channels());
    for i in 0..plan.n_channels() {
        let (patches, obs) = extract_patches(w, plan, i);
        let p = plan.counts[i];
        let proj = bank.projections.get(&plan.lens[i]).ok_or_else(|| {
            CtfError::Config(format!("no projection for patch length {}", plan.lens[i]))
        })?;
        let x = tape.constant(&patches);
        let mut local = tape.matmul(x, vars[proj.weight])?;
        local = tape.add_row(local, vars[proj.bias])?;
        let pos = Tensor::matrix(p, d, positional.data()[..p * d].to_vec())?;
        let pos = tape.constant(&pos);
        local = tape.add(local, pos)?;
        let mut ctok = vars[bank.channel_tokens[i]];
        if use_channel_embedding {
            let e = vars[bank.channel_embedding];
            let el = tape.gather_rows(e, &vec![i; p])?;
            local = tape.add(local, el)?;
            let ec = tape.gather_rows(e, &vec![i; channel_tokens])?;
            ctok = tape.add(ctok, ec)?;
        }
        parts.push(local);
        parts.push(ctok);
        flags.push(obs);
    }
    let matrix = tape.concat(&parts, 0)?;
    Ok(Tokens {
        matrix,
        layout,
        patch_observed: flags,
    })
}
