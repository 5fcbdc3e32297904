//! The forecasting network.
//!
//! Tokens pass through `n_blocks` pre-norm blocks (masked multi-head
//! self-attention, then a ReLU feed-forward layer, each with a residual
//! connection) and a final layer norm. Only the channel tokens are decoded:
//! the `C` tokens of a channel are flattened to `C·d` and mapped to
//! `⌊H / r⌋` values by the decoder registered for that channel's sampling
//! factor.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attnmask::{build_mask, MaskStrategy};
use crate::data::{NormStats, WindowSample};
use crate::error::{CtfError, Result};
use crate::params::ParamStore;
use crate::patching::{
    positional_table, tokenize, uniform_tensor, AffineIdx, EmbeddingBank, PatchPlan, TokenLayout,
    DEFAULT_BASE_PATCH_LEN,
};
use crate::rng::rng_from;
use crate::spectral::DEFAULT_KAPPA;
use crate::tensor::{Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoChannelDependence,
    NoDynamicPatching,
    NoPatchMasking,
    NoChannelEmbedding,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoChannelDependence => "no_channel_dependence",
            Ablation::NoDynamicPatching => "no_dynamic_patching",
            Ablation::NoPatchMasking => "no_patch_masking",
            Ablation::NoChannelEmbedding => "no_channel_embedding",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = CtfError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        [
            Ablation::NoChannelDependence,
            Ablation::NoDynamicPatching,
            Ablation::NoPatchMasking,
            Ablation::NoChannelEmbedding,
        ]
        .into_iter()
        .find(|a| a.name() == key)
        .ok_or_else(|| CtfError::Config(format!("unknown ablation `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub ff_ratio: usize,
    pub channel_tokens: usize,
    pub mask_strategy: MaskStrategy,
    pub use_channel_embedding: bool,
    /// Fraction of patches randomly dropped per channel during training.
    pub dropout_ratio: f64,
    /// When false, unobserved patches stay attendable with zero-filled values.
    pub patch_masking: bool,
    /// When false, every channel uses `base_patch_len` regardless of spectrum
    /// and sampling factor.
    pub dynamic_patching: bool,
    /// Input length on the fine grid.
    pub input_len: usize,
    /// Forecast horizon on the fine grid.
    pub horizon: usize,
    pub kappa: f64,
    pub base_patch_len: usize,
    pub ablations: Vec<Ablation>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            n_heads: 2,
            n_blocks: 2,
            ff_ratio: 2,
            channel_tokens: 2,
            mask_strategy: MaskStrategy::CdReadOnly,
            use_channel_embedding: true,
            dropout_ratio: 0.4,
            patch_masking: true,
            dynamic_patching: true,
            input_len: 96,
            horizon: 48,
            kappa: DEFAULT_KAPPA,
            base_patch_len: DEFAULT_BASE_PATCH_LEN,
            ablations: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CtfError::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if !self.d_model.is_multiple_of(2) {
            return bad("d_model must be even for the positional table");
        }
        if self.channel_tokens == 0 {
            return bad("at least one channel token is required");
        }
        if self.ff_ratio == 0 {
            return bad("ff_ratio must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_ratio) {
            return bad("dropout_ratio must lie in [0, 1)");
        }
        if self.input_len == 0 || self.horizon == 0 {
            return bad("input_len and horizon must be positive");
        }
        if self.base_patch_len == 0 {
            return bad("base_patch_len must be positive");
        }
        Ok(())
    }
}

/// Apply one ablation toggle and record it in the config.
pub fn ablate(config: &ModelConfig, toggle: Ablation) -> ModelConfig {
    let mut c = config.clone();
    match toggle {
        Ablation::NoChannelDependence => c.mask_strategy = c.mask_strategy.independent(),
        Ablation::NoDynamicPatching => c.dynamic_patching = false,
        Ablation::NoPatchMasking => {
            c.dropout_ratio = 0.0;
            c.patch_masking = false;
        }
        Ablation::NoChannelEmbedding => c.use_channel_embedding = false,
    }
    if !c.ablations.contains(&toggle) {
        c.ablations.push(toggle);
    }
    c
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormIdx {
    pub gain: usize,
    pub shift: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockIdx {
    pub attn_norm: NormIdx,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ffn_norm: NormIdx,
    pub ffn_in: AffineIdx,
    pub ffn_out: AffineIdx,
}

/// Where each component's tensors live in the registry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelIndex {
    pub bank: EmbeddingBank,
    pub blocks: Vec<BlockIdx>,
    pub final_norm: NormIdx,
    /// Sampling factor to decoder `[C·d × H_r]` plus bias `[H_r]`.
    pub decoders: BTreeMap<usize, AffineIdx>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub normalized: Vec<Vec<f64>>,
    pub denormalized: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub factors: Vec<usize>,
    pub plan: PatchPlan,
    pub index: ModelIndex,
    pub params: ParamStore<Tensor>,
    positional: Tensor,
}

fn norm(store: &mut ParamStore<Tensor>, name: &str, d: usize) -> Result<NormIdx> {
    Ok(NormIdx {
        gain: store.push(format!("{name}.gain"), Tensor::new(vec![d], vec![1.0; d])?)?,
        shift: store.push(format!("{name}.shift"), Tensor::zeros(vec![d]))?,
    })
}

fn affine(
    store: &mut ParamStore<Tensor>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl rand::Rng,
) -> Result<AffineIdx> {
    let b = 1.0 / (fan_in as f64).sqrt();
    Ok(AffineIdx {
        weight: store.push(format!("{name}.weight"), uniform_tensor(rng, vec![fan_in, fan_out], b))?,
        bias: store.push(format!("{name}.bias"), uniform_tensor(rng, vec![fan_out], b))?,
    })
}

impl Model {
    /// Fresh, seeded parameters for the given channels and patch plan.
    pub fn init(config: &ModelConfig, factors: &[usize], plan: PatchPlan, seed: u64) -> Result<Model> {
        config.validate()?;
        if factors.len() != plan.n_channels() {
            return Err(CtfError::Config("patch plan and factors disagree on channel count".into()));
        }
        for &r in factors {
            if r == 0 || !config.horizon.is_multiple_of(r) || !config.input_len.is_multiple_of(r) {
                return Err(CtfError::Config(format!(
                    "input length and horizon must be multiples of sampling factor {r}"
                )));
            }
        }
        let d = config.d_model;
        let c = config.channel_tokens;
        let mut rng = rng_from(seed, &[0x6d6f_6465_6c]);
        let mut store = ParamStore::new();
        let bank = EmbeddingBank::init(&mut store, &plan, d, c, &mut rng)?;
        if !config.use_channel_embedding {
            store.get_mut(bank.channel_embedding).data_mut().fill(0.0);
        }
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for b in 0..config.n_blocks {
            let p = format!("block.{b}");
            let attn_norm = norm(&mut store, &format!("{p}.attn_norm"), d)?;
            let bound = 1.0 / (d as f64).sqrt();
            let mut sq = |name: &str, store: &mut ParamStore<Tensor>| {
                store.push(format!("{p}.{name}"), uniform_tensor(&mut rng, vec![d, d], bound))
            };
            let wq = sq("wq", &mut store)?;
            let wk = sq("wk", &mut store)?;
            let wv = sq("wv", &mut store)?;
            let wo = sq("wo", &mut store)?;
            let ffn_norm = norm(&mut store, &format!("{p}.ffn_norm"), d)?;
            let hidden = config.ff_ratio * d;
            let ffn_in = affine(&mut store, &format!("{p}.ffn_in"), d, hidden, &mut rng)?;
            let ffn_out = affine(&mut store, &format!("{p}.ffn_out"), hidden, d, &mut rng)?;
            blocks.push(BlockIdx {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                ffn_norm,
                ffn_in,
                ffn_out,
            });
        }
        let final_norm = norm(&mut store, "final_norm", d)?;
        let mut distinct: Vec<usize> = factors.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        let mut decoders = BTreeMap::new();
        for r in distinct {
            let idx = affine(&mut store, &format!("decoder.{r}"), c * d, config.horizon / r, &mut rng)?;
            decoders.insert(r, idx);
        }
        let positional = positional_table(plan.max_patches(), d)?;
        Ok(Model {
            config: config.clone(),
            factors: factors.to_vec(),
            plan,
            index: ModelIndex {
                bank,
                blocks,
                final_norm,
                decoders,
            },
            params: store,
            positional,
        })
    }

    /// Rebuild a model from stored parameters; names and shapes must match
    /// the registry implied by the config and plan.
    pub fn from_parts(
        config: &ModelConfig,
        factors: &[usize],
        plan: PatchPlan,
        params: ParamStore<Tensor>,
    ) -> Result<Model> {
        let mut m = Model::init(config, factors, plan, 0)?;
        if m.params.names() != params.names() {
            return Err(CtfError::Config("checkpoint tensor names do not match the model".into()));
        }
        for (i, (name, t)) in params.iter().enumerate() {
            if t.shape() != m.params.get(i).shape() {
                return Err(CtfError::Config(format!(
                    "checkpoint tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    m.params.get(i).shape()
                )));
            }
        }
        m.params = params;
        Ok(m)
    }

    pub fn n_channels(&self) -> usize {
        self.factors.len()
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout::new(&self.plan.counts, self.config.channel_tokens).expect("validated config")
    }

    pub fn horizons(&self) -> Vec<usize> {
        self.factors.iter().map(|r| self.config.horizon / r).collect()
    }

    /// Whether a registry entry receives gradient updates.
    pub fn is_trainable(&self, idx: usize) -> bool {
        self.config.use_channel_embedding || idx != self.index.bank.channel_embedding
    }

    /// Put every parameter on the tape.
    pub fn register(&self, tape: &mut Tape, with_grad: bool) -> Vec<Var> {
        (0..self.params.len())
            .map(|i| tape.leaf(self.params.get(i), with_grad && self.is_trainable(i)))
            .collect()
    }

    /// Record the forward pass; returns one normalized forecast per channel.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        w: &WindowSample,
        dropout: Option<&[Vec<bool>]>,
    ) -> Result<Vec<Var>> {
        if w.factors != self.factors {
            return Err(CtfError::Config(format!(
                "window sampling factors {:?} do not match the model's {:?}",
                w.factors, self.factors
            )));
        }
        let cfg = &self.config;
        let tok = tokenize(
            tape,
            w,
            &self.plan,
            &self.index.bank,
            vars,
            &self.positional,
            cfg.channel_tokens,
            cfg.use_channel_embedding,
        )?;
        let flags = if cfg.patch_masking {
            tok.patch_observed.clone()
        } else {
            tok.layout.local_counts.iter().map(|&p| vec![true; p]).collect()
        };
        let dropout = if cfg.patch_masking { dropout } else { None };
        let mask = build_mask(&tok.layout, cfg.mask_strategy, &flags, dropout)?;
        let bias = mask.bias();
        let mut x = tok.matrix;
        for b in &self.index.blocks {
            x = self.attention(tape, vars, b, x, &bias)?;
            x = self.feed_forward(tape, vars, b, x)?;
        }
        let fin = self.index.final_norm;
        x = tape.layer_norm(x, vars[fin.gain], vars[fin.shift], LAYER_NORM_EPS)?;
        let width = cfg.channel_tokens * cfg.d_model;
        let mut out = Vec::with_capacity(self.n_channels());
        for (i, &r) in self.factors.iter().enumerate() {
            let dec = self.index.decoders.get(&r).ok_or_else(|| {
                CtfError::Config(format!("no decoder for sampling factor {r}"))
            })?;
            let rows = tape.gather_rows(x, &tok.layout.channel_token_rows(i))?;
            let flat = tape.reshape(rows, vec![1, width])?;
            let y = tape.matmul(flat, vars[dec.weight])?;
            let y = tape.add_row(y, vars[dec.bias])?;
            let h = tape.shape(y)[1];
            out.push(tape.reshape(y, vec![h])?);
        }
        Ok(out)
    }

    fn attention(&self, tape: &mut Tape, vars: &[Var], b: &BlockIdx, x: Var, bias: &Tensor) -> Result<Var> {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let h = tape.layer_norm(x, vars[b.attn_norm.gain], vars[b.attn_norm.shift], LAYER_NORM_EPS)?;
        let q = tape.matmul(h, vars[b.wq])?;
        let k = tape.matmul(h, vars[b.wk])?;
        let v = tape.matmul(h, vars[b.wv])?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let (lo, hi) = (hd * dh, (hd + 1) * dh);
            let qh = tape.slice(q, 1, lo, hi)?;
            let kh = tape.slice(k, 1, lo, hi)?;
            let vh = tape.slice(v, 1, lo, hi)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.masked_softmax(scores, bias)?;
            outs.push(tape.matmul(attn, vh)?);
        }
        let cat = if heads == 1 { outs[0] } else { tape.concat(&outs, 1)? };
        let o = tape.matmul(cat, vars[b.wo])?;
        tape.add(x, o)
    }

    fn feed_forward(&self, tape: &mut Tape, vars: &[Var], b: &BlockIdx, x: Var) -> Result<Var> {
        let h = tape.layer_norm(x, vars[b.ffn_norm.gain], vars[b.ffn_norm.shift], LAYER_NORM_EPS)?;
        let h = tape.matmul(h, vars[b.ffn_in.weight])?;
        let h = tape.add_row(h, vars[b.ffn_in.bias])?;
        let h = tape.relu(h);
        let h = tape.matmul(h, vars[b.ffn_out.weight])?;
        let h = tape.add_row(h, vars[b.ffn_out.bias])?;
        tape.add(x, h)
    }

    /// Normalized per-channel forecasts.
    pub fn predict(&self, w: &WindowSample) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let ys = self.forward_tape(&mut tape, &vars, w, None)?;
        Ok(ys.iter().map(|&y| tape.value(y).to_vec()).collect())
    }

    pub fn forecast(&self, w: &WindowSample, stats: &NormStats) -> Result<Forecast> {
        let normalized = self.predict(w)?;
        let denormalized = normalized
            .iter()
            .enumerate()
            .map(|(i, ys)| ys.iter().map(|v| v * stats.std[i] + stats.mean[i]).collect())
            .collect();
        Ok(Forecast {
            normalized,
            denormalized,
        })
    }
}

pub fn count_params(params: &ParamStore<Tensor>) -> usize {
    params.numel()
}
