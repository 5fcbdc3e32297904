//! Attention admissibility over the `[L1; C1; ...; LN; CN]` token sequence.
//!
//! Local tokens only see local tokens of their own channel. Channel tokens
//! read their own channel's local tokens and, in channel-dependent
//! strategies, the channel tokens of other channels. Unobserved or dropped
//! patches are cut out on both sides and keep only a self-attention entry so
//! every softmax row stays well defined.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{CtfError, Result};
use crate::patching::{TokenKind, TokenLayout};
use crate::rng::rng_from;
use crate::tensor::{Tensor, MASK_NEG};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskStrategy {
    #[serde(rename = "CI_ReadOnly")]
    CiReadOnly,
    #[serde(rename = "CI_Mutual")]
    CiMutual,
    #[default]
    #[serde(rename = "CD_ReadOnly")]
    CdReadOnly,
    #[serde(rename = "CD_Mutual")]
    CdMutual,
    #[serde(rename = "CD_ReadOnly_Indexed")]
    CdReadOnlyIndexed,
    #[serde(rename = "CD_Mutual_Indexed")]
    CdMutualIndexed,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 6] = [
        MaskStrategy::CiReadOnly,
        MaskStrategy::CiMutual,
        MaskStrategy::CdReadOnly,
        MaskStrategy::CdMutual,
        MaskStrategy::CdReadOnlyIndexed,
        MaskStrategy::CdMutualIndexed,
    ];

    pub fn channel_dependent(self) -> bool {
        !matches!(self, MaskStrategy::CiReadOnly | MaskStrategy::CiMutual)
    }

    pub fn mutual(self) -> bool {
        matches!(
            self,
            MaskStrategy::CiMutual | MaskStrategy::CdMutual | MaskStrategy::CdMutualIndexed
        )
    }

    pub fn indexed(self) -> bool {
        matches!(
            self,
            MaskStrategy::CdReadOnlyIndexed | MaskStrategy::CdMutualIndexed
        )
    }

    /// The channel-independent strategy with the same local/channel-token rule.
    pub fn independent(self) -> MaskStrategy {
        if self.mutual() {
            MaskStrategy::CiMutual
        } else {
            MaskStrategy::CiReadOnly
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::CiReadOnly => "CI_ReadOnly",
            MaskStrategy::CiMutual => "CI_Mutual",
            MaskStrategy::CdReadOnly => "CD_ReadOnly",
            MaskStrategy::CdMutual => "CD_Mutual",
            MaskStrategy::CdReadOnlyIndexed => "CD_ReadOnly_Indexed",
            MaskStrategy::CdMutualIndexed => "CD_Mutual_Indexed",
        }
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskStrategy {
    type Err = CtfError;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        MaskStrategy::ALL
            .into_iter()
            .find(|m| m.name().replace('_', "").to_ascii_lowercase() == key)
            .ok_or_else(|| CtfError::Config(format!("unknown mask strategy `{s}`")))
    }
}

/// Row-major `T×T` admissibility (`true` = query may attend to key).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub layout: TokenLayout,
    pub strategy: MaskStrategy,
    /// Effective per-patch flags (observed AND not dropped).
    pub active: Vec<Vec<bool>>,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.layout.total()
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.size() + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        let t = self.size();
        &self.allowed[q * t..(q + 1) * t]
    }

    /// Additive bias: 0 where allowed, [`MASK_NEG`] elsewhere.
    pub fn bias(&self) -> Tensor {
        let t = self.size();
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { MASK_NEG })
            .collect();
        Tensor::matrix(t, t, data).expect("square mask")
    }
}

fn check_flags(layout: &TokenLayout, flags: &[Vec<bool>], what: &str) -> Result<()> {
    let ok = flags.len() == layout.n_channels()
        && flags.iter().zip(&layout.local_counts).all(|(f, &p)| f.len() == p);
    if ok {
        Ok(())
    } else {
        Err(CtfError::InvalidInput(format!(
            "{what} flags do not match layout {:?}",
            layout.local_counts
        )))
    }
}

/// Build the mask. `dropout` uses the same convention as `patch_observed`:
/// `true` keeps the patch.
pub fn build_mask(
    layout: &TokenLayout,
    strategy: MaskStrategy,
    patch_observed: &[Vec<bool>],
    dropout: Option<&[Vec<bool>]>,
) -> Result<AttentionMask> {
    check_flags(layout, patch_observed, "observation")?;
    let mut active: Vec<Vec<bool>> = patch_observed.to_vec();
    if let Some(keep) = dropout {
        check_flags(layout, keep, "dropout")?;
        for (a, k) in active.iter_mut().zip(keep) {
            a.iter_mut().zip(k).for_each(|(x, &y)| *x &= y);
        }
    }
    let t = layout.total();
    let n = layout.n_channels();
    let c = layout.channel_tokens;
    let mut allowed = vec![false; t * t];
    let mut set = |q: usize, k: usize| allowed[q * t + k] = true;
    for i in 0..n {
        let own: Vec<usize> = (0..layout.local_counts[i])
            .filter(|&j| active[i][j])
            .map(|j| layout.local(i, j))
            .collect();
        for j in 0..layout.local_counts[i] {
            let q = layout.local(i, j);
            if !active[i][j] {
                set(q, q);
                continue;
            }
            own.iter().for_each(|&k| set(q, k));
            if strategy.mutual() {
                (0..c).for_each(|ci| set(q, layout.channel_token(i, ci)));
            }
        }
        for ci in 0..c {
            let q = layout.channel_token(i, ci);
            let mut any = !own.is_empty();
            own.iter().for_each(|&k| set(q, k));
            if strategy.channel_dependent() {
                for other in (0..n).filter(|&o| o != i) {
                    if strategy.indexed() {
                        set(q, layout.channel_token(other, ci));
                    } else {
                        (0..c).for_each(|cj| set(q, layout.channel_token(other, cj)));
                    }
                    any = true;
                }
            }
            if !any {
                set(q, q);
            }
        }
    }
    Ok(AttentionMask {
        layout: layout.clone(),
        strategy,
        active,
        allowed,
    })
}

/// Pairwise restatement of the attention rules, written independently of
/// [`build_mask`] for cross-checking. `active` are the effective patch flags.
pub fn reference_allowed(
    q: usize,
    k: usize,
    strategy: MaskStrategy,
    layout: &TokenLayout,
    active: &[Vec<bool>],
) -> bool {
    let rule = |q: usize, k: usize| -> bool {
        let (Some(a), Some(b)) = (layout.lookup(q), layout.lookup(k)) else {
            return false;
        };
        let same = a.channel == b.channel;
        let eff = |r: crate::patching::TokenRef| active[r.channel][r.index];
        match (a.kind, b.kind) {
            (TokenKind::Local, TokenKind::Local) => same && eff(a) && eff(b),
            (TokenKind::Local, TokenKind::Channel) => strategy.mutual() && same && eff(a),
            (TokenKind::Channel, TokenKind::Local) => same && eff(b),
            (TokenKind::Channel, TokenKind::Channel) => {
                strategy.channel_dependent()
                    && !same
                    && (!strategy.indexed() || a.index == b.index)
            }
        }
    };
    if rule(q, k) {
        return true;
    }
    q == k && !(0..layout.total()).any(|kk| rule(q, kk))
}

/// Training-time random patch dropping: per channel `⌊t·P_i⌋` distinct
/// patches (capped so one survives) are marked `false`.
pub fn sample_dropout_mask(layout: &TokenLayout, ratio: f64, seed: u64) -> Result<Vec<Vec<bool>>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(CtfError::InvalidInput(format!(
            "dropout ratio must lie in [0, 1), got {ratio}"
        )));
    }
    let mut out = Vec::with_capacity(layout.n_channels());
    for (i, &p) in layout.local_counts.iter().enumerate() {
        let mut keep = vec![true; p];
        let drop = ((ratio * p as f64).floor() as usize).min(p.saturating_sub(1));
        if drop > 0 {
            let mut rng = rng_from(seed, &[i as u64]);
            for j in sample(&mut rng, p, drop).into_iter() {
                keep[j] = false;
            }
        }
        out.push(keep);
    }
    Ok(out)
}
