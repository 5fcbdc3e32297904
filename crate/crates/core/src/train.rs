//! Channel-aggregated losses, Adam and the early-stopping training loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attnmask::sample_dropout_mask;
use crate::data::{make_windows, AsyncDataset, Split, WindowSample};
use crate::error::{CtfError, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::patching::{fixed_plan, plan_from_dataset, PatchPlan};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::{Tape, Tensor, Var};

/// Training windows sampled for the dataset-level patch plan.
pub const PLAN_WINDOWS: usize = 64;

fn check_lengths(targets: &[Vec<f64>], preds: &[Vec<f64>]) -> Result<()> {
    if targets.is_empty() || targets.len() != preds.len() {
        return Err(CtfError::InvalidInput("channel count mismatch".into()));
    }
    for (i, (t, p)) in targets.iter().zip(preds).enumerate() {
        if t.len() != p.len() || t.is_empty() {
            return Err(CtfError::InvalidInput(format!(
                "channel {i}: {} targets vs {} predictions",
                t.len(),
                p.len()
            )));
        }
    }
    Ok(())
}

fn channel_aggregate(targets: &[Vec<f64>], preds: &[Vec<f64>], f: impl Fn(f64) -> f64) -> Result<f64> {
    check_lengths(targets, preds)?;
    let total: f64 = targets
        .iter()
        .zip(preds)
        .map(|(t, p)| t.iter().zip(p).map(|(a, b)| f(a - b)).sum::<f64>() / t.len() as f64)
        .sum();
    Ok(total / targets.len() as f64)
}

/// Mean over channels of each channel's mean squared error.
pub fn cmse(targets: &[Vec<f64>], preds: &[Vec<f64>]) -> Result<f64> {
    channel_aggregate(targets, preds, |e| e * e)
}

/// Mean over channels of each channel's mean absolute error.
pub fn cmae(targets: &[Vec<f64>], preds: &[Vec<f64>]) -> Result<f64> {
    channel_aggregate(targets, preds, f64::abs)
}

/// Differentiable CMSE over per-channel prediction vectors.
pub fn cmse_tape(tape: &mut Tape, preds: &[Var], targets: &[Vec<f64>]) -> Result<Var> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(CtfError::InvalidInput("channel count mismatch".into()));
    }
    let mut per = Vec::with_capacity(preds.len());
    for (&p, t) in preds.iter().zip(targets) {
        if tape.shape(p) != [t.len()] {
            return Err(CtfError::shape("cmse", tape.shape(p), &[t.len()]));
        }
        let tv = tape.constant(&Tensor::vector(t.clone()));
        let e = tape.sub(p, tv)?;
        let sq = tape.mul(e, e)?;
        let m = tape.mean(sq);
        per.push(tape.reshape(m, vec![1])?);
    }
    let all = tape.concat(&per, 0)?;
    Ok(tape.mean(all))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore<Tensor>) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.items().iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: params.items().iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }
}

/// One bias-corrected Adam update. `grads[i] == None` leaves parameter `i`
/// (and its moments) untouched. A non-finite gradient aborts before any
/// parameter changes.
pub fn adam_step(
    params: &mut ParamStore<Tensor>,
    grads: &[Option<Vec<f64>>],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(CtfError::InvalidInput("gradient/parameter count mismatch".into()));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.len() != params.get(i).numel() {
                return Err(CtfError::shape("adam", &[g.len()], params.get(i).shape()));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(CtfError::Numerical(format!(
                    "non-finite gradient in parameter `{}`",
                    params.name(i)
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, p) in params.get_mut(i).data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *p -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Windows per optimizer step; gradients are averaged.
    pub batch_size: usize,
    /// Fine-grid step between consecutive training windows.
    pub train_stride: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            max_epochs: 10,
            patience: 3,
            batch_size: 1,
            train_stride: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(CtfError::Config("learning rate must be finite and >= 0".into()));
        }
        if self.patience == 0 || self.batch_size == 0 || self.train_stride == 0 {
            return Err(CtfError::Config("patience, batch_size and train_stride must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_cmse: f64,
    pub val_cmse: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Parameters of the best validation epoch (initial parameters when no
    /// epoch completed).
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_cmse: f64,
    /// Set when training stopped on a non-finite loss or gradient.
    pub diverged: Option<String>,
}

/// Patch plan for a (normalized) dataset under a model config.
pub fn plan_for(ds: &AsyncDataset, cfg: &ModelConfig) -> Result<PatchPlan> {
    if cfg.dynamic_patching {
        plan_from_dataset(ds, cfg.input_len, cfg.kappa, cfg.base_patch_len, PLAN_WINDOWS)
    } else {
        let lens: Vec<usize> = ds.factors().iter().map(|r| cfg.input_len / r).collect();
        fixed_plan(&lens, cfg.base_patch_len)
    }
}

/// Mean CMSE (normalized units) of clean, unmasked forecasts.
pub fn mean_cmse(model: &Model, windows: &[WindowSample]) -> Result<f64> {
    if windows.is_empty() {
        return Err(CtfError::InvalidInput("no windows to score".into()));
    }
    let mut total = 0.0;
    for w in windows {
        total += cmse(&w.targets, &model.predict(w)?)?;
    }
    Ok(total / windows.len() as f64)
}

struct Step {
    loss: f64,
    grads: Vec<Option<Vec<f64>>>,
}

fn window_step(model: &Model, w: &WindowSample, dropout: Option<&[Vec<bool>]>) -> Result<Step> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, true);
    let preds = model.forward_tape(&mut tape, &vars, w, dropout)?;
    let loss = cmse_tape(&mut tape, &preds, &w.targets)?;
    let value = tape.value(loss)[0];
    if !value.is_finite() {
        return Err(CtfError::Numerical(format!("non-finite training loss at window {}", w.origin)));
    }
    tape.backward(loss)?;
    let grads = vars
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if model.is_trainable(i) {
                tape.grad(v).map(<[f64]>::to_vec)
            } else {
                None
            }
        })
        .collect();
    Ok(Step { loss: value, grads })
}

/// Train on the training split with early stopping on validation CMSE.
/// `ds` may be raw; it is standardized with its training statistics.
pub fn fit(ds: &AsyncDataset, model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<FitResult> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let norm = ds.normalized();
    let plan = plan_for(&norm, model_cfg)?;
    let mut model = Model::init(model_cfg, &norm.factors(), plan, derive_seed(train_cfg.seed, &[1]))?;
    let (l, h) = (model_cfg.input_len, model_cfg.horizon);
    let train = make_windows(&norm, l, h, train_cfg.train_stride, Split::Train)?;
    let val = make_windows(&norm, l, h, norm.max_factor(), Split::Val)?;
    if train.is_empty() || val.is_empty() {
        return Err(CtfError::InvalidInput(format!(
            "need non-empty train and validation splits ({} / {} windows)",
            train.len(),
            val.len()
        )));
    }
    let layout = model.layout();
    let mut adam = AdamState::new(&model.params);
    let mut history = Vec::new();
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = None;
    let mut stale = 0;
    let mut diverged = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for epoch in 1..=train_cfg.max_epochs {
        order.shuffle(&mut rng_from(train_cfg.seed, &[2, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut acc: Vec<Option<Vec<f64>>> = vec![None; model.params.len()];
        let mut in_batch = 0;
        for (pos, &wi) in order.iter().enumerate() {
            let drop = if model_cfg.patch_masking && model_cfg.dropout_ratio > 0.0 {
                let seed = derive_seed(train_cfg.seed, &[3, epoch as u64, pos as u64]);
                Some(sample_dropout_mask(&layout, model_cfg.dropout_ratio, seed)?)
            } else {
                None
            };
            let step = match window_step(&model, &train[wi], drop.as_deref()) {
                Ok(s) => s,
                Err(CtfError::Numerical(msg)) => {
                    diverged = Some(msg);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            loss_sum += step.loss;
            for (a, g) in acc.iter_mut().zip(step.grads) {
                match (a.as_mut(), g) {
                    (Some(a), Some(g)) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
                    (None, Some(g)) => *a = Some(g),
                    _ => {}
                }
            }
            in_batch += 1;
            if in_batch == train_cfg.batch_size || pos + 1 == order.len() {
                if in_batch > 1 {
                    let k = in_batch as f64;
                    acc.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|x| *x /= k));
                }
                if let Err(e) = adam_step(&mut model.params, &acc, &mut adam, train_cfg.lr) {
                    match e {
                        CtfError::Numerical(msg) => {
                            diverged = Some(msg);
                            break 'epochs;
                        }
                        other => return Err(other),
                    }
                }
                acc.iter_mut().for_each(|a| *a = None);
                in_batch = 0;
            }
        }
        let val_cmse = mean_cmse(&model, &val)?;
        if !val_cmse.is_finite() {
            diverged = Some(format!("non-finite validation CMSE after epoch {epoch}"));
            break;
        }
        history.push(EpochRecord {
            epoch,
            train_cmse: loss_sum / train.len() as f64,
            val_cmse,
        });
        if val_cmse < best_val {
            best_val = val_cmse;
            best = model.clone();
            best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= train_cfg.patience {
                break;
            }
        }
    }
    Ok(FitResult {
        model: best,
        history,
        best_epoch,
        best_val_cmse: best_val,
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_coupled, SynthConfig};
    use crate::rng::rng_from;
    use rand::Rng;

    fn loop_oracle(t: &[Vec<f64>], p: &[Vec<f64>], abs: bool) -> f64 {
        let mut outer = 0.0;
        for i in 0..t.len() {
            let mut inner = 0.0;
            for j in 0..t[i].len() {
                let e = t[i][j] - p[i][j];
                inner += if abs { e.abs() } else { e * e };
            }
            outer += inner / t[i].len() as f64;
        }
        outer / t.len() as f64
    }

    #[test]
    fn hand_example() {
        let y = vec![vec![1.0, 3.0], vec![2.0]];
        let p = vec![vec![0.0, 1.0], vec![0.0]];
        assert_eq!(cmse(&y, &p).unwrap(), 3.25);
        assert_eq!(cmae(&y, &p).unwrap(), 1.75);
        assert_eq!(cmse(&y, &y).unwrap(), 0.0);
        assert_eq!(cmae(&y, &y).unwrap(), 0.0);
        assert!(cmse(&y, &[vec![0.0], vec![0.0]]).is_err());
    }

    #[test]
    fn losses_match_loop_oracle() {
        let mut rng = rng_from(4, &[]);
        for _ in 0..20 {
            let t: Vec<Vec<f64>> = [4, 2, 1].iter().map(|&n| (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
            let p: Vec<Vec<f64>> = [4, 2, 1].iter().map(|&n| (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
            assert!((cmse(&t, &p).unwrap() - loop_oracle(&t, &p, false)).abs() < 1e-12);
            assert!((cmae(&t, &p).unwrap() - loop_oracle(&t, &p, true)).abs() < 1e-12);
            let mut tape = Tape::new();
            let vars: Vec<Var> = p.iter().map(|x| tape.leaf(&Tensor::vector(x.clone()), true)).collect();
            let l = cmse_tape(&mut tape, &vars, &t).unwrap();
            assert!((tape.value(l)[0] - loop_oracle(&t, &p, false)).abs() < 1e-12);
        }
    }

    fn scalar_store(v: f64) -> ParamStore<Tensor> {
        let mut s = ParamStore::new();
        s.push("w", Tensor::vector(vec![v])).unwrap();
        s
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut s = scalar_store(2.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &[Some(vec![0.0])], &mut st, 0.1).unwrap();
        assert_eq!(s.get(0).data(), &[2.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = scalar_store(0.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &[Some(vec![1.0])], &mut st, 0.01).unwrap();
        assert!((s.get(0).data()[0] + 0.01).abs() < 1e-9);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s);
        let mut prev = 1.0f64;
        for _ in 0..10 {
            let w = s.get(0).data()[0];
            adam_step(&mut s, &[Some(vec![2.0 * w])], &mut st, 0.1).unwrap();
            let now = s.get(0).data()[0].abs();
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn adam_rejects_nan_by_name() {
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s);
        let err = adam_step(&mut s, &[Some(vec![f64::NAN])], &mut st, 0.1).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(s.get(0).data(), &[1.0]);
    }

    fn tiny_setup() -> (AsyncDataset, ModelConfig, TrainConfig) {
        let ds = synth_coupled(&SynthConfig {
            base_len: 1200,
            seed: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        let mc = ModelConfig {
            d_model: 8,
            channel_tokens: 1,
            input_len: 48,
            horizon: 24,
            ..ModelConfig::default()
        };
        let tc = TrainConfig {
            max_epochs: 2,
            train_stride: 8,
            seed: 5,
            ..TrainConfig::default()
        };
        (ds, mc, tc)
    }

    #[test]
    fn zero_lr_keeps_initial_parameters() {
        let (ds, mc, tc) = tiny_setup();
        let tc = TrainConfig { lr: 0.0, max_epochs: 1, ..tc };
        let res = fit(&ds, &mc, &tc).unwrap();
        let norm = ds.normalized();
        let init = Model::init(&mc, &norm.factors(), plan_for(&norm, &mc).unwrap(), derive_seed(tc.seed, &[1])).unwrap();
        assert_eq!(res.model.params, init.params);
    }

    #[test]
    fn fit_is_deterministic_and_best_epoch_reproduces() {
        let (ds, mc, tc) = tiny_setup();
        let a = fit(&ds, &mc, &tc).unwrap();
        let b = fit(&ds, &mc, &tc).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.params, b.model.params);
        let norm = ds.normalized();
        let val = make_windows(&norm, mc.input_len, mc.horizon, norm.max_factor(), Split::Val).unwrap();
        let best = a.best_epoch.unwrap();
        assert_eq!(mean_cmse(&a.model, &val).unwrap(), a.history[best - 1].val_cmse);
    }

    #[test]
    fn dropout_keeps_a_patch_per_channel() {
        let (ds, mc, _) = tiny_setup();
        let norm = ds.normalized();
        let plan = plan_for(&norm, &mc).unwrap();
        let model = Model::init(&mc, &norm.factors(), plan, 0).unwrap();
        let layout = model.layout();
        for s in 0..50 {
            let m = sample_dropout_mask(&layout, 0.4, s).unwrap();
            assert!(m.iter().all(|c| c.iter().any(|&k| k)));
        }
    }
}
