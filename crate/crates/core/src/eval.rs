//! Test-split evaluation, naive baselines and frequency-bias metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{inject_block_missing, make_windows, AsyncDataset, MissingProtocol, Split, WindowSample};
use crate::error::{CtfError, Result};
use crate::model::Model;
use crate::spectral::{band_rmse, zero_centered, AmplitudeSpectrum};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scenario {
    Clean,
    Missing { protocol: MissingProtocol, ratio: f64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Keep only the newest `input_len` fine steps of each input.
    pub input_len: Option<usize>,
    /// Report metrics in standardized units instead of data units.
    pub normalized: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelMetrics {
    pub name: String,
    pub factor: usize,
    pub mse: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    pub origin: usize,
    pub cmse: f64,
    pub cmae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: Scenario,
    pub units: String,
    pub input_len: usize,
    pub windows: usize,
    pub cmse: f64,
    pub cmae: f64,
    pub channels: Vec<ChannelMetrics>,
    pub per_window: Vec<WindowMetrics>,
}

struct Scored {
    origin: usize,
    se: Vec<f64>,
    ae: Vec<f64>,
}

/// Apply the scenario and input truncation to a normalized test window.
pub fn prepare_input(
    w: &WindowSample,
    scenario: Scenario,
    patch_lens: &[usize],
    seed: u64,
    input_len: Option<usize>,
) -> Result<WindowSample> {
    let mut out = match scenario {
        Scenario::Clean => w.clone(),
        Scenario::Missing { protocol, ratio } => inject_block_missing(w, protocol, ratio, patch_lens, seed)?,
    };
    if let Some(keep) = input_len {
        out = out.truncate_to(keep);
    }
    Ok(out)
}

/// Score an arbitrary predictor of normalized forecasts over the test split.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_with<F>(
    ds: &AsyncDataset,
    input_len: usize,
    horizon: usize,
    patch_lens: &[usize],
    scenario: Scenario,
    seed: u64,
    opts: EvalOptions,
    predict: F,
) -> Result<EvalReport>
where
    F: Fn(&WindowSample) -> Result<Vec<Vec<f64>>> + Sync,
{
    let rmax = ds.max_factor();
    if let Some(keep) = opts.input_len {
        if keep == 0 || keep > input_len || keep % rmax != 0 {
            return Err(CtfError::Config(format!(
                "input length {keep} must be a positive multiple of {rmax} no larger than {input_len}"
            )));
        }
    }
    let norm = ds.normalized();
    let windows = make_windows(&norm, input_len, horizon, rmax, Split::Test)?;
    let raw = make_windows(ds, input_len, horizon, rmax, Split::Test)?;
    if windows.is_empty() {
        return Err(CtfError::InvalidInput("test split holds no complete window".into()));
    }
    let scored: Vec<Scored> = windows
        .par_iter()
        .zip(raw.par_iter())
        .map(|(w, rw)| -> Result<Scored> {
            let input = prepare_input(w, scenario, patch_lens, seed, opts.input_len)?;
            let preds = predict(&input)?;
            let (truth, preds): (&Vec<Vec<f64>>, Vec<Vec<f64>>) = if opts.normalized {
                (&w.targets, preds)
            } else {
                let de = preds
                    .iter()
                    .enumerate()
                    .map(|(i, p)| p.iter().map(|&v| ds.denormalize(i, v)).collect())
                    .collect();
                (&rw.targets, de)
            };
            if preds.len() != truth.len() || preds.iter().zip(truth).any(|(p, t)| p.len() != t.len()) {
                return Err(CtfError::InvalidInput("prediction shape does not match targets".into()));
            }
            let per = |f: fn(f64) -> f64| -> Vec<f64> {
                truth
                    .iter()
                    .zip(&preds)
                    .map(|(t, p)| t.iter().zip(p).map(|(a, b)| f(a - b)).sum::<f64>() / t.len() as f64)
                    .collect()
            };
            Ok(Scored {
                origin: w.origin,
                se: per(|e| e * e),
                ae: per(f64::abs),
            })
        })
        .collect::<Result<_>>()?;
    Ok(aggregate(ds, scenario, opts, input_len, scored))
}

fn aggregate(ds: &AsyncDataset, scenario: Scenario, opts: EvalOptions, input_len: usize, mut scored: Vec<Scored>) -> EvalReport {
    scored.sort_by_key(|s| s.origin);
    let n = scored.len() as f64;
    let nc = ds.n_channels();
    let mut channels = Vec::with_capacity(nc);
    for (i, c) in ds.channels.iter().enumerate() {
        channels.push(ChannelMetrics {
            name: c.name.clone(),
            factor: c.factor,
            mse: scored.iter().map(|s| s.se[i]).sum::<f64>() / n,
            mae: scored.iter().map(|s| s.ae[i]).sum::<f64>() / n,
        });
    }
    let per_window = scored
        .iter()
        .map(|s| WindowMetrics {
            origin: s.origin,
            cmse: s.se.iter().sum::<f64>() / nc as f64,
            cmae: s.ae.iter().sum::<f64>() / nc as f64,
        })
        .collect();
    EvalReport {
        scenario,
        units: if opts.normalized { "normalized" } else { "data" }.into(),
        input_len: opts.input_len.unwrap_or(input_len),
        windows: scored.len(),
        cmse: channels.iter().map(|c| c.mse).sum::<f64>() / nc as f64,
        cmae: channels.iter().map(|c| c.mae).sum::<f64>() / nc as f64,
        channels,
        per_window,
    }
}

/// Evaluate a trained model on the test split of `ds` (raw units).
pub fn evaluate(model: &Model, ds: &AsyncDataset, scenario: Scenario, seed: u64, opts: EvalOptions) -> Result<EvalReport> {
    evaluate_with(
        ds,
        model.config.input_len,
        model.config.horizon,
        &model.plan.lens,
        scenario,
        seed,
        opts,
        |w| model.predict(w),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub mean: EvalReport,
    pub persistence: EvalReport,
}

/// Training-mean and last-value predictors on the clean test split.
pub fn naive_baselines(ds: &AsyncDataset, input_len: usize, horizon: usize) -> Result<BaselineReport> {
    let lens: Vec<usize> = ds.factors().iter().map(|r| input_len / r).collect();
    let horizons: Vec<usize> = ds.factors().iter().map(|r| horizon / r).collect();
    let opts = EvalOptions::default();
    // normalized units: the training mean is 0
    let mean = evaluate_with(ds, input_len, horizon, &lens, Scenario::Clean, 0, opts, |_| {
        Ok(horizons.iter().map(|&h| vec![0.0; h]).collect())
    })?;
    let persistence = evaluate_with(ds, input_len, horizon, &lens, Scenario::Clean, 0, opts, |w| {
        Ok(w.inputs
            .iter()
            .zip(&w.input_observed)
            .zip(&horizons)
            .map(|((x, o), &h)| {
                let last = x.iter().zip(o).rev().find(|(_, &ob)| ob).map_or(0.0, |(&v, _)| v);
                vec![last; h]
            })
            .collect())
    })?;
    Ok(BaselineReport { mean, persistence })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreqBand {
    pub name: String,
    /// Lower edge, cycles per channel sample (inclusive).
    pub lo: f64,
    /// Upper edge (exclusive).
    pub hi: f64,
}

/// Low / mid / high bands; the high band includes the Nyquist bin.
pub fn default_bands() -> Vec<FreqBand> {
    vec![
        FreqBand { name: "low".into(), lo: 0.0, hi: 0.1 },
        FreqBand { name: "mid".into(), lo: 0.1, hi: 0.25 },
        FreqBand { name: "high".into(), lo: 0.25, hi: 0.5 + 1e-9 },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBiasReport {
    /// Mean `|f*_pred − f*_true|` in cycles per channel sample.
    pub dominant_freq_diff: f64,
    /// Mean amplitude-spectrum RMSE per band (`None` when no analyzed channel
    /// has a bin in the band).
    pub band_rmse: Vec<(String, Option<f64>)>,
    pub analyzed_channels: Vec<usize>,
    pub skipped_channels: Vec<usize>,
    pub aggregation: String,
}

pub const MIN_SPECTRAL_HORIZON: usize = 8;

fn peak_bin(amps: &[f64]) -> usize {
    amps.iter()
        .enumerate()
        .skip(1)
        .fold((0, 0.0), |best, (k, &a)| if a > best.1 { (k, a) } else { best })
        .0
}

/// Spectral comparison of forecasts and targets. Both are indexed
/// `[window][channel][step]`.
pub fn frequency_bias_report(
    preds: &[Vec<Vec<f64>>],
    targets: &[Vec<Vec<f64>>],
    bands: &[FreqBand],
) -> Result<FrequencyBiasReport> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(CtfError::InvalidInput("need matching, non-empty prediction/target sets".into()));
    }
    let nc = targets[0].len();
    let mut analyzed = Vec::new();
    let mut skipped = Vec::new();
    let mut diff_sum = 0.0;
    let mut band_sum = vec![0.0; bands.len()];
    let mut band_count = vec![0usize; bands.len()];
    for c in 0..nc {
        let h = targets[0][c].len();
        if h < MIN_SPECTRAL_HORIZON {
            skipped.push(c);
            continue;
        }
        analyzed.push(c);
        let mut diff = 0.0;
        let mut per_band = vec![0.0; bands.len()];
        for (p, t) in preds.iter().zip(targets) {
            if p[c].len() != h || t[c].len() != h {
                return Err(CtfError::InvalidInput(format!("channel {c} horizon mismatch")));
            }
            let sp = AmplitudeSpectrum::of(&zero_centered(&p[c]), 1.0)?;
            let st = AmplitudeSpectrum::of(&zero_centered(&t[c]), 1.0)?;
            let gap = peak_bin(&sp.amplitudes).abs_diff(peak_bin(&st.amplitudes));
            diff += gap as f64 / h as f64;
            for (b, band) in bands.iter().enumerate() {
                if let Ok(v) = band_rmse(&sp, &st, (band.lo, band.hi)) {
                    per_band[b] += v;
                }
            }
        }
        let nw = preds.len() as f64;
        diff_sum += diff / nw;
        for (b, band) in bands.iter().enumerate() {
            let has_bin = (0..=h / 2).any(|k| {
                let f = k as f64 / h as f64;
                f >= band.lo && f < band.hi
            });
            if has_bin {
                band_sum[b] += per_band[b] / nw;
                band_count[b] += 1;
            }
        }
    }
    if analyzed.is_empty() {
        return Err(CtfError::InvalidInput(format!(
            "no channel has a horizon of at least {MIN_SPECTRAL_HORIZON} samples"
        )));
    }
    Ok(FrequencyBiasReport {
        dominant_freq_diff: diff_sum / analyzed.len() as f64,
        band_rmse: bands
            .iter()
            .enumerate()
            .map(|(b, band)| {
                (band.name.clone(), (band_count[b] > 0).then(|| band_sum[b] / band_count[b] as f64))
            })
            .collect(),
        analyzed_channels: analyzed,
        skipped_channels: skipped,
        aggregation: "mean over windows, then over channels".into(),
    })
}

/// Forecasts and targets (data units) of a model over the test split under a
/// scenario, indexed `[window][channel][step]`.
pub fn scenario_forecasts(
    model: &Model,
    ds: &AsyncDataset,
    scenario: Scenario,
    seed: u64,
    input_len: Option<usize>,
) -> Result<(Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>)> {
    let rmax = ds.max_factor();
    let norm = ds.normalized();
    let (l, h) = (model.config.input_len, model.config.horizon);
    let windows = make_windows(&norm, l, h, rmax, Split::Test)?;
    let raw = make_windows(ds, l, h, rmax, Split::Test)?;
    let preds = windows
        .par_iter()
        .map(|w| {
            let input = prepare_input(w, scenario, &model.plan.lens, seed, input_len)?;
            model.forecast(&input, &ds.stats).map(|f| f.denormalized)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((preds, raw.into_iter().map(|w| w.targets).collect()))
}

/// Clean full-length forecasts over the test split.
pub fn test_forecasts(model: &Model, ds: &AsyncDataset) -> Result<(Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>)> {
    scenario_forecasts(model, ds, Scenario::Clean, 0, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{resample_practical, SplitFractions};
    use crate::spectral::dft;

    fn sine_dataset(len: usize, period: f64) -> AsyncDataset {
        let col: Vec<f64> = (0..len)
            .map(|t| (2.0 * std::f64::consts::PI * t as f64 / period).sin())
            .collect();
        resample_practical(&[col], &["s".to_string()], &[1], SplitFractions::default()).unwrap()
    }

    #[test]
    fn oracle_predictor_scores_zero() {
        let ds = sine_dataset(600, 12.0);
        let r = evaluate_with(&ds, 24, 12, &[6], Scenario::Clean, 0, EvalOptions::default(), |w| {
            let norm = ds.normalized();
            let start = w.origin + 24;
            Ok(vec![norm.values[0][start..start + 12].to_vec()])
        })
        .unwrap();
        assert!(r.cmse < 1e-24 && r.cmae < 1e-12);
    }

    #[test]
    fn zero_ratio_matches_clean() {
        let ds = sine_dataset(600, 12.0);
        let pred = |w: &WindowSample| Ok(vec![vec![w.inputs[0].iter().sum::<f64>(); 12]]);
        let clean = evaluate_with(&ds, 24, 12, &[6], Scenario::Clean, 1, EvalOptions::default(), pred).unwrap();
        let m0 = evaluate_with(
            &ds,
            24,
            12,
            &[6],
            Scenario::Missing { protocol: MissingProtocol::PatchAligned, ratio: 0.0 },
            1,
            EvalOptions::default(),
            pred,
        )
        .unwrap();
        assert_eq!(clean.cmse, m0.cmse);
        assert_eq!(clean.per_window, m0.per_window);
    }

    #[test]
    fn constant_dataset_baselines_are_exact() {
        let cols = vec![vec![3.0; 400], vec![-1.0; 400]];
        let names = vec!["a".to_string(), "b".to_string()];
        let ds = resample_practical(&cols, &names, &[1, 2], SplitFractions::default()).unwrap();
        let b = naive_baselines(&ds, 16, 8).unwrap();
        assert_eq!(b.mean.cmse, 0.0);
        assert_eq!(b.persistence.cmse, 0.0);
    }

    #[test]
    fn persistence_on_sine_matches_analytic_value() {
        // x(t) = sin(wt); predicting x(t0) for x(t0 + j), j = 1..H, with
        // random phase gives E[(sin(a) - sin(a + wj))^2] = 1 - cos(wj).
        let period = 24.0;
        let ds = sine_dataset(20_000, period);
        let h = 12;
        let b = naive_baselines(&ds, 24, h).unwrap();
        let w = 2.0 * std::f64::consts::PI / period;
        let analytic: f64 = (1..=h).map(|j| 1.0 - (w * j as f64).cos()).sum::<f64>() / h as f64;
        assert!((b.persistence.cmse - analytic).abs() / analytic < 0.05);
    }

    #[test]
    fn mean_baseline_matches_target_variance() {
        let ds = crate::data::synth_coupled(&crate::data::SynthConfig {
            base_len: 8000,
            ..Default::default()
        })
        .unwrap();
        let b = naive_baselines(&ds, 48, 24).unwrap();
        let norm = ds.normalized();
        let ws = make_windows(&norm, 48, 24, 4, Split::Test).unwrap();
        let mut oracle = 0.0;
        for c in 0..ds.n_channels() {
            let vals: Vec<f64> = ws.iter().flat_map(|w| w.targets[c].clone()).map(|v| ds.denormalize(c, v)).collect();
            let m = ds.stats.mean[c];
            oracle += vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
        }
        oracle /= ds.n_channels() as f64;
        assert!((b.mean.cmse - oracle).abs() / oracle < 0.05);
    }

    #[test]
    fn misaligned_truncation_rejected() {
        let cols = vec![vec![1.0; 400], vec![2.0; 400]];
        let names = vec!["a".to_string(), "b".to_string()];
        let ds = resample_practical(&cols, &names, &[1, 4], SplitFractions::default()).unwrap();
        let opts = EvalOptions { input_len: Some(6), normalized: false };
        let err = evaluate_with(&ds, 16, 8, &[4, 2], Scenario::Clean, 0, opts, |_| Ok(vec![vec![0.0; 8], vec![0.0; 2]]));
        assert!(matches!(err, Err(CtfError::Config(_))));
    }

    fn tone(n: usize, cycles: f64) -> Vec<f64> {
        (0..n)
            .map(|t| (2.0 * std::f64::consts::PI * cycles * t as f64 / n as f64).sin())
            .collect()
    }

    #[test]
    fn identical_forecasts_have_no_bias() {
        let t = vec![vec![tone(32, 3.0), vec![1.0; 4]]];
        let r = frequency_bias_report(&t, &t, &default_bands()).unwrap();
        assert_eq!(r.dominant_freq_diff, 0.0);
        assert!(r.band_rmse.iter().all(|(_, v)| v.unwrap() == 0.0));
        assert_eq!(r.skipped_channels, vec![1]);
    }

    #[test]
    fn scaled_forecast_keeps_peak_but_loses_amplitude() {
        let truth = vec![vec![tone(32, 3.0)]];
        let half = vec![vec![tone(32, 3.0).iter().map(|v| v * 0.5).collect()]];
        let r = frequency_bias_report(&half, &truth, &default_bands()).unwrap();
        assert_eq!(r.dominant_freq_diff, 0.0);
        // 3/32 cycles per sample sits in the low band
        assert!(r.band_rmse[0].1.unwrap() > 0.0);
        assert!(r.band_rmse[2].1.unwrap() < 1e-9);
    }

    #[test]
    fn two_tone_truth_vs_one_tone_forecast() {
        let n = 64;
        let truth: Vec<f64> = tone(n, 10.0).iter().zip(tone(n, 3.0)).map(|(a, b)| a + 0.5 * b).collect();
        let pred = tone(n, 3.0);
        let r = frequency_bias_report(&[vec![pred.clone()]], &[vec![truth.clone()]], &default_bands()).unwrap();
        let argmax = |x: &[f64]| {
            let s = dft(x);
            (1..=n / 2).max_by(|&a, &b| s[a].norm().partial_cmp(&s[b].norm()).unwrap()).unwrap()
        };
        let gap = argmax(&truth).abs_diff(argmax(&pred)) as f64 / n as f64;
        assert_eq!(gap, 7.0 / 64.0);
        assert!((r.dominant_freq_diff - gap).abs() < 1e-15);
    }
}
