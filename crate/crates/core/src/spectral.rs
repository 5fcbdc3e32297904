//! Discrete Fourier analysis: radix-2 FFT, naive DFT, dominant-frequency
//! detection, band-limited amplitude RMSE and the distortion introduced by
//! linearly interpolating a subsampled signal back onto its fine grid.

use std::f64::consts::PI;

pub use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{CtfError, Result};

/// Default peak-strength ratio for [`dominant_frequency`].
pub const DEFAULT_KAPPA: f64 = 3.0;

fn fft_in_place(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let step = sign * 2.0 * PI / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..len / 2 {
                let w = Complex64::from_polar(1.0, step * k as f64);
                let a = buf[start + k];
                let b = buf[start + k + len / 2] * w;
                buf[start + k] = a + b;
                buf[start + k + len / 2] = a - b;
            }
        }
        len <<= 1;
    }
}

/// Radix-2 FFT. Inputs whose length is not a power of two are zero-padded to
/// the next power of two, so the output may be longer than the input.
pub fn fft(x: &[f64]) -> Result<Vec<Complex64>> {
    if x.is_empty() {
        return Err(CtfError::InvalidInput("fft of an empty sequence".into()));
    }
    let n = x.len().next_power_of_two();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    buf.resize(n, Complex64::new(0.0, 0.0));
    fft_in_place(&mut buf, false);
    Ok(buf)
}

/// Inverse of [`fft`] for power-of-two lengths (includes the `1/n` factor).
pub fn ifft(spectrum: &[Complex64]) -> Result<Vec<Complex64>> {
    let n = spectrum.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(CtfError::InvalidInput(format!(
            "ifft needs a power-of-two length, got {n}"
        )));
    }
    let mut buf = spectrum.to_vec();
    fft_in_place(&mut buf, true);
    buf.iter_mut().for_each(|v| *v /= n as f64);
    Ok(buf)
}

/// O(n²) DFT at the exact input length.
pub fn dft(x: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(t, &v)| {
                    let angle = -2.0 * PI * ((k * t) % n) as f64 / n as f64;
                    Complex64::from_polar(v, angle)
                })
                .sum()
        })
        .collect()
}

/// Spectrum at the exact input length: FFT for powers of two, DFT otherwise.
pub fn exact_spectrum(x: &[f64]) -> Result<Vec<Complex64>> {
    if x.is_empty() {
        return Err(CtfError::InvalidInput("spectrum of an empty sequence".into()));
    }
    if x.len().is_power_of_two() {
        fft(x)
    } else {
        Ok(dft(x))
    }
}

pub fn zero_centered(x: &[f64]) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len().max(1) as f64;
    x.iter().map(|v| v - mean).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeSpectrum {
    pub n: usize,
    /// `|X_k|` for `k = 0..=n/2`.
    pub amplitudes: Vec<f64>,
    pub sample_rate: f64,
}

impl AmplitudeSpectrum {
    pub fn of(x: &[f64], sample_rate: f64) -> Result<Self> {
        let spec = exact_spectrum(x)?;
        let n = x.len();
        Ok(AmplitudeSpectrum {
            n,
            amplitudes: spec[..=n / 2].iter().map(|c| c.norm()).collect(),
            sample_rate,
        })
    }

    pub fn frequency(&self, bin: usize) -> f64 {
        bin as f64 * self.sample_rate / self.n as f64
    }
}

/// Argmax over non-DC bins of an amplitude spectrum, accepted only when the
/// peak is at least `kappa` times the mean of the remaining non-DC bins.
pub fn dominant_bin(amplitudes: &[f64], kappa: f64) -> Option<usize> {
    if amplitudes.len() < 3 {
        return None;
    }
    let (k, peak) = amplitudes
        .iter()
        .enumerate()
        .skip(1)
        .fold((0, f64::NEG_INFINITY), |best, (k, &a)| {
            if a > best.1 {
                (k, a)
            } else {
                best
            }
        });
    if peak <= 0.0 || !peak.is_finite() {
        return None;
    }
    let others = amplitudes.len() - 2;
    let rest: f64 = amplitudes[1..].iter().sum::<f64>() - peak;
    let mean = rest / others as f64;
    (peak >= kappa * mean).then_some(k)
}

/// Dominant frequency bin (cycles per sequence length) of a zero-centered
/// sequence, or `None` when no bin stands out.
pub fn dominant_frequency(x: &[f64], kappa: f64) -> Option<usize> {
    if x.len() < 4 {
        return None;
    }
    let centered = zero_centered(x);
    let spec = AmplitudeSpectrum::of(&centered, 1.0).ok()?;
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    // round-off from centering a constant must not register as a peak
    if spec.amplitudes.iter().skip(1).all(|&a| a <= 1e-12 * scale * x.len() as f64) {
        return None;
    }
    dominant_bin(&spec.amplitudes, kappa)
}

/// RMSE between two amplitude spectra over bins whose frequency lies in
/// `[band.0, band.1)`.
pub fn band_rmse(
    pred: &AmplitudeSpectrum,
    truth: &AmplitudeSpectrum,
    band: (f64, f64),
) -> Result<f64> {
    if pred.n != truth.n || pred.sample_rate != truth.sample_rate {
        return Err(CtfError::InvalidInput(format!(
            "spectra differ: n {} vs {}, rate {} vs {}",
            pred.n, truth.n, pred.sample_rate, truth.sample_rate
        )));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for k in 0..truth.amplitudes.len() {
        let f = truth.frequency(k);
        if f >= band.0 && f < band.1 {
            let d = pred.amplitudes[k] - truth.amplitudes[k];
            acc += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(CtfError::InvalidInput(format!(
            "band [{}, {}) contains no bins",
            band.0, band.1
        )));
    }
    Ok((acc / count as f64).sqrt())
}

/// Linear interpolation of coarse samples (taken at fine positions `k * r`)
/// onto a fine grid of length `n`; positions past the last coarse sample hold
/// its value.
pub fn linear_upsample(coarse: &[f64], r: usize, n: usize) -> Vec<f64> {
    (0..n)
        .map(|t| {
            let k = t / r;
            let frac = (t % r) as f64 / r as f64;
            match (coarse.get(k), coarse.get(k + 1)) {
                (Some(&a), Some(&b)) => a + (b - a) * frac,
                (Some(&a), None) => a,
                _ => *coarse.last().unwrap_or(&0.0),
            }
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistortionReport {
    pub n: usize,
    pub factor: usize,
    /// `|X̃_k| / |X_k|` for `k = 0..=n/2`.
    pub attenuation: Vec<f64>,
    /// `∠X̃_k − ∠X_k` wrapped to `(−π, π]`.
    pub phase_delay: Vec<f64>,
    /// `sinc²` of the bin frequency measured in coarse-grid cycles; reference
    /// curve only.
    pub reference: Vec<f64>,
}

fn wrap_phase(p: f64) -> f64 {
    let mut w = p % (2.0 * PI);
    if w <= -PI {
        w += 2.0 * PI;
    } else if w > PI {
        w -= 2.0 * PI;
    }
    w
}

fn sinc_sq(f: f64) -> f64 {
    if f == 0.0 {
        1.0
    } else {
        let s = (PI * f).sin() / (PI * f);
        s * s
    }
}

/// Subsample `x` by `r`, linearly interpolate back to the fine grid and
/// compare per-bin amplitudes and phases against the original.
pub fn interp_distortion_report(x: &[f64], r: usize) -> Result<DistortionReport> {
    let n = x.len();
    if r == 0 || n == 0 || !n.is_multiple_of(r) {
        return Err(CtfError::InvalidInput(format!(
            "factor {r} does not divide length {n}"
        )));
    }
    let coarse: Vec<f64> = x.iter().step_by(r).copied().collect();
    let interp = linear_upsample(&coarse, r, n);
    let orig = exact_spectrum(x)?;
    let rec = exact_spectrum(&interp)?;
    let scale = orig.iter().take(n / 2 + 1).fold(0.0f64, |m, c| m.max(c.norm()));
    let tiny = 1e-9 * scale.max(1e-300);
    let mut attenuation = Vec::with_capacity(n / 2 + 1);
    let mut phase_delay = Vec::with_capacity(n / 2 + 1);
    for k in 0..=n / 2 {
        let (a, b) = (orig[k], rec[k]);
        let (na, nb) = (a.norm(), b.norm());
        attenuation.push(match (na <= tiny, nb <= tiny) {
            (true, true) => 1.0,
            (true, false) => f64::INFINITY,
            _ => nb / na,
        });
        phase_delay.push(if na <= tiny || nb <= tiny {
            0.0
        } else {
            wrap_phase(b.arg() - a.arg())
        });
    }
    let reference = (0..=n / 2)
        .map(|k| sinc_sq(k as f64 * r as f64 / n as f64))
        .collect();
    Ok(DistortionReport {
        n,
        factor: r,
        attenuation,
        phase_delay,
        reference,
    })
}
