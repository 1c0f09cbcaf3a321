//! Noisy mixture synthesis from clean-speech, noise and (optionally) room impulse
//! response pools.

mod manifest;
pub mod synth;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::config::ConfigError;
use crate::dsp::{DspError, Waveform};

pub use manifest::{
    build_manifest, build_manifest_from_pools, list_wavs, parse_snr_grid, read_manifest, render_manifest,
    render_record, write_manifest, ManifestSpec, MixtureRecord, Pools, Split,
};

pub type Result<T> = std::result::Result<T, DatagenError>;

#[derive(Error, Debug)]
pub enum DatagenError {
    #[error("silent utterance")]
    SilentUtterance,
    #[error("silent noise")]
    SilentNoise,
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: {0} vs {1} samples")]
    LengthMismatch(usize, usize),
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    RateMismatch(u32, u32),
    #[error("no wav files in {0}")]
    EmptyPool(String),
    #[error("invalid manifest spec: {0}")]
    InvalidSpec(String),
    #[error("manifest line {line}: {source}")]
    ManifestLine { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Peak level after per-utterance normalization.
pub const PEAK_TARGET: f64 = 0.95;
/// Taps at or below this count use direct convolution.
const SPARSE_RIR_TAPS: usize = 64;

pub fn normalize_utterance(w: &Waveform) -> Result<Waveform> {
    let peak = w.peak();
    if peak == 0.0 {
        return Err(DatagenError::SilentUtterance);
    }
    if peak == PEAK_TARGET {
        return Ok(w.clone());
    }
    Ok(w.scaled(PEAK_TARGET / peak))
}

/// Gain `g` such that `speech + g * noise` has the requested SNR over mean-square power.
pub fn snr_gain(speech: &Waveform, noise: &Waveform, snr_db: f64) -> Result<f64> {
    if speech.len() != noise.len() {
        return Err(DatagenError::LengthMismatch(speech.len(), noise.len()));
    }
    let ps = speech.power();
    let pn = noise.power();
    if ps == 0.0 {
        return Err(DatagenError::SilentUtterance);
    }
    if pn == 0.0 {
        return Err(DatagenError::SilentNoise);
    }
    Ok((ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// Crop (seeded position) or tile with 10 ms linear crossfades to exactly `target_len`.
pub fn fit_noise(noise: &Waveform, target_len: usize, seed: u64) -> Result<Waveform> {
    let x = noise.samples();
    if x.is_empty() {
        return Err(DatagenError::EmptyInput);
    }
    let rate = noise.sample_rate();
    if x.len() == target_len {
        return Ok(noise.clone());
    }
    if x.len() > target_len {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = rng.random_range(0..=x.len() - target_len);
        return Ok(Waveform::new(x[start..start + target_len].to_vec(), rate)?);
    }
    let xf = ((rate / 100) as usize).min(x.len() / 2);
    let mut out = Vec::with_capacity(target_len + x.len());
    out.extend_from_slice(x);
    while out.len() < target_len {
        let end = out.len();
        for i in 0..xf {
            let a = (i as f64 + 0.5) / xf as f64;
            let o = &mut out[end - xf + i];
            *o = *o * (1.0 - a) + x[i] * a;
        }
        out.extend_from_slice(&x[xf..]);
    }
    out.truncate(target_len);
    Ok(Waveform::new(out, rate)?)
}

fn convolve_truncated(x: &[f64], h: &[f64]) -> Vec<f64> {
    let n = x.len();
    let taps: Vec<(usize, f64)> = h
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(k, &v)| (k, v))
        .collect();
    if taps.len() <= SPARSE_RIR_TAPS {
        let mut y = vec![0.0; n];
        for &(k, hv) in &taps {
            if k >= n {
                continue;
            }
            for (yo, &xv) in y[k..].iter_mut().zip(x) {
                *yo += hv * xv;
            }
        }
        return y;
    }
    let full = n + h.len() - 1;
    let size = full.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let pad = |s: &[f64]| {
        let mut b = vec![Complex64::default(); size];
        for (d, &v) in b.iter_mut().zip(s) {
            d.re = v;
        }
        b
    };
    let (mut a, mut b) = (pad(x), pad(h));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (u, v) in a.iter_mut().zip(&b) {
        *u *= v;
    }
    inv.process(&mut a);
    a[..n].iter().map(|c| c.re / size as f64).collect()
}

/// Linear convolution with `rir`, truncated to the input length and rescaled to the
/// input's peak.
pub fn apply_reverb(w: &Waveform, rir: &Waveform) -> Result<Waveform> {
    if rir.is_empty() || w.is_empty() {
        return Err(DatagenError::EmptyInput);
    }
    if w.sample_rate() != rir.sample_rate() {
        return Err(DatagenError::RateMismatch(w.sample_rate(), rir.sample_rate()));
    }
    let y = Waveform::new(convolve_truncated(w.samples(), rir.samples()), w.sample_rate())?;
    let (p_in, p_out) = (w.peak(), y.peak());
    if p_out == 0.0 || p_in == p_out {
        return Ok(y);
    }
    Ok(y.scaled(p_in / p_out))
}

/// Result of mixing one speech/noise pair.
#[derive(Debug, Clone)]
pub struct Mixture {
    pub noisy: Waveform,
    /// Training target: the (reverberant) speech, after any anti-clipping rescale.
    pub clean: Waveform,
    /// Effective linear gain on the fitted noise in `noisy`.
    pub applied_gain: f64,
    /// Joint anti-clipping factor applied to both signals (1 when unclipped).
    pub rescale: f64,
}

/// `noisy = clean + g * noise` at `snr_db`, where `clean` is `speech` convolved with `rir`
/// when given. If the mixture peak exceeds 1, both signals are rescaled to peak 0.95.
pub fn mix(speech: &Waveform, noise: &Waveform, snr_db: f64, rir: Option<&Waveform>) -> Result<Mixture> {
    if speech.len() != noise.len() {
        return Err(DatagenError::LengthMismatch(speech.len(), noise.len()));
    }
    if speech.sample_rate() != noise.sample_rate() {
        return Err(DatagenError::RateMismatch(speech.sample_rate(), noise.sample_rate()));
    }
    let clean = match rir {
        Some(r) => apply_reverb(speech, r)?,
        None => speech.clone(),
    };
    let g = snr_gain(&clean, noise, snr_db)?;
    let noisy: Vec<f64> = clean
        .samples()
        .iter()
        .zip(noise.samples())
        .map(|(s, n)| s + g * n)
        .collect();
    let noisy = Waveform::new(noisy, clean.sample_rate())?;
    let peak = noisy.peak();
    if peak > 1.0 {
        let r = PEAK_TARGET / peak;
        return Ok(Mixture {
            noisy: noisy.scaled(r),
            clean: clean.scaled(r),
            applied_gain: g * r,
            rescale: r,
        });
    }
    Ok(Mixture {
        noisy,
        clean,
        applied_gain: g,
        rescale: 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wf(v: Vec<f64>) -> Waveform {
        Waveform::new(v, 16_000).unwrap()
    }

    #[test]
    fn normalization_cases() {
        let y = normalize_utterance(&wf(vec![0.5, -0.25])).unwrap();
        assert!((y.samples()[0] - 0.95).abs() < 1e-15);
        assert!((y.samples()[1] + 0.475).abs() < 1e-15);
        let same = wf(vec![0.95, 0.1]);
        assert_eq!(normalize_utterance(&same).unwrap(), same);
        let y = normalize_utterance(&wf(vec![-2.0, 1.0])).unwrap();
        assert!((y.samples()[1] - 0.475).abs() < 1e-15);
        assert!(matches!(
            normalize_utterance(&wf(vec![0.0; 4])),
            Err(DatagenError::SilentUtterance)
        ));
    }

    #[test]
    fn equal_power_zero_db_gain_is_one() {
        let s = wf(vec![1.0, -1.0, 1.0, -1.0]);
        let n = wf(vec![-1.0, 1.0, 1.0, -1.0]);
        assert_eq!(snr_gain(&s, &n, 0.0).unwrap(), 1.0);
        assert!(matches!(
            snr_gain(&s, &wf(vec![0.0; 4]), 0.0),
            Err(DatagenError::SilentNoise)
        ));
    }

    #[test]
    fn short_noise_tiles_with_crossfade() {
        let n = wf((0..1000).map(|i| (i as f64 * 0.1).sin()).collect());
        let y = fit_noise(&n, 5000, 1).unwrap();
        assert_eq!(y.len(), 5000);
        assert_eq!(&y.samples()[..840], &n.samples()[..840]);
    }
}
