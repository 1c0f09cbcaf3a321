//! Short-time objective intelligibility, following the reference implementation's
//! constants and signal flow (including its Octave-compatible resampler).

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{MetricsError, Result};
use crate::dsp::Waveform;

const FS: u32 = 10_000;
const N_FRAME: usize = 256;
const HOP: usize = N_FRAME / 2;
const NFFT: usize = 512;
const NUM_BANDS: usize = 15;
const MIN_FREQ: f64 = 150.0;
/// Frames per intermediate-intelligibility segment (384 ms).
const N_SEG: usize = 30;
const BETA_DB: f64 = -15.0;
const DYN_RANGE_DB: f64 = 40.0;
const EPS: f64 = f64::EPSILON;

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let (mut term, mut sum) = (1.0, 1.0);
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Kaiser-windowed sinc anti-aliasing filter, normalized to unit sum.
fn resample_filter(p: usize, q: usize) -> Vec<f64> {
    let stop = 1.0 / (2 * p.max(q)) as f64;
    let roll_off = stop / 10.0;
    let rejection_db = 60.0;
    let l = ((rejection_db - 8.0) / (28.714 * roll_off)).ceil() as i64;
    let beta = 0.1102 * (rejection_db - 8.7);
    let m = (2 * l + 1) as f64;
    let i0b = bessel_i0(beta);
    let h: Vec<f64> = (-l..=l)
        .enumerate()
        .map(|(n, t)| {
            let r = 2.0 * n as f64 / (m - 1.0) - 1.0;
            let w = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / i0b;
            w * 2.0 * p as f64 * stop * sinc(2.0 * stop * t as f64)
        })
        .collect();
    let s: f64 = h.iter().sum();
    h.into_iter().map(|v| v / s).collect()
}

/// Polyphase rational resampling by `p/q` with zero-padded edges; output length
/// `ceil(len * p / q)`.
pub(crate) fn resample(x: &[f64], to: u32, from: u32) -> Vec<f64> {
    let g = gcd(to as u64, from as u64);
    let (p, q) = ((to as u64 / g) as usize, (from as u64 / g) as usize);
    if p == q {
        return x.to_vec();
    }
    let h = resample_filter(p, q);
    let half = (h.len() - 1) / 2;
    let n_out = (x.len() * p).div_ceil(q);
    (0..n_out)
        .map(|m| {
            // y[m] = p * sum_i x[i] h[half + m q - i p]
            let c = (m * q) as i64;
            let lo = ((c - half as i64).max(0) as usize).div_ceil(p);
            let hi = (((c + half as i64) / p as i64) as usize).min(x.len().saturating_sub(1));
            let mut acc = 0.0;
            for (i, &xi) in x.iter().enumerate().take(hi + 1).skip(lo) {
                let k = half as i64 + c - (i * p) as i64;
                acc += xi * h[k as usize];
            }
            acc * p as f64
        })
        .collect()
}

/// `hanning(n + 2)[1..n + 1]`: the symmetric window without its zero end points.
fn hanning(n: usize) -> Vec<f64> {
    (1..=n)
        .map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / (n + 1) as f64).cos())
        .collect()
}

fn frame_starts(len: usize) -> impl Iterator<Item = usize> {
    (0..len.saturating_sub(N_FRAME)).step_by(HOP)
}

/// Drop frames more than 40 dB below the loudest clean frame and overlap-add the rest.
fn remove_silent_frames(x: &[f64], y: &[f64], w: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let frames: Vec<(Vec<f64>, Vec<f64>)> = frame_starts(x.len())
        .map(|i| {
            (
                (0..N_FRAME).map(|k| w[k] * x[i + k]).collect(),
                (0..N_FRAME).map(|k| w[k] * y[i + k]).collect(),
            )
        })
        .collect();
    let energies: Vec<f64> = frames
        .iter()
        .map(|(f, _)| 20.0 * (f.iter().map(|v| v * v).sum::<f64>().sqrt() + EPS).log10())
        .collect();
    if frames.is_empty() || energies.iter().all(|&e| e <= 20.0 * EPS.log10()) {
        return Err(MetricsError::NoActiveFrames);
    }
    let max = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<&(Vec<f64>, Vec<f64>)> = frames
        .iter()
        .zip(&energies)
        .filter(|(_, &e)| max - DYN_RANGE_DB - e < 0.0)
        .map(|(f, _)| f)
        .collect();
    let out_len = (kept.len() - 1) * HOP + N_FRAME;
    let (mut xs, mut ys) = (vec![0.0; out_len], vec![0.0; out_len]);
    for (j, (fx, fy)) in kept.iter().enumerate() {
        for k in 0..N_FRAME {
            xs[j * HOP + k] += fx[k];
            ys[j * HOP + k] += fy[k];
        }
    }
    Ok((xs, ys))
}

/// Power spectra of windowed frames, `frames x (NFFT/2 + 1)`.
fn power_frames(x: &[f64], w: &[f64]) -> Vec<Vec<f64>> {
    let fft = FftPlanner::<f64>::new().plan_fft_forward(NFFT);
    let mut buf = vec![Complex64::default(); NFFT];
    frame_starts(x.len())
        .map(|i| {
            buf.iter_mut().for_each(|c| *c = Complex64::default());
            for k in 0..N_FRAME {
                buf[k].re = w[k] * x[i + k];
            }
            fft.process(&mut buf);
            buf[..=NFFT / 2].iter().map(|c| c.norm_sqr()).collect()
        })
        .collect()
}

/// Bin ranges `[lo, hi)` of the one-third-octave bands.
fn third_octave_bands() -> Vec<(usize, usize)> {
    let f: Vec<f64> = (0..=NFFT / 2).map(|k| k as f64 * FS as f64 / NFFT as f64).collect();
    let nearest = |target: f64| {
        let mut best = 0;
        for (i, &v) in f.iter().enumerate() {
            if (v - target).powi(2) < (f[best] - target).powi(2) {
                best = i;
            }
        }
        best
    };
    (0..NUM_BANDS)
        .map(|k| {
            let k = k as f64;
            let lo = MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

fn band_envelopes(power: &[Vec<f64>], bands: &[(usize, usize)]) -> Vec<Vec<f64>> {
    bands
        .iter()
        .map(|&(lo, hi)| power.iter().map(|p| p[lo..hi].iter().sum::<f64>().sqrt()).collect())
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Intelligibility score of `degraded` against `clean`; both must share length and rate.
pub fn stoi(clean: &Waveform, degraded: &Waveform) -> Result<f64> {
    if clean.len() != degraded.len() {
        return Err(MetricsError::LengthMismatch(clean.len(), degraded.len()));
    }
    if clean.sample_rate() != degraded.sample_rate() {
        return Err(MetricsError::RateMismatch(clean.sample_rate(), degraded.sample_rate()));
    }
    let x = resample(clean.samples(), FS, clean.sample_rate());
    let y = resample(degraded.samples(), FS, degraded.sample_rate());
    let w = hanning(N_FRAME);
    let (x, y) = remove_silent_frames(&x, &y, &w)?;
    let (px, py) = (power_frames(&x, &w), power_frames(&y, &w));
    if px.len() < N_SEG {
        return Err(MetricsError::TooShort {
            frames: px.len(),
            need: N_SEG,
        });
    }
    let bands = third_octave_bands();
    let (xt, yt) = (band_envelopes(&px, &bands), band_envelopes(&py, &bands));
    let clip = 1.0 + 10f64.powf(-BETA_DB / 20.0);
    let segments = px.len() - N_SEG + 1;
    let mut total = 0.0;
    for m in N_SEG..=px.len() {
        for b in 0..NUM_BANDS {
            let xs = &xt[b][m - N_SEG..m];
            let ys = &yt[b][m - N_SEG..m];
            let alpha = norm(xs) / (norm(ys) + EPS);
            let yp: Vec<f64> = ys
                .iter()
                .zip(xs)
                .map(|(&yv, &xv)| (yv * alpha).min(xv * clip))
                .collect();
            let (mx, my) = (
                xs.iter().sum::<f64>() / N_SEG as f64,
                yp.iter().sum::<f64>() / N_SEG as f64,
            );
            let xc: Vec<f64> = xs.iter().map(|v| v - mx).collect();
            let yc: Vec<f64> = yp.iter().map(|v| v - my).collect();
            let (nx, ny) = (norm(&xc) + EPS, norm(&yc) + EPS);
            total += xc.iter().zip(&yc).map(|(a, b)| (a / nx) * (b / ny)).sum::<f64>();
        }
    }
    Ok(total / (segments * NUM_BANDS) as f64)
}
