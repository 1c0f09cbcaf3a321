//! Synthetic stand-ins for speech and noise, used for toy corpora and self-tests.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dsp::Waveform;

/// Harmonic tone complex with a gliding pitch and syllable-rate on/off envelope.
///
/// Pitch, formant-like spectral tilt, syllable rate and pause pattern all derive from
/// `seed`, so distinct seeds give distinct "talkers".
pub fn tone_complex(seed: u64, len: usize, rate: u32) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = rate as f64;
    let f0_base = rng.random_range(90.0..240.0);
    let glide = rng.random_range(0.05..0.25);
    let glide_hz = rng.random_range(0.3..1.5);
    let syl_hz = rng.random_range(2.5..5.5);
    let formant = rng.random_range(500.0..1500.0);
    let harmonics = ((3800.0 / f0_base) as usize).max(1);
    let amps: Vec<f64> = (1..=harmonics)
        .map(|h| {
            let f = h as f64 * f0_base;
            (-((f - formant) / 900.0).powi(2)).exp() + 0.3 / h as f64
        })
        .collect();
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    // one pause roughly every four syllables
    let n_syl = (len as f64 / fs * syl_hz).ceil() as usize + 1;
    let mut active: Vec<bool> = (0..n_syl).map(|_| rng.random_bool(0.78)).collect();
    active[0] = true;

    let mut phase0 = 0.0;
    let samples = (0..len)
        .map(|n| {
            let t = n as f64 / fs;
            let f0 = f0_base * (1.0 + glide * (2.0 * PI * glide_hz * t).sin());
            phase0 += 2.0 * PI * f0 / fs;
            let syl_pos = t * syl_hz;
            let env = if active[syl_pos as usize] {
                (PI * syl_pos.fract()).sin().powi(2)
            } else {
                0.0
            };
            let v: f64 = amps
                .iter()
                .zip(&phases)
                .enumerate()
                .map(|(h, (a, p))| {
                    let k = (h + 1) as f64;
                    if k * f0 < fs / 2.0 {
                        a * (k * phase0 + p).sin()
                    } else {
                        0.0
                    }
                })
                .sum();
            env * v
        })
        .collect();
    Waveform::new(samples, rate).expect("finite by construction")
}

/// Gaussian noise through a one-pole lowpass; `color` in [0, 1) (0 = white).
pub fn colored_noise(seed: u64, len: usize, rate: u32, color: f64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = 0.0;
    let samples = (0..len)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut rng);
            state = color * state + (1.0 - color) * e;
            state
        })
        .collect();
    Waveform::new(samples, rate).expect("finite by construction")
}

/// Exponentially decaying random impulse response with a unit direct path.
pub fn synthetic_rir(seed: u64, len: usize, rate: u32, rt60_s: f64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let decay = (-6.9 / (rt60_s * rate as f64)).exp();
    let mut g = 0.3;
    let samples = (0..len)
        .map(|n| {
            if n == 0 {
                return 1.0;
            }
            g *= decay;
            let e: f64 = StandardNormal.sample(&mut rng);
            g * e
        })
        .collect();
    Waveform::new(samples, rate).expect("finite by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_non_silent() {
        let a = tone_complex(3, 16_000, 16_000);
        assert_eq!(a, tone_complex(3, 16_000, 16_000));
        assert_ne!(a, tone_complex(4, 16_000, 16_000));
        assert!(a.peak() > 0.0);
        assert!(colored_noise(1, 100, 16_000, 0.5).power() > 0.0);
        assert_eq!(synthetic_rir(1, 10, 16_000, 0.3).samples()[0], 1.0);
    }
}
