use std::collections::HashMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specden_core::datagen::synth::{colored_noise, synthetic_rir, tone_complex};
use specden_core::datagen::*;
use specden_core::dsp::{read_wav, write_wav, Waveform, SAMPLE_RATE};

fn wf(v: Vec<f64>) -> Waveform {
    Waveform::new(v, SAMPLE_RATE).unwrap()
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// SNR measured from the rendered pair: clean vs (noisy - clean).
fn measured_snr(noisy: &Waveform, clean: &Waveform) -> f64 {
    let resid: Vec<f64> = noisy
        .samples()
        .iter()
        .zip(clean.samples())
        .map(|(n, c)| n - c)
        .collect();
    10.0 * (power(clean.samples()) / power(&resid)).log10()
}

fn naive_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|n| (0..h.len().min(n + 1)).map(|k| h[k] * x[n - k]).sum())
        .collect()
}

#[test]
fn snr_gain_matches_power_oracle() {
    let s = colored_noise(1, 8000, SAMPLE_RATE, 0.3);
    let n = colored_noise(2, 8000, SAMPLE_RATE, 0.6);
    let n = n.scaled((s.power() / n.power()).sqrt());
    let g = snr_gain(&s, &n, 20.0).unwrap();
    assert!((g - 0.1).abs() < 1e-12);
    let scaled: Vec<f64> = n.samples().iter().map(|v| g * v).collect();
    let snr = 10.0 * (power(s.samples()) / power(&scaled)).log10();
    assert!((snr - 20.0).abs() < 1e-9);

    let s2 = s.scaled(2.0);
    let g = snr_gain(&s2, &n, 0.0).unwrap();
    assert!((g - 2.0).abs() < 1e-12);
}

#[test]
fn two_hundred_mixtures_hit_requested_snr() {
    let grid: Vec<f64> = (0..=20).map(f64::from).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut clipped = 0;
    for i in 0..200u64 {
        let snr = grid[rng.random_range(0..grid.len())];
        let s = normalize_utterance(&tone_complex(i, 16_000, SAMPLE_RATE)).unwrap();
        let n = normalize_utterance(&colored_noise(1000 + i, 16_000, SAMPLE_RATE, 0.4)).unwrap();
        let m = mix(&s, &n, snr, None).unwrap();
        let got = measured_snr(&m.noisy, &m.clean);
        assert!((got - snr).abs() <= 0.01, "mixture {i}: {got} vs {snr}");
        if m.rescale < 1.0 {
            clipped += 1;
            assert!((m.noisy.peak() - PEAK_TARGET).abs() < 1e-12);
        } else {
            // noisy - clean = g * noise exactly
            for ((a, b), c) in m.noisy.samples().iter().zip(m.clean.samples()).zip(n.samples()) {
                assert!((a - b - m.applied_gain * c).abs() < 1e-9);
            }
        }
    }
    assert!(clipped > 0, "anti-clipping path never exercised");
}

#[test]
fn quiet_noise_keeps_noisy_close_to_clean() {
    let s = normalize_utterance(&tone_complex(5, 16_000, SAMPLE_RATE)).unwrap();
    let n = normalize_utterance(&colored_noise(6, 16_000, SAMPLE_RATE, 0.0)).unwrap();
    let m = mix(&s, &n, 20.0, None).unwrap();
    // time-domain SI-SDR oracle with mean removal
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let (mc, mn) = (mean(m.clean.samples()), mean(m.noisy.samples()));
    let c: Vec<f64> = m.clean.samples().iter().map(|v| v - mc).collect();
    let e: Vec<f64> = m.noisy.samples().iter().map(|v| v - mn).collect();
    let dot: f64 = c.iter().zip(&e).map(|(a, b)| a * b).sum();
    let cc: f64 = c.iter().map(|a| a * a).sum();
    let t: Vec<f64> = c.iter().map(|v| v * dot / cc).collect();
    let r: f64 = t.iter().zip(&e).map(|(a, b)| (b - a).powi(2)).sum();
    let tt: f64 = t.iter().map(|a| a * a).sum();
    assert!(10.0 * (tt / r).log10() >= 19.0);
}

#[test]
fn reverb_matches_naive_convolution() {
    let x = tone_complex(8, 4000, SAMPLE_RATE);
    let mut h = vec![0.0; 161];
    h[0] = 1.0;
    h[160] = 0.5;
    let y = apply_reverb(&x, &wf(h.clone())).unwrap();
    let direct = naive_convolve(x.samples(), &h);
    let peak_d = direct.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let k = x.peak() / peak_d;
    for (a, b) in y.samples().iter().zip(&direct) {
        assert!((a - b * k).abs() < 1e-12);
    }

    // dense RIR takes the FFT path
    let rir = synthetic_rir(9, 2000, SAMPLE_RATE, 0.2);
    let y = apply_reverb(&x, &rir).unwrap();
    let direct = naive_convolve(x.samples(), rir.samples());
    let peak_d = direct.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (a, b) in y.samples().iter().zip(&direct) {
        assert!((a - b * x.peak() / peak_d).abs() < 1e-9);
    }
    assert!((y.peak() - x.peak()).abs() < 1e-12);
}

#[test]
fn identity_rir_is_bit_exact() {
    let x = tone_complex(10, 4000, SAMPLE_RATE);
    assert_eq!(apply_reverb(&x, &wf(vec![1.0])).unwrap(), x);
    assert_eq!(apply_reverb(&x, &wf(vec![0.5, 0.0])).unwrap(), x);
    let n = colored_noise(11, 4000, SAMPLE_RATE, 0.2);
    let dry = mix(&x, &n, 5.0, None).unwrap();
    let wet = mix(&x, &n, 5.0, Some(&wf(vec![1.0]))).unwrap();
    assert_eq!(dry.noisy, wet.noisy);
    assert_eq!(dry.clean, wet.clean);
    assert_eq!(dry.applied_gain, wet.applied_gain);

    let other_rate = Waveform::new(vec![1.0], 8000).unwrap();
    assert!(matches!(
        apply_reverb(&x, &other_rate),
        Err(DatagenError::RateMismatch(..))
    ));
}

#[test]
fn fit_noise_contracts() {
    let long = colored_noise(12, 480_000, SAMPLE_RATE, 0.1);
    assert_eq!(fit_noise(&long, 480_000, 3).unwrap(), long);
    let short = colored_noise(13, 16_000, SAMPLE_RATE, 0.1);
    let a = fit_noise(&short, 480_000, 3).unwrap();
    assert_eq!(a.len(), 480_000);
    assert_eq!(a, fit_noise(&short, 480_000, 3).unwrap());
    let crop = fit_noise(&long, 1000, 4).unwrap();
    assert_eq!(crop, fit_noise(&long, 1000, 4).unwrap());
    let start = long
        .samples()
        .windows(1000)
        .position(|w| w == crop.samples())
        .expect("crop is contiguous");
    assert!(start <= 479_000);
    assert!(fit_noise(&wf(vec![]), 10, 0).is_err());
}

fn fake_pools(n: usize) -> Pools {
    Pools {
        speech: (0..n).map(|i| PathBuf::from(format!("s{i}.wav"))).collect(),
        noise: (0..n).map(|i| PathBuf::from(format!("n{i}.wav"))).collect(),
        rir: vec![],
    }
}

#[test]
fn manifest_counts_and_coverage() {
    let mut spec = ManifestSpec::new("s".into(), "n".into(), 10.0, Split::Test);
    spec.seed = 42;
    let recs = build_manifest_from_pools(&spec, &fake_pools(5)).unwrap();
    assert_eq!(recs.len(), 1200);
    for snr in &spec.snr_grid {
        assert!(recs.iter().any(|r| r.snr_db == *snr));
    }
    assert_eq!(recs[7].mixture_id, "test_00007");
    assert!(recs.iter().all(|r| r.applied_gain.is_none() && r.duration_s == 30.0));

    spec.target_hours = 1.0;
    assert_eq!(build_manifest_from_pools(&spec, &fake_pools(5)).unwrap().len(), 120);
}

#[test]
fn small_manifest_uses_distinct_snrs() {
    let mut spec = ManifestSpec::new("s".into(), "n".into(), 5.0 * 30.0 / 3600.0, Split::Train);
    spec.seed = 1;
    let recs = build_manifest_from_pools(&spec, &fake_pools(2)).unwrap();
    assert_eq!(recs.len(), 5);
    let mut snrs: Vec<f64> = recs.iter().map(|r| r.snr_db).collect();
    snrs.sort_by(f64::total_cmp);
    snrs.dedup();
    assert_eq!(snrs.len(), 5);
}

#[test]
fn snr_histogram_is_uniform_within_three_sigma() {
    let mut spec = ManifestSpec::new("s".into(), "n".into(), 10_000.0 * 30.0 / 3600.0, Split::Train);
    spec.seed = 2024;
    let recs = build_manifest_from_pools(&spec, &fake_pools(3)).unwrap();
    assert_eq!(recs.len(), 10_000);
    let mut hist: HashMap<i64, usize> = HashMap::new();
    for r in &recs {
        *hist.entry(r.snr_db as i64).or_default() += 1;
    }
    let p: f64 = 1.0 / 21.0;
    let mean = 10_000.0 * p;
    let sigma = (10_000.0 * p * (1.0 - p)).sqrt();
    assert_eq!(hist.len(), 21);
    for (snr, &c) in &hist {
        assert!((c as f64 - mean).abs() <= 3.0 * sigma, "snr {snr}: {c}");
    }
}

#[test]
fn manifest_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = ManifestSpec::new("s".into(), "n".into(), 0.5, Split::Val);
    spec.seed = 9;
    let a = build_manifest_from_pools(&spec, &fake_pools(4)).unwrap();
    let b = build_manifest_from_pools(&spec, &fake_pools(4)).unwrap();
    let (pa, pb) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    write_manifest(&pa, &a).unwrap();
    write_manifest(&pb, &b).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    assert_eq!(read_manifest(&pa).unwrap(), a);
    let first = std::fs::read_to_string(&pa).unwrap();
    let line: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    for key in [
        "mixture_id",
        "speech_path",
        "noise_path",
        "snr_db",
        "applied_gain",
        "rir_path",
        "split",
        "seed",
        "duration_s",
    ] {
        assert!(line.get(key).is_some(), "missing key {key}");
    }
}

#[test]
fn rendering_is_deterministic_and_aligned() {
    let dir = tempfile::tempdir().unwrap();
    let (sd, nd, rd) = (dir.path().join("sp"), dir.path().join("no"), dir.path().join("rir"));
    for (i, d) in [&sd, &nd, &rd].iter().enumerate() {
        std::fs::create_dir_all(d).unwrap();
        for k in 0..2u64 {
            let w = match i {
                0 => tone_complex(k, 24_000, SAMPLE_RATE).scaled(0.5),
                1 => colored_noise(k + 10, 10_000, SAMPLE_RATE, 0.5).scaled(0.1),
                _ => synthetic_rir(k, 800, SAMPLE_RATE, 0.1).scaled(0.9),
            };
            write_wav(&d.join(format!("{k}.wav")), &w).unwrap();
        }
    }
    let mut spec = ManifestSpec::new(sd, nd, 4.0 / 3600.0, Split::Train);
    spec.duration_s = 1.0;
    spec.rir_dir = Some(rd);
    spec.seed = 5;
    let recs = build_manifest(&spec).unwrap();
    assert_eq!(recs.len(), 4);
    let (o1, o2) = (dir.path().join("o1"), dir.path().join("o2"));
    let r1 = render_manifest(&recs, &o1).unwrap();
    let r2 = render_manifest(&recs, &o2).unwrap();
    assert_eq!(r1, r2);
    for r in &r1 {
        assert!(r.applied_gain.unwrap() > 0.0);
        let a = std::fs::read(r.noisy_file(&o1)).unwrap();
        assert_eq!(a, std::fs::read(r.noisy_file(&o2)).unwrap());
        let noisy = read_wav(&r.noisy_file(&o1), SAMPLE_RATE).unwrap();
        let clean = read_wav(&r.clean_file(&o1), SAMPLE_RATE).unwrap();
        assert_eq!(noisy.len(), 16_000);
        assert_eq!(clean.len(), 16_000);
        // 16-bit quantization limits the check on rendered files
        assert!((measured_snr(&noisy, &clean) - r.snr_db).abs() < 0.1);
    }
}
