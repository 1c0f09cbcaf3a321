use std::path::Path;
use std::process::Command;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specden_core::datagen::synth::{colored_noise, tone_complex};
use specden_core::datagen::*;
use specden_core::dsp::{write_wav, LogPowerSpectrogram, StftConfig, Waveform, SAMPLE_RATE};
use specden_core::metrics::*;
use specden_core::model::IdentityEnhancer;
use specden_core::trainer::{features, FeatureNormalizer};

fn randv(seed: u64, n: usize) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn centered(v: &[f64]) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - m).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn si_sdr_brute_force_scaling_oracle() {
    // best scale found by scanning, not by the projection formula
    for seed in 0..5 {
        let s = centered(&randv(seed, 64));
        let e: Vec<f64> = centered(&randv(seed + 50, 64))
            .iter()
            .zip(&s)
            .map(|(n, x)| x + 0.7 * n)
            .collect();
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=400_000 {
            let a = i as f64 / 200_000.0;
            let r: f64 = s.iter().zip(&e).map(|(sv, ev)| (ev - a * sv).powi(2)).sum();
            if r < best.0 {
                best = (r, a);
            }
        }
        let target = best.1 * best.1 * dot(&s, &s);
        let expected = 10.0 * (target / best.0).log10();
        assert!((si_sdr(&s, &e).unwrap() - expected).abs() < 1e-3);
    }
    // after centering, [1, 0] is half of [1, -1]
    assert_eq!(si_sdr(&[1.0, -1.0], &[1.0, 0.0]).unwrap(), 100.0);
}

#[test]
fn si_sdr_scale_invariance_and_orthogonal_noise() {
    for seed in 0..20 {
        let s = randv(seed, 300);
        let est = randv(seed + 100, 300);
        let base = si_sdr(&s, &est.iter().zip(&s).map(|(a, b)| 0.3 * a + b).collect::<Vec<_>>()).unwrap();
        for alpha in [1e-3, 0.5, 2.5, 1e3] {
            let scaled: Vec<f64> = est.iter().zip(&s).map(|(a, b)| alpha * (0.3 * a + b)).collect();
            assert!((si_sdr(&s, &scaled).unwrap() - base).abs() < 1e-9);
        }
        // e orthogonal to mean-removed s, itself zero-mean
        let sc = centered(&s);
        let raw = centered(&randv(seed + 200, 300));
        let k = dot(&raw, &sc) / dot(&sc, &sc);
        let e: Vec<f64> = raw.iter().zip(&sc).map(|(r, x)| 0.2 * (r - k * x)).collect();
        let noisy: Vec<f64> = s.iter().zip(&e).map(|(a, b)| a + b).collect();
        let closed = 10.0 * (dot(&sc, &sc) / dot(&e, &e)).log10();
        assert!((si_sdr(&s, &noisy).unwrap() - closed).abs() < 1e-9);
        // common permutation
        let mut idx: Vec<usize> = (0..300).collect();
        idx.reverse();
        idx.swap(3, 77);
        let ps: Vec<f64> = idx.iter().map(|&i| s[i]).collect();
        let pn: Vec<f64> = idx.iter().map(|&i| noisy[i]).collect();
        assert!((si_sdr(&ps, &pn).unwrap() - closed).abs() < 1e-9);
    }
    let s = randv(5, 50);
    assert_eq!(si_sdr(&s, &s).unwrap(), 100.0);
    assert_eq!(
        si_sdr(&s, &s.iter().map(|v| 2.5 * v).collect::<Vec<_>>()).unwrap(),
        100.0
    );
    assert_eq!(si_sdr(&s, &[0.0; 50]).unwrap(), -100.0);
    assert!(matches!(si_sdr(&[0.0; 50], &s), Err(MetricsError::ZeroReference)));
}

fn lp(values: Array2<f64>) -> LogPowerSpectrogram {
    LogPowerSpectrogram {
        values,
        config: StftConfig::default(),
        floor_eps: 1e-10,
    }
}

#[test]
fn spectral_si_sdr_averages_chunks() {
    let a = Array2::from_shape_fn((100, 513), |(t, k)| ((t * 7 + k * 3) as f64 * 0.1).sin());
    let b = Array2::from_shape_fn((100, 513), |(t, k)| ((t * 5 + k) as f64 * 0.2).cos());
    let est = &a + &b * 0.1;
    let got = spectral_si_sdr(&lp(a.clone()), &lp(est.clone()), (64, 40)).unwrap();
    let chunk = |s: usize, e: usize| {
        let r: Vec<f64> = a.slice(ndarray::s![s..e, ..64]).iter().copied().collect();
        let x: Vec<f64> = est.slice(ndarray::s![s..e, ..64]).iter().copied().collect();
        si_sdr(&r, &x).unwrap()
    };
    let want = (chunk(0, 40) + chunk(40, 80) + chunk(80, 100)) / 3.0;
    assert!((got - want).abs() < 1e-12);
    assert_eq!(spectral_si_sdr(&lp(a.clone()), &lp(a), (512, 512)).unwrap(), 100.0);
}

fn speech(seed: u64, secs: f64) -> Waveform {
    let w = tone_complex(seed, (secs * 16_000.0) as usize, SAMPLE_RATE);
    w.scaled(0.5 / w.peak())
}

fn noise(seed: u64, secs: f64) -> Waveform {
    colored_noise(seed, (secs * 16_000.0) as usize, SAMPLE_RATE, 0.3)
}

/// Six overlapping synthetic talkers.
fn babble(seed: u64, secs: f64) -> Waveform {
    let n = (secs * 16_000.0) as usize;
    let mut acc = vec![0.0; n];
    for k in 0..6 {
        let t = tone_complex(100 + seed * 10 + k, n, SAMPLE_RATE);
        acc.iter_mut().zip(t.samples()).for_each(|(a, b)| *a += b);
    }
    Waveform::new(acc, SAMPLE_RATE).unwrap()
}

fn at_snr(s: &Waveform, n: &Waveform, snr: f64) -> Waveform {
    mix(s, n, snr, None).unwrap().noisy.scaled(1.0)
}

#[test]
fn stoi_identity_gain_and_noise() {
    let s = speech(1, 3.0);
    assert!((stoi(&s, &s).unwrap() - 1.0).abs() < 1e-6);
    let n = noise(2, 3.0);
    let noisy = at_snr(&s, &n, 5.0);
    let a = stoi(&s, &noisy).unwrap();
    let b = stoi(&s, &noisy.scaled(0.1)).unwrap();
    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    let bad = stoi(&s, &at_snr(&s, &babble(1, 3.0), -10.0)).unwrap();
    assert!(bad < 0.4, "{bad}");
    assert!(bad < a && a < 1.0);
}

#[test]
fn stoi_rejects_silence_and_mismatch() {
    let z = Waveform::new(vec![0.0; 32_000], SAMPLE_RATE).unwrap();
    assert!(matches!(stoi(&z, &noise(1, 2.0)), Err(MetricsError::NoActiveFrames)));
    assert!(stoi(&speech(1, 1.0), &speech(1, 2.0)).is_err());
    assert!(matches!(
        stoi(&speech(1, 0.2), &speech(1, 0.2)),
        Err(MetricsError::TooShort { .. })
    ));
}

fn pystoi_available() -> bool {
    Command::new("python3")
        .args(["-c", "import pystoi"])
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn write_f64(path: &Path, v: &[f64]) {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn stoi_agrees_with_reference_implementation() {
    if !pystoi_available() {
        eprintln!("reference STOI implementation not installed; skipping comparison");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let mut script = String::from("import numpy as np\nfrom pystoi import stoi\n");
    let mut ours = Vec::new();
    for i in 0..5u64 {
        let s = speech(i, 2.0);
        let y = at_snr(&s, &noise(i + 40, 2.0), i as f64 * 4.0 - 5.0);
        let (pc, pd) = (dir.path().join(format!("c{i}")), dir.path().join(format!("d{i}")));
        write_f64(&pc, s.samples());
        write_f64(&pd, y.samples());
        script.push_str(&format!(
            "print(repr(stoi(np.fromfile('{}', '<f8'), np.fromfile('{}', '<f8'), 16000)))\n",
            pc.display(),
            pd.display()
        ));
        ours.push(stoi(&s, &y).unwrap());
    }
    let out = Command::new("python3").args(["-c", &script]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let theirs: Vec<f64> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| {
            l.trim()
                .trim_start_matches("np.float64(")
                .trim_end_matches(')')
                .parse()
                .unwrap()
        })
        .collect();
    for (a, b) in ours.iter().zip(&theirs) {
        assert!((a - b).abs() < 1e-6, "ours {a} reference {b}");
    }
}

fn corpus(dir: &Path) -> Vec<MixtureRecord> {
    let (sd, nd) = (dir.join("sp"), dir.join("no"));
    std::fs::create_dir_all(&sd).unwrap();
    std::fs::create_dir_all(&nd).unwrap();
    for k in 0..2u64 {
        write_wav(&sd.join(format!("{k}.wav")), &speech(k, 3.0)).unwrap();
        write_wav(&nd.join(format!("{k}.wav")), &noise(k + 9, 3.0).scaled(0.2)).unwrap();
    }
    let mut spec = ManifestSpec::new(sd, nd, 6.0 / 3600.0, Split::Test);
    spec.duration_s = 2.0;
    spec.seed = 3;
    render_manifest(&build_manifest(&spec).unwrap(), dir).unwrap()
}

#[test]
fn identity_evaluation_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let recs = corpus(dir.path());
    assert_eq!(recs.len(), 3);
    let id = IdentityEnhancer { shape: (256, 64) };
    let norm = FeatureNormalizer { mean: -8.0, std: 5.0 };
    let r = evaluate(&id, &norm, ("identity", "-", 0), "toy", &recs, dir.path()).unwrap();
    assert_eq!(r.rows.len(), recs.len());
    for row in &r.rows {
        assert!((row.si_sdr_out - row.si_sdr_in).abs() < 1e-3, "{row:?}");
        assert!((row.stoi_out - row.stoi_in).abs() < 1e-4, "{row:?}");
    }
    let mean = r.rows.iter().map(|x| x.si_sdr_in).sum::<f64>() / 3.0;
    assert!((r.mean.si_sdr_in - mean).abs() < 1e-12);

    // a missing record is skipped, not fatal
    let mut with_ghost = recs.clone();
    with_ghost[0].mixture_id = "ghost".into();
    let r2 = evaluate(&id, &norm, ("identity", "-", 0), "toy", &with_ghost, dir.path()).unwrap();
    assert_eq!(r2.rows.len(), 2);

    let out = dir.path().join("eval");
    r.save(&out).unwrap();
    assert_eq!(MetricReport::load(&out).unwrap(), r);
}

#[test]
fn clean_as_enhanced_hits_clamp() {
    let s = speech(4, 2.0);
    let y = at_snr(&s, &noise(5, 2.0), 0.0);
    let (si_in, si_out, st_in, st_out) = score_utterance(&s, &y, &s, &features(&s).unwrap(), (512, 512)).unwrap();
    assert_eq!(si_out, 100.0);
    assert!(si_in < 100.0);
    assert!((st_out - 1.0).abs() < 1e-6 && st_in < 1.0);
}

fn report(model: &str, set: &str, base: f64) -> MetricReport {
    let rows = (0..3)
        .map(|i| MetricRow {
            mixture_id: format!("{set}_{i}"),
            snr_db: i as f64 * 5.0,
            si_sdr_in: base + i as f64 / 3.0,
            si_sdr_out: base + 4.1 + i as f64 / 7.0,
            stoi_in: 0.61 + i as f64 * 0.013,
            stoi_out: 0.7 + i as f64 / 9.0,
        })
        .collect();
    MetricReport::new(model, "U+D", 1234, set, rows)
}

#[test]
fn tables_round_trip_and_layout() {
    let dir = tempfile::tempdir().unwrap();
    let one = report("DUNET", "clean", 1.0);
    let path = dir.path().join("t.csv");
    let text = emit_tables(std::slice::from_ref(&one), &path).unwrap();
    assert_eq!(text.lines().count(), 4); // header, rule, input, model
    assert!(text.lines().nth(2).unwrap().starts_with("Input data"));
    let mut rd = csv::Reader::from_path(&path).unwrap();
    let header: Vec<String> = rd.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        header,
        ["Model", "Struct.", "#Param.", "clean SI-SDR [dB]", "clean STOI"]
    );
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][3].parse::<f64>().unwrap(), one.mean.si_sdr_in);
    assert_eq!(rows[0][4].parse::<f64>().unwrap(), one.mean.stoi_in);
    assert_eq!(rows[1][3].parse::<f64>().unwrap(), one.mean.si_sdr_out);
    assert_eq!(rows[1][4].parse::<f64>().unwrap(), one.mean.stoi_out);
    assert_eq!(&rows[1][2], "1234");

    let reports = [
        one.clone(),
        report("DUNET", "reverb", 0.0),
        report("UNET", "clean", 1.0),
    ];
    emit_tables(&reports, &path).unwrap();
    let mut rd = csv::Reader::from_path(&path).unwrap();
    assert_eq!(rd.headers().unwrap().len(), 7);
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(&rows[2][0], "UNET");
    assert_eq!(&rows[2][5], "");
    assert!(emit_tables(&[], &path).is_err());
}

#[test]
fn spectrogram_images() {
    let dir = tempfile::tempdir().unwrap();
    let values = Array2::from_shape_fn((512, 512), |(t, k)| ((t + 2 * k) as f64 * 0.01).sin());
    let s = lp(values);
    let img = spectrogram_image(&s).unwrap();
    assert!(img.width() > 512 && img.height() > 512);
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    render_spectrogram_image(&s, &a).unwrap();
    render_spectrogram_image(&s, &b).unwrap();
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(&bytes[1..4], b"PNG");
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    let back = image::open(&a).unwrap().to_rgb8();
    assert_eq!(back, img);

    let flat = spectrogram_image(&lp(Array2::from_elem((300, 200), -4.0))).unwrap();
    let c = viridis(0.0);
    let n = flat.pixels().filter(|p| p.0 == c).count();
    assert_eq!(n, 300 * 200);
    assert!(spectrogram_image(&lp(Array2::zeros((0, 10)))).is_err());
}
