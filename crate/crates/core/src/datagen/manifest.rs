use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fit_noise, mix, normalize_utterance, DatagenError, Result};
use crate::config::{parse_kv, KvReader};
use crate::dsp::{read_wav, write_wav, SAMPLE_RATE};
use crate::fsutil::write_atomic;

/// Salt separating the speech crop stream from the noise crop stream of a record.
const SPEECH_SEED_SALT: u64 = 0x5eed_5bee_c400_0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = DatagenError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(DatagenError::InvalidSpec(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureRecord {
    pub mixture_id: String,
    pub speech_path: PathBuf,
    pub noise_path: PathBuf,
    pub snr_db: f64,
    /// Linear gain on the fitted noise; `None` until the record has been rendered.
    pub applied_gain: Option<f64>,
    pub rir_path: Option<PathBuf>,
    pub split: Split,
    pub seed: u64,
    pub duration_s: f64,
}

impl MixtureRecord {
    pub fn noisy_file(&self, dir: &Path) -> PathBuf {
        dir.join(format!("{}_noisy.wav", self.mixture_id))
    }

    pub fn clean_file(&self, dir: &Path) -> PathBuf {
        dir.join(format!("{}_clean.wav", self.mixture_id))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestSpec {
    pub speech_dir: PathBuf,
    pub noise_dir: PathBuf,
    pub rir_dir: Option<PathBuf>,
    pub target_hours: f64,
    pub snr_grid: Vec<f64>,
    pub seed: u64,
    pub split: Split,
    /// Length of every mixture in seconds.
    pub duration_s: f64,
}

impl ManifestSpec {
    pub fn new(speech_dir: PathBuf, noise_dir: PathBuf, target_hours: f64, split: Split) -> Self {
        Self {
            speech_dir,
            noise_dir,
            rir_dir: None,
            target_hours,
            snr_grid: (0..=20).map(f64::from).collect(),
            seed: 0,
            split,
            duration_s: 30.0,
        }
    }

    /// Parse a key-value spec; relative directories resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        Self::from_map(&parse_kv(text)?, base)
    }

    /// Build from already-parsed keys; relative directories resolve against `base`.
    pub fn from_map(map: &BTreeMap<String, String>, base: &Path) -> Result<Self> {
        let r = KvReader::new(map);
        r.deny_unknown(&[
            "speech_dir",
            "noise_dir",
            "rir_dir",
            "target_hours",
            "snr_grid",
            "seed",
            "split",
            "duration_s",
        ])?;
        let dir = |k: &str| -> Result<Option<PathBuf>> { Ok(r.raw(k).map(|v| base.join(v))) };
        let missing = |k: &str| DatagenError::InvalidSpec(format!("missing `{k}`"));
        let mut spec = Self::new(
            dir("speech_dir")?.ok_or_else(|| missing("speech_dir"))?,
            dir("noise_dir")?.ok_or_else(|| missing("noise_dir"))?,
            r.require("target_hours")?,
            r.raw("split").unwrap_or("train").parse()?,
        );
        spec.rir_dir = dir("rir_dir")?;
        if let Some(g) = r.raw("snr_grid") {
            spec.snr_grid = parse_snr_grid(g)?;
        }
        if let Some(s) = r.get("seed")? {
            spec.seed = s;
        }
        if let Some(d) = r.get("duration_s")? {
            spec.duration_s = d;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_hours > 0.0 && self.target_hours.is_finite()) {
            return Err(DatagenError::InvalidSpec("target_hours must be > 0".into()));
        }
        if self.snr_grid.is_empty() {
            return Err(DatagenError::InvalidSpec("snr_grid is empty".into()));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(DatagenError::InvalidSpec("duration_s must be > 0".into()));
        }
        Ok(())
    }

    pub fn record_count(&self) -> usize {
        let exact = self.target_hours * 3600.0 / self.duration_s;
        // tolerate float noise such as 1.0000000000000002
        (exact - 1e-9).ceil().max(1.0) as usize
    }
}

/// `start:stop:step` (inclusive) or a comma-separated list.
pub fn parse_snr_grid(s: &str) -> Result<Vec<f64>> {
    let bad = || DatagenError::InvalidSpec(format!("bad snr grid `{s}`"));
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad());
    let parts: Vec<&str> = s.split(':').collect();
    let grid = match parts.as_slice() {
        [a, b, step] => {
            let (a, b, step) = (num(a)?, num(b)?, num(step)?);
            if step.is_nan() || step <= 0.0 || b < a {
                return Err(bad());
            }
            let n = ((b - a) / step + 1e-9).floor() as usize;
            (0..=n).map(|i| a + i as f64 * step).collect()
        }
        [list] => list.split(',').map(num).collect::<Result<Vec<_>>>()?,
        _ => return Err(bad()),
    };
    if grid.is_empty() || grid.iter().any(|v| !v.is_finite()) {
        return Err(bad());
    }
    Ok(grid)
}

#[derive(Debug, Clone, Default)]
pub struct Pools {
    pub speech: Vec<PathBuf>,
    pub noise: Vec<PathBuf>,
    pub rir: Vec<PathBuf>,
}

/// Sorted `.wav` files directly inside `dir`.
pub fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(DatagenError::EmptyPool(dir.display().to_string()));
    }
    Ok(out)
}

pub fn build_manifest(spec: &ManifestSpec) -> Result<Vec<MixtureRecord>> {
    let pools = Pools {
        speech: list_wavs(&spec.speech_dir)?,
        noise: list_wavs(&spec.noise_dir)?,
        rir: match &spec.rir_dir {
            Some(d) => list_wavs(d)?,
            None => Vec::new(),
        },
    };
    build_manifest_from_pools(spec, &pools)
}

/// Seeded record selection. Every grid SNR appears at least once when the record count
/// allows it; the remaining slots are uniform draws from the grid.
pub fn build_manifest_from_pools(spec: &ManifestSpec, pools: &Pools) -> Result<Vec<MixtureRecord>> {
    spec.validate()?;
    if pools.speech.is_empty() {
        return Err(DatagenError::EmptyPool("speech".into()));
    }
    if pools.noise.is_empty() {
        return Err(DatagenError::EmptyPool("noise".into()));
    }
    let count = spec.record_count();
    let grid = &spec.snr_grid;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut snrs: Vec<f64> = grid.clone();
    snrs.shuffle(&mut rng);
    if count < grid.len() {
        warn!(
            "event=snr_coverage_relaxed records={count} grid={} distinct={count}",
            grid.len()
        );
        snrs.truncate(count);
    } else {
        snrs.extend((grid.len()..count).map(|_| grid[rng.random_range(0..grid.len())]));
    }
    snrs.shuffle(&mut rng);

    let records = snrs
        .into_iter()
        .enumerate()
        .map(|(i, snr_db)| {
            let speech_path = pools.speech[rng.random_range(0..pools.speech.len())].clone();
            let noise_path = pools.noise[rng.random_range(0..pools.noise.len())].clone();
            let rir_path = (!pools.rir.is_empty()).then(|| pools.rir[rng.random_range(0..pools.rir.len())].clone());
            MixtureRecord {
                mixture_id: format!("{}_{i:05}", spec.split),
                speech_path,
                noise_path,
                snr_db,
                applied_gain: None,
                rir_path,
                split: spec.split,
                seed: rng.next_u64(),
                duration_s: spec.duration_s,
            }
        })
        .collect();
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[MixtureRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<MixtureRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|source| DatagenError::ManifestLine { line: i + 1, source }))
        .collect()
}

/// Render one record to `<out_dir>/<id>_{noisy,clean}.wav`; returns the record with its
/// applied gain filled in.
pub fn render_record(rec: &MixtureRecord, out_dir: &Path) -> Result<MixtureRecord> {
    let len = (rec.duration_s * SAMPLE_RATE as f64).round() as usize;
    let speech = read_wav(&rec.speech_path, SAMPLE_RATE)?;
    let speech = normalize_utterance(&fit_noise(&speech, len, rec.seed ^ SPEECH_SEED_SALT)?)?;
    let noise = read_wav(&rec.noise_path, SAMPLE_RATE)?;
    let noise = normalize_utterance(&fit_noise(&noise, len, rec.seed)?).map_err(|_| DatagenError::SilentNoise)?;
    let rir = rec.rir_path.as_ref().map(|p| read_wav(p, SAMPLE_RATE)).transpose()?;
    let m = mix(&speech, &noise, rec.snr_db, rir.as_ref())?;
    write_wav(&rec.noisy_file(out_dir), &m.noisy)?;
    write_wav(&rec.clean_file(out_dir), &m.clean)?;
    Ok(MixtureRecord {
        applied_gain: Some(m.applied_gain),
        ..rec.clone()
    })
}

/// Render all records in parallel. Failed records are logged and dropped.
pub fn render_manifest(records: &[MixtureRecord], out_dir: &Path) -> Result<Vec<MixtureRecord>> {
    fs::create_dir_all(out_dir)?;
    let rendered: Vec<Option<MixtureRecord>> = records
        .par_iter()
        .map(|r| match render_record(r, out_dir) {
            Ok(r) => Some(r),
            Err(e) => {
                warn!("event=render_skipped id={} error=\"{e}\"", r.mixture_id);
                None
            }
        })
        .collect();
    let out: Vec<MixtureRecord> = rendered.into_iter().flatten().collect();
    info!("event=render_done requested={} rendered={}", records.len(), out.len());
    Ok(out)
}
