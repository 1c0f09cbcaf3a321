use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{spectral_si_sdr, stoi, MetricsError, Result};
use crate::datagen::MixtureRecord;
use crate::dsp::{read_wav, LogPowerSpectrogram, Waveform, SAMPLE_RATE};
use crate::model::SpectralEnhancer;
use crate::trainer::{enhance_waveform, features, Checkpoint, FeatureNormalizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub mixture_id: String,
    pub snr_db: f64,
    pub si_sdr_in: f64,
    pub si_sdr_out: f64,
    pub stoi_in: f64,
    pub stoi_out: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricMeans {
    pub si_sdr_in: f64,
    pub si_sdr_out: f64,
    pub stoi_in: f64,
    pub stoi_out: f64,
}

/// Per-utterance scores of one model on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    /// Architecture flags, e.g. `V+U+D`.
    pub structure: String,
    pub params: usize,
    pub test_set: String,
    pub rows: Vec<MetricRow>,
    pub mean: MetricMeans,
}

impl MetricReport {
    /// Builds the report; `mean` is the arithmetic mean of `rows`.
    pub fn new(model: &str, structure: &str, params: usize, test_set: &str, rows: Vec<MetricRow>) -> Self {
        let n = rows.len().max(1) as f64;
        let mut mean = MetricMeans::default();
        for r in &rows {
            mean.si_sdr_in += r.si_sdr_in;
            mean.si_sdr_out += r.si_sdr_out;
            mean.stoi_in += r.stoi_in;
            mean.stoi_out += r.stoi_out;
        }
        mean.si_sdr_in /= n;
        mean.si_sdr_out /= n;
        mean.stoi_in /= n;
        mean.stoi_out /= n;
        Self {
            model: model.into(),
            structure: structure.into(),
            params,
            test_set: test_set.into(),
            rows,
            mean,
        }
    }

    /// Writes `report.json` and `rows.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        crate::write_atomic(&dir.join("report.json"), &serde_json::to_vec_pretty(self)?)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| MetricsError::Io(e.into_error()))?;
        crate::write_atomic(&dir.join("rows.csv"), &bytes)?;
        Ok(())
    }

    /// Loads `report.json` from a directory, or the given JSON file.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join("report.json")
        } else {
            path.to_path_buf()
        };
        Ok(serde_json::from_slice(&std::fs::read(file)?)?)
    }
}

/// Spectral SI-SDR and STOI of one utterance, before and after enhancement.
///
/// `enhanced_spec` is the model-domain log-power output; `enhanced` its resynthesis.
pub fn score_utterance(
    clean: &Waveform,
    noisy: &Waveform,
    enhanced: &Waveform,
    enhanced_spec: &LogPowerSpectrogram,
    chunk_shape: (usize, usize),
) -> Result<(f64, f64, f64, f64)> {
    let (fc, fn_) = (features(clean)?, features(noisy)?);
    Ok((
        spectral_si_sdr(&fc, &fn_, chunk_shape)?,
        spectral_si_sdr(&fc, enhanced_spec, chunk_shape)?,
        stoi(clean, noisy)?,
        stoi(clean, enhanced)?,
    ))
}

fn score_record(
    enhancer: &dyn SpectralEnhancer,
    normalizer: &FeatureNormalizer,
    rec: &MixtureRecord,
    audio_dir: &Path,
) -> Result<MetricRow> {
    let noisy = read_wav(&rec.noisy_file(audio_dir), SAMPLE_RATE)?;
    let clean = read_wav(&rec.clean_file(audio_dir), SAMPLE_RATE)?;
    if noisy.len() != clean.len() {
        return Err(MetricsError::LengthMismatch(clean.len(), noisy.len()));
    }
    let out = enhance_waveform(enhancer, normalizer, &noisy)?;
    let (si_sdr_in, si_sdr_out, stoi_in, stoi_out) =
        score_utterance(&clean, &noisy, &out.waveform, &out.enhanced, enhancer.chunk_shape())?;
    Ok(MetricRow {
        mixture_id: rec.mixture_id.clone(),
        snr_db: rec.snr_db,
        si_sdr_in,
        si_sdr_out,
        stoi_in,
        stoi_out,
    })
}

/// Scores every record; unreadable records are skipped with a warning.
pub fn evaluate(
    enhancer: &dyn SpectralEnhancer,
    normalizer: &FeatureNormalizer,
    (model, structure, params): (&str, &str, usize),
    test_set: &str,
    records: &[MixtureRecord],
    audio_dir: &Path,
) -> Result<MetricReport> {
    let scored: Vec<_> = records
        .par_iter()
        .map(|r| (r, score_record(enhancer, normalizer, r, audio_dir)))
        .collect();
    let mut rows = Vec::with_capacity(records.len());
    for (r, s) in scored {
        match s {
            Ok(row) => rows.push(row),
            Err(e) => warn!("event=skip_record id={} error=\"{e}\"", r.mixture_id),
        }
    }
    if rows.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(MetricReport::new(model, structure, params, test_set, rows))
}

/// [`evaluate`] with a checkpointed model; the model tag defaults to the variant name.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    tag: Option<&str>,
    test_set: &str,
    records: &[MixtureRecord],
    audio_dir: &Path,
) -> Result<MetricReport> {
    let model = ckpt.model()?;
    let cfg = model.config();
    let name = tag
        .map(str::to_string)
        .or_else(|| cfg.kind().map(|k| k.name().to_string()))
        .unwrap_or_else(|| "model".into());
    evaluate(
        &model,
        &ckpt.normalizer,
        (&name, &cfg.structure(), model.count_params()),
        test_set,
        records,
        audio_dir,
    )
}

/// Leading table columns; each test set then adds `<set> SI-SDR [dB]` and `<set> STOI`.
pub const TABLE_COLUMNS: [&str; 3] = ["Model", "Struct.", "#Param."];

/// Label, structure flags, parameter count, then per test set (SI-SDR, STOI).
type TableRow = (String, String, String, Vec<Option<(f64, f64)>>);

/// Label of the unprocessed-input row.
const INPUT_ROW: &str = "Input data";

fn aligned(rows: &[Vec<String>]) -> String {
    let cols = rows[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        let cells: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, &w))| if c == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (cols - 1)));
            out.push('\n');
        }
    }
    out
}

/// Models-by-test-sets table with an "Input data" row (noisy vs clean) first.
///
/// Writes CSV (full precision) to `out_path` and the aligned text table next to it with a
/// `.txt` extension. Returns the text table.
pub fn emit_tables(reports: &[MetricReport], out_path: &Path) -> Result<String> {
    if reports.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut sets: Vec<&str> = Vec::new();
    let mut models: Vec<(&str, &str, usize)> = Vec::new();
    for r in reports {
        if !sets.contains(&r.test_set.as_str()) {
            sets.push(&r.test_set);
        }
        let key = (r.model.as_str(), r.structure.as_str(), r.params);
        if !models.contains(&key) {
            models.push(key);
        }
    }
    let mut header: Vec<String> = TABLE_COLUMNS.iter().map(|s| s.to_string()).collect();
    for s in &sets {
        header.push(format!("{s} SI-SDR [dB]"));
        header.push(format!("{s} STOI"));
    }
    let find = |model: Option<(&str, &str, usize)>, set: &str| {
        reports.iter().find(|r| {
            r.test_set == set && model.is_none_or(|m| (r.model.as_str(), r.structure.as_str(), r.params) == m)
        })
    };
    let mut table: Vec<TableRow> = Vec::new();
    table.push((
        INPUT_ROW.into(),
        "-".into(),
        "-".into(),
        sets.iter()
            .map(|s| find(None, s).map(|r| (r.mean.si_sdr_in, r.mean.stoi_in)))
            .collect(),
    ));
    for &m in &models {
        table.push((
            m.0.into(),
            m.1.into(),
            m.2.to_string(),
            sets.iter()
                .map(|s| find(Some(m), s).map(|r| (r.mean.si_sdr_out, r.mean.stoi_out)))
                .collect(),
        ));
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    let mut text_rows = vec![header.clone()];
    for (label, st, params, vals) in &table {
        let mut rec = vec![label.clone(), st.clone(), params.clone()];
        let mut txt = rec.clone();
        for v in vals {
            match v {
                Some((a, b)) => {
                    rec.push(a.to_string());
                    rec.push(b.to_string());
                    txt.push(format!("{a:.2}"));
                    txt.push(format!("{b:.3}"));
                }
                None => {
                    rec.extend([String::new(), String::new()]);
                    txt.extend(["".to_string(), "".to_string()]);
                }
            }
        }
        w.write_record(&rec)?;
        text_rows.push(txt);
    }
    let csv_bytes = w.into_inner().map_err(|e| MetricsError::Io(e.into_error()))?;
    crate::write_atomic(out_path, &csv_bytes)?;
    let text = aligned(&text_rows);
    crate::write_atomic(&out_path.with_extension("txt"), text.as_bytes())?;
    Ok(text)
}
