//! Objective evaluation: SI-SDR on spectra, STOI on waveforms, report tables and
//! spectrogram images.

mod image;
mod report;
mod stoi;

use ndarray::s;
use thiserror::Error;

use crate::dsp::{DspError, LogPowerSpectrogram};
use crate::trainer::TrainError;

pub use self::image::{render_spectrogram_image, spectrogram_image, viridis};
pub use report::{
    emit_tables, evaluate, evaluate_checkpoint, score_utterance, MetricMeans, MetricReport, MetricRow, TABLE_COLUMNS,
};
pub use stoi::stoi;

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Error, Debug)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("reference is zero after mean removal")]
    ZeroReference,
    #[error("no active frames")]
    NoActiveFrames,
    #[error("only {frames} active frames, need {need}")]
    TooShort { frames: usize, need: usize },
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    RateMismatch(u32, u32),
    #[error("nothing to report")]
    Empty,
    #[error("report: {0}")]
    Report(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Image(#[from] ::image::ImageError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Magnitude bound for SI-SDR values, in dB.
pub const SI_SDR_CLAMP_DB: f64 = 100.0;

/// Scale-invariant SDR in dB over mean-removed vectors, clamped to +/-100 dB.
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(MetricsError::LengthMismatch(reference.len(), estimate.len()));
    }
    let n = reference.len();
    if n < 2 {
        return Err(MetricsError::TooFewSamples(n));
    }
    let mr = reference.iter().sum::<f64>() / n as f64;
    let me = estimate.iter().sum::<f64>() / n as f64;
    let (mut ss, mut se) = (0.0, 0.0);
    for (r, e) in reference.iter().zip(estimate) {
        let (r, e) = (r - mr, e - me);
        ss += r * r;
        se += r * e;
    }
    if ss == 0.0 {
        return Err(MetricsError::ZeroReference);
    }
    let alpha = se / ss;
    let (mut target, mut resid) = (0.0, 0.0);
    for (r, e) in reference.iter().zip(estimate) {
        let t = alpha * (r - mr);
        target += t * t;
        resid += (e - me - t).powi(2);
    }
    let db = 10.0 * (target / resid).log10();
    Ok(if db.is_nan() {
        // 0/0: a zero estimate
        -SI_SDR_CLAMP_DB
    } else {
        db.clamp(-SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB)
    })
}

/// Mean SI-SDR over the chunks of two aligned log-power spectrograms.
///
/// Each chunk covers the lowest `bins` bins of up to `frames` frames; only frames holding
/// data enter the vector, so a short final chunk carries no padding.
pub fn spectral_si_sdr(
    reference: &LogPowerSpectrogram,
    estimate: &LogPowerSpectrogram,
    chunk_shape: (usize, usize),
) -> Result<f64> {
    if reference.values.dim() != estimate.values.dim() {
        let (a, b) = (reference.values.dim(), estimate.values.dim());
        return Err(MetricsError::LengthMismatch(a.0 * a.1, b.0 * b.1));
    }
    let (bins, frames) = chunk_shape;
    if bins > reference.bins() {
        return Err(DspError::TooFewBins {
            need: bins,
            got: reference.bins(),
        }
        .into());
    }
    let total = reference.frames();
    if total == 0 {
        return Err(MetricsError::TooFewSamples(0));
    }
    let mut sum = 0.0;
    let mut count = 0;
    for start in (0..total).step_by(frames) {
        let end = (start + frames).min(total);
        let r: Vec<f64> = reference.values.slice(s![start..end, ..bins]).iter().copied().collect();
        let e: Vec<f64> = estimate.values.slice(s![start..end, ..bins]).iter().copied().collect();
        sum += si_sdr(&r, &e)?;
        count += 1;
    }
    Ok(sum / count as f64)
}
