use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use super::data::features;
use super::normalize::FeatureNormalizer;
use super::Result;
use crate::dsp::{
    chunk_spectrogram, istft_with_phase, phase_of, read_wav, stft, write_wav, DspError, LogPowerSpectrogram,
    SpectrogramChunk, StftConfig, Waveform, SAMPLE_RATE,
};
use crate::model::SpectralEnhancer;

/// Output peak ceiling.
pub const OUTPUT_PEAK_LIMIT: f64 = 0.999;

#[derive(Debug, Clone)]
pub struct EnhanceReport {
    pub noisy: LogPowerSpectrogram,
    pub enhanced: LogPowerSpectrogram,
    /// Denormalized model outputs, `bins x frames`, in time order.
    pub chunks: Vec<SpectrogramChunk>,
    pub waveform: Waveform,
    /// Gain applied by the peak limiter (1 when not engaged).
    pub limiter_gain: f64,
}

/// Enhance a waveform chunk by chunk and resynthesize it with the noisy phase.
/// Bins above the model's height are passed through from the noisy input.
pub fn enhance_waveform(
    enhancer: &dyn SpectralEnhancer,
    normalizer: &FeatureNormalizer,
    noisy: &Waveform,
) -> Result<EnhanceReport> {
    if noisy.sample_rate() != SAMPLE_RATE {
        return Err(DspError::SampleRateMismatch {
            expected: SAMPLE_RATE,
            got: noisy.sample_rate(),
        }
        .into());
    }
    let (h, w) = enhancer.chunk_shape();
    let spec = stft(noisy, &StftConfig::default())?;
    let phase = phase_of(&spec);
    let lp = features(noisy)?;
    let chunked = chunk_spectrogram(&lp, w, h)?;
    let outputs: Vec<Array2<f64>> = chunked
        .chunks
        .par_iter()
        .map(|c| -> Result<Array2<f64>> {
            let input = Array2::from_shape_fn((h, w), |(i, j)| {
                if j < c.valid_frames {
                    normalizer.normalize(c.values[(i, j)]) as f32
                } else {
                    0.0
                }
            });
            let y = enhancer.enhance_chunk(input.view())?;
            Ok(y.mapv(|v| normalizer.denormalize(v as f64)))
        })
        .collect::<Result<_>>()?;
    let views: Vec<ArrayView2<f64>> = outputs.iter().map(|o| o.view()).collect();
    let enhanced = chunked.reassemble_with(&views)?;
    let raw = istft_with_phase(&enhanced, &phase, noisy.len())?;
    let peak = raw.peak();
    let limiter_gain = if peak > OUTPUT_PEAK_LIMIT {
        OUTPUT_PEAK_LIMIT / peak
    } else {
        1.0
    };
    let waveform = if limiter_gain < 1.0 {
        raw.scaled(limiter_gain)
    } else {
        raw
    };
    let chunks = chunked
        .chunks
        .iter()
        .zip(outputs)
        .map(|(c, values)| SpectrogramChunk {
            values,
            offset: c.offset,
            valid_frames: c.valid_frames,
        })
        .collect();
    Ok(EnhanceReport {
        noisy: lp,
        enhanced,
        chunks,
        waveform,
        limiter_gain,
    })
}

/// Enhance a 16 kHz mono file with any enhancer and write the result.
pub fn enhance_file_with(
    enhancer: &dyn SpectralEnhancer,
    normalizer: &FeatureNormalizer,
    input: &Path,
    output: &Path,
) -> Result<EnhanceReport> {
    let noisy = read_wav(input, SAMPLE_RATE)?;
    let report = enhance_waveform(enhancer, normalizer, &noisy)?;
    write_wav(output, &report.waveform)?;
    Ok(report)
}

/// Enhance a file with a checkpointed model.
pub fn enhance_file(ckpt: &Checkpoint, input: &Path, output: &Path) -> Result<EnhanceReport> {
    let model = ckpt.model()?;
    enhance_file_with(&model, &ckpt.normalizer, input, output)
}
