//! Signal processing: windowing, STFT/ISTFT, log-power features, chunking and
//! noisy-phase resynthesis.
//!
//! All reference paths run in `f64`. Spectrogram matrices are `frames x bins`; chunks
//! handed to the model are transposed to `bins x frames` (frequency on the height axis).

mod container;
mod wav;

use std::f64::consts::PI;

use ndarray::{s, Array2, ArrayView2};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use container::{read_spdn, write_spdn, SpdnArray, SpdnData};
pub use wav::{read_wav, write_wav, SAMPLE_RATE};

pub type Result<T> = std::result::Result<T, DspError>;

#[derive(Error, Debug)]
pub enum DspError {
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("invalid sample rate {0}")]
    InvalidSampleRate(u32),
    #[error("invalid stft config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("spectrogram has {got} bins, need at least {need}")]
    TooFewBins { need: usize, got: usize },
    #[error("sample rate mismatch: expected {expected} Hz, got {got} Hz")]
    SampleRateMismatch { expected: u32, got: u32 },
    #[error("expected mono audio, got {0} channels")]
    NotMono(u16),
    #[error("unsupported wav encoding: {0}")]
    UnsupportedFormat(String),
    #[error("container: {0}")]
    Container(String),
    #[error(transparent)]
    Wav(#[from] hound::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mono waveform with finite samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(DspError::InvalidSampleRate(sample_rate));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(DspError::NonFinite(i));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Mean-square power.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len() as f64
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|v| v * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    HannPeriodic,
    /// Only used for internal consistency checks.
    Rectangular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            fft_size: 1024,
            win_length: 400,
            hop_length: 100,
            window: WindowKind::HannPeriodic,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fft_size == 0 || self.win_length == 0 || self.hop_length == 0 {
            return Err(DspError::InvalidConfig("sizes must be positive".into()));
        }
        if self.win_length > self.fft_size {
            return Err(DspError::InvalidConfig(format!(
                "win_length {} exceeds fft_size {}",
                self.win_length, self.fft_size
            )));
        }
        if self.hop_length > self.win_length {
            return Err(DspError::InvalidConfig(format!(
                "hop_length {} exceeds win_length {}",
                self.hop_length, self.win_length
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frame count produced by [`stft`] for `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        1 + len / self.hop_length
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub values: Array2<Complex64>,
    pub config: StftConfig,
}

impl ComplexSpectrogram {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn bins(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogPowerSpectrogram {
    pub values: Array2<f64>,
    pub config: StftConfig,
    pub floor_eps: f64,
}

impl LogPowerSpectrogram {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn bins(&self) -> usize {
        self.values.ncols()
    }

    /// Linear magnitude, `sqrt(max(exp(v) - eps, 0))`.
    pub fn magnitude(&self) -> Array2<f64> {
        let eps = self.floor_eps;
        self.values.mapv(|v| (v.exp() - eps).max(0.0).sqrt())
    }
}

/// Radians in (-pi, pi].
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseMatrix {
    pub values: Array2<f64>,
}

pub const DEFAULT_FLOOR_EPS: f64 = 1e-10;

pub fn make_window(config: &StftConfig) -> Vec<f64> {
    let n = config.win_length;
    match config.window {
        WindowKind::HannPeriodic => (0..n)
            .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / n as f64).cos()))
            .collect(),
        WindowKind::Rectangular => vec![1.0; n],
    }
}

/// Index into `x` for position `i` of the reflect-padded signal (no edge repeat).
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let r = i.rem_euclid(period);
    if r >= len as isize {
        (period - r) as usize
    } else {
        r as usize
    }
}

/// Centered STFT: the signal is reflect-padded by `win_length / 2` on both sides and
/// frame `t` starts at `t * hop_length` of the padded signal.
pub fn stft(w: &Waveform, config: &StftConfig) -> Result<ComplexSpectrogram> {
    config.validate()?;
    let x = w.samples();
    if x.is_empty() {
        return Err(DspError::EmptyInput);
    }
    let window = make_window(config);
    let pad = (config.win_length / 2) as isize;
    let frames = config.frames_for(x.len());
    let bins = config.bins();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(config.fft_size);
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    let mut buf = vec![Complex64::default(); config.fft_size];
    let mut values = Array2::zeros((frames, bins));
    for t in 0..frames {
        let start = (t * config.hop_length) as isize - pad;
        buf.fill(Complex64::default());
        for (k, (b, &wv)) in buf.iter_mut().zip(&window).enumerate() {
            *b = Complex64::new(x[reflect_index(start + k as isize, x.len())] * wv, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (dst, src) in values.row_mut(t).iter_mut().zip(&buf[..bins]) {
            *dst = *src;
        }
    }
    Ok(ComplexSpectrogram {
        values,
        config: *config,
    })
}

pub fn log_power(c: &ComplexSpectrogram, floor_eps: f64) -> LogPowerSpectrogram {
    debug_assert!(floor_eps > 0.0);
    LogPowerSpectrogram {
        values: c.values.mapv(|v| (v.norm_sqr() + floor_eps).ln()),
        config: c.config,
        floor_eps,
    }
}

pub fn phase_of(c: &ComplexSpectrogram) -> PhaseMatrix {
    PhaseMatrix {
        values: c.values.mapv(|v| {
            if v.re == 0.0 && v.im == 0.0 {
                0.0
            } else {
                // atan2 yields [-pi, pi]; fold -pi onto pi
                let a = v.im.atan2(v.re);
                if a == -PI {
                    PI
                } else {
                    a
                }
            }
        }),
    }
}

/// Overlap-add inverse of [`stft`] for a one-sided spectrum.
pub fn istft(c: &ComplexSpectrogram, out_len: usize) -> Result<Waveform> {
    let cfg = c.config;
    cfg.validate()?;
    if c.bins() != cfg.bins() {
        return Err(DspError::DimensionMismatch(format!(
            "{} bins for fft_size {}",
            c.bins(),
            cfg.fft_size
        )));
    }
    let frames = c.frames();
    if frames == 0 {
        return Err(DspError::EmptyInput);
    }
    let pad = cfg.win_length / 2;
    let total = (frames - 1) * cfg.hop_length + cfg.win_length;
    if out_len > frames * cfg.hop_length || pad + out_len > total {
        return Err(DspError::DimensionMismatch(format!(
            "out_len {out_len} exceeds the samples covered by {frames} frames"
        )));
    }
    let window = make_window(&cfg);
    let n = cfg.fft_size;
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let mut scratch = vec![Complex64::default(); ifft.get_inplace_scratch_len()];
    let mut buf = vec![Complex64::default(); n];
    let mut acc = vec![0.0; total];
    let mut wsum = vec![0.0; total];
    let bins = cfg.bins();
    for t in 0..frames {
        let row = c.values.row(t);
        for k in 0..bins {
            buf[k] = row[k];
        }
        // Hermitian completion; DC and Nyquist are taken as real
        buf[0].im = 0.0;
        if n.is_multiple_of(2) {
            buf[n / 2].im = 0.0;
        }
        for k in bins..n {
            buf[k] = buf[n - k].conj();
        }
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let start = t * cfg.hop_length;
        for (i, &wv) in window.iter().enumerate() {
            acc[start + i] += buf[i].re / n as f64 * wv;
            wsum[start + i] += wv * wv;
        }
    }
    let samples = (pad..pad + out_len)
        .map(|i| if wsum[i] > 1e-10 { acc[i] / wsum[i] } else { 0.0 })
        .collect();
    Waveform::new(samples, wav::SAMPLE_RATE)
}

/// Resynthesize a waveform from log-power magnitudes and a phase matrix.
pub fn istft_with_phase(s: &LogPowerSpectrogram, p: &PhaseMatrix, out_len: usize) -> Result<Waveform> {
    if s.values.dim() != p.values.dim() {
        return Err(DspError::DimensionMismatch(format!(
            "log-power {:?} vs phase {:?}",
            s.values.dim(),
            p.values.dim()
        )));
    }
    let mag = s.magnitude();
    let mut values = Array2::zeros(mag.dim());
    ndarray::Zip::from(&mut values)
        .and(&mag)
        .and(&p.values)
        .for_each(|c: &mut Complex64, &m, &ph| *c = Complex64::from_polar(m, ph));
    istft(
        &ComplexSpectrogram {
            values,
            config: s.config,
        },
        out_len,
    )
}

/// One model-sized block of a spectrogram, stored `bins x frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramChunk {
    pub values: Array2<f64>,
    /// First frame of the source spectrogram covered by this chunk.
    pub offset: usize,
    /// Frames holding data; the remainder is zero padding.
    pub valid_frames: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkedSpectrogram {
    pub chunks: Vec<SpectrogramChunk>,
    /// Columns `bins_kept..` of the source, `frames x dropped`.
    pub dropped_bins: Array2<f64>,
    pub total_frames: usize,
    pub config: StftConfig,
    pub floor_eps: f64,
}

/// Split into non-overlapping `bins_kept x frames_per_chunk` blocks along time.
///
/// The trailing partial chunk (or a whole spectrogram shorter than one chunk) is
/// zero-padded in time.
pub fn chunk_spectrogram(
    s: &LogPowerSpectrogram,
    frames_per_chunk: usize,
    bins_kept: usize,
) -> Result<ChunkedSpectrogram> {
    if frames_per_chunk == 0 || bins_kept == 0 {
        return Err(DspError::InvalidConfig("chunk dims must be positive".into()));
    }
    if s.bins() < bins_kept {
        return Err(DspError::TooFewBins {
            need: bins_kept,
            got: s.bins(),
        });
    }
    if s.frames() == 0 {
        return Err(DspError::EmptyInput);
    }
    let frames = s.frames();
    let n_chunks = frames.div_ceil(frames_per_chunk);
    let chunks = (0..n_chunks)
        .map(|c| {
            let offset = c * frames_per_chunk;
            let valid = frames_per_chunk.min(frames - offset);
            let mut values = Array2::zeros((bins_kept, frames_per_chunk));
            values
                .slice_mut(s![.., ..valid])
                .assign(&s.values.slice(s![offset..offset + valid, ..bins_kept]).t());
            SpectrogramChunk {
                values,
                offset,
                valid_frames: valid,
            }
        })
        .collect();
    Ok(ChunkedSpectrogram {
        chunks,
        dropped_bins: s.values.slice(s![.., bins_kept..]).to_owned(),
        total_frames: frames,
        config: s.config,
        floor_eps: s.floor_eps,
    })
}

impl ChunkedSpectrogram {
    /// Inverse of [`chunk_spectrogram`].
    pub fn reassemble(&self) -> Result<LogPowerSpectrogram> {
        let blocks: Vec<ArrayView2<f64>> = self.chunks.iter().map(|c| c.values.view()).collect();
        self.reassemble_with(&blocks)
    }

    /// Reassemble using replacement chunk values (e.g. model outputs) in chunk order.
    pub fn reassemble_with(&self, blocks: &[ArrayView2<f64>]) -> Result<LogPowerSpectrogram> {
        if blocks.len() != self.chunks.len() {
            return Err(DspError::DimensionMismatch(format!(
                "{} blocks for {} chunks",
                blocks.len(),
                self.chunks.len()
            )));
        }
        let kept = self.chunks.first().map_or(0, |c| c.values.nrows());
        let mut values = Array2::zeros((self.total_frames, kept + self.dropped_bins.ncols()));
        for (c, b) in self.chunks.iter().zip(blocks) {
            if b.dim() != c.values.dim() {
                return Err(DspError::DimensionMismatch(format!(
                    "block {:?} vs chunk {:?}",
                    b.dim(),
                    c.values.dim()
                )));
            }
            values
                .slice_mut(s![c.offset..c.offset + c.valid_frames, ..kept])
                .assign(&b.slice(s![.., ..c.valid_frames]).t());
        }
        values.slice_mut(s![.., kept..]).assign(&self.dropped_bins);
        Ok(LogPowerSpectrogram {
            values,
            config: self.config,
            floor_eps: self.floor_eps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_windows() {
        let cfg = |n| StftConfig {
            fft_size: 8,
            win_length: n,
            hop_length: 1,
            window: WindowKind::HannPeriodic,
        };
        let w4 = make_window(&cfg(4));
        for (a, b) in w4.iter().zip([0.0, 0.5, 1.0, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
        let w2 = make_window(&cfg(2));
        assert!(w2[0].abs() < 1e-15 && (w2[1] - 1.0).abs() < 1e-15);
        assert_eq!(make_window(&StftConfig::default())[200], 1.0);
    }

    #[test]
    fn reflect_padding_indices() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-5, 1), 0);
    }

    #[test]
    fn frame_count() {
        assert_eq!(StftConfig::default().frames_for(480_000), 4801);
    }

    #[test]
    fn log_power_cases() {
        let c = ComplexSpectrogram {
            values: Array2::from_shape_vec(
                (1, 3),
                vec![
                    Complex64::new(1.0, 0.0),
                    Complex64::new(0.0, 0.0),
                    Complex64::new(0.0, std::f64::consts::E),
                ],
            )
            .unwrap(),
            config: StftConfig::default(),
        };
        let lp = log_power(&c, DEFAULT_FLOOR_EPS);
        assert!(lp.values[[0, 0]].abs() < 1e-9);
        assert!((lp.values[[0, 1]] - (1e-10f64).ln()).abs() < 1e-12);
        assert!((lp.values[[0, 2]] - 2.0).abs() < 1e-9);
        assert_eq!(lp.magnitude()[[0, 1]], 0.0);
    }

    #[test]
    fn phase_conventions() {
        let c = ComplexSpectrogram {
            values: Array2::from_shape_vec(
                (1, 4),
                vec![
                    Complex64::new(0.0, 1.0),
                    Complex64::new(-1.0, 0.0),
                    Complex64::new(0.0, 0.0),
                    Complex64::new(-1.0, -0.0),
                ],
            )
            .unwrap(),
            config: StftConfig::default(),
        };
        let p = phase_of(&c).values;
        assert!((p[[0, 0]] - PI / 2.0).abs() < 1e-15);
        assert_eq!(p[[0, 1]], PI);
        assert_eq!(p[[0, 2]], 0.0);
        assert_eq!(p[[0, 3]], PI);
    }

    #[test]
    fn empty_input_rejected() {
        let w = Waveform::new(vec![], 16_000).unwrap();
        assert!(matches!(stft(&w, &StftConfig::default()), Err(DspError::EmptyInput)));
        assert!(Waveform::new(vec![f64::NAN], 16_000).is_err());
    }
}
