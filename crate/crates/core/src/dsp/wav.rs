//! WAV ingestion and export (mono, 16 kHz).

use std::io::Cursor;
use std::path::Path;

use super::{DspError, Result, Waveform};
use crate::fsutil::write_atomic;

pub const SAMPLE_RATE: u32 = 16_000;

/// Read a mono 16-bit PCM or 32-bit float WAV file. A sample rate other than
/// `expected_rate` is an error.
pub fn read_wav(path: &Path, expected_rate: u32) -> Result<Waveform> {
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(DspError::NotMono(spec.channels));
    }
    if spec.sample_rate != expected_rate {
        return Err(DspError::SampleRateMismatch {
            expected: expected_rate,
            got: spec.sample_rate,
        });
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(DspError::UnsupportedFormat(format!("{fmt:?} {bits}-bit")));
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Write 16-bit PCM; samples outside the representable range saturate. The file is replaced atomically.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut buf = Cursor::new(Vec::with_capacity(44 + 2 * w.len()));
    {
        let mut writer = hound::WavWriter::new(&mut buf, spec)?;
        for &s in w.samples() {
            let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            writer.write_sample(q)?;
        }
        writer.finalize()?;
    }
    write_atomic(path, &buf.into_inner())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcm16_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        let x: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.01).sin() * 0.9).collect();
        write_wav(&p, &Waveform::new(x.clone(), SAMPLE_RATE).unwrap()).unwrap();
        let y = read_wav(&p, SAMPLE_RATE).unwrap();
        assert_eq!(y.len(), x.len());
        for (a, b) in x.iter().zip(y.samples()) {
            assert!((a - b).abs() <= 0.5 / 32768.0);
        }
    }

    #[test]
    fn float_input_and_rate_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        w.write_sample(0.25f32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(
            read_wav(&p, SAMPLE_RATE),
            Err(DspError::SampleRateMismatch { got: 8000, .. })
        ));
        assert_eq!(read_wav(&p, 8000).unwrap().samples(), &[0.25]);
    }
}
