//! Turning rendered mixtures into model-sized (noisy, clean) feature chunks.

use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::normalize::{FeatureNormalizer, RunningMoments};
use super::{Result, TrainError};
use crate::datagen::MixtureRecord;
use crate::dsp::{
    chunk_spectrogram, log_power, read_spdn, read_wav, stft, write_spdn, LogPowerSpectrogram, SpdnArray, SpdnData,
    StftConfig, Waveform, DEFAULT_FLOOR_EPS, SAMPLE_RATE,
};
use crate::tensor::Tensor4;

/// Log-power features with the default analysis settings.
pub fn features(w: &Waveform) -> Result<LogPowerSpectrogram> {
    Ok(log_power(&stft(w, &StftConfig::default())?, DEFAULT_FLOOR_EPS))
}

/// Raw (unnormalized) aligned feature chunks, `bins x frames`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkPair {
    pub noisy: Vec<f32>,
    pub clean: Vec<f32>,
    pub valid_frames: usize,
}

/// Random access to training chunks.
pub trait ChunkSource: Sync {
    fn len(&self) -> usize;
    fn chunk_shape(&self) -> (usize, usize);
    fn get(&self, i: usize) -> Result<ChunkPair>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct MemoryChunks {
    pub shape: (usize, usize),
    pub chunks: Vec<ChunkPair>,
}

impl ChunkSource for MemoryChunks {
    fn len(&self) -> usize {
        self.chunks.len()
    }

    fn chunk_shape(&self) -> (usize, usize) {
        self.shape
    }

    fn get(&self, i: usize) -> Result<ChunkPair> {
        Ok(self.chunks[i].clone())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DiskIndex {
    shape: (usize, usize),
    valid_frames: Vec<usize>,
}

/// Chunks cached as one container file each, for corpora that do not fit in memory.
#[derive(Debug, Clone)]
pub struct DiskChunks {
    dir: PathBuf,
    shape: (usize, usize),
    valid_frames: Vec<usize>,
}

impl DiskChunks {
    fn path(dir: &Path, i: usize) -> PathBuf {
        dir.join(format!("{i:07}.spdn"))
    }

    fn create(dir: &Path, shape: (usize, usize)) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            shape,
            valid_frames: Vec::new(),
        })
    }

    fn push(&mut self, c: &ChunkPair) -> Result<()> {
        let mut data = Vec::with_capacity(c.noisy.len() * 2);
        data.extend_from_slice(&c.noisy);
        data.extend_from_slice(&c.clean);
        let a = SpdnArray::new(vec![2, self.shape.0, self.shape.1], SpdnData::F32(data))?;
        write_spdn(&Self::path(&self.dir, self.valid_frames.len()), &a)?;
        self.valid_frames.push(c.valid_frames);
        Ok(())
    }

    fn finish(self) -> Result<Self> {
        let idx = DiskIndex {
            shape: self.shape,
            valid_frames: self.valid_frames.clone(),
        };
        crate::write_atomic(&self.dir.join("index.json"), &serde_json::to_vec(&idx)?)?;
        Ok(self)
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let idx: DiskIndex = serde_json::from_slice(&std::fs::read(dir.join("index.json"))?)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            shape: idx.shape,
            valid_frames: idx.valid_frames,
        })
    }
}

impl ChunkSource for DiskChunks {
    fn len(&self) -> usize {
        self.valid_frames.len()
    }

    fn chunk_shape(&self) -> (usize, usize) {
        self.shape
    }

    fn get(&self, i: usize) -> Result<ChunkPair> {
        let a = read_spdn(&Self::path(&self.dir, i))?;
        let n = self.shape.0 * self.shape.1;
        match a.data {
            SpdnData::F32(mut v) if a.dims == [2, self.shape.0, self.shape.1] => {
                let clean = v.split_off(n);
                Ok(ChunkPair {
                    noisy: v,
                    clean,
                    valid_frames: self.valid_frames[i],
                })
            }
            _ => Err(TrainError::Data(format!("chunk {i}: unexpected layout {:?}", a.dims))),
        }
    }
}

/// Chunk one aligned pair. Returns the chunks and the moments of the noisy features
/// over all bins of every frame.
pub fn chunk_pair(
    noisy: &Waveform,
    clean: &Waveform,
    shape: (usize, usize),
) -> Result<(Vec<ChunkPair>, RunningMoments)> {
    if noisy.len() != clean.len() {
        return Err(TrainError::Data(format!(
            "noisy/clean length {} vs {}",
            noisy.len(),
            clean.len()
        )));
    }
    let (fn_, fc) = (features(noisy)?, features(clean)?);
    let mut m = RunningMoments::default();
    m.push_slice(fn_.values.iter().copied());
    let (cn, cc) = (
        chunk_spectrogram(&fn_, shape.1, shape.0)?,
        chunk_spectrogram(&fc, shape.1, shape.0)?,
    );
    let pairs = cn
        .chunks
        .iter()
        .zip(&cc.chunks)
        .map(|(a, b)| ChunkPair {
            noisy: a.values.iter().map(|&v| v as f32).collect(),
            clean: b.values.iter().map(|&v| v as f32).collect(),
            valid_frames: a.valid_frames,
        })
        .collect();
    Ok((pairs, m))
}

fn load_record(
    rec: &MixtureRecord,
    audio_dir: &Path,
    shape: (usize, usize),
) -> Result<(Vec<ChunkPair>, RunningMoments)> {
    let noisy = read_wav(&rec.noisy_file(audio_dir), SAMPLE_RATE)?;
    let clean = read_wav(&rec.clean_file(audio_dir), SAMPLE_RATE)?;
    chunk_pair(&noisy, &clean, shape)
}

/// Load every record's chunks, skipping unreadable records with a warning.
///
/// With `cache_dir`, chunks are streamed to disk instead of held in memory.
pub fn load_chunks(
    records: &[MixtureRecord],
    audio_dir: &Path,
    shape: (usize, usize),
    cache_dir: Option<&Path>,
) -> Result<(Box<dyn ChunkSource>, RunningMoments)> {
    let mut moments = RunningMoments::default();
    let mut mem = Vec::new();
    let mut disk = cache_dir.map(|d| DiskChunks::create(d, shape)).transpose()?;
    let group = rayon::current_num_threads().max(1) * 2;
    let mut skipped = 0usize;
    for batch in records.chunks(group) {
        let loaded: Vec<_> = batch
            .par_iter()
            .map(|r| (r, load_record(r, audio_dir, shape)))
            .collect();
        for (r, res) in loaded {
            match res {
                Ok((pairs, m)) => {
                    moments.merge(&m);
                    match disk.as_mut() {
                        Some(d) => pairs.iter().try_for_each(|p| d.push(p))?,
                        None => mem.extend(pairs),
                    }
                }
                Err(e) => {
                    skipped += 1;
                    warn!("event=skip_record id={} error=\"{e}\"", r.mixture_id);
                }
            }
        }
    }
    if skipped > 0 {
        warn!("event=records_skipped count={skipped} of={}", records.len());
    }
    let src: Box<dyn ChunkSource> = match disk {
        Some(d) => Box::new(d.finish()?),
        None => Box::new(MemoryChunks { shape, chunks: mem }),
    };
    if src.is_empty() {
        return Err(TrainError::Data("no usable records".into()));
    }
    info!(
        "event=chunks_loaded records={} chunks={} cached={}",
        records.len() - skipped,
        src.len(),
        cache_dir.is_some()
    );
    Ok((src, moments))
}

/// Normalize one raw chunk; padded frames are zero in the normalized domain.
pub fn normalize_chunk(raw: &[f32], valid_frames: usize, shape: (usize, usize), n: &FeatureNormalizer) -> Vec<f32> {
    let w = shape.1;
    raw.iter()
        .enumerate()
        .map(|(i, &v)| {
            if i % w < valid_frames {
                n.normalize(v as f64) as f32
            } else {
                0.0
            }
        })
        .collect()
}

/// Stack normalized chunks `indices` into `(B, 1, H, W)` noisy and clean tensors.
pub fn make_batch(
    src: &dyn ChunkSource,
    indices: &[usize],
    n: &FeatureNormalizer,
) -> Result<(Tensor4<f32>, Tensor4<f32>)> {
    let (h, w) = src.chunk_shape();
    let mut xs = Vec::with_capacity(indices.len() * h * w);
    let mut ys = Vec::with_capacity(indices.len() * h * w);
    for &i in indices {
        let c = src.get(i)?;
        xs.extend(normalize_chunk(&c.noisy, c.valid_frames, (h, w), n));
        ys.extend(normalize_chunk(&c.clean, c.valid_frames, (h, w), n));
    }
    let shape = [indices.len(), 1, h, w];
    Ok((Tensor4::from_vec(shape, xs)?, Tensor4::from_vec(shape, ys)?))
}

/// Bytes held by `chunks` chunks of `shape` in memory.
pub fn chunk_bytes(chunks: usize, shape: (usize, usize)) -> usize {
    chunks * shape.0 * shape.1 * 2 * std::mem::size_of::<f32>()
}
