use std::io::{Read, Write};
use std::ops::RangeInclusive;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{CorpusError, TokenId, Vocabulary, BOS, EOS};
use crate::numerics::Tensor;

/// Nominal frames per second of the simulated feature stream.
pub const FRAME_RATE: f64 = 50.0;

const AUDIO_MAGIC: &[u8; 8] = b"IMGSTAUD";
const AUDIO_VERSION: u32 = 1;

/// Simulated acoustic frames of one spoken utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatures {
    pub scene_id: u64,
    /// `T × d_audio`
    pub frames: Tensor,
    pub frame_rate: f64,
}

impl AudioFeatures {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }
}

/// Fixed per-token prototype vectors plus the frame-emission process.
#[derive(Clone, Debug)]
pub struct AudioSynth {
    dim: usize,
    prototypes: Vec<Vec<f64>>,
    durations: RangeInclusive<usize>,
}

impl AudioSynth {
    /// Prototypes are drawn once from `N(0, proto_std²)` for every
    /// non-special token.
    pub fn new(vocab: &Vocabulary, dim: usize, proto_std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, proto_std).expect("finite std");
        let prototypes = (0..vocab.len())
            .map(|_| (0..dim).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        Self {
            dim,
            prototypes,
            durations: 2..=4,
        }
    }

    pub fn with_durations(mut self, durations: RangeInclusive<usize>) -> Self {
        self.durations = durations;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prototype(&self, token: TokenId) -> Option<&[f64]> {
        if token == BOS || token == EOS {
            return None;
        }
        self.prototypes.get(token).map(Vec::as_slice)
    }

    /// Each token emits its prototype for a seeded random number of frames
    /// plus isotropic Gaussian noise of scale `noise_sigma`.
    pub fn synthesize(
        &self,
        scene_id: u64,
        tokens: &[TokenId],
        seed: u64,
        noise_sigma: f64,
    ) -> Result<AudioFeatures, CorpusError> {
        if tokens.is_empty() {
            return Err(CorpusError::Data("cannot synthesize an empty utterance".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, noise_sigma.max(0.0)).map_err(|e| {
            CorpusError::Config(format!("noise sigma {noise_sigma}: {e}"))
        })?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &t in tokens {
            let proto = self
                .prototype(t)
                .ok_or_else(|| CorpusError::Vocabulary(format!("no prototype for token {t}")))?;
            let dur = rng.random_range(self.durations.clone());
            for _ in 0..dur {
                for &p in proto {
                    let n = if noise_sigma > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    data.push(p + n);
                }
                rows += 1;
            }
        }
        let frames = Tensor::new(&[rows, self.dim], data)
            .map_err(|e| CorpusError::Data(e.to_string()))?;
        Ok(AudioFeatures {
            scene_id,
            frames,
            frame_rate: FRAME_RATE,
        })
    }

    /// Token whose prototype is closest to `frame` in Euclidean distance.
    pub fn nearest_token(&self, frame: &[f64]) -> TokenId {
        let mut best = (f64::INFINITY, 0);
        for (id, proto) in self.prototypes.iter().enumerate() {
            if id == BOS || id == EOS {
                continue;
            }
            let d: f64 = proto.iter().zip(frame).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, id);
            }
        }
        best.1
    }
}

/// Writes `frames` as: magic, version, rows, cols, then little-endian f64.
pub fn write_audio(path: &Path, frames: &Tensor) -> Result<(), CorpusError> {
    let (rows, cols) = frames.matrix_dims();
    let mut buf = Vec::with_capacity(20 + frames.numel() * 8);
    buf.extend_from_slice(AUDIO_MAGIC);
    buf.extend_from_slice(&AUDIO_VERSION.to_le_bytes());
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in frames.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| CorpusError::io(path, e))?;
    f.write_all(&buf).map_err(|e| CorpusError::io(path, e))
}

pub fn read_audio(path: &Path) -> Result<Tensor, CorpusError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| CorpusError::io(path, e))?;
    let bad = |msg: &str| CorpusError::Data(format!("{}: {msg}", path.display()));
    if buf.len() < 20 || &buf[..8] != AUDIO_MAGIC {
        return Err(bad("not an audio feature file"));
    }
    let word = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().expect("4 bytes"));
    if word(8) != AUDIO_VERSION {
        return Err(bad("unsupported audio format version"));
    }
    let (rows, cols) = (word(12) as usize, word(16) as usize);
    if buf.len() != 20 + rows * cols * 8 {
        return Err(bad("truncated audio payload"));
    }
    let data = buf[20..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(&[rows, cols], data).map_err(|e| bad(&e.to_string()))
}
