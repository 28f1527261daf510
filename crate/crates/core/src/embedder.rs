//! Differentiable frame embeddings used by the unsupervised objective.
//!
//! The default embedder is a fixed log-mel front end followed by a seeded
//! random projection. It is content sensitive and cheap, which is all the
//! embedding and disentanglement terms need. Other embedders plug in through
//! [`FrameEmbedder`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::dsp::ComplexSpectrogram;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    #[default]
    LogmelProjection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub num_mels: usize,
    pub dim: usize,
    pub seed: u64,
    /// Floor added to mel energies before the log.
    pub eps: f64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::LogmelProjection,
            num_mels: 16,
            dim: 24,
            seed: 0,
            eps: 1e-10,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_mels == 0 || self.dim == 0 {
            return Err(Error::config("embedder num_mels and dim must be positive"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("embedder eps must be positive"));
        }
        Ok(())
    }

    /// Builds the embedder for spectra with `freq_bins` bins at `sample_rate`.
    pub fn build(&self, freq_bins: usize, sample_rate: u32) -> Result<Box<dyn FrameEmbedder>> {
        match self.kind {
            EmbedderKind::LogmelProjection => Ok(Box::new(LogMelProjection::new(
                self,
                freq_bins,
                sample_rate,
            )?)),
        }
    }
}

/// Maps a complex spectrum `[2, K, N]` on a tape to embeddings `[N, D]`.
/// Row `n` of the output may only depend on frame `n` of the input.
pub trait FrameEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn freq_bins(&self) -> usize;
    fn embed(&self, tape: &mut Tape, spectrum: Var) -> Result<Var>;
}

/// Per-frame embedding vectors, `[frames, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    vectors: Tensor,
}

impl EmbeddingSequence {
    pub fn new(vectors: Tensor) -> Result<Self> {
        if vectors.shape().len() != 2 || vectors.shape()[1] == 0 {
            return Err(Error::invalid(format!(
                "embeddings must be [frames, dim], got {:?}",
                vectors.shape()
            )));
        }
        if !vectors.all_finite() {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(Self { vectors })
    }

    pub fn frames(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn row(&self, n: usize) -> &[f64] {
        let d = self.dim();
        &self.vectors.data()[n * d..(n + 1) * d]
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.vectors
    }
}

/// Embeds a spectrogram outside of training.
pub fn embed_spectrogram(
    embedder: &dyn FrameEmbedder,
    spec: &ComplexSpectrogram,
) -> Result<EmbeddingSequence> {
    let mut tape = Tape::new();
    let x = tape.constant(spec.to_tensor());
    let e = embedder.embed(&mut tape, x)?;
    EmbeddingSequence::new(tape.value(e).clone())
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters evenly spaced on the mel scale from 0 to Nyquist,
/// as a `[K, M]` matrix.
pub fn mel_filterbank(freq_bins: usize, num_mels: usize, sample_rate: u32) -> Result<Tensor> {
    if freq_bins < 2 || num_mels == 0 || sample_rate == 0 {
        return Err(Error::invalid("filterbank needs >= 2 bins, >= 1 mel, rate > 0"));
    }
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..num_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (num_mels + 1) as f64))
        .collect();
    let mut fb = vec![0.0; freq_bins * num_mels];
    for k in 0..freq_bins {
        let f = nyquist * k as f64 / (freq_bins - 1) as f64;
        for m in 0..num_mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb[k * num_mels + m] = w;
        }
    }
    Tensor::from_vec(vec![freq_bins, num_mels], fb)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogMelProjection {
    filterbank: Tensor,
    projection: Tensor,
    eps: f64,
}

impl LogMelProjection {
    pub fn new(cfg: &EmbedderConfig, freq_bins: usize, sample_rate: u32) -> Result<Self> {
        cfg.validate()?;
        let filterbank = mel_filterbank(freq_bins, cfg.num_mels, sample_rate)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        // unit-variance entries scaled by 1/sqrt(M)
        let bound = (3.0 / cfg.num_mels as f64).sqrt();
        let projection = Tensor::from_vec(
            vec![cfg.num_mels, cfg.dim],
            (0..cfg.num_mels * cfg.dim)
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
        )?;
        Ok(Self {
            filterbank,
            projection,
            eps: cfg.eps,
        })
    }

    pub fn filterbank(&self) -> &Tensor {
        &self.filterbank
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }
}

impl FrameEmbedder for LogMelProjection {
    fn dim(&self) -> usize {
        self.projection.shape()[1]
    }

    fn freq_bins(&self) -> usize {
        self.filterbank.shape()[0]
    }

    fn embed(&self, tape: &mut Tape, spectrum: Var) -> Result<Var> {
        let shape = tape.shape(spectrum).to_vec();
        if shape.len() != 3 || shape[0] != 2 || shape[1] != self.freq_bins() {
            return Err(Error::invalid(format!(
                "embedder expects [2, {}, N], got {shape:?}",
                self.freq_bins()
            )));
        }
        let (k, n) = (shape[1], shape[2]);
        let re = tape.slice(spectrum, 0, 0, 1)?;
        let im = tape.slice(spectrum, 0, 1, 2)?;
        let re2 = tape.mul(re, re)?;
        let im2 = tape.mul(im, im)?;
        let power = tape.add(re2, im2)?;
        let power = tape.reshape(power, &[k, n])?;
        let power = tape.transpose(power)?;
        let fb = tape.constant(self.filterbank.clone());
        let mel = tape.matmul(power, fb)?;
        let mel = tape.add_scalar(mel, self.eps);
        let logmel = tape.log(mel);
        let proj = tape.constant(self.projection.clone());
        tape.matmul(logmel, proj)
    }
}
