//! Waveforms, complex spectrograms, power-law compression and complex masking.
//!
//! Spectrograms are stored frequency-major (`[k][n]`), which is the same
//! layout the network consumes as a `[2, K, N]` real tensor (real channel
//! first, imaginary channel second).

mod stft;
pub mod wav;

pub use stft::{istft, stft, StftConfig, WindowKind};

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Guard added to magnitudes before raising them to a negative power.
pub const COMPRESSION_EPS: f64 = 1e-12;

/// A mono, finite, time-domain signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("waveform sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate: sample_rate.max(1),
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
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

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.energy() / self.samples.len() as f64).sqrt()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Sample-wise sum. Both signals must share rate and length.
    pub fn add(&self, other: &Waveform) -> Result<Self> {
        if self.sample_rate != other.sample_rate {
            return Err(Error::invalid(format!(
                "sample rate mismatch: {} vs {}",
                self.sample_rate, other.sample_rate
            )));
        }
        if self.len() != other.len() {
            return Err(Error::invalid(format!(
                "length mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(Self {
            samples: self
                .samples
                .iter()
                .zip(&other.samples)
                .map(|(a, b)| a + b)
                .collect(),
            sample_rate: self.sample_rate,
        })
    }

    /// Truncates or zero-pads to exactly `len` samples.
    pub fn fit_to(&self, len: usize) -> Self {
        let mut samples = self.samples.clone();
        samples.resize(len, 0.0);
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

/// Power-law exponent `c` applied to spectral magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct CompressionExponent(f64);

impl CompressionExponent {
    pub fn new(c: f64) -> Result<Self> {
        if !(c > 0.0 && c <= 1.0) {
            return Err(Error::config(format!(
                "compression exponent must lie in (0, 1], got {c}"
            )));
        }
        Ok(Self(c))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for CompressionExponent {
    fn default() -> Self {
        Self(0.3)
    }
}

impl TryFrom<f64> for CompressionExponent {
    type Error = Error;

    fn try_from(c: f64) -> Result<Self> {
        Self::new(c)
    }
}

impl From<CompressionExponent> for f64 {
    fn from(c: CompressionExponent) -> f64 {
        c.0
    }
}

/// Complex time-frequency representation indexed `[k][n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    bins: Vec<Complex64>,
    freq_bins: usize,
    frames: usize,
    sample_rate: u32,
    config: StftConfig,
}

impl ComplexSpectrogram {
    pub fn new(
        bins: Vec<Complex64>,
        freq_bins: usize,
        frames: usize,
        sample_rate: u32,
        config: StftConfig,
    ) -> Result<Self> {
        if bins.len() != freq_bins * frames {
            return Err(Error::invalid(format!(
                "spectrogram buffer has {} bins, expected {freq_bins}x{frames}",
                bins.len()
            )));
        }
        if freq_bins != config.freq_bins() {
            return Err(Error::invalid(format!(
                "spectrogram has {freq_bins} frequency bins but frame length {} implies {}",
                config.frame_length,
                config.freq_bins()
            )));
        }
        if bins.iter().any(|b| !b.re.is_finite() || !b.im.is_finite()) {
            return Err(Error::NonFinite("spectrogram bin".into()));
        }
        Ok(Self {
            bins,
            freq_bins,
            frames,
            sample_rate,
            config,
        })
    }

    pub fn zeros(frames: usize, sample_rate: u32, config: StftConfig) -> Self {
        let freq_bins = config.freq_bins();
        Self {
            bins: vec![Complex64::new(0.0, 0.0); freq_bins * frames],
            freq_bins,
            frames,
            sample_rate,
            config,
        }
    }

    /// Rebuilds a spectrogram from a `[2, K, N]` tensor.
    pub fn from_tensor(t: &Tensor, sample_rate: u32, config: StftConfig) -> Result<Self> {
        let shape = t.shape();
        if shape.len() != 3 || shape[0] != 2 {
            return Err(Error::invalid(format!(
                "expected a [2, K, N] tensor, got {shape:?}"
            )));
        }
        let (k, n) = (shape[1], shape[2]);
        let plane = k * n;
        let data = t.data();
        let bins = (0..plane)
            .map(|i| Complex64::new(data[i], data[plane + i]))
            .collect();
        Self::new(bins, k, n, sample_rate, config)
    }

    pub fn to_tensor(&self) -> Tensor {
        let plane = self.bins.len();
        let mut data = Vec::with_capacity(2 * plane);
        data.extend(self.bins.iter().map(|b| b.re));
        data.extend(self.bins.iter().map(|b| b.im));
        Tensor::from_vec(vec![2, self.freq_bins, self.frames], data)
            .expect("shape matches buffer")
    }

    pub fn freq_bins(&self) -> usize {
        self.freq_bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn bins(&self) -> &[Complex64] {
        &self.bins
    }

    pub fn get(&self, k: usize, n: usize) -> Complex64 {
        self.bins[k * self.frames + n]
    }

    pub fn set(&mut self, k: usize, n: usize, value: Complex64) {
        self.bins[k * self.frames + n] = value;
    }

    pub fn same_shape(&self, other: &ComplexSpectrogram) -> bool {
        self.freq_bins == other.freq_bins && self.frames == other.frames
    }

    fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Self {
        Self {
            bins: self.bins.iter().map(|&b| f(b)).collect(),
            ..self.clone()
        }
    }

    fn zip_with(
        &self,
        other: &ComplexSpectrogram,
        f: impl Fn(Complex64, Complex64) -> Complex64,
    ) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(Error::invalid(format!(
                "spectrogram shape mismatch: {}x{} vs {}x{}",
                self.freq_bins, self.frames, other.freq_bins, other.frames
            )));
        }
        Ok(Self {
            bins: self
                .bins
                .iter()
                .zip(&other.bins)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..self.clone()
        })
    }

    pub fn add(&self, other: &ComplexSpectrogram) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }
}

/// Magnitude gain that maps `|y|` to (approximately) `|y|^c`:
/// `|y| (|y| + eps)^(c - 2)`. Zero at silence, smooth in `y`.
pub fn compression_gain(magnitude: f64, c: f64, eps: f64) -> f64 {
    magnitude * (magnitude + eps).powf(c - 2.0)
}

/// Raises every bin magnitude to the power `c` while keeping its phase.
pub fn compress(
    spec: &ComplexSpectrogram,
    c: CompressionExponent,
    eps: f64,
) -> Result<ComplexSpectrogram> {
    if !(eps > 0.0) {
        return Err(Error::invalid("compression epsilon must be positive"));
    }
    let c = c.value();
    Ok(spec.map(|y| y * compression_gain(y.norm(), c, eps)))
}

/// Element-wise complex product `G * Y`.
pub fn apply_mask(
    input: &ComplexSpectrogram,
    mask: &ComplexSpectrogram,
) -> Result<ComplexSpectrogram> {
    input.zip_with(mask, |y, g| g * y)
}
