use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{ComplexSpectrogram, Waveform};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    /// Square root of a periodic Hann window, used for both analysis and synthesis.
    #[default]
    SqrtHann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub frame_length: usize,
    pub hop_length: usize,
    #[serde(default)]
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self::for_sample_rate(8000)
    }
}

impl StftConfig {
    pub fn new(frame_length: usize, hop_length: usize) -> Result<Self> {
        let cfg = Self {
            frame_length,
            hop_length,
            window: WindowKind::SqrtHann,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// 32 ms frames with 16 ms hop at the given rate.
    pub fn for_sample_rate(sample_rate: u32) -> Self {
        let frame_length = (sample_rate as usize * 32 / 1000).max(2);
        Self {
            frame_length,
            hop_length: frame_length / 2,
            window: WindowKind::SqrtHann,
        }
    }

    pub fn freq_bins(&self) -> usize {
        self.frame_length / 2 + 1
    }

    pub fn window(&self) -> Vec<f64> {
        let n = self.frame_length as f64;
        match self.window {
            WindowKind::SqrtHann => (0..self.frame_length)
                .map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos()).sqrt())
                .collect(),
        }
    }

    /// Overlap-added product of analysis and synthesis windows. Errors if it
    /// is not constant over time at the configured hop.
    pub fn cola_constant(&self) -> Result<f64> {
        let w = self.window();
        let hop = self.hop_length;
        let sums: Vec<f64> = (0..hop)
            .map(|n| w.iter().skip(n).step_by(hop).map(|x| x * x).sum())
            .collect();
        let first = sums[0];
        let spread = sums
            .iter()
            .fold(0.0f64, |m, s| m.max((s - first).abs()));
        if !(first > 0.0) || spread > 1e-9 * first {
            return Err(Error::config(format!(
                "window/hop pair {}/{} violates constant overlap-add",
                self.frame_length, hop
            )));
        }
        Ok(first)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_length < 2 || self.hop_length == 0 {
            return Err(Error::config("frame and hop lengths must be positive"));
        }
        if self.hop_length > self.frame_length {
            return Err(Error::config(format!(
                "hop {} exceeds frame length {}",
                self.hop_length, self.frame_length
            )));
        }
        self.cola_constant().map(|_| ())
    }

    /// Number of analysis frames for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.frame_length {
            0
        } else {
            (len - self.frame_length) / self.hop_length + 1
        }
    }

    /// Length of the overlap-add output for `frames` frames.
    pub fn synthesis_length(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop_length + self.frame_length
        }
    }

    /// Sample range of a `frames`-frame synthesis where every sample is covered
    /// by the full set of overlapping windows.
    pub fn interior(&self, frames: usize) -> std::ops::Range<usize> {
        let start = self.frame_length - self.hop_length;
        let end = frames * self.hop_length;
        start..end.max(start)
    }
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    let n = cfg.frame_length;
    if w.len() < n {
        return Err(Error::invalid(format!(
            "waveform of {} samples is shorter than one {n}-sample frame",
            w.len()
        )));
    }
    let frames = cfg.frame_count(w.len());
    let k_bins = cfg.freq_bins();
    let window = cfg.window();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut bins = vec![Complex64::new(0.0, 0.0); k_bins * frames];
    let samples = w.samples();
    for frame in 0..frames {
        let offset = frame * cfg.hop_length;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(samples[offset + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..k_bins {
            bins[k * frames + frame] = buf[k];
        }
    }
    ComplexSpectrogram::new(bins, k_bins, frames, w.sample_rate(), *cfg)
}

pub fn istft(spec: &ComplexSpectrogram) -> Result<Waveform> {
    let cfg = spec.config();
    let cola = cfg.cola_constant()?;
    let n = cfg.frame_length;
    let k_bins = spec.freq_bins();
    let frames = spec.frames();
    let window = cfg.window();
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let mut out = vec![0.0; cfg.synthesis_length(frames)];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let scale = 1.0 / (n as f64 * cola);
    for frame in 0..frames {
        for (k, b) in buf.iter_mut().enumerate() {
            *b = if k < k_bins {
                spec.get(k, frame)
            } else {
                spec.get(n - k, frame).conj()
            };
        }
        ifft.process(&mut buf);
        let offset = frame * cfg.hop_length;
        for i in 0..n {
            out[offset + i] += buf[i].re * window[i] * scale;
        }
    }
    Waveform::new(out, spec.sample_rate())
}
