//! Supervised pairs and unsupervised mixtures-of-mixtures from waveforms.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// Activity threshold relative to the loudest 20 ms frame.
pub const ACTIVITY_THRESHOLD_DB: f64 = -40.0;

/// Length of the early part of an impulse response kept for dereverberated
/// targets, counted from the direct-path peak.
pub const EARLY_WINDOW_SECONDS: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetPolicy {
    /// Speech after the full room response.
    #[default]
    ReverberantTarget,
    /// Speech after the first 50 ms of the room response only.
    WindowedRirTarget,
    /// The speech input as given. Used when the "speech" is itself a noisy
    /// recording, so the target keeps its noise.
    NoisyTarget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixSpec {
    /// `f64::INFINITY` means no noise.
    pub snr_db: f64,
    pub rir: Option<Waveform>,
    pub target_policy: TargetPolicy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedPair {
    pub input: Waveform,
    pub target: Waveform,
}

/// `X`, `N` and `Y = X + N`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnsupervisedExample {
    pub x: Waveform,
    pub n: Waveform,
    pub y: Waveform,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainingExample {
    Supervised(SupervisedPair),
    Unsupervised(UnsupervisedExample),
}

/// RMS over 20 ms frames within [`ACTIVITY_THRESHOLD_DB`] of the loudest
/// frame. Falls back to the plain RMS for signals shorter than a frame.
pub fn active_rms(w: &Waveform) -> f64 {
    let frame = (w.sample_rate() as usize / 50).max(1);
    if w.len() < frame {
        return w.rms();
    }
    let energies: Vec<f64> = w
        .samples()
        .chunks(frame)
        .map(|c| c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64)
        .collect();
    let peak = energies.iter().cloned().fold(0.0, f64::max);
    if peak == 0.0 {
        return 0.0;
    }
    let threshold = peak * 10f64.powf(ACTIVITY_THRESHOLD_DB / 10.0);
    let active: Vec<f64> = energies.into_iter().filter(|&e| e >= threshold).collect();
    (active.iter().sum::<f64>() / active.len() as f64).sqrt()
}

/// `20 log10(active_rms(speech) / rms(noise))`.
pub fn measured_snr_db(speech: &Waveform, noise: &Waveform) -> f64 {
    20.0 * (active_rms(speech) / noise.rms()).log10()
}

/// Gain that puts `noise` at `snr_db` below the active level of `speech`.
pub fn noise_gain(speech: &Waveform, noise: &Waveform, snr_db: f64) -> Result<f64> {
    let gain = active_rms(speech) / noise.rms() * 10f64.powf(-snr_db / 20.0);
    if !(gain > 0.0 && gain.is_finite()) {
        return Err(Error::invalid(format!(
            "cannot reach {snr_db} dB SNR: noise gain {gain}"
        )));
    }
    Ok(gain)
}

/// Linear convolution truncated to the length of `x`.
pub fn convolve(x: &Waveform, h: &Waveform) -> Result<Waveform> {
    if x.sample_rate() != h.sample_rate() {
        return Err(Error::invalid("signal and impulse response rates differ"));
    }
    if h.is_empty() || x.is_empty() {
        return Ok(Waveform::zeros(x.len(), x.sample_rate()));
    }
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |s: &[f64]| {
        let mut v: Vec<Complex64> = s.iter().map(|&r| Complex64::new(r, 0.0)).collect();
        v.resize(n, Complex64::new(0.0, 0.0));
        v
    };
    let (mut a, mut b) = (pad(x.samples()), pad(h.samples()));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    let samples = a[..x.len()].iter().map(|c| c.re / n as f64).collect();
    Waveform::new(samples, x.sample_rate())
}

/// The impulse response with everything later than 50 ms after its largest
/// tap set to zero.
pub fn early_window(h: &Waveform) -> Waveform {
    let peak = h
        .samples()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map_or(0, |(i, _)| i);
    let keep = peak + (EARLY_WINDOW_SECONDS * h.sample_rate() as f64).round() as usize;
    let samples = h
        .samples()
        .iter()
        .enumerate()
        .map(|(i, &v)| if i <= keep { v } else { 0.0 })
        .collect();
    Waveform::new(samples, h.sample_rate()).expect("finite input")
}

/// Loops or crops `noise` to `len` samples.
pub fn loop_to(noise: &Waveform, len: usize) -> Waveform {
    if noise.is_empty() {
        return Waveform::zeros(len, noise.sample_rate());
    }
    let samples = noise.samples().iter().cycle().take(len).cloned().collect();
    Waveform::new(samples, noise.sample_rate()).expect("finite input")
}

/// Builds a supervised pair: optional reverberation of `speech`, noise scaled
/// to the requested SNR against the active speech level, target by policy.
/// Noise is looped or cropped to the speech length.
pub fn mix(speech: &Waveform, noise: &Waveform, spec: &MixSpec) -> Result<SupervisedPair> {
    if speech.sample_rate() != noise.sample_rate() {
        return Err(Error::invalid(format!(
            "speech at {} Hz, noise at {} Hz",
            speech.sample_rate(),
            noise.sample_rate()
        )));
    }
    if spec.snr_db.is_nan() {
        return Err(Error::invalid("SNR is NaN"));
    }
    let reverberant = match &spec.rir {
        Some(h) => convolve(speech, h)?,
        None => speech.clone(),
    };
    let target = match spec.target_policy {
        TargetPolicy::ReverberantTarget => reverberant.clone(),
        TargetPolicy::WindowedRirTarget => match &spec.rir {
            Some(h) => convolve(speech, &early_window(h))?,
            None => speech.clone(),
        },
        TargetPolicy::NoisyTarget => speech.clone(),
    };
    let input = if spec.snr_db == f64::INFINITY {
        reverberant
    } else {
        let noise = loop_to(noise, speech.len());
        let gain = noise_gain(&reverberant, &noise, spec.snr_db)?;
        reverberant.add(&noise.scaled(gain))?
    };
    Ok(SupervisedPair { input, target })
}

/// Mixture of a noisy recording `x` and an extra noise `n`.
pub fn make_unsupervised(x: &Waveform, n: &Waveform) -> Result<UnsupervisedExample> {
    let y = x.add(n)?;
    Ok(UnsupervisedExample {
        x: x.clone(),
        n: n.clone(),
        y,
    })
}
