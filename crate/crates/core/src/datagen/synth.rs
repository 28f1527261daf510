//! Seeded signal generators: pseudo-speech, four noise colours and
//! exponentially decaying room responses.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsp::{stft, StftConfig, Waveform};

pub const SPEECH_RMS_RANGE: (f64, f64) = (0.03, 0.3);
pub const DEFAULT_MAINS_HZ: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    White,
    Pink,
    BabbleLike,
    Hum,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 4] = [
        NoiseKind::White,
        NoiseKind::Pink,
        NoiseKind::BabbleLike,
        NoiseKind::Hum,
    ];
}

fn sample_count(seconds: f64, sample_rate: u32) -> usize {
    (seconds * sample_rate as f64).round().max(1.0) as usize
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn set_rms(mut x: Vec<f64>, target: f64) -> Vec<f64> {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    if rms > 0.0 {
        let g = target / rms;
        x.iter_mut().for_each(|v| *v *= g);
    }
    x
}

/// Formant-shaped amplitude of a harmonic at `f` Hz.
fn formant_gain(f: f64, formants: &[(f64, f64)]) -> f64 {
    formants
        .iter()
        .map(|&(centre, width)| (-0.5 * ((f - centre) / width).powi(2)).exp())
        .sum::<f64>()
        + 0.02
}

/// Pseudo-speech: syllables of formant-shaped harmonic tones with a drifting
/// pitch, separated by short pauses, with occasional band-limited noise
/// bursts standing in for fricatives. RMS lies in [`SPEECH_RMS_RANGE`].
pub fn synth_speech(seed: u64, seconds: f64, sample_rate: u32) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = sample_count(seconds, sample_rate);
    let sr = sample_rate as f64;
    let nyquist = sr / 2.0;
    let mut out = vec![0.0; n];

    let f0_base = rng.random_range(90.0..220.0);
    let drift_rate = rng.random_range(0.2..0.8);
    let drift_depth = rng.random_range(0.05..0.15);
    let mut phase = 0.0;

    let mut start = (rng.random_range(0.0..0.1) * sr) as usize;
    while start < n {
        let len = (rng.random_range(0.12..0.30) * sr) as usize;
        let end = (start + len).min(n);
        let formants = [
            (rng.random_range(300.0..900.0), 120.0),
            (rng.random_range(900.0..2200.0), 180.0),
            (rng.random_range(2200.0..3200.0), 250.0),
        ];
        let level = rng.random_range(0.5..1.0);
        for (i, o) in out.iter_mut().enumerate().take(end).skip(start) {
            let t = i as f64 / sr;
            let f0 = f0_base * (1.0 + drift_depth * (2.0 * PI * drift_rate * t).sin());
            phase += 2.0 * PI * f0 / sr;
            let u = (i - start) as f64 / (end - start).max(1) as f64;
            let env = (PI * u).sin().powi(2);
            let mut v = 0.0;
            let mut h = 1.0;
            while h * f0 < 0.9 * nyquist {
                v += formant_gain(h * f0, &formants) * (h * phase).sin() / h.sqrt();
                h += 1.0;
            }
            *o += level * env * v;
        }
        // fricative burst at the syllable end
        if rng.random_bool(0.4) {
            let blen = (rng.random_range(0.04..0.10) * sr) as usize;
            let bend = (end + blen).min(n);
            let centre = (rng.random_range(2500.0..3800.0f64)).min(0.8 * nyquist);
            let bw = 0.15 * centre;
            // two-pole resonator
            let r = (-PI * bw / sr).exp();
            let (a1, a2) = (2.0 * r * (2.0 * PI * centre / sr).cos(), -r * r);
            let (mut y1, mut y2) = (0.0, 0.0);
            for (i, o) in out.iter_mut().enumerate().take(bend).skip(end) {
                let u = (i - end) as f64 / (bend - end).max(1) as f64;
                let y = gauss(&mut rng) * (1.0 - r) + a1 * y1 + a2 * y2;
                y2 = y1;
                y1 = y;
                *o += 2.0 * (PI * u).sin() * y;
            }
        }
        let pause = (rng.random_range(0.03..0.15) * sr) as usize;
        start = end + pause;
    }
    let target = rng.random_range(0.05..0.2);
    Waveform::new(set_rms(out, target), sample_rate).expect("finite synthesis")
}

/// Seeded noise of the given kind; hum uses [`DEFAULT_MAINS_HZ`].
pub fn synth_noise(seed: u64, seconds: f64, sample_rate: u32, kind: NoiseKind) -> Waveform {
    synth_noise_with_mains(seed, seconds, sample_rate, kind, DEFAULT_MAINS_HZ)
}

pub fn synth_noise_with_mains(
    seed: u64,
    seconds: f64,
    sample_rate: u32,
    kind: NoiseKind,
    mains_hz: f64,
) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = sample_count(seconds, sample_rate);
    let sr = sample_rate as f64;
    let samples: Vec<f64> = match kind {
        NoiseKind::White => (0..n).map(|_| gauss(&mut rng)).collect(),
        NoiseKind::Pink => {
            // Paul Kellet's economy 1/f filter
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            (0..n)
                .map(|_| {
                    let w = gauss(&mut rng);
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
        NoiseKind::BabbleLike => {
            let talkers = 6;
            let mut acc = vec![0.0; n];
            for _ in 0..talkers {
                let s = synth_speech(rng.random(), seconds, sample_rate);
                for (a, v) in acc.iter_mut().zip(s.samples()) {
                    *a += v;
                }
            }
            acc
        }
        NoiseKind::Hum => {
            let phases: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    let mut v = 0.0;
                    for (h, p) in phases.iter().enumerate() {
                        let f = mains_hz * (h + 1) as f64;
                        if f < sr / 2.0 {
                            v += (2.0 * PI * f * t + p).sin() / (h + 1) as f64;
                        }
                    }
                    v + 0.01 * gauss(&mut rng)
                })
                .collect()
        }
    };
    let target = rng.random_range(0.02..0.2);
    Waveform::new(set_rms(samples, target), sample_rate).expect("finite synthesis")
}

/// Synthetic room response: a unit direct path after a short delay followed
/// by an exponentially decaying Gaussian tail with the given RT60.
pub fn synth_rir(seed: u64, sample_rate: u32, rt60: f64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate as f64;
    let rt60 = rt60.max(0.05);
    let delay = (rng.random_range(0.001..0.005) * sr) as usize;
    let len = delay + (rt60 * sr).ceil() as usize;
    let mut h = vec![0.0; len];
    h[delay] = 1.0;
    let gap = (0.002 * sr) as usize + 1;
    for (i, v) in h.iter_mut().enumerate().skip(delay + gap) {
        let t = (i - delay) as f64 / sr;
        // 60 dB of decay over rt60 seconds
        let decay = (-6.908 * t / rt60).exp();
        *v = (0.3 * gauss(&mut rng) * decay).clamp(-0.9, 0.9);
    }
    Waveform::new(h, sample_rate).expect("finite synthesis")
}

/// Spectral flatness (geometric over arithmetic mean) of the long-term
/// power spectrum, averaged over 32 ms frames.
pub fn spectral_flatness(w: &Waveform) -> f64 {
    let cfg = StftConfig::for_sample_rate(w.sample_rate());
    let Ok(spec) = stft(w, &cfg) else {
        return 0.0;
    };
    let k = spec.freq_bins();
    let power: Vec<f64> = (0..k)
        .map(|b| (0..spec.frames()).map(|n| spec.get(b, n).norm_sqr()).sum::<f64>() + 1e-30)
        .collect();
    let arith = power.iter().sum::<f64>() / k as f64;
    let geo = (power.iter().map(|v| v.ln()).sum::<f64>() / k as f64).exp();
    geo / arith
}
