//! Training data: seeded synthetic corpora or WAV files listed in a
//! manifest, mixed into supervised pairs and unsupervised
//! mixtures-of-mixtures and served as deterministic batch streams.

pub mod batches;
pub mod manifest;
pub mod mix;
pub mod synth;

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use batches::{Batch, BatchStream, Mode};
pub use manifest::{Manifest, ManifestEntry, Role};
pub use mix::{
    active_rms, make_unsupervised, measured_snr_db, mix, MixSpec, SupervisedPair, TargetPolicy,
    TrainingExample, UnsupervisedExample,
};
pub use synth::{synth_noise, synth_rir, synth_speech, NoiseKind};

use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// Where the speech of supervised pairs comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpeechSource {
    #[default]
    Clean,
    /// Noisy recordings, as used for unsupervised training.
    Noisy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub sample_rate: u32,
    pub clip_seconds: f64,
    /// Range of the SNR at which extra noise is added, dB.
    pub snr_db: (f64, f64),
    /// Range of the SNR of the noise inside synthetic noisy recordings, dB.
    pub recording_snr_db: (f64, f64),
    pub noise_kinds: Vec<NoiseKind>,
    /// Probability that a clean supervised utterance is reverberated.
    pub rir_probability: f64,
    /// Probability that a synthetic noisy recording is reverberant.
    pub recording_rir_probability: f64,
    pub rt60: (f64, f64),
    pub target_policy: TargetPolicy,
    pub supervised_speech: SpeechSource,
    /// Draw every stream from this many fixed examples instead of fresh ones.
    pub pool_size: Option<usize>,
    /// Read audio from this manifest instead of synthesising it.
    pub manifest: Option<PathBuf>,
    /// Supervised pairs held out for model selection.
    pub dev_size: usize,
    /// Batches generated ahead on a background thread; 0 disables it.
    pub prefetch: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            clip_seconds: 1.0,
            snr_db: (-5.0, 20.0),
            recording_snr_db: (0.0, 20.0),
            noise_kinds: NoiseKind::ALL.to_vec(),
            rir_probability: 0.0,
            recording_rir_probability: 0.5,
            rt60: (0.2, 0.6),
            target_policy: TargetPolicy::ReverberantTarget,
            supervised_speech: SpeechSource::Clean,
            pool_size: None,
            manifest: None,
            dev_size: 8,
            prefetch: 0,
        }
    }
}

fn check_range(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::config(format!("{name} range [{lo}, {hi}] is invalid")));
    }
    Ok(())
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::config("sample_rate must be positive"));
        }
        if !(self.clip_seconds > 0.0 && self.clip_seconds.is_finite()) {
            return Err(Error::config("clip_seconds must be positive"));
        }
        check_range("snr_db", self.snr_db)?;
        check_range("recording_snr_db", self.recording_snr_db)?;
        check_range("rt60", self.rt60)?;
        if self.rt60.0 <= 0.0 {
            return Err(Error::config("rt60 must be positive"));
        }
        for (name, p) in [
            ("rir_probability", self.rir_probability),
            ("recording_rir_probability", self.recording_rir_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.noise_kinds.is_empty() {
            return Err(Error::config("noise_kinds must not be empty"));
        }
        if self.pool_size == Some(0) {
            return Err(Error::config("pool_size must be positive"));
        }
        Ok(())
    }

    pub fn clip_samples(&self) -> usize {
        (self.clip_seconds * self.sample_rate as f64).round() as usize
    }
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// A synthetic "in the wild" recording: pseudo-speech, possibly
/// reverberant, plus noise at an SNR drawn from `recording_snr_db`.
pub fn synth_noisy_recording(seed: u64, cfg: &DataConfig) -> Result<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speech = synth_speech(rng.random(), cfg.clip_seconds, cfg.sample_rate);
    let kind = cfg.noise_kinds[rng.random_range(0..cfg.noise_kinds.len())];
    let noise = synth_noise(rng.random(), cfg.clip_seconds, cfg.sample_rate, kind);
    let rir = if rng.random_bool(cfg.recording_rir_probability) {
        let rt60 = uniform(&mut rng, cfg.rt60);
        Some(synth_rir(rng.random(), cfg.sample_rate, rt60))
    } else {
        None
    };
    let spec = MixSpec {
        snr_db: uniform(&mut rng, cfg.recording_snr_db),
        rir,
        target_policy: TargetPolicy::ReverberantTarget,
    };
    Ok(mix(&speech, &noise, &spec)?.input)
}
