//! Deterministic batch streams.
//!
//! Example `g` of a stream is a pure function of (root seed, stream, `g`),
//! so any step can be regenerated without replaying the ones before it.
//! With a fixed pool, each pass over the pool visits it in a fresh seeded
//! order.

use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::mpsc::sync_channel;
use std::sync::{Arc, OnceLock};
use std::thread;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{LoadedClip, Manifest, Role};
use super::mix::{loop_to, make_unsupervised, mix, noise_gain};
use super::synth::{synth_noise, synth_rir, synth_speech};
use super::{
    synth_noisy_recording, uniform, DataConfig, MixSpec, SpeechSource, SupervisedPair,
    TargetPolicy, UnsupervisedExample,
};
use crate::dsp::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Supervised,
    Unsupervised,
    SemiSupervised,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Batch {
    Supervised(Vec<SupervisedPair>),
    Unsupervised(Vec<UnsupervisedExample>),
    /// One clean and one noisy batch for a single joint update.
    SemiSupervised {
        supervised: Vec<SupervisedPair>,
        unsupervised: Vec<UnsupervisedExample>,
    },
}

fn hash_wave(h: &mut DefaultHasher, w: &Waveform) {
    w.len().hash(h);
    for s in w.samples() {
        s.to_bits().hash(h);
    }
}

impl Batch {
    pub fn supervised(&self) -> &[SupervisedPair] {
        match self {
            Batch::Supervised(s) | Batch::SemiSupervised { supervised: s, .. } => s,
            Batch::Unsupervised(_) => &[],
        }
    }

    pub fn unsupervised(&self) -> &[UnsupervisedExample] {
        match self {
            Batch::Unsupervised(u) | Batch::SemiSupervised { unsupervised: u, .. } => u,
            Batch::Supervised(_) => &[],
        }
    }

    /// Hash of every sample in the batch, for checking that two runs saw the
    /// same data.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in self.supervised() {
            hash_wave(&mut h, &p.input);
            hash_wave(&mut h, &p.target);
        }
        for u in self.unsupervised() {
            hash_wave(&mut h, &u.x);
            hash_wave(&mut h, &u.n);
        }
        h.finish()
    }
}

const TAG_SUPERVISED: u64 = 1;
const TAG_UNSUPERVISED: u64 = 2;
const TAG_DEV: u64 = 3;
const TAG_SHUFFLE_SUPERVISED: u64 = 4;
const TAG_SHUFFLE_UNSUPERVISED: u64 = 5;

fn item_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    // 2^16 words per example, far more than one draws
    rng.set_word_pos((index as u128) << 16);
    rng
}

enum Audio {
    Synthetic,
    Files {
        speech: Vec<LoadedClip>,
        noisy: Vec<LoadedClip>,
        noise: Vec<LoadedClip>,
    },
}

fn pick<'a>(clips: &'a [LoadedClip], rng: &mut ChaCha8Rng, len: usize) -> (Waveform, Option<&'a Waveform>) {
    let clip = &clips[rng.random_range(0..clips.len())];
    let audio = if clip.audio.len() <= len {
        loop_to(&clip.audio, len)
    } else {
        let start = rng.random_range(0..=clip.audio.len() - len);
        Waveform::new(clip.audio.samples()[start..start + len].to_vec(), clip.audio.sample_rate())
            .expect("finite clip")
    };
    (audio, clip.rir.as_ref())
}

struct Inner {
    cfg: DataConfig,
    mode: Mode,
    batch_size: usize,
    steps_per_epoch: usize,
    seed: u64,
    audio: Audio,
    supervised_pool: Vec<OnceLock<SupervisedPair>>,
    unsupervised_pool: Vec<OnceLock<UnsupervisedExample>>,
}

/// Seeded, random-access source of training batches. Cheap to clone.
#[derive(Clone)]
pub struct BatchStream {
    inner: Arc<Inner>,
}

impl BatchStream {
    pub fn new(
        cfg: &DataConfig,
        mode: Mode,
        batch_size: usize,
        epoch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if batch_size == 0 || epoch_size < batch_size {
            return Err(Error::config(format!(
                "epoch_size {epoch_size} must be at least batch_size {batch_size} > 0"
            )));
        }
        let audio = match &cfg.manifest {
            None => Audio::Synthetic,
            Some(path) => {
                let (m, base) = Manifest::load(path)?;
                let rate = cfg.sample_rate;
                let audio = Audio::Files {
                    speech: m.load_role(&base, Role::Speech, rate)?,
                    noisy: m.load_role(&base, Role::NoisySpeech, rate)?,
                    noise: m.load_role(&base, Role::Noise, rate)?,
                };
                if let Audio::Files { speech, noisy, noise } = &audio {
                    let needs_clean = mode != Mode::Unsupervised || cfg.dev_size > 0;
                    let needs_noisy = mode != Mode::Supervised
                        || cfg.supervised_speech == SpeechSource::Noisy;
                    if noise.is_empty()
                        || (needs_clean && speech.is_empty())
                        || (needs_noisy && noisy.is_empty())
                    {
                        return Err(Error::config(format!(
                            "manifest {} lacks clips for {mode:?} training",
                            path.display()
                        )));
                    }
                }
                audio
            }
        };
        let pool = cfg.pool_size.unwrap_or(0);
        Ok(Self {
            inner: Arc::new(Inner {
                cfg: cfg.clone(),
                mode,
                batch_size,
                steps_per_epoch: epoch_size / batch_size,
                seed,
                audio,
                supervised_pool: (0..pool).map(|_| OnceLock::new()).collect(),
                unsupervised_pool: (0..pool).map(|_| OnceLock::new()).collect(),
            }),
        })
    }

    pub fn mode(&self) -> Mode {
        self.inner.mode
    }

    pub fn config(&self) -> &DataConfig {
        &self.inner.cfg
    }

    pub fn batch_size(&self) -> usize {
        self.inner.batch_size
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.inner.steps_per_epoch
    }

    fn pool_slot(&self, shuffle_tag: u64, g: u64) -> usize {
        let p = self.inner.supervised_pool.len();
        let mut perm: Vec<usize> = (0..p).collect();
        perm.shuffle(&mut item_rng(self.inner.seed, shuffle_tag, g / p as u64));
        perm[(g % p as u64) as usize]
    }

    fn supervised_at(&self, g: u64) -> Result<SupervisedPair> {
        if self.inner.supervised_pool.is_empty() {
            return self.make_supervised(&mut item_rng(self.inner.seed, TAG_SUPERVISED, g), false);
        }
        let slot = self.pool_slot(TAG_SHUFFLE_SUPERVISED, g);
        if let Some(p) = self.inner.supervised_pool[slot].get() {
            return Ok(p.clone());
        }
        let made = self.make_supervised(&mut item_rng(self.inner.seed, TAG_SUPERVISED, slot as u64), false)?;
        Ok(self.inner.supervised_pool[slot].get_or_init(|| made).clone())
    }

    fn unsupervised_at(&self, g: u64) -> Result<UnsupervisedExample> {
        if self.inner.unsupervised_pool.is_empty() {
            return self.make_unsupervised(&mut item_rng(self.inner.seed, TAG_UNSUPERVISED, g));
        }
        let slot = self.pool_slot(TAG_SHUFFLE_UNSUPERVISED, g);
        if let Some(p) = self.inner.unsupervised_pool[slot].get() {
            return Ok(p.clone());
        }
        let made = self.make_unsupervised(&mut item_rng(self.inner.seed, TAG_UNSUPERVISED, slot as u64))?;
        Ok(self.inner.unsupervised_pool[slot].get_or_init(|| made).clone())
    }

    fn make_supervised(&self, rng: &mut ChaCha8Rng, dev: bool) -> Result<SupervisedPair> {
        let cfg = &self.inner.cfg;
        let len = cfg.clip_samples();
        let noisy_source = !dev && cfg.supervised_speech == SpeechSource::Noisy;
        let reverberate = rng.random_bool(if dev {
            cfg.recording_rir_probability
        } else {
            cfg.rir_probability
        });
        let (speech, rir) = match &self.inner.audio {
            Audio::Synthetic => {
                let speech = if noisy_source {
                    synth_noisy_recording(rng.random(), cfg)?
                } else {
                    synth_speech(rng.random(), cfg.clip_seconds, cfg.sample_rate)
                };
                let rt60 = uniform(rng, cfg.rt60);
                let rir = synth_rir(rng.random(), cfg.sample_rate, rt60);
                (speech, reverberate.then_some(rir))
            }
            Audio::Files { speech, noisy, .. } => {
                let clips = if noisy_source { noisy } else { speech };
                let (audio, rir) = pick(clips, rng, len);
                (audio, rir.filter(|_| reverberate).cloned())
            }
        };
        let noise = self.noise(rng, len)?;
        let target_policy = if dev {
            TargetPolicy::WindowedRirTarget
        } else {
            cfg.target_policy
        };
        let spec = MixSpec {
            snr_db: uniform(rng, cfg.snr_db),
            rir,
            target_policy,
        };
        mix(&speech, &noise, &spec)
    }

    fn noise(&self, rng: &mut ChaCha8Rng, len: usize) -> Result<Waveform> {
        let cfg = &self.inner.cfg;
        Ok(match &self.inner.audio {
            Audio::Synthetic => {
                let kind = cfg.noise_kinds[rng.random_range(0..cfg.noise_kinds.len())];
                synth_noise(rng.random(), cfg.clip_seconds, cfg.sample_rate, kind).fit_to(len)
            }
            Audio::Files { noise, .. } => pick(noise, rng, len).0,
        })
    }

    fn make_unsupervised(&self, rng: &mut ChaCha8Rng) -> Result<UnsupervisedExample> {
        let cfg = &self.inner.cfg;
        let len = cfg.clip_samples();
        let x = match &self.inner.audio {
            Audio::Synthetic => synth_noisy_recording(rng.random(), cfg)?,
            Audio::Files { noisy, .. } => pick(noisy, rng, len).0,
        };
        let n = self.noise(rng, len)?;
        let gain = noise_gain(&x, &n, uniform(rng, cfg.snr_db))?;
        make_unsupervised(&x, &n.scaled(gain))
    }

    /// The batch served at global step `step`.
    pub fn batch(&self, step: u64) -> Result<Batch> {
        let b = self.inner.batch_size as u64;
        let ids = (step * b)..(step * b + b);
        let sup = || ids.clone().map(|g| self.supervised_at(g)).collect::<Result<Vec<_>>>();
        let unsup = || ids.clone().map(|g| self.unsupervised_at(g)).collect::<Result<Vec<_>>>();
        Ok(match self.inner.mode {
            Mode::Supervised => Batch::Supervised(sup()?),
            Mode::Unsupervised => Batch::Unsupervised(unsup()?),
            Mode::SemiSupervised => Batch::SemiSupervised {
                supervised: sup()?,
                unsupervised: unsup()?,
            },
        })
    }

    /// Batches of steps `start..end` in order, generated on a background
    /// thread when prefetching is enabled.
    pub fn steps(&self, start: u64, end: u64) -> Box<dyn Iterator<Item = Result<Batch>> + Send> {
        let depth = self.inner.cfg.prefetch;
        if depth == 0 {
            let me = self.clone();
            return Box::new((start..end).map(move |s| me.batch(s)));
        }
        let (tx, rx) = sync_channel(depth);
        let me = self.clone();
        thread::spawn(move || {
            for s in start..end {
                if tx.send(me.batch(s)).is_err() {
                    break;
                }
            }
        });
        Box::new(rx.into_iter())
    }

    /// All batches of epoch `epoch` (0-based).
    pub fn epoch(&self, epoch: u64) -> Box<dyn Iterator<Item = Result<Batch>> + Send> {
        let spe = self.inner.steps_per_epoch as u64;
        self.steps(epoch * spe, (epoch + 1) * spe)
    }

    /// Held-out supervised pairs, the same for every training recipe: clean
    /// speech, reverberant with `recording_rir_probability`, with
    /// early-reflection targets. Independent of the training streams.
    pub fn dev_set(&self) -> Result<Vec<SupervisedPair>> {
        (0..self.inner.cfg.dev_size as u64)
            .map(|i| self.make_supervised(&mut item_rng(self.inner.seed, TAG_DEV, i), true))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DataConfig {
        DataConfig {
            clip_seconds: 0.25,
            dev_size: 2,
            ..DataConfig::default()
        }
    }

    #[test]
    fn equal_seeds_give_equal_streams() {
        let a = BatchStream::new(&cfg(), Mode::SemiSupervised, 2, 8, 7).unwrap();
        let b = BatchStream::new(&cfg(), Mode::SemiSupervised, 2, 8, 7).unwrap();
        let c = BatchStream::new(&cfg(), Mode::SemiSupervised, 2, 8, 8).unwrap();
        for s in 0..3 {
            assert_eq!(a.batch(s).unwrap(), b.batch(s).unwrap());
        }
        assert_ne!(a.batch(0).unwrap().fingerprint(), c.batch(0).unwrap().fingerprint());
    }

    #[test]
    fn semi_supervised_batches_have_both_halves() {
        let s = BatchStream::new(&cfg(), Mode::SemiSupervised, 3, 9, 1).unwrap();
        for b in s.epoch(0) {
            let b = b.unwrap();
            assert_eq!(b.supervised().len(), 3);
            assert_eq!(b.unsupervised().len(), 3);
        }
    }

    #[test]
    fn epoch_length_is_epoch_over_batch() {
        let s = BatchStream::new(&cfg(), Mode::Supervised, 4, 18, 1).unwrap();
        assert_eq!(s.steps_per_epoch(), 4);
        assert_eq!(s.epoch(2).count(), 4);
        assert!(BatchStream::new(&cfg(), Mode::Supervised, 4, 3, 1).is_err());
    }

    #[test]
    fn prefetch_preserves_order() {
        let plain = BatchStream::new(&cfg(), Mode::Unsupervised, 2, 8, 3).unwrap();
        let ahead = BatchStream::new(
            &DataConfig {
                prefetch: 2,
                ..cfg()
            },
            Mode::Unsupervised,
            2,
            8,
            3,
        )
        .unwrap();
        let a: Vec<u64> = plain.epoch(1).map(|b| b.unwrap().fingerprint()).collect();
        let b: Vec<u64> = ahead.epoch(1).map(|b| b.unwrap().fingerprint()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn pool_limits_distinct_examples() {
        let c = DataConfig {
            pool_size: Some(3),
            ..cfg()
        };
        let s = BatchStream::new(&c, Mode::Unsupervised, 2, 6, 5).unwrap();
        let mut seen = std::collections::HashSet::new();
        let mut per_pass: Vec<u64> = Vec::new();
        for step in 0..6 {
            for ex in s.batch(step).unwrap().unsupervised() {
                let h = Batch::Unsupervised(vec![ex.clone()]).fingerprint();
                seen.insert(h);
                per_pass.push(h);
            }
        }
        assert_eq!(seen.len(), 3);
        // every pass of three examples visits the whole pool once
        for pass in per_pass.chunks(3) {
            let distinct: std::collections::HashSet<_> = pass.iter().collect();
            assert_eq!(distinct.len(), 3);
        }
    }

    #[test]
    fn unsupervised_examples_are_consistent() {
        let s = BatchStream::new(&cfg(), Mode::Unsupervised, 2, 4, 9).unwrap();
        for ex in s.batch(0).unwrap().unsupervised() {
            let sum = ex.x.add(&ex.n).unwrap();
            assert_eq!(sum, ex.y);
        }
    }

    #[test]
    fn dev_set_is_clean_and_fixed() {
        let c = DataConfig {
            supervised_speech: SpeechSource::Noisy,
            target_policy: TargetPolicy::NoisyTarget,
            rir_probability: 1.0,
            ..cfg()
        };
        let a = BatchStream::new(&c, Mode::Supervised, 2, 4, 9).unwrap();
        let b = BatchStream::new(&cfg(), Mode::Supervised, 2, 4, 9).unwrap();
        assert_eq!(a.dev_set().unwrap(), b.dev_set().unwrap());
        assert_eq!(a.dev_set().unwrap().len(), 2);
    }

    #[test]
    fn manifest_source_serves_batches() {
        let dir = tempfile::tempdir().unwrap();
        let counts = crate::datagen::manifest::CorpusCounts {
            speech: 2,
            noisy_speech: 2,
            noise: 2,
        };
        crate::datagen::manifest::write_synthetic_corpus(dir.path(), counts, &cfg(), 1).unwrap();
        let c = DataConfig {
            manifest: Some(dir.path().join("manifest.json")),
            rir_probability: 1.0,
            ..cfg()
        };
        let s = BatchStream::new(&c, Mode::SemiSupervised, 2, 4, 2).unwrap();
        let b = s.batch(0).unwrap();
        assert_eq!(b.supervised()[0].input.len(), c.clip_samples());
        assert_eq!(b.unsupervised()[1].y.len(), c.clip_samples());
    }
}
