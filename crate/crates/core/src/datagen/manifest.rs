//! JSON manifests listing WAV clips by role, and synthetic corpus export.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{synth_noisy_recording, uniform, DataConfig};
use crate::datagen::synth::{synth_noise, synth_rir, synth_speech};
use crate::dsp::wav::{read_wav, write_wav, SampleFormat};
use crate::dsp::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Speech,
    Noise,
    NoisySpeech,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rir_path: Option<PathBuf>,
}

/// A list of clips. Relative paths are resolved against the manifest's own
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

/// Audio of a manifest, loaded and checked against one sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedClip {
    pub audio: Waveform,
    pub rir: Option<Waveform>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PathBuf)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("manifest {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((manifest, base))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.role == role)
    }

    /// Reads every clip of `role`.
    pub fn load_role(&self, base: &Path, role: Role, sample_rate: u32) -> Result<Vec<LoadedClip>> {
        self.with_role(role)
            .map(|e| {
                let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
                let audio = read_wav(resolve(&e.path), Some(sample_rate))?;
                if audio.is_empty() {
                    return Err(Error::invalid(format!("{} is empty", e.path.display())));
                }
                let rir = e
                    .rir_path
                    .as_deref()
                    .map(|p| read_wav(resolve(p), Some(sample_rate)))
                    .transpose()?;
                Ok(LoadedClip { audio, rir })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusCounts {
    pub speech: usize,
    pub noisy_speech: usize,
    pub noise: usize,
}

/// Writes seeded synthetic clips as float WAVs under `dir` together with
/// `manifest.json`. Clean speech entries each get their own room response,
/// whether the trainer uses it depends on `rir_probability`.
pub fn write_synthetic_corpus(
    dir: &Path,
    counts: CorpusCounts,
    cfg: &DataConfig,
    seed: u64,
) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let put = |name: String, w: &Waveform| -> Result<PathBuf> {
        write_wav(dir.join(&name), w, SampleFormat::Float32)?;
        Ok(PathBuf::from(name))
    };
    for i in 0..counts.speech {
        let s = synth_speech(rng.random(), cfg.clip_seconds, cfg.sample_rate);
        let rt60 = uniform(&mut rng, cfg.rt60);
        let h = synth_rir(rng.random(), cfg.sample_rate, rt60);
        entries.push(ManifestEntry {
            path: put(format!("speech_{i:04}.wav"), &s)?,
            role: Role::Speech,
            rir_path: Some(put(format!("rir_{i:04}.wav"), &h)?),
        });
    }
    for i in 0..counts.noisy_speech {
        let x = synth_noisy_recording(rng.random(), cfg)?;
        entries.push(ManifestEntry {
            path: put(format!("noisy_{i:04}.wav"), &x)?,
            role: Role::NoisySpeech,
            rir_path: None,
        });
    }
    for i in 0..counts.noise {
        let kind = cfg.noise_kinds[i % cfg.noise_kinds.len()];
        let n = synth_noise(rng.random(), cfg.clip_seconds, cfg.sample_rate, kind);
        entries.push(ManifestEntry {
            path: put(format!("noise_{i:04}.wav"), &n)?,
            role: Role::Noise,
            rir_path: None,
        });
    }
    let manifest = Manifest { entries };
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}
