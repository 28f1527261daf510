//! Training: experiment configuration and presets, the optimisation step,
//! dev evaluation and best-checkpoint selection.
//!
//! Every training mode uses a single AdamW optimiser. Supervised and
//! semi-supervised runs step at `lr_supervised`; in semi-supervised runs
//! the unsupervised term is scaled by `lr_unsupervised / lr_supervised`,
//! which gives each term its own learning rate in one joint update.
//! Unsupervised runs step at `lr_unsupervised`.

pub mod gradcheck;
pub mod objective;
pub mod optim;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use objective::{BatchLoss, LossValues, Objective};
pub use optim::{clip_global_norm, global_norm, AdamW, PlateauScheduler};

use crate::autodiff::{Tape, Tensor};
use crate::datagen::{Batch, BatchStream, DataConfig, Mode, SpeechSource, SupervisedPair, TargetPolicy};
use crate::dsp::StftConfig;
use crate::embedder::{EmbedderConfig, FrameEmbedder};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::{self, MetricReport};
use crate::model::checkpoint::Checkpoint;
use crate::model::{enhance_waveform, ModelConfig, ModelParams};

/// The nine experiment configurations, as pure configuration bundles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Exp1,
    Exp2,
    Exp3,
    Exp4,
    Exp5,
    Exp6,
    Exp7,
    Exp8,
    Exp9,
}

impl Preset {
    pub const ALL: [Preset; 9] = [
        Preset::Exp1,
        Preset::Exp2,
        Preset::Exp3,
        Preset::Exp4,
        Preset::Exp5,
        Preset::Exp6,
        Preset::Exp7,
        Preset::Exp8,
        Preset::Exp9,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Exp1 => "exp1",
            Preset::Exp2 => "exp2",
            Preset::Exp3 => "exp3",
            Preset::Exp4 => "exp4",
            Preset::Exp5 => "exp5",
            Preset::Exp6 => "exp6",
            Preset::Exp7 => "exp7",
            Preset::Exp8 => "exp8",
            Preset::Exp9 => "exp9",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Preset::Exp1 => "supervised on noisy recordings used as targets",
            Preset::Exp2 => "supervised, reverberant input, early-reflection target",
            Preset::Exp3 => "supervised, reverberant input, reverberant target",
            Preset::Exp4 => "unsupervised, MixIT only",
            Preset::Exp5 => "unsupervised, MixIT + embedding loss",
            Preset::Exp6 => "unsupervised, MixIT + disentanglement loss",
            Preset::Exp7 => "unsupervised, MixIT + embedding + disentanglement",
            Preset::Exp8 => "semi-supervised, MixIT + embedding loss",
            Preset::Exp9 => "semi-supervised, all unsupervised terms",
        }
    }

    /// Sets the mode, branch count, data recipe and switched-off loss terms.
    /// Non-zero loss weights are left as configured.
    pub fn apply(self, cfg: &mut ExperimentConfig) {
        use Preset::*;
        cfg.train.preset = Some(self);
        cfg.train.mode = match self {
            Exp1 | Exp2 | Exp3 => Mode::Supervised,
            Exp4 | Exp5 | Exp6 | Exp7 => Mode::Unsupervised,
            Exp8 | Exp9 => Mode::SemiSupervised,
        };
        cfg.model.num_branches = if cfg.train.mode == Mode::Supervised { 1 } else { 3 };
        let (speech, rir, policy) = match self {
            Exp1 => (SpeechSource::Noisy, 0.0, TargetPolicy::NoisyTarget),
            Exp3 => (SpeechSource::Clean, 1.0, TargetPolicy::ReverberantTarget),
            _ => (SpeechSource::Clean, 1.0, TargetPolicy::WindowedRirTarget),
        };
        cfg.data.supervised_speech = speech;
        cfg.data.rir_probability = rir;
        cfg.data.target_policy = policy;
        match self {
            Exp4 => {
                cfg.loss.alpha_e = 0.0;
                cfg.loss.alpha_d = 0.0;
            }
            Exp5 | Exp8 => cfg.loss.alpha_d = 0.0,
            Exp6 => cfg.loss.alpha_e = 0.0,
            _ => {}
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown preset {s:?}; expected exp1..exp9")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Preset the configuration was built from. Informational only; presets
    /// are applied when the configuration is assembled.
    pub preset: Option<Preset>,
    /// Root seed of the data stream and the weight initialisation.
    pub seed: u64,
    pub lr_supervised: f64,
    pub lr_unsupervised: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub plateau_patience_epochs: usize,
    /// Dev evaluation interval in epochs.
    pub eval_every: usize,
    pub epoch_size: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Global gradient-norm limit; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Supervised,
            preset: None,
            seed: 0,
            lr_supervised: 1e-3,
            lr_unsupervised: 5e-4,
            weight_decay: 2e-5,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            plateau_patience_epochs: 20,
            eval_every: 1,
            epoch_size: 128,
            batch_size: 4,
            max_epochs: 10,
            grad_clip: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.lr_supervised) || !positive(self.lr_unsupervised) {
            return Err(Error::config("learning rates must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) || !positive(self.adam_eps) {
            return Err(Error::config("weight_decay must be >= 0 and adam_eps > 0"));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if self.plateau_patience_epochs == 0 || self.eval_every == 0 {
            return Err(Error::config("plateau_patience_epochs and eval_every must be >= 1"));
        }
        if self.batch_size == 0 || self.epoch_size < self.batch_size {
            return Err(Error::config("need 0 < batch_size <= epoch_size"));
        }
        if self.grad_clip.is_some_and(|c| !positive(c)) {
            return Err(Error::config("grad_clip must be positive"));
        }
        Ok(())
    }

    /// Learning rate of the optimiser for this mode.
    pub fn base_lr(&self) -> f64 {
        match self.mode {
            Mode::Unsupervised => self.lr_unsupervised,
            Mode::Supervised | Mode::SemiSupervised => self.lr_supervised,
        }
    }

    /// Scale of the unsupervised term in a joint update.
    pub fn unsupervised_weight(&self) -> f64 {
        match self.mode {
            Mode::SemiSupervised => self.lr_unsupervised / self.lr_supervised,
            _ => 1.0,
        }
    }
}

/// A complete, re-runnable description of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub stft: StftConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub embedder: EmbedderConfig,
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        let mut cfg = Self::default();
        p.apply(&mut cfg);
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        self.embedder.validate()?;
        if self.stft.freq_bins() > self.model.freq_bins {
            return Err(Error::config(format!(
                "stft gives {} bins but model.freq_bins is {}",
                self.stft.freq_bins(),
                self.model.freq_bins
            )));
        }
        if self.train.mode != Mode::Supervised && self.model.num_branches != 3 {
            return Err(Error::config(format!(
                "{:?} training needs model.num_branches = 3",
                self.train.mode
            )));
        }
        if self.data.clip_samples() < self.stft.frame_length {
            return Err(Error::config("clips are shorter than one STFT frame"));
        }
        Ok(())
    }
}

/// One line of the step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub mode: Mode,
    #[serde(flatten)]
    pub loss: LossValues,
    pub lr_multiplier: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Hash of the batch audio.
    pub fingerprint: u64,
}

/// One line of the dev-evaluation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub step: u64,
    #[serde(flatten)]
    pub metrics: MetricReport,
    pub lr_multiplier: f64,
    pub is_best: bool,
}

/// Parameters, optimiser state and schedule of one run.
pub struct Trainer {
    cfg: ExperimentConfig,
    params: ModelParams,
    opt: AdamW,
    scheduler: PlateauScheduler,
    embedder: Box<dyn FrameEmbedder>,
    step: u64,
}

/// Seed of the weight initialisation, kept apart from the data seed.
pub fn init_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = ModelParams::init(&cfg.model, init_seed(seed))?;
        Self::with_params(cfg, params)
    }

    pub fn with_params(cfg: &ExperimentConfig, params: ModelParams) -> Result<Self> {
        cfg.validate()?;
        if params.config() != &cfg.model {
            return Err(Error::config("parameters were built for a different model config"));
        }
        let t = &cfg.train;
        let opt = AdamW::new(params.weights.iter(), t.base_lr(), t.betas, t.adam_eps, t.weight_decay);
        Ok(Self {
            embedder: cfg.embedder.build(cfg.stft.freq_bins(), cfg.data.sample_rate)?,
            scheduler: PlateauScheduler::new(t.plateau_patience_epochs)?,
            cfg: cfg.clone(),
            params,
            opt,
            step: 0,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    pub fn scheduler(&self) -> &PlateauScheduler {
        &self.scheduler
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn lr_multiplier(&self) -> f64 {
        self.scheduler.multiplier()
    }

    pub fn embedder(&self) -> &dyn FrameEmbedder {
        self.embedder.as_ref()
    }

    pub fn objective(&self) -> Objective<'_> {
        Objective {
            model: &self.cfg.model,
            stft: &self.cfg.stft,
            loss: &self.cfg.loss,
            embedder: self.embedder.as_ref(),
            unsupervised_weight: self.cfg.train.unsupervised_weight(),
        }
    }

    /// Loss values of `batch` at the current parameters, without gradients.
    pub fn evaluate_loss(&self, batch: &Batch) -> Result<LossValues> {
        let mut tape = Tape::new();
        let w = self.params.register_frozen(&mut tape);
        Ok(self.objective().batch(&mut tape, &w, batch)?.values(&tape))
    }

    /// Loss values and unclipped parameter gradients of `batch`, in
    /// [`crate::model::Weights::iter`] order.
    pub fn gradients(&self, batch: &Batch) -> Result<(LossValues, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let w = self.params.register(&mut tape);
        let loss = self.objective().batch(&mut tape, &w, batch)?;
        let values = loss.values(&tape);
        if !values.total.is_finite() {
            return Err(Error::Divergence(format!(
                "step {}: non-finite loss {values:?}",
                self.step
            )));
        }
        tape.backward(loss.total)?;
        Ok((values, w.iter().map(|&v| tape.grad_or_zeros(v)).collect()))
    }

    /// One optimiser update on `batch`.
    pub fn step(&mut self, batch: &Batch, epoch: usize) -> Result<StepRecord> {
        let (loss, mut grads) = self.gradients(batch)?;
        let grad_norm = match self.cfg.train.grad_clip {
            Some(c) => clip_global_norm(&mut grads, c),
            None => global_norm(&grads),
        };
        if !grad_norm.is_finite() {
            return Err(Error::Divergence(format!(
                "step {}: non-finite gradient norm (loss {loss:?})",
                self.step
            )));
        }
        self.opt
            .step(self.params.weights.iter_mut(), &grads, self.scheduler.multiplier())
            .map_err(|e| Error::Divergence(format!("step {}: {e}", self.step)))?;
        let record = StepRecord {
            step: self.step,
            epoch,
            mode: self.cfg.train.mode,
            loss,
            lr_multiplier: self.scheduler.multiplier(),
            grad_norm,
            fingerprint: batch.fingerprint(),
        };
        self.step += 1;
        Ok(record)
    }

    /// Mean metrics of speech-branch enhancement over `dev`.
    pub fn evaluate_dev(&self, dev: &[SupervisedPair]) -> Result<MetricReport> {
        let reports = dev
            .iter()
            .map(|p| {
                let est = enhance_waveform(&self.params, &self.cfg.stft, &p.input, self.cfg.loss.compression)?;
                metrics::evaluate(&p.target, &est, None)
            })
            .collect::<Result<Vec<_>>>()?;
        MetricReport::mean(&reports)
    }

    /// Feeds a dev score to the plateau schedule; true on a new best.
    pub fn observe_dev_score(&mut self, score: f64, epochs: usize) -> bool {
        self.scheduler.observe(score, epochs)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            stft: self.cfg.stft,
            compression: self.cfg.loss.compression,
            sample_rate: self.cfg.data.sample_rate,
            step: self.step,
        }
    }
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub best_score: f64,
    pub last: Checkpoint,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

struct Logs {
    steps: BufWriter<File>,
    evals: BufWriter<File>,
}

fn write_line<T: Serialize>(w: &mut BufWriter<File>, v: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, v)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Runs `cfg` from `cfg.train.seed`. With an output directory, writes
/// `train_log.jsonl`, `eval_log.jsonl`, one checkpoint per evaluation under
/// `checkpoints/` and a copy of the best as `best.json`.
pub fn train(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let seed = cfg.train.seed;
    if cfg.data.dev_size == 0 {
        return Err(Error::config("training needs data.dev_size >= 1 for model selection"));
    }
    let t = &cfg.train;
    let stream = BatchStream::new(&cfg.data, t.mode, t.batch_size, t.epoch_size, seed)?;
    let dev = stream.dev_set()?;
    let mut trainer = Trainer::new(cfg, seed)?;

    let mut logs = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir.join("checkpoints"))?;
            Some(Logs {
                steps: BufWriter::new(File::create(dir.join("train_log.jsonl"))?),
                evals: BufWriter::new(File::create(dir.join("eval_log.jsonl"))?),
            })
        }
        None => None,
    };

    let mut steps = Vec::new();
    let mut evals = Vec::new();
    let mut best = trainer.checkpoint();
    let mut best_epoch = 0;
    let mut last_eval_epoch = 0;
    for epoch in 0..=t.max_epochs {
        if epoch > 0 {
            for batch in stream.epoch(epoch as u64 - 1) {
                let record = trainer.step(&batch?, epoch)?;
                if let Some(l) = logs.as_mut() {
                    write_line(&mut l.steps, &record)?;
                }
                steps.push(record);
            }
        }
        let due = epoch == 0 || epoch % t.eval_every == 0 || epoch == t.max_epochs;
        if !due {
            continue;
        }
        let metrics = trainer.evaluate_dev(&dev)?;
        let is_best = trainer.observe_dev_score(metrics.selection_score, epoch - last_eval_epoch);
        last_eval_epoch = epoch;
        let ckpt = trainer.checkpoint();
        if let Some(dir) = out_dir {
            ckpt.save(dir.join("checkpoints").join(format!("epoch_{epoch:04}.json")))?;
            if is_best {
                ckpt.save(dir.join("best.json"))?;
            }
        }
        if is_best {
            best = ckpt;
            best_epoch = epoch;
        }
        let record = EvalRecord {
            epoch,
            step: trainer.steps_taken(),
            metrics,
            lr_multiplier: trainer.lr_multiplier(),
            is_best,
        };
        if let Some(l) = logs.as_mut() {
            write_line(&mut l.evals, &record)?;
        }
        evals.push(record);
    }
    let best_score = trainer.scheduler().best().unwrap_or(f64::NEG_INFINITY);
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_score,
        last: trainer.checkpoint(),
        steps,
        evals,
    })
}
