//! Batch losses on a tape: waveforms in, one scalar out.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::datagen::{Batch, SupervisedPair, UnsupervisedExample};
use crate::dsp::{stft, StftConfig, Waveform};
use crate::embedder::FrameEmbedder;
use crate::error::{Error, Result};
use crate::losses::{
    semi_supervised_loss, spectral_loss, unsupervised_loss, LossConfig, MixtureSpectra,
    SeparatedOutputs,
};
use crate::model::{apply_mask_var, network_input, ModelConfig, Weights, SPEECH_BRANCH};

/// Batch-mean values of every loss term that was built. Unbuilt terms are
/// `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub supervised: Option<f64>,
    pub unsupervised: Option<f64>,
    pub mixit: Option<f64>,
    pub embedding: Option<f64>,
    pub disentanglement: Option<f64>,
    /// Share of examples whose MixIT winner was the first assignment.
    pub first_assignment_rate: Option<f64>,
}

/// The tape nodes of one batch objective, with the logged components.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub total: Var,
    pub supervised: Option<Var>,
    pub unsupervised: Option<Var>,
    mixit: Option<f64>,
    embedding: Option<f64>,
    disentanglement: Option<f64>,
    first_assignment_rate: Option<f64>,
}

impl BatchLoss {
    pub fn values(&self, tape: &Tape) -> LossValues {
        LossValues {
            total: tape.item(self.total),
            supervised: self.supervised.map(|v| tape.item(v)),
            unsupervised: self.unsupervised.map(|v| tape.item(v)),
            mixit: self.mixit,
            embedding: self.embedding,
            disentanglement: self.disentanglement,
            first_assignment_rate: self.first_assignment_rate,
        }
    }
}

/// Everything fixed while building batch objectives.
pub struct Objective<'a> {
    pub model: &'a ModelConfig,
    pub stft: &'a StftConfig,
    pub loss: &'a LossConfig,
    pub embedder: &'a dyn FrameEmbedder,
    /// Scale of the unsupervised term in a semi-supervised step.
    pub unsupervised_weight: f64,
}

/// Uncompressed spectrum and compressed network features of `w`.
fn features(w: &Waveform, cfg: &StftConfig, loss: &LossConfig) -> Result<(Tensor, Tensor)> {
    let spec = stft(w, cfg)?;
    Ok((spec.to_tensor(), network_input(&spec, loss.compression)?))
}

fn spectrum(w: &Waveform, cfg: &StftConfig) -> Result<Tensor> {
    Ok(stft(w, cfg)?.to_tensor())
}

fn mean(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = *terms
        .first()
        .ok_or_else(|| Error::invalid("empty batch"))?;
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(if terms.len() == 1 {
        acc
    } else {
        tape.scale(acc, 1.0 / terms.len() as f64)
    })
}

impl Objective<'_> {
    /// Mean supervised loss of `pairs`, speech branch only.
    pub fn supervised(&self, tape: &mut Tape, w: &Weights<Var>, pairs: &[SupervisedPair]) -> Result<Var> {
        let mut terms = Vec::with_capacity(pairs.len());
        for p in pairs {
            let (y, feats) = features(&p.input, self.stft, self.loss)?;
            let s = spectrum(&p.target, self.stft)?;
            let input = tape.constant(feats);
            let g = self.model.forward(tape, w, input, &[SPEECH_BRANCH])?[0];
            let s_hat = apply_mask_var(tape, &y, g)?;
            let s = tape.constant(s);
            terms.push(spectral_loss(tape, s, s_hat, self.loss)?);
        }
        mean(tape, &terms)
    }

    /// Mean unsupervised loss of `examples` with the three branches applied
    /// to the mixture of mixtures.
    pub fn unsupervised(
        &self,
        tape: &mut Tape,
        w: &Weights<Var>,
        examples: &[UnsupervisedExample],
    ) -> Result<BatchLoss> {
        let mut totals = Vec::new();
        let (mut mixits, mut embs, mut dis) = (Vec::new(), Vec::new(), Vec::new());
        let mut first = 0usize;
        for ex in examples {
            let (y, feats) = features(&ex.y, self.stft, self.loss)?;
            let batch = MixtureSpectra {
                x: spectrum(&ex.x, self.stft)?,
                n: spectrum(&ex.n, self.stft)?,
            };
            let input = tape.constant(feats);
            let masks = self.model.forward(tape, w, input, &[0, 1, 2])?;
            let out = SeparatedOutputs {
                s_hat: apply_mask_var(tape, &y, masks[0])?,
                n1: apply_mask_var(tape, &y, masks[1])?,
                n2: apply_mask_var(tape, &y, masks[2])?,
            };
            let l = unsupervised_loss(tape, out, &batch, self.embedder, self.loss)?;
            totals.push(l.total);
            mixits.push(l.mixit);
            embs.extend(l.embedding);
            dis.extend(l.disentanglement);
            first += l.first_assignment as usize;
        }
        let total = mean(tape, &totals)?;
        let avg = |vs: &[Var]| -> Option<f64> {
            (!vs.is_empty()).then(|| vs.iter().map(|&v| tape.item(v)).sum::<f64>() / vs.len() as f64)
        };
        Ok(BatchLoss {
            total,
            supervised: None,
            unsupervised: Some(total),
            mixit: avg(&mixits),
            embedding: avg(&embs),
            disentanglement: avg(&dis),
            first_assignment_rate: Some(first as f64 / examples.len() as f64),
        })
    }

    /// Objective of a whole batch: supervised, unsupervised, or their sum
    /// with the unsupervised term scaled by [`Self::unsupervised_weight`].
    pub fn batch(&self, tape: &mut Tape, w: &Weights<Var>, batch: &Batch) -> Result<BatchLoss> {
        match batch {
            Batch::Supervised(pairs) => {
                let l = self.supervised(tape, w, pairs)?;
                Ok(BatchLoss {
                    total: l,
                    supervised: Some(l),
                    unsupervised: None,
                    mixit: None,
                    embedding: None,
                    disentanglement: None,
                    first_assignment_rate: None,
                })
            }
            Batch::Unsupervised(examples) => self.unsupervised(tape, w, examples),
            Batch::SemiSupervised {
                supervised,
                unsupervised,
            } => {
                let sup = self.supervised(tape, w, supervised)?;
                let mut u = self.unsupervised(tape, w, unsupervised)?;
                u.total = semi_supervised_loss(tape, sup, u.total, self.unsupervised_weight)?;
                u.supervised = Some(sup);
                Ok(u)
            }
        }
    }
}
