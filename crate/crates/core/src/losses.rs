//! Training objectives as scalar nodes on a [`Tape`].
//!
//! Spectra are `[2, K, N]` (re, im) and are always the uncompressed STFT
//! values; compression happens inside the losses. Every loss here is for a
//! single utterance and sums over bins and frames. Batch averaging is done by
//! the caller.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::dsp::CompressionExponent;
use crate::embedder::FrameEmbedder;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DotProduct {
    /// Inner product of the flattened sequences after scaling each to unit
    /// L2 norm.
    #[default]
    Normalized,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the complex term against the magnitude-only term.
    pub lambda: f64,
    pub compression: CompressionExponent,
    pub alpha_e: f64,
    pub alpha_d: f64,
    /// Guards the magnitude in compression and the norms in the
    /// disentanglement term.
    pub eps: f64,
    pub disentanglement: DotProduct,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            compression: CompressionExponent::default(),
            alpha_e: 0.004,
            alpha_d: 0.0005,
            eps: 1e-12,
            disentanglement: DotProduct::Normalized,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.alpha_e >= 0.0 && self.alpha_e.is_finite())
            || !(self.alpha_d >= 0.0 && self.alpha_d.is_finite())
        {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("loss eps must be positive"));
        }
        Ok(())
    }
}

fn same_shape(tape: &Tape, what: &str, vars: &[Var]) -> Result<()> {
    let first = tape.shape(vars[0]);
    if first.len() != 3 || first[0] != 2 {
        return Err(Error::invalid(format!("{what}: spectra must be [2, K, N], got {first:?}")));
    }
    for &v in &vars[1..] {
        if tape.shape(v) != first {
            return Err(Error::invalid(format!(
                "{what}: shape mismatch {first:?} vs {:?}",
                tape.shape(v)
            )));
        }
    }
    Ok(())
}

/// Compressed magnitude `[1, K, N]` and compressed complex spectrum
/// `[2, K, N]` of `x`.
fn compressed(tape: &mut Tape, x: Var, cfg: &LossConfig) -> Result<(Var, Var)> {
    let m = tape.complex_abs(x)?;
    let guarded = tape.add_scalar(m, cfg.eps);
    let p = tape.pow(guarded, cfg.compression.value() - 2.0);
    let gain = tape.mul(m, p)?;
    let mag = tape.mul(m, gain)?;
    let gain2 = tape.concat(&[gain, gain], 0)?;
    let cplx = tape.mul(x, gain2)?;
    Ok((mag, cplx))
}

/// Complex compressed spectral distance between a target `s` and an estimate
/// `s_hat`:
/// `(1 - lambda) sum (|S|^c - |S^|^c)^2 + lambda sum |S_c - S^_c|^2`.
pub fn spectral_loss(tape: &mut Tape, s: Var, s_hat: Var, cfg: &LossConfig) -> Result<Var> {
    same_shape(tape, "spectral_loss", &[s, s_hat])?;
    let (ms, cs) = compressed(tape, s, cfg)?;
    let (me, ce) = compressed(tape, s_hat, cfg)?;
    let dm = tape.sub(ms, me)?;
    let mag = tape.dot(dm, dm)?;
    let dc = tape.sub(cs, ce)?;
    let cplx = tape.dot(dc, dc)?;
    let mag = tape.scale(mag, 1.0 - cfg.lambda);
    let cplx = tape.scale(cplx, cfg.lambda);
    tape.add(mag, cplx)
}

/// Both assignment sums of the two-mixture MixIT objective, in the order
/// (`S^ + N1 -> X, N2 -> N`), (`S^ + N2 -> X, N1 -> N`).
pub fn mixit_assignments(
    tape: &mut Tape,
    s_hat: Var,
    n1: Var,
    n2: Var,
    x: Var,
    n: Var,
    cfg: &LossConfig,
) -> Result<(Var, Var)> {
    same_shape(tape, "mixit_loss", &[s_hat, n1, n2, x, n])?;
    let mut assignment = |a: Var, b: Var| -> Result<Var> {
        let speech = tape.add(s_hat, a)?;
        let l1 = spectral_loss(tape, x, speech, cfg)?;
        let l2 = spectral_loss(tape, n, b, cfg)?;
        tape.add(l1, l2)
    };
    let first = assignment(n1, n2)?;
    let second = assignment(n2, n1)?;
    Ok((first, second))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixitLoss {
    pub loss: Var,
    /// False when `N1` and `N2` traded places in the winning assignment.
    pub first_assignment: bool,
}

/// Minimum over the two assignments of estimated outputs to the observed
/// mixtures `X` and `N`. Only the winner is on the gradient path; ties go to
/// the first assignment.
pub fn mixit_loss(
    tape: &mut Tape,
    s_hat: Var,
    n1: Var,
    n2: Var,
    x: Var,
    n: Var,
    cfg: &LossConfig,
) -> Result<MixitLoss> {
    let (a, b) = mixit_assignments(tape, s_hat, n1, n2, x, n, cfg)?;
    let first_assignment = tape.item(a) <= tape.item(b);
    Ok(MixitLoss {
        loss: if first_assignment { a } else { b },
        first_assignment,
    })
}

/// Mean squared difference of two `[N, D]` embedding sequences.
pub fn embedding_loss(tape: &mut Tape, s_hat_emb: Var, x_emb: Var) -> Result<Var> {
    if tape.shape(s_hat_emb) != tape.shape(x_emb) {
        return Err(Error::invalid(format!(
            "embedding_loss: shape mismatch {:?} vs {:?}",
            tape.shape(s_hat_emb),
            tape.shape(x_emb)
        )));
    }
    let d = tape.sub(s_hat_emb, x_emb)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// `<S^, N1> + <S^, N2>` over flattened embedding sequences.
pub fn disentanglement_loss(
    tape: &mut Tape,
    s_hat_emb: Var,
    n1_emb: Var,
    n2_emb: Var,
    mode: DotProduct,
    eps: f64,
) -> Result<Var> {
    let shape = tape.shape(s_hat_emb).to_vec();
    if tape.shape(n1_emb) != shape.as_slice() || tape.shape(n2_emb) != shape.as_slice() {
        return Err(Error::invalid("disentanglement_loss: shape mismatch"));
    }
    let d1 = tape.dot(s_hat_emb, n1_emb)?;
    let d2 = tape.dot(s_hat_emb, n2_emb)?;
    match mode {
        DotProduct::Raw => tape.add(d1, d2),
        DotProduct::Normalized => {
            let mut inv_norm = |v: Var| -> Result<Var> {
                let sq = tape.dot(v, v)?;
                let sq = tape.add_scalar(sq, eps);
                Ok(tape.pow(sq, -0.5))
            };
            let (is, i1, i2) = (inv_norm(s_hat_emb)?, inv_norm(n1_emb)?, inv_norm(n2_emb)?);
            let a = tape.mul(d1, is)?;
            let a = tape.mul(a, i1)?;
            let b = tape.mul(d2, is)?;
            let b = tape.mul(b, i2)?;
            tape.add(a, b)
        }
    }
}

/// Network outputs of the three-branch model for one mixture-of-mixtures,
/// already applied to the mixture spectrum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparatedOutputs {
    pub s_hat: Var,
    pub n1: Var,
    pub n2: Var,
}

/// Observed inputs of one unsupervised example: the noisy recording `X` and
/// the added noise `N`, both `[2, K, N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpectra {
    pub x: Tensor,
    pub n: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnsupervisedLoss {
    pub total: Var,
    pub mixit: Var,
    pub first_assignment: bool,
    /// Present only when its weight is non-zero.
    pub embedding: Option<Var>,
    pub disentanglement: Option<Var>,
}

/// `L_mixit + alpha_e L_emb + alpha_d L_dis`. Terms with zero weight are not
/// built, so the zero-weight case is exactly the MixIT loss.
pub fn unsupervised_loss(
    tape: &mut Tape,
    out: SeparatedOutputs,
    batch: &MixtureSpectra,
    embedder: &dyn FrameEmbedder,
    cfg: &LossConfig,
) -> Result<UnsupervisedLoss> {
    let x = tape.constant(batch.x.clone());
    let n = tape.constant(batch.n.clone());
    let mix = mixit_loss(tape, out.s_hat, out.n1, out.n2, x, n, cfg)?;
    let mut total = mix.loss;

    let mut s_emb = None;
    let mut embedding = None;
    if cfg.alpha_e > 0.0 {
        let se = embedder.embed(tape, out.s_hat)?;
        let xe = embedder.embed(tape, x)?;
        let l = embedding_loss(tape, se, xe)?;
        let w = tape.scale(l, cfg.alpha_e);
        total = tape.add(total, w)?;
        s_emb = Some(se);
        embedding = Some(l);
    }
    let mut disentanglement = None;
    if cfg.alpha_d > 0.0 {
        let se = match s_emb {
            Some(v) => v,
            None => embedder.embed(tape, out.s_hat)?,
        };
        let e1 = embedder.embed(tape, out.n1)?;
        let e2 = embedder.embed(tape, out.n2)?;
        let l = disentanglement_loss(tape, se, e1, e2, cfg.disentanglement, cfg.eps)?;
        let w = tape.scale(l, cfg.alpha_d);
        total = tape.add(total, w)?;
        disentanglement = Some(l);
    }
    Ok(UnsupervisedLoss {
        total,
        mixit: mix.loss,
        first_assignment: mix.first_assignment,
        embedding,
        disentanglement,
    })
}

/// `L_sup + w L_unsup`, one scalar for a single joint update. The weight
/// carries the ratio of the two learning rates.
pub fn semi_supervised_loss(tape: &mut Tape, sup: Var, unsup: Var, unsup_weight: f64) -> Result<Var> {
    let u = if unsup_weight == 1.0 {
        unsup
    } else {
        tape.scale(unsup, unsup_weight)
    };
    tape.add(sup, u)
}
