//! Evaluation metrics and the score used to pick checkpoints.
//!
//! None of these are differentiable; they run on waveforms after synthesis.

use std::f64::consts::{LN_10, PI};

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// siSDR values are clamped to +-this many dB.
pub const SISDR_CAP_DB: f64 = 120.0;

/// Highest cepstral coefficient compared by [`cepstral_distance`].
pub const CEPSTRAL_ORDER: usize = 24;

/// Weight of siSDR in the selection score.
pub const SISDR_WEIGHT: f64 = 0.2;

/// Frames with mean-square amplitude below this are treated as silent.
const SILENT_POWER: f64 = 1e-10;

/// Floor on spectral magnitudes before the log.
const MAGNITUDE_FLOOR: f64 = 1e-12;

fn check_pair(reference: &Waveform, estimate: &Waveform) -> Result<()> {
    if reference.len() != estimate.len() {
        return Err(Error::invalid(format!(
            "reference has {} samples, estimate {}",
            reference.len(),
            estimate.len()
        )));
    }
    if reference.sample_rate() != estimate.sample_rate() {
        return Err(Error::invalid("sample rates differ"));
    }
    Ok(())
}

/// Scale-invariant signal-to-distortion ratio in dB.
///
/// The estimate is projected onto the reference; the ratio of projected
/// power to residual power is guarded relative to the projected power, so
/// the cap does not depend on the signal level.
pub fn sisdr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    check_pair(reference, estimate)?;
    let (s, e) = (reference.samples(), estimate.samples());
    let ref_energy: f64 = s.iter().map(|v| v * v).sum();
    if ref_energy == 0.0 {
        return Err(Error::invalid("siSDR reference is all zeros"));
    }
    let alpha = s.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() / ref_energy;
    let target: f64 = alpha * alpha * ref_energy;
    if target == 0.0 {
        return Ok(-SISDR_CAP_DB);
    }
    let residual: f64 = s.iter().zip(e).map(|(a, b)| (alpha * a - b).powi(2)).sum();
    let ratio = target / (residual + 1e-12 * target);
    Ok((10.0 * ratio.log10()).clamp(-SISDR_CAP_DB, SISDR_CAP_DB))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CepstralConfig {
    pub order: usize,
    pub include_c0: bool,
    pub frame_ms: f64,
    pub hop_ms: f64,
}

impl Default for CepstralConfig {
    fn default() -> Self {
        Self {
            order: CEPSTRAL_ORDER,
            include_c0: true,
            frame_ms: 32.0,
            hop_ms: 16.0,
        }
    }
}

/// Low-order real cepstra of every frame; `None` for silent frames.
fn frame_cepstra(w: &Waveform, frame: usize, hop: usize, order: usize) -> Vec<Option<Vec<f64>>> {
    let window: Vec<f64> = (0..frame)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / frame as f64).cos())
        .collect();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(frame);
    let inv = planner.plan_fft_inverse(frame);
    let count = (w.len() - frame) / hop + 1;
    (0..count)
        .map(|f| {
            let x = &w.samples()[f * hop..f * hop + frame];
            let power = x.iter().map(|v| v * v).sum::<f64>() / frame as f64;
            if power < SILENT_POWER {
                return None;
            }
            let mut buf: Vec<Complex64> = x
                .iter()
                .zip(&window)
                .map(|(v, h)| Complex64::new(v * h, 0.0))
                .collect();
            fwd.process(&mut buf);
            for b in buf.iter_mut() {
                *b = Complex64::new(b.norm().max(MAGNITUDE_FLOOR).ln(), 0.0);
            }
            inv.process(&mut buf);
            Some((0..=order).map(|i| buf[i].re / frame as f64).collect())
        })
        .collect()
}

/// Frame-averaged cepstral distance in dB: per frame, `10/ln 10` times the
/// RMS difference of cepstral coefficients `c0..=order` (or `c1..` without
/// `c0`). Frames silent in either signal are skipped.
pub fn cepstral_distance_with(
    reference: &Waveform,
    estimate: &Waveform,
    cfg: &CepstralConfig,
) -> Result<f64> {
    check_pair(reference, estimate)?;
    let rate = reference.sample_rate() as f64;
    let frame = (rate * cfg.frame_ms / 1000.0).round() as usize;
    let hop = (rate * cfg.hop_ms / 1000.0).round() as usize;
    if frame < 2 * (cfg.order + 1) || hop == 0 {
        return Err(Error::invalid("cepstral frame too short for the requested order"));
    }
    if reference.len() < frame {
        return Err(Error::invalid(format!(
            "signals shorter than one {frame}-sample analysis frame"
        )));
    }
    let a = frame_cepstra(reference, frame, hop, cfg.order);
    let b = frame_cepstra(estimate, frame, hop, cfg.order);
    let first = if cfg.include_c0 { 0 } else { 1 };
    let mut total = 0.0;
    let mut used = 0usize;
    for (ca, cb) in a.iter().zip(&b) {
        if let (Some(ca), Some(cb)) = (ca, cb) {
            let sq: f64 = (first..=cfg.order).map(|i| (ca[i] - cb[i]).powi(2)).sum();
            total += (10.0 / LN_10) * (sq / (cfg.order + 1 - first) as f64).sqrt();
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::invalid("every frame is silent in one of the signals"));
    }
    Ok(total / used as f64)
}

pub fn cepstral_distance(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    cepstral_distance_with(reference, estimate, &CepstralConfig::default())
}

/// External perceptual-quality score added to the selection metric.
pub trait PesqPlugin: Send + Sync {
    fn score(&self, reference: &Waveform, estimate: &Waveform) -> Result<f64>;
}

/// `pesq + 0.2 siSDR - CD`.
pub fn selection_metric(pesq_term: f64, sisdr_db: f64, cd: f64) -> f64 {
    pesq_term + SISDR_WEIGHT * sisdr_db - cd
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sisdr: f64,
    pub cd: f64,
    pub pesq: Option<f64>,
    pub selection_score: f64,
}

impl MetricReport {
    pub fn new(sisdr: f64, cd: f64, pesq: Option<f64>) -> Self {
        Self {
            sisdr,
            cd,
            pesq,
            selection_score: selection_metric(pesq.unwrap_or(0.0), sisdr, cd),
        }
    }

    /// Component-wise mean. The PESQ term is kept only if every report has
    /// one.
    pub fn mean(reports: &[MetricReport]) -> Result<MetricReport> {
        if reports.is_empty() {
            return Err(Error::invalid("no reports to average"));
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let pesq = reports
            .iter()
            .map(|r| r.pesq)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / n);
        Ok(MetricReport::new(avg(|r| r.sisdr), avg(|r| r.cd), pesq))
    }
}

pub fn evaluate(
    reference: &Waveform,
    estimate: &Waveform,
    pesq: Option<&dyn PesqPlugin>,
) -> Result<MetricReport> {
    let s = sisdr(reference, estimate)?;
    let cd = cepstral_distance(reference, estimate)?;
    let p = pesq.map(|p| p.score(reference, estimate)).transpose()?;
    Ok(MetricReport::new(s, cd, p))
}

/// Index of the highest score; the earliest wins ties. NaN scores never win.
pub fn select_best(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_nan() {
            continue;
        }
        match best {
            Some(b) if scores[b] >= s => {}
            _ => best = Some(i),
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.random_range(-0.5..0.5)).collect(), 8000).unwrap()
    }

    fn tone(len: usize, hz: f64) -> Waveform {
        Waveform::new(
            (0..len)
                .map(|i| 0.3 * (2.0 * PI * hz * i as f64 / 8000.0).sin())
                .collect(),
            8000,
        )
        .unwrap()
    }

    #[test]
    fn sisdr_identity_hits_cap() {
        let s = noise(4000, 1);
        assert!(sisdr(&s, &s).unwrap() >= 100.0);
        assert_eq!(sisdr(&s, &s).unwrap(), sisdr(&s, &s.scaled(2.0)).unwrap());
    }

    #[test]
    fn sisdr_constructed_ten_db() {
        let s = noise(4000, 2);
        let mut d = noise(4000, 3).into_samples();
        // remove the component along s, then set its power to |s|^2 / 10
        let ss: f64 = s.samples().iter().map(|v| v * v).sum();
        let proj: f64 = s.samples().iter().zip(&d).map(|(a, b)| a * b).sum::<f64>() / ss;
        for (v, r) in d.iter_mut().zip(s.samples()) {
            *v -= proj * r;
        }
        let dd: f64 = d.iter().map(|v| v * v).sum();
        let g = (ss / 10.0 / dd).sqrt();
        let e: Vec<f64> = s.samples().iter().zip(&d).map(|(a, b)| a + g * b).collect();
        let got = sisdr(&s, &Waveform::new(e, 8000).unwrap()).unwrap();
        assert!((got - 10.0).abs() < 0.01, "{got}");
    }

    #[test]
    fn sisdr_errors() {
        let z = Waveform::zeros(100, 8000);
        assert!(sisdr(&z, &noise(100, 1)).is_err());
        assert!(sisdr(&noise(100, 1), &noise(99, 1)).is_err());
        assert_eq!(sisdr(&noise(100, 1), &z).unwrap(), -SISDR_CAP_DB);
    }

    #[test]
    fn cepstral_distance_basics() {
        let s = noise(4000, 4);
        assert_eq!(cepstral_distance(&s, &s).unwrap(), 0.0);
        assert!(cepstral_distance(&s, &tone(4000, 440.0)).unwrap() > 0.0);
        let a = cepstral_distance(&s, &tone(4000, 440.0)).unwrap();
        let b = cepstral_distance(&tone(4000, 440.0), &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gain_only_moves_c0() {
        let s = noise(4000, 5);
        let loud = s.scaled(2.0);
        let with = cepstral_distance(&s, &loud).unwrap();
        // c0 shifts by ln 2; RMS over 25 coefficients
        let want = 10.0 / LN_10 * (2f64.ln().powi(2) / 25.0).sqrt();
        assert!((with - want).abs() < 1e-9, "{with} vs {want}");
        let cfg = CepstralConfig {
            include_c0: false,
            ..CepstralConfig::default()
        };
        assert!(cepstral_distance_with(&s, &loud, &cfg).unwrap() < 1e-9);
    }

    #[test]
    fn silent_input_is_an_error() {
        let z = Waveform::zeros(4000, 8000);
        assert!(cepstral_distance(&z, &z).is_err());
        assert!(cepstral_distance(&noise(100, 1), &noise(100, 2)).is_err());
    }

    #[test]
    fn selection_examples() {
        assert!((selection_metric(0.0, 10.0, 1.0) - 1.0).abs() < 1e-12);
        assert!((selection_metric(3.0, 5.0, 0.5) - 3.5).abs() < 1e-12);
        assert!(selection_metric(0.0, 5.1, 1.0) > selection_metric(0.0, 5.0, 1.0));
        let r = MetricReport::new(10.0, 1.0, None);
        assert_eq!(r.selection_score, 1.0);
    }

    #[test]
    fn best_is_argmax_not_last() {
        assert_eq!(select_best(&[0.1, 0.9, 0.3]), Some(1));
        assert_eq!(select_best(&[0.5, 0.5]), Some(0));
        assert_eq!(select_best(&[f64::NAN, -1.0]), Some(1));
        assert_eq!(select_best(&[]), None);
    }

    struct ConstantPesq(f64);

    impl PesqPlugin for ConstantPesq {
        fn score(&self, _: &Waveform, _: &Waveform) -> Result<f64> {
            Ok(self.0)
        }
    }

    #[test]
    fn plugin_feeds_selection_score() {
        let s = noise(4000, 6);
        let e = s.add(&noise(4000, 7).scaled(0.1)).unwrap();
        let base = evaluate(&s, &e, None).unwrap();
        let with = evaluate(&s, &e, Some(&ConstantPesq(2.5))).unwrap();
        assert_eq!(with.pesq, Some(2.5));
        assert!((with.selection_score - base.selection_score - 2.5).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn sisdr_scale_invariance(seed in 0u64..1000, g in 0.01f64..100.0, j in 0.01f64..100.0) {
            let s = noise(800, seed);
            let e = s.add(&noise(800, seed + 1).scaled(0.3)).unwrap();
            let base = sisdr(&s, &e).unwrap();
            prop_assert!((sisdr(&s, &e.scaled(g)).unwrap() - base).abs() < 1e-6);
            prop_assert!((sisdr(&s.scaled(j), &e.scaled(j)).unwrap() - base).abs() < 1e-6);
        }

        #[test]
        fn argmax_ignores_common_pesq_offset(
            sis in prop::collection::vec(-10.0f64..30.0, 1..20),
            offset in -5.0f64..5.0,
        ) {
            let cds: Vec<f64> = sis.iter().map(|s| (s * 0.37).sin().abs()).collect();
            let a: Vec<f64> = sis.iter().zip(&cds).map(|(s, c)| selection_metric(1.0, *s, *c)).collect();
            let b: Vec<f64> = sis.iter().zip(&cds).map(|(s, c)| selection_metric(1.0 + offset, *s, *c)).collect();
            prop_assert_eq!(select_best(&a), select_best(&b));
        }
    }
}
