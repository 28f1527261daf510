//! Finite-difference check of every training objective with respect to
//! every parameter of a small three-branch model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{check_gradients, Coverage, GradCheckReport, DEFAULT_FLOOR};
use crate::autodiff::{Tape, Tensor, Var};
use crate::dsp::{compress, ComplexSpectrogram, StftConfig, COMPRESSION_EPS};
use crate::embedder::{EmbedderConfig, FrameEmbedder};
use crate::error::Result;
use crate::losses::{
    disentanglement_loss, embedding_loss, mixit_loss, semi_supervised_loss, spectral_loss,
    unsupervised_loss, LossConfig, MixtureSpectra, SeparatedOutputs,
};
use crate::model::{apply_mask_var, ModelConfig, ModelParams};

/// Size of the suite's model and inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuiteShape {
    pub num_layers: usize,
    pub base_channels: usize,
    pub num_gru: usize,
    pub freq_bins: usize,
    pub frames: usize,
}

impl Default for SuiteShape {
    fn default() -> Self {
        Self {
            num_layers: 2,
            base_channels: 4,
            num_gru: 2,
            freq_bins: 32,
            frames: 8,
        }
    }
}

pub const SUITE_STEP: f64 = 3e-5;
/// Relative errors are taken against at least this many multiples of the
/// loss rounding error divided by the step, so gradients at the
/// finite-difference noise level are compared in absolute terms.
pub const NOISE_FLOOR_MULTIPLE: f64 = 1e4;
pub const SUITE_SAMPLE_RATE: u32 = 8000;
pub const OBJECTIVES: [&str; 6] = [
    "supervised",
    "mixit",
    "embedding",
    "disentanglement",
    "unsupervised",
    "semi_supervised",
];

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub objective: &'static str,
    pub loss: f64,
    /// Gradient magnitude below which errors are measured absolutely.
    pub floor: f64,
    pub report: GradCheckReport,
}

/// Floor for the relative error of a central difference with step `step`
/// on a loss of value `loss`.
pub fn noise_floor(loss: f64, step: f64) -> f64 {
    (NOISE_FLOOR_MULTIPLE * f64::EPSILON * loss.abs() / step).max(DEFAULT_FLOOR)
}

fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect())
        .expect("shape and buffer agree")
}

struct Fixture {
    model: ModelConfig,
    params: ModelParams,
    loss: LossConfig,
    embedder: Box<dyn FrameEmbedder>,
    features: Tensor,
    y: Tensor,
    s: Tensor,
    x: Tensor,
    n: Tensor,
    semi_weight: f64,
}

impl Fixture {
    fn new(shape: SuiteShape, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = ModelConfig::for_input_bins(
            shape.num_layers,
            shape.base_channels,
            shape.num_gru,
            3,
            shape.freq_bins,
        );
        let params = ModelParams::init(&model, rng.random())?;
        let dims = [2, shape.freq_bins, shape.frames];
        let x = random(&dims, 1.0, &mut rng);
        let n = random(&dims, 0.5, &mut rng);
        let mut y = x.clone();
        y.axpy(1.0, &n);
        let s = random(&dims, 1.0, &mut rng);
        // the frame length only sets the spectrogram's bin count
        let stft = StftConfig::new(2 * (shape.freq_bins - 1), shape.freq_bins - 1)?;
        let loss = LossConfig::default();
        let spec = ComplexSpectrogram::from_tensor(&y, SUITE_SAMPLE_RATE, stft)?;
        let features = compress(&spec, loss.compression, COMPRESSION_EPS)?.to_tensor();
        let embedder = EmbedderConfig::default().build(shape.freq_bins, SUITE_SAMPLE_RATE)?;
        Ok(Self {
            model,
            params,
            loss,
            embedder,
            features,
            y,
            s,
            x,
            n,
            semi_weight: 0.5,
        })
    }

    fn outputs(&self, tape: &mut Tape, vars: &[Var]) -> Result<SeparatedOutputs> {
        let w = self
            .params
            .weights
            .zip_from(vars.to_vec())
            .expect("one var per parameter");
        let input = tape.constant(self.features.clone());
        let masks = self.model.forward(tape, &w, input, &[0, 1, 2])?;
        Ok(SeparatedOutputs {
            s_hat: apply_mask_var(tape, &self.y, masks[0])?,
            n1: apply_mask_var(tape, &self.y, masks[1])?,
            n2: apply_mask_var(tape, &self.y, masks[2])?,
        })
    }

    fn objective(&self, name: &str, tape: &mut Tape, vars: &[Var]) -> Result<Var> {
        let out = self.outputs(tape, vars)?;
        let x = tape.constant(self.x.clone());
        let n = tape.constant(self.n.clone());
        let s = tape.constant(self.s.clone());
        let mix = MixtureSpectra {
            x: self.x.clone(),
            n: self.n.clone(),
        };
        let emb = self.embedder.as_ref();
        match name {
            "supervised" => spectral_loss(tape, s, out.s_hat, &self.loss),
            "mixit" => Ok(mixit_loss(tape, out.s_hat, out.n1, out.n2, x, n, &self.loss)?.loss),
            "embedding" => {
                let a = emb.embed(tape, out.s_hat)?;
                let b = emb.embed(tape, x)?;
                embedding_loss(tape, a, b)
            }
            "disentanglement" => {
                let a = emb.embed(tape, out.s_hat)?;
                let b = emb.embed(tape, out.n1)?;
                let c = emb.embed(tape, out.n2)?;
                disentanglement_loss(tape, a, b, c, self.loss.disentanglement, self.loss.eps)
            }
            "unsupervised" => Ok(unsupervised_loss(tape, out, &mix, emb, &self.loss)?.total),
            "semi_supervised" => {
                let sup = spectral_loss(tape, s, out.s_hat, &self.loss)?;
                let unsup = unsupervised_loss(tape, out, &mix, emb, &self.loss)?.total;
                semi_supervised_loss(tape, sup, unsup, self.semi_weight)
            }
            other => unreachable!("unknown objective {other}"),
        }
    }
}

/// Checks each of [`OBJECTIVES`] against central differences over every
/// model parameter. See [`noise_floor`] for the error measure.
pub fn gradient_suite(shape: SuiteShape, seed: u64, coverage: Coverage) -> Result<Vec<SuiteResult>> {
    let fx = Fixture::new(shape, seed)?;
    let leaves: Vec<Tensor> = fx.params.weights.iter().cloned().collect();
    OBJECTIVES
        .iter()
        .map(|&name| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = leaves.iter().map(|t| tape.constant(t.clone())).collect();
            let value = fx.objective(name, &mut tape, &vars)?;
            let loss = tape.item(value);
            let floor = noise_floor(loss, SUITE_STEP);
            let report = check_gradients(
                |tape, vars| fx.objective(name, tape, vars),
                &leaves,
                SUITE_STEP,
                floor,
                coverage,
            )?;
            Ok(SuiteResult {
                objective: name,
                loss,
                floor,
                report,
            })
        })
        .collect()
}
