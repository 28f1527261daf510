//! Mask-estimating U-net: strided convolutional encoder, grouped GRU
//! bottleneck and one or three mirrored transposed-convolution decoders.
//!
//! All activations are `[channel, freq, time]`. The network input is the
//! compressed mixture spectrum as two channels (re, im); each decoder branch
//! emits an unbounded complex mask of the same shape. Branch 0 is the speech
//! branch and the only one used at inference.
//!
//! Kernels are 3 (freq) x 2 (time) with causal time padding, so frame `n` of
//! any output depends only on frames `..=n` of the input.

pub mod checkpoint;
mod weights;

pub use weights::{Branch, Conv, Gru, Weights};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeometry, Tape, Tensor, Var};
use crate::dsp::{
    apply_mask, compress, istft, stft, ComplexSpectrogram, CompressionExponent, StftConfig,
    Waveform, COMPRESSION_EPS,
};
use crate::error::{Error, Result};

pub const INPUT_CHANNELS: usize = 2;
pub const OUTPUT_CHANNELS: usize = 2;
pub const KERNEL_FREQ: usize = 3;
pub const KERNEL_TIME: usize = 2;
pub const SPEECH_BRANCH: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub base_channels: usize,
    pub num_gru: usize,
    /// 1 for supervised-only models, 3 for mixture-invariant training.
    pub num_branches: usize,
    /// Internal frequency width. Inputs with fewer bins are zero-padded up to
    /// it and masks are cropped back.
    pub freq_bins: usize,
    pub stride_freq: usize,
    pub stride_time: usize,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // desk scale: 4-8-16 channels over 8 kHz, 32 ms frames
        Self::for_input_bins(3, 4, 2, 3, 129)
    }
}

impl ModelConfig {
    /// Config whose internal width is `input_bins` rounded up to a multiple of
    /// `2^num_layers`.
    pub fn for_input_bins(
        num_layers: usize,
        base_channels: usize,
        num_gru: usize,
        num_branches: usize,
        input_bins: usize,
    ) -> Self {
        let m = 1usize << num_layers;
        Self {
            num_layers,
            base_channels,
            num_gru,
            num_branches,
            freq_bins: input_bins.div_ceil(m) * m,
            stride_freq: 2,
            stride_time: 1,
            leaky_slope: 0.2,
        }
    }

    /// The four-layer 16-32-64-128 layout at 16 kHz.
    pub fn full_scale(num_branches: usize) -> Self {
        Self::for_input_bins(4, 16, 4, num_branches, 257)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.base_channels == 0 || self.num_gru == 0 {
            return Err(Error::config("layers, channels and GRU count must be positive"));
        }
        if self.num_branches != 1 && self.num_branches != 3 {
            return Err(Error::config(format!(
                "num_branches must be 1 or 3, got {}",
                self.num_branches
            )));
        }
        if self.stride_time != 1 {
            return Err(Error::config("only unit time stride is supported"));
        }
        if self.stride_freq == 0 {
            return Err(Error::config("frequency stride must be positive"));
        }
        let div = self.stride_freq.pow(self.num_layers as u32);
        if self.freq_bins == 0 || !self.freq_bins.is_multiple_of(div) {
            return Err(Error::config(format!(
                "freq_bins {} must be divisible by stride^layers = {div}",
                self.freq_bins
            )));
        }
        if !self.bottleneck_width().is_multiple_of(self.num_gru) {
            return Err(Error::config(format!(
                "bottleneck width {} does not split into {} GRU groups",
                self.bottleneck_width(),
                self.num_gru
            )));
        }
        Ok(())
    }

    /// Channels after encoder layer `l` (1-based); `channels(0)` is the input.
    pub fn channels(&self, l: usize) -> usize {
        if l == 0 {
            INPUT_CHANNELS
        } else {
            self.base_channels << (l - 1)
        }
    }

    /// Frequency width after encoder layer `l`.
    pub fn freq_at(&self, l: usize) -> usize {
        self.freq_bins / self.stride_freq.pow(l as u32)
    }

    pub fn bottleneck_width(&self) -> usize {
        self.channels(self.num_layers) * self.freq_at(self.num_layers)
    }

    pub fn gru_width(&self) -> usize {
        self.bottleneck_width() / self.num_gru
    }

    fn encoder_geometry(&self) -> ConvGeometry {
        ConvGeometry {
            stride_f: self.stride_freq,
            stride_t: 1,
            pad_f_lo: KERNEL_FREQ / 2,
            pad_f_hi: KERNEL_FREQ / 2,
            pad_t_lo: KERNEL_TIME - 1,
            pad_t_hi: 0,
        }
    }

    fn decoder_geometry(&self) -> ConvGeometry {
        ConvGeometry {
            stride_f: self.stride_freq,
            stride_t: 1,
            pad_f_lo: KERNEL_FREQ / 2,
            pad_f_hi: 0,
            pad_t_lo: 0,
            pad_t_hi: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    pub weights: Weights<Tensor>,
}

fn xavier(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    )
    .expect("shape and buffer agree")
}

impl ModelParams {
    /// Seeded Xavier-uniform weights, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let taps = KERNEL_FREQ * KERNEL_TIME;
        let l_max = config.num_layers;

        let encoder = (1..=l_max)
            .map(|l| {
                let (cin, cout) = (config.channels(l - 1), config.channels(l));
                Conv {
                    weight: xavier(&[cout, cin, KERNEL_FREQ, KERNEL_TIME], cin * taps, cout * taps, &mut rng),
                    bias: Tensor::zeros(&[cout]),
                }
            })
            .collect();

        let h = config.gru_width();
        let gru = (0..config.num_gru)
            .map(|_| Gru {
                w_input: xavier(&[h, 3 * h], h, h, &mut rng),
                w_hidden: xavier(&[h, 3 * h], h, h, &mut rng),
                b_input: Tensor::zeros(&[3 * h]),
                b_hidden: Tensor::zeros(&[3 * h]),
            })
            .collect();

        let branches = (0..config.num_branches)
            .map(|_| {
                let skips = (1..=l_max)
                    .map(|l| {
                        let c = config.channels(l);
                        Conv {
                            weight: xavier(&[c, c, 1, 1], c, c, &mut rng),
                            bias: Tensor::zeros(&[c]),
                        }
                    })
                    .collect();
                let deconvs = (1..=l_max)
                    .map(|l| {
                        let cin = config.channels(l);
                        let cout = if l == 1 { OUTPUT_CHANNELS } else { config.channels(l - 1) };
                        Conv {
                            weight: xavier(&[cin, cout, KERNEL_FREQ, KERNEL_TIME], cin * taps, cout * taps, &mut rng),
                            bias: Tensor::zeros(&[cout]),
                        }
                    })
                    .collect();
                Branch { skips, deconvs }
            })
            .collect();

        Ok(Self {
            config: config.clone(),
            weights: Weights {
                encoder,
                gru,
                branches,
            },
        })
    }

    /// Validates every tensor shape against the config.
    pub fn from_weights(config: ModelConfig, weights: Weights<Tensor>) -> Result<Self> {
        let reference = Self::init(&config, 0)?;
        let expect = reference.weights.named();
        let got = weights.named();
        if expect.len() != got.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                expect.len(),
                got.len()
            )));
        }
        for ((name, e), (_, g)) in expect.iter().zip(&got) {
            if e.shape() != g.shape() {
                return Err(Error::invalid(format!(
                    "{name}: expected shape {:?}, got {:?}",
                    e.shape(),
                    g.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(name.clone()));
            }
        }
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_scalars(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum()
    }

    /// Registers all weights as trainable leaves.
    pub fn register(&self, tape: &mut Tape) -> Weights<Var> {
        self.weights.map(|t| tape.leaf(t.clone()))
    }

    /// Registers all weights as constants (inference).
    pub fn register_frozen(&self, tape: &mut Tape) -> Weights<Var> {
        self.weights.map(|t| tape.constant(t.clone()))
    }

    /// Makes the speech branch emit `G = 1` everywhere, whatever the input.
    pub fn set_identity_speech_mask(&mut self) {
        let branch = &mut self.weights.branches[SPEECH_BRANCH];
        for c in branch.skips.iter_mut().chain(branch.deconvs.iter_mut()) {
            c.weight.data_mut().fill(0.0);
            c.bias.data_mut().fill(0.0);
        }
        let out = &mut branch.deconvs[0].bias;
        out.data_mut().copy_from_slice(&[1.0, 0.0]);
    }
}

/// One GRU over the rows of `x[frames, width]`, starting from a zero state.
fn gru_sequence(tape: &mut Tape, x: Var, g: &Gru<Var>) -> Result<Var> {
    let (frames, h) = (tape.shape(x)[0], tape.shape(x)[1]);
    let proj = tape.matmul(x, g.w_input)?;
    let proj = tape.add_row_bias(proj, g.b_input)?;
    let mut state = tape.constant(Tensor::zeros(&[1, h]));
    let mut outputs = Vec::with_capacity(frames);
    for t in 0..frames {
        let xp = tape.slice(proj, 0, t, t + 1)?;
        let hp = tape.matmul(state, g.w_hidden)?;
        let hp = tape.add_row_bias(hp, g.b_hidden)?;
        let xg = tape.slice(xp, 1, 0, 2 * h)?;
        let hg = tape.slice(hp, 1, 0, 2 * h)?;
        let gates = tape.add(xg, hg)?;
        let gates = tape.sigmoid(gates);
        let reset = tape.slice(gates, 1, 0, h)?;
        let update = tape.slice(gates, 1, h, 2 * h)?;
        let xn = tape.slice(xp, 1, 2 * h, 3 * h)?;
        let hn = tape.slice(hp, 1, 2 * h, 3 * h)?;
        let rh = tape.mul(reset, hn)?;
        let cand = tape.add(xn, rh)?;
        let cand = tape.tanh(cand);
        // h' = (1 - z) * n + z * h = n + z * (h - n)
        let diff = tape.sub(state, cand)?;
        let keep = tape.mul(update, diff)?;
        state = tape.add(cand, keep)?;
        outputs.push(state);
    }
    tape.concat(&outputs, 0)
}

fn conv_bias(tape: &mut Tape, x: Var, c: &Conv<Var>, geom: ConvGeometry) -> Result<Var> {
    let y = tape.conv2d(x, c.weight, geom)?;
    tape.add_channel_bias(y, c.bias)
}

impl ModelConfig {
    /// Runs the network on `input[2, K, N]` (compressed mixture, `K <=
    /// freq_bins`) and returns the masks of the requested branches, each
    /// `[2, K, N]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        w: &Weights<Var>,
        input: Var,
        branches: &[usize],
    ) -> Result<Vec<Var>> {
        let shape = tape.shape(input).to_vec();
        if shape.len() != 3 || shape[0] != INPUT_CHANNELS {
            return Err(Error::invalid(format!(
                "network input must be [2, K, N], got {shape:?}"
            )));
        }
        let (k, frames) = (shape[1], shape[2]);
        if k > self.freq_bins || frames == 0 {
            return Err(Error::invalid(format!(
                "input has {k} bins x {frames} frames; model accepts at most {} bins",
                self.freq_bins
            )));
        }
        if w.encoder.len() != self.num_layers || w.gru.len() != self.num_gru {
            return Err(Error::invalid("weights do not match model config"));
        }
        if let Some(&b) = branches.iter().find(|&&b| b >= w.branches.len()) {
            return Err(Error::invalid(format!(
                "branch {b} requested from a {}-branch model",
                w.branches.len()
            )));
        }

        let x = if k < self.freq_bins {
            let pad = tape.constant(Tensor::zeros(&[INPUT_CHANNELS, self.freq_bins - k, frames]));
            tape.concat(&[input, pad], 1)?
        } else {
            input
        };

        let enc_geom = self.encoder_geometry();
        let mut encoded = Vec::with_capacity(self.num_layers);
        let mut h = x;
        for layer in &w.encoder {
            let y = conv_bias(tape, h, layer, enc_geom)?;
            h = tape.leaky_relu(y, self.leaky_slope);
            encoded.push(h);
        }

        let (c_l, f_l) = (self.channels(self.num_layers), self.freq_at(self.num_layers));
        let flat = tape.reshape(h, &[c_l * f_l, frames])?;
        let flat = tape.transpose(flat)?;
        let gw = self.gru_width();
        let mut groups = Vec::with_capacity(self.num_gru);
        for (j, g) in w.gru.iter().enumerate() {
            let part = tape.slice(flat, 1, j * gw, (j + 1) * gw)?;
            groups.push(gru_sequence(tape, part, g)?);
        }
        let joined = if groups.len() == 1 {
            groups[0]
        } else {
            tape.concat(&groups, 1)?
        };
        let joined = tape.transpose(joined)?;
        let bottleneck = tape.reshape(joined, &[c_l, f_l, frames])?;

        let dec_geom = self.decoder_geometry();
        let mut masks = Vec::with_capacity(branches.len());
        for &b in branches {
            let br = &w.branches[b];
            let skip = conv_bias(tape, encoded[self.num_layers - 1], &br.skips[self.num_layers - 1], ConvGeometry::POINTWISE)?;
            let mut h = tape.add(bottleneck, skip)?;
            for l in (1..=self.num_layers).rev() {
                let layer = &br.deconvs[l - 1];
                let y = tape.conv_transpose2d(h, layer.weight, dec_geom, self.freq_at(l - 1), frames)?;
                let y = tape.add_channel_bias(y, layer.bias)?;
                if l > 1 {
                    let act = tape.leaky_relu(y, self.leaky_slope);
                    let skip = conv_bias(tape, encoded[l - 2], &br.skips[l - 2], ConvGeometry::POINTWISE)?;
                    h = tape.add(act, skip)?;
                } else {
                    h = y;
                }
            }
            let mask = if k < self.freq_bins {
                tape.slice(h, 1, 0, k)?
            } else {
                h
            };
            masks.push(mask);
        }
        Ok(masks)
    }
}

/// Compressed network features of a spectrogram, `[2, K, N]`.
pub fn network_input(y: &ComplexSpectrogram, c: CompressionExponent) -> Result<Tensor> {
    Ok(compress(y, c, COMPRESSION_EPS)?.to_tensor())
}

/// Complex product of a mask `g[2, K, N]` with a fixed spectrum `y[2, K, N]`.
pub fn apply_mask_var(tape: &mut Tape, y: &Tensor, g: Var) -> Result<Var> {
    let shape = tape.shape(g).to_vec();
    if shape != y.shape() {
        return Err(Error::invalid(format!(
            "mask shape {shape:?} does not match spectrum {:?}",
            y.shape()
        )));
    }
    let plane = y.len() / 2;
    let (yr, yi) = y.data().split_at(plane);
    let plane_shape = [1, shape[1], shape[2]];
    let yr = tape.constant(Tensor::from_vec(plane_shape.to_vec(), yr.to_vec())?);
    let yi = tape.constant(Tensor::from_vec(plane_shape.to_vec(), yi.to_vec())?);
    let gr = tape.slice(g, 0, 0, 1)?;
    let gi = tape.slice(g, 0, 1, 2)?;
    let a = tape.mul(gr, yr)?;
    let b = tape.mul(gi, yi)?;
    let re = tape.sub(a, b)?;
    let c = tape.mul(gr, yi)?;
    let d = tape.mul(gi, yr)?;
    let im = tape.add(c, d)?;
    tape.concat(&[re, im], 0)
}

/// Speech-branch enhancement of a spectrogram. Noise branches are never
/// evaluated.
pub fn enhance(
    params: &ModelParams,
    y: &ComplexSpectrogram,
    c: CompressionExponent,
) -> Result<ComplexSpectrogram> {
    let mut tape = Tape::new();
    let w = params.register_frozen(&mut tape);
    let input = tape.constant(network_input(y, c)?);
    let masks = params
        .config()
        .forward(&mut tape, &w, input, &[SPEECH_BRANCH])?;
    let g = ComplexSpectrogram::from_tensor(tape.value(masks[0]), y.sample_rate(), *y.config())?;
    apply_mask(y, &g)
}

/// Waveform-in, waveform-out enhancement. The signal is padded so every
/// original sample is fully overlap-added, then cropped back to its length.
pub fn enhance_waveform(
    params: &ModelParams,
    stft_cfg: &StftConfig,
    w: &Waveform,
    c: CompressionExponent,
) -> Result<Waveform> {
    let (padded, front) = pad_for_synthesis(w, stft_cfg);
    let spec = stft(&padded, stft_cfg)?;
    let out = istft(&enhance(params, &spec, c)?)?;
    let samples = out.samples()[front..front + w.len()].to_vec();
    Waveform::new(samples, w.sample_rate())
}

/// Zero-pads so that all of `w` lies in the fully overlapped interior of the
/// STFT. Returns the padded signal and the front padding.
pub fn pad_for_synthesis(w: &Waveform, cfg: &StftConfig) -> (Waveform, usize) {
    let front = cfg.frame_length - cfg.hop_length;
    let hop = cfg.hop_length;
    let needed = front + w.len() + front;
    let frames = needed.saturating_sub(cfg.frame_length).div_ceil(hop) + 1;
    let total = cfg.synthesis_length(frames);
    let mut samples = vec![0.0; total];
    samples[front..front + w.len()].copy_from_slice(w.samples());
    (
        Waveform::new(samples, w.sample_rate()).expect("finite input stays finite"),
        front,
    )
}
