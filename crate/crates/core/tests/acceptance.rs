//! Acceptance suite. Each test writes one `PASS`/`FAIL` line for its
//! criterion to stderr and then asserts it. Tolerances, sizes and time budgets are
//! pinned below.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mixse::autodiff::gradcheck::Coverage;
use mixse::autodiff::{Tape, Tensor, Var};
use mixse::datagen::{Batch, BatchStream, DataConfig, Mode, SupervisedPair, TargetPolicy};
use mixse::dsp::{istft, stft, StftConfig, Waveform};
use mixse::embedder::EmbedderConfig;
use mixse::losses::{
    mixit_loss, spectral_loss, unsupervised_loss, LossConfig, MixtureSpectra, SeparatedOutputs,
};
use mixse::metrics::{select_best, sisdr, MetricReport};
use mixse::model::{enhance_waveform, ModelConfig, ModelParams};
use mixse::trainer::gradcheck::{gradient_suite, SuiteShape};
use mixse::trainer::{ExperimentConfig, Preset, Trainer};

const IDENTITY_BUDGET: Duration = Duration::from_secs(1);
const PERMUTATION_INSTANCES: usize = 1000;
const PERMUTATION_BUDGET: Duration = Duration::from_secs(10);
const GRADIENT_TOLERANCE: f64 = 1e-3;
const GRADIENT_BUDGET: Duration = Duration::from_secs(120);
const STFT_TOLERANCE: f64 = 1e-6;
const STFT_CLIPS: u64 = 5;
const OVERFIT_PAIRS: usize = 10;
const OVERFIT_MAX_STEPS: usize = 2000;
const OVERFIT_LOSS_RATIO: f64 = 0.1;
const OVERFIT_SISDR_GAIN_DB: f64 = 3.0;
const OVERFIT_BUDGET: Duration = Duration::from_secs(600);
const TREND_UTTERANCES: usize = 50;
const TREND_SEEDS: [u64; 3] = [1, 2, 3];
const TREND_STEPS: u64 = 150;
const TREND_MIXIT_REDUCTION: f64 = 0.5;
const TREND_BUDGET: Duration = Duration::from_secs(1800);
const ADDITIVITY_TOLERANCE: f64 = 1e-10;
const ADDITIVITY_BUDGET: Duration = Duration::from_secs(10);
const SISDR_SCALE_TOLERANCE_DB: f64 = 1e-6;
const SISDR_CONSTRUCTED_TOLERANCE_DB: f64 = 0.01;
const QUICK_BUDGET: Duration = Duration::from_secs(1);

/// Writes to the raw stderr handle, which the test harness does not capture,
/// so the lines show for passing tests too.
fn say(line: &str) {
    let _ = writeln!(std::io::stderr().lock(), "{line}");
}

fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    say(&format!("criterion {criterion:>2} {verdict}: {name} ({detail})"));
}

fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect())
        .unwrap()
}

fn sum_tensors(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    out.axpy(1.0, b);
    out
}

#[test]
fn criterion_01_loss_identities() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = LossConfig::default();
    let dims = [2, 17, 9];
    let mut failures = Vec::new();

    // estimate equal to target
    let s = random(&dims, 1.0, &mut rng);
    let mut tape = Tape::new();
    let a = tape.constant(s.clone());
    let b = tape.constant(s.clone());
    let l = spectral_loss(&mut tape, a, b, &cfg).unwrap();
    if tape.item(l) != 0.0 {
        failures.push(format!("supervised loss {}", tape.item(l)));
    }

    // perfect separation under either assignment
    let s_hat = random(&dims, 1.0, &mut rng);
    let na = random(&dims, 0.5, &mut rng);
    let nb = random(&dims, 0.5, &mut rng);
    for (n1, n2) in [(&na, &nb), (&nb, &na)] {
        let mut tape = Tape::new();
        let x = tape.constant(sum_tensors(&s_hat, n1));
        let n = tape.constant(n2.clone());
        let (sv, av, bv) = (
            tape.constant(s_hat.clone()),
            tape.constant(na.clone()),
            tape.constant(nb.clone()),
        );
        let m = mixit_loss(&mut tape, sv, av, bv, x, n, &cfg).unwrap();
        if tape.item(m.loss) != 0.0 {
            failures.push(format!("mixit loss {}", tape.item(m.loss)));
        }
    }

    // zero weights reduce the unsupervised loss to MixIT exactly
    let zero = LossConfig {
        alpha_e: 0.0,
        alpha_d: 0.0,
        ..LossConfig::default()
    };
    let embedder = EmbedderConfig::default().build(dims[1], 8000).unwrap();
    for _ in 0..20 {
        let mut tape = Tape::new();
        let out = SeparatedOutputs {
            s_hat: tape.constant(random(&dims, 1.0, &mut rng)),
            n1: tape.constant(random(&dims, 1.0, &mut rng)),
            n2: tape.constant(random(&dims, 1.0, &mut rng)),
        };
        let batch = MixtureSpectra {
            x: random(&dims, 1.0, &mut rng),
            n: random(&dims, 1.0, &mut rng),
        };
        let u = unsupervised_loss(&mut tape, out, &batch, embedder.as_ref(), &zero).unwrap();
        let x = tape.constant(batch.x.clone());
        let n = tape.constant(batch.n.clone());
        let m = mixit_loss(&mut tape, out.s_hat, out.n1, out.n2, x, n, &zero).unwrap();
        if tape.item(u.total).to_bits() != tape.item(m.loss).to_bits() {
            failures.push(format!("{} vs {}", tape.item(u.total), tape.item(m.loss)));
        }
    }

    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < IDENTITY_BUDGET;
    let detail = if failures.is_empty() { "all hold".to_string() } else { failures.join("; ") };
    report(1, "loss identities", pass, &format!("{detail}, {elapsed:.2?}"));
    assert!(pass);
}

#[test]
fn criterion_02_permutation_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = LossConfig::default();
    let mut mismatches = 0;
    for _ in 0..PERMUTATION_INSTANCES {
        let dims = [2, rng.random_range(1..9), rng.random_range(1..6)];
        let scale = 10f64.powf(rng.random_range(-2.0..1.0));
        let t: Vec<Tensor> = (0..5).map(|_| random(&dims, scale, &mut rng)).collect();
        let mut tape = Tape::new();
        let v: Vec<Var> = t.iter().map(|x| tape.constant(x.clone())).collect();
        let (s_hat, n1, n2, x, n) = (v[0], v[1], v[2], v[3], v[4]);

        // both assignments enumerated explicitly
        let assignment = |tape: &mut Tape, a: Var, b: Var| {
            let speech = tape.add(s_hat, a).unwrap();
            let l1 = spectral_loss(tape, x, speech, &cfg).unwrap();
            let l2 = spectral_loss(tape, n, b, &cfg).unwrap();
            let l = tape.add(l1, l2).unwrap();
            tape.item(l)
        };
        let first = assignment(&mut tape, n1, n2);
        let second = assignment(&mut tape, n2, n1);
        let oracle = first.min(second);

        let m = mixit_loss(&mut tape, s_hat, n1, n2, x, n, &cfg).unwrap();
        let swapped = mixit_loss(&mut tape, s_hat, n2, n1, x, n, &cfg).unwrap();
        if tape.item(m.loss) != oracle || tape.item(swapped.loss) != oracle {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = mismatches == 0 && elapsed < PERMUTATION_BUDGET;
    report(
        2,
        "permutation oracle",
        pass,
        &format!("{mismatches}/{PERMUTATION_INSTANCES} mismatches, {elapsed:.2?}"),
    );
    assert!(pass);
}

#[test]
fn criterion_03_gradient_suite() {
    let start = Instant::now();
    let results = gradient_suite(SuiteShape::default(), 3, Coverage::All).unwrap();
    let elapsed = start.elapsed();
    let worst = results
        .iter()
        .map(|r| r.report.max_relative_error)
        .fold(0.0, f64::max);
    for r in &results {
        say(&format!(
            "  {:<16} max rel err {:.3e} over {} entries",
            r.objective, r.report.max_relative_error, r.report.entries_checked
        ));
    }
    let pass = worst < GRADIENT_TOLERANCE && elapsed < GRADIENT_BUDGET;
    report(3, "gradient suite", pass, &format!("worst {worst:.3e}, {elapsed:.2?}"));
    assert!(pass);
}

#[test]
fn criterion_04_stft_fidelity() {
    let start = Instant::now();
    let cfg = StftConfig::default();
    let mut worst: f64 = 0.0;
    for seed in 0..STFT_CLIPS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Waveform::new((0..8000).map(|_| rng.random_range(-1.0..1.0)).collect(), 8000).unwrap();
        let spec = stft(&x, &cfg).unwrap();
        let y = istft(&spec).unwrap();
        let range = cfg.interior(spec.frames());
        let (mut err, mut energy) = (0.0, 0.0);
        for i in range {
            err += (y.samples()[i] - x.samples()[i]).powi(2);
            energy += x.samples()[i].powi(2);
        }
        worst = worst.max((err / energy).sqrt());
    }
    let elapsed = start.elapsed();
    let pass = worst < STFT_TOLERANCE && elapsed < QUICK_BUDGET;
    report(4, "STFT round trip", pass, &format!("worst relative error {worst:.3e}, {elapsed:.2?}"));
    assert!(pass);
}

fn overfit_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model = ModelConfig::for_input_bins(2, 8, 2, 1, cfg.stft.freq_bins());
    cfg.data = DataConfig {
        clip_seconds: 0.25,
        pool_size: Some(OVERFIT_PAIRS),
        rir_probability: 0.0,
        target_policy: TargetPolicy::ReverberantTarget,
        ..DataConfig::default()
    };
    cfg.train.lr_supervised = 1e-3;
    cfg.train.batch_size = OVERFIT_PAIRS;
    cfg.train.epoch_size = OVERFIT_PAIRS;
    cfg
}

fn mean_sisdr(pairs: &[SupervisedPair], f: impl Fn(&Waveform) -> Waveform) -> f64 {
    pairs
        .iter()
        .map(|p| sisdr(&p.target, &f(&p.input)).unwrap())
        .sum::<f64>()
        / pairs.len() as f64
}

#[test]
fn criterion_05_supervised_overfit() {
    let start = Instant::now();
    let cfg = overfit_config();
    let stream = BatchStream::new(&cfg.data, Mode::Supervised, OVERFIT_PAIRS, OVERFIT_PAIRS, 5).unwrap();
    let batch = stream.batch(0).unwrap();
    let pairs = batch.supervised().to_vec();
    let mut trainer = Trainer::new(&cfg, 5).unwrap();
    let initial = trainer.evaluate_loss(&batch).unwrap().total;
    let mut steps = 0;
    let mut last = initial;
    while steps < OVERFIT_MAX_STEPS {
        last = trainer.step(&batch, 0).unwrap().loss.total;
        steps += 1;
        if last < OVERFIT_LOSS_RATIO * initial * 0.5 {
            break;
        }
    }
    let final_loss = trainer.evaluate_loss(&batch).unwrap().total;
    let noisy = mean_sisdr(&pairs, |x| x.clone());
    let enhanced = mean_sisdr(&pairs, |x| {
        enhance_waveform(trainer.params(), &cfg.stft, x, cfg.loss.compression).unwrap()
    });
    let elapsed = start.elapsed();
    let ratio = final_loss / initial;
    let gain = enhanced - noisy;
    let pass = ratio < OVERFIT_LOSS_RATIO && gain >= OVERFIT_SISDR_GAIN_DB && elapsed < OVERFIT_BUDGET;
    report(
        5,
        "supervised overfit",
        pass,
        &format!(
            "{steps} steps, loss {initial:.2} -> {final_loss:.2} (ratio {ratio:.3}, last step {last:.2}), \
             siSDR {noisy:.2} -> {enhanced:.2} dB (gain {gain:.2}), {elapsed:.1?}"
        ),
    );
    assert!(pass);
}

fn trend_config(preset: Preset) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(preset);
    cfg.model = ModelConfig::for_input_bins(2, 4, 2, 3, cfg.stft.freq_bins());
    cfg.data.clip_seconds = 0.5;
    cfg.data.pool_size = Some(TREND_UTTERANCES);
    cfg.train.batch_size = 5;
    cfg.train.epoch_size = TREND_UTTERANCES;
    cfg
}

struct TrendRun {
    mixit_start: f64,
    mixit_end: f64,
    params: ModelParams,
}

/// Mean of each logged loss term over the whole pool.
fn pool_losses(trainer: &Trainer, pool: &[Batch]) -> (f64, f64) {
    let (mut mixit, mut dis) = (0.0, 0.0);
    for b in pool {
        let v = trainer.evaluate_loss(b).unwrap();
        mixit += v.mixit.unwrap();
        dis += v.disentanglement.unwrap_or(f64::NAN);
    }
    (mixit / pool.len() as f64, dis / pool.len() as f64)
}

fn trend_run(preset: Preset, seed: u64) -> (TrendRun, Vec<Batch>) {
    let cfg = trend_config(preset);
    let stream = BatchStream::new(&cfg.data, cfg.train.mode, cfg.train.batch_size, cfg.train.epoch_size, seed)
        .unwrap();
    let pool: Vec<Batch> = (0..stream.steps_per_epoch() as u64).map(|s| stream.batch(s).unwrap()).collect();
    let mut trainer = Trainer::new(&cfg, seed).unwrap();
    let mixit_start = pool_losses(&trainer, &pool).0;
    for s in 0..TREND_STEPS {
        trainer.step(&stream.batch(s).unwrap(), 0).unwrap();
    }
    let mixit_end = pool_losses(&trainer, &pool).0;
    let params = trainer.params().clone();
    (
        TrendRun {
            mixit_start,
            mixit_end,
            params,
        },
        pool,
    )
}

#[test]
fn criterion_06_unsupervised_trend() {
    let start = Instant::now();
    let mut reductions_ok = true;
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in TREND_SEEDS {
        let (plain, pool) = trend_run(Preset::Exp4, seed);
        let (full, _) = trend_run(Preset::Exp7, seed);
        // both models scored with the full objective, after the same steps
        let judge = trend_config(Preset::Exp7);
        let dis = |p: &ModelParams| {
            pool_losses(&Trainer::with_params(&judge, p.clone()).unwrap(), &pool).1
        };
        let (d4, d7) = (dis(&plain.params), dis(&full.params));
        let r4 = 1.0 - plain.mixit_end / plain.mixit_start;
        let r7 = 1.0 - full.mixit_end / full.mixit_start;
        reductions_ok &= r4 >= TREND_MIXIT_REDUCTION && r7 >= TREND_MIXIT_REDUCTION;
        wins += (d7 < d4) as usize;
        lines.push(format!(
            "seed {seed}: mixit reduction exp4 {r4:.3} exp7 {r7:.3}; disentanglement exp4 {d4:.5} exp7 {d7:.5}"
        ));
    }
    for l in &lines {
        say(&format!("  {l}"));
    }
    let elapsed = start.elapsed();
    let majority = wins * 2 > TREND_SEEDS.len();
    let pass = reductions_ok && majority && elapsed < TREND_BUDGET;
    report(
        6,
        "unsupervised trend",
        pass,
        &format!(
            "(a) reductions >= {TREND_MIXIT_REDUCTION}: {reductions_ok}; (b) exp7 lower in {wins}/{} seeds; {elapsed:.1?}",
            TREND_SEEDS.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_semi_supervised_additivity() {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::preset(Preset::Exp9);
    cfg.model = ModelConfig::for_input_bins(2, 4, 2, 3, cfg.stft.freq_bins());
    cfg.data.clip_seconds = 0.25;
    let stream = BatchStream::new(&cfg.data, cfg.train.mode, 2, 4, 7).unwrap();
    let mut trainer = Trainer::new(&cfg, 7).unwrap();
    // give the optimiser non-trivial moments first
    trainer.step(&stream.batch(0).unwrap(), 0).unwrap();

    let batch = stream.batch(1).unwrap();
    let (_, joint) = trainer.gradients(&batch).unwrap();
    let (_, sup) = trainer.gradients(&Batch::Supervised(batch.supervised().to_vec())).unwrap();
    let (_, unsup) = trainer
        .gradients(&Batch::Unsupervised(batch.unsupervised().to_vec()))
        .unwrap();
    let w = cfg.train.unsupervised_weight();

    let opt = trainer.optimizer();
    let mult = trainer.lr_multiplier();
    let d_joint = opt.frozen_delta(&joint, mult).unwrap();
    let d_sup = opt.frozen_delta(&sup, mult).unwrap();
    let d_unsup = opt.frozen_delta(&unsup, mult).unwrap();
    let mut frozen_err: f64 = 0.0;
    for ((j, s), u) in d_joint.iter().zip(&d_sup).zip(&d_unsup) {
        for i in 0..j.len() {
            frozen_err = frozen_err.max((j.data()[i] - (s.data()[i] + w * u.data()[i])).abs());
        }
    }

    // a full optimiser step on the joint gradient against the same step on
    // the separately computed weighted sum
    let summed: Vec<Tensor> = sup
        .iter()
        .zip(&unsup)
        .map(|(s, u)| {
            let mut t = s.clone();
            t.axpy(w, u);
            t
        })
        .collect();
    let step_with = |grads: &[Tensor]| {
        let mut opt = trainer.optimizer().clone();
        let mut params: Vec<Tensor> = trainer.params().weights.iter().cloned().collect();
        opt.step(params.iter_mut(), grads, mult).unwrap();
        params
    };
    let (pj, ps) = (step_with(&joint), step_with(&summed));
    let step_err = pj
        .iter()
        .zip(&ps)
        .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);

    let elapsed = start.elapsed();
    let pass = frozen_err <= ADDITIVITY_TOLERANCE && step_err <= ADDITIVITY_TOLERANCE && elapsed < ADDITIVITY_BUDGET;
    report(
        7,
        "semi-supervised additivity",
        pass,
        &format!("frozen-moment delta err {frozen_err:.2e}, full step err {step_err:.2e}, {elapsed:.2?}"),
    );
    assert!(pass);
}

#[test]
fn criterion_08_selection_metric() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ok = true;
    for _ in 0..200 {
        let log: Vec<(f64, f64, f64)> = (0..rng.random_range(1..30))
            .map(|_| {
                (
                    rng.random_range(1.0..4.5),
                    rng.random_range(-5.0..25.0),
                    rng.random_range(0.5..8.0),
                )
            })
            .collect();
        let scores = |offset: f64| -> Vec<f64> {
            log.iter()
                .map(|&(p, s, c)| MetricReport::new(s, c, Some(p + offset)).selection_score)
                .collect()
        };
        // independent argmax of pesq + 0.2 siSDR - CD
        let expected = (0..log.len())
            .max_by(|&a, &b| {
                let m = |i: usize| log[i].0 + 0.2 * log[i].1 - log[i].2;
                m(a).total_cmp(&m(b)).then(b.cmp(&a))
            })
            .unwrap();
        let chosen = select_best(&scores(0.0)).unwrap();
        let shifted = select_best(&scores(rng.random_range(-3.0..3.0))).unwrap();
        ok &= chosen == expected && shifted == chosen;
    }
    let elapsed = start.elapsed();
    let pass = ok && elapsed < QUICK_BUDGET;
    report(8, "selection metric", pass, &format!("{elapsed:.2?}"));
    assert!(pass);
}

#[test]
fn criterion_09_sisdr_properties() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 4000;
    let reference: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let noise: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r = Waveform::new(reference.clone(), 8000).unwrap();

    let estimate = Waveform::new(
        reference.iter().zip(&noise).map(|(a, b)| a + 0.3 * b).collect(),
        8000,
    )
    .unwrap();
    let base = sisdr(&r, &estimate).unwrap();
    let scale_err = [1e-3, 0.5, 7.0, 1e4]
        .iter()
        .map(|&g| (sisdr(&r, &estimate.scaled(g)).unwrap() - base).abs())
        .fold(0.0, f64::max);

    // residual orthogonal to the reference with a tenth of its energy
    let dot: f64 = reference.iter().zip(&noise).map(|(a, b)| a * b).sum();
    let rr: f64 = reference.iter().map(|a| a * a).sum();
    let orth: Vec<f64> = noise.iter().zip(&reference).map(|(b, a)| b - dot / rr * a).collect();
    let oo: f64 = orth.iter().map(|v| v * v).sum();
    let g = (rr / 10.0 / oo).sqrt();
    let ten = Waveform::new(reference.iter().zip(&orth).map(|(a, o)| a + g * o).collect(), 8000).unwrap();
    let constructed = sisdr(&r, &ten).unwrap();

    let elapsed = start.elapsed();
    let pass = scale_err < SISDR_SCALE_TOLERANCE_DB
        && (constructed - 10.0).abs() <= SISDR_CONSTRUCTED_TOLERANCE_DB
        && elapsed < QUICK_BUDGET;
    report(
        9,
        "siSDR properties",
        pass,
        &format!("scale deviation {scale_err:.2e} dB, constructed {constructed:.4} dB, {elapsed:.2?}"),
    );
    assert!(pass);
}

#[test]
fn criterion_10_inference_branch_invariance() {
    let start = Instant::now();
    let cfg = ExperimentConfig::preset(Preset::Exp7);
    let params = ModelParams::init(&cfg.model, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = Waveform::new((0..4000).map(|_| rng.random_range(-0.5..0.5)).collect(), 8000).unwrap();
    let before = enhance_waveform(&params, &cfg.stft, &x, cfg.loss.compression).unwrap();

    let mut scrambled = params.clone();
    for branch in scrambled.weights.branches.iter_mut().skip(1) {
        for conv in branch.skips.iter_mut().chain(branch.deconvs.iter_mut()) {
            for t in [&mut conv.weight, &mut conv.bias] {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-10.0..10.0));
            }
        }
    }
    assert_ne!(scrambled, params);
    let after = enhance_waveform(&scrambled, &cfg.stft, &x, cfg.loss.compression).unwrap();
    let identical = before
        .samples()
        .iter()
        .zip(after.samples())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let elapsed = start.elapsed();
    let pass = identical && elapsed < QUICK_BUDGET;
    report(10, "inference-branch invariance", pass, &format!("{elapsed:.2?}"));
    assert!(pass);
}
