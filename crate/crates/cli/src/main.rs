//! `mixse`: corpus synthesis, training presets, enhancement, evaluation and
//! the gradient check.
//!
//! Exit codes: 0 on success, 1 for bad arguments or configuration, 2 for
//! failures while running.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mixse::autodiff::gradcheck::Coverage;
use mixse::datagen::manifest::{write_synthetic_corpus, CorpusCounts};
use mixse::datagen::DataConfig;
use mixse::dsp::wav::{read_wav, write_wav, SampleFormat};
use mixse::metrics::{self, MetricReport};
use mixse::model::checkpoint::Checkpoint;
use mixse::model::enhance_waveform;
use mixse::trainer::gradcheck::{gradient_suite, SuiteShape};
use mixse::trainer::{train, ExperimentConfig, Preset};

const OUT_ROOT_VAR: &str = "MIXSE_OUT";

#[derive(Parser)]
#[command(name = "mixse", version, about = "Mixture-invariant speech enhancement at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic WAV clips and a manifest.
    SynthData {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        speech: usize,
        #[arg(long, default_value_t = 16)]
        noisy: usize,
        #[arg(long, default_value_t = 16)]
        noise: usize,
        #[arg(long)]
        clip_seconds: Option<f64>,
        #[arg(long)]
        sample_rate: Option<u32>,
    },
    /// Train a model and write logs and checkpoints.
    Train {
        /// One of exp1..exp9.
        #[arg(long)]
        preset: Option<String>,
        /// TOML or JSON experiment configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// `section.key=value` settings applied last.
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Enhance WAV files with the speech branch of a checkpoint.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Score estimates against references.
    Evaluate {
        /// Reference WAV, or a directory of them.
        #[arg(long, requires = "estimate", conflicts_with = "pairs")]
        reference: Option<PathBuf>,
        /// Estimate WAV, or a directory with the same file names.
        #[arg(long, requires = "reference")]
        estimate: Option<PathBuf>,
        /// JSON list of {"reference": .., "estimate": ..} objects.
        #[arg(long, required_unless_present = "reference")]
        pairs: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every objective on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `all`, or the number of entries checked per parameter tensor.
        #[arg(long, default_value = "all")]
        coverage: String,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<mixse::Error> for Failure {
    fn from(e: mixse::Error) -> Self {
        Self {
            code: if e.is_config() { 1 } else { 2 },
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::runtime(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn out_dir(explicit: Option<PathBuf>, default_leaf: &str) -> PathBuf {
    explicit.unwrap_or_else(|| {
        std::env::var_os(OUT_ROOT_VAR)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(default_leaf)
    })
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::SynthData {
            out,
            seed,
            speech,
            noisy,
            noise,
            clip_seconds,
            sample_rate,
        } => {
            let mut cfg = DataConfig::default();
            if let Some(s) = clip_seconds {
                cfg.clip_seconds = s;
            }
            if let Some(r) = sample_rate {
                cfg.sample_rate = r;
            }
            cfg.validate()?;
            let dir = out_dir(out, "data");
            let counts = CorpusCounts {
                speech,
                noisy_speech: noisy,
                noise,
            };
            let manifest = write_synthetic_corpus(&dir, counts, &cfg, seed)?;
            println!(
                "wrote {} clips and {}",
                manifest.entries.len(),
                dir.join("manifest.json").display()
            );
            Ok(())
        }
        Command::Train {
            preset,
            config,
            seed,
            out,
            overrides,
        } => {
            let preset = preset.map(|p| p.parse::<Preset>()).transpose()?;
            let cfg = build_config(config.as_deref(), preset, &overrides, seed)?;
            let name = cfg.train.preset.map_or("custom", Preset::name);
            let dir = out_dir(out, &format!("{name}_seed{}", cfg.train.seed));
            std::fs::create_dir_all(&dir)?;
            let echo = dir.join("config.json");
            std::fs::write(&echo, serde_json::to_string_pretty(&cfg).map_err(json_failure)?)?;
            eprintln!("effective config written to {}", echo.display());
            let outcome = train(&cfg, Some(&dir))?;
            let last = outcome.steps.last().map(|s| s.loss.total);
            println!(
                "{}",
                serde_json::json!({
                    "out": dir,
                    "steps": outcome.steps.len(),
                    "final_loss": last,
                    "best_epoch": outcome.best_epoch,
                    "best_score": outcome.best_score,
                })
            );
            Ok(())
        }
        Command::Enhance {
            checkpoint,
            out,
            inputs,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let dir = out_dir(out, "enhanced");
            std::fs::create_dir_all(&dir)?;
            for input in &inputs {
                let w = read_wav(input, Some(ckpt.sample_rate))?;
                let enhanced = enhance_waveform(&ckpt.params, &ckpt.stft, &w, ckpt.compression)?;
                let name = input
                    .file_name()
                    .ok_or_else(|| Failure::config(format!("{} is not a file", input.display())))?;
                let target = dir.join(name);
                write_wav(&target, &enhanced, SampleFormat::Float32)?;
                println!("{}", target.display());
            }
            Ok(())
        }
        Command::Evaluate {
            reference,
            estimate,
            pairs,
            out,
        } => {
            let pairs = match (reference, estimate, pairs) {
                (Some(r), Some(e), None) => pair_paths(&r, &e)?,
                (None, None, Some(p)) => load_pairs(&p)?,
                _ => return Err(Failure::config("give --reference/--estimate or --pairs")),
            };
            evaluate_pairs(&pairs, &out_dir(out, "eval"))
        }
        Command::Gradcheck {
            seed,
            coverage,
            tolerance,
        } => {
            let coverage = match coverage.as_str() {
                "all" => Coverage::All,
                n => Coverage::Strided(n.parse().map_err(|_| {
                    Failure::config(format!("--coverage must be `all` or a count, got {n:?}"))
                })?),
            };
            let results = gradient_suite(SuiteShape::default(), seed, coverage)?;
            let mut worst: f64 = 0.0;
            for r in &results {
                println!(
                    "{:<16} loss {:>12.6e}  max relative error {:.3e}  ({} entries)",
                    r.objective, r.loss, r.report.max_relative_error, r.report.entries_checked
                );
                worst = worst.max(r.report.max_relative_error);
            }
            println!("max relative error: {worst:.6e}");
            if worst < tolerance {
                Ok(())
            } else {
                Err(Failure::runtime(format!(
                    "max relative error {worst:.3e} exceeds {tolerance:.1e}"
                )))
            }
        }
    }
}

fn json_failure(e: serde_json::Error) -> Failure {
    Failure::runtime(e.to_string())
}

/// Defaults, then the file, then the preset, then `--seed` and overrides.
fn build_config(
    file: Option<&Path>,
    preset: Option<Preset>,
    overrides: &[String],
    seed: Option<u64>,
) -> CliResult<ExperimentConfig> {
    let mut cfg = match file {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(p) = preset {
        p.apply(&mut cfg);
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let cfg = apply_overrides(cfg, overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

/// Values are read as TOML (`0.5`, `"white"`, `[0, 10]`); `none` clears an
/// optional field. Unknown keys are rejected.
fn apply_overrides(cfg: ExperimentConfig, overrides: &[String]) -> CliResult<ExperimentConfig> {
    if overrides.is_empty() {
        return Ok(cfg);
    }
    let mut tree = serde_json::to_value(&cfg).map_err(json_failure)?;
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Failure::config(format!("override {item:?} is not key=value")))?;
        let (section, field) = key
            .trim()
            .split_once('.')
            .ok_or_else(|| Failure::config(format!("override key {key:?} is not section.key")))?;
        let value = parse_value(raw.trim())?;
        let table = tree
            .get_mut(section)
            .and_then(|s| s.as_object_mut())
            .ok_or_else(|| Failure::config(format!("unknown config section {section:?}")))?;
        table.insert(field.to_string(), value);
    }
    serde_json::from_value(tree).map_err(|e| Failure::config(format!("override: {e}")))
}

fn parse_value(raw: &str) -> CliResult<serde_json::Value> {
    if raw == "none" {
        return Ok(serde_json::Value::Null);
    }
    let doc: toml::Table = toml::from_str(&format!("v = {raw}"))
        .or_else(|_| toml::from_str(&format!("v = {}", toml::Value::String(raw.into()))))
        .map_err(|e| Failure::config(format!("value {raw:?}: {e}")))?;
    serde_json::to_value(&doc["v"]).map_err(|e| Failure::config(e.to_string()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Pair {
    reference: PathBuf,
    estimate: PathBuf,
}

fn pair_paths(reference: &Path, estimate: &Path) -> CliResult<Vec<Pair>> {
    if !reference.is_dir() {
        return Ok(vec![Pair {
            reference: reference.into(),
            estimate: estimate.into(),
        }]);
    }
    let mut names: Vec<_> = std::fs::read_dir(reference)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Failure::config(format!("no WAV files in {}", reference.display())));
    }
    Ok(names
        .into_iter()
        .map(|r| Pair {
            estimate: estimate.join(r.file_name().expect("listed files have names")),
            reference: r,
        })
        .collect())
}

fn load_pairs(path: &Path) -> CliResult<Vec<Pair>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let mut pairs: Vec<Pair> = serde_json::from_str(&text)
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    for p in &mut pairs {
        for f in [&mut p.reference, &mut p.estimate] {
            if f.is_relative() {
                *f = base.join(&*f);
            }
        }
    }
    Ok(pairs)
}

#[derive(Serialize)]
struct UtteranceRecord<'a> {
    reference: &'a Path,
    estimate: &'a Path,
    #[serde(flatten)]
    metrics: MetricReport,
}

#[derive(Serialize)]
struct SummaryRow {
    utterances: usize,
    sisdr: f64,
    cd: f64,
    selection_score: f64,
}

fn evaluate_pairs(pairs: &[Pair], dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)?;
    let mut lines = String::new();
    let mut reports = Vec::with_capacity(pairs.len());
    for p in pairs {
        let r = read_wav(&p.reference, None)?;
        let e = read_wav(&p.estimate, Some(r.sample_rate()))?;
        let report = metrics::evaluate(&r, &e, None)?;
        let record = UtteranceRecord {
            reference: &p.reference,
            estimate: &p.estimate,
            metrics: report,
        };
        lines.push_str(&serde_json::to_string(&record).map_err(json_failure)?);
        lines.push('\n');
        reports.push(report);
    }
    std::fs::write(dir.join("metrics.jsonl"), lines)?;
    let mean = MetricReport::mean(&reports)?;
    let row = SummaryRow {
        utterances: reports.len(),
        sisdr: mean.sisdr,
        cd: mean.cd,
        selection_score: mean.selection_score,
    };
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))
        .map_err(|e| Failure::runtime(e.to_string()))?;
    w.serialize(&row)
        .and_then(|_| w.flush().map_err(Into::into))
        .map_err(|e| Failure::runtime(e.to_string()))?;
    println!(
        "{} utterances: siSDR {:.2} dB, CD {:.3} dB, score {:.3}",
        row.utterances, row.sisdr, row.cd, row.selection_score
    );
    Ok(())
}
