//! Operator entry points: preprocess raw annotations into the canonical
//! JSONL, train either model, evaluate, predict, trace the reverse chain,
//! and compare reports. Errors exit nonzero with one structured JSON line
//! on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spandiff::baseline::SeqLabModel;
use spandiff::config::{EncoderKind, TrainConfig};
use spandiff::corpus::{
    dataset_stats, load_dataset, AnnotatedExample, Vocabularies,
};
use spandiff::evaluation::{compare, score, EvalMode, EvalReport};
use spandiff::inference::{self, Prediction};
use spandiff::schedule::{build_schedule, make_ddim_plan};
use spandiff::syntanet::SyntaNet;
use spandiff::training::{fit, TrainState};

mod manifest;
mod predfile;
mod preprocess;

#[derive(Parser)]
#[command(
    name = "spandiff",
    about = "Aspect-term extraction and sentiment classification via span diffusion",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON config file; missing keys fall back to defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the encoder: "toy" or "pretrained:<sidecar path>".
    #[arg(long)]
    encoder: Option<String>,
}

impl ConfigArgs {
    /// Precedence: CLI flag > SPANDIFF_* env var > config file > default.
    fn resolve(&self) -> Result<TrainConfig> {
        let base = match &self.config {
            Some(path) => TrainConfig::from_file(path)?,
            None => TrainConfig::default(),
        };
        let mut cfg = base.apply_env(std::env::vars())?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(encoder) = &self.encoder {
            cfg.encoder = encoder.parse::<EncoderKind>()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Merge raw sentences with offline POS/dependency annotations into the
    /// canonical JSONL and write the vocabulary sidecar.
    Preprocess {
        /// Raw split: JSONL of {"tokens": [...], "aspects": [[s,e,polarity]...]}.
        #[arg(long)]
        raw: PathBuf,
        /// Annotations: JSONL of {"pos": [...], "deps": [[head,dep,label]...]},
        /// aligned line by line with the raw split.
        #[arg(long)]
        annotations: PathBuf,
        /// Output path for the canonical JSONL.
        #[arg(long)]
        out: PathBuf,
        /// Vocabulary sidecar path (default: <out>.vocab.json).
        #[arg(long)]
        vocab_out: Option<PathBuf>,
    },
    /// Train the diffusion model; writes checkpoint, metrics log, resumable
    /// state, and a run manifest into --out-dir.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
        /// Continue from a saved training state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the BIO sequence-labeling baseline.
    TrainBaseline {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long, default_value = "run-baseline")]
        out_dir: PathBuf,
    },
    /// Score a checkpoint on a dataset, or score an existing prediction file.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Canonical JSONL to evaluate on (with --checkpoint).
        #[arg(long, requires = "checkpoint")]
        data: Option<PathBuf>,
        /// Prediction JSONL carrying both "pred" and "gold" per line.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Write the AE and AESC reports as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the decode threshold.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Run a checkpoint over a dataset and write the prediction JSONL.
    Predict {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Show how the decoded spans evolve across the reverse chain.
    Trace {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Whitespace-tokenized sentence (annotations fall back to unknowns).
        #[arg(long, conflicts_with = "input")]
        sentence: Option<String>,
        /// Or: canonical JSONL plus a 0-based line index.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Write the step table as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Relative-improvement table between two eval reports.
    Compare {
        /// Subject report (JSON written by `eval --out`).
        #[arg(long)]
        report: PathBuf,
        /// Baseline report.
        #[arg(long)]
        baseline: PathBuf,
        /// Which mode's report to compare.
        #[arg(long, default_value = "AESC")]
        mode: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let structured = serde_json::json!({ "error": format!("{err:#}") });
            eprintln!("{structured}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Preprocess {
            raw,
            annotations,
            out,
            vocab_out,
        } => preprocess::run(&raw, &annotations, &out, vocab_out.as_deref()),
        Command::Train {
            config,
            train,
            dev,
            out_dir,
            resume,
        } => cmd_train(config, &train, dev.as_deref(), &out_dir, resume.as_deref()),
        Command::TrainBaseline {
            config,
            train,
            dev,
            out_dir,
        } => cmd_train_baseline(config, &train, dev.as_deref(), &out_dir),
        Command::Eval {
            config,
            checkpoint,
            data,
            predictions,
            out,
            threshold,
        } => cmd_eval(
            config,
            checkpoint.as_deref(),
            data.as_deref(),
            predictions.as_deref(),
            out.as_deref(),
            threshold,
        ),
        Command::Predict {
            config,
            checkpoint,
            input,
            out,
            threshold,
        } => cmd_predict(config, &checkpoint, &input, &out, threshold),
        Command::Trace {
            config,
            checkpoint,
            sentence,
            input,
            index,
            out,
        } => cmd_trace(
            config,
            &checkpoint,
            sentence.as_deref(),
            input.as_deref(),
            index,
            out.as_deref(),
        ),
        Command::Compare {
            report,
            baseline,
            mode,
            out,
        } => cmd_compare(&report, &baseline, &mode, out.as_deref()),
    }
}

fn load_split(path: &Path, vocabs: Option<Vocabularies>) -> Result<(Vec<AnnotatedExample>, Vocabularies)> {
    let (examples, vocabs) =
        load_dataset(path, vocabs).with_context(|| format!("loading {}", path.display()))?;
    let stats = dataset_stats(&examples);
    println!(
        "{}: {} sentences, {} targets",
        path.display(),
        stats.sentences,
        stats.targets
    );
    Ok((examples, vocabs))
}

fn cmd_train(
    config_args: ConfigArgs,
    train_path: &Path,
    dev_path: Option<&Path>,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    let config = config_args.resolve()?;
    let (train_set, vocabs) = load_split(train_path, None)?;
    let dev_set = match dev_path {
        Some(p) => load_split(p, Some(vocabs.clone()))?.0,
        None => Vec::new(),
    };
    let resume_state = match resume {
        Some(p) => Some(TrainState::load(p)?),
        None => None,
    };

    std::fs::create_dir_all(out_dir)?;
    let outcome = fit(&config, &train_set, &dev_set, &vocabs, resume_state)?;

    let checkpoint_path = out_dir.join("checkpoint.json");
    outcome.model.save(&checkpoint_path)?;
    let state_path = out_dir.join("state.json");
    outcome.final_state.save(&state_path)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = String::new();
    for row in &outcome.metrics {
        metrics.push_str(&serde_json::to_string(row)?);
        metrics.push('\n');
    }
    std::fs::write(&metrics_path, metrics)?;

    let mut datasets = vec![("train", train_path)];
    if let Some(dev) = dev_path {
        datasets.push(("dev", dev));
    }
    let manifest = manifest::RunManifest::collect(
        &config,
        &datasets,
        &checkpoint_path,
        &metrics_path,
        outcome.best_dev_f1,
    )?;
    manifest.save(&out_dir.join("manifest.json"))?;

    println!(
        "trained {} parameters; best dev AESC micro-F1 {:.4}",
        outcome.model.param_count(),
        outcome.best_dev_f1
    );
    println!("checkpoint: {}", checkpoint_path.display());
    Ok(())
}

fn cmd_train_baseline(
    config_args: ConfigArgs,
    train_path: &Path,
    dev_path: Option<&Path>,
    out_dir: &Path,
) -> Result<()> {
    let config = config_args.resolve()?;
    let (train_set, vocabs) = load_split(train_path, None)?;
    let dev_set = match dev_path {
        Some(p) => load_split(p, Some(vocabs.clone()))?.0,
        None => Vec::new(),
    };
    std::fs::create_dir_all(out_dir)?;
    let (model, best_f1) = spandiff::baseline::train_seqlab(&config, &train_set, &dev_set, &vocabs)?;
    let checkpoint_path = out_dir.join("checkpoint.json");
    model.save(&checkpoint_path)?;
    let manifest = manifest::RunManifest::collect(
        &config,
        &[("train", train_path)],
        &checkpoint_path,
        &checkpoint_path,
        best_f1,
    )?;
    manifest.save(&out_dir.join("manifest.json"))?;
    println!("baseline best dev AESC micro-F1 {best_f1:.4}");
    println!("checkpoint: {}", checkpoint_path.display());
    Ok(())
}

/// Either model behind one prediction interface.
enum AnyModel {
    Diffusion(Box<SyntaNet>),
    Baseline(Box<SeqLabModel>),
}

fn load_any_model(path: &Path) -> Result<AnyModel> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading checkpoint {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    match value.get("model_type").and_then(|v| v.as_str()) {
        Some("spandiff") => Ok(AnyModel::Diffusion(Box::new(SyntaNet::load(path)?))),
        Some("seqlab") => Ok(AnyModel::Baseline(Box::new(SeqLabModel::load(path)?))),
        other => bail!(
            "{} holds an unsupported model type {other:?}",
            path.display()
        ),
    }
}

impl AnyModel {
    fn vocabs(&self) -> &Vocabularies {
        match self {
            AnyModel::Diffusion(m) => &m.vocabs,
            AnyModel::Baseline(m) => &m.vocabs,
        }
    }

    fn config(&self) -> &TrainConfig {
        match self {
            AnyModel::Diffusion(m) => &m.config,
            AnyModel::Baseline(m) => &m.config,
        }
    }

    fn predict_all(
        &self,
        examples: &[AnnotatedExample],
        threshold: f64,
        seed: u64,
    ) -> Result<Vec<Vec<Prediction>>> {
        let mut out = Vec::with_capacity(examples.len());
        match self {
            AnyModel::Diffusion(m) => {
                let sched = build_schedule(m.config.t_total, m.config.schedule()?)?;
                let plan = make_ddim_plan(m.config.t_total, m.config.gamma)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for ex in examples {
                    out.push(inference::sample(
                        m.as_ref(),
                        ex,
                        &sched,
                        &plan,
                        threshold,
                        &mut rng,
                    )?);
                }
            }
            AnyModel::Baseline(m) => {
                for ex in examples {
                    out.push(
                        m.predict(ex)?
                            .into_iter()
                            .filter(|p| p.score > threshold)
                            .collect(),
                    );
                }
            }
        }
        Ok(out)
    }
}

fn render_reports(preds: &[Vec<Prediction>], golds: &[Vec<spandiff::corpus::AspectAnnotation>]) -> Result<(EvalReport, EvalReport)> {
    let ae = score(preds, golds, EvalMode::Ae)?;
    let aesc = score(preds, golds, EvalMode::Aesc)?;
    print!("{}", ae.render());
    print!("{}", aesc.render());
    Ok((ae, aesc))
}

fn cmd_eval(
    config_args: ConfigArgs,
    checkpoint: Option<&Path>,
    data: Option<&Path>,
    predictions: Option<&Path>,
    out: Option<&Path>,
    threshold: Option<f64>,
) -> Result<()> {
    let (preds, golds) = match (checkpoint, predictions) {
        (Some(ckpt), None) => {
            let data = data.context("--data is required with --checkpoint")?;
            let model = load_any_model(ckpt)?;
            let (examples, _) = load_split(data, Some(model.vocabs().clone()))?;
            let cli = config_args.resolve()?;
            let threshold = threshold.unwrap_or(model.config().threshold);
            let preds = model.predict_all(&examples, threshold, cli.seed)?;
            let golds = examples.iter().map(|e| e.gold.clone()).collect();
            (preds, golds)
        }
        (None, Some(pred_path)) => predfile::load(pred_path)?,
        _ => bail!("provide either --checkpoint with --data, or --predictions"),
    };
    let (ae, aesc) = render_reports(&preds, &golds)?;
    if let Some(out) = out {
        let json = serde_json::json!({ "ae": ae, "aesc": aesc });
        std::fs::write(out, serde_json::to_string_pretty(&json)?)?;
        println!("report: {}", out.display());
    }
    Ok(())
}

fn cmd_predict(
    config_args: ConfigArgs,
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    threshold: Option<f64>,
) -> Result<()> {
    let model = load_any_model(checkpoint)?;
    let (examples, _) = load_split(input, Some(model.vocabs().clone()))?;
    let cli = config_args.resolve()?;
    let threshold = threshold.unwrap_or(model.config().threshold);
    let preds = model.predict_all(&examples, threshold, cli.seed)?;
    predfile::save(out, &examples, &preds)?;
    println!("predictions: {}", out.display());
    Ok(())
}

fn cmd_trace(
    config_args: ConfigArgs,
    checkpoint: &Path,
    sentence: Option<&str>,
    input: Option<&Path>,
    index: usize,
    out: Option<&Path>,
) -> Result<()> {
    let model = match load_any_model(checkpoint)? {
        AnyModel::Diffusion(m) => m,
        AnyModel::Baseline(_) => bail!("trace requires a diffusion checkpoint"),
    };
    let example = match (sentence, input) {
        (Some(text), None) => {
            let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
            if tokens.is_empty() {
                bail!("empty sentence");
            }
            let n = tokens.len();
            AnnotatedExample {
                tokens,
                pos_ids: vec![model.vocabs.pos_unknown_id(); n],
                edges: Vec::new(),
                gold: Vec::new(),
            }
        }
        (None, Some(path)) => {
            let (examples, _) = load_dataset(path, Some(model.vocabs.clone()))?;
            examples
                .into_iter()
                .nth(index)
                .with_context(|| format!("{} has no line {index}", path.display()))?
        }
        _ => bail!("provide either --sentence or --input"),
    };

    let cli = config_args.resolve()?;
    let sched = build_schedule(model.config.t_total, model.config.schedule()?)?;
    let plan = make_ddim_plan(model.config.t_total, model.config.gamma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    let steps = inference::trace_denoising(
        model.as_ref(),
        &example,
        &sched,
        &plan,
        model.config.threshold,
        &mut rng,
    )?;

    println!("sentence: {}", example.tokens.join(" "));
    println!("{:<6} {:>5} {:>6}  {:<30} decoded", "step", "t", "t_prev", "slot spans");
    for s in &steps {
        let spans = s
            .slot_spans
            .iter()
            .map(|(a, b)| format!("({a},{b})"))
            .collect::<Vec<_>>()
            .join(" ");
        let decoded = s
            .decoded
            .iter()
            .map(|p| format!("({},{},{},{:.2})", p.start, p.end, p.polarity, p.score))
            .collect::<Vec<_>>()
            .join(" ");
        println!("{:<6} {:>5} {:>6}  {:<30} {}", s.step, s.t, s.t_prev, spans, decoded);
    }
    if let Some(out) = out {
        std::fs::write(out, serde_json::to_string_pretty(&steps)?)?;
        println!("trace: {}", out.display());
    }
    Ok(())
}

fn cmd_compare(report: &Path, baseline: &Path, mode: &str, out: Option<&Path>) -> Result<()> {
    let pick = |path: &Path| -> Result<EvalReport> {
        let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let key = match mode.to_ascii_uppercase().as_str() {
            "AE" => "ae",
            "AESC" => "aesc",
            other => bail!("unknown mode {other:?}; expected AE or AESC"),
        };
        let section = value
            .get(key)
            .with_context(|| format!("{} has no {key:?} section", path.display()))?;
        Ok(serde_json::from_value(section.clone())?)
    };
    let subject = pick(report)?;
    let base = pick(baseline)?;
    let table = compare(&subject, &base);
    print!("{}", table.render());
    if let Some(out) = out {
        std::fs::write(out, serde_json::to_string_pretty(&table)?)?;
    }
    Ok(())
}
