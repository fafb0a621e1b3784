//! The `mtn` command line: train, generate, rank, evaluate, synth.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{parse_modalities, RunConfig};
use crate::data::{
    build_vocab, detokenize, encode_examples, load_dataset, synth_corpus, EncodedExample, FeatureStore,
    ModalitySpec,
};
use crate::engine::{
    decode_examples, rank_candidates, train, write_generations, Checkpoint, Control, GenerationRecord,
};
use crate::error::{MtnError, Result};
use crate::metrics::evaluate;
use crate::model::{MtnModel, Variant};

#[derive(Parser, Debug)]
#[command(name = "mtn", version, about = "Multimodal transformer networks for video-grounded dialogue")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default, Clone)]
pub struct ConfigArgs {
    /// JSON file with dotted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.batch_size=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write checkpoints.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
    },
    /// Decode every example of a dataset to JSON lines.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        greedy: bool,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long, default_value = "generations.jsonl")]
        output: PathBuf,
        /// Also write the gold answers in the same format.
        #[arg(long)]
        refs_out: Option<PathBuf>,
    },
    /// Order each example's candidate answers by model likelihood.
    Rank {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "rankings.jsonl")]
        output: PathBuf,
    },
    /// Score generations against references.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write a synthetic corpus and its feature files.
    Synth {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        dialogues: usize,
        #[arg(long, default_value_t = 4)]
        grammar: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve(args: &ConfigArgs, extra: &[String]) -> Result<RunConfig> {
    let base = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut overrides = args.overrides.clone();
    let quote = |v: &Path| serde_json::to_string(&v.display().to_string()).expect("string");
    if let Some(d) = &args.dataset {
        overrides.push(format!("data.dataset={}", quote(d)));
    }
    if let Some(f) = &args.features {
        overrides.push(format!("data.features={}", quote(f)));
    }
    if let Some(s) = args.seed {
        overrides.push(format!("train.seed={s}"));
    }
    overrides.extend_from_slice(extra);
    base.apply_overrides(&overrides)
}

fn load_features(dir: &Path, modalities: &[ModalitySpec], examples: &[EncodedExample]) -> Result<FeatureStore> {
    FeatureStore::load_dir(dir, modalities, examples.iter().map(|e| e.video_id.as_str()))
}

#[derive(Serialize)]
struct LogHeader<'a> {
    seed: u64,
    config: &'a RunConfig,
}

#[derive(Serialize)]
struct LogStep {
    step: u64,
    lr: f64,
    loss: f64,
    response_loss: f64,
    query_loss: Option<f64>,
}

fn cmd_train(run: &RunConfig) -> Result<()> {
    let dataset = run.require_dataset()?;
    let features_dir = run.require_features()?;
    let modalities = parse_modalities(&run.modalities)?;
    let train_cfg = run.train_config()?;
    run.decode_config()?;

    let raw = load_dataset(dataset, run.max_history)?;
    let vocab = build_vocab(&raw, run.min_freq);
    let train_set = encode_examples(&raw, &vocab);
    let valid_set = match &run.valid_dataset {
        Some(p) => encode_examples(&load_dataset(p, run.max_history)?, &vocab),
        None => Vec::new(),
    };
    let all: Vec<EncodedExample> = train_set.iter().chain(&valid_set).cloned().collect();
    let features = load_features(features_dir, &modalities, &all)?;
    let mut model = MtnModel::<f32>::new(run.model_config(vocab.len())?, run.seed)?;
    log::info!(
        "training {} on {} examples, vocabulary {}, {} parameters",
        run.variant,
        train_set.len(),
        vocab.len(),
        model.param_count()
    );

    let report = train(&mut model, &vocab, &train_set, &valid_set, &features, &train_cfg, |v, _| {
        eprintln!("step {:>6}  validation perplexity {:.4}", v.step, v.perplexity);
        Control::Continue
    })?;
    let dir = &run.checkpoint_dir;
    Checkpoint::new(&model, &vocab, report.last_step(), None).save(&dir.join("final"))?;

    let log_path = dir.join("train_log.jsonl");
    let mut log = std::fs::File::create(&log_path).map_err(|e| MtnError::io(&log_path, e))?;
    let mut lines = vec![serde_json::to_string(&LogHeader {
        seed: run.seed,
        config: run,
    })?];
    for s in &report.steps {
        lines.push(serde_json::to_string(&LogStep {
            step: s.step,
            lr: s.lr,
            loss: s.loss.total,
            response_loss: s.loss.response,
            query_loss: s.loss.query,
        })?);
    }
    writeln!(log, "{}", lines.join("\n")).map_err(|e| MtnError::io(&log_path, e))?;
    if let Some(best) = &report.best {
        println!(
            "trained {} steps; best validation perplexity {:.4} at step {}",
            report.last_step(),
            best.perplexity,
            best.step
        );
    }
    Ok(())
}

struct Inference {
    ckpt: Checkpoint,
    model: MtnModel<f32>,
    raw: Vec<crate::data::DialogueExample>,
    examples: Vec<EncodedExample>,
    features: FeatureStore,
}

fn load_for_inference(run: &RunConfig, checkpoint: &Path) -> Result<Inference> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.model()?;
    let raw = load_dataset(run.require_dataset()?, ckpt.config.max_history)?;
    let examples = encode_examples(&raw, &ckpt.vocab);
    let features = load_features(run.require_features()?, &ckpt.config.modalities, &examples)?;
    Ok(Inference {
        ckpt,
        model,
        raw,
        examples,
        features,
    })
}

fn cmd_generate(
    run: &RunConfig,
    checkpoint: &Path,
    output: &Path,
    refs_out: Option<&Path>,
) -> Result<()> {
    let decode = run.decode_config()?;
    let Inference {
        ckpt,
        model,
        raw,
        examples,
        features,
    } = load_for_inference(run, checkpoint)?;
    let records = decode_examples(&model, &ckpt.vocab, &examples, &features, &decode, run.greedy)?;
    write_generations(output, &records)?;
    if let Some(path) = refs_out {
        let refs: Vec<GenerationRecord> = raw
            .iter()
            .map(|e| GenerationRecord {
                dialogue_id: e.video_id.clone(),
                turn: e.turn,
                response: detokenize(e.answer_tokens()),
            })
            .collect();
        write_generations(path, &refs)?;
    }
    println!("wrote {} responses to {}", records.len(), output.display());
    Ok(())
}

#[derive(Serialize)]
struct RankLine<'a> {
    dialogue_id: &'a str,
    turn: usize,
    ranking: Vec<usize>,
}

fn cmd_rank(run: &RunConfig, checkpoint: &Path, output: &Path) -> Result<()> {
    let Inference {
        model,
        examples,
        features,
        ..
    } = load_for_inference(run, checkpoint)?;
    let mut lines = Vec::with_capacity(examples.len());
    for e in &examples {
        let cands = e.candidates.as_ref().ok_or_else(|| {
            MtnError::Data(format!("{} turn {} has no candidates", e.video_id, e.turn))
        })?;
        let ranking = rank_candidates(&model, e, cands, &features)?;
        lines.push(serde_json::to_string(&RankLine {
            dialogue_id: &e.video_id,
            turn: e.turn,
            ranking,
        })?);
    }
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(output, text).map_err(|e| MtnError::io(output, e))?;
    println!("ranked {} examples into {}", examples.len(), output.display());
    Ok(())
}

fn cmd_evaluate(hyp: &Path, reference: &Path, output: Option<&Path>) -> Result<()> {
    let report = evaluate(hyp, reference)?;
    let json = report.to_json();
    if let Some(path) = output {
        std::fs::write(path, format!("{json}\n")).map_err(|e| MtnError::io(path, e))?;
    }
    println!("{json}");
    Ok(())
}

fn cmd_synth(seed: u64, dialogues: usize, grammar: usize, out: &Path) -> Result<()> {
    if dialogues == 0 {
        return Err(MtnError::config("--dialogues", "must be at least 1"));
    }
    if grammar == 0 {
        return Err(MtnError::config("--grammar", "must be at least 1"));
    }
    let corpus = synth_corpus(seed, dialogues, grammar);
    corpus.write(out)?;
    let mods: Vec<String> = corpus
        .features
        .modalities()
        .iter()
        .map(|m| format!("{}:{}", m.name, m.dim))
        .collect();
    println!(
        "wrote {} dialogues to {} (model.modalities={})",
        dialogues,
        out.display(),
        mods.join(",")
    );
    Ok(())
}

/// Runs one parsed command.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            variant,
            checkpoint_dir,
        } => {
            let mut extra = Vec::new();
            if let Some(v) = variant {
                let parsed = Variant::parse(&v).ok_or_else(|| {
                    MtnError::config("model.variant", format!("unknown variant `{v}`"))
                })?;
                extra.push(format!("model.variant=\"{}\"", parsed.name()));
            }
            if let Some(d) = checkpoint_dir {
                extra.push(format!(
                    "train.checkpoint_dir={}",
                    serde_json::to_string(&d.display().to_string())?
                ));
            }
            cmd_train(&resolve(&config, &extra)?)
        }
        Command::Generate {
            config,
            checkpoint,
            beam,
            greedy,
            max_len,
            output,
            refs_out,
        } => {
            let mut extra = Vec::new();
            if let Some(b) = beam {
                extra.push(format!("decode.beam_size={b}"));
            }
            if greedy {
                extra.push("decode.greedy=true".into());
            }
            if let Some(m) = max_len {
                extra.push(format!("decode.max_len={m}"));
            }
            cmd_generate(&resolve(&config, &extra)?, &checkpoint, &output, refs_out.as_deref())
        }
        Command::Rank {
            config,
            checkpoint,
            output,
        } => cmd_rank(&resolve(&config, &[])?, &checkpoint, &output),
        Command::Evaluate {
            hyp,
            reference,
            output,
        } => cmd_evaluate(&hyp, &reference, output.as_deref()),
        Command::Synth {
            seed,
            dialogues,
            grammar,
            out,
        } => cmd_synth(seed, dialogues, grammar, &out),
    }
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
