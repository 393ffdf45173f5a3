use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use leakdistill::amr::{delinearize, linearize, LinearizedGraph};
use leakdistill::config::{Regime, TrainConfig};
use leakdistill::corpus::{generate, parse_jsonl, read_jsonl, split_dev, write_jsonl, CorpusRecord};
use leakdistill::grammar::GrammarSpec;
use leakdistill::model::{Checkpoint, DecodeOptions, Example, LeakMode};
use leakdistill::smatch::{report, score_pairs, DEFAULT_RESTARTS};
use leakdistill::training::{decode_all, grad_check_losses, write_metrics, Trainer};
use leakdistill::wag::WagVariant;
use leakdistill::{Error, Result};
use leakdistill::nn::GradCheckOptions;

/// Graph parsing with structural leakage and self-distillation.
#[derive(Parser)]
#[command(name = "leakdistill", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic sentence/graph/alignment corpus.
    GenerateCorpus {
        /// Grammar JSON; the built-in grammar when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// Overrides the grammar's seed.
        #[arg(long, env = "LEAKDISTILL_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one regime and write a checkpoint directory.
    Train {
        #[arg(long)]
        regime: Regime,
        #[arg(long)]
        corpus: PathBuf,
        /// Training config JSON; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Leakage-model checkpoint (kd only).
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long, env = "LEAKDISTILL_SEED")]
        seed: Option<u64>,
        /// Overrides the config epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from the state saved in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Decode a corpus and score it with SMATCH.
    Evaluate {
        /// Checkpoint to decode with; omit when `--predictions` is given.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        /// Score the graphs of this JSONL corpus instead of decoding.
        #[arg(long, conflicts_with = "model")]
        predictions: Option<PathBuf>,
        /// Only the dev tail of the corpus, as split during training.
        #[arg(long)]
        dev_only: bool,
        #[arg(long, default_value_t = 4)]
        beam: usize,
        #[arg(long)]
        length_norm: bool,
        /// Leak gold WAGs into the encoder while decoding.
        #[arg(long)]
        leak: bool,
        #[arg(long, default_value = "full")]
        variant: WagVariant,
        #[arg(long, default_value_t = DEFAULT_RESTARTS)]
        restarts: usize,
        #[arg(long, default_value_t = 200)]
        bucket_size: usize,
        #[arg(long, env = "LEAKDISTILL_SEED", default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write decoded linearizations here, one per line.
        #[arg(long)]
        write_predictions: Option<PathBuf>,
    },
    /// Parse one whitespace-tokenized sentence.
    Parse {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        sentence: String,
        #[arg(long, default_value_t = 4)]
        beam: usize,
    },
    /// Finite-difference check of every training loss.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 6)]
        coords: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Dump the word-aligned graph of one record.
    Wag {
        /// A JSON record (the first line is used for JSONL files).
        #[arg(long)]
        record: PathBuf,
        #[arg(long, default_value = "full")]
        variant: WagVariant,
    },
    /// Print the default training config.
    DefaultConfig,
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateCorpus { spec, n, seed, out } => {
            let mut spec = match spec {
                Some(p) => GrammarSpec::load(&p)?,
                None => GrammarSpec::default_spec(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let recs = generate(&spec, n)?;
            write_jsonl(&out, &recs)?;
            println!("wrote {} records to {}", recs.len(), out.display());
        }
        Command::Train {
            regime,
            corpus,
            config,
            out,
            teacher,
            seed,
            epochs,
            resume,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let records = read_jsonl(&corpus)?;
            let teacher = teacher.map(|t| Checkpoint::load(&t)).transpose()?;
            let mut trainer = Trainer::new(regime, &records, cfg, teacher.as_ref())?;
            if resume {
                trainer.restore_state(&out)?;
            }
            while !trainer.is_finished() {
                let m = trainer.run_epoch()?;
                println!("{}", serde_json::to_string(&m)?);
                trainer.best_checkpoint()?.save(&out)?;
                write_metrics(&out.join("metrics.jsonl"), &trainer.state.history)?;
                trainer.save_state(&out)?;
            }
            let ck = trainer.best_checkpoint()?;
            ck.save(&out)?;
            write_metrics(&out.join("metrics.jsonl"), &trainer.state.history)?;
            println!(
                "best dev smatch {:.4} at epoch {}",
                ck.meta.dev_smatch.unwrap_or(0.0),
                ck.meta.epoch.unwrap_or(0)
            );
        }
        Command::Evaluate {
            model,
            corpus,
            predictions,
            dev_only,
            beam,
            length_norm,
            leak,
            variant,
            restarts,
            bucket_size,
            seed,
            report: report_path,
            write_predictions,
        } => {
            let mut gold = read_jsonl(&corpus)?;
            let ck = model.map(|m| Checkpoint::load(&m)).transpose()?;
            if dev_only {
                let frac = ck.as_ref().and_then(|c| c.meta.train.as_ref()).map_or(0.1, |t| t.dev_fraction);
                gold = split_dev(&gold, frac).1;
            }
            let preds = match (&ck, predictions) {
                (_, Some(p)) => {
                    let pr = read_jsonl(&p)?;
                    if pr.len() != gold.len() {
                        return Err(Error::Input(format!(
                            "{} predictions for {} gold records",
                            pr.len(),
                            gold.len()
                        )));
                    }
                    pr.into_iter().map(|r| r.graph).collect()
                }
                (Some(ck), None) => {
                    let examples = gold
                        .iter()
                        .map(|r| Example::from_record(r, &ck.vocab, leak.then_some(variant)))
                        .collect::<Result<Vec<_>>>()?;
                    let mode = if leak { LeakMode::Leak } else { LeakMode::Off };
                    let opts = DecodeOptions {
                        beam,
                        length_norm,
                        ..Default::default()
                    };
                    decode_all(&ck.model, &ck.vocab, &examples, mode, &opts)?
                }
                (None, None) => return Err(Error::Config("evaluate needs --model or --predictions".into())),
            };
            if let Some(p) = write_predictions {
                let mut text = String::new();
                for g in &preds {
                    let line = linearize(g).map(|l| l.to_string()).unwrap_or_default();
                    text.push_str(&line);
                    text.push('\n');
                }
                write_text(&p, &text)?;
            }
            let pairs: Vec<_> = preds
                .into_iter()
                .zip(&gold)
                .map(|(p, g)| (p, g.graph.clone(), g.sentence.len()))
                .collect();
            let rep = report(&score_pairs(&pairs, restarts, seed), bucket_size);
            let json = serde_json::to_string_pretty(&rep)? + "\n";
            match report_path {
                Some(p) => {
                    write_text(&p, &json)?;
                    println!(
                        "smatch f1 {:.4} (P {:.4} R {:.4}), unlabeled {:.4}, {} graphs",
                        rep.corpus_f1,
                        rep.precision,
                        rep.recall,
                        rep.unlabeled_f1,
                        gold.len()
                    );
                }
                None => print!("{json}"),
            }
        }
        Command::Parse { model, sentence, beam } => {
            let ck = Checkpoint::load(&model)?;
            let words: Vec<String> = sentence.split_whitespace().map(str::to_string).collect();
            if words.is_empty() {
                return Err(Error::Input("empty sentence".into()));
            }
            let ex = Example::from_sentence("input", &words, &ck.vocab);
            let h = ck.model.decode_example(
                &ex,
                LeakMode::Off,
                &DecodeOptions {
                    beam,
                    ..Default::default()
                },
            )?;
            let lin = LinearizedGraph {
                tokens: ck.vocab.decode(&h.tokens),
            };
            let (graph, repair) = delinearize(&lin);
            println!("{lin}");
            print!("{}", graph.pretty());
            for a in &repair.actions {
                eprintln!("repair: {a}");
            }
        }
        Command::GradCheck {
            config,
            step,
            coords,
            tolerance,
        } => {
            let cfg = load_config(config.as_deref())?;
            let opts = GradCheckOptions {
                step,
                coords_per_param: coords,
                seed: cfg.seed,
            };
            let checks = grad_check_losses(&cfg, &opts)?;
            let mut worst: f64 = 0.0;
            for c in &checks {
                println!(
                    "{:<14} max_rel_error {:.3e}  coords {}  loss {:.6}",
                    c.loss, c.max_rel_error, c.checked, c.value
                );
                worst = worst.max(c.max_rel_error);
            }
            if worst >= tolerance {
                return Err(Error::Numeric(format!("max relative error {worst:.3e} >= {tolerance:e}")));
            }
        }
        Command::Wag { record, variant } => {
            let text = std::fs::read_to_string(&record).map_err(|e| Error::io(&record, e))?;
            let rec: CorpusRecord = match parse_jsonl(&text) {
                Ok(mut v) if !v.is_empty() => v.swap_remove(0),
                _ => serde_json::from_str(&text)?,
            };
            rec.check()?;
            let wag = rec.wag(variant)?;
            println!("{}", serde_json::to_string_pretty(&wag)?);
        }
        Command::DefaultConfig => println!("{}", TrainConfig::default().to_json()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::from(2)
        }
    }
}
