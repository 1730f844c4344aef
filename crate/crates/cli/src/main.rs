//! `declutr` command-line entry point.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use declutr_core::config::{Profile, RunConfig};
use declutr_core::corpus::{build_vocab, detokenize, ingest_documents, Vocab};
use declutr_core::encoder::load_checkpoint;
use declutr_core::evalkit::{
    aggregate_downstream, aggregate_probing, embed_with_checkpoint, knn_retrieval, load_reports, read_embedded_pairs,
    read_embedding_tsv, read_labels, read_text_pairs, sts_evaluate, write_embedding_tsv,
};
use declutr_core::rng::derive_stream;
use declutr_core::sampler::{classify_view, SpanSampler};
use declutr_core::synthetic::{generate, write_jsonl, SyntheticSpec};
use declutr_core::trainer::{Objective, Trainer};
use declutr_core::{Error, ErrorClass, Result};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "declutr", version, about = "Span-contrastive sentence embeddings", arg_required_else_help = true)]
struct Cli {
    /// Seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Omit wall-clock fields so outputs are byte-identical across runs.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Base profile: paper-defaults or desk-scale.
    #[arg(long)]
    profile: Option<Profile>,
    /// JSON file overriding profile fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the effective configuration as JSON and exit.
    #[arg(long)]
    dump_config: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        match &self.config {
            Some(path) => RunConfig::load(self.profile, path),
            None => Ok(RunConfig::profile(self.profile.unwrap_or_default())),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a frequency-ranked vocabulary from a JSONL corpus.
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        min_freq: usize,
        #[arg(long, default_value_t = 30_000)]
        max_size: usize,
    },
    /// Train an encoder.
    Train {
        #[arg(long, required_unless_present = "dump_config")]
        corpus: Option<PathBuf>,
        #[arg(long, required_unless_present = "dump_config")]
        vocab: Option<PathBuf>,
        #[arg(long, required_unless_present = "dump_config")]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        objective: Option<Objective>,
        #[arg(long)]
        total_steps: Option<u64>,
        /// Continue from a checkpoint written by a previous run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Print sampled anchor/positive pairs as JSONL.
    Sample {
        #[arg(long, required_unless_present = "dump_config")]
        corpus: Option<PathBuf>,
        #[arg(long, required_unless_present = "dump_config")]
        vocab: Option<PathBuf>,
        #[arg(short = 'n', long = "num", default_value_t = 10)]
        n: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Embed one text per input line.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        normalize: bool,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        /// Truncation length; defaults to the encoder's position count.
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Spearman correlation of cosine similarity against gold scores.
    EvalSts {
        /// Lines of `gold<TAB>v1,v2,..<TAB>w1,w2,..`.
        #[arg(long, conflicts_with = "pairs")]
        emb_pairs: Option<PathBuf>,
        /// Lines of `text1<TAB>text2<TAB>gold`; needs --checkpoint and --vocab.
        #[arg(long, requires_all = ["checkpoint", "vocab"])]
        pairs: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value = "STS")]
        name: String,
        /// Also write the task report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Nearest-neighbor precision@1 over an embedding file.
    EvalRetrieval {
        #[arg(long)]
        emb: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Average task reports, or probing accuracies.
    EvalAggregate {
        /// JSON list of task reports.
        #[arg(long, required_unless_present = "probing", conflicts_with = "probing")]
        reports: Option<PathBuf>,
        /// JSON list of probing accuracies.
        #[arg(long)]
        probing: Option<PathBuf>,
        /// Report names left out of the average.
        #[arg(long, num_args = 0.., default_values_t = ["SNLI".to_string()])]
        exclude: Vec<String>,
    },
    /// Write the k-topic synthetic corpus as JSONL.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        topics: usize,
        #[arg(long, default_value_t = 256)]
        docs: usize,
        #[arg(long, default_value_t = 512)]
        doc_tokens: usize,
        #[arg(long, default_value_t = 64)]
        pool_size: usize,
        /// Also write one topic label per document.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_USAGE);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => EXIT_USAGE,
                ErrorClass::Data => EXIT_DATA,
                ErrorClass::Numeric => EXIT_NUMERIC,
            })
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("DECLUTR_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::InvalidArgument(format!("DECLUTR_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Writes one line to stdout; a closed pipe is not an error.
fn print_stdout(line: &str) -> Result<()> {
    let mut out = io::stdout().lock();
    match writeln!(out, "{line}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(Error::io(Path::new("<stdout>"), e)),
        _ => Ok(()),
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::BuildVocab {
            corpus,
            out,
            min_freq,
            max_size,
        } => {
            let vocab = build_vocab(&corpus, min_freq, max_size)?;
            vocab.save(&out)?;
            eprintln!("{} tokens (including specials) -> {}", vocab.len(), out.display());
            Ok(())
        }
        Command::Train {
            corpus,
            vocab,
            out,
            cfg,
            objective,
            total_steps,
            resume,
        } => {
            let mut run_cfg = cfg.resolve()?;
            if let Some(s) = seed {
                run_cfg.train.seed = s;
            }
            if let Some(o) = objective {
                run_cfg.train.objective = o;
            }
            if total_steps.is_some() {
                run_cfg.train.total_steps = total_steps;
            }
            run_cfg.train.deterministic |= cli.deterministic;
            run_cfg.validate()?;
            if cfg.dump_config {
                print_stdout(&run_cfg.to_json_pretty())?;
                return Ok(());
            }
            let (corpus, vocab_path, out) = (corpus.expect("clap"), vocab.expect("clap"), out.expect("clap"));
            let vocab = Vocab::load(&vocab_path)?;
            run_cfg.encoder.vocab_size = vocab.len();
            let store = ingest_documents(&corpus, &vocab, run_cfg.sampler.min_doc_tokens())?;
            let resume = resume.map(|p| load_checkpoint(&p)).transpose()?;
            let trainer = Trainer {
                store: &store,
                vocab_fingerprint: vocab.fingerprint(),
                sampler: run_cfg.sampler.clone(),
                encoder: run_cfg.encoder.clone(),
                train: run_cfg.train.clone(),
            };
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let config_path = out.join("config.json");
            fs::write(&config_path, run_cfg.to_json_pretty() + "\n").map_err(|e| Error::io(&config_path, e))?;
            let outcome = trainer.run(&out, resume)?;
            eprintln!(
                "{} of {} steps; checkpoint {}; metrics {}",
                outcome.steps,
                outcome.total_steps,
                outcome.final_checkpoint.display(),
                outcome.metrics_path.display()
            );
            Ok(())
        }
        Command::Sample { corpus, vocab, n, cfg } => {
            let run_cfg = cfg.resolve()?;
            if cfg.dump_config {
                print_stdout(&run_cfg.to_json_pretty())?;
                return Ok(());
            }
            let vocab = Vocab::load(&vocab.expect("clap"))?;
            let sampler = SpanSampler::new(run_cfg.sampler.clone())?;
            let store = ingest_documents(&corpus.expect("clap"), &vocab, run_cfg.sampler.min_doc_tokens())?;
            let docs: Vec<_> = store.iter().filter(|d| sampler.check_eligible(d).is_ok()).collect();
            if docs.is_empty() && n > 0 {
                return Err(Error::NoEligibleDocuments {
                    required: run_cfg.sampler.min_doc_tokens(),
                });
            }
            let seed = seed.unwrap_or(run_cfg.train.seed);
            let stdout = io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            let mut emitted = 0;
            'rounds: for round in 0u64.. {
                for doc in &docs {
                    let mut rng = derive_stream(seed, "sample", round, &doc.id);
                    let anchors = sampler.sample_anchors(&mut rng, doc)?;
                    for anchor in &anchors.spans {
                        for positive in sampler.sample_positives(&mut rng, doc, anchor) {
                            if emitted == n {
                                break 'rounds;
                            }
                            let record = json!({
                                "view": classify_view(anchor, &positive).as_str(),
                                "anchor": detokenize(anchor.tokens(doc), &vocab)?,
                                "positive": detokenize(positive.tokens(doc), &vocab)?,
                                "docId": doc.id,
                            });
                            if let Err(e) = writeln!(w, "{record}") {
                                if e.kind() == io::ErrorKind::BrokenPipe {
                                    return Ok(());
                                }
                                return Err(Error::io(Path::new("<stdout>"), e));
                            }
                            emitted += 1;
                        }
                    }
                }
                if n == 0 {
                    break;
                }
            }
            match w.flush() {
                Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(Error::io(Path::new("<stdout>"), e)),
                _ => Ok(()),
            }
        }
        Command::Embed {
            checkpoint,
            vocab,
            input,
            out,
            normalize,
            batch_size,
            max_len,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let vocab = Vocab::load(&vocab)?;
            let texts = read_lines(&input)?;
            let max_len = max_len.unwrap_or(ckpt.params.config.max_positions);
            let emb = embed_with_checkpoint(&ckpt, &vocab, &texts, batch_size, max_len, normalize)?;
            if !emb.flagged.is_empty() {
                eprintln!("warning: {} empty line(s) written as NaN rows", emb.flagged.len());
            }
            let mut w = create(&out)?;
            write_embedding_tsv(&emb.rows, &mut w)
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&out, e))
        }
        Command::EvalSts {
            emb_pairs,
            pairs,
            checkpoint,
            vocab,
            name,
            report,
        } => {
            let (gold, left, right) = match (emb_pairs, pairs) {
                (Some(path), None) => {
                    let rows = read_embedded_pairs(&path)?;
                    let gold = rows.iter().map(|p| p.gold).collect::<Vec<_>>();
                    let left = rows.iter().map(|p| p.left.clone()).collect::<Vec<_>>();
                    let right = rows.into_iter().map(|p| p.right).collect::<Vec<_>>();
                    (gold, left, right)
                }
                (None, Some(path)) => {
                    let ckpt = load_checkpoint(&checkpoint.expect("clap"))?;
                    let vocab = Vocab::load(&vocab.expect("clap"))?;
                    let rows = read_text_pairs(&path)?;
                    let max_len = ckpt.params.config.max_positions;
                    let a: Vec<String> = rows.iter().map(|r| r.0.clone()).collect();
                    let b: Vec<String> = rows.iter().map(|r| r.1.clone()).collect();
                    let ea = embed_with_checkpoint(&ckpt, &vocab, &a, 32, max_len, false)?;
                    let eb = embed_with_checkpoint(&ckpt, &vocab, &b, 32, max_len, false)?;
                    let gold = rows.iter().map(|r| r.2).collect();
                    (
                        gold,
                        ea.rows.rows().into_iter().map(|r| r.to_owned()).collect(),
                        eb.rows.rows().into_iter().map(|r| r.to_owned()).collect(),
                    )
                }
                _ => return Err(Error::InvalidArgument("pass exactly one of --emb-pairs or --pairs".into())),
            };
            let views: Vec<_> = left.iter().zip(&right).map(|(a, b)| (a.view(), b.view())).collect();
            let task = sts_evaluate(&name, &views, &gold)?;
            print_stdout(&format!("{:.6}", task.payload.score() / 100.0))?;
            if let Some(path) = report {
                let text = serde_json::to_string_pretty(&task).expect("report serializes");
                fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
            }
            Ok(())
        }
        Command::EvalRetrieval { emb, labels } => {
            let rows = read_embedding_tsv(&emb)?;
            let labels = read_labels(&labels)?;
            print_stdout(&format!("{:.6}", knn_retrieval(&rows, &labels)?))?;
            Ok(())
        }
        Command::EvalAggregate {
            reports,
            probing,
            exclude,
        } => {
            let score = match (reports, probing) {
                (Some(path), None) => {
                    let reports = load_reports(&path)?;
                    let excluded: Vec<&str> = exclude.iter().map(String::as_str).collect();
                    aggregate_downstream(&reports, &excluded)?
                }
                (None, Some(path)) => {
                    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    let values: Vec<f64> = serde_json::from_str(&text).map_err(|e| Error::MalformedRecord {
                        path: path.clone(),
                        line: e.line(),
                        reason: e.to_string(),
                    })?;
                    aggregate_probing(&values)?
                }
                _ => unreachable!("clap enforces exactly one source"),
            };
            print_stdout(&format!("{score:.2}"))?;
            Ok(())
        }
        Command::GenSynthetic {
            out,
            topics,
            docs,
            doc_tokens,
            pool_size,
            labels,
        } => {
            let spec = SyntheticSpec {
                topics,
                docs,
                doc_tokens,
                pool_size,
                seed: seed.unwrap_or(0),
                ..SyntheticSpec::default()
            };
            let corpus = generate(&spec)?;
            write_jsonl(&corpus, &out)?;
            if let Some(path) = labels {
                let mut w = create(&path)?;
                for d in &corpus {
                    writeln!(w, "{}", d.topic).map_err(|e| Error::io(&path, e))?;
                }
                w.flush().map_err(|e| Error::io(&path, e))?;
            }
            Ok(())
        }
    }
}
