//! Command-line front end for the experiment runner.
//!
//! Exit codes: 0 on success, 2 on a usage error, 1 on a runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use imbser::data::{generate_synthetic, SyntheticSpec};
use imbser::ensemble::VoteMode;
use imbser::experiment::{
    ensemble_files, eval_member, train_member, write_ensemble, ExperimentConfig, ExperimentData, ModelSpec,
    PREDICTIONS_FILE,
};
use imbser::metrics::{read_pairs, BleuSmoothing, TextMetricReport, Tokenizer};

#[derive(Parser)]
#[command(name = "imbser", version, about = "Imbalanced multimodal classification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus: feature files plus one manifest per split and audio source.
    GenData {
        /// TOML file with generator fields; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the spec file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train experiment members; writes `<out>/<tag>/` for each.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Member tag; repeatable. All members when omitted.
        #[arg(long = "model")]
        models: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-evaluate saved checkpoints on the dev split and rewrite their predictions.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "model")]
        models: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Majority-vote prediction files and print the comparison table.
    Ensemble {
        /// Prediction files; with `--config` instead, every member's file under the output directory.
        files: Vec<PathBuf>,
        #[arg(long, conflicts_with = "files")]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Mode::Hard)]
        mode: Mode,
    },
    /// WER, BLEU and GLEU over a JSONL file of {id, reference, hypothesis} records.
    TextMetrics {
        pairs: PathBuf,
        /// Keep case and punctuation.
        #[arg(long)]
        raw: bool,
        #[arg(long, value_enum, default_value_t = Smoothing::AddOne)]
        smoothing: Smoothing,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Hard,
    Soft,
}

#[derive(Clone, Copy, ValueEnum)]
enum Smoothing {
    AddOne,
    None,
}

enum Failure {
    Usage(String),
    Runtime(imbser::Error),
}

impl From<imbser::Error> for Failure {
    fn from(e: imbser::Error) -> Self {
        Failure::Runtime(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::GenData { spec, out, seed } => gen_data(spec.as_deref(), &out, seed),
        Command::Train {
            config,
            models,
            seed,
            out,
        } => {
            let (cfg, out) = experiment(&config, seed, out)?;
            let data = ExperimentData::load(&cfg)?;
            for m in members(&cfg, &models)? {
                let run = train_member(m, &data, Some(&out))?;
                println!(
                    "{:<28} best epoch {:>3}  {}",
                    run.tag, run.report.best_epoch, run.report.best_dev
                );
            }
            Ok(())
        }
        Command::Eval {
            config,
            models,
            seed,
            out,
        } => {
            let (cfg, out) = experiment(&config, seed, out)?;
            let data = ExperimentData::load(&cfg)?;
            for m in members(&cfg, &models)? {
                match eval_member(m, &data, &out)? {
                    (_, Some(metrics)) => println!("{:<28} {metrics}", m.tag),
                    (records, None) => println!("{:<28} {} unlabelled predictions", m.tag, records.len()),
                }
            }
            Ok(())
        }
        Command::Ensemble {
            files,
            config,
            out,
            mode,
        } => {
            let mode = match mode {
                Mode::Hard => VoteMode::Hard,
                Mode::Soft => VoteMode::Soft,
            };
            let (files, out) = match config {
                Some(c) => {
                    let (cfg, out) = experiment(&c, None, out)?;
                    let files = cfg.models.iter().map(|m| out.join(&m.tag).join(PREDICTIONS_FILE)).collect();
                    (files, Some(out))
                }
                None if files.is_empty() => {
                    return Err(Failure::Usage("give prediction files or --config".into()));
                }
                None => (files, out),
            };
            let (report, results) = ensemble_files(&files, mode, None)?;
            if let Some(o) = &out {
                write_ensemble(o, &report, &results)?;
            }
            print!("{report}");
            Ok(())
        }
        Command::TextMetrics {
            pairs,
            raw,
            smoothing,
            out,
        } => {
            let tokenizer = if raw {
                Tokenizer {
                    lowercase: false,
                    strip_punctuation: false,
                }
            } else {
                Tokenizer::default()
            };
            let smoothing = match smoothing {
                Smoothing::AddOne => BleuSmoothing::AddOne,
                Smoothing::None => BleuSmoothing::None,
            };
            let report = TextMetricReport::compute(&read_pairs(&pairs)?, tokenizer, smoothing)?;
            if let Some(o) = out {
                std::fs::write(&o, report.to_string()).map_err(|e| imbser::Error::Io { path: o, source: e })?;
            }
            print!("{report}");
            Ok(())
        }
    }
}

fn gen_data(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> CmdResult {
    let mut spec = match spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => imbser::Error::MissingFile(p.to_path_buf()),
                _ => imbser::Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                },
            })?;
            toml::from_str::<SyntheticSpec>(&text)
                .map_err(|e| imbser::Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let corpus = generate_synthetic(&spec, out)?;
    print!("{}", corpus.dataset);
    for ((split, source), path) in &corpus.manifests {
        println!("{split:<5} {source:<10} {}", path.display());
    }
    Ok(())
}

fn experiment(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<(ExperimentConfig, PathBuf), Failure> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    let out = out
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| Failure::Usage("no output directory: pass --out or set `out` in the config".into()))?;
    Ok((cfg, out))
}

fn members<'a>(cfg: &'a ExperimentConfig, tags: &[String]) -> Result<Vec<&'a ModelSpec>, Failure> {
    if tags.is_empty() {
        return Ok(cfg.models.iter().collect());
    }
    tags.iter()
        .map(|t| {
            cfg.model(t).ok_or_else(|| {
                let known: Vec<&str> = cfg.models.iter().map(|m| m.tag.as_str()).collect();
                Failure::Usage(format!("unknown model tag {t:?}; known: {}", known.join(", ")))
            })
        })
        .collect()
}
