//! `labelfusion` command-line front end.
//!
//! Exit codes: 0 success, 1 configuration or model-format error, 2 data
//! error, 3 provider error, 4 stale cache. Every failure prints one line
//! starting with `error[<kind>]:` to stderr.

mod config;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use labelfusion::{
    evaluate, fit, predict, read_csv, read_csv_texts, write_prediction_csv, Error, ErrorCategory, FusionModel, Result,
    ResultsManager, RunContext,
};

use crate::config::CliConfig;

#[derive(Parser)]
#[command(
    name = "labelfusion",
    version,
    about = "Fuse LLM per-class scores with a trainable text encoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// YAML config file
    #[arg(short, long)]
    config: Option<PathBuf>,

    /// Override a config key after parsing, e.g. `--set fusion.epochs=5`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a fusion model on `paths.train_csv` and save it to `paths.model_out`
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,

        /// Seed for initialization and shuffling; overrides the config
        #[arg(long)]
        seed: Option<u64>,
    },

    /// Predict labels for a CSV file or for texts given on the command line
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,

        /// Model file (default: `paths.model_out` from the config)
        #[arg(short, long)]
        model: Option<PathBuf>,

        /// CSV file with a text column
        #[arg(short, long, conflicts_with = "texts")]
        input: Option<PathBuf>,

        /// Where to write the predictions CSV (default: stdout)
        #[arg(short, long, requires = "input")]
        output: Option<PathBuf>,

        /// Name of the text column (default: config `text_column`, else `text`)
        #[arg(long)]
        text_column: Option<String>,

        /// Texts to classify; prints one JSON array of labels per text
        texts: Vec<String>,
    },

    /// Score a model on a labeled CSV and record the run
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,

        /// Model file (default: `paths.model_out` from the config)
        #[arg(short, long)]
        model: Option<PathBuf>,

        /// Labeled CSV (default: `paths.eval_csv` from the config)
        #[arg(short, long)]
        data: Option<PathBuf>,

        /// Run directory root (default: `paths.runs_dir`, else `runs`)
        #[arg(long)]
        runs_dir: Option<PathBuf>,

        /// Name of the text column (default: config `text_column`, else `text`)
        #[arg(long)]
        text_column: Option<String>,
    },

    /// Tabulate config fields and headline metrics of finalized runs
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,

        /// Run directory root (default: `paths.runs_dir`, else `runs`)
        #[arg(long)]
        runs_dir: Option<PathBuf>,

        #[arg(required = true, value_name = "RUN_ID")]
        run_ids: Vec<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("error[usage]: {first} (see --help)");
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = match e.category() {
                ErrorCategory::Config => ("config", 1),
                ErrorCategory::Data => ("data", 2),
                ErrorCategory::Provider => ("provider", 3),
                ErrorCategory::StaleCache => ("stale-cache", 4),
            };
            eprintln!("error[{kind}]: {}", e.to_string().replace('\n', " "));
            ExitCode::from(code)
        }
    }
}

fn load_optional(args: &ConfigArgs, seed: Option<u64>) -> Result<Option<CliConfig>> {
    match &args.config {
        Some(path) => config::load(path, &args.overrides, seed).map(Some),
        None if args.overrides.is_empty() => Ok(None),
        None => Err(Error::Config("--set needs --config".into())),
    }
}

fn pick(flag: Option<PathBuf>, from_config: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or(from_config)
        .ok_or_else(|| Error::Config(format!("no {what} given (flag or config paths)")))
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(io_err(dir)),
        _ => Ok(()),
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { cfg, seed } => {
            let path = cfg
                .config
                .as_deref()
                .ok_or_else(|| Error::Config("train needs --config".into()))?;
            let c = config::load(path, &cfg.overrides, seed)?;
            let model_out = pick(None, c.paths.model_out.clone(), "paths.model_out")?;
            let train_csv = pick(None, c.paths.train_csv.clone(), "paths.train_csv")?;
            let schema = c.fusion.validate()?;
            let ds = read_csv(&train_csv, &c.text_column, &schema, c.fusion.mode())?;
            let ctx = RunContext::with_runs(c.paths.runs_dir.clone().unwrap_or_else(|| PathBuf::from("runs")));
            let fitted = fit(&ds, &c.fusion, &ctx)?;
            create_parent(&model_out)?;
            fitted.model.save(&model_out)?;
            log::info!(
                "model written to {}; {} provider call(s)",
                model_out.display(),
                ctx.counter.get()
            );
            println!("{}", fitted.record.run_id);
            Ok(())
        }
        Command::Predict {
            cfg,
            model,
            input,
            output,
            text_column,
            texts,
        } => {
            let c = load_optional(&cfg, None)?;
            let model_path = pick(model, c.as_ref().and_then(|c| c.paths.model_out.clone()), "--model")?;
            let model = FusionModel::load(&model_path)?;
            let cache = model.open_cache()?;
            let ctx = RunContext::new();
            match input {
                Some(input) => {
                    let column = text_column
                        .or(c.map(|c| c.text_column))
                        .unwrap_or_else(|| "text".into());
                    let texts = read_csv_texts(&input, &column)?;
                    let preds = if texts.is_empty() {
                        Vec::new()
                    } else {
                        predict(&model, &texts, cache.as_ref(), &ctx)?
                    };
                    let labels = model.schema();
                    match output {
                        Some(out) => {
                            create_parent(&out)?;
                            let file = fs::File::create(&out).map_err(io_err(&out))?;
                            let mut w = io::BufWriter::new(file);
                            write_prediction_csv(&mut w, labels, &texts, &preds)?;
                            w.flush().map_err(io_err(&out))
                        }
                        None => write_prediction_csv(io::stdout().lock(), labels, &texts, &preds),
                    }
                }
                None if texts.is_empty() => Err(Error::Config("predict needs --input or texts".into())),
                None => {
                    let preds = predict(&model, &texts, cache.as_ref(), &ctx)?;
                    let mut out = io::stdout().lock();
                    for p in &preds {
                        let names: Vec<&str> = p
                            .decided
                            .active()
                            .map(|i| model.schema().labels()[i].as_str())
                            .collect();
                        let line = serde_json::to_string(&names).expect("strings serialize");
                        writeln!(out, "{line}").map_err(io_err(Path::new("<stdout>")))?;
                    }
                    Ok(())
                }
            }
        }
        Command::Evaluate {
            cfg,
            model,
            data,
            runs_dir,
            text_column,
        } => {
            let c = load_optional(&cfg, None)?;
            let paths = c.as_ref().map(|c| c.paths.clone()).unwrap_or_default();
            let model_path = pick(model, paths.model_out, "--model")?;
            let data = pick(data, paths.eval_csv, "--data")?;
            let runs_dir = runs_dir.or(paths.runs_dir).unwrap_or_else(|| PathBuf::from("runs"));
            let column = text_column
                .or(c.map(|c| c.text_column))
                .unwrap_or_else(|| "text".into());
            let model = FusionModel::load(&model_path)?;
            let ds = read_csv(&data, &column, model.schema(), model.mode())?;
            let cache = model.open_cache()?;
            let eval = evaluate(&model, &ds, cache.as_ref(), &RunContext::with_runs(runs_dir))?;
            let r = &eval.report;
            let kind = serde_json::to_value(r.accuracy_kind).expect("enum serializes");
            println!("run_id: {}", eval.record.run_id);
            println!("accuracy: {:.4} ({})", r.accuracy, kind.as_str().unwrap_or_default());
            println!("macro_f1: {:.4}", r.f1);
            Ok(())
        }
        Command::Compare { cfg, runs_dir, run_ids } => {
            let c = load_optional(&cfg, None)?;
            let root = runs_dir
                .or(c.and_then(|c| c.paths.runs_dir))
                .unwrap_or_else(|| PathBuf::from("runs"));
            let ids: Vec<&str> = run_ids.iter().map(String::as_str).collect();
            let table = ResultsManager::new(root).compare(&ids)?;
            print!("{table}");
            Ok(())
        }
    }
}
