use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use xkt_core::config::RunConfig;
use xkt_core::data::synth::generate;
use xkt_core::data::{ingest_csv, preprocess, write_csv};
use xkt_core::eval::write_predictions;
use xkt_core::experiment::{evaluate, gradcheck, load_dataset, predict, split_dataset, train_model};
use xkt_core::model::Checkpoint;
use xkt_core::train::TrainStatus;
use xkt_core::{KtError, Result};

/// Knowledge tracing with DKT2 and a DKT baseline.
#[derive(Parser)]
#[command(name = "xkt", version)]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` (and `synth.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `paths.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Preprocess an interaction CSV into a dataset file.
    Prep {
        /// Overrides `paths.raw`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Generate synthetic students.
    Synth,
    /// Train on one cross-validation fold.
    Train,
    /// Evaluate a checkpoint on the held-out fold.
    Eval {
        /// Directory for per-prediction CSV files.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Knowledge states for the histories in an interaction CSV.
    Predict {
        #[arg(long)]
        input: PathBuf,
    },
    /// Finite-difference check of the model gradients on a micro-batch.
    Gradcheck,
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    config_hash: &'a str,
    seed: u64,
    #[serde(flatten)]
    body: &'a T,
}

fn json_error(context: &str) -> impl Fn(serde_json::Error) -> KtError + '_ {
    move |source| KtError::Json {
        context: context.into(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, cfg: &RunConfig, body: &T) -> Result<()> {
    let stamped = Stamped {
        config_hash: &cfg.hash(),
        seed: cfg.seed,
        body,
    };
    let text = serde_json::to_string_pretty(&stamped).map_err(json_error("serializing output"))?;
    fs::write(path, text + "\n").map_err(|e| KtError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| KtError::io(path, e))
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    let dir = cfg.paths.out.as_path();
    fs::create_dir_all(dir).map_err(|e| KtError::io(dir, e))?;
    Ok(dir)
}

fn set_threads() -> Result<()> {
    let threads = match std::env::var("XKT_THREADS") {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| KtError::Config {
            field: "XKT_THREADS".into(),
            msg: format!("`{v}` is not a thread count"),
        })?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| KtError::contract(format!("thread pool: {e}")))
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.synth.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.out = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    set_threads()?;
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Prep { input } => {
            if let Some(input) = input {
                cfg.paths.raw = Some(input);
            }
            let raw_path = cfg.paths.raw.clone().ok_or_else(|| KtError::Config {
                field: "paths.raw".into(),
                msg: "no input CSV given".into(),
            })?;
            let ds = preprocess(&ingest_csv(&raw_path)?)?;
            let dir = out_dir(&cfg)?;
            write_json(&dir.join("dataset.json"), &cfg, &ds)?;
            write_json(&dir.join("stats.json"), &cfg, &ds.stats)?;
            let s = ds.stats;
            println!(
                "{} students, {} questions, {} concepts, {} interactions",
                s.students, s.questions, s.concepts, s.interactions
            );
        }
        Command::Synth => {
            let (raw, truth) = generate(&cfg.synth)?;
            let dir = out_dir(&cfg)?;
            let csv_path = dir.join("interactions.csv");
            write_csv(&raw, create(&csv_path)?)?;
            write_json(&dir.join("ground_truth.json"), &cfg, &truth)?;
            println!(
                "{} students, {} interactions -> {}",
                raw.students.len(),
                raw.num_interactions(),
                csv_path.display()
            );
        }
        Command::Train => {
            let ds = load_dataset(&cfg)?;
            let splits = split_dataset(&cfg, &ds)?;
            let dir = out_dir(&cfg)?.to_path_buf();
            let log_path = dir.join("epochs.jsonl");
            let mut log = create(&log_path)?;
            let hash = cfg.hash();
            let mut log_err = None;
            let (model, report) = train_model(&cfg, &ds.vocab, &splits, |r| {
                let line = Stamped {
                    config_hash: &hash,
                    seed: cfg.seed,
                    body: r,
                };
                let auc = r.val.as_ref().and_then(|m| m.auc);
                eprintln!("epoch {:>3}  loss {:.5}  val auc {}", r.epoch, r.train_loss, fmt_auc(auc));
                let res = serde_json::to_string(&line)
                    .map_err(json_error("serializing epoch"))
                    .and_then(|s| writeln!(log, "{s}").map_err(|e| KtError::io(&log_path, e)));
                if let Err(e) = res {
                    log_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = log_err {
                return Err(e);
            }
            log.flush().map_err(|e| KtError::io(&log_path, e))?;
            let ckpt_path = cfg.checkpoint_path();
            Checkpoint::new(&model, hash, cfg.seed, Some(ds.vocab.clone())).save(&ckpt_path)?;
            write_json(&dir.join("train_report.json"), &cfg, &report)?;
            println!(
                "best epoch {:?}, val auc {} -> {}",
                report.best_epoch,
                fmt_auc(report.best_val_auc),
                ckpt_path.display()
            );
            if let TrainStatus::Aborted { reason } = &report.status {
                eprintln!("training aborted: {reason}");
                return Ok(ExitCode::from(2));
            }
        }
        Command::Eval { dump } => {
            let ckpt = Checkpoint::load(&cfg.checkpoint_path())?;
            let model = ckpt.to_model()?;
            let ds = load_dataset(&cfg)?;
            if ckpt.vocab.as_ref().is_some_and(|v| *v != ds.vocab) {
                return Err(KtError::contract("checkpoint vocabulary does not match the dataset"));
            }
            let splits = split_dataset(&cfg, &ds)?;
            let (report, runs) = evaluate(&cfg, &model, &ds.vocab, &splits)?;
            let dir = out_dir(&cfg)?;
            let text = serde_json::to_string_pretty(&report).map_err(json_error("serializing metrics"))?;
            let path = dir.join("metrics.json");
            fs::write(&path, text + "\n").map_err(|e| KtError::io(&path, e))?;
            if let Some(dump) = dump {
                fs::create_dir_all(&dump).map_err(|e| KtError::io(&dump, e))?;
                for run in &runs {
                    let p = dump.join(format!("{}.csv", run.file_stem()));
                    write_predictions(&run.predictions, create(&p)?)?;
                }
            }
            for r in &report.results {
                let (auc, acc, rmse, n) = match &r.metrics {
                    Some(m) => (fmt_auc(m.auc), format!("{:.4}", m.acc), format!("{:.4}", m.rmse), m.n_predictions),
                    None => ("-".into(), "-".into(), "-".into(), 0),
                };
                let horizon = r.horizon.map(|n| format!(" N={n}")).unwrap_or_default();
                println!(
                    "{:<24} L={:<4} auc {auc:<8} acc {acc:<8} rmse {rmse:<8} n {n}",
                    format!("{}{horizon}", r.protocol),
                    r.history
                );
            }
        }
        Command::Predict { input } => {
            let ckpt = Checkpoint::load(&cfg.checkpoint_path())?;
            let vocab = ckpt
                .vocab
                .clone()
                .ok_or_else(|| KtError::contract("checkpoint carries no vocabulary"))?;
            let model = ckpt.to_model()?;
            let states = predict(&model, &vocab, &ingest_csv(&input)?, cfg.history_len)?;
            #[derive(Serialize)]
            struct Knowledge<'a> {
                concepts: &'a [Vec<u64>],
                students: &'a [xkt_core::experiment::StudentKnowledge],
            }
            let path = out_dir(&cfg)?.join("knowledge.json");
            write_json(
                &path,
                &cfg,
                &Knowledge {
                    concepts: &vocab.concepts,
                    students: &states,
                },
            )?;
            println!("{} students -> {}", states.len(), path.display());
        }
        Command::Gradcheck => {
            let out = gradcheck(&cfg)?;
            println!(
                "max rel err {:.3e} at {} over {} scalars (threshold {:.0e}): {}",
                out.max_rel_err,
                out.worst.as_deref().unwrap_or("-"),
                out.checked,
                out.threshold,
                if out.passed { "pass" } else { "FAIL" }
            );
            println!(
                "rounding floor {:.1e}; max rel err above it {:.3e}",
                out.rounding_floor, out.max_rel_err_above_floor
            );
            if !out.passed {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn fmt_auc(auc: Option<f64>) -> String {
    auc.map_or_else(|| "undefined".into(), |a| format!("{a:.4}"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
