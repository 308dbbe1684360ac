use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use atrous_lab::config::RunConfig;
use atrous_lab::data::{generate_samples, read_shard, write_shard, SegSample, SynthConfig};
use atrous_lab::model::{load_checkpoint, save_checkpoint};
use atrous_lab::train::{evaluate, rank_sweep, sweep_csv, train};
use atrous_lab::verify::{run_suite, Suite};
use atrous_lab::{Error, Result};

const THREADS_ENV: &str = "ATROUS_LAB_THREADS";

#[derive(Parser)]
#[command(name = "atrous-lab", version, about = "Atrous low-rank adapters on a frozen mini ViT segmenter")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum Module {
    All,
    Tensor,
    Layers,
    Peft,
    Model,
    Loss,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a shard of synthetic vessel slices.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        /// Slice and model-input size; defaults to the preset's.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
    },
    /// Train adapters and decoder, writing a checkpoint and history.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Training shard; overrides the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Held-out shard, scored after the last epoch.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a shard.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient suite (F64).
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        module: Module,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Parameter counts per component.
    Params {
        /// Run config; the desk default when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// One training run per LoRA rank, as CSV.
    RankSweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "2,4,16,32,64")]
        ranks: Vec<usize>,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Writes to stdout; a closed pipe downstream is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn print_json<S: Serialize>(v: &S) -> Result<()> {
    emit(&(serde_json::to_string_pretty(v)? + "\n"))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_set(path: Option<&Path>) -> Result<Option<Vec<SegSample>>> {
    match path {
        None => Ok(None),
        Some(p) => {
            let (index, samples) = read_shard(p)?;
            log::info!("loaded {} samples from {}", index.count, p.display());
            Ok(Some(samples))
        }
    }
}

fn training_sets(
    cfg: &RunConfig,
    data: Option<PathBuf>,
    eval_data: Option<PathBuf>,
) -> Result<(Vec<SegSample>, Option<Vec<SegSample>>)> {
    let data = data.or_else(|| cfg.data.train.clone());
    let Some(train_set) = load_set(data.as_deref())? else {
        return Err(Error::Validation("no training shard: pass --data or set data.train".into()));
    };
    let eval_set = load_set(eval_data.or_else(|| cfg.data.eval.clone()).as_deref())?;
    Ok((train_set, eval_set))
}

#[derive(Serialize)]
struct GenSummary<'a> {
    out: &'a Path,
    count: usize,
    size: usize,
    seed: u64,
    config_hash: String,
}

#[derive(Serialize)]
struct TrainSummary {
    epochs: usize,
    final_loss: Option<f64>,
    final_dsc: Option<f64>,
    final_eval_dsc: Option<f64>,
    checkpoint: PathBuf,
    history: PathBuf,
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::GenData {
            out,
            count,
            size,
            seed,
            preset,
        } => {
            let mut cfg = match preset {
                Preset::Desk => SynthConfig::desk(),
                Preset::Paper => SynthConfig::paper(),
            };
            if let Some(s) = size {
                cfg.size = s;
                cfg.target = s;
            }
            cfg.seed = seed;
            cfg.validate()?;
            let samples = generate_samples(&cfg, count)?;
            let index = write_shard(&out, &cfg, &samples)?;
            print_json(&GenSummary {
                out: &out,
                count: index.count,
                size: cfg.target,
                seed,
                config_hash: index.config_hash,
            })?;
        }
        Cmd::Train {
            config,
            data,
            eval_data,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let (train_set, eval_set) = training_sets(&cfg, data, eval_data)?;
            let outcome = train(&cfg, &train_set, eval_set.as_deref())?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            save_checkpoint(&outcome.model, &cfg, &out)?;
            let history = out.join("history.json");
            write_file(&history, &serde_json::to_string_pretty(&outcome.history)?)?;
            let last = outcome.history.epochs.last();
            print_json(&TrainSummary {
                epochs: outcome.history.epochs.len(),
                final_loss: last.map(|e| e.loss),
                final_dsc: last.map(|e| e.dsc),
                final_eval_dsc: last.and_then(|e| e.eval_dsc),
                checkpoint: out,
                history,
            })?;
        }
        Cmd::Eval { checkpoint, data, out } => {
            let (manifest, model) = load_checkpoint::<f32>(&checkpoint)?;
            let (_, samples) = read_shard(&data)?;
            let t = &manifest.config.train;
            let report = evaluate(&model, &samples, t.threshold, t.hd_spacing, t.batch_size)?;
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(p) = out {
                write_file(&p, &text)?;
            }
            emit(&(text + "\n"))?;
        }
        Cmd::Gradcheck { module, tol } => {
            let suite = match module {
                Module::All => Suite::All,
                Module::Tensor => Suite::Tensor,
                Module::Layers => Suite::Layers,
                Module::Peft => Suite::Peft,
                Module::Model => Suite::Model,
                Module::Loss => Suite::Loss,
            };
            let report = run_suite(suite, tol)?;
            print_json(&report)?;
            for c in report.checks.iter().filter(|c| !c.report.pass) {
                log::error!("{} failed: max relative error {:.3e}", c.name, c.report.max_rel_err);
            }
            if !report.pass {
                return Ok(ExitCode::from(2));
            }
        }
        Cmd::Params { config } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            let model = cfg.build_model::<f32>()?;
            print_json(&model.count_by_component())?;
        }
        Cmd::RankSweep {
            config,
            data,
            eval_data,
            ranks,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let (train_set, eval_set) = training_sets(&cfg, data, eval_data)?;
            let rows = rank_sweep(&cfg, &ranks, &train_set, eval_set.as_deref())?;
            let csv = sweep_csv(&rows);
            match out {
                Some(p) => write_file(&p, &csv)?,
                None => emit(&csv)?,
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Validation(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::State(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match init_threads().and_then(|_| run(cli.cmd)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
