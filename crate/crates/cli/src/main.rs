//! `vqattn`: self-checks, benchmarks, toy training and sampling.

use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use vqattn::attention::HeadKind;
use vqattn::bench::{fit_slopes, run_bench_with, write_csv, AttnKind, BenchConfig, Precision};
use vqattn::checkpoint::Checkpoint;
use vqattn::config::TrainConfig;
use vqattn::corpus::{load_corpus, window_batches, Split};
use vqattn::linear::Reduction;
use vqattn::model::Model;
use vqattn::sampler::generate;
use vqattn::train::{evaluate, TrainState};
use vqattn::verify::{run_verify_with, VerifyOptions, CHECKS};

const METRICS_HEADER: &str = "window,loss,ce,commit,utilization,grad_norm,lr";

#[derive(Parser)]
#[command(name = "vqattn", version, about = "Vector-quantized attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the invariant and equivalence suite.
    Verify(VerifyArgs),
    /// Time full and VQ attention over sequence lengths.
    Bench(BenchArgs),
    /// Train a byte-level model from a config file.
    Train(TrainArgs),
    /// Sample bytes from a checkpoint.
    Sample(SampleArgs),
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip the training and timing checks.
    #[arg(long)]
    fast: bool,
    /// Corrupt the named check to exercise the harness.
    #[arg(long, value_name = "CHECK")]
    inject_fault: Option<String>,
    /// List check names and exit.
    #[arg(long)]
    list: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [1024usize, 2048, 4096, 8192, 16384])]
    lengths: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "shga")]
    heads: Vec<HeadKind>,
    #[arg(long, value_delimiter = ',', default_value = "full,vq")]
    kinds: Vec<AttnKind>,
    #[arg(long, value_delimiter = ',', default_value = "serial")]
    reductions: Vec<Reduction>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    /// Time forward plus backward.
    #[arg(long)]
    backward: bool,
    #[arg(long, default_value = "narrow")]
    precision: Precision,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    csv_out: Option<PathBuf>,
    /// Estimated bytes above which a combination is reported as OOM.
    #[arg(long)]
    memory_limit: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (`key = value` lines).
    #[arg(long, required_unless_present = "resume")]
    config: Option<PathBuf>,
    /// Continue from a checkpoint; its stored configuration is used.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the config seed (fresh runs only).
    #[arg(long)]
    seed: Option<u64>,
    /// Override the total number of windows.
    #[arg(long)]
    windows: Option<u64>,
    /// Metrics CSV path, overriding the config.
    #[arg(long)]
    csv_out: Option<PathBuf>,
    /// Checkpoint path, overriding the config.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Default directory for relative corpus paths.
    #[arg(long, env = "VQATTN_DATA_DIR")]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 0.9)]
    top_p: f64,
    #[arg(long, default_value_t = 256)]
    length: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Verify(a) => cmd_verify(a),
        Command::Bench(a) => cmd_bench(a).map(|_| ExitCode::SUCCESS),
        Command::Train(a) => cmd_train(a).map(|_| ExitCode::SUCCESS),
        Command::Sample(a) => cmd_sample(a).map(|_| ExitCode::SUCCESS),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn cmd_verify(a: VerifyArgs) -> Result<ExitCode> {
    if a.list {
        for (m, n) in CHECKS {
            println!("{m}/{n}");
        }
        return Ok(ExitCode::SUCCESS);
    }
    let opts = VerifyOptions {
        seed: a.seed,
        fault: a.inject_fault,
        fast: a.fast,
    };
    let results = run_verify_with(&opts, |r| println!("{r}"))?;
    let failed: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| r.property()).collect();
    let run = results.iter().filter(|r| !r.skipped).count();
    println!("{} checks run, {} failed", run, failed.len());
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        for f in &failed {
            eprintln!("failed property: {f}");
        }
        Ok(ExitCode::from(1))
    }
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let mut cfg = BenchConfig {
        lengths: a.lengths,
        heads: a.heads,
        kinds: a.kinds,
        reductions: a.reductions,
        repeats: a.repeats,
        warmup: a.warmup,
        backward: a.backward,
        precision: a.precision,
        seed: a.seed,
        ..BenchConfig::default()
    };
    if let Some(m) = a.memory_limit {
        cfg.memory_limit = m;
    }
    let rows = run_bench_with(&cfg, |r| {
        let lat = r.latency_s.map_or("OOM".to_string(), |v| format!("{v:.4e}s"));
        eprintln!("T={} {} {}", r.seq_len, r.slope_group(), lat);
    })?;
    match &a.csv_out {
        Some(p) => {
            let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            write_csv(&rows, BufWriter::new(f))?;
        }
        None => write_csv(&rows, io::stdout().lock())?,
    }
    for (group, slope) in fit_slopes(&rows) {
        eprintln!("slope {group} {slope:.3}");
    }
    Ok(())
}

/// Relative corpus paths resolve against `data_dir` when given, otherwise
/// against the directory holding the config file.
fn resolve_corpus(path: &Path, data_dir: Option<&Path>, config: Option<&Path>) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    if let Some(d) = data_dir {
        return d.join(path);
    }
    match config.and_then(Path::parent) {
        Some(dir) => dir.join(path),
        None => path.to_path_buf(),
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (mut cfg, resumed) = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            (ck.config.clone(), Some(ck))
        }
        None => {
            let path = a.config.as_ref().expect("clap requires --config without --resume");
            let mut cfg = TrainConfig::load(path).with_context(|| format!("reading {}", path.display()))?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            (cfg, None)
        }
    };
    if let Some(w) = a.windows {
        cfg.windows = w;
    }
    if a.csv_out.is_some() {
        cfg.metrics = a.csv_out.clone();
    }
    if a.checkpoint.is_some() {
        cfg.checkpoint = a.checkpoint.clone();
    }
    let Some(corpus_path) = cfg.corpus.clone() else {
        bail!("config does not name a corpus");
    };
    let corpus_path = resolve_corpus(&corpus_path, a.data_dir.as_deref(), a.config.as_deref());
    // Checkpoints keep the resolved path so `--resume` works from anywhere.
    let corpus_path = corpus_path.canonicalize().unwrap_or(corpus_path);
    cfg.corpus = Some(corpus_path.clone());
    let corpus = load_corpus(&corpus_path, cfg.split).with_context(|| format!("loading {}", corpus_path.display()))?;
    if corpus.bytes().iter().any(|&b| b as usize >= cfg.model.vocab) {
        bail!("corpus has bytes outside vocab {}", cfg.model.vocab);
    }

    let mut batches = window_batches(&corpus, Split::Train, cfg.batch, cfg.model.window, cfg.seed)?;
    let mut state = match resumed {
        Some(ck) => {
            if let Some((cursors, fresh)) = ck.batcher {
                batches.restore(cursors, fresh)?;
            }
            ck.state
        }
        None => {
            use rand::SeedableRng;
            let model = Model::init(cfg.model.clone(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed))?;
            TrainState::new(model, cfg.optim.clone(), cfg.batch, cfg.seed)
        }
    };

    let mut metrics = match &cfg.metrics {
        Some(p) => {
            let append = a.resume.is_some() && p.exists();
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(p)
                .with_context(|| format!("opening {}", p.display()))?;
            let mut w = BufWriter::new(f);
            if !append {
                writeln!(w, "{METRICS_HEADER}")?;
            }
            Some(w)
        }
        None => None,
    };

    let save = |state: &TrainState, batches: &vqattn::corpus::WindowBatcher<'_>| -> Result<()> {
        if let Some(p) = &cfg.checkpoint {
            let ck = Checkpoint {
                config: cfg.clone(),
                state: state.clone(),
                batcher: Some(batches.position()),
            };
            ck.save(p).with_context(|| format!("writing {}", p.display()))?;
        }
        Ok(())
    };

    while state.step < cfg.windows {
        let batch = batches.next().expect("window iterator is endless");
        let m = state.windowed_step(&batch)?;
        if let Some(w) = metrics.as_mut() {
            writeln!(
                w,
                "{},{:e},{:e},{:e},{:e},{:e},{:e}",
                m.step, m.loss, m.ce, m.commit, m.utilization, m.grad_norm, m.lr
            )?;
        }
        if m.step % 25 == 0 || m.step == cfg.windows {
            eprintln!(
                "window {} ce {:.4} commit {:.3e} util {:.2} lr {:.2e}",
                m.step, m.ce, m.commit, m.utilization, m.lr
            );
        }
        if cfg.checkpoint_every > 0 && m.step % cfg.checkpoint_every == 0 {
            save(&state, &batches)?;
        }
    }
    if let Some(mut w) = metrics {
        w.flush()?;
    }
    save(&state, &batches)?;
    if cfg.eval_windows > 0 {
        let val = evaluate(&state.model, corpus.split(Split::Val), cfg.eval_windows)?;
        eprintln!("validation ce {val:.5}");
    }
    Ok(())
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let model = &ck.state.model;
    if model.config.vocab > 256 {
        bail!("model vocab {} does not fit in bytes", model.config.vocab);
    }
    let prompt: Vec<usize> = a.prompt.bytes().map(usize::from).collect();
    if let Some(&b) = prompt.iter().find(|&&b| b >= model.config.vocab) {
        bail!("prompt byte {b} outside vocab {}", model.config.vocab);
    }
    let out = generate(model, &prompt, a.length, a.top_p, a.seed)?;
    let bytes: Vec<u8> = out.into_iter().map(|t| t as u8).collect();
    let mut stdout = io::stdout().lock();
    stdout.write_all(&bytes)?;
    stdout.flush()?;
    Ok(())
}
