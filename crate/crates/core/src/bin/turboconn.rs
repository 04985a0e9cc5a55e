//! Command-line front end: data generation, training, evaluation and the
//! static analyses.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use turboconn::analysis::{count_params, dims_preset, with_commas, DepthRow, Dims};
use turboconn::evalkit::{
    accuracy, eliminated_choices, length_sweep, write_metrics, EvalOptions, Length, MetricsRow, RunTag, DEFAULT_TAU,
};
use turboconn::model::{read_checkpoint, resolve_connections, ConnectionSpec, Feedback, Model};
use turboconn::tasks::{generate_excluding, prompts_of, read_jsonl, write_jsonl, Sample, Task, Vocab, PARITY_HEADER};
use turboconn::trainer::{Method, TrainConfig, Trainer};
use turboconn::Error;

const DATA_DIR_ENV: &str = "TURBOCONN_DATA_DIR";

/// Exit codes: 1 usage, 2 IO, 3 validation, 4 numeric failure.
#[derive(Parser)]
#[command(
    name = "turboconn",
    version,
    about = "Train and evaluate decoders with downward layer connections"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a JSON-lines dataset.
    GenData {
        #[arg(long)]
        task: Task,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        min_len: usize,
        #[arg(long)]
        max_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Datasets whose prompts must not reappear in this one.
        #[arg(long)]
        exclude: Vec<PathBuf>,
    },
    /// Train a model; reads train.jsonl and val.jsonl from the data directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to $TURBOCONN_DATA_DIR, then ./data.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        g: Option<usize>,
        #[arg(long)]
        alpha: Option<f32>,
        #[arg(long)]
        connections: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Train the baseline with the trainable-parameter budget of the
        /// TurboConn model described by the config.
        #[arg(long)]
        matched_baseline: bool,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long, conflicts_with_all = ["config", "method", "g", "alpha", "connections", "seed", "matched_baseline"])]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset file and write a metrics CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        temperature: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy on fresh sets at each problem length.
    SweepLength {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: Task,
        /// Inclusive ranges and single values, e.g. `1..70` or `1..10,20,30`.
        #[arg(long, default_value = "1..70")]
        lens: String,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Longest dependency path and sequential step count.
    AnalyzeDepth {
        #[arg(long)]
        layers: usize,
        #[arg(long)]
        seq_len: usize,
        #[arg(long, default_value_t = 1)]
        g: usize,
        #[arg(long, default_value = "none")]
        connections: String,
    },
    /// Trainable LoRA parameters with and without connections.
    CountParams {
        /// Preset name or `d_hidden,d_kv,d_inter,n_layers`.
        #[arg(long)]
        dims: String,
        #[arg(long)]
        rank: u64,
        /// Connection rank; defaults to --rank.
        #[arg(long)]
        rank_d: Option<u64>,
        #[arg(long, default_value_t = 0)]
        n_conn: u64,
    },
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
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Io { .. } => 2,
                Error::NonFinite { .. } | Error::Diverged { .. } => 4,
                _ => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    3
}

fn run(command: Command) -> anyhow::Result<String> {
    match command {
        Command::GenData {
            task,
            n,
            min_len,
            max_len,
            seed,
            out,
            exclude,
        } => gen_data(task, n, min_len, max_len, seed, &out, &exclude),
        Command::Train {
            config,
            data,
            out,
            method,
            g,
            alpha,
            connections,
            seed,
            matched_baseline,
            resume,
        } => {
            let data = data.unwrap_or_else(default_data_dir);
            let trainer = match resume {
                Some(path) => Trainer::resume(path)?,
                None => {
                    let mut cfg = match config {
                        Some(path) => TrainConfig::from_file(path)?,
                        None => TrainConfig::default(),
                    };
                    cfg.method = method.unwrap_or(cfg.method);
                    cfg.g = g.unwrap_or(cfg.g);
                    cfg.alpha = alpha.unwrap_or(cfg.alpha);
                    cfg.seed = seed.unwrap_or(cfg.seed);
                    if let Some(c) = connections {
                        cfg.connections = c;
                    }
                    if matched_baseline {
                        cfg = TrainConfig {
                            method: Method::Turboconn,
                            ..cfg
                        }
                        .matched_baseline()?;
                    }
                    Trainer::new(cfg)?
                }
            };
            train(trainer, &data, &out)
        }
        Command::Eval {
            checkpoint,
            data,
            temperature,
            seed,
            tau,
            split,
            out,
        } => eval(&checkpoint, &data, EvalOptions { temperature, seed }, tau, &split, &out),
        Command::SweepLength {
            checkpoint,
            task,
            lens,
            n,
            temperature,
            seed,
            out,
        } => {
            let lens = parse_lens(&lens)?;
            let model = read_checkpoint(&checkpoint)?.model;
            let tag = run_tag(&model, task.to_string(), "sweep");
            let rows = length_sweep(
                &model,
                task,
                &lens,
                n,
                &Vocab::standard(),
                &EvalOptions { temperature, seed },
                &tag,
            )?;
            write_metrics(&out, &rows)?;
            let best = rows.iter().map(|r| r.accuracy).fold(0.0, f64::max);
            Ok(format!(
                "swept {} lengths ({}..={}) with n={n}; best accuracy {best:.4}; wrote {}",
                rows.len(),
                lens[0],
                lens[lens.len() - 1],
                out.display()
            ))
        }
        Command::AnalyzeDepth {
            layers,
            seq_len,
            g,
            connections,
        } => {
            let pairs = resolve_connections(&connections)?;
            let spec = ConnectionSpec::new(pairs, 1.0, g, 1)?;
            Ok(DepthRow::compute(layers, seq_len, &spec)?.to_text())
        }
        Command::CountParams {
            dims,
            rank,
            rank_d,
            n_conn,
        } => {
            let d = parse_dims(&dims)?;
            let c = count_params(&d, rank, n_conn, rank_d.unwrap_or(rank))?;
            let total = if n_conn == 0 {
                c.baseline_total
            } else {
                c.turboconn_total
            };
            Ok(format!(
                "{} (per block {}, per connection {}, dims {dims}, r={rank}, n_conn={n_conn})",
                with_commas(total),
                with_commas(c.per_block),
                with_commas(c.per_connection)
            ))
        }
    }
}

fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from)
}

fn gen_data(
    task: Task,
    n: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
    out: &Path,
    exclude: &[PathBuf],
) -> anyhow::Result<String> {
    let vocab = Vocab::standard();
    let seen = if exclude.is_empty() {
        HashSet::new()
    } else {
        prompts_of(exclude, &vocab)?
    };
    let samples = generate_excluding(task, seed, n, min_len, max_len, &vocab, &seen)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    write_jsonl(out, &samples)?;
    Ok(format!(
        "wrote {n} {task} samples (lengths {min_len}..={max_len}, seed {seed}) to {}",
        out.display()
    ))
}

fn train(mut trainer: Trainer, data: &Path, out: &Path) -> anyhow::Result<String> {
    let vocab = Vocab::standard();
    let train = read_jsonl(data.join("train.jsonl"), &vocab)?;
    let val_path = data.join("val.jsonl");
    let val = if val_path.exists() {
        read_jsonl(&val_path, &vocab)?
    } else {
        Vec::new()
    };
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let cfg_path = out.join("config.toml");
    std::fs::write(&cfg_path, trainer.config().to_toml()?).map_err(|e| Error::Io {
        path: cfg_path.clone(),
        source: e,
    })?;
    let summary = trainer.run(&train, &val, out, None)?;
    let val_acc = summary.val_acc.last().map_or("n/a".to_string(), |a| format!("{a:.4}"));
    Ok(format!(
        "trained {} for {} steps ({} trainable parameters); last loss {}; val accuracy {val_acc}; run dir {}",
        trainer.config().method,
        summary.steps,
        with_commas(trainer.model().trainable_params() as u64),
        summary.last_loss.map_or("n/a".to_string(), |l| format!("{l:.5}")),
        out.display()
    ))
}

fn method_of(model: &Model) -> &'static str {
    match (model.spec().is_empty(), model.feedback()) {
        (false, _) => "turboconn",
        (true, Feedback::SoftToken { .. }) => "softtoken",
        (true, Feedback::None) => "baseline",
    }
}

fn run_tag(model: &Model, task: String, split: &str) -> RunTag {
    let (g, alpha) = if model.spec().is_empty() {
        (1, 0.0)
    } else {
        (model.group_size(), model.spec().alpha)
    };
    RunTag {
        task,
        split: split.to_string(),
        method: method_of(model).to_string(),
        g,
        alpha,
    }
}

fn eval(
    checkpoint: &Path,
    data: &Path,
    opts: EvalOptions,
    tau: f64,
    split: &str,
    out: &Path,
) -> anyhow::Result<String> {
    let vocab = Vocab::standard();
    let model = read_checkpoint(checkpoint)?.model;
    let samples = read_jsonl(data, &vocab)?;
    if samples.is_empty() {
        bail!(Error::Parameter(format!("{} holds no samples", data.display())));
    }
    let task = if samples[0].prompt.starts_with(PARITY_HEADER) {
        Task::Parity
    } else {
        Task::Arith
    };
    let tag = run_tag(&model, task.to_string(), split);
    let mut rows = vec![score_rows(&model, &samples, &vocab, &opts, tau, &tag, Length::All)?];
    let mut lengths: Vec<usize> = samples.iter().map(Sample::length).collect();
    lengths.sort_unstable();
    lengths.dedup();
    for len in lengths {
        let bucket: Vec<Sample> = samples.iter().filter(|s| s.length() == len).cloned().collect();
        rows.push(score_rows(
            &model,
            &bucket,
            &vocab,
            &opts,
            tau,
            &tag,
            Length::Exactly(len),
        )?);
    }
    write_metrics(out, &rows).with_context(|| format!("writing {}", out.display()))?;
    let all = &rows[0];
    Ok(format!(
        "accuracy {:.4} on {} samples; eliminated choices {:.3} (digit-renormalized, tau {tau}); wrote {}",
        all.accuracy,
        all.n,
        all.eliminated_mean.unwrap_or(f64::NAN),
        out.display()
    ))
}

fn score_rows(
    model: &Model,
    samples: &[Sample],
    vocab: &Vocab,
    opts: &EvalOptions,
    tau: f64,
    tag: &RunTag,
    length: Length,
) -> anyhow::Result<MetricsRow> {
    let acc = accuracy(model, samples, vocab, opts)?;
    let elim = eliminated_choices(model, samples, vocab, tau)?;
    Ok(tag.row(length, samples.len(), acc, Some(elim)))
}

fn parse_lens(text: &str) -> anyhow::Result<Vec<usize>> {
    let bad = || Error::Parameter(format!("--lens {text:?}: expected values like 1..70 or 1..10,20"));
    let mut out = Vec::new();
    for part in text.split(',') {
        match part.split_once("..") {
            Some((a, b)) => {
                let a: usize = a.trim().parse().map_err(|_| bad())?;
                let b: usize = b.trim().parse().map_err(|_| bad())?;
                if a > b {
                    bail!(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.trim().parse().map_err(|_| bad())?),
        }
    }
    out.sort_unstable();
    out.dedup();
    if out.is_empty() || out[0] == 0 {
        bail!(bad());
    }
    Ok(out)
}

fn parse_dims(text: &str) -> anyhow::Result<Dims> {
    if let Ok(d) = dims_preset(text) {
        return Ok(d);
    }
    let parts: Vec<u64> = text
        .split(',')
        .map(|p| p.trim().parse::<u64>())
        .collect::<Result<_, _>>()
        .map_err(|_| {
            Error::Parameter(format!(
                "--dims {text:?}: not a preset or d_hidden,d_kv,d_inter,n_layers"
            ))
        })?;
    let [d_hidden, d_kv, d_inter, n_layers] = parts[..] else {
        bail!(Error::Parameter(format!(
            "--dims {text:?}: expected four comma-separated values"
        )));
    };
    Ok(Dims {
        d_hidden,
        d_kv,
        d_inter,
        n_layers,
    })
}
