//! Accuracy, eliminated-choices and length-sweep evaluation with CSV output.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sample_categorical, GenerateOptions, Model};
use crate::tasks::{generate, sample_rng, Sample, Task, Vocab, EOS};

/// Prompts per batched forward pass on the single-token fast path.
const EVAL_BATCH: usize = 64;

pub const DEFAULT_TAU: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub temperature: f32,
    /// Each sample draws from the stream `(seed, prompt_stream(prompt))`.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            temperature: 1.0,
            seed: 0,
        }
    }
}

/// Stream index for a prompt: 64-bit FNV-1a of its bytes. Keying draws on
/// content makes scores independent of sample order.
pub fn prompt_stream(prompt: &str) -> u64 {
    prompt.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Sampled completion text for every sample, in order.
pub fn predictions(model: &Model, samples: &[Sample], vocab: &Vocab, opts: &EvalOptions) -> Result<Vec<String>> {
    if samples.iter().all(|s| s.completion_ids.len() == 1) {
        return single_token_predictions(model, samples, vocab, opts);
    }
    samples
        .iter()
        .map(|s| {
            let gen = GenerateOptions {
                max_new: s.completion_ids.len().max(1),
                temperature: opts.temperature,
                eos: Some(EOS),
            };
            let ids = model.generate(
                &s.prompt_ids,
                &gen,
                &mut sample_rng(opts.seed, prompt_stream(&s.prompt)),
            )?;
            decode_lossy(vocab, &ids)
        })
        .collect()
}

/// Batched path for one-token answers: one padded forward pass per batch,
/// then one categorical draw per sample from its prompt's stream.
fn single_token_predictions(
    model: &Model,
    samples: &[Sample],
    vocab: &Vocab,
    opts: &EvalOptions,
) -> Result<Vec<String>> {
    if !(opts.temperature > 0.0) {
        return Err(Error::param(format!(
            "temperature must be positive, got {}",
            opts.temperature
        )));
    }
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let prompts: Vec<Vec<usize>> = chunk.iter().map(|s| s.prompt_ids.clone()).collect();
        let logits = model.next_token_logits(&prompts)?;
        for (s, row) in chunk.iter().zip(&logits) {
            let mut rng = sample_rng(opts.seed, prompt_stream(&s.prompt));
            let tok = sample_categorical(row, opts.temperature, &mut rng)?;
            out.push(decode_lossy(vocab, &[tok])?);
        }
    }
    Ok(out)
}

fn decode_lossy(vocab: &Vocab, ids: &[usize]) -> Result<String> {
    // Reserved ids carry no text; a sampled pad or EOS simply grades wrong.
    let printable: Vec<usize> = ids.iter().copied().filter(|&i| i > EOS).collect();
    vocab.decode(&printable)
}

/// Fraction of exact matches after trimming whitespace.
pub fn score(predicted: &[String], samples: &[Sample]) -> f64 {
    let correct = predicted
        .iter()
        .zip(samples)
        .filter(|(p, s)| p.trim() == s.completion.trim())
        .count();
    correct as f64 / samples.len() as f64
}

pub fn accuracy(model: &Model, samples: &[Sample], vocab: &Vocab, opts: &EvalOptions) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::param("accuracy needs at least one sample"));
    }
    Ok(score(&predictions(model, samples, vocab, opts)?, samples))
}

/// Digit classes whose probability, renormalized over the ten digits, is
/// below `tau`.
pub fn eliminated_in(digit_probs: &[f64; 10], tau: f64) -> usize {
    let total: f64 = digit_probs.iter().sum();
    digit_probs.iter().filter(|&&p| p / total < tau).count()
}

/// Softmax over the ten digit logits, then [`eliminated_in`].
pub fn eliminated_from_logits(digit_logits: &[f32; 10], tau: f64) -> usize {
    let max = digit_logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let probs = digit_logits.map(|l| f64::from(l - max).exp());
    eliminated_in(&probs, tau)
}

/// Mean eliminated-digit count at the first answer position.
pub fn eliminated_choices(model: &Model, samples: &[Sample], vocab: &Vocab, tau: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::param("eliminated_choices needs at least one sample"));
    }
    let digits = vocab.digit_ids()?;
    let mut total = 0usize;
    for chunk in samples.chunks(EVAL_BATCH) {
        let prompts: Vec<Vec<usize>> = chunk.iter().map(|s| s.prompt_ids.clone()).collect();
        for row in model.next_token_logits(&prompts)? {
            total += eliminated_from_logits(&digits.map(|d| row[d]), tau);
        }
    }
    Ok(total as f64 / samples.len() as f64)
}

/// Length column: a single problem size or the whole split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Length {
    All,
    Exactly(usize),
}

impl fmt::Display for Length {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Length::All => f.write_str("all"),
            Length::Exactly(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for Length {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Length::All);
        }
        s.parse()
            .map(Length::Exactly)
            .map_err(|_| Error::param(format!("length {s:?} is neither \"all\" nor a number")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub task: String,
    pub split: String,
    pub method: String,
    pub g: usize,
    pub alpha: f32,
    pub length: Length,
    pub n: usize,
    pub accuracy: f64,
    /// Absent when the metric was not computed.
    pub eliminated_mean: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    task: String,
    split: String,
    method: String,
    g: usize,
    alpha: f32,
    length: String,
    n: usize,
    accuracy: f64,
    eliminated_mean: Option<f64>,
}

/// Model identity columns shared by every row of one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunTag {
    pub task: String,
    pub split: String,
    pub method: String,
    pub g: usize,
    pub alpha: f32,
}

impl RunTag {
    pub fn row(&self, length: Length, n: usize, accuracy: f64, eliminated_mean: Option<f64>) -> MetricsRow {
        MetricsRow {
            task: self.task.clone(),
            split: self.split.clone(),
            method: self.method.clone(),
            g: self.g,
            alpha: self.alpha,
            length,
            n,
            accuracy,
            eliminated_mean,
        }
    }
}

pub fn write_metrics(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(CsvRow {
            task: r.task.clone(),
            split: r.split.clone(),
            method: r.method.clone(),
            g: r.g,
            alpha: r.alpha,
            length: r.length.to_string(),
            n: r.n,
            accuracy: r.accuracy,
            eliminated_mean: r.eliminated_mean,
        })
        .map_err(|e| csv_error(path, e))?;
    }
    if rows.is_empty() {
        w.write_record([
            "task",
            "split",
            "method",
            "g",
            "alpha",
            "length",
            "n",
            "accuracy",
            "eliminated_mean",
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize::<CsvRow>()
        .enumerate()
        .map(|(i, row)| {
            let row = row.map_err(|e| csv_error(path, e))?;
            let length = row.length.parse().map_err(|e: Error| Error::Parse {
                path: path.display().to_string(),
                line: i + 2,
                msg: e.to_string(),
            })?;
            Ok(MetricsRow {
                task: row.task,
                split: row.split,
                method: row.method,
                g: row.g,
                alpha: row.alpha,
                length,
                n: row.n,
                accuracy: row.accuracy,
                eliminated_mean: row.eliminated_mean,
            })
        })
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.display().to_string(),
            line,
            msg: format!("{other:?}"),
        },
    }
}

/// Seed of the fresh evaluation set for one sweep length.
pub fn sweep_seed(seed: u64, length: usize) -> u64 {
    seed ^ (length as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Accuracy on a fresh set of `n` samples at each length in `lens`.
pub fn length_sweep(
    model: &Model,
    task: Task,
    lens: &[usize],
    n: usize,
    vocab: &Vocab,
    opts: &EvalOptions,
    tag: &RunTag,
) -> Result<Vec<MetricsRow>> {
    if lens.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::param("sweep lengths must be strictly ascending"));
    }
    if n == 0 {
        return Err(Error::param("sweep needs at least one sample per length"));
    }
    lens.iter()
        .map(|&len| {
            let samples = generate(task, sweep_seed(opts.seed, len), n, len, len, vocab)?;
            let acc = accuracy(model, &samples, vocab, opts)?;
            Ok(tag.row(Length::Exactly(len), n, acc, None))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eliminated_closed_forms() {
        assert_eq!(eliminated_in(&[0.1; 10], DEFAULT_TAU), 0);
        let mut onehot = [0.0; 10];
        onehot[4] = 1.0;
        assert_eq!(eliminated_in(&onehot, DEFAULT_TAU), 9);
        let mut half = [0.0; 10];
        half[0] = 0.5;
        half[1] = 0.5;
        assert_eq!(eliminated_in(&half, DEFAULT_TAU), 8);
        // Renormalization over the digit subset.
        assert_eq!(eliminated_in(&[0.0001; 10], DEFAULT_TAU), 0);
    }

    #[test]
    fn length_column_parses() {
        assert_eq!("all".parse::<Length>().unwrap(), Length::All);
        assert_eq!("12".parse::<Length>().unwrap(), Length::Exactly(12));
        assert!("x".parse::<Length>().is_err());
    }
}
