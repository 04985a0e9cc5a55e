use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::Vocab;
use crate::error::{Error, Result};

pub const PARITY_HEADER: &str = "Question: Output the parity of this sequence.\nInput: ";
pub const ARITH_HEADER: &str = "Question: Evaluate this expression modulo 10.\nInput: ";
const ANSWER: &str = "\nAnswer:";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Parity,
    Arith,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Parity => "parity",
            Task::Arith => "arith",
        }
    }

    /// Default length range: bits for parity, operands for arithmetic.
    pub fn default_lengths(self) -> (usize, usize) {
        match self {
            Task::Parity => (1, 70),
            Task::Arith => (1, 30),
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parity" => Ok(Task::Parity),
            "arith" | "arithmetic" => Ok(Task::Arith),
            _ => Err(Error::param(format!("unknown task {s:?} (expected parity or arith)"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub prompt: String,
    pub completion: String,
    pub prompt_ids: Vec<usize>,
    pub completion_ids: Vec<usize>,
}

impl Sample {
    pub fn new(prompt: String, completion: String, vocab: &Vocab) -> Result<Self> {
        let prompt_ids = vocab.encode(&prompt)?;
        let completion_ids = vocab.encode(&completion)?;
        Ok(Sample {
            prompt,
            completion,
            prompt_ids,
            completion_ids,
        })
    }

    /// Prompt followed by completion.
    pub fn ids(&self) -> Vec<usize> {
        [self.prompt_ids.as_slice(), &self.completion_ids].concat()
    }

    /// One flag per position of [`Sample::ids`], set on completion tokens.
    pub fn loss_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.prompt_ids.len()];
        m.resize(m.len() + self.completion_ids.len(), true);
        m
    }

    /// Problem size: the number of digits on the input line (bits for parity,
    /// operands for arithmetic).
    pub fn length(&self) -> usize {
        self.prompt
            .lines()
            .find_map(|l| l.strip_prefix("Input: "))
            .map_or(0, |l| l.chars().filter(char::is_ascii_digit).count())
    }
}

/// The RNG for sample `index` of a stream seeded with `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn check_range(min: usize, max: usize) -> Result<()> {
    if min == 0 || min > max {
        return Err(Error::param(format!("length range {min}..={max} is invalid")));
    }
    Ok(())
}

pub fn parity_prompt(bits: &[u8]) -> String {
    let body: Vec<String> = bits.iter().map(u8::to_string).collect();
    format!("{PARITY_HEADER}{}{ANSWER}", body.join(" "))
}

pub fn parity_label(bits: &[u8]) -> &'static str {
    if bits.iter().filter(|&&b| b == 1).count() % 2 == 1 {
        "1"
    } else {
        "0"
    }
}

/// Sample `index` of the parity stream.
pub fn parity_sample(seed: u64, index: u64, min_len: usize, max_len: usize, vocab: &Vocab) -> Result<Sample> {
    check_range(min_len, max_len)?;
    let mut rng = sample_rng(seed, index);
    let len = rng.random_range(min_len..=max_len);
    let bits: Vec<u8> = (0..len).map(|_| u8::from(rng.random_bool(0.5))).collect();
    Sample::new(parity_prompt(&bits), parity_label(&bits).into(), vocab)
}

pub fn gen_parity(seed: u64, n: usize, min_len: usize, max_len: usize, vocab: &Vocab) -> Result<Vec<Sample>> {
    (0..n as u64)
        .map(|i| parity_sample(seed, i, min_len, max_len, vocab))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Add,
    Sub,
    Mul,
}

impl Op {
    fn symbol(self) -> char {
        match self {
            Op::Add => '+',
            Op::Sub => '-',
            Op::Mul => '*',
        }
    }
}

/// Arithmetic expression tree. A chain applies one operator left to right.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Expr {
    Digit(u8),
    Chain(Op, Vec<Expr>),
    Neg(Box<Expr>),
}

const NEG_PROB: f64 = 0.25;
const MAX_CHAIN: usize = 4;

impl Expr {
    /// Random expression with exactly `operands` digits.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, operands: usize) -> Expr {
        let e = if operands == 1 {
            Expr::Digit(rng.random_range(0..10))
        } else {
            let terms = rng.random_range(2..=operands.min(MAX_CHAIN));
            let op = [Op::Add, Op::Sub, Op::Mul][rng.random_range(0..3)];
            let sizes = split(rng, operands, terms);
            Expr::Chain(op, sizes.into_iter().map(|s| Expr::random(rng, s)).collect())
        };
        if rng.random_bool(NEG_PROB) {
            Expr::Neg(Box::new(e))
        } else {
            e
        }
    }

    pub fn operands(&self) -> usize {
        match self {
            Expr::Digit(_) => 1,
            Expr::Chain(_, ts) => ts.iter().map(Expr::operands).sum(),
            Expr::Neg(e) => e.operands(),
        }
    }

    /// Value modulo 10 as the non-negative residue.
    pub fn mod10(&self) -> u8 {
        fn go(e: &Expr) -> i64 {
            match e {
                Expr::Digit(d) => i64::from(*d),
                Expr::Neg(x) => (-go(x)).rem_euclid(10),
                Expr::Chain(op, ts) => {
                    let mut vals = ts.iter().map(go);
                    let first = vals.next().expect("chains have terms");
                    vals.fold(first, |acc, v| match op {
                        Op::Add => (acc + v).rem_euclid(10),
                        Op::Sub => (acc - v).rem_euclid(10),
                        Op::Mul => (acc * v).rem_euclid(10),
                    })
                }
            }
        }
        go(self) as u8
    }

    fn render(&self, out: &mut String) {
        match self {
            Expr::Digit(d) => {
                let _ = write!(out, "{d}");
            }
            Expr::Chain(op, ts) => {
                out.push('(');
                for (i, t) in ts.iter().enumerate() {
                    if i > 0 {
                        let _ = write!(out, " {} ", op.symbol());
                    }
                    t.render(out);
                }
                out.push(')');
            }
            Expr::Neg(x) => {
                out.push('-');
                match **x {
                    Expr::Digit(d) => {
                        let _ = write!(out, "({d})");
                    }
                    _ => x.render(out),
                }
            }
        }
    }

    /// Text form; the whole expression is always parenthesized.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        match self {
            Expr::Chain(..) => self.render(&mut s),
            _ => {
                s.push('(');
                self.render(&mut s);
                s.push(')');
            }
        }
        s
    }
}

/// Split `total` into `parts` positive sizes, uniformly over compositions.
fn split<R: Rng + ?Sized>(rng: &mut R, total: usize, parts: usize) -> Vec<usize> {
    let cuts = rand::seq::index::sample(rng, total - 1, parts - 1);
    let mut cuts: Vec<usize> = cuts.into_iter().map(|c| c + 1).collect();
    cuts.sort_unstable();
    let mut prev = 0;
    let mut sizes = Vec::with_capacity(parts);
    for c in cuts.into_iter().chain(std::iter::once(total)) {
        sizes.push(c - prev);
        prev = c;
    }
    sizes
}

pub fn arith_prompt(expr: &str) -> String {
    format!("{ARITH_HEADER}{expr} ={ANSWER}")
}

pub fn arith_sample(seed: u64, index: u64, min_ops: usize, max_ops: usize, vocab: &Vocab) -> Result<Sample> {
    check_range(min_ops, max_ops)?;
    let mut rng = sample_rng(seed, index);
    let ops = rng.random_range(min_ops..=max_ops);
    let e = Expr::random(&mut rng, ops);
    Sample::new(arith_prompt(&e.to_text()), e.mod10().to_string(), vocab)
}

pub fn gen_arith(seed: u64, n: usize, min_ops: usize, max_ops: usize, vocab: &Vocab) -> Result<Vec<Sample>> {
    (0..n as u64)
        .map(|i| arith_sample(seed, i, min_ops, max_ops, vocab))
        .collect()
}

pub fn generate(task: Task, seed: u64, n: usize, min: usize, max: usize, vocab: &Vocab) -> Result<Vec<Sample>> {
    match task {
        Task::Parity => gen_parity(seed, n, min, max, vocab),
        Task::Arith => gen_arith(seed, n, min, max, vocab),
    }
}

/// Like [`generate`] but skips any prompt in `exclude`, so the result shares
/// no prompt with earlier splits. With an empty `exclude` the output equals
/// [`generate`]. Fails when the length range cannot supply `n` new prompts
/// within a bounded search.
pub fn generate_excluding(
    task: Task,
    seed: u64,
    n: usize,
    min: usize,
    max: usize,
    vocab: &Vocab,
    exclude: &std::collections::HashSet<String>,
) -> Result<Vec<Sample>> {
    check_range(min, max)?;
    let mut out = Vec::with_capacity(n);
    let budget = (n as u64).saturating_mul(50).max(1000);
    let mut index = 0u64;
    while out.len() < n {
        if index >= budget {
            return Err(Error::param(format!(
                "could only find {} new prompts of {n} requested for lengths {min}..={max}",
                out.len()
            )));
        }
        let s = match task {
            Task::Parity => parity_sample(seed, index, min, max, vocab)?,
            Task::Arith => arith_sample(seed, index, min, max, vocab)?,
        };
        index += 1;
        if !exclude.contains(&s.prompt) {
            out.push(s);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_parity_example() {
        let bits = [1, 0, 0, 1, 0, 1];
        assert_eq!(parity_label(&bits), "1");
        assert_eq!(parity_label(&[0]), "0");
        assert_eq!(
            parity_prompt(&bits),
            "Question: Output the parity of this sequence.\nInput: 1 0 0 1 0 1\nAnswer:"
        );
    }

    #[test]
    fn worked_arith_example() {
        use Expr::*;
        let e = Chain(
            Op::Mul,
            vec![
                Neg(Box::new(Chain(Op::Add, vec![Digit(3), Neg(Box::new(Digit(1)))]))),
                Digit(4),
                Chain(Op::Add, vec![Digit(8), Digit(2), Digit(9)]),
            ],
        );
        assert_eq!(e.to_text(), "(-(3 + -(1)) * 4 * (8 + 2 + 9))");
        assert_eq!(e.mod10(), 8);
        assert_eq!(e.operands(), 6);
        assert_eq!(Digit(5).to_text(), "(5)");
        assert_eq!(Neg(Box::new(Digit(5))).to_text(), "(-(5))");
    }

    #[test]
    fn operand_counts_are_exact() {
        let mut rng = sample_rng(1, 0);
        for n in 1..=30 {
            for _ in 0..20 {
                assert_eq!(Expr::random(&mut rng, n).operands(), n);
            }
        }
    }

    #[test]
    fn sample_lengths_and_masks() {
        let v = Vocab::standard();
        for s in gen_parity(3, 50, 1, 70, &v).unwrap() {
            assert_eq!(s.prompt.len() + s.completion.len(), 61 + 2 * s.length());
            assert_eq!(s.loss_mask().iter().filter(|&&m| m).count(), s.completion_ids.len());
            assert!((1..=70).contains(&s.length()));
        }
        for s in gen_arith(3, 50, 4, 9, &v).unwrap() {
            assert!((4..=9).contains(&s.length()));
        }
        assert!(gen_parity(3, 0, 1, 70, &v).unwrap().is_empty());
        assert!(gen_parity(3, 1, 5, 4, &v).is_err());
    }

    #[test]
    fn distinct_generation_respects_exclusions() {
        let v = Vocab::standard();
        let train = generate_excluding(Task::Parity, 1, 2_000, 1, 4, &v, &Default::default()).unwrap();
        let seen: std::collections::HashSet<String> = train.iter().map(|s| s.prompt.clone()).collect();
        assert_eq!(seen.len(), 30);
        let fresh = generate_excluding(Task::Parity, 2, 5, 1, 3, &v, &Default::default()).unwrap();
        let held: std::collections::HashSet<String> = fresh.iter().map(|s| s.prompt.clone()).take(1).collect();
        assert!(generate_excluding(Task::Parity, 3, 50, 1, 3, &v, &held)
            .unwrap()
            .iter()
            .all(|s| !held.contains(&s.prompt)));
        // Lengths 1..=4 hold 30 prompts in total, so nothing is left.
        assert!(generate_excluding(Task::Parity, 2, 1, 1, 4, &v, &seen).is_err());
    }
}
