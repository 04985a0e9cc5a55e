//! Parity and modular-arithmetic task generators, the character vocabulary
//! and JSON-lines dataset files.

mod gen;
mod io;
mod vocab;

pub use gen::{
    arith_prompt, arith_sample, gen_arith, gen_parity, generate, generate_excluding, parity_label, parity_prompt,
    parity_sample, sample_rng, Expr, Op, Sample, Task, ARITH_HEADER, PARITY_HEADER,
};
pub use io::{prompts_of, read_jsonl, write_jsonl};
pub use vocab::{Vocab, EOS, PAD};
