use rand::Rng;

use super::forward::{sample_categorical, Forward};
use super::Model;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerateOptions {
    pub max_new: usize,
    /// Sampling is always categorical at this temperature.
    pub temperature: f32,
    /// Stop token; it is not included in the output.
    pub eos: Option<usize>,
}

impl Model {
    /// Sample a continuation of `prompt`. The prompt is prefilled in
    /// group-aligned chunks, then one token is fed per step. Stops after
    /// `max_new` tokens, at `eos`, or once prompt plus output fill the context.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        prompt: &[usize],
        opts: &GenerateOptions,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::param("generate: empty prompt"));
        }
        let max_seq = self.config().max_seq;
        if prompt.len() > max_seq {
            return Err(Error::param(format!(
                "generate: prompt of {} tokens exceeds max_seq {max_seq}",
                prompt.len()
            )));
        }
        if !(opts.temperature > 0.0) {
            return Err(Error::param(format!(
                "generate: temperature must be positive, got {}",
                opts.temperature
            )));
        }
        let v = self.config().vocab_size;
        let mut fw = Forward::new(self, 1, false)?;
        let logits = fw.run(prompt, prompt.len())?;
        let mut last = tail_row(fw.tape().value(logits).data(), v);
        let mut out = Vec::new();
        while out.len() < opts.max_new {
            let tok = sample_categorical(&last, opts.temperature, rng)?;
            if Some(tok) == opts.eos {
                break;
            }
            out.push(tok);
            if out.len() == opts.max_new || prompt.len() + out.len() == max_seq {
                break;
            }
            let logits = fw.step(&[tok])?;
            last = tail_row(fw.tape().value(logits).data(), v);
        }
        Ok(out)
    }

    /// Next-token logits after each prompt, computed in one batched pass over
    /// right-padded rows.
    pub fn next_token_logits(&self, prompts: &[Vec<usize>]) -> Result<Vec<Vec<f32>>> {
        if prompts.is_empty() {
            return Ok(Vec::new());
        }
        if prompts.iter().any(Vec::is_empty) {
            return Err(Error::param("next_token_logits: empty prompt"));
        }
        let seq = prompts.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(prompts.len() * seq);
        for p in prompts {
            ids.extend_from_slice(p);
            ids.resize(ids.len() + seq - p.len(), 0);
        }
        let logits = self.forward_batch(&ids, seq)?;
        let v = self.config().vocab_size;
        let data = logits.data();
        Ok(prompts
            .iter()
            .enumerate()
            .map(|(r, p)| data[(r * seq + p.len() - 1) * v..][..v].to_vec())
            .collect())
    }
}

fn tail_row(data: &[f32], v: usize) -> Vec<f32> {
    data[data.len() - v..].to_vec()
}
