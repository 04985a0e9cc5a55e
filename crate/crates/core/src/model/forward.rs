use std::collections::BTreeSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::cache::{DownCache, KvCache};
use super::lora::Target;
use super::{Feedback, Model, NORM_EPS};
use crate::error::{Error, Result};
use crate::numcore::{softmax_rows, Gradients, Tape, Tensor, Var};

/// One incremental pass over a batch of equal-length rows. Positions are fed
/// in chunks; a chunk may be at most `group_size` wide so that every
/// connection source it reads is already computed.
pub struct Forward<'m> {
    model: &'m Model,
    tape: Tape,
    vars: Vec<Var>,
    batch: usize,
    pos: usize,
    steps: usize,
    kv: Vec<KvCache>,
    down: DownCache,
    sources: BTreeSet<usize>,
    feedback: Feedback,
    /// Logits of the last processed position, `[b, 1, V]`.
    last_logits: Option<Var>,
}

impl<'m> Forward<'m> {
    /// With `track` set, trainable parameters collect gradients.
    pub fn new(model: &'m Model, batch: usize, track: bool) -> Result<Self> {
        if batch == 0 {
            return Err(Error::param("batch size must be at least 1"));
        }
        let mut tape = Tape::new();
        let vars = model.params().bind(&mut tape, track);
        Ok(Forward {
            model,
            tape,
            vars,
            batch,
            pos: 0,
            steps: 0,
            kv: vec![KvCache::default(); model.config().n_layers],
            down: DownCache::new(model.group_size()),
            sources: model.spec().sources(),
            feedback: model.feedback(),
            last_logits: None,
        })
    }

    /// Override the model's feedback mode; only allowed before the first step.
    pub fn set_feedback(&mut self, feedback: Feedback) -> Result<()> {
        if self.pos != 0 {
            return Err(Error::State("feedback mode cannot change mid-sequence".into()));
        }
        if let Feedback::SoftToken { lambda } = feedback {
            super::check_lambda(lambda)?;
        }
        self.feedback = feedback;
        Ok(())
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }

    /// Next position to be processed.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Number of sequential chunk iterations so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn bound(&self) -> &[Var] {
        &self.vars
    }

    /// Backpropagate `loss` and hand back gradients keyed by bound variable.
    pub fn into_gradients(self, loss: Var) -> Result<(Gradients, Vec<Var>)> {
        let grads = self.tape.backward(loss)?;
        Ok((grads, self.vars))
    }

    fn p(&self, id: super::ParamId) -> Var {
        self.vars[id.index()]
    }

    /// Process `ids` (row-major `[batch, width]`) and return logits
    /// `[batch, width, V]`.
    pub fn step(&mut self, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() || !ids.len().is_multiple_of(self.batch) {
            return Err(Error::param(format!(
                "step: {} ids do not split into {} rows",
                ids.len(),
                self.batch
            )));
        }
        let width = ids.len() / self.batch;
        let cfg = self.model.config();
        if width > self.model.group_size() {
            return Err(Error::param(format!(
                "step: chunk width {width} exceeds group size {}",
                self.model.group_size()
            )));
        }
        if self.pos + width > cfg.max_seq {
            return Err(Error::param(format!(
                "step: positions up to {} exceed max_seq {}",
                self.pos + width,
                cfg.max_seq
            )));
        }
        let mut h = self.embed(ids, width)?;
        if let Feedback::SoftToken { lambda } = self.feedback {
            if width != 1 {
                return Err(Error::param("soft-token feedback processes one position per step"));
            }
            if let Some(prev) = self.last_logits {
                h = self.soft_token_input(h, prev, lambda)?;
            }
        }
        for l in 0..cfg.n_layers {
            h = self.layer_block(l, h, width)?;
            h = self.add_connections(l, h, width)?;
            if self.sources.contains(&l) {
                self.down.push(l, self.pos, width, h);
            }
        }
        let t = &mut self.tape;
        let normed = t.rmsnorm(h, self.vars[self.model.final_norm.index()], NORM_EPS)?;
        let logits = t.matmul(normed, self.vars[self.model.lm_head.index()])?;
        self.last_logits = Some(if width == 1 {
            logits
        } else {
            t.slice(logits, 1, width - 1, 1)?
        });
        self.pos += width;
        self.steps += 1;
        Ok(logits)
    }

    /// Feed `seq` positions of `ids` (row-major `[batch, seq]`) in chunks
    /// aligned to multiples of the group size, or one at a time under
    /// soft-token feedback. Returns logits `[batch, seq, V]`.
    pub fn run(&mut self, ids: &[usize], seq: usize) -> Result<Var> {
        if seq == 0 || ids.len() != self.batch * seq {
            return Err(Error::param(format!(
                "run: {} ids do not form {} rows of {seq}",
                ids.len(),
                self.batch
            )));
        }
        let g = match self.feedback {
            Feedback::SoftToken { .. } => 1,
            Feedback::None => self.model.group_size(),
        };
        let start = self.pos;
        let mut outs = Vec::new();
        let mut at = 0;
        while at < seq {
            let abs = start + at;
            let boundary = (abs / g + 1).saturating_mul(g);
            let end = (boundary - start).min(seq);
            let mut chunk = Vec::with_capacity(self.batch * (end - at));
            for row in ids.chunks_exact(seq) {
                chunk.extend_from_slice(&row[at..end]);
            }
            outs.push(self.step(&chunk)?);
            at = end;
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            self.tape.concat_seq(&outs)
        }
    }

    fn embed(&mut self, ids: &[usize], width: usize) -> Result<Var> {
        let lead = [self.batch, width];
        let positions: Vec<usize> = (0..self.batch).flat_map(|_| self.pos..self.pos + width).collect();
        let tok = self.tape.gather(self.p(self.model.tok_emb), ids, &lead)?;
        let pos = self.tape.gather(self.p(self.model.pos_emb), &positions, &lead)?;
        self.tape.add(tok, pos)
    }

    /// First-layer input under soft-token feedback:
    /// `(1 - λ)·e + λ·softmax(prev)·E`, where `E` is the token embedding table
    /// and `prev` holds the previous position's logits.
    pub fn soft_token_input(&mut self, e: Var, prev: Var, lambda: f32) -> Result<Var> {
        super::check_lambda(lambda)?;
        let tok = self.p(self.model.tok_emb);
        let t = &mut self.tape;
        let probs = t.softmax(prev, 1.0)?;
        let soft = t.matmul(probs, tok)?;
        let a = t.scale(e, 1.0 - lambda)?;
        let b = t.scale(soft, lambda)?;
        t.add(a, b)
    }

    fn proj(&mut self, l: usize, target: Target, x: Var) -> Result<Var> {
        let layer = &self.model.layers[l];
        let w = self.p(layer.proj[target.slot()]);
        let lora = layer.lora[target.slot()].map(|(a, b)| (self.p(a), self.p(b)));
        let y = self.tape.matmul(x, w)?;
        match lora {
            None => Ok(y),
            Some((a, b)) => {
                let xa = self.tape.matmul(x, a)?;
                let delta = self.tape.matmul(xa, b)?;
                self.tape.add(y, delta)
            }
        }
    }

    fn layer_block(&mut self, l: usize, x: Var, width: usize) -> Result<Var> {
        let layer = &self.model.layers[l];
        let (attn_norm, mlp_norm) = (self.p(layer.attn_norm), self.p(layer.mlp_norm));
        let heads = self.model.config().n_heads;

        if self.kv[l].len() != self.pos {
            return Err(Error::State(format!(
                "layer {l} caches {} positions but the pass is at position {}",
                self.kv[l].len(),
                self.pos
            )));
        }
        let a = self.tape.rmsnorm(x, attn_norm, NORM_EPS)?;
        let q = self.proj(l, Target::Q, a)?;
        let k = self.proj(l, Target::K, a)?;
        let v = self.proj(l, Target::V, a)?;
        self.kv[l].push(k, v, width);
        let ctx = self.tape.attention(q, self.kv[l].keys(), self.kv[l].values(), heads)?;
        let o = self.proj(l, Target::O, ctx)?;
        let x = self.tape.add(x, o)?;

        let m = self.tape.rmsnorm(x, mlp_norm, NORM_EPS)?;
        let gate = self.proj(l, Target::Gate, m)?;
        let gate = self.tape.gelu(gate)?;
        let up = self.proj(l, Target::Up, m)?;
        let hidden = self.tape.mul(gate, up)?;
        let down = self.proj(l, Target::Down, hidden)?;
        self.tape.add(x, down)
    }

    /// Add `α·D(h_s)` from `g` positions back for every connection into `l`.
    fn add_connections(&mut self, l: usize, mut h: Var, width: usize) -> Result<Var> {
        let spec = self.model.spec();
        let g = spec.group_size;
        let (pos, d) = (self.pos, self.model.config().d_hidden);
        let skip = g.saturating_sub(pos).min(width);
        if skip == width {
            return Ok(h);
        }
        let incoming: Vec<_> = spec.incoming(l).collect();
        for (idx, c) in incoming {
            let proj = self.model.down[idx];
            let src = self
                .down
                .fetch(&mut self.tape, c.source, pos + skip - g, pos + width - g)?;
            let t = &mut self.tape;
            let z = t.matmul(src, self.vars[proj.a.index()])?;
            let z = t.add_row(z, self.vars[proj.bias_a.index()])?;
            let z = t.matmul(z, self.vars[proj.b.index()])?;
            let z = t.add_row(z, self.vars[proj.bias_b.index()])?;
            let mut term = t.scale(z, spec.alpha)?;
            if skip > 0 {
                let zeros = t.constant(Tensor::zeros([self.batch, skip, d]));
                term = t.concat_seq(&[zeros, term])?;
            }
            h = t.add(h, term)?;
        }
        Ok(h)
    }
}

impl Model {
    /// Logits `[k, V]` for one token sequence, processed group by group.
    pub fn forward_grouped(&self, tokens: &[usize]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::param("forward: empty token sequence"));
        }
        let mut fw = Forward::new(self, 1, false)?;
        let logits = fw.run(tokens, tokens.len())?;
        let v = self.config().vocab_size;
        Tensor::new([tokens.len(), v], fw.tape().value(logits).data().to_vec())
    }

    /// Logits `[k, V]` with soft-token feedback of weight `lambda`.
    pub fn forward_soft_token(&self, tokens: &[usize], lambda: f32) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::param("forward: empty token sequence"));
        }
        let mut fw = Forward::new(self, 1, false)?;
        fw.set_feedback(Feedback::SoftToken { lambda })?;
        let logits = fw.run(tokens, tokens.len())?;
        let v = self.config().vocab_size;
        Tensor::new([tokens.len(), v], fw.tape().value(logits).data().to_vec())
    }

    /// Logits `[b, seq, V]` for equal-length rows.
    pub fn forward_batch(&self, ids: &[usize], seq: usize) -> Result<Tensor> {
        let batch = ids.len().checked_div(seq).unwrap_or(0);
        let mut fw = Forward::new(self, batch, false)?;
        let logits = fw.run(ids, seq)?;
        Ok(fw.tape().value(logits).clone().with_requires_grad(false))
    }
}

/// Draw one index from `softmax(logits / temperature)`.
pub fn sample_categorical<R: Rng + ?Sized>(logits: &[f32], temperature: f32, rng: &mut R) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::param("cannot sample from an empty distribution"));
    }
    let row = Tensor::new([1, logits.len()], logits.to_vec())?;
    let probs = softmax_rows(&row, temperature)?;
    let dist = WeightedIndex::new(probs.data()).map_err(|_| Error::NonFinite { op: "sample" })?;
    Ok(dist.sample(rng))
}
