//! Helpers shared by the integration tests: small random models and a plain
//! f64 token-by-token reference forward pass.

#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use turboconn::model::{ConnectionSpec, Model, ModelConfig, Target};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn config(n_layers: usize, d_hidden: usize, n_heads: usize, vocab: usize, max_seq: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_hidden,
        n_heads,
        d_kv: d_hidden,
        d_inter: d_hidden + d_hidden / 2,
        vocab_size: vocab,
        max_seq,
    }
}

/// A random non-empty set of strictly downward connections.
pub fn random_pairs<R: Rng>(rng: &mut R, n_layers: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for s in 1..n_layers {
        for l in 0..s {
            if rng.random_bool(0.5) {
                pairs.push((s, l));
            }
        }
    }
    if pairs.is_empty() {
        pairs.push((n_layers - 1, 0));
    }
    pairs
}

/// Overwrite every parameter with `N(0, std)` draws so no path is trivially
/// zero. Norm weights are kept near one.
pub fn randomize<R: Rng>(model: &mut Model, rng: &mut R, std: f32) {
    let normal = Normal::new(0.0f32, std).unwrap();
    for p in model.params_mut().iter_mut() {
        let is_norm = p.name.ends_with("norm");
        for x in p.tensor.data_mut() {
            let z = normal.sample(rng);
            *x = if is_norm { 1.0 + z } else { z };
        }
    }
}

/// Scale the connection projections' second factor and bias so that the
/// `α·D` term has unit-order size for large `α`.
pub fn damp_connections(model: &mut Model, factor: f32) {
    for p in model.params_mut().iter_mut() {
        if p.name.starts_with("conn.") && (p.name.ends_with(".b") || p.name.ends_with(".bias_b")) {
            p.tensor.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }
}

fn param<'a>(model: &'a Model, name: &str) -> &'a [f32] {
    model
        .params()
        .by_name(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"))
        .data()
}

/// `x[in] · W[in, out]` with `W` stored row-major.
fn matvec(x: &[f64], w: &[f32], out: usize) -> Vec<f64> {
    let mut y = vec![0.0; out];
    for (i, &xi) in x.iter().enumerate() {
        for (o, yo) in y.iter_mut().enumerate() {
            *yo += xi * f64::from(w[i * out + o]);
        }
    }
    y
}

fn project(model: &Model, l: usize, t: Target, x: &[f64], out: usize) -> Vec<f64> {
    let mut y = matvec(x, param(model, &format!("layers.{l}.{t}")), out);
    if let Some(lora) = model.lora() {
        if lora.targets.contains(&t) {
            let xa = matvec(x, param(model, &format!("layers.{l}.{t}.lora_a")), lora.rank);
            let delta = matvec(&xa, param(model, &format!("layers.{l}.{t}.lora_b")), out);
            y.iter_mut().zip(delta).for_each(|(a, b)| *a += b);
        }
    }
    y
}

fn rmsnorm(x: &[f64], w: &[f32]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-5).sqrt();
    x.iter().zip(w).map(|(v, &g)| v * inv * f64::from(g)).collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn add(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

/// Logits `[k][V]` computed one position at a time. Position `i` of layer `l`
/// receives `α·D(h_s^(i−g))` for every connection `s → l` once `i ≥ g`; with
/// `soft` set, position `i > 0` starts from the soft-token blend.
pub fn reference_logits(model: &Model, tokens: &[usize], soft: Option<f64>) -> Vec<Vec<f64>> {
    let cfg = model.config();
    let spec: &ConnectionSpec = model.spec();
    let (d, v, inter, heads) = (cfg.d_hidden, cfg.vocab_size, cfg.d_inter, cfg.n_heads);
    let dh = d / heads;
    let g = spec.group_size;
    let tok = param(model, "tok_emb");
    let pos = param(model, "pos_emb");
    let row = |t: &[f32], i: usize| -> Vec<f64> { t[i * d..(i + 1) * d].iter().map(|&x| f64::from(x)).collect() };

    let mut keys = vec![Vec::<Vec<f64>>::new(); cfg.n_layers];
    let mut values = vec![Vec::<Vec<f64>>::new(); cfg.n_layers];
    let mut hidden = vec![Vec::<Vec<f64>>::new(); cfg.n_layers];
    let mut logits: Vec<Vec<f64>> = Vec::new();

    for (i, &t) in tokens.iter().enumerate() {
        let mut x = row(tok, t);
        add(&mut x, &row(pos, i));
        if let (Some(lambda), Some(prev)) = (soft, logits.last()) {
            let p = softmax(prev);
            let mut mix = vec![0.0; d];
            for (j, pj) in p.iter().enumerate() {
                add(&mut mix, &row(tok, j).iter().map(|e| e * pj).collect::<Vec<_>>());
            }
            x = x
                .iter()
                .zip(&mix)
                .map(|(e, m)| (1.0 - lambda) * e + lambda * m)
                .collect();
        }
        for l in 0..cfg.n_layers {
            let a = rmsnorm(&x, param(model, &format!("layers.{l}.attn_norm")));
            let q = project(model, l, Target::Q, &a, d);
            keys[l].push(project(model, l, Target::K, &a, d));
            values[l].push(project(model, l, Target::V, &a, d));
            let mut ctx = vec![0.0; d];
            for h in 0..heads {
                let r = h * dh..(h + 1) * dh;
                let scores: Vec<f64> = keys[l]
                    .iter()
                    .map(|k| {
                        q[r.clone()].iter().zip(&k[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let p = softmax(&scores);
                for (pj, vj) in p.iter().zip(&values[l]) {
                    for c in r.clone() {
                        ctx[c] += pj * vj[c];
                    }
                }
            }
            add(&mut x, &project(model, l, Target::O, &ctx, d));
            let m = rmsnorm(&x, param(model, &format!("layers.{l}.mlp_norm")));
            let gate = project(model, l, Target::Gate, &m, inter);
            let up = project(model, l, Target::Up, &m, inter);
            let hmid: Vec<f64> = gate.iter().zip(&up).map(|(a, b)| gelu(*a) * b).collect();
            add(&mut x, &project(model, l, Target::Down, &hmid, d));
            if i >= g {
                for c in spec.connections().iter().filter(|c| c.dest == l) {
                    let pre = format!("conn.{}_{}", c.source, c.dest);
                    let src = &hidden[c.source][i - g];
                    let mut z = matvec(src, param(model, &format!("{pre}.a")), spec.proj_rank);
                    add(
                        &mut z,
                        &param(model, &format!("{pre}.bias_a"))
                            .iter()
                            .map(|&b| f64::from(b))
                            .collect::<Vec<_>>(),
                    );
                    let mut y = matvec(&z, param(model, &format!("{pre}.b")), d);
                    add(
                        &mut y,
                        &param(model, &format!("{pre}.bias_b"))
                            .iter()
                            .map(|&b| f64::from(b))
                            .collect::<Vec<_>>(),
                    );
                    let alpha = f64::from(spec.alpha);
                    add(&mut x, &y.iter().map(|t| alpha * t).collect::<Vec<_>>());
                }
            }
            hidden[l].push(x.clone());
        }
        let f = rmsnorm(&x, param(model, "final_norm"));
        logits.push(matvec(&f, param(model, "lm_head"), v));
    }
    logits
}

/// Largest absolute difference between model logits `[k, V]` and the reference.
pub fn max_diff(got: &[f32], want: &[Vec<f64>]) -> f64 {
    want.iter()
        .flatten()
        .zip(got)
        .map(|(w, &g)| (w - f64::from(g)).abs())
        .fold(0.0, f64::max)
}

pub fn random_tokens<R: Rng>(rng: &mut R, k: usize, vocab: usize) -> Vec<usize> {
    (0..k).map(|_| rng.random_range(0..vocab)).collect()
}

/// Ensure `(s, l)` pairs are valid for a spec.
pub fn spec(pairs: &[(usize, usize)], alpha: f32, g: usize, r: usize) -> ConnectionSpec {
    ConnectionSpec::new(pairs.iter().copied(), alpha, g, r).unwrap()
}

/// Per-parameter finite-difference check of the full forward pass. The
/// logits are reduced with fixed random weights. The analytic side
/// backpropagates through the model's tape; the numeric side takes central
/// differences of the f64 reference pass, so f32 rounding in the forward pass
/// does not swamp the difference quotient. Returns `(name, rel_error)` for
/// every trainable parameter.
pub fn model_gradcheck<R: Rng>(
    model: &Model,
    tokens: &[usize],
    rng: &mut R,
    samples: usize,
    eps: f32,
) -> Vec<(String, f64)> {
    use turboconn::model::Forward;
    use turboconn::numcore::Tensor;

    let k = tokens.len();
    let v = model.config().vocab_size;
    let weights: Vec<f32> = (0..k * v).map(|_| rng.random_range(-1.0..1.0)).collect();
    let weigh = |m: &Model| -> f64 {
        let logits = reference_logits(m, tokens, None);
        logits
            .iter()
            .flatten()
            .zip(&weights)
            .map(|(&x, &w)| x * f64::from(w))
            .sum()
    };

    let mut fw = Forward::new(model, 1, true).unwrap();
    let logits = fw.run(tokens, k).unwrap();
    let tape = fw.tape_mut();
    let w = tape.constant(Tensor::new([1, k, v], weights.clone()).unwrap());
    let weighted = tape.mul(logits, w).unwrap();
    let loss = tape.sum(weighted).unwrap();
    let (grads, vars) = fw.into_gradients(loss).unwrap();

    let mut out = Vec::new();
    for (id, p) in model.params().iter() {
        if !p.tensor.requires_grad() {
            continue;
        }
        let n = p.tensor.numel();
        let zeros = vec![0.0; n];
        let g = grads.get(vars[id.index()]).unwrap_or(&zeros);
        let coords: Vec<usize> = if n <= samples {
            (0..n).collect()
        } else {
            rand::seq::index::sample(rng, n, samples).into_vec()
        };
        let (mut num, mut ana) = (Vec::new(), Vec::new());
        let mut probe = model.clone();
        for c in coords {
            let base = p.tensor.data()[c];
            let (hi, lo) = (base + eps, base - eps);
            probe.params_mut().get_mut(id).data_mut()[c] = hi;
            let plus = weigh(&probe);
            probe.params_mut().get_mut(id).data_mut()[c] = lo;
            let minus = weigh(&probe);
            probe.params_mut().get_mut(id).data_mut()[c] = base;
            num.push((plus - minus) / (f64::from(hi) - f64::from(lo)));
            ana.push(f64::from(g[c]));
        }
        let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff: Vec<f64> = ana.iter().zip(&num).map(|(a, b)| a - b).collect();
        let scale = norm(&ana).max(norm(&num));
        let rel = if scale == 0.0 { 0.0 } else { norm(&diff) / scale };
        out.push((p.name.clone(), rel));
    }
    out
}

/// Longest path by exhaustive enumeration: walk every path from every start
/// node, following the dataflow rules directly rather than a built graph.
pub fn brute_force_depth(n_layers: usize, k: usize, pairs: &[(usize, usize)], g: usize) -> usize {
    fn walk(i: usize, l: usize, n_layers: usize, k: usize, pairs: &[(usize, usize)], g: usize) -> usize {
        let mut best = 1;
        // Same token or a later one, one layer up.
        if l + 1 < n_layers {
            for j in i..k {
                best = best.max(1 + walk(j, l + 1, n_layers, k, pairs, g));
            }
        }
        for &(s, dest) in pairs {
            if s == l && i + g < k {
                best = best.max(1 + walk(i + g, dest, n_layers, k, pairs, g));
            }
        }
        best
    }
    let mut best = 0;
    for i in 0..k {
        for l in 0..n_layers {
            best = best.max(walk(i, l, n_layers, k, pairs, g));
        }
    }
    best
}

/// Every strictly downward `(s, l)` pair for `n_layers` layers.
pub fn all_pairs(n_layers: usize) -> Vec<(usize, usize)> {
    (1..n_layers).flat_map(|s| (0..s).map(move |l| (s, l))).collect()
}

/// Parity by folding XOR over the bits read back from the prompt text.
pub fn xor_fold(prompt: &str) -> u8 {
    let body = prompt
        .strip_prefix(turboconn::tasks::PARITY_HEADER)
        .unwrap()
        .strip_suffix("\nAnswer:")
        .unwrap();
    body.split(' ').map(|b| b.parse::<u8>().unwrap()).fold(0, |a, b| a ^ b)
}

/// Recursive-descent evaluator over the rendered expression, in exact
/// integer arithmetic.
struct Parser<'a> {
    s: &'a [u8],
    at: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<u8> {
        self.s.get(self.at).copied()
    }

    fn eat(&mut self, c: u8) {
        assert_eq!(
            self.peek(),
            Some(c),
            "at {} of {:?}",
            self.at,
            std::str::from_utf8(self.s)
        );
        self.at += 1;
    }

    /// expr := term ((' + ' | ' - ' | ' * ') term)*, one operator per level.
    fn expr(&mut self) -> i128 {
        let mut acc = self.term();
        let mut op = None;
        while self.peek() == Some(b' ') {
            self.eat(b' ');
            let o = self.peek().unwrap();
            self.at += 1;
            self.eat(b' ');
            assert!(op.is_none() || op == Some(o), "mixed operators without parentheses");
            op = Some(o);
            let rhs = self.term();
            acc = match o {
                b'+' => acc.checked_add(rhs),
                b'-' => acc.checked_sub(rhs),
                b'*' => acc.checked_mul(rhs),
                _ => panic!("unknown operator {}", o as char),
            }
            .expect("no overflow");
        }
        acc
    }

    /// term := digit | '(' expr ')' | '-' term
    fn term(&mut self) -> i128 {
        match self.peek().unwrap() {
            b'-' => {
                self.eat(b'-');
                -self.term()
            }
            b'(' => {
                self.eat(b'(');
                let v = self.expr();
                self.eat(b')');
                v
            }
            d @ b'0'..=b'9' => {
                self.at += 1;
                i128::from(d - b'0')
            }
            c => panic!("unexpected {:?}", c as char),
        }
    }
}

pub fn evaluate(expr: &str) -> i128 {
    let mut p = Parser {
        s: expr.as_bytes(),
        at: 0,
    };
    let v = p.term();
    assert_eq!(p.at, expr.len(), "trailing input in {expr}");
    v
}

pub fn arith_expr(prompt: &str) -> &str {
    prompt
        .strip_prefix(turboconn::tasks::ARITH_HEADER)
        .unwrap()
        .strip_suffix(" =\nAnswer:")
        .unwrap()
}
