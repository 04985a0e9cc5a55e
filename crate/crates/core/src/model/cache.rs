//! Per-layer key/value lists and the hidden-state window feeding downward
//! connections.

use std::collections::{BTreeMap, VecDeque};

use crate::error::{Error, Result};
use crate::numcore::{Tape, Var};

/// Keys and values of one layer, one `[b, t, d]` entry per processed group.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    keys: Vec<Var>,
    values: Vec<Var>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push(&mut self, keys: Var, values: Var, width: usize) {
        self.keys.push(keys);
        self.values.push(values);
        self.len += width;
    }

    pub fn keys(&self) -> &[Var] {
        &self.keys
    }

    pub fn values(&self) -> &[Var] {
        &self.values
    }
}

#[derive(Clone, Copy, Debug)]
struct Entry {
    start: usize,
    width: usize,
    var: Var,
}

/// For each source layer, the hidden states of the most recent `window`
/// positions. A chunk starting at `pos` reads positions `pos - window ..`.
#[derive(Clone, Debug)]
pub struct DownCache {
    window: usize,
    entries: BTreeMap<usize, VecDeque<Entry>>,
}

impl DownCache {
    pub fn new(window: usize) -> Self {
        DownCache {
            window,
            entries: BTreeMap::new(),
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Store `h_source` for positions `start .. start + width` and drop states
    /// no later chunk can reach.
    pub fn push(&mut self, source: usize, start: usize, width: usize, var: Var) {
        let end = start + width;
        let q = self.entries.entry(source).or_default();
        q.push_back(Entry { start, width, var });
        let keep_from = end.saturating_sub(self.window);
        while q.front().is_some_and(|e| e.start + e.width <= keep_from) {
            q.pop_front();
        }
    }

    /// Number of cached positions for `source`.
    pub fn cached(&self, source: usize) -> usize {
        self.entries.get(&source).map_or(0, |q| q.iter().map(|e| e.width).sum())
    }

    /// Hidden states of `source` at positions `lo .. hi` as `[b, hi - lo, d]`.
    pub fn fetch(&self, tape: &mut Tape, source: usize, lo: usize, hi: usize) -> Result<Var> {
        let missing = || Error::State(format!("down cache for layer {source} lacks positions {lo}..{hi}"));
        let q = self.entries.get(&source).ok_or_else(missing)?;
        let mut pieces = Vec::new();
        let mut next = lo;
        for e in q {
            let (s, t) = (e.start, e.start + e.width);
            if t <= next || s >= hi {
                continue;
            }
            if s > next {
                return Err(missing());
            }
            let take_to = t.min(hi);
            if s == next && take_to == t {
                pieces.push(e.var);
            } else {
                pieces.push(tape.slice(e.var, 1, next - s, take_to - next)?);
            }
            next = take_to;
            if next == hi {
                break;
            }
        }
        if next != hi {
            return Err(missing());
        }
        if pieces.len() == 1 {
            Ok(pieces[0])
        } else {
            tape.concat_seq(&pieces)
        }
    }
}
