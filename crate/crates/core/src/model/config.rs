use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decoder hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_hidden: usize,
    pub n_heads: usize,
    /// Total key/value width. The desk model uses full multi-head attention,
    /// so this must equal `d_hidden`; it is kept for parameter accounting.
    pub d_kv: usize,
    pub d_inter: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("d_hidden", self.d_hidden),
            ("n_heads", self.n_heads),
            ("d_kv", self.d_kv),
            ("d_inter", self.d_inter),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::param(format!("model config: {name} must be at least 1")));
        }
        if !self.d_hidden.is_multiple_of(self.n_heads) {
            return Err(Error::param(format!(
                "model config: d_hidden {} is not divisible by n_heads {}",
                self.d_hidden, self.n_heads
            )));
        }
        if self.d_kv != self.d_hidden {
            return Err(Error::param(format!(
                "model config: d_kv {} must equal d_hidden {} (grouped-query attention is not supported)",
                self.d_kv, self.d_hidden
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_hidden / self.n_heads
    }
}

/// A downward connection from the output of layer `source` to the output of
/// the strictly lower layer `dest`, read `group_size` tokens later.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Connection {
    pub source: usize,
    pub dest: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectionSpec {
    /// Sorted, duplicate-free.
    connections: Vec<Connection>,
    pub alpha: f32,
    pub group_size: usize,
    pub proj_rank: usize,
}

impl ConnectionSpec {
    pub fn new(
        connections: impl IntoIterator<Item = (usize, usize)>,
        alpha: f32,
        group_size: usize,
        proj_rank: usize,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (source, dest) in connections {
            if !seen.insert(Connection { source, dest }) {
                return Err(Error::param(format!("duplicate connection {source} -> {dest}")));
            }
        }
        let spec = ConnectionSpec {
            connections: seen.into_iter().collect(),
            alpha,
            group_size,
            proj_rank,
        };
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::param(format!(
                "alpha must be finite and non-negative, got {alpha}"
            )));
        }
        if group_size == 0 || proj_rank == 0 {
            return Err(Error::param("group_size and proj_rank must be at least 1"));
        }
        for c in &spec.connections {
            if c.dest >= c.source {
                return Err(Error::param(format!(
                    "connection {} -> {} is not strictly downward",
                    c.source, c.dest
                )));
            }
        }
        Ok(spec)
    }

    /// No connections; every position is processed in one group.
    pub fn none() -> Self {
        ConnectionSpec {
            connections: Vec::new(),
            alpha: 0.0,
            group_size: usize::MAX,
            proj_rank: 1,
        }
    }

    pub fn connections(&self) -> &[Connection] {
        &self.connections
    }

    pub fn is_empty(&self) -> bool {
        self.connections.is_empty()
    }

    pub fn len(&self) -> usize {
        self.connections.len()
    }

    /// Check that every layer index exists in an `n_layers` stack.
    pub fn validate_for(&self, n_layers: usize) -> Result<()> {
        if let Some(c) = self.connections.iter().find(|c| c.source >= n_layers) {
            return Err(Error::param(format!(
                "connection {} -> {} references a layer beyond {} layers",
                c.source, c.dest, n_layers
            )));
        }
        Ok(())
    }

    pub fn sources(&self) -> BTreeSet<usize> {
        self.connections.iter().map(|c| c.source).collect()
    }

    pub fn incoming(&self, dest: usize) -> impl Iterator<Item = (usize, Connection)> + '_ {
        self.connections
            .iter()
            .copied()
            .enumerate()
            .filter(move |(_, c)| c.dest == dest)
    }
}

/// Parse `s -> l` pairs separated by any whitespace.
pub fn parse_connections(text: &str) -> Result<Vec<(usize, usize)>> {
    let tokens: Vec<&str> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace)
        .collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        // Accept both "6 -> 0" and "6->0".
        let (s, d, used) = if let Some((s, d)) = tokens[i].split_once("->") {
            (s, d, 1)
        } else if tokens.get(i + 1) == Some(&"->") && i + 2 < tokens.len() {
            (tokens[i], tokens[i + 2], 3)
        } else {
            return Err(Error::param(format!("malformed connection near {:?}", tokens[i])));
        };
        let parse = |x: &str| {
            x.trim()
                .parse::<usize>()
                .map_err(|_| Error::param(format!("bad layer index {x:?}")))
        };
        out.push((parse(s)?, parse(d)?));
        i += used;
    }
    Ok(out)
}

const LLAMA1B_15: &str = "
6 -> 0     8 -> 0     8 -> 2     10 -> 0    10 -> 2
10 -> 4    12 -> 0    12 -> 2    12 -> 4    12 -> 6
14 -> 0    14 -> 2    14 -> 4    14 -> 6    14 -> 8
";

const LLAMA8B_45: &str = "
14 -> 7    16 -> 7    16 -> 9    18 -> 7    18 -> 9
18 -> 11   20 -> 7    20 -> 9    20 -> 11   20 -> 13
22 -> 7    22 -> 9    22 -> 11   22 -> 13   22 -> 15
24 -> 7    24 -> 9    24 -> 11   24 -> 13   24 -> 15
24 -> 17   26 -> 7    26 -> 9    26 -> 11   26 -> 13
26 -> 15   26 -> 17   26 -> 19   28 -> 7    28 -> 9
28 -> 11   28 -> 13   28 -> 15   28 -> 17   28 -> 19
28 -> 21   30 -> 7    30 -> 9    30 -> 11   30 -> 13
30 -> 15   30 -> 17   30 -> 19   30 -> 21   30 -> 23
";

const QWEN17B_21: &str = "
12 -> 4    15 -> 4    15 -> 7    18 -> 4    18 -> 7
18 -> 10   21 -> 4    21 -> 7    21 -> 10   21 -> 13
24 -> 4    24 -> 7    24 -> 10   24 -> 13   24 -> 16
27 -> 4    27 -> 7    27 -> 10   27 -> 13   27 -> 16
27 -> 19
";

/// Triangular connection pattern: the `m`-th of `n_sources` sources (stride
/// apart, ending at `top`) feeds the first `m` destinations
/// `first_dest, first_dest + stride, ...`.
pub fn triangular(top: usize, stride: usize, n_sources: usize, first_dest: usize) -> Result<Vec<(usize, usize)>> {
    if stride == 0 || n_sources == 0 || (n_sources - 1) * stride > top {
        return Err(Error::param("triangular pattern does not fit below the top layer"));
    }
    let mut out = Vec::new();
    for m in 1..=n_sources {
        let source = top - (n_sources - m) * stride;
        for j in 0..m {
            let dest = first_dest + j * stride;
            if dest >= source {
                return Err(Error::param(format!("triangular pattern produces {source} -> {dest}")));
            }
            out.push((source, dest));
        }
    }
    Ok(out)
}

pub const PRESET_NAMES: [&str; 3] = ["llama1b-15", "llama8b-45", "qwen17b-21"];

/// Resolve a named preset: the three shipped tables, `dense-<L>` for a
/// triangular pattern scaled to an `L`-layer stack, or `none`.
pub fn connection_preset(name: &str) -> Result<Vec<(usize, usize)>> {
    match name {
        "llama1b-15" => parse_connections(LLAMA1B_15),
        "llama8b-45" => parse_connections(LLAMA8B_45),
        "qwen17b-21" => parse_connections(QWEN17B_21),
        "none" => Ok(Vec::new()),
        other => {
            let layers = other
                .strip_prefix("dense-")
                .and_then(|l| l.parse::<usize>().ok())
                .filter(|&l| l >= 2)
                .ok_or_else(|| Error::param(format!("unknown connection preset {other:?}")))?;
            triangular(layers - 1, 1, layers / 2, 0)
        }
    }
}

/// A preset name, or a path to a file of `s -> l` lines.
pub fn resolve_connections(preset_or_file: &str) -> Result<Vec<(usize, usize)>> {
    match connection_preset(preset_or_file) {
        Ok(c) => Ok(c),
        Err(preset_err) => {
            let path = Path::new(preset_or_file);
            if !path.exists() {
                return Err(preset_err);
            }
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_connections(&text)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn appendix_tables_have_expected_sizes() {
        assert_eq!(connection_preset("llama1b-15").unwrap().len(), 15);
        assert_eq!(connection_preset("llama8b-45").unwrap().len(), 45);
        assert_eq!(connection_preset("qwen17b-21").unwrap().len(), 21);
    }

    #[test]
    fn appendix_tables_follow_the_triangular_rule() {
        let sorted = |mut v: Vec<(usize, usize)>| {
            v.sort_unstable();
            v
        };
        assert_eq!(
            sorted(connection_preset("llama1b-15").unwrap()),
            sorted(triangular(14, 2, 5, 0).unwrap())
        );
        assert_eq!(
            sorted(connection_preset("llama8b-45").unwrap()),
            sorted(triangular(30, 2, 9, 7).unwrap())
        );
        assert_eq!(
            sorted(connection_preset("qwen17b-21").unwrap()),
            sorted(triangular(27, 3, 6, 4).unwrap())
        );
    }

    #[test]
    fn dense_preset_for_four_layers() {
        assert_eq!(connection_preset("dense-4").unwrap(), vec![(2, 0), (3, 0), (3, 1)]);
        assert!(connection_preset("dense-1").is_err());
        assert!(connection_preset("bogus").is_err());
    }

    #[test]
    fn parser_accepts_both_spacings() {
        assert_eq!(parse_connections("6 -> 0\n8->2  # note").unwrap(), vec![(6, 0), (8, 2)]);
        assert!(parse_connections("6 <- 0").is_err());
        assert!(parse_connections("x -> 0").is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(ConnectionSpec::new([(3, 3)], 1.0, 1, 4).is_err());
        assert!(ConnectionSpec::new([(1, 2)], 1.0, 1, 4).is_err());
        assert!(ConnectionSpec::new([(2, 0), (2, 0)], 1.0, 1, 4).is_err());
        assert!(ConnectionSpec::new([(2, 0)], -1.0, 1, 4).is_err());
        assert!(ConnectionSpec::new([(2, 0)], 1.0, 0, 4).is_err());
        let spec = ConnectionSpec::new([(3, 1), (2, 0)], 100.0, 4, 8).unwrap();
        assert_eq!(spec.connections()[0], Connection { source: 2, dest: 0 });
        assert!(spec.validate_for(4).is_ok());
        assert!(spec.validate_for(3).is_err());
    }

    #[test]
    fn model_config_validation() {
        let mut cfg = ModelConfig {
            n_layers: 2,
            d_hidden: 16,
            n_heads: 4,
            d_kv: 16,
            d_inter: 32,
            vocab_size: 10,
            max_seq: 8,
        };
        assert!(cfg.validate().is_ok());
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        cfg.n_heads = 4;
        cfg.d_kv = 8;
        assert!(cfg.validate().is_err());
        cfg.d_kv = 16;
        cfg.max_seq = 0;
        assert!(cfg.validate().is_err());
    }
}
