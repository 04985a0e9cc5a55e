use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::model::ConnectionSpec;

/// Dependency graph over `(token, layer)` block applications.
///
/// Edges: `(i, l-1) -> (i, l)`, attention `(j, l-1) -> (i, l)` for `j < i`,
/// and for each connection `s -> l` with `i >= g`, `(i-g, s) -> (i, l)`.
#[derive(Clone, Debug)]
pub struct DepGraph {
    n_layers: usize,
    n_tokens: usize,
    succ: Vec<Vec<u32>>,
}

impl DepGraph {
    /// Graph for a validated connection spec.
    pub fn new(n_layers: usize, n_tokens: usize, spec: &ConnectionSpec) -> Result<Self> {
        spec.validate_for(n_layers)?;
        let pairs: Vec<(usize, usize)> = spec.connections().iter().map(|c| (c.source, c.dest)).collect();
        Self::build_raw(n_layers, n_tokens, &pairs, spec.group_size)
    }

    /// Graph for arbitrary `(source, dest)` pairs and offset `g`, without the
    /// downward-only and `g >= 1` checks. Such graphs may contain cycles.
    pub fn build_raw(n_layers: usize, n_tokens: usize, pairs: &[(usize, usize)], g: usize) -> Result<Self> {
        if n_layers == 0 || n_tokens == 0 {
            return Err(Error::param("depth analysis needs at least one layer and one token"));
        }
        if let Some(&(s, l)) = pairs.iter().find(|&&(s, l)| s >= n_layers || l >= n_layers) {
            return Err(Error::param(format!(
                "connection {s} -> {l} references a missing layer"
            )));
        }
        let n = n_layers * n_tokens;
        if n > u32::MAX as usize {
            return Err(Error::param("dependency graph too large"));
        }
        let mut graph = DepGraph {
            n_layers,
            n_tokens,
            succ: vec![Vec::new(); n],
        };
        for i in 0..n_tokens {
            for l in 1..n_layers {
                for j in 0..=i {
                    graph.edge((j, l - 1), (i, l));
                }
            }
            if i >= g {
                for &(s, l) in pairs {
                    graph.edge((i - g, s), (i, l));
                }
            }
        }
        Ok(graph)
    }

    fn id(&self, (i, l): (usize, usize)) -> usize {
        i * self.n_layers + l
    }

    fn edge(&mut self, from: (usize, usize), to: (usize, usize)) {
        let t = self.id(to) as u32;
        let f = self.id(from);
        self.succ[f].push(t);
    }

    pub fn node_count(&self) -> usize {
        self.succ.len()
    }

    pub fn edge_count(&self) -> usize {
        self.succ.iter().map(Vec::len).sum()
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    /// Direct successors of `(token, layer)`.
    pub fn successors(&self, node: (usize, usize)) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.succ[self.id(node)]
            .iter()
            .map(|&t| (t as usize / self.n_layers, t as usize % self.n_layers))
    }

    /// Kahn's algorithm; fails on a cycle.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let n = self.node_count();
        let mut indeg = vec![0usize; n];
        for s in &self.succ {
            for &t in s {
                indeg[t as usize] += 1;
            }
        }
        let mut ready: VecDeque<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(v) = ready.pop_front() {
            order.push(v);
            for &t in &self.succ[v] {
                let t = t as usize;
                indeg[t] -= 1;
                if indeg[t] == 0 {
                    ready.push_back(t);
                }
            }
        }
        if order.len() != n {
            let stuck = (0..n).find(|&v| indeg[v] > 0).expect("some node left");
            return Err(Error::Structural(format!(
                "dependency graph has a cycle through token {} layer {}",
                stuck / self.n_layers,
                stuck % self.n_layers
            )));
        }
        Ok(order)
    }

    /// Number of nodes on the longest path.
    pub fn longest_path(&self) -> Result<usize> {
        let order = self.topological_order()?;
        let mut depth = vec![1usize; self.node_count()];
        for v in order {
            for &t in &self.succ[v] {
                let t = t as usize;
                depth[t] = depth[t].max(depth[v] + 1);
            }
        }
        Ok(depth.into_iter().max().unwrap_or(0))
    }
}

/// Longest chain of block applications over `k` tokens.
pub fn max_depth(n_layers: usize, k: usize, spec: &ConnectionSpec) -> Result<usize> {
    DepGraph::new(n_layers, k, spec)?.longest_path()
}

/// As [`max_depth`] for unchecked pairs and offset; reports cycles as
/// structural errors.
pub fn max_depth_raw(n_layers: usize, k: usize, pairs: &[(usize, usize)], g: usize) -> Result<usize> {
    DepGraph::build_raw(n_layers, k, pairs, g)?.longest_path()
}

/// Group iterations for `k` tokens: `ceil(k / g)`.
pub fn sequential_steps(k: usize, g: usize) -> usize {
    if k == 0 {
        0
    } else {
        k.div_ceil(g.max(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(pairs: &[(usize, usize)], g: usize) -> ConnectionSpec {
        ConnectionSpec::new(pairs.iter().copied(), 1.0, g, 1).unwrap()
    }

    #[test]
    fn plain_stack_depth_is_layer_count() {
        for k in [1, 2, 9, 64] {
            assert_eq!(max_depth(16, k, &ConnectionSpec::none()).unwrap(), 16);
        }
    }

    #[test]
    fn single_token_ignores_connections() {
        assert_eq!(max_depth(16, 1, &spec(&[(15, 0), (8, 3)], 1)).unwrap(), 16);
    }

    #[test]
    fn top_to_bottom_connection_scales_as_k_l_over_g() {
        for (g, want) in [(1, 1024), (4, 256), (16, 64)] {
            assert_eq!(max_depth(16, 64, &spec(&[(15, 0)], g)).unwrap(), want);
        }
    }

    #[test]
    fn zero_offset_loop_is_a_structural_error() {
        let err = max_depth_raw(4, 3, &[(3, 0)], 0).unwrap_err();
        assert!(matches!(err, Error::Structural(_)), "{err}");
        // An upward pair at zero offset is still acyclic.
        assert_eq!(max_depth_raw(4, 1, &[(0, 3)], 0).unwrap(), 4);
    }

    #[test]
    fn sequential_steps_is_ceiling() {
        assert_eq!(sequential_steps(154, 4), 39);
        assert_eq!(sequential_steps(37, 1), 37);
        assert_eq!(sequential_steps(5, 9), 1);
        assert_eq!(sequential_steps(8, 8), 1);
    }
}
