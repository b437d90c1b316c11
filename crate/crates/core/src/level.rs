// SPDX-License-Identifier: Apache-2.0

//! Topological levelization and the multi-frequency level encoding.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::CircuitGraph;

/// Default number of frequency components in [`level_encoding`].
pub const DEFAULT_FREQUENCIES: usize = 8;

/// Nodes grouped by topological sorting order.
///
/// A node's level is one more than the largest level among its cell/net
/// predecessors, or zero without predecessors, so every timing edge goes from
/// a strictly lower level to a strictly higher one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSchedule {
    pub levels: Vec<Vec<usize>>,
    pub node_level: Vec<usize>,
}

impl LevelSchedule {
    /// Largest level index (`L`). Zero for empty and single-level graphs.
    pub fn max_level(&self) -> usize {
        self.levels.len().saturating_sub(1)
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(Vec::len).collect()
    }

    /// Builds a schedule from per-node levels.
    pub fn from_node_levels(node_level: Vec<usize>) -> Self {
        let num = node_level.iter().map(|&l| l + 1).max().unwrap_or(0);
        let mut levels = vec![Vec::new(); num];
        for (v, &l) in node_level.iter().enumerate() {
            levels[l].push(v);
        }
        LevelSchedule { levels, node_level }
    }
}

/// Levelizes over cell and net edges (net_inv edges are ignored).
pub fn topo_levels(graph: &CircuitGraph) -> Result<LevelSchedule> {
    let n = graph.num_nodes();
    let adj = graph.adjacency();
    let mut indeg = vec![0usize; n];
    for e in graph.edges.iter().filter(|e| e.kind.is_timing()) {
        indeg[e.dst] += 1;
    }
    let mut node_level = vec![0usize; n];
    let mut frontier: Vec<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut seen = 0usize;
    while !frontier.is_empty() {
        seen += frontier.len();
        let mut next = Vec::new();
        for &v in &frontier {
            for &eid in adj.outgoing(v) {
                let e = &graph.edges[eid];
                if !e.kind.is_timing() {
                    continue;
                }
                node_level[e.dst] = node_level[e.dst].max(node_level[v] + 1);
                indeg[e.dst] -= 1;
                if indeg[e.dst] == 0 {
                    next.push(e.dst);
                }
            }
        }
        frontier = next;
    }
    if seen != n {
        let node = (0..n).find(|&v| indeg[v] > 0).unwrap_or(0);
        return Err(Error::Cycle { node });
    }
    Ok(LevelSchedule::from_node_levels(node_level))
}

/// `[x, sin(2^0 pi x/L), cos(2^0 pi x/L), ..., sin(2^(N-1) pi x/L), cos(2^(N-1) pi x/L)]`.
pub fn level_encoding(x: usize, n_freq: usize, max_level: usize) -> Result<Vec<f64>> {
    if max_level == 0 {
        return Err(Error::InvalidArgument("maximum level must be positive".into()));
    }
    if n_freq == 0 {
        return Err(Error::InvalidArgument(
            "at least one frequency component is required".into(),
        ));
    }
    if x > max_level {
        return Err(Error::InvalidArgument(format!(
            "level {x} exceeds maximum level {max_level}"
        )));
    }
    Ok(encode_unchecked(x, n_freq, max_level))
}

pub(crate) fn encode_unchecked(x: usize, n_freq: usize, max_level: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * n_freq + 1);
    out.push(x as f64);
    let base = PI * x as f64 / max_level as f64;
    let mut scale = 1.0f64;
    for _ in 0..n_freq {
        let a = scale * base;
        out.push(a.sin());
        out.push(a.cos());
        scale *= 2.0;
    }
    out
}

/// Level histogram for reporting.
pub fn level_histogram(schedule: &LevelSchedule) -> Vec<(usize, usize)> {
    schedule
        .levels
        .iter()
        .enumerate()
        .map(|(l, nodes)| (l, nodes.len()))
        .collect()
}
