// SPDX-License-Identifier: Apache-2.0

//! Order-preserving graph partition.
//!
//! Consecutive topological levels are accumulated into a core while the core
//! stays below `max_size` nodes. Each emitted piece is padded with up to `pad`
//! preceding and `pad` following whole levels. Padding nodes never take part
//! in losses or gradients; they only give core nodes their neighbourhoods.
//!
//! A cell edge can span many levels, so whole-level padding alone does not
//! reach every `pad`-hop predecessor of a core node. Those predecessors are
//! added as *halo* nodes, also padding, which sit before the level window.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::CircuitGraph;
use crate::level::LevelSchedule;

/// Default padding depth: the number of stacked message-passing layers.
pub const DEFAULT_PAD: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionConfig {
    /// Maximum core size `m`.
    pub max_size: usize,
    /// Padding depth `k` in levels (and in predecessor hops for the halo).
    pub pad: usize,
    /// Emit a level that is too large on its own as a single core instead of
    /// failing.
    pub split_oversized: bool,
}

impl PartitionConfig {
    pub fn new(max_size: usize, pad: usize) -> Self {
        PartitionConfig {
            max_size,
            pad,
            split_oversized: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    PadBefore,
    Core,
    PadAfter,
    Halo,
}

/// One partition piece with its mapping back to the parent graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubGraph {
    pub parent: String,
    pub index: usize,
    pub local_graph: CircuitGraph,
    /// Parent level range of the core (half-open).
    pub core_levels: Range<usize>,
    pub pad_levels_before: Range<usize>,
    pub pad_levels_after: Range<usize>,
    pub role: Vec<NodeRole>,
    pub core_mask: Vec<bool>,
    pub local_to_parent: Vec<usize>,
    /// Parent level of each local node.
    pub parent_level: Vec<usize>,
}

impl SubGraph {
    pub fn num_core(&self) -> usize {
        self.core_mask.iter().filter(|&&c| c).count()
    }

    pub fn is_unpadded(&self) -> bool {
        self.pad_levels_before.is_empty()
            && self.pad_levels_after.is_empty()
            && !self.role.contains(&NodeRole::Halo)
    }

    /// Local ids of nodes inside the level window (everything except halo).
    pub fn window_nodes(&self) -> Vec<usize> {
        (0..self.role.len())
            .filter(|&v| self.role[v] != NodeRole::Halo)
            .collect()
    }

    /// The local graph restricted to the level window: exactly the node set
    /// the level-based algorithm selects, with induced edges. Node ids are
    /// renumbered densely in local order; the returned map gives local ids.
    pub fn window_graph(&self) -> (CircuitGraph, Vec<usize>) {
        let keep = self.window_nodes();
        let g = induced_subgraph(&self.local_graph, &keep, format!("{}.window", self.local_graph.name));
        (g, keep)
    }
}

/// Splits `graph` along level boundaries.
pub fn partition(
    graph: &CircuitGraph,
    schedule: &LevelSchedule,
    cfg: &PartitionConfig,
) -> Result<Vec<SubGraph>> {
    if cfg.max_size == 0 {
        return Err(Error::InvalidArgument("maximum sub-graph size must be positive".into()));
    }
    let levels = &schedule.levels;
    let n_levels = levels.len();
    let k = cfg.pad;

    // (core start, core end) in level indices.
    let mut cores: Vec<Range<usize>> = Vec::new();
    let mut i = 0usize;
    let mut j = 0usize;
    let mut acc = 0usize;
    while i < n_levels {
        if acc + levels[i].len() < cfg.max_size {
            acc += levels[i].len();
            i += 1;
        } else if acc == 0 {
            // The level alone does not fit.
            if !cfg.split_oversized {
                return Err(Error::OversizedLevel {
                    level: i,
                    size: levels[i].len(),
                    max_size: cfg.max_size,
                });
            }
            cores.push(i..i + 1);
            i += 1;
            j = i;
        } else {
            cores.push(j..i);
            j = i;
            acc = 0;
        }
    }
    if j < n_levels {
        cores.push(j..n_levels);
    }

    let adj = graph.adjacency();
    let mut out = Vec::with_capacity(cores.len());
    for (index, core) in cores.into_iter().enumerate() {
        let before = core.start.saturating_sub(k)..core.start;
        let after = core.end..(core.end + k).min(n_levels);
        let mut role: BTreeMap<usize, NodeRole> = BTreeMap::new();
        for l in before.clone() {
            for &v in &levels[l] {
                role.insert(v, NodeRole::PadBefore);
            }
        }
        for l in core.clone() {
            for &v in &levels[l] {
                role.insert(v, NodeRole::Core);
            }
        }
        for l in after.clone() {
            for &v in &levels[l] {
                role.insert(v, NodeRole::PadAfter);
            }
        }
        // Halo: k-hop cell/net predecessors of core nodes outside the window.
        let mut frontier: Vec<usize> = core.clone().flat_map(|l| levels[l].iter().copied()).collect();
        let mut visited: BTreeSet<usize> = frontier.iter().copied().collect();
        for _ in 0..k {
            let mut next = Vec::new();
            for &v in &frontier {
                for &eid in adj.incoming(v) {
                    let e = &graph.edges[eid];
                    if e.kind.is_timing() && visited.insert(e.src) {
                        next.push(e.src);
                    }
                }
            }
            for &u in &next {
                role.entry(u).or_insert(NodeRole::Halo);
            }
            frontier = next;
        }

        let local_to_parent: Vec<usize> = role.keys().copied().collect();
        let roles: Vec<NodeRole> = role.values().copied().collect();
        let name = format!("{}.part{}", graph.name, index);
        let local_graph = induced_subgraph(graph, &local_to_parent, name);
        out.push(SubGraph {
            parent: graph.name.clone(),
            index,
            local_graph,
            core_levels: core,
            pad_levels_before: before,
            pad_levels_after: after,
            core_mask: roles.iter().map(|r| *r == NodeRole::Core).collect(),
            parent_level: local_to_parent
                .iter()
                .map(|&v| schedule.node_level[v])
                .collect(),
            role: roles,
            local_to_parent,
        });
    }
    Ok(out)
}

/// Induced subgraph over `keep` (ascending node ids); every edge whose two
/// endpoints are kept is retained, in parent edge order.
pub fn induced_subgraph(graph: &CircuitGraph, keep: &[usize], name: String) -> CircuitGraph {
    let mut local = vec![usize::MAX; graph.num_nodes()];
    for (i, &v) in keep.iter().enumerate() {
        local[v] = i;
    }
    let nodes = keep
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut n = graph.nodes[v].clone();
            n.id = i;
            n
        })
        .collect();
    let mut edges = Vec::new();
    let mut used_luts = BTreeSet::new();
    for e in &graph.edges {
        let (s, d) = (local[e.src], local[e.dst]);
        if s != usize::MAX && d != usize::MAX {
            let mut e2 = e.clone();
            e2.src = s;
            e2.dst = d;
            if let Some(id) = e.lut_id {
                used_luts.insert(id);
            }
            edges.push(e2);
        }
    }
    let luts = graph
        .luts
        .iter()
        .filter(|(id, _)| used_luts.contains(id))
        .map(|(id, l)| (*id, l.clone()))
        .collect();
    CircuitGraph {
        name,
        nodes,
        edges,
        luts,
    }
}

/// Parent edge index of every edge of `induced_subgraph(graph, keep, _)`.
pub fn induced_edge_ids(graph: &CircuitGraph, keep: &[usize]) -> Vec<usize> {
    let mut kept = vec![false; graph.num_nodes()];
    for &v in keep {
        kept[v] = true;
    }
    graph
        .edges
        .iter()
        .enumerate()
        .filter(|(_, e)| kept[e.src] && kept[e.dst])
        .map(|(i, _)| i)
        .collect()
}

/// Maps per-local-node predictions back to the parent graph, taking each
/// node's value from the piece where it is core.
pub fn reassemble<T: Clone>(
    parts: &[SubGraph],
    predictions: &[Vec<T>],
    num_parent_nodes: usize,
) -> Result<Vec<T>> {
    if parts.len() != predictions.len() {
        return Err(Error::Reassembly(format!(
            "{} sub-graphs but {} prediction sets",
            parts.len(),
            predictions.len()
        )));
    }
    let mut slot: Vec<Option<T>> = vec![None; num_parent_nodes];
    let mut owner: Vec<Option<usize>> = vec![None; num_parent_nodes];
    for (p, (part, pred)) in parts.iter().zip(predictions).enumerate() {
        if pred.len() != part.local_to_parent.len() {
            return Err(Error::Reassembly(format!(
                "sub-graph {p} has {} nodes but {} predictions",
                part.local_to_parent.len(),
                pred.len()
            )));
        }
        for (local, &parent) in part.local_to_parent.iter().enumerate() {
            if !part.core_mask[local] {
                continue;
            }
            if parent >= num_parent_nodes {
                return Err(Error::Reassembly(format!(
                    "sub-graph {p} maps to node {parent} outside the parent"
                )));
            }
            if let Some(prev) = owner[parent] {
                return Err(Error::Reassembly(format!(
                    "node {parent} is core in sub-graphs {prev} and {p}"
                )));
            }
            owner[parent] = Some(p);
            slot[parent] = Some(pred[local].clone());
        }
    }
    slot.into_iter()
        .enumerate()
        .map(|(v, s)| {
            s.ok_or_else(|| Error::Reassembly(format!("node {v} is not core in any sub-graph")))
        })
        .collect()
}

/// Manifest entry written next to the sub-graph documents.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub file: String,
    pub index: usize,
    pub core_levels: [usize; 2],
    pub pad_levels_before: Option<[usize; 2]>,
    pub pad_levels_after: Option<[usize; 2]>,
    pub num_nodes: usize,
    pub num_core: usize,
    pub num_halo: usize,
    pub core_mask: Vec<bool>,
    pub local_to_parent: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PartitionManifest {
    pub parent: String,
    pub max_size: usize,
    pub pad: usize,
    pub unpartitioned: bool,
    pub subgraphs: Vec<ManifestEntry>,
}

fn inclusive(r: &Range<usize>) -> Option<[usize; 2]> {
    (!r.is_empty()).then(|| [r.start, r.end - 1])
}

pub fn manifest(parts: &[SubGraph], cfg: &PartitionConfig, file_of: impl Fn(&SubGraph) -> String) -> PartitionManifest {
    PartitionManifest {
        parent: parts.first().map(|p| p.parent.clone()).unwrap_or_default(),
        max_size: cfg.max_size,
        pad: cfg.pad,
        unpartitioned: parts.len() == 1 && parts[0].is_unpadded(),
        subgraphs: parts
            .iter()
            .map(|p| ManifestEntry {
                file: file_of(p),
                index: p.index,
                core_levels: [p.core_levels.start, p.core_levels.end.saturating_sub(1)],
                pad_levels_before: inclusive(&p.pad_levels_before),
                pad_levels_after: inclusive(&p.pad_levels_after),
                num_nodes: p.local_to_parent.len(),
                num_core: p.num_core(),
                num_halo: p.role.iter().filter(|r| **r == NodeRole::Halo).count(),
                core_mask: p.core_mask.clone(),
                local_to_parent: p.local_to_parent.clone(),
            })
            .collect(),
    }
}
