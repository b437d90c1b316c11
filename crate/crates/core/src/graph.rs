// SPDX-License-Identifier: Apache-2.0

//! Heterogeneous circuit DAG.
//!
//! Pins (primary inputs, primary outputs, cell fan-in and fan-out pins) are
//! the only node type. Edges come in three kinds: `cell` (fan-in to fan-out
//! inside one cell), `net` (driver to sink) and `net_inv` (the reversed
//! companion of every net edge). Timing order is defined over cell and net
//! edges only; net_inv edges exist for message passing.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Number of node features in the synthetic schema.
pub const NODE_FEATURES: usize = 8;
/// Number of geometric features on net and net_inv edges.
pub const NET_EDGE_FEATURES: usize = 3;

pub const FEATURE_SCHEMA: [&str; NODE_FEATURES] = [
    "is_pi",
    "is_po",
    "is_fanin",
    "is_fanout",
    "x",
    "y",
    "capacitance",
    "normalized_depth",
];

/// Column indices into [`NodeRecord::features`].
pub mod feat {
    pub const IS_PI: usize = 0;
    pub const IS_PO: usize = 1;
    pub const IS_FANIN: usize = 2;
    pub const IS_FANOUT: usize = 3;
    pub const X: usize = 4;
    pub const Y: usize = 5;
    pub const CAP: usize = 6;
    pub const DEPTH: usize = 7;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Cell,
    Net,
    NetInv,
}

impl EdgeKind {
    /// True for the kinds that define timing order.
    pub fn is_timing(self) -> bool {
        matches!(self, EdgeKind::Cell | EdgeKind::Net)
    }
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdgeKind::Cell => "cell",
            EdgeKind::Net => "net",
            EdgeKind::NetInv => "net_inv",
        })
    }
}

pub type LutId = u32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: usize,
    #[serde(rename = "is_pi")]
    pub is_primary_input: bool,
    #[serde(rename = "is_po")]
    pub is_primary_output: bool,
    pub is_fanin: bool,
    pub is_fanout: bool,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub src: usize,
    pub dst: usize,
    pub kind: EdgeKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub features: Vec<f64>,
    #[serde(rename = "lut", default, skip_serializing_if = "Option::is_none")]
    pub lut_id: Option<LutId>,
}

/// Non-linear delay model table: (input slew, load) -> delay / output slew.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lut {
    #[serde(rename = "rows")]
    pub row_axis: Vec<f64>,
    #[serde(rename = "cols")]
    pub col_axis: Vec<f64>,
    #[serde(rename = "delay")]
    pub delay_table: Vec<Vec<f64>>,
    #[serde(rename = "slew")]
    pub slew_table: Vec<Vec<f64>>,
}

impl Lut {
    pub fn rows(&self) -> usize {
        self.row_axis.len()
    }

    pub fn cols(&self) -> usize {
        self.col_axis.len()
    }

    /// Returns a description of the first broken invariant, if any.
    pub fn check(&self) -> Option<String> {
        if self.row_axis.is_empty() || self.col_axis.is_empty() {
            return Some("empty axis".into());
        }
        if !strictly_ascending(&self.row_axis) {
            return Some("row axis not strictly ascending".into());
        }
        if !strictly_ascending(&self.col_axis) {
            return Some("column axis not strictly ascending".into());
        }
        for (name, table) in [("delay", &self.delay_table), ("slew", &self.slew_table)] {
            if table.len() != self.rows() || table.iter().any(|r| r.len() != self.cols()) {
                return Some(format!(
                    "{name} table is not {}x{}",
                    self.rows(),
                    self.cols()
                ));
            }
            if table.iter().flatten().any(|v| !v.is_finite()) {
                return Some(format!("{name} table has non-finite entries"));
            }
        }
        if self.slew_table.iter().flatten().any(|&v| v <= 0.0) {
            return Some("slew table has non-positive entries".into());
        }
        None
    }
}

fn strictly_ascending(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite()) && v.windows(2).all(|w| w[0] < w[1])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitGraph {
    pub name: String,
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<EdgeRecord>,
    pub luts: BTreeMap<LutId, Lut>,
}

impl CircuitGraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn count_edges(&self, kind: EdgeKind) -> usize {
        self.edges.iter().filter(|e| e.kind == kind).count()
    }

    pub fn adjacency(&self) -> Adjacency {
        Adjacency::build(self)
    }

    /// Node ids of primary inputs.
    pub fn primary_inputs(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| n.is_primary_input)
            .map(|n| n.id)
            .collect()
    }

    /// Nodes with no outgoing cell or net edge: where required times are
    /// asserted.
    pub fn endpoints(&self) -> Vec<usize> {
        let mut has_out = vec![false; self.nodes.len()];
        for e in &self.edges {
            if e.kind.is_timing() {
                has_out[e.src] = true;
            }
        }
        (0..self.nodes.len()).filter(|&v| !has_out[v]).collect()
    }

    /// Runs every structural check. An empty report means the graph is
    /// well-formed.
    pub fn validate(&self) -> Vec<Violation> {
        validate(self)
    }
}

/// Incoming/outgoing edge ids per node, in ascending edge-id order.
#[derive(Clone, Debug)]
pub struct Adjacency {
    in_offsets: Vec<usize>,
    in_edges: Vec<usize>,
    out_offsets: Vec<usize>,
    out_edges: Vec<usize>,
}

impl Adjacency {
    fn build(g: &CircuitGraph) -> Self {
        let n = g.nodes.len();
        let (in_offsets, in_edges) = csr(n, g.edges.iter().map(|e| e.dst));
        let (out_offsets, out_edges) = csr(n, g.edges.iter().map(|e| e.src));
        Adjacency {
            in_offsets,
            in_edges,
            out_offsets,
            out_edges,
        }
    }

    pub fn incoming(&self, v: usize) -> &[usize] {
        &self.in_edges[self.in_offsets[v]..self.in_offsets[v + 1]]
    }

    pub fn outgoing(&self, v: usize) -> &[usize] {
        &self.out_edges[self.out_offsets[v]..self.out_offsets[v + 1]]
    }
}

fn csr(n: usize, keys: impl Iterator<Item = usize> + Clone) -> (Vec<usize>, Vec<usize>) {
    let mut offsets = vec![0usize; n + 1];
    for k in keys.clone() {
        if k < n {
            offsets[k + 1] += 1;
        }
    }
    for i in 0..n {
        offsets[i + 1] += offsets[i];
    }
    let mut fill = offsets.clone();
    let mut items = vec![0usize; offsets[n]];
    for (eid, k) in keys.enumerate() {
        if k < n {
            items[fill[k]] = eid;
            fill[k] += 1;
        }
    }
    (offsets, items)
}

/// One broken structural invariant.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    NonDenseId { index: usize, id: usize },
    FeatureLength { node: usize, expected: usize, found: usize },
    DanglingEndpoint { edge: usize, node: usize },
    SelfLoop { edge: usize },
    MissingNetInvMirror { edge: usize, src: usize, dst: usize },
    UnmatchedNetInv { edge: usize, src: usize, dst: usize },
    DuplicateNetInvMirror { edge: usize, src: usize, dst: usize },
    CellEdgeWithoutLut { edge: usize },
    LutOnNonCellEdge { edge: usize },
    DanglingLut { edge: usize, lut_id: LutId },
    NetEdgeFeatures { edge: usize, found: usize },
    CellEdgeFeatures { edge: usize },
    InvalidLut { lut_id: LutId, reason: String },
    PinRole { node: usize, reason: String },
    PrimaryInputDriven { node: usize, edge: usize },
    PrimaryOutputDrives { node: usize, edge: usize },
    Cycle { edges: Vec<(usize, usize, usize)> },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            NonDenseId { index, id } => write!(f, "node at index {index} has id {id}"),
            FeatureLength {
                node,
                expected,
                found,
            } => write!(
                f,
                "node {node} has {found} features, expected {expected}"
            ),
            DanglingEndpoint { edge, node } => {
                write!(f, "edge {edge} references missing node {node}")
            }
            SelfLoop { edge } => write!(f, "edge {edge} is a self loop"),
            MissingNetInvMirror { src, dst, .. } => {
                write!(f, "missing net_inv mirror for edge ({src},{dst})")
            }
            UnmatchedNetInv { src, dst, .. } => {
                write!(f, "net_inv edge ({src},{dst}) has no matching net edge")
            }
            DuplicateNetInvMirror { src, dst, .. } => {
                write!(f, "duplicate net_inv mirror for net edge ({dst},{src})")
            }
            CellEdgeWithoutLut { edge } => write!(f, "cell edge {edge} has no lut"),
            LutOnNonCellEdge { edge } => write!(f, "non-cell edge {edge} carries a lut"),
            DanglingLut { edge, lut_id } => {
                write!(f, "cell edge {edge} references missing lut {lut_id}")
            }
            NetEdgeFeatures { edge, found } => write!(
                f,
                "net edge {edge} has {found} features, expected {NET_EDGE_FEATURES}"
            ),
            CellEdgeFeatures { edge } => {
                write!(f, "cell edge {edge} carries geometric features")
            }
            InvalidLut { lut_id, reason } => write!(f, "lut {lut_id}: {reason}"),
            PinRole { node, reason } => write!(f, "node {node}: {reason}"),
            PrimaryInputDriven { node, edge } => {
                write!(f, "primary input {node} is driven by edge {edge}")
            }
            PrimaryOutputDrives { node, edge } => {
                write!(f, "primary output {node} drives edge {edge}")
            }
            Cycle { edges } => {
                let parts: Vec<String> = edges
                    .iter()
                    .map(|(e, s, d)| format!("edge {e} ({s},{d})"))
                    .collect();
                write!(f, "cycle over cell/net edges: {}", parts.join(" -> "))
            }
        }
    }
}

pub fn validate(g: &CircuitGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = g.nodes.len();

    for (i, node) in g.nodes.iter().enumerate() {
        if node.id != i {
            out.push(Violation::NonDenseId { index: i, id: node.id });
        }
        if node.features.len() != NODE_FEATURES {
            out.push(Violation::FeatureLength {
                node: i,
                expected: NODE_FEATURES,
                found: node.features.len(),
            });
        }
    }

    for (lut_id, lut) in &g.luts {
        if let Some(reason) = lut.check() {
            out.push(Violation::InvalidLut {
                lut_id: *lut_id,
                reason,
            });
        }
    }

    let mut endpoints_ok = true;
    for (eid, e) in g.edges.iter().enumerate() {
        for node in [e.src, e.dst] {
            if node >= n {
                out.push(Violation::DanglingEndpoint { edge: eid, node });
                endpoints_ok = false;
            }
        }
        if e.src == e.dst {
            out.push(Violation::SelfLoop { edge: eid });
        }
        match e.kind {
            EdgeKind::Cell => {
                match e.lut_id {
                    None => out.push(Violation::CellEdgeWithoutLut { edge: eid }),
                    Some(id) if !g.luts.contains_key(&id) => {
                        out.push(Violation::DanglingLut { edge: eid, lut_id: id })
                    }
                    Some(_) => {}
                }
                if !e.features.is_empty() {
                    out.push(Violation::CellEdgeFeatures { edge: eid });
                }
            }
            EdgeKind::Net | EdgeKind::NetInv => {
                if e.lut_id.is_some() {
                    out.push(Violation::LutOnNonCellEdge { edge: eid });
                }
                if e.features.len() != NET_EDGE_FEATURES {
                    out.push(Violation::NetEdgeFeatures {
                        edge: eid,
                        found: e.features.len(),
                    });
                }
            }
        }
    }
    if !endpoints_ok {
        // Remaining checks index nodes by edge endpoints.
        return out;
    }

    check_net_mirror(g, &mut out);
    check_pin_roles(g, &mut out);
    if let Some(cycle) = find_timing_cycle(g) {
        out.push(Violation::Cycle { edges: cycle });
    }
    out
}

fn check_net_mirror(g: &CircuitGraph, out: &mut Vec<Violation>) {
    // (src, dst) of each net_inv edge, waiting to be claimed by a net edge.
    let mut inv: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (eid, e) in g.edges.iter().enumerate() {
        if e.kind == EdgeKind::NetInv {
            inv.entry((e.src, e.dst)).or_default().push(eid);
        }
    }
    for (eid, e) in g.edges.iter().enumerate() {
        if e.kind != EdgeKind::Net {
            continue;
        }
        match inv.get_mut(&(e.dst, e.src)) {
            Some(list) if !list.is_empty() => {
                list.remove(0);
            }
            _ => out.push(Violation::MissingNetInvMirror {
                edge: eid,
                src: e.src,
                dst: e.dst,
            }),
        }
    }
    for ((src, dst), list) in inv {
        for eid in list {
            out.push(Violation::UnmatchedNetInv { edge: eid, src, dst });
        }
    }
}

fn check_pin_roles(g: &CircuitGraph, out: &mut Vec<Violation>) {
    for (eid, e) in g.edges.iter().enumerate() {
        let (s, d) = (&g.nodes[e.src], &g.nodes[e.dst]);
        if e.kind.is_timing() {
            if d.is_primary_input {
                out.push(Violation::PrimaryInputDriven {
                    node: e.dst,
                    edge: eid,
                });
            }
            if s.is_primary_output {
                out.push(Violation::PrimaryOutputDrives {
                    node: e.src,
                    edge: eid,
                });
            }
        }
        if e.kind == EdgeKind::Cell {
            if !(s.is_fanin && !s.is_fanout) {
                out.push(Violation::PinRole {
                    node: e.src,
                    reason: format!("source of cell edge {eid} must be a fan-in pin only"),
                });
            }
            if !(d.is_fanout && !d.is_fanin) {
                out.push(Violation::PinRole {
                    node: e.dst,
                    reason: format!("sink of cell edge {eid} must be a fan-out pin only"),
                });
            }
        }
    }
}

/// Finds one cycle over cell/net edges, returned as `(edge, src, dst)` in
/// traversal order.
pub fn find_timing_cycle(g: &CircuitGraph) -> Option<Vec<(usize, usize, usize)>> {
    let n = g.nodes.len();
    let adj = g.adjacency();
    // Iterative three-colour DFS.
    let mut color = vec![0u8; n];
    let mut parent_edge = vec![usize::MAX; n];
    for root in 0..n {
        if color[root] != 0 {
            continue;
        }
        let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
        color[root] = 1;
        while let Some(&mut (v, ref mut pos)) = stack.last_mut() {
            let outs = adj.outgoing(v);
            if *pos >= outs.len() {
                color[v] = 2;
                stack.pop();
                continue;
            }
            let eid = outs[*pos];
            *pos += 1;
            let e = &g.edges[eid];
            if !e.kind.is_timing() {
                continue;
            }
            let w = e.dst;
            match color[w] {
                0 => {
                    color[w] = 1;
                    parent_edge[w] = eid;
                    stack.push((w, 0));
                }
                1 => {
                    let mut cycle = vec![(eid, e.src, e.dst)];
                    let mut cur = v;
                    while cur != w {
                        let pe = parent_edge[cur];
                        let pe_rec = &g.edges[pe];
                        cycle.push((pe, pe_rec.src, pe_rec.dst));
                        cur = pe_rec.src;
                    }
                    cycle.reverse();
                    return Some(cycle);
                }
                _ => {}
            }
        }
    }
    None
}
