// SPDX-License-Identifier: Apache-2.0

//! Four-corner static timing analysis used to produce ground-truth labels.
//!
//! Arrival times and slews propagate forward level by level, required times
//! propagate backward, and slack follows from both. Late channels take the
//! maximum over incoming paths and early channels the minimum.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{FORMAT_VERSION, LABEL_FORMAT};
use crate::graph::{feat, CircuitGraph, EdgeKind, Lut};
use crate::level::LevelSchedule;

pub const NUM_CORNERS: usize = 4;

/// One value per corner, in channel order `[E/R, E/F, L/R, L/F]`.
pub type Quad = [f64; NUM_CORNERS];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Early,
    Late,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    Rise,
    Fall,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corner {
    pub mode: Mode,
    pub transition: Transition,
}

impl Corner {
    pub const ALL: [Corner; NUM_CORNERS] = [
        Corner::new(Mode::Early, Transition::Rise),
        Corner::new(Mode::Early, Transition::Fall),
        Corner::new(Mode::Late, Transition::Rise),
        Corner::new(Mode::Late, Transition::Fall),
    ];

    pub const fn new(mode: Mode, transition: Transition) -> Self {
        Corner { mode, transition }
    }

    pub fn channel(self) -> usize {
        let m = match self.mode {
            Mode::Early => 0,
            Mode::Late => 2,
        };
        m + match self.transition {
            Transition::Rise => 0,
            Transition::Fall => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match (self.mode, self.transition) {
            (Mode::Early, Transition::Rise) => "early_rise",
            (Mode::Early, Transition::Fall) => "early_fall",
            (Mode::Late, Transition::Rise) => "late_rise",
            (Mode::Late, Transition::Fall) => "late_fall",
        }
    }
}

/// Whether channel `c` is a late channel.
pub fn is_late(c: usize) -> bool {
    c >= 2
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LutTable {
    Delay,
    Slew,
}

/// Bilinear interpolation in `lut`, clamping queries to the axis range.
pub fn lut_lookup(lut: &Lut, table: LutTable, input_slew: f64, load: f64) -> f64 {
    let t = match table {
        LutTable::Delay => &lut.delay_table,
        LutTable::Slew => &lut.slew_table,
    };
    let (r0, r1, wr) = bracket(&lut.row_axis, input_slew);
    let (c0, c1, wc) = bracket(&lut.col_axis, load);
    let top = t[r0][c0] + (t[r0][c1] - t[r0][c0]) * wc;
    let bottom = t[r1][c0] + (t[r1][c1] - t[r1][c0]) * wc;
    top + (bottom - top) * wr
}

/// Lower index, upper index and interpolation weight of `q` on `axis`.
pub(crate) fn bracket(axis: &[f64], q: f64) -> (usize, usize, f64) {
    let n = axis.len();
    if n == 1 || q <= axis[0] {
        return (0, 0, 0.0);
    }
    if q >= axis[n - 1] {
        return (n - 1, n - 1, 0.0);
    }
    // First index with axis[i] > q; q lies in [axis[i-1], axis[i]).
    let hi = axis.partition_point(|&a| a <= q);
    let lo = hi - 1;
    (lo, hi, (q - axis[lo]) / (axis[hi] - axis[lo]))
}

/// Wire delay surrogate: `scale[c] * (alpha * length + beta)`, with the slew
/// degraded by `gamma * length`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetDelayModel {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub corner_scale: Quad,
}

impl Default for NetDelayModel {
    fn default() -> Self {
        NetDelayModel {
            alpha: 0.02,
            beta: 0.5,
            gamma: 0.01,
            corner_scale: [0.9, 0.85, 1.1, 1.15],
        }
    }
}

impl NetDelayModel {
    pub fn delay(&self, length: f64, c: usize) -> f64 {
        self.corner_scale[c] * (self.alpha * length + self.beta)
    }

    pub fn slew(&self, slew_in: f64, length: f64) -> f64 {
        slew_in + self.gamma * length
    }
}

/// Arrival time and slew asserted at a primary input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinTiming {
    pub at: Quad,
    pub slew: Quad,
}

impl Default for PinTiming {
    fn default() -> Self {
        PinTiming {
            at: [0.0; NUM_CORNERS],
            slew: [2.0, 2.2, 2.0, 2.2],
        }
    }
}

/// The same assertion at every primary input.
pub fn uniform_boundary(graph: &CircuitGraph, pin: PinTiming) -> BTreeMap<usize, PinTiming> {
    graph.primary_inputs().into_iter().map(|v| (v, pin)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTiming {
    pub at: Vec<Quad>,
    pub slew: Vec<Quad>,
    /// Delay of every cell and net edge, indexed by edge id; `None` for
    /// net_inv edges.
    pub edge_delay: Vec<Option<Quad>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingAnnotation {
    pub at: Vec<Quad>,
    pub slew: Vec<Quad>,
    pub rat: Vec<Quad>,
    pub slack: Vec<Quad>,
    pub edge_delay: Vec<Option<Quad>>,
}

impl TimingAnnotation {
    /// `(edge id, delay)` of every net edge.
    pub fn net_delays<'a>(&'a self, graph: &'a CircuitGraph) -> impl Iterator<Item = (usize, Quad)> + 'a {
        self.delays_of(graph, EdgeKind::Net)
    }

    /// `(edge id, delay)` of every cell edge.
    pub fn cell_delays<'a>(&'a self, graph: &'a CircuitGraph) -> impl Iterator<Item = (usize, Quad)> + 'a {
        self.delays_of(graph, EdgeKind::Cell)
    }

    fn delays_of<'a>(&'a self, graph: &'a CircuitGraph, kind: EdgeKind) -> impl Iterator<Item = (usize, Quad)> + 'a {
        graph
            .edges
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.kind == kind)
            .filter_map(|(i, _)| self.edge_delay[i].map(|d| (i, d)))
    }
}

/// Per-edge delay and output slew for an incoming timing edge.
fn edge_arc(
    graph: &CircuitGraph,
    eid: usize,
    slew_src: &Quad,
    net_model: &NetDelayModel,
) -> (Quad, Quad) {
    let e = &graph.edges[eid];
    let mut d = [0.0; NUM_CORNERS];
    let mut s = [0.0; NUM_CORNERS];
    match e.kind {
        EdgeKind::Net => {
            let len = e.features[2];
            for c in 0..NUM_CORNERS {
                d[c] = net_model.delay(len, c);
                s[c] = net_model.slew(slew_src[c], len);
            }
        }
        EdgeKind::Cell => {
            let lut = &graph.luts[&e.lut_id.expect("validated cell edge has a lut")];
            let load = graph.nodes[e.dst].features[feat::CAP];
            for c in 0..NUM_CORNERS {
                d[c] = lut_lookup(lut, LutTable::Delay, slew_src[c], load);
                s[c] = lut_lookup(lut, LutTable::Slew, slew_src[c], load);
            }
        }
        EdgeKind::NetInv => unreachable!("net_inv edges carry no timing"),
    }
    (d, s)
}

/// Result of evaluating one node: its timing and the delays of its incoming
/// timing edges.
type NodeEval = (Quad, Quad, Vec<(usize, Quad)>);

fn eval_node(
    graph: &CircuitGraph,
    incoming: &[usize],
    v: usize,
    at: &[Quad],
    slew: &[Quad],
    net_model: &NetDelayModel,
) -> Result<NodeEval> {
    let mut edges: Vec<usize> = incoming
        .iter()
        .copied()
        .filter(|&e| graph.edges[e].kind.is_timing())
        .collect();
    if edges.is_empty() {
        return Err(Error::Timing {
            node: v,
            reason: "no incoming timing edge on a non-primary-input pin".into(),
        });
    }
    // Candidates are visited by predecessor id so ties keep the smallest id.
    edges.sort_by_key(|&e| (graph.edges[e].src, e));
    let mut best_at = [0.0; NUM_CORNERS];
    let mut best_slew = [0.0; NUM_CORNERS];
    let mut delays = Vec::with_capacity(edges.len());
    for (k, &eid) in edges.iter().enumerate() {
        let u = graph.edges[eid].src;
        let (d, s) = edge_arc(graph, eid, &slew[u], net_model);
        for c in 0..NUM_CORNERS {
            let cand = at[u][c] + d[c];
            let better = k == 0
                || if is_late(c) {
                    cand > best_at[c]
                } else {
                    cand < best_at[c]
                };
            if better {
                best_at[c] = cand;
                best_slew[c] = s[c];
            }
        }
        delays.push((eid, d));
    }
    Ok((best_at, best_slew, delays))
}

/// Forward arrival-time and slew propagation in ascending level order.
///
/// With `parallel` set (and the `parallel` feature enabled) the nodes of a
/// level are evaluated concurrently; results are bitwise identical to the
/// sequential order.
pub fn propagate_forward(
    graph: &CircuitGraph,
    schedule: &LevelSchedule,
    boundary: &BTreeMap<usize, PinTiming>,
    net_model: &NetDelayModel,
    parallel: bool,
) -> Result<ForwardTiming> {
    let n = graph.num_nodes();
    let adj = graph.adjacency();
    let mut at = vec![[0.0; NUM_CORNERS]; n];
    let mut slew = vec![[0.0; NUM_CORNERS]; n];
    let mut edge_delay = vec![None; graph.edges.len()];
    for (&v, pin) in boundary {
        if v >= n || !graph.nodes[v].is_primary_input {
            return Err(Error::Timing {
                node: v,
                reason: "boundary timing given for a pin that is not a primary input".into(),
            });
        }
        at[v] = pin.at;
        slew[v] = pin.slew;
    }
    if let Some(pi) = graph.primary_inputs().into_iter().find(|v| !boundary.contains_key(v)) {
        return Err(Error::Timing {
            node: pi,
            reason: "primary input without boundary timing".into(),
        });
    }
    for level in &schedule.levels {
        let work: Vec<usize> = level
            .iter()
            .copied()
            .filter(|&v| !graph.nodes[v].is_primary_input)
            .collect();
        let results: Vec<Result<NodeEval>> = {
            let eval = |&v: &usize| eval_node(graph, adj.incoming(v), v, &at, &slew, net_model);
            run_level(&work, eval, parallel)
        };
        for (&v, r) in work.iter().zip(results) {
            let (a, s, delays) = r?;
            at[v] = a;
            slew[v] = s;
            for (eid, d) in delays {
                edge_delay[eid] = Some(d);
            }
        }
    }
    Ok(ForwardTiming {
        at,
        slew,
        edge_delay,
    })
}

#[cfg(feature = "parallel")]
fn run_level<T, F>(work: &[usize], f: F, parallel: bool) -> Vec<T>
where
    T: Send,
    F: Fn(&usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    if parallel {
        work.par_iter().map(f).collect()
    } else {
        work.iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
fn run_level<T, F>(work: &[usize], f: F, _parallel: bool) -> Vec<T>
where
    F: Fn(&usize) -> T,
{
    work.iter().map(f).collect()
}

/// Backward required-time propagation in descending level order.
pub fn propagate_rat(
    graph: &CircuitGraph,
    schedule: &LevelSchedule,
    endpoint_rat: &BTreeMap<usize, Quad>,
    edge_delay: &[Option<Quad>],
) -> Result<Vec<Quad>> {
    let n = graph.num_nodes();
    let adj = graph.adjacency();
    let mut rat = vec![[0.0; NUM_CORNERS]; n];
    for level in schedule.levels.iter().rev() {
        for &v in level {
            let outs: Vec<usize> = adj
                .outgoing(v)
                .iter()
                .copied()
                .filter(|&e| graph.edges[e].kind.is_timing())
                .collect();
            if outs.is_empty() {
                rat[v] = *endpoint_rat.get(&v).ok_or_else(|| Error::Timing {
                    node: v,
                    reason: "endpoint without a required arrival time".into(),
                })?;
                continue;
            }
            let mut r = [0.0; NUM_CORNERS];
            for (k, &eid) in outs.iter().enumerate() {
                let d = edge_delay[eid].ok_or_else(|| Error::Timing {
                    node: v,
                    reason: format!("edge {eid} has no delay from the forward pass"),
                })?;
                let w = graph.edges[eid].dst;
                for c in 0..NUM_CORNERS {
                    let cand = rat[w][c] - d[c];
                    if k == 0 || (is_late(c) && cand < r[c]) || (!is_late(c) && cand > r[c]) {
                        r[c] = cand;
                    }
                }
            }
            rat[v] = r;
        }
    }
    Ok(rat)
}

/// Early channels `at - rat`, late channels `rat - at`.
pub fn slack(at: &[Quad], rat: &[Quad]) -> Result<Vec<Quad>> {
    if at.len() != rat.len() {
        return Err(Error::InvalidArgument(format!(
            "{} arrival times but {} required times",
            at.len(),
            rat.len()
        )));
    }
    Ok(at
        .iter()
        .zip(rat)
        .map(|(a, r)| {
            let mut s = [0.0; NUM_CORNERS];
            for c in 0..NUM_CORNERS {
                s[c] = if is_late(c) { r[c] - a[c] } else { a[c] - r[c] };
            }
            s
        })
        .collect())
}

/// Endpoint required times relative to the critical arrival time: late
/// channels get the largest endpoint arrival plus `margin`, early channels
/// the smallest endpoint arrival minus `margin`.
pub fn margin_endpoint_rat(graph: &CircuitGraph, at: &[Quad], margin: f64) -> BTreeMap<usize, Quad> {
    let ends = graph.endpoints();
    let mut r = [0.0; NUM_CORNERS];
    for c in 0..NUM_CORNERS {
        let vals = ends.iter().map(|&v| at[v][c]);
        r[c] = if is_late(c) {
            vals.fold(f64::NEG_INFINITY, f64::max) + margin
        } else {
            vals.fold(f64::INFINITY, f64::min) - margin
        };
    }
    ends.into_iter().map(|v| (v, r)).collect()
}

/// Full analysis with the margin-based endpoint convention.
pub fn analyze(
    graph: &CircuitGraph,
    schedule: &LevelSchedule,
    boundary: &BTreeMap<usize, PinTiming>,
    net_model: &NetDelayModel,
    rat_margin: f64,
    parallel: bool,
) -> Result<TimingAnnotation> {
    let fwd = propagate_forward(graph, schedule, boundary, net_model, parallel)?;
    let ends = margin_endpoint_rat(graph, &fwd.at, rat_margin);
    let rat = propagate_rat(graph, schedule, &ends, &fwd.edge_delay)?;
    let slack = slack(&fwd.at, &rat)?;
    Ok(TimingAnnotation {
        at: fwd.at,
        slew: fwd.slew,
        rat,
        slack,
        edge_delay: fwd.edge_delay,
    })
}

/// Label document stored next to a circuit document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelDocument {
    pub format: String,
    pub version: u32,
    pub circuit: String,
    pub corners: Vec<String>,
    pub net_model: NetDelayModel,
    pub rat_margin: f64,
    #[serde(flatten)]
    pub timing: TimingAnnotation,
}

impl LabelDocument {
    pub fn new(
        graph: &CircuitGraph,
        timing: TimingAnnotation,
        net_model: NetDelayModel,
        rat_margin: f64,
    ) -> Self {
        LabelDocument {
            format: LABEL_FORMAT.into(),
            version: FORMAT_VERSION,
            circuit: graph.name.clone(),
            corners: Corner::ALL.iter().map(|c| c.name().to_string()).collect(),
            net_model,
            rat_margin,
            timing,
        }
    }

    pub fn parse(bytes: &[u8], graph: &CircuitGraph) -> Result<Self> {
        let doc: LabelDocument = crate::format::from_json(bytes)?;
        if doc.format != LABEL_FORMAT || doc.version != FORMAT_VERSION {
            return Err(Error::Malformed(format!(
                "expected {LABEL_FORMAT} version {FORMAT_VERSION}, found {} version {}",
                doc.format, doc.version
            )));
        }
        let n = graph.num_nodes();
        let t = &doc.timing;
        if [t.at.len(), t.slew.len(), t.rat.len(), t.slack.len()] != [n; 4]
            || t.edge_delay.len() != graph.edges.len()
        {
            return Err(Error::Malformed(format!(
                "labels do not match circuit `{}` ({} nodes, {} edges)",
                graph.name,
                n,
                graph.edges.len()
            )));
        }
        Ok(doc)
    }
}
