// SPDX-License-Identifier: Apache-2.0

//! The timing model: circuit auto-encoder, RLL-GCN stack, level-ordered
//! arrival-time propagation and the AS / CD / ND prediction heads.
//!
//! A circuit is evaluated either whole or as an ordered sequence of
//! partition pieces. Pieces share a [`NodeStore`] holding the final node
//! representation and AT state of every node that was core in an earlier
//! piece, so padding nodes before a core read exact values instead of
//! recomputing them from a truncated ancestor cone.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CircuitGraph, EdgeKind, LutId, NET_EDGE_FEATURES, NODE_FEATURES};
use crate::level::{encode_unchecked, topo_levels, LevelSchedule};
use crate::nn::layers::{self, EdgeSet};
use crate::nn::params::{Binder, Hyper, ModelParams, Standardizer, Tensor};
use crate::nn::tensor::{Mat, Reduce, Segments, Tape, Var};
use crate::partition::{induced_edge_ids, partition, NodeRole, PartitionConfig, SubGraph};
use crate::sta::{Quad, TimingAnnotation, NUM_CORNERS};

/// Entries in the learned key/value bank used for net-edge destinations.
pub const NET_BANK: usize = 4;
/// AS head width: four AT channels then four slew channels.
pub const AS_WIDTH: usize = 2 * NUM_CORNERS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    Frozen,
    Finetune,
    None,
}

impl EncoderMode {
    pub fn uses_encoder(self) -> bool {
        self != EncoderMode::None
    }

    pub fn name(self) -> &'static str {
        match self {
            EncoderMode::Frozen => "frozen",
            EncoderMode::Finetune => "finetune",
            EncoderMode::None => "none",
        }
    }
}

impl fmt::Display for EncoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(EncoderMode::Frozen),
            "finetune" => Ok(EncoderMode::Finetune),
            "none" => Ok(EncoderMode::None),
            _ => Err(Error::InvalidArgument(format!(
                "unknown encoder mode `{s}` (expected frozen, finetune or none)"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// Parameter declarations

pub fn declare_encoder(p: &mut ModelParams) {
    let h = p.hyper.clone();
    let a = h.ae_hidden;
    p.declare_linear("enc.in", NODE_FEATURES, a, true);
    for k in 0..h.ae_enc_layers {
        p.declare_mlp(&format!("enc.l{k}.msg"), 2 * a + NET_EDGE_FEATURES, a, a, h.mlp_depth);
        p.declare_mlp(&format!("enc.l{k}.upd"), 5 * a, a, a, h.mlp_depth);
    }
    p.declare_linear("enc.mu", a, h.latent_dim, true);
    p.declare_linear("enc.logvar", a, h.latent_dim, true);
}

pub fn declare_decoder(p: &mut ModelParams) {
    let h = p.hyper.clone();
    let a = h.ae_hidden;
    p.declare_linear("dec.in", h.latent_dim, a, true);
    for k in 0..h.ae_dec_layers {
        p.declare_mlp(&format!("dec.l{k}.msg"), 2 * a + NET_EDGE_FEATURES, a, a, h.mlp_depth);
        p.declare_mlp(&format!("dec.l{k}.upd"), 5 * a, a, a, h.mlp_depth);
    }
    p.declare_linear("dec.out", a, NODE_FEATURES, true);
}

/// Width of the GCN input: node features, optional latent and graph
/// embedding, level encoding.
pub fn gnn_input_width(h: &Hyper, use_encoder: bool) -> usize {
    NODE_FEATURES + if use_encoder { 2 * h.latent_dim } else { 0 } + 2 * h.n_freq + 1
}

pub fn declare_gnn(p: &mut ModelParams, use_encoder: bool) {
    let h = p.hyper.clone();
    let d = h.hidden;
    let depth = h.mlp_depth;
    p.declare_linear("gnn.in", gnn_input_width(&h, use_encoder), d, true);
    for k in 0..h.gcn_layers {
        for rel in ["net", "inv"] {
            p.declare_mlp(&format!("gnn.l{k}.{rel}.msg"), 2 * d + NET_EDGE_FEATURES, d, d, depth);
            p.declare_mlp(&format!("gnn.l{k}.{rel}.upd"), 3 * d, d, d, depth);
        }
    }
    p.declare_linear("at.boundary", d, d, true);
    for kind in ["cell", "net"] {
        p.declare_mlp(&format!("at.{kind}.q"), 3 * d, d, d, depth);
        p.declare_mlp(&format!("at.{kind}.m"), 4 * d, d, d, depth);
        p.insert(format!("at.{kind}.ln.gain"), Tensor::new(vec![1, d], vec![1.0; d]).expect("shape"));
        p.insert(format!("at.{kind}.ln.bias"), Tensor::new(vec![1, d], vec![0.0; d]).expect("shape"));
    }
    for w in ["wq", "wk", "wv", "wo"] {
        p.declare_linear(&format!("at.mja.{w}"), d, d, false);
    }
    p.declare_linear("at.lut.row", 1, d, true);
    p.declare_linear("at.lut.col", 1, d, true);
    p.declare_linear("at.lut.val", 2, d, true);
    for kv in ["bank_k", "bank_v"] {
        p.insert(format!("at.net.{kv}"), Tensor::new(vec![NET_BANK, d], vec![0.0; NET_BANK * d]).expect("shape"));
    }
    p.declare_mlp("at.agg", 3 * d, d, d, depth);
    p.declare_mlp("head.as", 2 * d, d, AS_WIDTH, depth);
    p.declare_mlp("head.cd", 4 * d, d, NUM_CORNERS, depth);
    p.declare_mlp("head.nd", 4 * d + NET_EDGE_FEATURES, d, NUM_CORNERS, depth);
}

/// Uniform initialization of every tensor selected by `filter`; layer norm
/// gains start at one and biases at zero.
pub fn init_params(p: &mut ModelParams, seed: u64, filter: impl Fn(&str) -> bool) {
    p.init_uniform(seed, &filter);
    for (name, t) in p.tensors.iter_mut() {
        if !filter(name) {
            continue;
        }
        if name.ends_with(".ln.gain") {
            t.data.iter_mut().for_each(|v| *v = 1.0);
        } else if name.ends_with(".ln.bias") {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// True when the GCN input expects latent and graph-embedding columns.
pub fn expects_encoder(p: &ModelParams) -> bool {
    p.get("gnn.in.w")
        .map(|w| w.shape[0] == gnn_input_width(&p.hyper, true))
        .unwrap_or(false)
}

// ---------------------------------------------------------------------------
// Prepared inputs

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeClass {
    /// AT computed in this pass.
    Internal,
    /// Representation and AT read from the store.
    External,
    /// After the core: representation only, no AT.
    Skipped,
}

/// Per-node context of a graph evaluated on its own or as a partition piece.
#[derive(Clone, Debug)]
pub struct NodeContext {
    /// Parent level of each node.
    pub level: Vec<usize>,
    /// Parent maximum level.
    pub max_level: usize,
    pub class: Vec<NodeClass>,
    /// Nodes whose predictions enter losses.
    pub core: Vec<bool>,
    pub to_parent: Vec<usize>,
    pub edge_to_parent: Vec<usize>,
}

impl NodeContext {
    pub fn whole(graph: &CircuitGraph, schedule: &LevelSchedule) -> Self {
        let n = graph.num_nodes();
        NodeContext {
            level: schedule.node_level.clone(),
            max_level: schedule.max_level(),
            class: vec![NodeClass::Internal; n],
            core: vec![true; n],
            to_parent: (0..n).collect(),
            edge_to_parent: (0..graph.edges.len()).collect(),
        }
    }

    pub fn piece(parent: &CircuitGraph, parent_schedule: &LevelSchedule, sg: &SubGraph) -> Self {
        let class = sg
            .role
            .iter()
            .map(|r| match r {
                NodeRole::Core => NodeClass::Internal,
                NodeRole::PadBefore | NodeRole::Halo => NodeClass::External,
                NodeRole::PadAfter => NodeClass::Skipped,
            })
            .collect();
        NodeContext {
            level: sg.parent_level.clone(),
            max_level: parent_schedule.max_level(),
            class,
            core: sg.core_mask.clone(),
            to_parent: sg.local_to_parent.clone(),
            edge_to_parent: induced_edge_ids(parent, &sg.local_to_parent),
        }
    }
}

/// Standardized LUT axes and tables of every LUT in a graph, concatenated.
#[derive(Clone, Debug)]
pub struct LutBank {
    pub rows: Mat,
    pub cols: Mat,
    /// Row / column index of each table entry into `rows` / `cols`.
    pub ri: Vec<u32>,
    pub ci: Vec<u32>,
    /// `[delay, slew]` per table entry.
    pub vals: Mat,
    /// `(offset, len)` of each LUT's entries.
    pub range: BTreeMap<LutId, (u32, u32)>,
}

impl LutBank {
    fn new(graph: &CircuitGraph, stats: &Standardizer) -> Self {
        let (mut rows, mut cols, mut vals) = (Vec::new(), Vec::new(), Vec::new());
        let (mut ri, mut ci) = (Vec::new(), Vec::new());
        let mut range = BTreeMap::new();
        for (&id, lut) in &graph.luts {
            let (r0, c0) = (rows.len() as u32, cols.len() as u32);
            rows.extend(lut.row_axis.iter().map(|&v| stats.lut_row.apply(0, v)));
            cols.extend(lut.col_axis.iter().map(|&v| stats.lut_col.apply(0, v)));
            let off = ri.len() as u32;
            for i in 0..lut.rows() {
                for j in 0..lut.cols() {
                    ri.push(r0 + i as u32);
                    ci.push(c0 + j as u32);
                    vals.push(stats.lut_delay.apply(0, lut.delay_table[i][j]));
                    vals.push(stats.lut_slew.apply(0, lut.slew_table[i][j]));
                }
            }
            range.insert(id, (off, ri.len() as u32 - off));
        }
        let n = ri.len();
        LutBank {
            rows: Mat::from_vec(rows.len(), 1, rows).expect("column"),
            cols: Mat::from_vec(cols.len(), 1, cols).expect("column"),
            ri,
            ci,
            vals: Mat::from_vec(n, 2, vals).expect("pairs"),
            range,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellIn {
    pub src: u32,
    pub dst: u32,
    /// `(offset, len)` of the edge's LUT in the bank.
    pub range: (u32, u32),
}

/// One topological level of internal nodes and their timing in-edges.
#[derive(Clone, Debug)]
pub struct Step {
    pub level: usize,
    pub nodes: Vec<u32>,
    pub cell: Vec<CellIn>,
    pub net: Vec<(u32, u32)>,
    /// Messages `[cell.., net..]` grouped by destination position in `nodes`.
    pub by_dst: Arc<Segments>,
}

impl Step {
    pub fn new(level: usize, nodes: Vec<u32>, cell: Vec<CellIn>, net: Vec<(u32, u32)>) -> Self {
        let pos: BTreeMap<u32, usize> = nodes.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let keys: Vec<usize> = cell.iter().map(|c| pos[&c.dst]).chain(net.iter().map(|&(_, d)| pos[&d])).collect();
        let by_dst = Arc::new(Segments::group_by(nodes.len(), keys.into_iter()));
        Step {
            level,
            nodes,
            cell,
            net,
            by_dst,
        }
    }
}

/// An edge scored by a head: local edge index and endpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadEdge {
    pub edge: usize,
    pub src: u32,
    pub dst: u32,
}

/// Everything a forward pass needs from one graph, standardized.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub n: usize,
    pub x: Mat,
    pub level_enc: Mat,
    pub net: EdgeSet,
    pub inv: EdgeSet,
    /// net and net_inv together, for the auto-encoder.
    pub union: EdgeSet,
    pub class: Vec<NodeClass>,
    pub core: Vec<bool>,
    pub to_parent: Vec<usize>,
    pub edge_to_parent: Vec<usize>,
    /// Internal nodes, ascending.
    pub internal: Vec<u32>,
    /// External nodes, ascending; row `r` of the external tables.
    pub external: Vec<u32>,
    /// Internal nodes without timing predecessors.
    pub boundary: Vec<u32>,
    pub steps: Vec<Step>,
    pub luts: LutBank,
    /// Cell edges with an internal destination.
    pub cell_heads: Vec<HeadEdge>,
    /// Net edges with an internal destination.
    pub net_heads: Vec<HeadEdge>,
    pub net_head_feat: Mat,
}

fn edge_feats(e: &crate::graph::EdgeRecord, i: usize) -> Result<&[f64]> {
    e.features
        .get(..NET_EDGE_FEATURES)
        .ok_or_else(|| Error::Malformed(format!("edge {i} ({}) lacks its {NET_EDGE_FEATURES} features", e.kind)))
}

impl Prepared {
    pub fn new(graph: &CircuitGraph, ctx: &NodeContext, stats: &Standardizer, hyper: &Hyper) -> Result<Self> {
        let n = graph.num_nodes();
        if [ctx.level.len(), ctx.class.len(), ctx.core.len(), ctx.to_parent.len()] != [n; 4]
            || ctx.edge_to_parent.len() != graph.edges.len()
        {
            return Err(Error::shape("prepare", "node context does not match the graph"));
        }
        let mut x = Mat::zeros(n, NODE_FEATURES);
        for (v, node) in graph.nodes.iter().enumerate() {
            if node.features.len() != NODE_FEATURES {
                return Err(Error::Malformed(format!("node {v} has {} features", node.features.len())));
            }
            x.row_mut(v).copy_from_slice(&stats.node.apply_row(&node.features));
        }
        let max_level = ctx.max_level.max(1);
        let width = 2 * hyper.n_freq + 1;
        let mut level_enc = Mat::zeros(n, width);
        for v in 0..n {
            let mut row = encode_unchecked(ctx.level[v], hyper.n_freq, max_level);
            row[0] = stats.level.apply(0, row[0]);
            level_enc.row_mut(v).copy_from_slice(&row);
        }

        let mut rel: [(Vec<u32>, Vec<u32>, Vec<f64>); 2] = Default::default();
        for (i, e) in graph.edges.iter().enumerate() {
            let slot = match e.kind {
                EdgeKind::Net => 0,
                EdgeKind::NetInv => 1,
                EdgeKind::Cell => continue,
            };
            rel[slot].0.push(e.src as u32);
            rel[slot].1.push(e.dst as u32);
            rel[slot].2.extend(stats.edge.apply_row(edge_feats(e, i)?));
        }
        let [net, inv] = rel.map(|(s, d, f)| {
            let m = s.len();
            EdgeSet::new(n, s, d, Mat::from_vec(m, NET_EDGE_FEATURES, f).expect("edge features"))
        });
        let union = {
            let src = [net.src.clone(), inv.src.clone()].concat();
            let dst = [net.dst.clone(), inv.dst.clone()].concat();
            let feat = [net.feat.data.clone(), inv.feat.data.clone()].concat();
            let m = src.len();
            EdgeSet::new(n, src, dst, Mat::from_vec(m, NET_EDGE_FEATURES, feat).expect("edge features"))
        };

        let luts = LutBank::new(graph, stats);
        let internal: Vec<u32> = (0..n as u32).filter(|&v| ctx.class[v as usize] == NodeClass::Internal).collect();
        let external: Vec<u32> = (0..n as u32).filter(|&v| ctx.class[v as usize] == NodeClass::External).collect();

        let mut has_pred = vec![false; n];
        let mut cell_in: BTreeMap<usize, Vec<CellIn>> = BTreeMap::new();
        let mut net_in: BTreeMap<usize, Vec<(u32, u32)>> = BTreeMap::new();
        let mut cell_heads = Vec::new();
        let mut net_heads = Vec::new();
        let mut head_feat = Vec::new();
        for (i, e) in graph.edges.iter().enumerate() {
            if !e.kind.is_timing() || ctx.class[e.dst] != NodeClass::Internal {
                continue;
            }
            if ctx.class[e.src] == NodeClass::Skipped {
                return Err(Error::InvalidArgument(format!(
                    "timing edge {i} runs from a node after the core into the core"
                )));
            }
            if ctx.level[e.src] >= ctx.level[e.dst] {
                return Err(Error::InvalidArgument(format!("timing edge {i} does not increase the level")));
            }
            has_pred[e.dst] = true;
            let lvl = ctx.level[e.dst];
            let he = HeadEdge {
                edge: i,
                src: e.src as u32,
                dst: e.dst as u32,
            };
            match e.kind {
                EdgeKind::Cell => {
                    let id = e
                        .lut_id
                        .ok_or_else(|| Error::Malformed(format!("cell edge {i} has no LUT")))?;
                    let range = *luts
                        .range
                        .get(&id)
                        .ok_or_else(|| Error::Malformed(format!("cell edge {i} references unknown LUT {id}")))?;
                    cell_in.entry(lvl).or_default().push(CellIn {
                        src: he.src,
                        dst: he.dst,
                        range,
                    });
                    cell_heads.push(he);
                }
                EdgeKind::Net => {
                    net_in.entry(lvl).or_default().push((he.src, he.dst));
                    head_feat.extend(stats.edge.apply_row(edge_feats(e, i)?));
                    net_heads.push(he);
                }
                EdgeKind::NetInv => unreachable!("filtered above"),
            }
        }
        let boundary: Vec<u32> = internal.iter().copied().filter(|&v| !has_pred[v as usize]).collect();
        let mut by_level: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
        for &v in internal.iter().filter(|&&v| has_pred[v as usize]) {
            by_level.entry(ctx.level[v as usize]).or_default().push(v);
        }
        let steps = by_level
            .into_iter()
            .map(|(lvl, nodes)| {
                Step::new(
                    lvl,
                    nodes,
                    cell_in.remove(&lvl).unwrap_or_default(),
                    net_in.remove(&lvl).unwrap_or_default(),
                )
            })
            .collect();
        let nh = net_heads.len();
        Ok(Prepared {
            n,
            x,
            level_enc,
            net,
            inv,
            union,
            class: ctx.class.clone(),
            core: ctx.core.clone(),
            to_parent: ctx.to_parent.clone(),
            edge_to_parent: ctx.edge_to_parent.clone(),
            internal,
            external,
            boundary,
            steps,
            luts,
            cell_heads,
            net_heads,
            net_head_feat: Mat::from_vec(nh, NET_EDGE_FEATURES, head_feat).expect("edge features"),
        })
    }

    /// Whole-graph preparation.
    pub fn whole(graph: &CircuitGraph, stats: &Standardizer, hyper: &Hyper) -> Result<Self> {
        let schedule = topo_levels(graph)?;
        Self::new(graph, &NodeContext::whole(graph, &schedule), stats, hyper)
    }
}

/// Fits input and target scaling over a set of circuits. Target scalings
/// stay at identity when no labels are given.
pub fn fit_stats(circuits: &[(&CircuitGraph, Option<&TimingAnnotation>)]) -> Result<Standardizer> {
    use crate::nn::params::Affine;
    let mut levels = Vec::new();
    for (g, _) in circuits {
        levels.extend(topo_levels(g)?.node_level.into_iter().map(|l| [l as f64]));
    }
    let nodes = circuits.iter().flat_map(|(g, _)| g.nodes.iter().map(|n| n.features.as_slice()));
    let edges = circuits.iter().flat_map(|(g, _)| {
        g.edges.iter().filter(|e| e.kind != EdgeKind::Cell).map(|e| e.features.as_slice())
    });
    let luts: Vec<&crate::graph::Lut> = circuits.iter().flat_map(|(g, _)| g.luts.values()).collect();
    let scalars = |f: &dyn Fn(&crate::graph::Lut) -> Vec<f64>| -> Affine {
        let v: Vec<[f64; 1]> = luts.iter().flat_map(|l| f(l)).map(|x| [x]).collect();
        Affine::fit(1, v.iter().map(|r| r.as_slice()))
    };
    let labeled: Vec<(&CircuitGraph, &TimingAnnotation)> =
        circuits.iter().filter_map(|(g, l)| l.map(|l| (*g, l))).collect();
    let quads = |f: &dyn Fn(&CircuitGraph, &TimingAnnotation) -> Vec<Quad>| -> Affine {
        let rows: Vec<Quad> = labeled.iter().flat_map(|(g, l)| f(g, l)).collect();
        Affine::fit(NUM_CORNERS, rows.iter().map(|r| r.as_slice()))
    };
    Ok(Standardizer {
        node: Affine::fit(NODE_FEATURES, nodes),
        edge: Affine::fit(NET_EDGE_FEATURES, edges),
        level: Affine::fit(1, levels.iter().map(|r| r.as_slice())),
        lut_row: scalars(&|l| l.row_axis.clone()),
        lut_col: scalars(&|l| l.col_axis.clone()),
        lut_delay: scalars(&|l| l.delay_table.concat()),
        lut_slew: scalars(&|l| l.slew_table.concat()),
        at: quads(&|_, l| l.at.clone()),
        slew: quads(&|_, l| l.slew.clone()),
        cell_delay: quads(&|g, l| l.cell_delays(g).map(|(_, d)| d).collect()),
        net_delay: quads(&|g, l| l.net_delays(g).map(|(_, d)| d).collect()),
    })
}

// ---------------------------------------------------------------------------
// Encoder / decoder

pub struct EncoderOut {
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
    /// Mean of `z` over nodes, `[1, latent]`.
    pub g: Var,
}

fn ae_stack(t: &mut Tape, p: &mut Binder, prefix: &str, layers_n: usize, mut h: Var, prep: &Prepared) -> Result<Var> {
    let e = t.constant(prep.union.feat.clone());
    for k in 0..layers_n {
        h = layers::ae_layer(t, p, &format!("{prefix}.l{k}"), h, &prep.union, e)?;
    }
    Ok(h)
}

fn row_mean(t: &mut Tape, a: Var) -> Result<Var> {
    let n = t.value(a).rows;
    let seg = Arc::new(Segments::group_by(1, std::iter::repeat(0).take(n)));
    t.segment_reduce(a, seg, Reduce::Mean)
}

/// Encoder. With `noise`, `z = mu + exp(logvar / 2) * eps`; otherwise `z = mu`.
pub fn encode(t: &mut Tape, p: &mut Binder, prep: &Prepared, noise: Option<&mut ChaCha8Rng>) -> Result<EncoderOut> {
    let x = t.constant(prep.x.clone());
    let h0 = layers::linear(t, p, "enc.in", x)?;
    let layers_n = p.hyper().ae_enc_layers;
    let h = ae_stack(t, p, "enc", layers_n, h0, prep)?;
    let mu = layers::linear(t, p, "enc.mu", h)?;
    let logvar = layers::linear(t, p, "enc.logvar", h)?;
    let z = match noise {
        Some(rng) => {
            let (r, c) = t.value(mu).shape();
            let eps = Mat::from_vec(r, c, (0..r * c).map(|_| StandardNormal.sample(rng)).collect())?;
            let eps = t.constant(eps);
            let half = t.scale(logvar, 0.5);
            let sd = t.exp(half);
            let noise = t.mul(sd, eps)?;
            t.add(mu, noise)?
        }
        None => mu,
    };
    let g = row_mean(t, z)?;
    Ok(EncoderOut { mu, logvar, z, g })
}

/// Decoder: node feature reconstruction from latents.
pub fn decode(t: &mut Tape, p: &mut Binder, prep: &Prepared, z: Var) -> Result<Var> {
    let h0 = layers::linear(t, p, "dec.in", z)?;
    let layers_n = p.hyper().ae_dec_layers;
    let h = ae_stack(t, p, "dec", layers_n, h0, prep)?;
    layers::linear(t, p, "dec.out", h)
}

// ---------------------------------------------------------------------------
// GNN forward

/// Node latents and graph embedding fed to the GCN input.
#[derive(Clone, Copy, Debug)]
pub struct Latent {
    pub z: Var,
    pub g: Var,
}

/// Latents computed once on a parent graph.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenLatent {
    pub z: Mat,
    pub g: Mat,
}

impl FrozenLatent {
    pub fn bind(&self, t: &mut Tape, prep: &Prepared) -> Latent {
        let mut z = Mat::zeros(prep.n, self.z.cols);
        for (v, &pv) in prep.to_parent.iter().enumerate() {
            z.row_mut(v).copy_from_slice(self.z.row(pv));
        }
        Latent {
            z: t.constant(z),
            g: t.constant(self.g.clone()),
        }
    }
}

/// Representation and AT rows of external nodes, aligned with
/// [`Prepared::external`].
#[derive(Clone, Debug)]
pub struct External {
    pub f: Mat,
    pub at: Mat,
}

/// Finished node representations and AT states by parent node id.
#[derive(Clone, Debug)]
pub struct NodeStore {
    pub f: Mat,
    pub at: Mat,
    pub filled: Vec<bool>,
}

impl NodeStore {
    pub fn new(n_parent: usize, width: usize) -> Self {
        NodeStore {
            f: Mat::zeros(n_parent, width),
            at: Mat::zeros(n_parent, width),
            filled: vec![false; n_parent],
        }
    }

    pub fn external(&self, prep: &Prepared) -> Result<External> {
        let w = self.f.cols;
        let mut f = Mat::zeros(prep.external.len(), w);
        let mut at = Mat::zeros(prep.external.len(), w);
        for (r, &v) in prep.external.iter().enumerate() {
            let pv = prep.to_parent[v as usize];
            if !self.filled.get(pv).copied().unwrap_or(false) {
                return Err(Error::InvalidArgument(format!(
                    "node {pv} is read before any piece computed it; pieces must run in order"
                )));
            }
            f.row_mut(r).copy_from_slice(self.f.row(pv));
            at.row_mut(r).copy_from_slice(self.at.row(pv));
        }
        Ok(External { f, at })
    }

    /// Records the internal rows of a finished pass.
    pub fn record(&mut self, t: &Tape, prep: &Prepared, out: &GnnOut) {
        let f = t.value(out.f);
        let at = t.value(out.at_internal);
        for (r, &v) in prep.internal.iter().enumerate() {
            let pv = prep.to_parent[v as usize];
            self.f.row_mut(pv).copy_from_slice(f.row(v as usize));
            self.at.row_mut(pv).copy_from_slice(at.row(r));
            self.filled[pv] = true;
        }
    }
}

/// AT states produced by the propagation layer.
pub struct AtOut {
    /// Table 0: external rows; table 1: boundary rows; then one per step.
    pub tables: Vec<Var>,
    /// `(table, row)` of each node's AT state; `None` for skipped nodes.
    pub loc: Vec<Option<(u32, u32)>>,
    /// Raw attention output per step and edge kind.
    pub attention: Vec<Var>,
}

impl AtOut {
    fn locs(&self, nodes: impl Iterator<Item = u32>) -> Result<Vec<(u32, u32)>> {
        nodes
            .map(|v| {
                self.loc[v as usize]
                    .ok_or_else(|| Error::InvalidArgument(format!("node {v} has no arrival-time state")))
            })
            .collect()
    }

    pub fn gather(&self, t: &mut Tape, nodes: impl Iterator<Item = u32>) -> Result<Var> {
        let idx = self.locs(nodes)?;
        t.gather_multi(&self.tables, idx)
    }
}

pub struct GnnOut {
    /// Node representation after the GCN stack (external rows from the store).
    pub f: Var,
    pub at: AtOut,
    /// AT state of internal nodes, in [`Prepared::internal`] order.
    pub at_internal: Var,
    /// `[n_internal, 8]` standardized AT and slew.
    pub as_: Var,
    /// `[cell_heads, 4]` standardized cell delay.
    pub cd: Var,
    /// `[net_heads, 4]` standardized net delay.
    pub nd: Var,
}

struct Banks {
    cell: Option<(Var, Var)>,
    net: Option<(Var, Var)>,
}

fn kind_messages(
    t: &mut Tape,
    p: &mut Binder,
    kind: &str,
    f: Var,
    at: &AtOut,
    edges: &[(u32, u32)],
    bank: (Var, Var),
    ranges: Vec<(u32, u32)>,
    attention: &mut Vec<Var>,
) -> Result<Var> {
    let fi = t.gather(f, edges.iter().map(|e| e.1).collect())?;
    let fj = t.gather(f, edges.iter().map(|e| e.0).collect())?;
    let atj = at.gather(t, edges.iter().map(|e| e.0))?;
    let qin = t.concat_cols(&[fi, fj, atj])?;
    let q = layers::mlp(t, p, &format!("at.{kind}.q"), qin)?;
    let q = t.add(q, atj)?;
    let o = layers::mja(t, p, "at.mja", q, bank, ranges)?;
    attention.push(o.attention);
    let oq = t.add(o.out, q)?;
    let gain = p.get(t, &format!("at.{kind}.ln.gain"))?;
    let bias = p.get(t, &format!("at.{kind}.ln.bias"))?;
    let y = t.layer_norm(oq, gain, bias)?;
    let min = t.concat_cols(&[fi, fj, atj, y])?;
    let m = layers::mlp(t, p, &format!("at.{kind}.m"), min)?;
    t.add(m, atj)
}

/// Level-ordered AT propagation over node representations `f`.
pub fn propagate_at(t: &mut Tape, p: &mut Binder, prep: &Prepared, f: Var, ext_at: Option<&Mat>) -> Result<AtOut> {
    let d = p.hyper().hidden;
    let mut at = AtOut {
        tables: Vec::with_capacity(prep.steps.len() + 2),
        loc: vec![None; prep.n],
        attention: Vec::new(),
    };
    let ext = match ext_at {
        Some(m) if m.rows == prep.external.len() => t.constant(m.clone()),
        None if prep.external.is_empty() => t.constant(Mat::zeros(0, d)),
        _ => return Err(Error::shape("propagate_at", "external AT rows do not match external nodes")),
    };
    at.tables.push(ext);
    for (r, &v) in prep.external.iter().enumerate() {
        at.loc[v as usize] = Some((0, r as u32));
    }

    let boundary = if prep.boundary.is_empty() {
        t.constant(Mat::zeros(0, d))
    } else {
        let fb = t.gather(f, prep.boundary.clone())?;
        layers::linear(t, p, "at.boundary", fb)?
    };
    at.tables.push(boundary);
    for (r, &v) in prep.boundary.iter().enumerate() {
        at.loc[v as usize] = Some((1, r as u32));
    }

    let needs_cell = prep.steps.iter().any(|s| !s.cell.is_empty());
    let needs_net = prep.steps.iter().any(|s| !s.net.is_empty());
    let banks = Banks {
        cell: if needs_cell {
            let rows = t.constant(prep.luts.rows.clone());
            let cols = t.constant(prep.luts.cols.clone());
            let k1 = layers::linear(t, p, "at.lut.row", rows)?;
            let k2 = layers::linear(t, p, "at.lut.col", cols)?;
            let k = layers::joint_key_indexed(t, k1, k2, prep.luts.ri.clone(), prep.luts.ci.clone())?;
            let vals = t.constant(prep.luts.vals.clone());
            let v = layers::linear(t, p, "at.lut.val", vals)?;
            Some(layers::mja_bank(t, p, "at.mja", k, v)?)
        } else {
            None
        },
        net: if needs_net {
            let k = p.get(t, "at.net.bank_k")?;
            let v = p.get(t, "at.net.bank_v")?;
            Some(layers::mja_bank(t, p, "at.mja", k, v)?)
        } else {
            None
        },
    };

    let mut attn = Vec::new();
    for step in &prep.steps {
        let mut msgs = Vec::with_capacity(2);
        if let Some(bank) = banks.cell.filter(|_| !step.cell.is_empty()) {
            let edges: Vec<(u32, u32)> = step.cell.iter().map(|c| (c.src, c.dst)).collect();
            let ranges = step.cell.iter().map(|c| c.range).collect();
            msgs.push(kind_messages(t, p, "cell", f, &at, &edges, bank, ranges, &mut attn)?);
        }
        if let Some(bank) = banks.net.filter(|_| !step.net.is_empty()) {
            let ranges = vec![(0, NET_BANK as u32); step.net.len()];
            msgs.push(kind_messages(t, p, "net", f, &at, &step.net, bank, ranges, &mut attn)?);
        }
        let m = if msgs.len() == 1 { msgs[0] } else { t.concat_rows(&msgs)? };
        let a = t.segment_reduce(m, step.by_dst.clone(), Reduce::Mean)?;
        let b = t.segment_reduce(m, step.by_dst.clone(), Reduce::Max)?;
        let fi = t.gather(f, step.nodes.clone())?;
        let cat = t.concat_cols(&[a, b, fi])?;
        let at_i = layers::mlp(t, p, "at.agg", cat)?;
        let table = at.tables.len() as u32;
        at.tables.push(at_i);
        for (r, &v) in step.nodes.iter().enumerate() {
            at.loc[v as usize] = Some((table, r as u32));
        }
    }
    at.attention = attn;
    Ok(at)
}

/// GCN input, RLL-GCN stack, AT propagation and heads.
pub fn forward_gnn(
    t: &mut Tape,
    p: &mut Binder,
    prep: &Prepared,
    latent: Option<Latent>,
    ext: Option<&External>,
) -> Result<GnnOut> {
    let h = p.hyper().clone();
    let want = gnn_input_width(&h, latent.is_some());
    let have = p.params().get("gnn.in.w")?.shape[0];
    if want != have {
        return Err(Error::InvalidArgument(if latent.is_none() {
            "model expects encoder latents but none were supplied".into()
        } else {
            "encoder latents supplied to a model trained without an encoder".into()
        }));
    }
    let x = t.constant(prep.x.clone());
    let le = t.constant(prep.level_enc.clone());
    let mut parts = vec![x];
    if let Some(l) = latent {
        parts.push(l.z);
        let g = t.gather(l.g, vec![0; prep.n])?;
        parts.push(g);
    }
    parts.push(le);
    let input = t.concat_cols(&parts)?;
    let mut f = layers::linear(t, p, "gnn.in", input)?;
    let ne = t.constant(prep.net.feat.clone());
    let ie = t.constant(prep.inv.feat.clone());
    for k in 0..h.gcn_layers {
        f = layers::rll_gcn(t, p, &format!("gnn.l{k}"), f, &[("net", &prep.net, ne), ("inv", &prep.inv, ie)])?;
    }
    if !prep.external.is_empty() {
        let ext = ext.ok_or_else(|| Error::InvalidArgument("piece has external nodes but no store values".into()))?;
        if ext.f.rows != prep.external.len() {
            return Err(Error::shape("forward_gnn", "external rows do not match external nodes"));
        }
        let fe = t.constant(ext.f.clone());
        let mut idx: Vec<(u32, u32)> = (0..prep.n as u32).map(|v| (0, v)).collect();
        for (r, &v) in prep.external.iter().enumerate() {
            idx[v as usize] = (1, r as u32);
        }
        f = t.gather_multi(&[f, fe], idx)?;
    }
    let at = propagate_at(t, p, prep, f, ext.map(|e| &e.at))?;

    let at_internal = at.gather(t, prep.internal.iter().copied())?;
    let f_int = t.gather(f, prep.internal.clone())?;
    let r = t.concat_cols(&[at_internal, f_int])?;
    let as_ = layers::mlp(t, p, "head.as", r)?;

    let edge_repr = |t: &mut Tape, heads: &[HeadEdge]| -> Result<Var> {
        let at_s = at.gather(t, heads.iter().map(|e| e.src))?;
        let f_s = t.gather(f, heads.iter().map(|e| e.src).collect())?;
        let at_d = at.gather(t, heads.iter().map(|e| e.dst))?;
        let f_d = t.gather(f, heads.iter().map(|e| e.dst).collect())?;
        t.concat_cols(&[at_s, f_s, at_d, f_d])
    };
    let cd_in = edge_repr(t, &prep.cell_heads)?;
    let nd_in = edge_repr(t, &prep.net_heads)?;
    let cd = layers::mlp(t, p, "head.cd", cd_in)?;
    let nfe = t.constant(prep.net_head_feat.clone());
    let nd_in = t.concat_cols(&[nd_in, nfe])?;
    let nd = layers::mlp(t, p, "head.nd", nd_in)?;
    Ok(GnnOut {
        f,
        at,
        at_internal,
        as_,
        cd,
        nd,
    })
}

// ---------------------------------------------------------------------------
// Targets

/// Standardized regression targets aligned with the head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub as_: Mat,
    pub cd: Mat,
    pub nd: Mat,
}

impl Targets {
    /// `labels` are indexed by parent node and parent edge id.
    pub fn new(prep: &Prepared, labels: &TimingAnnotation, stats: &Standardizer) -> Result<Self> {
        let mut as_ = Mat::zeros(prep.internal.len(), AS_WIDTH);
        for (r, &v) in prep.internal.iter().enumerate() {
            let pv = prep.to_parent[v as usize];
            let (at, slew) = match (labels.at.get(pv), labels.slew.get(pv)) {
                (Some(a), Some(s)) => (a, s),
                _ => return Err(Error::Malformed(format!("labels lack node {pv}"))),
            };
            let row = as_.row_mut(r);
            row[..NUM_CORNERS].copy_from_slice(&stats.at.apply_row(at));
            row[NUM_CORNERS..].copy_from_slice(&stats.slew.apply_row(slew));
        }
        let delays = |heads: &[HeadEdge], aff: &crate::nn::params::Affine| -> Result<Mat> {
            let mut m = Mat::zeros(heads.len(), NUM_CORNERS);
            for (r, h) in heads.iter().enumerate() {
                let pe = prep.edge_to_parent[h.edge];
                let d = labels
                    .edge_delay
                    .get(pe)
                    .copied()
                    .flatten()
                    .ok_or_else(|| Error::Malformed(format!("labels lack the delay of edge {pe}")))?;
                m.row_mut(r).copy_from_slice(&aff.apply_row(&d));
            }
            Ok(m)
        };
        Ok(Targets {
            as_,
            cd: delays(&prep.cell_heads, &stats.cell_delay)?,
            nd: delays(&prep.net_heads, &stats.net_delay)?,
        })
    }
}

// ---------------------------------------------------------------------------
// Whole-circuit inference

/// A circuit split into ordered pieces, each prepared for the forward pass.
pub struct PreparedCircuit {
    pub schedule: LevelSchedule,
    pub pieces: Vec<Prepared>,
}

impl PreparedCircuit {
    /// Evaluated whole when it has at most `max_size` nodes, otherwise
    /// partitioned with padding `pad`.
    pub fn new(graph: &CircuitGraph, stats: &Standardizer, hyper: &Hyper, max_size: usize, pad: usize) -> Result<Self> {
        let schedule = topo_levels(graph)?;
        let pieces = if graph.num_nodes() <= max_size {
            vec![Prepared::new(graph, &NodeContext::whole(graph, &schedule), stats, hyper)?]
        } else {
            let cfg = PartitionConfig {
                split_oversized: true,
                ..PartitionConfig::new(max_size, pad)
            };
            partition(graph, &schedule, &cfg)?
                .iter()
                .map(|sg| Prepared::new(&sg.local_graph, &NodeContext::piece(graph, &schedule, sg), stats, hyper))
                .collect::<Result<_>>()?
        };
        Ok(PreparedCircuit { schedule, pieces })
    }

    pub fn num_nodes(&self) -> usize {
        self.schedule.node_level.len()
    }
}

/// Encoder means of every node computed piece by piece (exact when the
/// padding covers the encoder depth), and their mean.
pub fn frozen_latent(params: &ModelParams, circuit: &PreparedCircuit) -> Result<FrozenLatent> {
    let n = circuit.num_nodes();
    let dim = params.hyper.latent_dim;
    let mut z = Mat::zeros(n, dim);
    for prep in &circuit.pieces {
        let mut t = Tape::new();
        let mut b = Binder::new(params, |_| false);
        let out = encode(&mut t, &mut b, prep, None)?;
        let mu = t.value(out.mu);
        for v in 0..prep.n {
            if prep.core[v] {
                z.row_mut(prep.to_parent[v]).copy_from_slice(mu.row(v));
            }
        }
    }
    let mut g = Mat::zeros(1, dim);
    for v in 0..n {
        for c in 0..dim {
            g.data[c] += z.at(v, c) / n as f64;
        }
    }
    Ok(FrozenLatent { z, g })
}

/// De-standardized predictions indexed by parent node / edge.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub at: Vec<Quad>,
    pub slew: Vec<Quad>,
    /// Cell and net edges; `None` for net_inv edges.
    pub edge_delay: Vec<Option<Quad>>,
}

fn quad(row: &[f64]) -> Quad {
    let mut q = [0.0; NUM_CORNERS];
    q.copy_from_slice(&row[..NUM_CORNERS]);
    q
}

/// Runs the model over all pieces in order.
pub fn predict(
    params: &ModelParams,
    stats: &Standardizer,
    graph: &CircuitGraph,
    circuit: &PreparedCircuit,
    latent: Option<&FrozenLatent>,
) -> Result<Predictions> {
    let n = circuit.num_nodes();
    let mut pred = Predictions {
        at: vec![[0.0; NUM_CORNERS]; n],
        slew: vec![[0.0; NUM_CORNERS]; n],
        edge_delay: vec![None; graph.edges.len()],
    };
    let mut store = NodeStore::new(n, params.hyper.hidden);
    for prep in &circuit.pieces {
        let mut t = Tape::new();
        let mut b = Binder::new(params, |_| false);
        let lat = latent.map(|l| l.bind(&mut t, prep));
        let ext = store.external(prep)?;
        let out = forward_gnn(&mut t, &mut b, prep, lat, Some(&ext))?;
        store.record(&t, prep, &out);
        let as_ = t.value(out.as_);
        for (r, &v) in prep.internal.iter().enumerate() {
            let pv = prep.to_parent[v as usize];
            let row = as_.row(r);
            pred.at[pv] = quad(&stats.at.invert_row(&row[..NUM_CORNERS]));
            pred.slew[pv] = quad(&stats.slew.invert_row(&row[NUM_CORNERS..]));
        }
        for (heads, out_v, aff) in [
            (&prep.cell_heads, out.cd, &stats.cell_delay),
            (&prep.net_heads, out.nd, &stats.net_delay),
        ] {
            let m = t.value(out_v);
            for (r, h) in heads.iter().enumerate() {
                pred.edge_delay[prep.edge_to_parent[h.edge]] = Some(quad(&aff.invert_row(m.row(r))));
            }
        }
    }
    Ok(pred)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::datagen::{gen_circuit, label_circuit, GenConfig};
    use crate::sta::NetDelayModel;
    use rand::{Rng, SeedableRng};

    pub fn small_hyper() -> Hyper {
        Hyper {
            hidden: 8,
            ae_hidden: 6,
            heads: 2,
            d_k: 4,
            d_v: 4,
            n_freq: 3,
            gcn_layers: 2,
            ae_enc_layers: 2,
            ae_dec_layers: 2,
            ..Hyper::default()
        }
    }

    pub fn circuit(n: usize, seed: u64) -> (CircuitGraph, TimingAnnotation) {
        let g = gen_circuit(&GenConfig {
            seed,
            n_nodes: n,
            library_size: 3,
            lut_grid: [3, 4],
            ..GenConfig::default()
        })
        .unwrap();
        let l = label_circuit(&g, &NetDelayModel::default(), 0.0).unwrap();
        (g, l)
    }

    pub fn model(hyper: Hyper, use_encoder: bool, seed: u64) -> ModelParams {
        let mut p = ModelParams::new(hyper);
        if use_encoder {
            declare_encoder(&mut p);
        }
        declare_gnn(&mut p, use_encoder);
        init_params(&mut p, seed, |_| true);
        p
    }

    fn whole(g: &CircuitGraph, l: &TimingAnnotation, h: &Hyper) -> (Prepared, Standardizer) {
        let stats = fit_stats(&[(g, Some(l))]).unwrap();
        (Prepared::whole(g, &stats, h).unwrap(), stats)
    }

    #[test]
    fn output_shapes_and_encoder_wiring() {
        let (g, l) = circuit(120, 1);
        let h = small_hyper();
        let (prep, _) = whole(&g, &l, &h);
        for enc in [true, false] {
            let p = model(h.clone(), enc, 3);
            let mut t = Tape::new();
            let mut b = Binder::new(&p, |_| true);
            let lat = if enc {
                let e = encode(&mut t, &mut b, &prep, None).unwrap();
                Some(Latent { z: e.z, g: e.g })
            } else {
                None
            };
            let out = forward_gnn(&mut t, &mut b, &prep, lat, None).unwrap();
            assert_eq!(t.value(out.as_).shape(), (g.num_nodes(), AS_WIDTH));
            assert_eq!(t.value(out.cd).shape(), (g.count_edges(EdgeKind::Cell), 4));
            assert_eq!(t.value(out.nd).shape(), (g.count_edges(EdgeKind::Net), 4));
            assert_eq!(expects_encoder(&p), enc);
        }
        let with = model(h.clone(), true, 3);
        let without = model(h.clone(), false, 3);
        assert_eq!(
            with.get("gnn.in.w").unwrap().shape[0] - without.get("gnn.in.w").unwrap().shape[0],
            2 * h.latent_dim
        );
        // A model built with an encoder refuses to run without latents.
        let mut t = Tape::new();
        let mut b = Binder::new(&with, |_| true);
        assert!(forward_gnn(&mut t, &mut b, &prep, None, None).is_err());
    }

    #[test]
    fn graph_embedding_of_identical_latents() {
        let (g, l) = circuit(60, 2);
        let h = small_hyper();
        let (prep, _) = whole(&g, &l, &h);
        let mut p = model(h.clone(), true, 4);
        p.get_mut("enc.mu.w").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        let bias = vec![0.5, -1.0, 2.0, 0.25];
        p.get_mut("enc.mu.b").unwrap().data = bias.clone();
        let mut t = Tape::new();
        let mut b = Binder::new(&p, |_| true);
        let e = encode(&mut t, &mut b, &prep, None).unwrap();
        for (a, w) in t.value(e.g).data.iter().zip(&bias) {
            assert!((a - w).abs() < 1e-12);
        }
    }

    fn random_f(prep: &Prepared, d: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_vec(prep.n, d, (0..prep.n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn at_rows(p: &ModelParams, prep: &Prepared, f: &Mat) -> Vec<Vec<f64>> {
        let mut t = Tape::new();
        let mut b = Binder::new(p, |_| true);
        let fv = t.constant(f.clone());
        let at = propagate_at(&mut t, &mut b, prep, fv, None).unwrap();
        let all = at.gather(&mut t, 0..prep.n as u32).unwrap();
        (0..prep.n).map(|v| t.value(all).row(v).to_vec()).collect()
    }

    #[test]
    fn boundary_nodes_depend_only_on_themselves() {
        let (g, l) = circuit(150, 5);
        let h = small_hyper();
        let (prep, _) = whole(&g, &l, &h);
        let p = model(h.clone(), false, 6);
        let f = random_f(&prep, h.hidden, 7);
        let base = at_rows(&p, &prep, &f);
        let mut f2 = random_f(&prep, h.hidden, 8);
        for &v in &prep.boundary {
            f2.row_mut(v as usize).copy_from_slice(f.row(v as usize));
        }
        let other = at_rows(&p, &prep, &f2);
        let w = p.get("at.boundary.w").unwrap();
        let bias = p.get("at.boundary.b").unwrap();
        for &v in &prep.boundary {
            let v = v as usize;
            assert_eq!(base[v], other[v]);
            for c in 0..h.hidden {
                let direct: f64 = bias.data[c] + (0..h.hidden).map(|r| f.at(v, r) * w.data[r * h.hidden + c]).sum::<f64>();
                assert!((base[v][c] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn at_depends_only_on_lower_levels() {
        let (g, l) = circuit(200, 9);
        let h = small_hyper();
        let (prep, _) = whole(&g, &l, &h);
        let schedule = topo_levels(&g).unwrap();
        let p = model(h.clone(), false, 10);
        let f = random_f(&prep, h.hidden, 11);
        let base = at_rows(&p, &prep, &f);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..5 {
            let v = rng.gen_range(0..prep.n);
            let lv = schedule.node_level[v];
            let mut f2 = f.clone();
            f2.row_mut(v).iter_mut().for_each(|x| *x += 0.5);
            let moved = at_rows(&p, &prep, &f2);
            assert_ne!(base[v], moved[v]);
            for u in 0..prep.n {
                if u != v && schedule.node_level[u] <= lv {
                    assert_eq!(base[u], moved[u], "node {u} changed after perturbing node {v}");
                }
            }
        }
    }

    fn rev<T: Clone>(v: &[T]) -> Vec<T> {
        v.iter().rev().cloned().collect()
    }

    #[test]
    fn intra_level_order_does_not_matter() {
        let (g, l) = circuit(200, 13);
        let h = small_hyper();
        let (mut prep, _) = whole(&g, &l, &h);
        let p = model(h.clone(), false, 14);
        let f = random_f(&prep, h.hidden, 15);
        let base = at_rows(&p, &prep, &f);
        prep.steps = prep
            .steps
            .iter()
            .map(|s| {
                Step::new(s.level, rev(&s.nodes), rev(&s.cell), rev(&s.net))
            })
            .collect();
        prep.boundary.reverse();
        let perm = at_rows(&p, &prep, &f);
        for v in 0..prep.n {
            for (a, b) in base[v].iter().zip(&perm[v]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn partitioned_inference_matches_whole_graph() {
        let (g, l) = circuit(400, 16);
        let h = Hyper {
            gcn_layers: 4,
            ae_enc_layers: 4,
            ..small_hyper()
        };
        let stats = fit_stats(&[(&g, Some(&l))]).unwrap();
        let p = model(h.clone(), true, 17);
        let whole = PreparedCircuit::new(&g, &stats, &h, usize::MAX, 4).unwrap();
        let parts = PreparedCircuit::new(&g, &stats, &h, 60, 4).unwrap();
        assert!(parts.pieces.len() > 2);
        let lw = frozen_latent(&p, &whole).unwrap();
        let lp = frozen_latent(&p, &parts).unwrap();
        for (a, b) in lw.z.data.iter().zip(&lp.z.data) {
            assert!((a - b).abs() < 1e-9);
        }
        let pw = predict(&p, &stats, &g, &whole, Some(&lw)).unwrap();
        let pp = predict(&p, &stats, &g, &parts, Some(&lp)).unwrap();
        let close = |a: &Quad, b: &Quad| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-6);
        for v in 0..g.num_nodes() {
            assert!(close(&pw.at[v], &pp.at[v]), "AT of node {v}");
            assert!(close(&pw.slew[v], &pp.slew[v]), "slew of node {v}");
        }
        for (e, (a, b)) in pw.edge_delay.iter().zip(&pp.edge_delay).enumerate() {
            match (a, b) {
                (Some(a), Some(b)) => assert!(close(a, b), "delay of edge {e}"),
                (None, None) => {}
                _ => panic!("edge {e} predicted in one mode only"),
            }
        }
    }

    #[test]
    fn targets_follow_standardization() {
        let (g, l) = circuit(80, 18);
        let h = small_hyper();
        let (prep, stats) = whole(&g, &l, &h);
        let t = Targets::new(&prep, &l, &stats).unwrap();
        assert_eq!(t.as_.shape(), (g.num_nodes(), AS_WIDTH));
        let v = 7;
        assert!((t.as_.at(v, 2) - (l.at[v][2] - stats.at.mean[2]) / stats.at.std[2]).abs() < 1e-12);
        let e = prep.net_heads[0];
        let d = l.edge_delay[e.edge].unwrap();
        assert!((t.nd.at(0, 3) - (d[3] - stats.net_delay.mean[3]) / stats.net_delay.std[3]).abs() < 1e-12);
    }
}
