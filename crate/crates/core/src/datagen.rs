// SPDX-License-Identifier: Apache-2.0

//! Deterministic synthetic circuits and their timing labels.
//!
//! Cells with one or two inputs are appended one at a time. Each cell input
//! is wired to an existing driver (a primary input or an earlier cell output),
//! chosen from the most recent drivers with probability `depth_bias` and
//! uniformly otherwise, so `depth_bias` controls how deep the circuit gets.
//! Placement follows creation order along x. Drivers left without sinks get a
//! primary output.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{self, save_circuit, write_atomic};
use crate::graph::{feat, CircuitGraph, EdgeKind, EdgeRecord, Lut, LutId, NodeRecord, NODE_FEATURES};
use crate::level::topo_levels;
use crate::sta::{analyze, uniform_boundary, LabelDocument, NetDelayModel, PinTiming, TimingAnnotation};

/// Number of most recent drivers a biased pick chooses from.
const RECENT_WINDOW: usize = 4;
/// Wire capacitance per unit of Manhattan length.
const WIRE_CAP: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub seed: u64,
    pub n_nodes: usize,
    pub fanin_max: usize,
    /// Probability in `[0, 1]` of wiring a cell input to a recent driver.
    pub depth_bias: f64,
    /// LUT axis sizes `[rows, cols]`.
    pub lut_grid: [usize; 2],
    pub placement_extent: [f64; 2],
    /// Endpoint required times sit this far beyond the critical arrival.
    pub rat_margin: f64,
    /// Number of distinct LUTs in the cell library.
    pub library_size: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            n_nodes: 1000,
            fanin_max: 2,
            depth_bias: 0.2,
            lut_grid: [7, 7],
            placement_extent: [1000.0, 1000.0],
            rat_margin: 0.0,
            library_size: 16,
        }
    }
}

impl GenConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.n_nodes < 3 {
            return bad("n_nodes must be at least 3");
        }
        if self.fanin_max < 1 {
            return bad("fanin_max must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.depth_bias) {
            return bad("depth_bias must lie in [0, 1]");
        }
        if self.lut_grid.iter().any(|&n| n < 2) {
            return bad("lut_grid axes need at least 2 breakpoints");
        }
        if self.placement_extent.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return bad("placement_extent must be positive");
        }
        if !self.rat_margin.is_finite() {
            return bad("rat_margin must be finite");
        }
        if self.library_size < 1 {
            return bad("library_size must be at least 1");
        }
        Ok(())
    }
}

/// Random LUT whose tables increase along both axes.
fn random_lut(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Lut {
    let axis = |rng: &mut ChaCha8Rng, lo: f64, hi: f64, n: usize| -> Vec<f64> {
        let ratio = (hi / lo).powf(1.0 / (n - 1) as f64);
        let mut v = lo * rng.gen_range(0.8..1.2);
        (0..n)
            .map(|_| {
                let out = v;
                v *= ratio * rng.gen_range(0.9..1.1);
                out
            })
            .collect()
    };
    let row_axis = axis(rng, 1.0, 80.0, rows);
    let col_axis = axis(rng, 0.5, 60.0, cols);
    let d0 = rng.gen_range(5.0..15.0);
    let ds = rng.gen_range(0.1..0.4);
    let dl = rng.gen_range(0.5..2.0);
    let dx = rng.gen_range(0.0..0.01);
    let curve = rng.gen_range(0.5..1.0);
    let s0 = rng.gen_range(1.0..4.0);
    let ss = rng.gen_range(0.05..0.3);
    let sl = rng.gen_range(0.3..1.5);
    let table = |f: &dyn Fn(f64, f64) -> f64| -> Vec<Vec<f64>> {
        row_axis
            .iter()
            .map(|&s| col_axis.iter().map(|&l| f(s, l)).collect())
            .collect()
    };
    Lut {
        delay_table: table(&|s, l| d0 + ds * s + dl * l.powf(curve) + dx * s * l),
        slew_table: table(&|s, l| s0 + ss * s + sl * l),
        row_axis,
        col_axis,
    }
}

struct Pin {
    pi: bool,
    po: bool,
    fanin: bool,
    fanout: bool,
    x: f64,
    y: f64,
    cap: f64,
}

/// Generates one validated circuit.
pub fn gen_circuit(cfg: &GenConfig) -> Result<CircuitGraph> {
    gen_named(cfg, format!("synth_s{}_n{}", cfg.seed, cfg.n_nodes))
}

fn gen_named(cfg: &GenConfig, name: String) -> Result<CircuitGraph> {
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let [w, h] = cfg.placement_extent;

    let luts: BTreeMap<LutId, Lut> = (0..cfg.library_size as LutId)
        .map(|id| (id, random_lut(&mut rng, cfg.lut_grid[0], cfg.lut_grid[1])))
        .collect();

    let target = cfg.n_nodes;
    let n_pi = (target / 40).clamp(1, 256);
    let mut pins: Vec<Pin> = Vec::with_capacity(target + target / 8);
    // (driver, sink) pairs, later turned into net/net_inv edges.
    let mut nets: Vec<(usize, usize)> = Vec::new();
    let mut cells: Vec<(usize, usize, LutId)> = Vec::new();
    let mut drivers: Vec<usize> = Vec::new();
    let mut sinks_of: Vec<usize> = Vec::new();
    let mut dangling = 0usize;

    for _ in 0..n_pi {
        drivers.push(pins.len());
        sinks_of.push(0);
        dangling += 1;
        pins.push(Pin {
            pi: true,
            po: false,
            fanin: false,
            fanout: true,
            x: rng.gen_range(0.0..0.02 * w),
            y: rng.gen_range(0.0..h),
            cap: 0.0,
        });
    }
    // Expected cell count, for placement along x.
    let est_cells = (target.saturating_sub(n_pi) as f64 / 3.0).max(1.0);
    let mut n_cells = 0usize;
    while pins.len() + dangling + 2 <= target {
        let k = rng.gen_range(1..=cfg.fanin_max.min(2));
        let cx = (w * (0.02 + 0.96 * n_cells as f64 / est_cells) + rng.gen_range(-0.02..0.02) * w).clamp(0.0, w);
        let cy = rng.gen_range(0.0..h);
        let mut chosen: Vec<usize> = Vec::with_capacity(k);
        for _ in 0..k {
            let pick = |rng: &mut ChaCha8Rng| -> usize {
                if rng.gen_bool(cfg.depth_bias) {
                    let lo = drivers.len().saturating_sub(RECENT_WINDOW);
                    rng.gen_range(lo..drivers.len())
                } else {
                    rng.gen_range(0..drivers.len())
                }
            };
            let mut di = pick(&mut rng);
            // Two inputs of one cell use distinct drivers when possible.
            for _ in 0..4 {
                if !chosen.contains(&di) {
                    break;
                }
                di = pick(&mut rng);
            }
            chosen.push(di);
        }
        let mut fanins = Vec::with_capacity(k);
        for &di in &chosen {
            let d = drivers[di];
            if sinks_of[di] == 0 {
                dangling -= 1;
            }
            sinks_of[di] += 1;
            let p = pins.len();
            pins.push(Pin {
                pi: false,
                po: false,
                fanin: true,
                fanout: false,
                x: (cx + rng.gen_range(-2.0..2.0)).clamp(0.0, w),
                y: (cy + rng.gen_range(-2.0..2.0)).clamp(0.0, h),
                cap: rng.gen_range(0.5..2.0),
            });
            nets.push((d, p));
            fanins.push(p);
        }
        let out = pins.len();
        pins.push(Pin {
            pi: false,
            po: false,
            fanin: false,
            fanout: true,
            x: cx,
            y: cy,
            cap: 0.0,
        });
        for &f in &fanins {
            cells.push((f, out, rng.gen_range(0..cfg.library_size as LutId)));
        }
        drivers.push(out);
        sinks_of.push(0);
        dangling += 1;
        n_cells += 1;
    }
    for (di, &d) in drivers.iter().enumerate() {
        if sinks_of[di] == 0 {
            let p = pins.len();
            pins.push(Pin {
                pi: false,
                po: true,
                fanin: false,
                fanout: false,
                x: (pins[d].x + rng.gen_range(0.0..20.0)).clamp(0.0, w),
                y: (pins[d].y + rng.gen_range(-20.0..20.0)).clamp(0.0, h),
                cap: rng.gen_range(1.0..3.0),
            });
            nets.push((d, p));
        }
    }

    // Driver load: sink pin capacitance plus wire capacitance.
    let mut edges = Vec::with_capacity(2 * nets.len() + cells.len());
    let mut load = vec![0.0; pins.len()];
    for &(d, s) in &nets {
        let dx = pins[s].x - pins[d].x;
        let dy = pins[s].y - pins[d].y;
        let len = dx.abs() + dy.abs();
        load[d] += pins[s].cap + WIRE_CAP * len;
        edges.push(EdgeRecord {
            src: d,
            dst: s,
            kind: EdgeKind::Net,
            features: vec![dx, dy, len],
            lut_id: None,
        });
        edges.push(EdgeRecord {
            src: s,
            dst: d,
            kind: EdgeKind::NetInv,
            features: vec![-dx, -dy, len],
            lut_id: None,
        });
    }
    for &(f, o, lut) in &cells {
        edges.push(EdgeRecord {
            src: f,
            dst: o,
            kind: EdgeKind::Cell,
            features: Vec::new(),
            lut_id: Some(lut),
        });
    }
    for (p, l) in pins.iter_mut().zip(&load) {
        if p.fanout {
            p.cap = *l;
        }
    }

    let b = |x: bool| if x { 1.0 } else { 0.0 };
    let nodes = pins
        .iter()
        .enumerate()
        .map(|(id, p)| {
            let mut f = vec![0.0; NODE_FEATURES];
            f[feat::IS_PI] = b(p.pi);
            f[feat::IS_PO] = b(p.po);
            f[feat::IS_FANIN] = b(p.fanin);
            f[feat::IS_FANOUT] = b(p.fanout);
            f[feat::X] = p.x;
            f[feat::Y] = p.y;
            f[feat::CAP] = p.cap;
            NodeRecord {
                id,
                is_primary_input: p.pi,
                is_primary_output: p.po,
                is_fanin: p.fanin,
                is_fanout: p.fanout,
                features: f,
            }
        })
        .collect();
    let mut graph = CircuitGraph {
        name,
        nodes,
        edges,
        luts,
    };
    let schedule = topo_levels(&graph)?;
    let max_level = schedule.max_level().max(1) as f64;
    for (node, &l) in graph.nodes.iter_mut().zip(&schedule.node_level) {
        node.features[feat::DEPTH] = l as f64 / max_level;
    }
    let report = graph.validate();
    if !report.is_empty() {
        return Err(Error::InvalidGraph(report));
    }
    Ok(graph)
}

/// Labels one circuit with the margin-based endpoint convention.
pub fn label_circuit(graph: &CircuitGraph, net_model: &NetDelayModel, rat_margin: f64) -> Result<TimingAnnotation> {
    let schedule = topo_levels(graph)?;
    let boundary = uniform_boundary(graph, PinTiming::default());
    analyze(graph, &schedule, &boundary, net_model, rat_margin, false)
}

pub fn label_corpus(
    circuits: &[CircuitGraph],
    net_model: &NetDelayModel,
    rat_margin: f64,
) -> Result<Vec<TimingAnnotation>> {
    circuits
        .iter()
        .map(|g| label_circuit(g, net_model, rat_margin))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    /// Settings shared by every circuit; `seed` and `n_nodes` are overridden.
    pub circuit: GenConfig,
    pub net_model: NetDelayModel,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 0,
            n_train: 14,
            n_test: 7,
            min_nodes: 1000,
            max_nodes: 50_000,
            circuit: GenConfig::default(),
            net_model: NetDelayModel::default(),
        }
    }
}

/// One generated circuit with its labels and split.
#[derive(Clone, Debug)]
pub struct CorpusEntry {
    pub split: Split,
    pub graph: CircuitGraph,
    pub labels: TimingAnnotation,
}

/// Per-circuit generator settings: node counts are log-uniform in
/// `[min_nodes, max_nodes]`, seeds are derived from the corpus seed and the
/// circuit index.
pub fn corpus_plan(cfg: &CorpusConfig) -> Result<Vec<(Split, GenConfig, String)>> {
    if cfg.min_nodes < 3 || cfg.max_nodes < cfg.min_nodes {
        return Err(Error::InvalidArgument(format!(
            "invalid node range [{}, {}]",
            cfg.min_nodes, cfg.max_nodes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lo, hi) = ((cfg.min_nodes as f64).ln(), (cfg.max_nodes as f64).ln());
    let total = cfg.n_train + cfg.n_test;
    let mut plan = Vec::with_capacity(total);
    for i in 0..total {
        let n = if hi > lo { rng.gen_range(lo..hi).exp().round() as usize } else { cfg.min_nodes };
        let split = if i < cfg.n_train { Split::Train } else { Split::Test };
        let gen = GenConfig {
            seed: circuit_seed(cfg.seed, i),
            n_nodes: n,
            ..cfg.circuit.clone()
        };
        let tag = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        plan.push((split, gen, format!("{tag}{i:02}_n{n}")));
    }
    Ok(plan)
}

/// SplitMix64 of the corpus seed and circuit index.
fn circuit_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn gen_corpus(cfg: &CorpusConfig) -> Result<Vec<CorpusEntry>> {
    corpus_plan(cfg)?
        .into_iter()
        .map(|(split, gen, name)| {
            let graph = gen_named(&gen, name)?;
            let labels = label_circuit(&graph, &cfg.net_model, gen.rat_margin)?;
            Ok(CorpusEntry { split, graph, labels })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestCircuit {
    pub name: String,
    pub split: Split,
    pub circuit: String,
    pub labels: String,
    pub nodes: usize,
    pub levels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format: String,
    pub version: u32,
    pub config: CorpusConfig,
    pub circuits: Vec<ManifestCircuit>,
}

pub const CORPUS_FORMAT: &str = "preroute-corpus";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes circuit and label documents plus `manifest.json` into `dir`.
pub fn write_corpus(dir: &Path, cfg: &CorpusConfig, entries: &[CorpusEntry]) -> Result<CorpusManifest> {
    let mut circuits = Vec::with_capacity(entries.len());
    for e in entries {
        let name = e.graph.name.clone();
        let circuit = format!("{name}.circuit.json");
        let labels = format!("{name}.labels.json");
        save_circuit(&dir.join(&circuit), &e.graph)?;
        let doc = LabelDocument::new(&e.graph, e.labels.clone(), cfg.net_model, cfg.circuit.rat_margin);
        write_atomic(&dir.join(&labels), &format::to_json(&doc))?;
        circuits.push(ManifestCircuit {
            levels: topo_levels(&e.graph)?.num_levels(),
            nodes: e.graph.num_nodes(),
            name,
            split: e.split,
            circuit,
            labels,
        });
    }
    let manifest = CorpusManifest {
        format: CORPUS_FORMAT.into(),
        version: format::FORMAT_VERSION,
        config: cfg.clone(),
        circuits,
    };
    write_atomic(&dir.join(MANIFEST_FILE), &format::to_json(&manifest))?;
    Ok(manifest)
}

/// A corpus circuit loaded back from disk.
#[derive(Clone, Debug)]
pub struct LoadedCircuit {
    pub split: Split,
    pub graph: CircuitGraph,
    pub labels: TimingAnnotation,
}

pub fn load_corpus(dir: &Path) -> Result<(CorpusManifest, Vec<LoadedCircuit>)> {
    let manifest: CorpusManifest = format::from_json(&format::read_file(&dir.join(MANIFEST_FILE))?)?;
    if manifest.format != CORPUS_FORMAT {
        return Err(Error::Malformed(format!(
            "expected format `{CORPUS_FORMAT}`, found `{}`",
            manifest.format
        )));
    }
    let mut out = Vec::with_capacity(manifest.circuits.len());
    for c in &manifest.circuits {
        let graph = format::load_circuit(&dir.join(&c.circuit))?;
        let labels = LabelDocument::parse(&format::read_file(&dir.join(&c.labels))?, &graph)?.timing;
        out.push(LoadedCircuit {
            split: c.split,
            graph,
            labels,
        });
    }
    Ok((manifest, out))
}
