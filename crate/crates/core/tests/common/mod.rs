// SPDX-License-Identifier: Apache-2.0

//! Independent oracles shared by the integration tests. Nothing here calls
//! the levelizer, the timing engine or the partitioner it checks.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use preroute::datagen::{gen_circuit, label_circuit, GenConfig};
use preroute::nn::params::{Binder, ModelParams};
use preroute::nn::tensor::{Mat, Tape, Var};
use preroute::partition::SubGraph;
use preroute::sta::{is_late, NetDelayModel, TimingAnnotation};
use preroute::{CircuitGraph, EdgeKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Quad = [f64; 4];

/// Small random circuit with its oracle labels.
pub fn small_circuit(seed: u64, n: usize) -> (CircuitGraph, TimingAnnotation) {
    let g = gen_circuit(&GenConfig {
        seed,
        n_nodes: n,
        library_size: 4,
        lut_grid: [4, 4],
        ..GenConfig::default()
    })
    .expect("generator");
    let l = label_circuit(&g, &NetDelayModel::default(), 0.0).expect("labels");
    (g, l)
}

/// Timing successors and predecessors as `(edge id, neighbour)` lists.
pub struct Links {
    pub succ: Vec<Vec<(usize, usize)>>,
    pub pred: Vec<Vec<(usize, usize)>>,
}

pub fn links(g: &CircuitGraph) -> Links {
    let n = g.nodes.len();
    let mut succ = vec![Vec::new(); n];
    let mut pred = vec![Vec::new(); n];
    for (i, e) in g.edges.iter().enumerate() {
        if matches!(e.kind, EdgeKind::Cell | EdgeKind::Net) {
            succ[e.src].push((i, e.dst));
            pred[e.dst].push((i, e.src));
        }
    }
    Links { succ, pred }
}

/// Extremes of path sums over every source-to-sink path.
pub struct PathExtremes {
    /// Per node: (max, min) over all PI-to-node path sums, per channel.
    pub at: Vec<Option<(Quad, Quad)>>,
    /// Per node: (min, max) over `rat(end) - path sum` for every
    /// node-to-endpoint path.
    pub rat: Vec<Option<(Quad, Quad)>>,
    pub paths: usize,
}

/// Enumerates every maximal path from a source (no timing fan-in) to a sink
/// (no timing fan-out) explicitly. Each PI-to-node path is a prefix of such
/// a path and each node-to-endpoint path is a suffix, so prefix and suffix
/// sums cover both directions.
pub fn enumerate_paths(
    g: &CircuitGraph,
    source_at: &dyn Fn(usize) -> Quad,
    delay: &dyn Fn(usize) -> Quad,
    sink_rat: &dyn Fn(usize) -> Quad,
    limit: usize,
) -> Option<PathExtremes> {
    let l = links(g);
    let n = g.nodes.len();
    let mut out = PathExtremes {
        at: vec![None; n],
        rat: vec![None; n],
        paths: 0,
    };
    let sources: Vec<usize> = (0..n).filter(|&v| l.pred[v].is_empty()).collect();
    // Explicit DFS stack of (node, next successor index); `edges` holds the
    // edge ids of the current path.
    for s in sources {
        let mut nodes = vec![s];
        let mut edges: Vec<usize> = Vec::new();
        let mut next = vec![0usize];
        while let Some(&v) = nodes.last() {
            let k = *next.last().unwrap();
            if l.succ[v].is_empty() && k == 0 {
                out.paths += 1;
                if out.paths > limit {
                    return None;
                }
                record_path(&mut out, &nodes, &edges, source_at, delay, sink_rat);
            }
            if k < l.succ[v].len() {
                *next.last_mut().unwrap() += 1;
                let (e, w) = l.succ[v][k];
                nodes.push(w);
                edges.push(e);
                next.push(0);
            } else {
                nodes.pop();
                next.pop();
                edges.pop();
            }
        }
    }
    Some(out)
}

fn record_path(
    out: &mut PathExtremes,
    nodes: &[usize],
    edges: &[usize],
    source_at: &dyn Fn(usize) -> Quad,
    delay: &dyn Fn(usize) -> Quad,
    sink_rat: &dyn Fn(usize) -> Quad,
) {
    let mut acc = source_at(nodes[0]);
    for (i, &v) in nodes.iter().enumerate() {
        if i > 0 {
            let d = delay(edges[i - 1]);
            for c in 0..4 {
                acc[c] += d[c];
            }
        }
        let slot = out.at[v].get_or_insert(([f64::NEG_INFINITY; 4], [f64::INFINITY; 4]));
        for c in 0..4 {
            slot.0[c] = slot.0[c].max(acc[c]);
            slot.1[c] = slot.1[c].min(acc[c]);
        }
    }
    let mut req = sink_rat(*nodes.last().unwrap());
    for i in (0..nodes.len()).rev() {
        if i + 1 < nodes.len() {
            let d = delay(edges[i]);
            for c in 0..4 {
                req[c] -= d[c];
            }
        }
        let slot = out.rat[nodes[i]].get_or_insert(([f64::INFINITY; 4], [f64::NEG_INFINITY; 4]));
        for c in 0..4 {
            slot.0[c] = slot.0[c].min(req[c]);
            slot.1[c] = slot.1[c].max(req[c]);
        }
    }
}

/// Largest deviation of the labelled AT and RAT from path enumeration, or
/// `None` when the circuit has more paths than `limit`. Edge delays are
/// taken from the labels; endpoint RATs and source ATs too.
pub fn sta_path_error(g: &CircuitGraph, lab: &TimingAnnotation, limit: usize) -> Option<f64> {
    let ex = enumerate_paths(
        g,
        &|v| lab.at[v],
        &|e| lab.edge_delay[e].expect("timing edge has a delay"),
        &|v| lab.rat[v],
        limit,
    )?;
    let mut worst = 0.0f64;
    for v in 0..g.nodes.len() {
        let (amax, amin) = ex.at[v].expect("every node lies on a path");
        let (rmin, rmax) = ex.rat[v].expect("every node lies on a path");
        for c in 0..4 {
            let (want_at, want_rat) = if is_late(c) { (amax[c], rmin[c]) } else { (amin[c], rmax[c]) };
            worst = worst.max((lab.at[v][c] - want_at).abs());
            worst = worst.max((lab.rat[v][c] - want_rat).abs());
        }
    }
    Some(worst)
}

/// True when every slack entry equals the signed AT/RAT difference bit for
/// bit.
pub fn slack_is_exact(lab: &TimingAnnotation) -> bool {
    lab.at.iter().zip(&lab.rat).zip(&lab.slack).all(|((a, r), s)| {
        (0..4).all(|c| {
            let want = if is_late(c) { r[c] - a[c] } else { a[c] - r[c] };
            s[c] == want
        })
    })
}

/// Longest edge count from any source, by memoised recursion over
/// predecessors.
pub fn longest_path_levels(g: &CircuitGraph) -> Vec<usize> {
    let l = links(g);
    let n = g.nodes.len();
    let mut memo: Vec<Option<usize>> = vec![None; n];
    fn depth(v: usize, l: &Links, memo: &mut Vec<Option<usize>>) -> usize {
        if let Some(d) = memo[v] {
            return d;
        }
        let d = l.pred[v].iter().map(|&(_, u)| depth(u, l, memo) + 1).max().unwrap_or(0);
        memo[v] = Some(d);
        d
    }
    (0..n).map(|v| depth(v, &l, &mut memo)).collect()
}

/// Nodes exactly `p` timing hops upstream of `v` for p = 1..=k, by breadth-
/// first search over `pred`.
pub fn hop_sets(pred: &[Vec<(usize, usize)>], v: usize, k: usize) -> Vec<BTreeSet<usize>> {
    let mut out = Vec::with_capacity(k);
    let mut frontier = BTreeSet::from([v]);
    for _ in 0..k {
        let next: BTreeSet<usize> = frontier.iter().flat_map(|&u| pred[u].iter().map(|&(_, w)| w)).collect();
        out.push(next.clone());
        frontier = next;
    }
    out
}

/// Counted violations of the partition invariants for one parent graph.
#[derive(Debug, Default, PartialEq)]
pub struct PartitionViolations {
    pub cover: usize,
    pub closure: usize,
    pub order: usize,
    pub padding: usize,
}

impl PartitionViolations {
    pub fn total(&self) -> usize {
        self.cover + self.closure + self.order + self.padding
    }
}

pub fn partition_violations(g: &CircuitGraph, levels: &[usize], parts: &[SubGraph], k: usize) -> PartitionViolations {
    let mut v = PartitionViolations::default();
    let n = g.nodes.len();
    let mut owner = vec![0usize; n];
    for p in parts {
        for (local, &parent) in p.local_to_parent.iter().enumerate() {
            if p.core_mask[local] {
                owner[parent] += 1;
            }
        }
        if p.pad_levels_before.len() > k || p.pad_levels_after.len() > k {
            v.padding += 1;
        }
    }
    v.cover = owner.iter().filter(|&&c| c != 1).count();

    let parent_links = links(g);
    for p in parts {
        let local_links = links(&p.local_graph);
        let to_parent = &p.local_to_parent;
        for (local, &parent) in to_parent.iter().enumerate() {
            if !p.core_mask[local] {
                continue;
            }
            let want = hop_sets(&parent_links.pred, parent, k);
            let got = hop_sets(&local_links.pred, local, k);
            for (a, b) in want.iter().zip(&got) {
                let mapped: BTreeSet<usize> = b.iter().map(|&u| to_parent[u]).collect();
                if *a != mapped {
                    v.closure += 1;
                }
            }
        }
        // Re-levelize the level window and compare with the parent's levels.
        let (window, keep) = p.window_graph();
        let local_levels = longest_path_levels(&window);
        let base = p.pad_levels_before.start.min(p.core_levels.start);
        for (w, &local) in keep.iter().enumerate() {
            let parent_level = levels[to_parent[local]];
            if local_levels[w] + base != parent_level {
                v.order += 1;
            }
        }
    }
    v
}

/// Central differences for the scalar built by `f`, against the tape
/// gradient, over every element of every input and of every parameter.
/// Returns the largest relative error.
pub fn fd_max_error(
    params: &ModelParams,
    inputs: &[Mat],
    f: &dyn Fn(&mut Tape, &mut Binder, &[Var]) -> Var,
) -> f64 {
    let h = 1e-5;
    let mut t = Tape::new();
    let mut b = Binder::new(params, |_| true);
    let vars: Vec<Var> = inputs.iter().map(|m| t.leaf(m.clone(), true)).collect();
    let out = f(&mut t, &mut b, &vars);
    let grads = t.backward(out).expect("backward");
    let pgrads = b.gradients(&t, &grads);
    drop(b);
    let eval = |p: &ModelParams, xs: &[Mat]| {
        let mut t = Tape::new();
        let mut b = Binder::new(p, |_| false);
        let vs: Vec<Var> = xs.iter().map(|m| t.leaf(m.clone(), false)).collect();
        let o = f(&mut t, &mut b, &vs);
        t.value(o).data[0]
    };
    let rel = |num: f64, ana: f64| (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let ana = grads.get(vars[i]).cloned().unwrap_or_else(|| Mat::zeros(x.rows, x.cols));
        for k in 0..x.data.len() {
            let mut xs = inputs.to_vec();
            xs[i].data[k] += h;
            let up = eval(params, &xs);
            xs[i].data[k] -= 2.0 * h;
            let down = eval(params, &xs);
            worst = worst.max(rel((up - down) / (2.0 * h), ana.data[k]));
        }
    }
    for (name, tensor) in &params.tensors {
        let zeros = vec![0.0; tensor.data.len()];
        let ana = pgrads.get(name).unwrap_or(&zeros);
        for k in 0..tensor.data.len() {
            let mut p = params.clone();
            p.get_mut(name).unwrap().data[k] += h;
            let up = eval(&p, inputs);
            p.get_mut(name).unwrap().data[k] -= 2.0 * h;
            let down = eval(&p, inputs);
            worst = worst.max(rel((up - down) / (2.0 * h), ana[k]));
        }
    }
    worst
}

/// Central differences at `picks` randomly chosen parameter entries.
pub fn fd_sampled_error(
    params: &ModelParams,
    picks: usize,
    seed: u64,
    f: &dyn Fn(&mut Tape, &mut Binder) -> Var,
) -> f64 {
    let h = 1e-5;
    let mut t = Tape::new();
    let mut b = Binder::new(params, |_| true);
    let out = f(&mut t, &mut b);
    let grads = t.backward(out).expect("backward");
    let pgrads: BTreeMap<String, Vec<f64>> = b.gradients(&t, &grads);
    drop(b);
    let eval = |p: &ModelParams| {
        let mut t = Tape::new();
        let mut b = Binder::new(p, |_| false);
        let o = f(&mut t, &mut b);
        t.value(o).data[0]
    };
    let names: Vec<&String> = params.tensors.keys().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..picks {
        let name = names[rng.gen_range(0..names.len())];
        let k = rng.gen_range(0..params.tensors[name].data.len());
        let ana = pgrads.get(name).map(|g| g[k]).unwrap_or(0.0);
        let mut p = params.clone();
        p.get_mut(name).unwrap().data[k] += h;
        let up = eval(&p);
        p.get_mut(name).unwrap().data[k] -= 2.0 * h;
        let down = eval(&p);
        let num = (up - down) / (2.0 * h);
        worst = worst.max((num - ana).abs() / num.abs().max(ana.abs()).max(1e-6));
    }
    worst
}

pub fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Random weighted sum, so every output entry carries its own gradient.
pub fn weighted_sum(t: &mut Tape, v: Var, seed: u64) -> Var {
    let (r, c) = t.value(v).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = t.constant(rand_mat(&mut rng, r, c));
    let p = t.mul(v, w).unwrap();
    t.sum_all(p)
}

/// Smoothed series: trailing mean over up to `window` entries.
pub fn smoothed(v: &[f64], window: usize) -> Vec<f64> {
    (0..v.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            v[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}
