// SPDX-License-Identifier: Apache-2.0

//! Layers built from tape operations. Parameters are read through a
//! [`Binder`] under a name prefix.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::params::Binder;
use crate::nn::tensor::{Mat, Reduce, Segments, Tape, Var};

/// Directed edges with per-edge features and a grouping by destination.
#[derive(Clone, Debug)]
pub struct EdgeSet {
    pub src: Vec<u32>,
    pub dst: Vec<u32>,
    pub feat: Mat,
    pub by_dst: Arc<Segments>,
}

impl EdgeSet {
    pub fn new(n_nodes: usize, src: Vec<u32>, dst: Vec<u32>, feat: Mat) -> Self {
        let by_dst = Arc::new(Segments::group_by(n_nodes, dst.iter().map(|&d| d as usize)));
        EdgeSet { src, dst, feat, by_dst }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// `x * w + b` from `{prefix}.w` and, when declared, `{prefix}.b`.
pub fn linear(t: &mut Tape, p: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(t, &format!("{prefix}.w"))?;
    let bname = format!("{prefix}.b");
    let b = if p.has(&bname) { Some(p.get(t, &bname)?) } else { None };
    t.linear(x, w, b)
}

/// Affine layers `{prefix}.l0 ..` with leaky ReLU between them.
pub fn mlp(t: &mut Tape, p: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
    let depth = p.hyper().mlp_depth;
    let slope = p.hyper().leaky_slope;
    let mut h = x;
    for l in 0..depth {
        h = linear(t, p, &format!("{prefix}.l{l}"), h)?;
        if l + 1 < depth {
            h = t.leaky_relu(h, slope);
        }
    }
    Ok(h)
}

/// `m_ji = MLP(f_j || f_i || e_ji) + f_j` for every edge.
fn messages(t: &mut Tape, p: &mut Binder, prefix: &str, f: Var, edges: &EdgeSet, e: Var) -> Result<Var> {
    let fj = t.gather(f, edges.src.clone())?;
    let fi = t.gather(f, edges.dst.clone())?;
    let cat = t.concat_cols(&[fj, fi, e])?;
    let m = mlp(t, p, prefix, cat)?;
    t.add(m, fj)
}

/// Auto-encoder layer: messages reduced by mean, max, min and sum, then
/// `f_i' = MLP(f_i || a || b || c || d) + f_i`.
pub fn ae_layer(t: &mut Tape, p: &mut Binder, prefix: &str, f: Var, edges: &EdgeSet, e: Var) -> Result<Var> {
    let m = messages(t, p, &format!("{prefix}.msg"), f, edges, e)?;
    let mut parts = vec![f];
    for kind in [Reduce::Mean, Reduce::Max, Reduce::Min, Reduce::Sum] {
        parts.push(t.segment_reduce(m, edges.by_dst.clone(), kind)?);
    }
    let cat = t.concat_cols(&parts)?;
    let u = mlp(t, p, &format!("{prefix}.upd"), cat)?;
    t.add(u, f)
}

/// Residual local learning layer over net and net_inv edges:
/// `f' = f + MLP_net(f || mean || max) + MLP_inv(f || mean || max)`, each
/// relation with its own message and update parameters.
pub fn rll_gcn(
    t: &mut Tape,
    p: &mut Binder,
    prefix: &str,
    f: Var,
    relations: &[(&str, &EdgeSet, Var)],
) -> Result<Var> {
    let mut out = f;
    for &(name, edges, e) in relations {
        let m = messages(t, p, &format!("{prefix}.{name}.msg"), f, edges, e)?;
        let a = t.segment_reduce(m, edges.by_dst.clone(), Reduce::Mean)?;
        let b = t.segment_reduce(m, edges.by_dst.clone(), Reduce::Max)?;
        let cat = t.concat_cols(&[f, a, b])?;
        let u = mlp(t, p, &format!("{prefix}.{name}.upd"), cat)?;
        out = t.add(out, u)?;
    }
    Ok(out)
}

/// Joint key rows `K1[i] * K2[j]` (elementwise) for every pair `(i, j)`,
/// row index `i * cols + j`.
pub fn joint_key(t: &mut Tape, k1: Var, k2: Var) -> Result<Var> {
    let r = t.value(k1).rows as u32;
    let c = t.value(k2).rows as u32;
    let ri: Vec<u32> = (0..r).flat_map(|i| std::iter::repeat(i).take(c as usize)).collect();
    let ci: Vec<u32> = (0..r).flat_map(|_| 0..c).collect();
    joint_key_indexed(t, k1, k2, ri, ci)
}

/// Joint key rows `K1[ri[k]] * K2[ci[k]]`.
pub fn joint_key_indexed(t: &mut Tape, k1: Var, k2: Var, ri: Vec<u32>, ci: Vec<u32>) -> Result<Var> {
    if ri.len() != ci.len() {
        return Err(Error::shape("joint_key", "index lists differ in length"));
    }
    let a = t.gather(k1, ri)?;
    let b = t.gather(k2, ci)?;
    t.mul(a, b)
}

/// Output of a multi-head joint attention block.
pub struct MjaOut {
    /// Raw attention output before the output projection; its tape record
    /// holds the softmax weights.
    pub attention: Var,
    pub out: Var,
}

/// Projected keys and values for [`mja`]: `K W_K` and `V W_V`.
pub fn mja_bank(t: &mut Tape, p: &mut Binder, prefix: &str, keys: Var, values: Var) -> Result<(Var, Var)> {
    let kp = linear(t, p, &format!("{prefix}.wk"), keys)?;
    let vp = linear(t, p, &format!("{prefix}.wv"), values)?;
    Ok((kp, vp))
}

/// `softmax(Q W_Q (K W_K)^T / sqrt(d)) V W_V`, per head over each query's
/// key range, then the output projection `W_O`.
pub fn mja(
    t: &mut Tape,
    p: &mut Binder,
    prefix: &str,
    q: Var,
    bank: (Var, Var),
    ranges: Vec<(u32, u32)>,
) -> Result<MjaOut> {
    let heads = p.hyper().heads;
    let qp = linear(t, p, &format!("{prefix}.wq"), q)?;
    let attention = t.grouped_attention(qp, bank.0, bank.1, ranges, heads)?;
    let out = linear(t, p, &format!("{prefix}.wo"), attention)?;
    Ok(MjaOut { attention, out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{Hyper, ModelParams};
    use crate::nn::tensor::tests::{grad_check, rand_mat, weighted};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params_with(f: impl Fn(&mut ModelParams)) -> ModelParams {
        let mut p = ModelParams::new(Hyper::default());
        f(&mut p);
        p.init_uniform(42, |_| true);
        p
    }

    fn zero_all(p: &mut ModelParams) {
        for t in p.tensors.values_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn leaky(x: f64) -> f64 {
        if x > 0.0 {
            x
        } else {
            0.2 * x
        }
    }

    /// Scalar reference MLP on one row.
    fn naive_mlp(p: &ModelParams, prefix: &str, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let depth = p.hyper.mlp_depth;
        for l in 0..depth {
            let w = p.get(&format!("{prefix}.l{l}.w")).unwrap();
            let b = p.get(&format!("{prefix}.l{l}.b")).unwrap();
            let (i, o) = (w.shape[0], w.shape[1]);
            let mut out = b.data.clone();
            for (r, hv) in h.iter().enumerate().take(i) {
                for c in 0..o {
                    out[c] += hv * w.data[r * o + c];
                }
            }
            if l + 1 < depth {
                out.iter_mut().for_each(|v| *v = leaky(*v));
            }
            h = out;
        }
        h
    }

    fn random_edges(rng: &mut ChaCha8Rng, n: usize, m: usize) -> EdgeSet {
        use rand::Rng;
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for _ in 0..m {
            let a = rng.gen_range(0..n as u32);
            let mut b = rng.gen_range(0..n as u32);
            if a == b {
                b = (b + 1) % n as u32;
            }
            src.push(a);
            dst.push(b);
        }
        EdgeSet::new(n, src, dst, rand_mat(rng, m, 3))
    }

    #[test]
    fn mlp_zero_and_identity() {
        let mut p = params_with(|p| p.declare_mlp("m", 3, 5, 2, 2));
        zero_all(&mut p);
        let mut t = Tape::new();
        let x = t.constant(Mat::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        let mut b = Binder::new(&p, |_| true);
        let y = mlp(&mut t, &mut b, "m", x).unwrap();
        assert_eq!(t.value(y).data, vec![0.0, 0.0]);

        let mut p = ModelParams::new(Hyper {
            mlp_depth: 1,
            ..Hyper::default()
        });
        p.declare_mlp("id", 3, 3, 3, 1);
        p.get_mut("id.l0.w").unwrap().data = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let mut b = Binder::new(&p, |_| true);
        let y = mlp(&mut t, &mut b, "id", x).unwrap();
        assert_eq!(t.value(y).data, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn mlp_matches_scalar_reference_and_gradients() {
        let p = params_with(|p| p.declare_mlp("m", 4, 6, 3, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_mat(&mut rng, 5, 4);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let mut b = Binder::new(&p, |_| true);
        let y = mlp(&mut t, &mut b, "m", xv).unwrap();
        for r in 0..5 {
            let want = naive_mlp(&p, "m", x.row(r));
            for (a, w) in t.value(y).row(r).iter().zip(&want) {
                assert!((a - w).abs() < 1e-12);
            }
        }
        for cfg in 0..10u64 {
            let p = params_with(|p| p.declare_mlp("m", 3, 4, 2, 2));
            let leaves = [
                rand_mat(&mut rng, 4, 3),
                p.get("m.l0.w").unwrap().as_mat(),
                p.get("m.l0.b").unwrap().as_mat(),
                p.get("m.l1.w").unwrap().as_mat(),
                p.get("m.l1.b").unwrap().as_mat(),
            ];
            grad_check(
                &leaves,
                &move |t, v| {
                    let h = t.linear(v[0], v[1], Some(v[2])).unwrap();
                    let h = t.leaky_relu(h, 0.2);
                    let y = t.linear(h, v[3], Some(v[4])).unwrap();
                    weighted(t, y, cfg)
                },
                1e-4,
            );
        }
    }

    fn ae_params() -> ModelParams {
        params_with(|p| {
            p.declare_mlp("ae.msg", 4 + 4 + 3, 4, 4, 2);
            p.declare_mlp("ae.upd", 4 * 5, 4, 4, 2);
        })
    }

    #[test]
    fn ae_layer_zero_is_identity_and_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let edges = random_edges(&mut rng, 10, 18);
        let f = rand_mat(&mut rng, 10, 4);

        let mut p = ae_params();
        zero_all(&mut p);
        let mut t = Tape::new();
        let fv = t.constant(f.clone());
        let ev = t.constant(edges.feat.clone());
        let mut b = Binder::new(&p, |_| true);
        let y = ae_layer(&mut t, &mut b, "ae", fv, &edges, ev).unwrap();
        assert_eq!(t.value(y), &f);

        let p = ae_params();
        let mut b = Binder::new(&p, |_| true);
        let y = ae_layer(&mut t, &mut b, "ae", fv, &edges, ev).unwrap();
        for i in 0..10 {
            let msgs: Vec<Vec<f64>> = (0..edges.len())
                .filter(|&k| edges.dst[k] as usize == i)
                .map(|k| {
                    let j = edges.src[k] as usize;
                    let cat = [f.row(j), f.row(i), edges.feat.row(k)].concat();
                    naive_mlp(&p, "ae.msg", &cat).iter().zip(f.row(j)).map(|(a, b)| a + b).collect()
                })
                .collect();
            let mut agg = vec![vec![0.0; 4]; 4];
            if !msgs.is_empty() {
                for c in 0..4 {
                    let col: Vec<f64> = msgs.iter().map(|m| m[c]).collect();
                    agg[0][c] = col.iter().sum::<f64>() / col.len() as f64;
                    agg[1][c] = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    agg[2][c] = col.iter().cloned().fold(f64::INFINITY, f64::min);
                    agg[3][c] = col.iter().sum();
                }
            }
            let cat = [f.row(i).to_vec(), agg.concat()].concat();
            let want: Vec<f64> = naive_mlp(&p, "ae.upd", &cat).iter().zip(f.row(i)).map(|(a, b)| a + b).collect();
            for (a, w) in t.value(y).row(i).iter().zip(&want) {
                assert!((a - w).abs() < 1e-12, "node {i}");
            }
        }
    }

    #[test]
    fn ae_layer_single_predecessor_degenerates() {
        let p = ae_params();
        let edges = EdgeSet::new(2, vec![0], vec![1], Mat::from_rows(&[vec![0.5, -0.5, 1.0]]).unwrap());
        let mut t = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fv = t.constant(rand_mat(&mut rng, 2, 4));
        let ev = t.constant(edges.feat.clone());
        let mut b = Binder::new(&p, |_| true);
        let m = messages(&mut t, &mut b, "ae.msg", fv, &edges, ev).unwrap();
        let red: Vec<Vec<f64>> = [Reduce::Mean, Reduce::Max, Reduce::Min, Reduce::Sum]
            .iter()
            .map(|&k| {
                let r = t.segment_reduce(m, edges.by_dst.clone(), k).unwrap();
                t.value(r).row(1).to_vec()
            })
            .collect();
        for r in &red {
            assert_eq!(r.as_slice(), t.value(m).row(0));
        }
    }

    fn rll_params() -> ModelParams {
        params_with(|p| {
            for k in ["net", "inv"] {
                p.declare_mlp(&format!("g.{k}.msg"), 4 + 4 + 3, 4, 4, 2);
                p.declare_mlp(&format!("g.{k}.upd"), 12, 4, 4, 2);
            }
        })
    }

    #[test]
    fn rll_gcn_identity_single_edge_and_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = random_edges(&mut rng, 10, 12);
        let inv = EdgeSet::new(10, net.dst.clone(), net.src.clone(), rand_mat(&mut rng, 12, 3));
        let f = rand_mat(&mut rng, 10, 4);

        let mut p = rll_params();
        zero_all(&mut p);
        let mut t = Tape::new();
        let fv = t.constant(f.clone());
        let ne = t.constant(net.feat.clone());
        let ie = t.constant(inv.feat.clone());
        let mut b = Binder::new(&p, |_| true);
        let y = rll_gcn(&mut t, &mut b, "g", fv, &[("net", &net, ne), ("inv", &inv, ie)]).unwrap();
        assert_eq!(t.value(y), &f);

        let p = rll_params();
        let mut b = Binder::new(&p, |_| true);
        let y = rll_gcn(&mut t, &mut b, "g", fv, &[("net", &net, ne), ("inv", &inv, ie)]).unwrap();
        for i in 0..10 {
            let mut want = f.row(i).to_vec();
            for (k, es) in [("net", &net), ("inv", &inv)] {
                let msgs: Vec<Vec<f64>> = (0..es.len())
                    .filter(|&e| es.dst[e] as usize == i)
                    .map(|e| {
                        let j = es.src[e] as usize;
                        let cat = [f.row(j), f.row(i), es.feat.row(e)].concat();
                        naive_mlp(&p, &format!("g.{k}.msg"), &cat).iter().zip(f.row(j)).map(|(a, b)| a + b).collect()
                    })
                    .collect();
                let (mut mean, mut max) = (vec![0.0; 4], vec![0.0; 4]);
                if !msgs.is_empty() {
                    for c in 0..4 {
                        mean[c] = msgs.iter().map(|m| m[c]).sum::<f64>() / msgs.len() as f64;
                        max[c] = msgs.iter().map(|m| m[c]).fold(f64::NEG_INFINITY, f64::max);
                    }
                }
                let cat = [f.row(i).to_vec(), mean, max].concat();
                for (w, u) in want.iter_mut().zip(naive_mlp(&p, &format!("g.{k}.upd"), &cat)) {
                    *w += u;
                }
            }
            for (a, w) in t.value(y).row(i).iter().zip(&want) {
                assert!((a - w).abs() < 1e-12, "node {i}");
            }
        }

        // Single edge: message and update unrolled by hand.
        let one = EdgeSet::new(2, vec![0], vec![1], Mat::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        let none = EdgeSet::new(2, vec![], vec![], Mat::zeros(0, 3));
        let f2 = rand_mat(&mut rng, 2, 4);
        let mut t = Tape::new();
        let fv = t.constant(f2.clone());
        let e1 = t.constant(one.feat.clone());
        let e0 = t.constant(Mat::zeros(0, 3));
        let mut b = Binder::new(&p, |_| true);
        let y = rll_gcn(&mut t, &mut b, "g", fv, &[("net", &one, e1), ("inv", &none, e0)]).unwrap();
        let cat = [f2.row(0), f2.row(1), &[1.0, 2.0, 3.0]].concat();
        let m: Vec<f64> = naive_mlp(&p, "g.net.msg", &cat).iter().zip(f2.row(0)).map(|(a, b)| a + b).collect();
        let upd = naive_mlp(&p, "g.net.upd", &[f2.row(1).to_vec(), m.clone(), m].concat());
        let upd_inv = naive_mlp(&p, "g.inv.upd", &[f2.row(1).to_vec(), vec![0.0; 8]].concat());
        for c in 0..4 {
            let want = f2.at(1, c) + upd[c] + upd_inv[c];
            assert!((t.value(y).at(1, c) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_gradients_on_random_configurations() {
        for cfg in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + cfg);
            let edges = random_edges(&mut rng, 5, 7);
            let inv = EdgeSet::new(5, edges.dst.clone(), edges.src.clone(), rand_mat(&mut rng, 7, 3));
            let ae = ae_params();
            let rll = rll_params();
            let x = rand_mat(&mut rng, 5, 4);
            let (e1, e2) = (edges.clone(), inv.clone());
            // Gradient with respect to the input and to every parameter.
            let names: Vec<String> = ae.tensors.keys().cloned().collect();
            let mut leaves = vec![x.clone()];
            leaves.extend(names.iter().map(|n| ae.get(n).unwrap().as_mat()));
            grad_check(
                &leaves,
                &move |t, v| {
                    let ev = t.constant(e1.feat.clone());
                    let y = ae_layer_with(t, &names, &v[1..], v[0], &e1, ev);
                    weighted(t, y, cfg)
                },
                1e-4,
            );
            let names: Vec<String> = rll.tensors.keys().cloned().collect();
            let mut leaves = vec![x];
            leaves.extend(names.iter().map(|n| rll.get(n).unwrap().as_mat()));
            grad_check(
                &leaves,
                &move |t, v| {
                    let ev = t.constant(edges.feat.clone());
                    let iv = t.constant(e2.feat.clone());
                    let y = rll_with(t, &names, &v[1..], v[0], &edges, ev, &e2, iv);
                    weighted(t, y, cfg + 50)
                },
                1e-4,
            );
        }
    }

    /// MLP with parameters taken from tape leaves, so the finite-difference
    /// harness can perturb them.
    struct LeafBinder;

    impl LeafBinder {
        fn bind(t: &mut Tape, names: &[String], leaves: &[Var], prefix: &str, x: Var, depth: usize) -> Var {
            let mut h = x;
            for l in 0..depth {
                let w = leaves[names.iter().position(|n| n == &format!("{prefix}.l{l}.w")).unwrap()];
                let b = leaves[names.iter().position(|n| n == &format!("{prefix}.l{l}.b")).unwrap()];
                h = t.linear(h, w, Some(b)).unwrap();
                if l + 1 < depth {
                    h = t.leaky_relu(h, 0.2);
                }
            }
            h
        }
    }

    fn ae_layer_with(t: &mut Tape, names: &[String], leaves: &[Var], f: Var, edges: &EdgeSet, e: Var) -> Var {
        let fj = t.gather(f, edges.src.clone()).unwrap();
        let fi = t.gather(f, edges.dst.clone()).unwrap();
        let cat = t.concat_cols(&[fj, fi, e]).unwrap();
        let m = LeafBinder::bind(t, names, leaves, "ae.msg", cat, 2);
        let m = t.add(m, fj).unwrap();
        let mut parts = vec![f];
        for kind in [Reduce::Mean, Reduce::Max, Reduce::Min, Reduce::Sum] {
            parts.push(t.segment_reduce(m, edges.by_dst.clone(), kind).unwrap());
        }
        let cat = t.concat_cols(&parts).unwrap();
        let u = LeafBinder::bind(t, names, leaves, "ae.upd", cat, 2);
        t.add(u, f).unwrap()
    }

    #[allow(clippy::too_many_arguments)]
    fn rll_with(t: &mut Tape, names: &[String], leaves: &[Var], f: Var, net: &EdgeSet, ne: Var, inv: &EdgeSet, ie: Var) -> Var {
        let mut out = f;
        for (k, es, e) in [("net", net, ne), ("inv", inv, ie)] {
            let fj = t.gather(f, es.src.clone()).unwrap();
            let fi = t.gather(f, es.dst.clone()).unwrap();
            let cat = t.concat_cols(&[fj, fi, e]).unwrap();
            let m = LeafBinder::bind(t, names, leaves, &format!("g.{k}.msg"), cat, 2);
            let m = t.add(m, fj).unwrap();
            let a = t.segment_reduce(m, es.by_dst.clone(), Reduce::Mean).unwrap();
            let b = t.segment_reduce(m, es.by_dst.clone(), Reduce::Max).unwrap();
            let cat = t.concat_cols(&[f, a, b]).unwrap();
            let u = LeafBinder::bind(t, names, leaves, &format!("g.{k}.upd"), cat, 2);
            out = t.add(out, u).unwrap();
        }
        out
    }

    #[test]
    fn joint_key_examples() {
        let mut t = Tape::new();
        let k1 = t.constant(Mat::from_rows(&[vec![2.0], vec![3.0]]).unwrap());
        let k2 = t.constant(Mat::from_rows(&[vec![5.0], vec![7.0]]).unwrap());
        let k = joint_key(&mut t, k1, k2).unwrap();
        assert_eq!(t.value(k).data, vec![10.0, 14.0, 15.0, 21.0]);

        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.gen_range(1..=8);
            let d = rng.gen_range(1..=4);
            let a = rand_mat(&mut rng, n, d);
            let b = rand_mat(&mut rng, n, d);
            let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
            let k = joint_key(&mut t, av, bv).unwrap();
            let km = t.value(k);
            for i in 0..n {
                for j in 0..n {
                    for c in 0..d {
                        assert_eq!(km.at(i * n + j, c), a.at(i, c) * b.at(j, c));
                    }
                }
            }
        }
    }

    fn mja_params() -> ModelParams {
        params_with(|p| {
            for w in ["wq", "wk", "wv", "wo"] {
                p.declare_linear(&format!("a.{w}"), 64, 64, false);
            }
        })
    }

    #[test]
    fn mja_singleton_and_stochastic_rows() {
        let p = mja_params();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut t = Tape::new();
        let q = t.constant(rand_mat(&mut rng, 3, 64));
        let k1 = t.constant(rand_mat(&mut rng, 3, 64));
        let k2 = t.constant(rand_mat(&mut rng, 3, 64));
        let v = t.constant(rand_mat(&mut rng, 9, 64));
        let k = joint_key(&mut t, k1, k2).unwrap();
        let mut b = Binder::new(&p, |_| true);
        let bank = mja_bank(&mut t, &mut b, "a", k, v).unwrap();
        let out = mja(&mut t, &mut b, "a", q, bank, vec![(0, 9), (0, 9), (8, 1)]).unwrap();
        for row in t.attention_weights(out.attention).unwrap() {
            for head in row {
                assert!((head.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        // One key: the attention output is that row of V W_V.
        assert_eq!(t.value(out.attention).row(2), t.value(bank.1).row(8));
    }

    #[test]
    fn mja_gradients() {
        for cfg in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + cfg);
            let (heads, hk) = (2usize, 3usize);
            let d = heads * hk;
            let leaves = [
                rand_mat(&mut rng, 3, d),
                rand_mat(&mut rng, 2, d),
                rand_mat(&mut rng, 3, d),
                rand_mat(&mut rng, 6, d),
                rand_mat(&mut rng, d, d),
                rand_mat(&mut rng, d, d),
                rand_mat(&mut rng, d, d),
                rand_mat(&mut rng, d, d),
            ];
            grad_check(
                &leaves,
                &move |t, v| {
                    let k = joint_key(t, v[1], v[2]).unwrap();
                    let kp = t.linear(k, v[5], None).unwrap();
                    let vp = t.linear(v[3], v[6], None).unwrap();
                    let qp = t.linear(v[0], v[4], None).unwrap();
                    let a = t.grouped_attention(qp, kp, vp, vec![(0, 6), (1, 3), (5, 1)], heads).unwrap();
                    let o = t.linear(a, v[7], None).unwrap();
                    weighted(t, o, cfg)
                },
                1e-4,
            );
        }
    }
}
