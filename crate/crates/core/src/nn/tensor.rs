// SPDX-License-Identifier: Apache-2.0

//! Dense row-major matrices and a reverse-mode tape over them.
//!
//! Every value produced during a forward pass is recorded on a [`Tape`] with
//! the operation that made it. [`Tape::backward`] walks the record in reverse
//! and returns the gradient of a scalar with respect to every recorded value.
//! Values whose inputs never require gradients are skipped.

use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Ok(Mat {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn add_assign(&mut self, other: &Mat) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = beta * c + op(a) * op(b)` where `op` optionally transposes.
/// `a` is `m x k` after `op`, `b` is `k x n` after `op`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &Mat, ta: bool, b: &Mat, tb: bool, c: &mut [f64], beta: f64) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides describe in-bounds views of `a`, `b` and `c`, whose
    // lengths are checked by the callers' shape logic.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let mut out = Mat::zeros(a.rows, b.cols);
    gemm(a.rows, a.cols, b.cols, a, false, b, false, &mut out.data, 0.0);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Mean,
    Max,
    Min,
    Sum,
}

/// Row groups for segment reductions: segment `s` covers input rows
/// `rows[offsets[s]..offsets[s + 1]]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    pub offsets: Vec<usize>,
    pub rows: Vec<u32>,
}

impl Segments {
    /// Groups `0..n_items` by `key` into `n_segments` segments, keeping item
    /// order inside each segment.
    pub fn group_by(n_segments: usize, keys: impl Iterator<Item = usize> + Clone) -> Self {
        let mut counts = vec![0usize; n_segments + 1];
        for k in keys.clone() {
            counts[k + 1] += 1;
        }
        for s in 0..n_segments {
            counts[s + 1] += counts[s];
        }
        let mut fill = counts.clone();
        let mut rows = vec![0u32; counts[n_segments]];
        for (i, k) in keys.enumerate() {
            rows[fill[k]] = i as u32;
            fill[k] += 1;
        }
        Segments {
            offsets: counts,
            rows,
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segment(&self, s: usize) -> &[u32] {
        &self.rows[self.offsets[s]..self.offsets[s + 1]]
    }
}

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Scale { a: Var, s: f64 },
    LeakyRelu { a: Var, slope: f64 },
    Exp { a: Var },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    SliceCols { a: Var, start: usize },
    Gather { a: Var, idx: Vec<u32> },
    GatherMulti { srcs: Vec<Var>, idx: Vec<(u32, u32)> },
    Segment { a: Var, seg: Arc<Segments>, kind: Reduce, arg: Vec<u32> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Mat, rstd: Vec<f64> },
    Attention(Box<AttentionRecord>),
    SumAll { a: Var },
    MaskedMse { pred: Var, target: Mat, mask: Vec<bool>, count: usize },
}

struct AttentionRecord {
    q: Var,
    k: Var,
    v: Var,
    ranges: Vec<(u32, u32)>,
    heads: usize,
    scale: f64,
    /// Softmax weights, per row then head then key.
    probs: Vec<f64>,
    prob_offset: Vec<usize>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Recorded forward computation.
pub struct Tape {
    vals: Vec<Mat>,
    ops: Vec<Op>,
    needs: Vec<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to recorded values.
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads[v.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            ops: Vec::new(),
            needs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.vals[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    fn push(&mut self, val: Mat, op: Op, needs: bool) -> Var {
        self.vals.push(val);
        self.ops.push(op);
        self.needs.push(needs);
        Var(self.vals.len() - 1)
    }

    /// A leaf value; gradients are tracked when `requires_grad` is set.
    pub fn leaf(&mut self, m: Mat, requires_grad: bool) -> Var {
        self.push(m, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.leaf(m, false)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.vals[v.0].shape()
    }

    fn any(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.needs[v.0])
    }

    /// `x * w + b` with `b` a single row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, i) = self.dims(x);
        let (wi, o) = self.dims(w);
        if i != wi {
            return Err(Error::shape("linear", format!("input {n}x{i} with weight {wi}x{o}")));
        }
        let mut out = Mat::zeros(n, o);
        let mut beta = 0.0;
        if let Some(b) = b {
            let bm = &self.vals[b.0];
            if bm.shape() != (1, o) {
                return Err(Error::shape("linear", format!("bias {:?} for width {o}", bm.shape())));
            }
            for r in 0..n {
                out.row_mut(r).copy_from_slice(&bm.data);
            }
            beta = 1.0;
        }
        gemm(n, i, o, &self.vals[x.0], false, &self.vals[w.0], false, &mut out.data, beta);
        let needs = self.any(&[x, w]) || b.is_some_and(|b| self.needs[b.0]);
        Ok(self.push(out, Op::Linear { x, w, b }, needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{n}x{k} times {k2}x{m}")));
        }
        let mut out = Mat::zeros(n, m);
        gemm(n, k, m, &self.vals[a.0], false, &self.vals[b.0], false, &mut out.data, 0.0);
        let needs = self.any(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b }, needs))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.dims(a), self.dims(b))));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Mat {
        let (x, y) = (&self.vals[a.0], &self.vals[b.0]);
        Mat {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
        }
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Mat {
        let x = &self.vals[a.0];
        Mat {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |p, q| p + q);
        let needs = self.any(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |p, q| p - q);
        let needs = self.any(&[a, b]);
        Ok(self.push(out, Op::Sub { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |p, q| p * q);
        let needs = self.any(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, needs))
    }

    /// Adds a single row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, c) = self.dims(a);
        if self.dims(row) != (1, c) {
            return Err(Error::shape("add_row", format!("row {:?} for {n}x{c}", self.dims(row))));
        }
        let mut out = self.vals[a.0].clone();
        let r = &self.vals[row.0].data;
        for i in 0..n {
            for (o, x) in out.row_mut(i).iter_mut().zip(r) {
                *o += x;
            }
        }
        let needs = self.any(&[a, row]);
        Ok(self.push(out, Op::AddRow { a, row }, needs))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.map(a, |p| p * s);
        let needs = self.needs[a.0];
        self.push(out, Op::Scale { a, s }, needs)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.map(a, |p| if p > 0.0 { p } else { slope * p });
        let needs = self.needs[a.0];
        self.push(out, Op::LeakyRelu { a, slope }, needs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::exp);
        let needs = self.needs[a.0];
        self.push(out, Op::Exp { a }, needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts.first().map(|&p| self.dims(p).0).unwrap_or(0);
        if parts.iter().any(|&p| self.dims(p).0 != n) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Mat::zeros(n, total);
        let mut off = 0;
        for &p in parts {
            let m = &self.vals[p.0];
            for r in 0..n {
                out.data[r * total + off..r * total + off + m.cols].copy_from_slice(m.row(r));
            }
            off += m.cols;
        }
        let needs = self.any(parts);
        Ok(self.push(out, Op::ConcatCols { parts: parts.to_vec() }, needs))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|&p| self.dims(p).1).unwrap_or(0);
        if parts.iter().any(|&p| self.dims(p).1 != c) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(&self.vals[p.0].data);
        }
        let rows = data.len() / c.max(1);
        let needs = self.any(parts);
        Ok(self.push(Mat { rows, cols: c, data }, Op::ConcatRows { parts: parts.to_vec() }, needs))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c) = self.dims(a);
        if start + len > c {
            return Err(Error::shape("slice_cols", format!("{start}+{len} of {c} columns")));
        }
        let mut out = Mat::zeros(n, len);
        let src = &self.vals[a.0];
        for r in 0..n {
            out.row_mut(r).copy_from_slice(&src.row(r)[start..start + len]);
        }
        let needs = self.needs[a.0];
        Ok(self.push(out, Op::SliceCols { a, start }, needs))
    }

    /// Row `r` of the output is row `idx[r]` of `a`.
    pub fn gather(&mut self, a: Var, idx: Vec<u32>) -> Result<Var> {
        let (n, c) = self.dims(a);
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= n) {
            return Err(Error::shape("gather", format!("row {bad} of {n}")));
        }
        let mut out = Mat::zeros(idx.len(), c);
        let src = &self.vals[a.0];
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(src.row(i as usize));
        }
        let needs = self.needs[a.0];
        Ok(self.push(out, Op::Gather { a, idx }, needs))
    }

    /// Row `r` of the output is row `idx[r].1` of `srcs[idx[r].0]`.
    pub fn gather_multi(&mut self, srcs: &[Var], idx: Vec<(u32, u32)>) -> Result<Var> {
        let c = srcs.first().map(|&p| self.dims(p).1).unwrap_or(0);
        if srcs.iter().any(|&p| self.dims(p).1 != c) {
            return Err(Error::shape("gather_multi", "column counts differ"));
        }
        let mut out = Mat::zeros(idx.len(), c);
        for (r, &(s, i)) in idx.iter().enumerate() {
            let src = srcs
                .get(s as usize)
                .map(|v| &self.vals[v.0])
                .filter(|m| (i as usize) < m.rows)
                .ok_or_else(|| Error::shape("gather_multi", format!("source {s} row {i}")))?;
            out.row_mut(r).copy_from_slice(src.row(i as usize));
        }
        let needs = self.any(srcs);
        Ok(self.push(out, Op::GatherMulti { srcs: srcs.to_vec(), idx }, needs))
    }

    /// Reduces rows of `a` per segment. Empty segments produce zeros.
    pub fn segment_reduce(&mut self, a: Var, seg: Arc<Segments>, kind: Reduce) -> Result<Var> {
        let (n, c) = self.dims(a);
        if let Some(&bad) = seg.rows.iter().find(|&&r| r as usize >= n) {
            return Err(Error::shape("segment_reduce", format!("row {bad} of {n}")));
        }
        let ns = seg.len();
        let mut out = Mat::zeros(ns, c);
        let mut arg = Vec::new();
        let src = &self.vals[a.0];
        match kind {
            Reduce::Sum | Reduce::Mean => {
                for s in 0..ns {
                    let rows = seg.segment(s);
                    let o = out.row_mut(s);
                    for &r in rows {
                        for (x, y) in o.iter_mut().zip(src.row(r as usize)) {
                            *x += y;
                        }
                    }
                    if kind == Reduce::Mean && !rows.is_empty() {
                        let inv = 1.0 / rows.len() as f64;
                        o.iter_mut().for_each(|x| *x *= inv);
                    }
                }
            }
            Reduce::Max | Reduce::Min => {
                arg = vec![u32::MAX; ns * c];
                for s in 0..ns {
                    let rows = seg.segment(s);
                    let Some(&first) = rows.first() else { continue };
                    out.row_mut(s).copy_from_slice(src.row(first as usize));
                    arg[s * c..(s + 1) * c].iter_mut().for_each(|a| *a = first);
                    for &r in &rows[1..] {
                        let row = src.row(r as usize);
                        for j in 0..c {
                            let better = if kind == Reduce::Max {
                                row[j] > out.data[s * c + j]
                            } else {
                                row[j] < out.data[s * c + j]
                            };
                            if better {
                                out.data[s * c + j] = row[j];
                                arg[s * c + j] = r;
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs[a.0];
        Ok(self.push(out, Op::Segment { a, seg, kind, arg }, needs))
    }

    /// Per-row normalization to zero mean and unit variance, then
    /// `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, c) = self.dims(x);
        if self.dims(gain) != (1, c) || self.dims(bias) != (1, c) {
            return Err(Error::shape("layer_norm", format!("gain/bias for width {c}")));
        }
        let src = &self.vals[x.0];
        let g = &self.vals[gain.0].data;
        let b = &self.vals[bias.0].data;
        let mut xhat = Mat::zeros(n, c);
        let mut out = Mat::zeros(n, c);
        let mut rstd = vec![0.0; n];
        for r in 0..n {
            let row = src.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat.data[r * c + j] = h;
                out.data[r * c + j] = g[j] * h + b[j];
            }
        }
        let needs = self.any(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Multi-head attention where row `e` of `q` attends over key/value rows
    /// `ranges[e].0 .. ranges[e].0 + ranges[e].1`. Widths are split into
    /// `heads` equal slices; scores are scaled by `1/sqrt(key width per head)`.
    pub fn grouped_attention(&mut self, q: Var, k: Var, v: Var, ranges: Vec<(u32, u32)>, heads: usize) -> Result<Var> {
        let (nq, dq) = self.dims(q);
        let (nk, dk) = self.dims(k);
        let (nv, dv) = self.dims(v);
        if heads == 0 || dq != dk || dq % heads != 0 || dv % heads != 0 || nk != nv || ranges.len() != nq {
            return Err(Error::shape(
                "grouped_attention",
                format!("q {nq}x{dq}, k {nk}x{dk}, v {nv}x{dv}, {heads} heads, {} ranges", ranges.len()),
            ));
        }
        if let Some(&(s, l)) = ranges.iter().find(|&&(s, l)| l == 0 || (s + l) as usize > nk) {
            return Err(Error::shape("grouped_attention", format!("key range {s}+{l} of {nk}")));
        }
        let hk = dk / heads;
        let hv = dv / heads;
        let scale = 1.0 / (hk as f64).sqrt();
        let (qm, km, vm) = (&self.vals[q.0], &self.vals[k.0], &self.vals[v.0]);
        let mut out = Mat::zeros(nq, dv);
        let mut prob_offset = Vec::with_capacity(nq + 1);
        let total: usize = ranges.iter().map(|r| r.1 as usize * heads).sum();
        let mut probs = Vec::with_capacity(total);
        for (e, &(start, len)) in ranges.iter().enumerate() {
            prob_offset.push(probs.len());
            let qrow = qm.row(e);
            for h in 0..heads {
                let qh = &qrow[h * hk..(h + 1) * hk];
                let base = probs.len();
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len as usize {
                    let kr = &km.row(start as usize + j)[h * hk..(h + 1) * hk];
                    let s = dot(qh, kr) * scale;
                    mx = mx.max(s);
                    probs.push(s);
                }
                let mut z = 0.0;
                for p in &mut probs[base..] {
                    *p = (*p - mx).exp();
                    z += *p;
                }
                let o = &mut out.data[e * dv + h * hv..e * dv + (h + 1) * hv];
                for (j, p) in probs[base..].iter_mut().enumerate() {
                    *p /= z;
                    let vr = &vm.row(start as usize + j)[h * hv..(h + 1) * hv];
                    for (x, y) in o.iter_mut().zip(vr) {
                        *x += *p * y;
                    }
                }
            }
        }
        prob_offset.push(probs.len());
        let needs = self.any(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention(Box::new(AttentionRecord {
                q,
                k,
                v,
                ranges,
                heads,
                scale,
                probs,
                prob_offset,
            })),
            needs,
        ))
    }

    /// Softmax weights recorded by an attention value: per query row, head
    /// and key.
    pub fn attention_weights(&self, att: Var) -> Option<Vec<Vec<Vec<f64>>>> {
        match &self.ops[att.0] {
            Op::Attention(rec) => Some(
                rec.ranges
                    .iter()
                    .enumerate()
                    .map(|(e, &(_, len))| {
                        let base = rec.prob_offset[e];
                        (0..rec.heads)
                            .map(|h| rec.probs[base + h * len as usize..base + (h + 1) * len as usize].to_vec())
                            .collect()
                    })
                    .collect(),
            ),
            _ => None,
        }
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.vals[a.0].data.iter().sum();
        let needs = self.needs[a.0];
        self.push(Mat::from_vec(1, 1, vec![s]).expect("1x1"), Op::SumAll { a }, needs)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.vals[a.0].data.len().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean over masked rows and all columns of `(pred - target)^2`. Zero when
    /// no row is selected.
    pub fn masked_mse(&mut self, pred: Var, target: Mat, mask: Vec<bool>) -> Result<Var> {
        let p = &self.vals[pred.0];
        if p.shape() != target.shape() || mask.len() != p.rows {
            return Err(Error::shape(
                "masked_mse",
                format!("pred {:?}, target {:?}, mask {}", p.shape(), target.shape(), mask.len()),
            ));
        }
        let rows = mask.iter().filter(|&&m| m).count();
        let count = rows * p.cols;
        let mut s = 0.0;
        for r in (0..p.rows).filter(|&r| mask[r]) {
            for (a, b) in p.row(r).iter().zip(target.row(r)) {
                s += (a - b) * (a - b);
            }
        }
        let v = if count > 0 { s / count as f64 } else { 0.0 };
        let needs = self.needs[pred.0];
        Ok(self.push(
            Mat::from_vec(1, 1, vec![v]).expect("1x1"),
            Op::MaskedMse {
                pred,
                target,
                mask,
                count,
            },
            needs,
        ))
    }

    /// Gradients of the scalar `out` with respect to every value that
    /// requires them.
    pub fn backward(&self, out: Var) -> Result<Grads> {
        if self.dims(out) != (1, 1) {
            return Err(Error::shape("backward", format!("output {:?} is not scalar", self.dims(out))));
        }
        let mut grads: Vec<Option<Mat>> = (0..self.vals.len()).map(|_| None).collect();
        grads[out.0] = Some(Mat::from_vec(1, 1, vec![1.0]).expect("1x1"));
        for i in (0..=out.0).rev() {
            if !self.needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            // Only leaf gradients are kept.
            if matches!(self.ops[i], Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Grads { grads })
    }

    fn backprop(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let needs = |v: Var| self.needs[v.0];
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xm, wm) = (&self.vals[x.0], &self.vals[w.0]);
                if needs(*x) {
                    let acc = slot(grads, *x, xm.rows, xm.cols);
                    gemm(g.rows, g.cols, wm.rows, g, false, wm, true, &mut acc.data, 1.0);
                }
                if needs(*w) {
                    let acc = slot(grads, *w, wm.rows, wm.cols);
                    gemm(wm.rows, xm.rows, wm.cols, xm, true, g, false, &mut acc.data, 1.0);
                }
                if let Some(b) = b {
                    if needs(*b) {
                        let acc = slot(grads, *b, 1, g.cols);
                        for r in 0..g.rows {
                            for (a, x) in acc.data.iter_mut().zip(g.row(r)) {
                                *a += x;
                            }
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (am, bm) = (&self.vals[a.0], &self.vals[b.0]);
                if needs(*a) {
                    let acc = slot(grads, *a, am.rows, am.cols);
                    gemm(g.rows, g.cols, bm.rows, g, false, bm, true, &mut acc.data, 1.0);
                }
                if needs(*b) {
                    let acc = slot(grads, *b, bm.rows, bm.cols);
                    gemm(bm.rows, am.rows, bm.cols, am, true, g, false, &mut acc.data, 1.0);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if needs(v) {
                        slot(grads, v, g.rows, g.cols).add_assign(g);
                    }
                }
            }
            Op::Sub { a, b } => {
                if needs(*a) {
                    slot(grads, *a, g.rows, g.cols).add_assign(g);
                }
                if needs(*b) {
                    let acc = slot(grads, *b, g.rows, g.cols);
                    for (x, y) in acc.data.iter_mut().zip(&g.data) {
                        *x -= y;
                    }
                }
            }
            Op::Mul { a, b } => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if needs(v) {
                        let o = &self.vals[other.0].data;
                        let acc = slot(grads, v, g.rows, g.cols);
                        for ((x, y), z) in acc.data.iter_mut().zip(&g.data).zip(o) {
                            *x += y * z;
                        }
                    }
                }
            }
            Op::AddRow { a, row } => {
                if needs(*a) {
                    slot(grads, *a, g.rows, g.cols).add_assign(g);
                }
                if needs(*row) {
                    let acc = slot(grads, *row, 1, g.cols);
                    for r in 0..g.rows {
                        for (x, y) in acc.data.iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Scale { a, s } => {
                if needs(*a) {
                    let acc = slot(grads, *a, g.rows, g.cols);
                    for (x, y) in acc.data.iter_mut().zip(&g.data) {
                        *x += s * y;
                    }
                }
            }
            Op::LeakyRelu { a, slope } => {
                if needs(*a) {
                    let inp = &self.vals[a.0].data;
                    let acc = slot(grads, *a, g.rows, g.cols);
                    for ((x, y), z) in acc.data.iter_mut().zip(&g.data).zip(inp) {
                        *x += if *z > 0.0 { *y } else { slope * y };
                    }
                }
            }
            Op::Exp { a } => {
                if needs(*a) {
                    let out = &self.vals[i].data;
                    let acc = slot(grads, *a, g.rows, g.cols);
                    for ((x, y), z) in acc.data.iter_mut().zip(&g.data).zip(out) {
                        *x += y * z;
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let mut off = 0;
                for &p in parts {
                    let c = self.vals[p.0].cols;
                    if needs(p) {
                        let acc = slot(grads, p, g.rows, c);
                        for r in 0..g.rows {
                            for (x, y) in acc.row_mut(r).iter_mut().zip(&g.row(r)[off..off + c]) {
                                *x += y;
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.vals[p.0].shape();
                    if needs(p) {
                        let acc = slot(grads, p, r, c);
                        for (x, y) in acc.data.iter_mut().zip(&g.data[off * c..(off + r) * c]) {
                            *x += y;
                        }
                    }
                    off += r;
                }
            }
            Op::SliceCols { a, start } => {
                if needs(*a) {
                    let (r, c) = self.vals[a.0].shape();
                    let acc = slot(grads, *a, r, c);
                    for row in 0..r {
                        for (x, y) in acc.row_mut(row)[*start..start + g.cols].iter_mut().zip(g.row(row)) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Gather { a, idx } => {
                if needs(*a) {
                    let (r, c) = self.vals[a.0].shape();
                    let acc = slot(grads, *a, r, c);
                    for (row, &src) in idx.iter().enumerate() {
                        for (x, y) in acc.row_mut(src as usize).iter_mut().zip(g.row(row)) {
                            *x += y;
                        }
                    }
                }
            }
            Op::GatherMulti { srcs, idx } => {
                for (row, &(k, src)) in idx.iter().enumerate() {
                    let s = srcs[k as usize];
                    if !needs(s) {
                        continue;
                    }
                    let (r, c) = self.vals[s.0].shape();
                    let acc = slot(grads, s, r, c);
                    for (x, y) in acc.row_mut(src as usize).iter_mut().zip(g.row(row)) {
                        *x += y;
                    }
                }
            }
            Op::Segment { a, seg, kind, arg } => {
                if needs(*a) {
                    let (r, c) = self.vals[a.0].shape();
                    let acc = slot(grads, *a, r, c);
                    for s in 0..seg.len() {
                        let rows = seg.segment(s);
                        match kind {
                            Reduce::Sum | Reduce::Mean => {
                                let w = if *kind == Reduce::Mean && !rows.is_empty() {
                                    1.0 / rows.len() as f64
                                } else {
                                    1.0
                                };
                                for &row in rows {
                                    for (x, y) in acc.row_mut(row as usize).iter_mut().zip(g.row(s)) {
                                        *x += w * y;
                                    }
                                }
                            }
                            Reduce::Max | Reduce::Min => {
                                if rows.is_empty() {
                                    continue;
                                }
                                for j in 0..c {
                                    let src = arg[s * c + j] as usize;
                                    acc.data[src * c + j] += g.data[s * c + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = g.cols;
                let gv = &self.vals[gain.0].data;
                if needs(*gain) {
                    let acc = slot(grads, *gain, 1, c);
                    for r in 0..g.rows {
                        for j in 0..c {
                            acc.data[j] += g.data[r * c + j] * xhat.data[r * c + j];
                        }
                    }
                }
                if needs(*bias) {
                    let acc = slot(grads, *bias, 1, c);
                    for r in 0..g.rows {
                        for (x, y) in acc.data.iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                }
                if needs(*x) {
                    let acc = slot(grads, *x, g.rows, c);
                    let inv_c = 1.0 / c as f64;
                    for r in 0..g.rows {
                        let gh: Vec<f64> = (0..c).map(|j| g.data[r * c + j] * gv[j]).collect();
                        let xh = xhat.row(r);
                        let m1 = gh.iter().sum::<f64>() * inv_c;
                        let m2 = gh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() * inv_c;
                        for j in 0..c {
                            acc.data[r * c + j] += rstd[r] * (gh[j] - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::Attention(rec) => self.attention_backward(rec, g, grads),
            Op::SumAll { a } => {
                if needs(*a) {
                    let (r, c) = self.vals[a.0].shape();
                    let g0 = g.data[0];
                    slot(grads, *a, r, c).data.iter_mut().for_each(|x| *x += g0);
                }
            }
            Op::MaskedMse {
                pred,
                target,
                mask,
                count,
            } => {
                if needs(*pred) && *count > 0 {
                    let p = &self.vals[pred.0];
                    let w = 2.0 * g.data[0] / *count as f64;
                    let acc = slot(grads, *pred, p.rows, p.cols);
                    for r in (0..p.rows).filter(|&r| mask[r]) {
                        for ((x, a), b) in acc.row_mut(r).iter_mut().zip(p.row(r)).zip(target.row(r)) {
                            *x += w * (a - b);
                        }
                    }
                }
            }
        }
    }

    fn attention_backward(&self, rec: &AttentionRecord, g: &Mat, grads: &mut [Option<Mat>]) {
        let (qm, km, vm) = (&self.vals[rec.q.0], &self.vals[rec.k.0], &self.vals[rec.v.0]);
        let heads = rec.heads;
        let (dk, dv) = (km.cols, vm.cols);
        let (hk, hv) = (dk / heads, dv / heads);
        let mut gq = self.needs[rec.q.0].then(|| Mat::zeros(qm.rows, dk));
        let mut gk = self.needs[rec.k.0].then(|| Mat::zeros(km.rows, dk));
        let mut gv = self.needs[rec.v.0].then(|| Mat::zeros(vm.rows, dv));
        let mut dp = Vec::new();
        for (e, &(start, len)) in rec.ranges.iter().enumerate() {
            let len = len as usize;
            let start = start as usize;
            let grow = g.row(e);
            for h in 0..heads {
                let base = rec.prob_offset[e] + h * len;
                let p = &rec.probs[base..base + len];
                let gh = &grow[h * hv..(h + 1) * hv];
                // dL/dp_j = g . v_j ; dL/ds_j = p_j (dp_j - sum_l p_l dp_l)
                dp.clear();
                for j in 0..len {
                    let vr = &vm.row(start + j)[h * hv..(h + 1) * hv];
                    dp.push(dot(gh, vr));
                    if let Some(gv) = gv.as_mut() {
                        let dst = &mut gv.row_mut(start + j)[h * hv..(h + 1) * hv];
                        for (x, y) in dst.iter_mut().zip(gh) {
                            *x += p[j] * y;
                        }
                    }
                }
                let mean: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                let qh = &qm.row(e)[h * hk..(h + 1) * hk];
                for j in 0..len {
                    let ds = p[j] * (dp[j] - mean) * rec.scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kr = &km.row(start + j)[h * hk..(h + 1) * hk];
                    if let Some(gq) = gq.as_mut() {
                        for (x, y) in gq.row_mut(e)[h * hk..(h + 1) * hk].iter_mut().zip(kr) {
                            *x += ds * y;
                        }
                    }
                    if let Some(gk) = gk.as_mut() {
                        for (x, y) in gk.row_mut(start + j)[h * hk..(h + 1) * hk].iter_mut().zip(qh) {
                            *x += ds * y;
                        }
                    }
                }
            }
        }
        for (v, m) in [(rec.q, gq), (rec.k, gk), (rec.v, gv)] {
            if let Some(m) = m {
                let (r, c) = m.shape();
                slot(grads, v, r, c).add_assign(&m);
            }
        }
    }
}

fn slot(grads: &mut [Option<Mat>], v: Var, rows: usize, cols: usize) -> &mut Mat {
    grads[v.0].get_or_insert_with(|| Mat::zeros(rows, cols))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central finite-difference check of `f` at the given leaves. `f` builds
    /// a scalar on a fresh tape from leaf values.
    pub fn grad_check(leaves: &[Mat], f: &dyn Fn(&mut Tape, &[Var]) -> Var, tol: f64) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|m| tape.leaf(m.clone(), true)).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        let h = 1e-5;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(vars[li]).cloned().unwrap_or_else(|| Mat::zeros(leaf.rows, leaf.cols));
            for k in 0..leaf.data.len() {
                let eval = |delta: f64| {
                    let mut t = Tape::new();
                    let vs: Vec<Var> = leaves
                        .iter()
                        .enumerate()
                        .map(|(j, m)| {
                            let mut m = m.clone();
                            if j == li {
                                m.data[k] += delta;
                            }
                            t.leaf(m, true)
                        })
                        .collect();
                    let o = f(&mut t, &vs);
                    t.value(o).data[0]
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let ana = analytic.data[k];
                let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                assert!(err < tol, "leaf {li} elem {k}: analytic {ana} numeric {num} rel {err}");
            }
        }
    }

    /// Weighted sum so every output element gets a distinct gradient.
    pub fn weighted(t: &mut Tape, v: Var, seed: u64) -> Var {
        let (r, c) = t.value(v).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = t.constant(rand_mat(&mut rng, r, c));
        let p = t.mul(v, w).unwrap();
        t.sum_all(p)
    }

    #[test]
    fn linear_and_matmul_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let leaves = [rand_mat(&mut rng, 5, 3), rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 1, 4)];
        grad_check(
            &leaves,
            &|t, v| {
                let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
                weighted(t, y, 9)
            },
            1e-6,
        );
        let leaves = [rand_mat(&mut rng, 4, 3), rand_mat(&mut rng, 3, 2)];
        grad_check(&leaves, &|t, v| { let y = t.matmul(v[0], v[1]).unwrap(); weighted(t, y, 3) }, 1e-6);
    }

    #[test]
    fn elementwise_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let leaves = [rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 1, 4)];
        grad_check(
            &leaves,
            &|t, v| {
                let a = t.add(v[0], v[1]).unwrap();
                let b = t.sub(a, v[1]).unwrap();
                let c = t.mul(b, v[1]).unwrap();
                let d = t.add_row(c, v[2]).unwrap();
                let e = t.leaky_relu(d, 0.2);
                let f = t.exp(e);
                let g = t.scale(f, 0.7);
                weighted(t, g, 4)
            },
            1e-6,
        );
    }

    #[test]
    fn structural_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let leaves = [rand_mat(&mut rng, 4, 3), rand_mat(&mut rng, 2, 3), rand_mat(&mut rng, 4, 2)];
        grad_check(
            &leaves,
            &|t, v| {
                let a = t.concat_rows(&[v[0], v[1]]).unwrap();
                let b = t.gather(a, vec![5, 0, 0, 3]).unwrap();
                let c = t.concat_cols(&[b, v[2]]).unwrap();
                let d = t.slice_cols(c, 1, 3).unwrap();
                weighted(t, d, 5)
            },
            1e-6,
        );
        let leaves = [rand_mat(&mut rng, 4, 2), rand_mat(&mut rng, 3, 2)];
        grad_check(
            &leaves,
            &|t, v| {
                let e = t.gather_multi(&[v[0], v[1]], vec![(0, 1), (1, 2), (0, 1), (1, 0)]).unwrap();
                weighted(t, e, 6)
            },
            1e-6,
        );
    }

    #[test]
    fn segment_reductions() {
        let seg = Arc::new(Segments::group_by(3, [0usize, 2, 0, 0, 2].into_iter()));
        assert_eq!(seg.segment(0), &[0, 2, 3]);
        assert!(seg.segment(1).is_empty());
        let x = Mat::from_rows(&[vec![1.0, -1.0], vec![5.0, 0.0], vec![3.0, 4.0], vec![2.0, -2.0], vec![7.0, 1.0]]).unwrap();
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let want = [
            (Reduce::Mean, vec![2.0, 1.0 / 3.0, 0.0, 0.0, 6.0, 0.5]),
            (Reduce::Max, vec![3.0, 4.0, 0.0, 0.0, 7.0, 1.0]),
            (Reduce::Min, vec![1.0, -2.0, 0.0, 0.0, 5.0, 0.0]),
            (Reduce::Sum, vec![6.0, 1.0, 0.0, 0.0, 12.0, 1.0]),
        ];
        for (kind, w) in want {
            let r = t.segment_reduce(v, seg.clone(), kind).unwrap();
            let got = &t.value(r).data;
            for (a, b) in got.iter().zip(&w) {
                assert!((a - b).abs() < 1e-12, "{kind:?}: {got:?}");
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for kind in [Reduce::Mean, Reduce::Max, Reduce::Min, Reduce::Sum] {
            let seg = seg.clone();
            grad_check(
                &[rand_mat(&mut rng, 5, 3)],
                &move |t, v| {
                    let r = t.segment_reduce(v[0], seg.clone(), kind).unwrap();
                    weighted(t, r, 7)
                },
                1e-6,
            );
        }
    }

    #[test]
    fn layer_norm_behaviour_and_grad() {
        let mut t = Tape::new();
        let x = t.constant(Mat::from_rows(&[vec![3.0, 3.0, 3.0], vec![1.0, 2.0, 6.0]]).unwrap());
        let g = t.constant(Mat::from_vec(1, 3, vec![1.0; 3]).unwrap());
        let b = t.constant(Mat::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap());
        let y = t.layer_norm(x, g, b).unwrap();
        assert_eq!(t.value(y).row(0), &[0.5, -1.0, 2.0]);
        let b0 = t.constant(Mat::zeros(1, 3));
        let y = t.layer_norm(x, g, b0).unwrap();
        assert!(t.value(y).row(1).iter().sum::<f64>().abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let leaves = [rand_mat(&mut rng, 4, 6), rand_mat(&mut rng, 1, 6), rand_mat(&mut rng, 1, 6)];
        grad_check(&leaves, &|t, v| { let y = t.layer_norm(v[0], v[1], v[2]).unwrap(); weighted(t, y, 8) }, 1e-5);
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut t = Tape::new();
        let q = t.constant(rand_mat(&mut rng, 3, 8));
        let k = t.constant(rand_mat(&mut rng, 7, 8));
        let v = t.constant(rand_mat(&mut rng, 7, 4));
        let o = t.grouped_attention(q, k, v, vec![(0, 4), (4, 3), (6, 1)], 2).unwrap();
        let w = t.attention_weights(o).unwrap();
        for row in &w {
            for head in row {
                assert!((head.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        // A single key gets weight 1: the output is that value row.
        assert_eq!(t.value(o).row(2), t.value(v).row(6));
        assert!(t.grouped_attention(q, k, v, vec![(0, 0), (0, 1), (0, 1)], 2).is_err());
    }

    #[test]
    fn attention_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let leaves = [rand_mat(&mut rng, 3, 8), rand_mat(&mut rng, 6, 8), rand_mat(&mut rng, 6, 4)];
        grad_check(
            &leaves,
            &|t, v| {
                let o = t.grouped_attention(v[0], v[1], v[2], vec![(0, 3), (2, 4), (5, 1)], 2).unwrap();
                weighted(t, o, 9)
            },
            1e-6,
        );
    }

    #[test]
    fn masked_mse_ignores_unmasked_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let target = rand_mat(&mut rng, 4, 2);
        let mut t = Tape::new();
        let p = t.leaf(rand_mat(&mut rng, 4, 2), true);
        let l = t.masked_mse(p, target.clone(), vec![true, false, true, false]).unwrap();
        let g = t.backward(l).unwrap();
        let gp = g.get(p).unwrap();
        assert_eq!(gp.row(1), &[0.0, 0.0]);
        assert_eq!(gp.row(3), &[0.0, 0.0]);
        let mut want = 0.0;
        for r in [0, 2] {
            for c in 0..2 {
                want += (t.value(p).at(r, c) - target.at(r, c)).powi(2);
            }
        }
        assert!((t.value(l).data[0] - want / 4.0).abs() < 1e-12);
        let tt = target.clone();
        grad_check(
            &[rand_mat(&mut rng, 4, 2)],
            &move |t, v| t.masked_mse(v[0], tt.clone(), vec![true, true, false, true]).unwrap(),
            1e-6,
        );
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = t.constant(Mat::zeros(2, 3));
        let b = t.constant(Mat::zeros(2, 2));
        assert!(t.add(a, b).is_err());
        assert!(t.linear(a, b, None).is_err());
        assert!(t.gather(a, vec![2]).is_err());
        assert!(t.backward(a).is_err());
    }
}
