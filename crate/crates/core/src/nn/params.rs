// SPDX-License-Identifier: Apache-2.0

//! Named parameters, hyperparameters and checkpoint documents.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{self, FORMAT_VERSION};
use crate::nn::tensor::{Grads, Mat, Tape, Var};

pub const CHECKPOINT_FORMAT: &str = "preroute-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    #[serde(default = "default_true")]
    pub requires_grad: bool,
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
}

fn default_true() -> bool {
    true
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("tensor", format!("shape {shape:?} with {} values", data.len())));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: true,
            grad: None,
        })
    }

    /// The tensor viewed as a matrix: rank-1 tensors become a single row.
    pub fn as_mat(&self) -> Mat {
        let (r, c) = match self.shape.as_slice() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            _ => (1, self.data.len()),
        };
        Mat {
            rows: r,
            cols: c,
            data: self.data.clone(),
        }
    }

    /// FNV-1a over the bit patterns, for cheap equality checks in logs.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub gcn_layers: usize,
    pub hidden: usize,
    pub mlp_depth: usize,
    pub leaky_slope: f64,
    pub ae_enc_layers: usize,
    pub ae_dec_layers: usize,
    pub ae_hidden: usize,
    pub latent_dim: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub n_freq: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            gcn_layers: 4,
            hidden: 64,
            mlp_depth: 2,
            leaky_slope: 0.2,
            ae_enc_layers: 4,
            ae_dec_layers: 4,
            ae_hidden: 32,
            latent_dim: 4,
            heads: 4,
            d_k: 16,
            d_v: 16,
            n_freq: 8,
        }
    }
}

impl Hyper {
    pub fn check(&self) -> Result<()> {
        if self.heads * self.d_k != self.hidden || self.heads * self.d_v != self.hidden {
            return Err(Error::InvalidArgument(format!(
                "heads * d_k and heads * d_v must equal hidden ({} * {} / {} vs {})",
                self.heads, self.d_k, self.d_v, self.hidden
            )));
        }
        if self.mlp_depth == 0 || self.hidden == 0 || self.ae_hidden == 0 || self.latent_dim == 0 || self.n_freq == 0 {
            return Err(Error::InvalidArgument("layer widths and depths must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter store: parameter path to tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub hyper: Hyper,
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new(hyper: Hyper) -> Self {
        ModelParams {
            hyper,
            tensors: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    /// Declares an affine layer `in -> out` as `{prefix}.w` and `{prefix}.b`.
    pub fn declare_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) {
        self.insert(format!("{prefix}.w"), Tensor::new(vec![fan_in, fan_out], vec![0.0; fan_in * fan_out]).expect("shape"));
        if bias {
            self.insert(format!("{prefix}.b"), Tensor::new(vec![1, fan_out], vec![0.0; fan_out]).expect("shape"));
        }
    }

    /// Declares an MLP `in -> hidden -> ... -> out` with `depth` affine layers.
    pub fn declare_mlp(&mut self, prefix: &str, fan_in: usize, hidden: usize, fan_out: usize, depth: usize) {
        let mut d_in = fan_in;
        for l in 0..depth {
            let d_out = if l + 1 == depth { fan_out } else { hidden };
            self.declare_linear(&format!("{prefix}.l{l}"), d_in, d_out, true);
            d_in = d_out;
        }
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` for every tensor whose
    /// name matches `filter`, visited in name order. Weights use their first
    /// dimension as fan-in; a bias uses the fan-in of its sibling weight.
    pub fn init_uniform(&mut self, seed: u64, filter: impl Fn(&str) -> bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in: BTreeMap<String, usize> = self
            .tensors
            .iter()
            .filter(|(n, _)| n.ends_with(".w"))
            .map(|(n, t)| (n[..n.len() - 2].to_string(), t.shape[0]))
            .collect();
        for (name, t) in self.tensors.iter_mut() {
            if !filter(name) {
                continue;
            }
            let fi = if let Some(stem) = name.strip_suffix(".b") {
                fan_in.get(stem).copied().unwrap_or(t.shape[t.shape.len() - 1])
            } else {
                t.shape[0]
            };
            let bound = 1.0 / (fi.max(1) as f64).sqrt();
            for v in &mut t.data {
                *v = rng.gen_range(-bound..bound);
            }
        }
    }

    /// Keeps only tensors whose names start with one of `prefixes`.
    pub fn retain_prefixes(&mut self, prefixes: &[&str]) {
        self.tensors.retain(|n, _| prefixes.iter().any(|p| n.starts_with(p)));
    }

    /// Copies tensors from `other` whose names start with `prefix`.
    pub fn merge_from(&mut self, other: &ModelParams, prefix: &str) {
        for (n, t) in &other.tensors {
            if n.starts_with(prefix) {
                self.tensors.insert(n.clone(), t.clone());
            }
        }
    }
}

/// Binds parameters onto a tape on first use.
pub struct Binder<'a> {
    params: &'a ModelParams,
    trainable: Box<dyn Fn(&str) -> bool + 'a>,
    vars: BTreeMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(params: &'a ModelParams, trainable: impl Fn(&str) -> bool + 'a) -> Self {
        Binder {
            params,
            trainable: Box::new(trainable),
            vars: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &ModelParams {
        self.params
    }

    pub fn hyper(&self) -> &Hyper {
        &self.params.hyper
    }

    pub fn get(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?;
        let v = tape.leaf(t.as_mat(), t.requires_grad && (self.trainable)(name));
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.tensors.contains_key(name)
    }

    /// Names of parameters read so far.
    pub fn used(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    /// Gradients of trainable bound parameters, by name.
    pub fn gradients(&self, tape: &Tape, grads: &Grads) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .filter(|(_, &v)| tape.requires_grad(v))
            .map(|(n, &v)| {
                let g = grads
                    .get(v)
                    .map(|m| m.data.clone())
                    .unwrap_or_else(|| vec![0.0; tape.value(v).data.len()]);
                (n.clone(), g)
            })
            .collect()
    }
}

/// Per-column mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Affine {
    pub fn identity(n: usize) -> Self {
        Affine {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    /// Statistics over rows of width `n`; zero-variance columns get unit
    /// scale.
    pub fn fit<'a>(n: usize, rows: impl Iterator<Item = &'a [f64]>) -> Self {
        let mut count = 0usize;
        let mut sum = vec![0.0; n];
        let mut sq = vec![0.0; n];
        for r in rows {
            count += 1;
            for j in 0..n {
                sum[j] += r[j];
                sq[j] += r[j] * r[j];
            }
        }
        if count == 0 {
            return Affine::identity(n);
        }
        let c = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / c).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let v = (s / c - m * m).max(0.0);
                if v > 1e-12 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Affine { mean, std }
    }

    pub fn apply(&self, j: usize, v: f64) -> f64 {
        (v - self.mean[j]) / self.std[j]
    }

    pub fn invert(&self, j: usize, v: f64) -> f64 {
        v * self.std[j] + self.mean[j]
    }

    pub fn invert_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter().enumerate().map(|(j, &v)| self.invert(j, v)).collect()
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter().enumerate().map(|(j, &v)| self.apply(j, v)).collect()
    }
}

/// Input and target scaling fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub node: Affine,
    pub edge: Affine,
    pub level: Affine,
    pub lut_row: Affine,
    pub lut_col: Affine,
    pub lut_delay: Affine,
    pub lut_slew: Affine,
    pub at: Affine,
    pub slew: Affine,
    pub cell_delay: Affine,
    pub net_delay: Affine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Encoder,
    Model,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: CheckpointKind,
    pub encoder_mode: Option<String>,
    pub stats: Standardizer,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind, encoder_mode: Option<String>, stats: Standardizer, params: ModelParams) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: FORMAT_VERSION,
            kind,
            encoder_mode,
            stats,
            params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        format::to_json(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c: Checkpoint = format::from_json(bytes)?;
        if c.format != CHECKPOINT_FORMAT || c.version != FORMAT_VERSION {
            return Err(Error::Malformed(format!(
                "expected {CHECKPOINT_FORMAT} version {FORMAT_VERSION}, found {} version {}",
                c.format, c.version
            )));
        }
        for (name, t) in &c.params.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Malformed(format!("tensor `{name}` does not match its shape")));
            }
        }
        c.params.hyper.check()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&format::read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats() -> Standardizer {
        Standardizer {
            node: Affine::identity(8),
            edge: Affine::identity(3),
            level: Affine::identity(1),
            lut_row: Affine::identity(1),
            lut_col: Affine::identity(1),
            lut_delay: Affine::identity(1),
            lut_slew: Affine::identity(1),
            at: Affine::identity(4),
            slew: Affine::identity(4),
            cell_delay: Affine::identity(4),
            net_delay: Affine::identity(4),
        }
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let mut p = ModelParams::new(Hyper::default());
        p.declare_mlp("m", 16, 8, 4, 2);
        p.init_uniform(3, |_| true);
        let w = p.get("m.l0.w").unwrap();
        assert!(w.data.iter().all(|v| v.abs() <= 0.25));
        let b = p.get("m.l1.b").unwrap();
        assert!(b.data.iter().all(|v| v.abs() <= 1.0 / 8f64.sqrt()));
        let mut q = ModelParams::new(Hyper::default());
        q.declare_mlp("m", 16, 8, 4, 2);
        q.init_uniform(3, |_| true);
        assert_eq!(p, q);
        assert!(p.get("m.l2.w").is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut p = ModelParams::new(Hyper::default());
        p.declare_mlp("m", 5, 7, 3, 2);
        p.init_uniform(11, |_| true);
        p.get_mut("m.l0.w").unwrap().data[0] = 0.1 + 0.2;
        p.get_mut("m.l0.w").unwrap().data[1] = f64::MIN_POSITIVE;
        let c = Checkpoint::new(CheckpointKind::Model, Some("frozen".into()), stats(), p);
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let mut p = ModelParams::new(Hyper::default());
        p.declare_linear("a", 2, 2, false);
        let c = Checkpoint::new(CheckpointKind::Encoder, None, stats(), p);
        let mut doc: serde_json::Value = serde_json::from_slice(&c.to_bytes()).unwrap();
        doc["params"]["tensors"]["a.w"]["shape"] = serde_json::json!([2, 3]);
        assert!(Checkpoint::from_bytes(&serde_json::to_vec(&doc).unwrap()).is_err());
        assert!(Checkpoint::from_bytes(b"{}").is_err());
    }

    #[test]
    fn affine_fit() {
        let rows = [vec![1.0, 5.0], vec![3.0, 5.0]];
        let a = Affine::fit(2, rows.iter().map(|r| r.as_slice()));
        assert_eq!(a.mean, vec![2.0, 5.0]);
        assert_eq!(a.std, vec![1.0, 1.0]);
        assert_eq!(a.apply(0, 3.0), 1.0);
        assert_eq!(a.invert(0, 1.0), 3.0);
    }
}
