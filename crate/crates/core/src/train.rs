// SPDX-License-Identifier: Apache-2.0

//! Two-stage optimization: auto-encoder pre-training, then the timing model
//! with a frozen, fine-tuned or absent encoder.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::CircuitGraph;
use crate::nn::model::{
    decode, declare_decoder, declare_encoder, declare_gnn, encode, fit_stats, forward_gnn, frozen_latent,
    init_params, FrozenLatent, GnnOut, Latent, NodeStore, Prepared, PreparedCircuit, Targets, EncoderMode,
};
use crate::nn::params::{Binder, Checkpoint, CheckpointKind, Hyper, ModelParams, Standardizer};
use crate::nn::tensor::{Mat, Tape, Var};
use crate::partition::DEFAULT_PAD;
use crate::sta::TimingAnnotation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub lambda_kl: f64,
    pub lambda_cd: f64,
    pub lambda_nd: f64,
    pub encoder_mode: EncoderMode,
    pub seed: u64,
    /// Partition core size `m`; circuits with at most this many nodes are
    /// trained whole.
    pub max_size: usize,
    /// Partition padding `k`.
    pub pad: usize,
    pub hyper: Hyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 2000,
            lambda_kl: 1e-3,
            lambda_cd: 1.0,
            lambda_nd: 1.0,
            encoder_mode: EncoderMode::Frozen,
            seed: 0,
            max_size: 4096,
            pad: DEFAULT_PAD,
            hyper: Hyper::default(),
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        let rates = [self.lr, self.eps];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::InvalidArgument("learning rate and epsilon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("Adam betas must lie in [0, 1)".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("at least one epoch is required".into()));
        }
        if [self.lambda_kl, self.lambda_cd, self.lambda_nd].iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
        }
        if self.max_size == 0 {
            return Err(Error::InvalidArgument("partition size must be positive".into()));
        }
        self.hyper.check()
    }
}

// ---------------------------------------------------------------------------
// Losses

/// Auto-encoder loss terms.
pub struct AeLoss {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
}

/// `MSE(x, recon) + lambda * mean_i 1/2 sum_c (mu^2 + e^logvar - 1 - logvar)`
/// over nodes selected by `mask`.
pub fn loss_ae(t: &mut Tape, x: &Mat, recon: Var, mu: Var, logvar: Var, lambda: f64, mask: &[bool]) -> Result<AeLoss> {
    let recon_l = t.masked_mse(recon, x.clone(), mask.to_vec())?;
    let (n, c) = t.value(mu).shape();
    if mask.len() != n {
        return Err(Error::shape("loss_ae", "mask does not match the node count"));
    }
    let mu2 = t.mul(mu, mu)?;
    let ev = t.exp(logvar);
    let a = t.add(mu2, ev)?;
    let b = t.sub(a, logvar)?;
    let ones = t.constant(Mat::from_vec(1, c, vec![-1.0; c])?);
    let terms = t.add_row(b, ones)?;
    let count = mask.iter().filter(|&&m| m).count().max(1) as f64;
    let mut w = Mat::zeros(n, c);
    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        w.row_mut(r).iter_mut().for_each(|v| *v = 0.5 / count);
    }
    let w = t.constant(w);
    let weighted = t.mul(terms, w)?;
    let kl = t.sum_all(weighted);
    let scaled = t.scale(kl, lambda);
    let total = t.add(recon_l, scaled)?;
    Ok(AeLoss {
        total,
        recon: recon_l,
        kl,
    })
}

pub struct GnnLoss {
    pub total: Var,
    pub as_: Var,
    pub cd: Var,
    pub nd: Var,
}

/// `MSE(AS) + lambda_cd MSE(CD) + lambda_nd MSE(ND)` over core nodes and
/// edges into core nodes.
pub fn loss_gnn(
    t: &mut Tape,
    prep: &Prepared,
    out: &GnnOut,
    targets: &Targets,
    lambda_cd: f64,
    lambda_nd: f64,
) -> Result<GnnLoss> {
    let node_mask = prep.internal.iter().map(|&v| prep.core[v as usize]).collect();
    let edge_mask = |heads: &[crate::nn::model::HeadEdge]| heads.iter().map(|h| prep.core[h.dst as usize]).collect();
    let as_ = t.masked_mse(out.as_, targets.as_.clone(), node_mask)?;
    let cd = t.masked_mse(out.cd, targets.cd.clone(), edge_mask(&prep.cell_heads))?;
    let nd = t.masked_mse(out.nd, targets.nd.clone(), edge_mask(&prep.net_heads))?;
    let a = t.scale(cd, lambda_cd);
    let b = t.scale(nd, lambda_nd);
    let s = t.add(as_, a)?;
    let total = t.add(s, b)?;
    Ok(GnnLoss { total, as_, cd, nd })
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub t: u64,
}

impl Adam {
    /// One bias-corrected update of every parameter in `grads`. Nothing is
    /// changed when any gradient is non-finite.
    pub fn step(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Vec<f64>>, cfg: &TrainConfig) -> Result<()> {
        for (name, g) in grads {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
            if params.get(name)?.data.len() != g.len() {
                return Err(Error::shape("adam", format!("gradient of `{name}` has the wrong length")));
            }
        }
        self.t += 1;
        let b1t = 1.0 - cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - cfg.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let w = &mut params.get_mut(name)?.data;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for k in 0..g.len() {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                let mh = m[k] / b1t;
                let vh = v[k] / b2t;
                w[k] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Logs

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    pub terms: BTreeMap<String, f64>,
    pub seconds: f64,
}

fn finish_epoch(
    stage: &str,
    epoch: usize,
    sums: BTreeMap<String, f64>,
    steps: usize,
    started: Instant,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<EpochLog> {
    let k = steps.max(1) as f64;
    let mut terms: BTreeMap<String, f64> = sums.into_iter().map(|(n, s)| (n, s / k)).collect();
    let loss = terms.remove("total").unwrap_or(0.0);
    if !loss.is_finite() {
        return Err(Error::Diverged { epoch, loss });
    }
    let log = EpochLog {
        stage: stage.into(),
        epoch,
        loss,
        terms,
        seconds: started.elapsed().as_secs_f64(),
    };
    on_epoch(&log);
    Ok(log)
}

fn accumulate(sums: &mut BTreeMap<String, f64>, t: &Tape, parts: &[(&str, Var)]) -> Result<()> {
    for &(name, v) in parts {
        let x = t.value(v).data[0];
        if !x.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite {name} loss")));
        }
        *sums.entry(name.into()).or_default() += x;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Stage 1

pub struct PretrainOutcome {
    /// Encoder only, as saved.
    pub checkpoint: Checkpoint,
    /// Encoder and decoder.
    pub full: ModelParams,
    pub log: Vec<EpochLog>,
}

fn prepare_all(graphs: &[&CircuitGraph], stats: &Standardizer, cfg: &TrainConfig) -> Result<Vec<PreparedCircuit>> {
    graphs
        .iter()
        .map(|g| PreparedCircuit::new(g, stats, &cfg.hyper, cfg.max_size, cfg.pad))
        .collect()
}

/// Trains encoder and decoder on node-feature reconstruction. Labels are
/// not used.
pub fn pretrain(graphs: &[&CircuitGraph], cfg: &TrainConfig, on_epoch: &mut dyn FnMut(&EpochLog)) -> Result<PretrainOutcome> {
    cfg.check()?;
    if graphs.is_empty() {
        return Err(Error::InvalidArgument("no circuits to train on".into()));
    }
    let stats = fit_stats(&graphs.iter().map(|g| (*g, None)).collect::<Vec<_>>())?;
    let mut params = ModelParams::new(cfg.hyper.clone());
    declare_encoder(&mut params);
    declare_decoder(&mut params);
    init_params(&mut params, cfg.seed, |_| true);
    let circuits = prepare_all(graphs, &stats, cfg)?;

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
    let mut adam = Adam::default();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..circuits.len()).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut order_rng);
        let mut sums = BTreeMap::new();
        let mut steps = 0;
        for &c in &order {
            for prep in &circuits[c].pieces {
                let mut t = Tape::new();
                let mut b = Binder::new(&params, |_| true);
                let e = encode(&mut t, &mut b, prep, Some(&mut noise_rng))?;
                let recon = decode(&mut t, &mut b, prep, e.z)?;
                let l = loss_ae(&mut t, &prep.x, recon, e.mu, e.logvar, cfg.lambda_kl, &prep.core)?;
                accumulate(&mut sums, &t, &[("total", l.total), ("recon", l.recon), ("kl", l.kl)])
                    .map_err(|_| Error::Diverged {
                        epoch,
                        loss: t.value(l.total).data[0],
                    })?;
                let grads = t.backward(l.total)?;
                let g = b.gradients(&t, &grads);
                drop(b);
                adam.step(&mut params, &g, cfg)?;
                steps += 1;
            }
        }
        log.push(finish_epoch("pretrain", epoch, sums, steps, started, on_epoch)?);
    }
    let mut enc = params.clone();
    enc.retain_prefixes(&["enc."]);
    Ok(PretrainOutcome {
        checkpoint: Checkpoint::new(CheckpointKind::Encoder, None, stats, enc),
        full: params,
        log,
    })
}

/// Mean reconstruction MSE with `z = mu`, over every node.
pub fn reconstruction_mse(params: &ModelParams, stats: &Standardizer, graphs: &[&CircuitGraph], cfg: &TrainConfig) -> Result<f64> {
    let circuits = prepare_all(graphs, stats, cfg)?;
    let (mut s, mut n) = (0.0, 0usize);
    for c in &circuits {
        for prep in &c.pieces {
            let mut t = Tape::new();
            let mut b = Binder::new(params, |_| false);
            let e = encode(&mut t, &mut b, prep, None)?;
            let recon = decode(&mut t, &mut b, prep, e.z)?;
            let r = t.value(recon);
            for v in (0..prep.n).filter(|&v| prep.core[v]) {
                s += r.row(v).iter().zip(prep.x.row(v)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                n += r.cols;
            }
        }
    }
    Ok(s / n.max(1) as f64)
}

// ---------------------------------------------------------------------------
// Stage 2

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Hyperparameters for stage 2: the configured ones, with the encoder's
/// shape fields taken from its checkpoint.
fn stage2_hyper(cfg: &TrainConfig, encoder: Option<&Checkpoint>) -> Hyper {
    let mut h = cfg.hyper.clone();
    if let Some(e) = encoder {
        let eh = &e.params.hyper;
        h.ae_hidden = eh.ae_hidden;
        h.ae_enc_layers = eh.ae_enc_layers;
        h.ae_dec_layers = eh.ae_dec_layers;
        h.latent_dim = eh.latent_dim;
        h.mlp_depth = eh.mlp_depth;
        h.leaky_slope = eh.leaky_slope;
    }
    h
}

/// Scaling for stage 2: label statistics from the corpus; input statistics
/// from the encoder checkpoint when there is one.
pub fn stage2_stats(corpus: &[(&CircuitGraph, &TimingAnnotation)], encoder: Option<&Checkpoint>) -> Result<Standardizer> {
    let mut stats = fit_stats(&corpus.iter().map(|(g, l)| (*g, Some(*l))).collect::<Vec<_>>())?;
    if let Some(e) = encoder {
        stats.node = e.stats.node.clone();
        stats.edge = e.stats.edge.clone();
        stats.level = e.stats.level.clone();
    }
    Ok(stats)
}

/// Trains the timing model. Each circuit's pieces run in order and share a
/// detached store of finished nodes; one optimizer step per piece.
pub fn train(
    corpus: &[(&CircuitGraph, &TimingAnnotation)],
    encoder: Option<&Checkpoint>,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.check()?;
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("no circuits to train on".into()));
    }
    let mode = cfg.encoder_mode;
    let encoder = match (mode.uses_encoder(), encoder) {
        (true, None) => {
            return Err(Error::InvalidArgument(format!(
                "encoder mode `{mode}` needs an encoder checkpoint"
            )))
        }
        (true, Some(e)) if e.kind != CheckpointKind::Encoder && !e.params.tensors.contains_key("enc.mu.w") => {
            return Err(Error::InvalidArgument("checkpoint holds no encoder".into()))
        }
        (true, e) => e,
        (false, _) => None,
    };
    let hyper = stage2_hyper(cfg, encoder);
    let cfg = &TrainConfig {
        hyper: hyper.clone(),
        ..cfg.clone()
    };
    let stats = stage2_stats(corpus, encoder)?;
    let mut params = ModelParams::new(hyper);
    declare_gnn(&mut params, mode.uses_encoder());
    init_params(&mut params, cfg.seed, |_| true);
    if let Some(e) = encoder {
        params.merge_from(&e.params, "enc.");
    }

    let graphs: Vec<&CircuitGraph> = corpus.iter().map(|(g, _)| *g).collect();
    let circuits = prepare_all(&graphs, &stats, cfg)?;
    let targets: Vec<Vec<Targets>> = circuits
        .iter()
        .zip(corpus)
        .map(|(c, (_, l))| c.pieces.iter().map(|p| Targets::new(p, l, &stats)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let frozen: Vec<Option<FrozenLatent>> = circuits
        .iter()
        .map(|c| match mode {
            EncoderMode::Frozen => frozen_latent(&params, c).map(Some),
            _ => Ok(None),
        })
        .collect::<Result<_>>()?;
    let trainable = move |name: &str| mode != EncoderMode::Frozen || !name.starts_with("enc.");

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0003);
    let mut adam = Adam::default();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..circuits.len()).collect();
    let width = params.hyper.hidden;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut order_rng);
        let mut sums = BTreeMap::new();
        let mut steps = 0;
        for &c in &order {
            let mut store = NodeStore::new(circuits[c].num_nodes(), width);
            for (prep, tg) in circuits[c].pieces.iter().zip(&targets[c]) {
                let mut t = Tape::new();
                let mut b = Binder::new(&params, trainable);
                let latent = match mode {
                    EncoderMode::Frozen => frozen[c].as_ref().map(|f| f.bind(&mut t, prep)),
                    EncoderMode::Finetune => {
                        let e = encode(&mut t, &mut b, prep, None)?;
                        Some(Latent { z: e.mu, g: e.g })
                    }
                    EncoderMode::None => None,
                };
                let ext = store.external(prep)?;
                let out = forward_gnn(&mut t, &mut b, prep, latent, Some(&ext))?;
                let l = loss_gnn(&mut t, prep, &out, tg, cfg.lambda_cd, cfg.lambda_nd)?;
                accumulate(&mut sums, &t, &[("total", l.total), ("as", l.as_), ("cd", l.cd), ("nd", l.nd)])
                    .map_err(|_| Error::Diverged {
                        epoch,
                        loss: t.value(l.total).data[0],
                    })?;
                store.record(&t, prep, &out);
                let grads = t.backward(l.total)?;
                let g = b.gradients(&t, &grads);
                drop(b);
                adam.step(&mut params, &g, cfg)?;
                steps += 1;
            }
        }
        log.push(finish_epoch("train", epoch, sums, steps, started, on_epoch)?);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(CheckpointKind::Model, Some(mode.name().into()), stats, params),
        log,
    })
}

/// Encoder latents for inference with a trained model, if it uses them.
pub fn inference_latent(params: &ModelParams, circuit: &PreparedCircuit) -> Result<Option<FrozenLatent>> {
    if crate::nn::model::expects_encoder(params) {
        frozen_latent(params, circuit).map(Some)
    } else {
        Ok(None)
    }
}
