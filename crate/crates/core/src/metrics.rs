// SPDX-License-Identifier: Apache-2.0

//! Evaluation metrics: R² in flattened and per-channel form, the
//! variance-to-error ratio k, per-level error curves and reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CircuitGraph, EdgeKind};
use crate::level::{topo_levels, LevelSchedule};
use crate::nn::model::{predict, PreparedCircuit, Predictions};
use crate::nn::params::Checkpoint;
use crate::sta::{is_late, Quad, TimingAnnotation, NUM_CORNERS};
use crate::train::inference_latent;

pub const REPORT_FORMAT: &str = "preroute-eval";

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape("metric", format!("{a} targets but {b} predictions")));
    }
    Ok(())
}

/// `(MSE, VAR)` with population variance.
fn mse_var(y: &[f64], yhat: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let mse = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    (mse, var)
}

/// `1 - MSE / VAR`; `None` with fewer than two samples or zero variance.
pub fn r2(y: &[f64], yhat: &[f64]) -> Result<Option<f64>> {
    check_len(y.len(), yhat.len())?;
    if y.len() < 2 {
        return Ok(None);
    }
    let (mse, var) = mse_var(y, yhat);
    Ok((var > 0.0).then(|| 1.0 - mse / var))
}

/// `VAR / MSE`; `None` with fewer than two samples or zero MSE.
pub fn k_value(y: &[f64], yhat: &[f64]) -> Result<Option<f64>> {
    check_len(y.len(), yhat.len())?;
    if y.len() < 2 {
        return Ok(None);
    }
    let (mse, var) = mse_var(y, yhat);
    Ok((mse > 0.0).then(|| var / mse))
}

fn channels<R: AsRef<[f64]>>(rows: &[R]) -> Result<Vec<Vec<f64>>> {
    let c = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
    let mut out = vec![Vec::with_capacity(rows.len()); c];
    for r in rows {
        let r = r.as_ref();
        if r.len() != c {
            return Err(Error::shape("metric", "rows have different channel counts"));
        }
        for (j, &v) in r.iter().enumerate() {
            out[j].push(v);
        }
    }
    Ok(out)
}

fn per_channel<R: AsRef<[f64]>>(
    y: &[R],
    yhat: &[R],
    f: fn(&[f64], &[f64]) -> Result<Option<f64>>,
) -> Result<Vec<Option<f64>>> {
    check_len(y.len(), yhat.len())?;
    let (a, b) = (channels(y)?, channels(yhat)?);
    check_len(a.len(), b.len())?;
    a.iter().zip(&b).map(|(a, b)| f(a, b)).collect()
}

fn mean_all(v: &[Option<f64>]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let vals: Option<Vec<f64>> = v.iter().copied().collect();
    vals.map(|x| x.iter().sum::<f64>() / x.len() as f64)
}

fn flatten<R: AsRef<[f64]>>(rows: &[R]) -> Vec<f64> {
    rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect()
}

/// Mean of per-channel R²; `None` if any channel is degenerate.
pub fn r2_unflatten<R: AsRef<[f64]>>(y: &[R], yhat: &[R]) -> Result<Option<f64>> {
    Ok(mean_all(&per_channel(y, yhat, r2)?))
}

/// R² over all channels concatenated.
pub fn r2_flatten<R: AsRef<[f64]>>(y: &[R], yhat: &[R]) -> Result<Option<f64>> {
    check_len(y.len(), yhat.len())?;
    r2(&flatten(y), &flatten(yhat))
}

/// `(k_uf, k_f)`: mean of per-channel `VAR / MSE`, and the same ratio on
/// flattened data.
pub fn k_ratio<R: AsRef<[f64]>>(y: &[R], yhat: &[R]) -> Result<(Option<f64>, Option<f64>)> {
    let kuf = mean_all(&per_channel(y, yhat, k_value)?);
    let kf = k_value(&flatten(y), &flatten(yhat))?;
    Ok((kuf, kf))
}

/// Mean squared error over all channels of the nodes of each level.
pub fn mse_by_level(schedule: &LevelSchedule, pred: &[Quad], truth: &[Quad]) -> Result<Vec<f64>> {
    check_len(truth.len(), pred.len())?;
    check_len(schedule.node_level.len(), pred.len())?;
    Ok(schedule
        .levels
        .iter()
        .map(|nodes| {
            let s: f64 = nodes
                .iter()
                .flat_map(|&v| pred[v].iter().zip(&truth[v]).map(|(a, b)| (a - b) * (a - b)))
                .sum();
            s / (nodes.len() * NUM_CORNERS).max(1) as f64
        })
        .collect())
}

/// Least-squares slope of `v` against its index.
pub fn ls_slope(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let n = v.len() as f64;
    let xm = (n - 1.0) / 2.0;
    let ym = v.iter().sum::<f64>() / n;
    let sxy: f64 = v.iter().enumerate().map(|(i, y)| (i as f64 - xm) * (y - ym)).sum();
    let sxx: f64 = (0..v.len()).map(|i| (i as f64 - xm).powi(2)).sum();
    Some(sxy / sxx)
}

/// Slack from AT and RAT: `RAT - AT` in late channels, `AT - RAT` in early.
pub fn slack_of(at: &[Quad], rat: &[Quad]) -> Vec<Quad> {
    at.iter()
        .zip(rat)
        .map(|(a, r)| {
            let mut s = [0.0; NUM_CORNERS];
            for c in 0..NUM_CORNERS {
                s[c] = if is_late(c) { r[c] - a[c] } else { a[c] - r[c] };
            }
            s
        })
        .collect()
}

/// Scores of one prediction task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub r2_uf: Option<f64>,
    pub r2_f: Option<f64>,
    pub k_uf: Option<f64>,
    pub k_f: Option<f64>,
    pub mse: f64,
    pub r2_channels: Vec<Option<f64>>,
    pub k_channels: Vec<Option<f64>>,
}

impl TaskScore {
    pub fn new(y: &[Quad], yhat: &[Quad]) -> Result<Self> {
        let (k_uf, k_f) = k_ratio(y, yhat)?;
        let (yf, pf) = (flatten(y), flatten(yhat));
        let mse = if yf.is_empty() { 0.0 } else { mse_var(&yf, &pf).0 };
        Ok(TaskScore {
            r2_uf: r2_unflatten(y, yhat)?,
            r2_f: r2_flatten(y, yhat)?,
            k_uf,
            k_f,
            mse,
            r2_channels: per_channel(y, yhat, r2)?,
            k_channels: per_channel(y, yhat, k_value)?,
        })
    }

    /// Emitted `(r2, k)` pairs: each channel, then the flattened pair.
    pub fn r2_k_pairs(&self) -> Vec<(f64, f64)> {
        self.r2_channels
            .iter()
            .zip(&self.k_channels)
            .chain(std::iter::once((&self.r2_f, &self.k_f)))
            .filter_map(|(r, k)| Some(((*r)?, (*k)?)))
            .collect()
    }
}

pub const TASKS: [&str; 5] = ["slack", "at", "slew", "net_delay", "cell_delay"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitReport {
    pub circuit: String,
    pub split: Option<String>,
    pub nodes: usize,
    pub tasks: BTreeMap<String, TaskScore>,
    /// AT mean squared error per topological level.
    pub mse_by_level: Vec<f64>,
    pub level_slope: Option<f64>,
}

/// Scores predictions against labels.
pub fn score_circuit(
    graph: &CircuitGraph,
    schedule: &LevelSchedule,
    labels: &TimingAnnotation,
    pred: &Predictions,
    split: Option<String>,
) -> Result<CircuitReport> {
    let n = graph.num_nodes();
    check_len(labels.at.len(), n)?;
    check_len(pred.at.len(), n)?;
    let slack_pred = slack_of(&pred.at, &labels.rat);
    let slack_true = slack_of(&labels.at, &labels.rat);
    let edges = |kind: EdgeKind| -> Result<(Vec<Quad>, Vec<Quad>)> {
        let mut y = Vec::new();
        let mut p = Vec::new();
        for (i, _) in graph.edges.iter().enumerate().filter(|(_, e)| e.kind == kind) {
            match (labels.edge_delay[i], pred.edge_delay[i]) {
                (Some(a), Some(b)) => {
                    y.push(a);
                    p.push(b);
                }
                _ => return Err(Error::Malformed(format!("edge {i} lacks a label or a prediction"))),
            }
        }
        Ok((y, p))
    };
    let (nd_y, nd_p) = edges(EdgeKind::Net)?;
    let (cd_y, cd_p) = edges(EdgeKind::Cell)?;
    let mut tasks = BTreeMap::new();
    tasks.insert("slack".into(), TaskScore::new(&slack_true, &slack_pred)?);
    tasks.insert("at".into(), TaskScore::new(&labels.at, &pred.at)?);
    tasks.insert("slew".into(), TaskScore::new(&labels.slew, &pred.slew)?);
    tasks.insert("net_delay".into(), TaskScore::new(&nd_y, &nd_p)?);
    tasks.insert("cell_delay".into(), TaskScore::new(&cd_y, &cd_p)?);
    let curve = mse_by_level(schedule, &pred.at, &labels.at)?;
    Ok(CircuitReport {
        circuit: graph.name.clone(),
        split,
        nodes: n,
        tasks,
        level_slope: ls_slope(&curve),
        mse_by_level: curve,
    })
}

/// Runs a trained model on one circuit and scores it.
pub fn evaluate(
    ckpt: &Checkpoint,
    graph: &CircuitGraph,
    labels: &TimingAnnotation,
    max_size: usize,
    pad: usize,
    split: Option<String>,
) -> Result<CircuitReport> {
    let circuit = PreparedCircuit::new(graph, &ckpt.stats, &ckpt.params.hyper, max_size, pad)?;
    let latent = inference_latent(&ckpt.params, &circuit)?;
    let pred = predict(&ckpt.params, &ckpt.stats, graph, &circuit, latent.as_ref())?;
    let schedule = topo_levels(graph)?;
    score_circuit(graph, &schedule, labels, &pred, split)
}

/// Mean and count of one score over circuits where it is defined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Average {
    pub mean: Option<f64>,
    pub count: usize,
}

fn average(v: impl Iterator<Item = Option<f64>>) -> Average {
    let vals: Vec<f64> = v.flatten().collect();
    Average {
        mean: (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64),
        count: vals.len(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAverage {
    pub r2_uf: BTreeMap<String, Average>,
    pub r2_f: BTreeMap<String, Average>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub circuits: Vec<CircuitReport>,
    /// Keyed by split name (`all` when circuits carry none).
    pub averages: BTreeMap<String, SplitAverage>,
}

impl EvalReport {
    pub fn new(circuits: Vec<CircuitReport>) -> Self {
        let mut groups: BTreeMap<String, Vec<&CircuitReport>> = BTreeMap::new();
        for c in &circuits {
            groups.entry(c.split.clone().unwrap_or_else(|| "all".into())).or_default().push(c);
        }
        let averages = groups
            .into_iter()
            .map(|(split, cs)| {
                let per = |f: fn(&TaskScore) -> Option<f64>| -> BTreeMap<String, Average> {
                    TASKS
                        .iter()
                        .map(|&t| (t.to_string(), average(cs.iter().map(|c| c.tasks.get(t).and_then(f)))))
                        .collect()
                };
                (
                    split,
                    SplitAverage {
                        r2_uf: per(|s| s.r2_uf),
                        r2_f: per(|s| s.r2_f),
                    },
                )
            })
            .collect();
        EvalReport {
            format: REPORT_FORMAT.into(),
            circuits,
            averages,
        }
    }

    pub fn average_r2_uf(&self, split: &str, task: &str) -> Option<f64> {
        self.averages.get(split)?.r2_uf.get(task)?.mean
    }

    /// One row per circuit and task.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let cell = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        w.write_record(["circuit", "split", "task", "r2_uf", "r2_f", "k_uf", "k_f", "mse"])
            .map_err(csv_err)?;
        for c in &self.circuits {
            for (task, s) in &c.tasks {
                w.write_record([
                    c.circuit.clone(),
                    c.split.clone().unwrap_or_default(),
                    task.clone(),
                    cell(s.r2_uf),
                    cell(s.r2_f),
                    cell(s.k_uf),
                    cell(s.k_f),
                    format!("{}", s.mse),
                ])
                .map_err(csv_err)?;
            }
        }
        finish_csv(w)
    }

    /// Per-level AT error curves: one row per circuit and level.
    pub fn levels_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["circuit", "split", "level", "mse"]).map_err(csv_err)?;
        for c in &self.circuits {
            for (lvl, m) in c.mse_by_level.iter().enumerate() {
                w.write_record([
                    c.circuit.clone(),
                    c.split.clone().unwrap_or_default(),
                    lvl.to_string(),
                    format!("{m}"),
                ])
                .map_err(csv_err)?;
            }
        }
        finish_csv(w)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(format!("csv: {e}")))
}
