// SPDX-License-Identifier: Apache-2.0

//! `preroute`: corpus generation, golden STA, partitioning, training and
//! evaluation from one binary.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;

use preroute::datagen::{gen_corpus, load_corpus, write_corpus, CorpusConfig, LoadedCircuit, Split};
use preroute::format::{load_circuit, read_file, save_circuit, to_json, write_atomic};
use preroute::level::{level_histogram, topo_levels};
use preroute::metrics::{evaluate, EvalReport};
use preroute::nn::model::EncoderMode;
use preroute::nn::params::Checkpoint;
use preroute::partition::{manifest, partition, PartitionConfig, DEFAULT_PAD};
use preroute::sta::{analyze, uniform_boundary, LabelDocument, NetDelayModel, PinTiming};
use preroute::train::{pretrain, train, EpochLog, TrainConfig};
use preroute::{CircuitGraph, EdgeKind};

#[derive(Parser, Debug)]
#[command(name = "preroute", version, about = "Pre-routing timing prediction pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Serialize)]
struct Global {
    /// Seed for generation and training; a config file seed takes precedence.
    #[arg(long, global = true, env = "PREROUTE_SEED")]
    seed: Option<u64>,
    /// Worker threads. 1 keeps every output bit-exact.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Floating-point precision. Only f64 is implemented.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled synthetic corpus into a directory.
    Gen(GenArgs),
    /// Run golden static timing analysis on one circuit.
    Sta(StaArgs),
    /// Print levelization statistics of one circuit.
    LevelStats(LevelStatsArgs),
    /// Split one circuit into padded sub-graphs.
    Partition(PartitionArgs),
    /// Pre-train the graph auto-encoder.
    Pretrain(PretrainArgs),
    /// Train the timing model.
    Train(TrainArgs),
    /// Evaluate a trained model against labels.
    Eval(EvalArgs),
    /// Render per-level AT error curves of an evaluation report as CSV.
    Report(ReportArgs),
}

#[derive(Args, Debug, Serialize)]
struct GenArgs {
    /// JSON corpus configuration; its fields override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    min_nodes: Option<usize>,
    #[arg(long)]
    max_nodes: Option<usize>,
    /// Probability of wiring a cell input to a recent driver.
    #[arg(long)]
    depth_bias: Option<f64>,
    /// Endpoint required times sit this far beyond the critical arrival.
    #[arg(long)]
    rat_margin: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct StaConfig {
    rat_margin: f64,
    net_model: NetDelayModel,
    boundary: PinTiming,
}

#[derive(Args, Debug, Serialize)]
struct StaArgs {
    #[arg(long)]
    circuit: PathBuf,
    /// Label document to write.
    #[arg(long)]
    out: PathBuf,
    /// JSON with `rat_margin`, `net_model` and `boundary`; overrides flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    rat_margin: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
struct LevelStatsArgs {
    #[arg(long)]
    circuit: PathBuf,
    /// Write the statistics here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct PartitionArgs {
    #[arg(long)]
    circuit: PathBuf,
    /// Maximum core size `m`.
    #[arg(long)]
    max_size: usize,
    /// Padding depth `k` in levels.
    #[arg(long, default_value_t = DEFAULT_PAD)]
    pad: usize,
    /// Keep a level larger than `m` as its own core instead of failing.
    #[arg(long)]
    split_oversized: bool,
    /// Output directory for sub-graph documents and `partition.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TrainShared {
    /// Corpus directory written by `gen`.
    #[arg(long)]
    corpus: PathBuf,
    /// JSON training configuration; its fields override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch log (JSON lines); defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Partition core size for circuits above it.
    #[arg(long)]
    max_size: Option<usize>,
    #[arg(long)]
    pad: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SplitChoice {
    Train,
    All,
}

#[derive(Args, Debug, Serialize)]
struct PretrainArgs {
    #[command(flatten)]
    shared: TrainShared,
    #[arg(long)]
    lambda_kl: Option<f64>,
    /// Circuits to reconstruct. Labels are never read.
    #[arg(long, value_enum, default_value_t = SplitChoice::Train)]
    split: SplitChoice,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    shared: TrainShared,
    /// Encoder checkpoint from `pretrain`, or `none` for the ablation.
    #[arg(long, default_value = "none")]
    encoder: String,
    /// Keep encoder weights fixed (the default when an encoder is given).
    #[arg(long, conflicts_with = "finetune_encoder")]
    freeze_encoder: bool,
    /// Update encoder weights together with the timing model.
    #[arg(long)]
    finetune_encoder: bool,
    #[arg(long)]
    lambda_cd: Option<f64>,
    #[arg(long)]
    lambda_nd: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Single circuit to evaluate (with `--labels`).
    #[arg(long, requires = "labels", conflicts_with = "corpus")]
    circuit: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Evaluate every circuit of a corpus directory, grouped by split.
    #[arg(long, required_unless_present = "circuit")]
    corpus: Option<PathBuf>,
    /// Structured report to write; a CSV table goes next to it.
    #[arg(long)]
    report: PathBuf,
    /// Path of the CSV table; defaults to the report path with `.csv`.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = TrainConfig::default().max_size)]
    max_size: usize,
    #[arg(long, default_value_t = DEFAULT_PAD)]
    pad: usize,
}

#[derive(Args, Debug, Serialize)]
struct ReportArgs {
    /// Report written by `eval`.
    #[arg(long)]
    report: PathBuf,
    /// CSV to write; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.global.log_level)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let causes: Vec<String> = e.chain().skip(1).map(|c| c.to_string()).collect();
            eprintln!("{}", json!({"error": e.to_string(), "causes": causes}));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    if g.precision == Precision::F32 {
        bail!("--precision f32 is not supported; all computation runs in f64");
    }
    if g.threads == 0 {
        bail!("--threads must be at least 1");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(g.threads)
        .build_global()
        .context("configuring the thread pool")?;
    info!("preroute {} global {}", env!("CARGO_PKG_VERSION"), serde_json::to_string(g)?);
    match &cli.command {
        Command::Gen(a) => cmd_gen(g, a),
        Command::Sta(a) => cmd_sta(g, a),
        Command::LevelStats(a) => cmd_level_stats(a),
        Command::Partition(a) => cmd_partition(a),
        Command::Pretrain(a) => cmd_pretrain(g, a),
        Command::Train(a) => cmd_train(g, a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn log_resolved<T: Serialize>(what: &str, value: &T) -> Result<()> {
    info!("{what} {}", serde_json::to_string(value)?);
    Ok(())
}

fn cmd_gen(g: &Global, a: &GenArgs) -> Result<()> {
    let mut cfg = CorpusConfig::default();
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    set(&mut cfg.n_train, a.n_train);
    set(&mut cfg.n_test, a.n_test);
    set(&mut cfg.min_nodes, a.min_nodes);
    set(&mut cfg.max_nodes, a.max_nodes);
    set(&mut cfg.circuit.depth_bias, a.depth_bias);
    set(&mut cfg.circuit.rat_margin, a.rat_margin);
    let cfg = config::overlay(cfg, a.config.as_deref())?;
    cfg.circuit.check()?;
    log_resolved("gen", &cfg)?;
    let entries = gen_corpus(&cfg)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let m = write_corpus(&a.out, &cfg, &entries)?;
    for c in &m.circuits {
        info!("{} {:?} nodes={} levels={}", c.name, c.split, c.nodes, c.levels);
    }
    Ok(())
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn cmd_sta(g: &Global, a: &StaArgs) -> Result<()> {
    let mut cfg = StaConfig::default();
    set(&mut cfg.rat_margin, a.rat_margin);
    let cfg = config::overlay(cfg, a.config.as_deref())?;
    log_resolved("sta", &cfg)?;
    let graph = load_circuit(&a.circuit)?;
    let schedule = topo_levels(&graph)?;
    let boundary = uniform_boundary(&graph, cfg.boundary);
    let timing = analyze(&graph, &schedule, &boundary, &cfg.net_model, cfg.rat_margin, g.threads > 1)?;
    let worst = timing
        .slack
        .iter()
        .flat_map(|q| q.iter().copied())
        .fold(f64::INFINITY, f64::min);
    info!("{}: {} nodes, worst slack {worst}", graph.name, graph.num_nodes());
    let doc = LabelDocument::new(&graph, timing, cfg.net_model, cfg.rat_margin);
    write_atomic(&a.out, &to_json(&doc))?;
    Ok(())
}

#[derive(Serialize)]
struct LevelStats {
    circuit: String,
    nodes: usize,
    cell_edges: usize,
    net_edges: usize,
    levels: usize,
    largest_level: usize,
    /// `(level, node count)` pairs.
    histogram: Vec<(usize, usize)>,
}

fn cmd_level_stats(a: &LevelStatsArgs) -> Result<()> {
    let graph = load_circuit(&a.circuit)?;
    let schedule = topo_levels(&graph)?;
    let histogram = level_histogram(&schedule);
    let stats = LevelStats {
        circuit: graph.name.clone(),
        nodes: graph.num_nodes(),
        cell_edges: graph.count_edges(EdgeKind::Cell),
        net_edges: graph.count_edges(EdgeKind::Net),
        levels: schedule.num_levels(),
        largest_level: histogram.iter().map(|&(_, n)| n).max().unwrap_or(0),
        histogram,
    };
    emit(a.out.as_deref(), &to_json(&stats))
}

fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => Ok(write_atomic(p, bytes)?),
        None => {
            use std::io::Write;
            let mut out = std::io::stdout().lock();
            out.write_all(bytes)?;
            if !bytes.ends_with(b"\n") {
                out.write_all(b"\n")?;
            }
            Ok(())
        }
    }
}

fn cmd_partition(a: &PartitionArgs) -> Result<()> {
    let cfg = PartitionConfig {
        split_oversized: a.split_oversized,
        ..PartitionConfig::new(a.max_size, a.pad)
    };
    log_resolved("partition", &cfg)?;
    let graph = load_circuit(&a.circuit)?;
    let schedule = topo_levels(&graph)?;
    let parts = partition(&graph, &schedule, &cfg)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let file_of = |p: &preroute::partition::SubGraph| format!("{}.part{:03}.circuit.json", p.parent, p.index);
    for p in &parts {
        save_circuit(&a.out.join(file_of(p)), &p.local_graph)?;
    }
    let m = manifest(&parts, &cfg, file_of);
    info!(
        "{}: {} sub-graph(s){}",
        graph.name,
        parts.len(),
        if m.unpartitioned { ", unpartitioned" } else { "" }
    );
    write_atomic(&a.out.join("partition.json"), &to_json(&m))?;
    Ok(())
}

fn train_config(g: &Global, s: &TrainShared, edit: impl FnOnce(&mut TrainConfig)) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    set(&mut cfg.epochs, s.epochs);
    set(&mut cfg.lr, s.lr);
    set(&mut cfg.max_size, s.max_size);
    set(&mut cfg.pad, s.pad);
    edit(&mut cfg);
    let cfg = config::overlay(cfg, s.config.as_deref())?;
    cfg.check()?;
    Ok(cfg)
}

/// Collects epoch records and rewrites the log document after each one.
struct EpochSink {
    path: PathBuf,
    lines: String,
    error: Option<preroute::Error>,
}

impl EpochSink {
    fn new(out: &Path, explicit: Option<&Path>) -> Self {
        let path = explicit.map(Path::to_path_buf).unwrap_or_else(|| {
            let mut p = out.as_os_str().to_owned();
            p.push(".log.jsonl");
            PathBuf::from(p)
        });
        EpochSink {
            path,
            lines: String::new(),
            error: None,
        }
    }

    fn record(&mut self, l: &EpochLog) {
        info!("{} epoch {} loss {:.6} {:?} {:.1}s", l.stage, l.epoch, l.loss, l.terms, l.seconds);
        self.lines.push_str(&serde_json::to_string(l).unwrap_or_default());
        self.lines.push('\n');
        if let Err(e) = write_atomic(&self.path, self.lines.as_bytes()) {
            self.error.get_or_insert(e);
        }
    }

    fn finish(self) -> Result<()> {
        match self.error {
            Some(e) => Err(e).context("writing the epoch log"),
            None => Ok(()),
        }
    }
}

fn load_split(dir: &Path, choice: SplitChoice) -> Result<Vec<LoadedCircuit>> {
    let (_, circuits) = load_corpus(dir)?;
    let keep: Vec<_> = circuits
        .into_iter()
        .filter(|c| choice == SplitChoice::All || c.split == Split::Train)
        .collect();
    if keep.is_empty() {
        bail!("corpus {} has no circuits in the requested split", dir.display());
    }
    Ok(keep)
}

fn cmd_pretrain(g: &Global, a: &PretrainArgs) -> Result<()> {
    let cfg = train_config(g, &a.shared, |c| set(&mut c.lambda_kl, a.lambda_kl))?;
    log_resolved("pretrain", &cfg)?;
    let circuits = load_split(&a.shared.corpus, a.split)?;
    let graphs: Vec<&CircuitGraph> = circuits.iter().map(|c| &c.graph).collect();
    let mut sink = EpochSink::new(&a.shared.out, a.shared.log.as_deref());
    let out = pretrain(&graphs, &cfg, &mut |l| sink.record(l))?;
    sink.finish()?;
    out.checkpoint.save(&a.shared.out)?;
    Ok(())
}

fn cmd_train(g: &Global, a: &TrainArgs) -> Result<()> {
    let encoder = match a.encoder.as_str() {
        "none" => None,
        p => Some(Checkpoint::load(Path::new(p)).with_context(|| format!("loading encoder {p}"))?),
    };
    let mode = match (&encoder, a.finetune_encoder) {
        (None, _) => EncoderMode::None,
        (Some(_), true) => EncoderMode::Finetune,
        (Some(_), false) => EncoderMode::Frozen,
    };
    let cfg = train_config(g, &a.shared, |c| {
        c.encoder_mode = mode;
        set(&mut c.lambda_cd, a.lambda_cd);
        set(&mut c.lambda_nd, a.lambda_nd);
    })?;
    log_resolved("train", &cfg)?;
    let circuits = load_split(&a.shared.corpus, SplitChoice::Train)?;
    let corpus: Vec<_> = circuits.iter().map(|c| (&c.graph, &c.labels)).collect();
    let mut sink = EpochSink::new(&a.shared.out, a.shared.log.as_deref());
    let out = train(&corpus, encoder.as_ref(), &cfg, &mut |l| sink.record(l))?;
    sink.finish()?;
    out.checkpoint.save(&a.shared.out)?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    log_resolved("eval", a)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let mut reports = Vec::new();
    if let (Some(c), Some(l)) = (&a.circuit, &a.labels) {
        let graph = load_circuit(c)?;
        let labels = LabelDocument::parse(&read_file(l)?, &graph)?.timing;
        reports.push(evaluate(&ckpt, &graph, &labels, a.max_size, a.pad, None)?);
    } else if let Some(dir) = &a.corpus {
        for c in load_corpus(dir)?.1 {
            let split = match c.split {
                Split::Train => "train",
                Split::Test => "test",
            };
            let r = evaluate(&ckpt, &c.graph, &c.labels, a.max_size, a.pad, Some(split.into()))?;
            info!("{} ({split}): slack R2_uf {:?}", r.circuit, r.tasks["slack"].r2_uf);
            reports.push(r);
        }
    }
    let report = EvalReport::new(reports);
    for (split, avg) in &report.averages {
        let row: BTreeMap<_, _> = avg.r2_uf.iter().map(|(t, v)| (t.as_str(), v.mean)).collect();
        info!("{split}: mean R2_uf {row:?}");
    }
    write_atomic(&a.report, &to_json(&report))?;
    let csv = a.csv.clone().unwrap_or_else(|| a.report.with_extension("csv"));
    write_atomic(&csv, report.to_csv()?.as_bytes())?;
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let report: EvalReport = preroute::format::from_json(&read_file(&a.report)?)?;
    if report.format != preroute::metrics::REPORT_FORMAT {
        bail!("{} is not an evaluation report", a.report.display());
    }
    emit(a.out.as_deref(), report.levels_csv()?.as_bytes())
}
