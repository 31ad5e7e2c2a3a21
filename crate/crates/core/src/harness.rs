//! Experiment configuration, the run driver and the artifacts it writes.
//!
//! A run directory holds `config.toml` (the resolved configuration),
//! `metrics.jsonl`, `ledger.jsonl`, `masks/<layer>.csv`, `residuals.csv`
//! and `summary.json`. A run that hits a non-finite value also leaves
//! `dump.json` with the full state.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{FlatConsensus, GradientSync};
use crate::consensus::{Algorithm, ConsensusParams, HsAdmm, HsAdmmConfig, IterationRecord, PenaltyConfig, Trainer};
use crate::error::{config_err, Error, Result};
use crate::exec::ExecMode;
use crate::sparsity::{ConstraintKind, Keep, SparsityConstraint, SparsityMask};
use crate::tensor::{LayerKind, LayerSpec};
use crate::transport::{CommLedger, LatencyModel, Topology};
use crate::workloads::{SolverConfig, Workload, WorkloadConfig};

/// Inter-node traffic of the reference ResNet run relative to dense
/// data-parallel training (5.21 GB against 13.00 GB).
pub const REFERENCE_RATIO: f64 = 5.21 / 13.00;

/// Applies one constraint to a named layer, or to every conv layer with `"*"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintRule {
    pub layer: String,
    pub kind: ConstraintKind,
    pub keep: Keep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub baseline: Algorithm,
    /// Fraction of entries per layer the top-k baseline sends.
    pub topk_rate: f64,
    pub exec: ExecMode,
    pub out_dir: PathBuf,
    pub topology: Topology,
    pub workload: WorkloadConfig,
    pub solver: SolverConfig,
    pub penalty: PenaltyConfig,
    pub consensus: ConsensusParams,
    pub constraints: Vec<ConstraintRule>,
    pub latency: LatencyModel,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            baseline: Algorithm::Hsadmm,
            topk_rate: 0.01,
            exec: ExecMode::default(),
            out_dir: PathBuf::from("runs/latest"),
            topology: Topology { nodes: 2, accels_per_node: 2 },
            workload: WorkloadConfig::default(),
            solver: SolverConfig::default(),
            penalty: PenaltyConfig::default(),
            consensus: ConsensusParams::default(),
            constraints: vec![ConstraintRule {
                layer: "*".into(),
                kind: ConstraintKind::ChannelKeep,
                keep: Keep::Rate(0.5),
            }],
            latency: LatencyModel::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| config_err!("cannot read config {}: {e}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Per-layer constraint lists for the given layers.
    pub fn resolve_constraints(&self, layers: &[LayerSpec]) -> Result<Vec<Vec<SparsityConstraint>>> {
        let mut out = vec![Vec::new(); layers.len()];
        for rule in &self.constraints {
            let c = SparsityConstraint { kind: rule.kind, keep: rule.keep };
            if rule.layer == "*" {
                for (j, l) in layers.iter().enumerate() {
                    if l.kind == LayerKind::Conv {
                        out[j].push(c);
                    }
                }
                continue;
            }
            let j = layers.iter().position(|l| l.name == rule.layer).ok_or_else(|| {
                let names: Vec<&str> = layers.iter().map(|l| l.name.as_str()).collect();
                config_err!("constraint names layer {:?}; the workload has {}", rule.layer, names.join(", "))
            })?;
            out[j].push(c);
        }
        Ok(out)
    }

    pub fn hsadmm_config(&self, layers: &[LayerSpec]) -> Result<HsAdmmConfig> {
        Ok(HsAdmmConfig {
            topology: Topology::new(self.topology.nodes, self.topology.accels_per_node)?,
            solver: self.solver.clone(),
            penalty: self.penalty.clone(),
            params: self.consensus.clone(),
            constraints: self.resolve_constraints(layers)?,
            seed: self.seed,
            exec: self.exec,
            latency: self.latency,
        })
    }

    /// Checks everything that can be checked without data.
    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(config_err!("seed must fit in a signed 64-bit integer"));
        }
        self.workload.validate()?;
        let layers = self.workload.layers();
        let hc = self.hsadmm_config(&layers)?;
        hc.validate(&layers, hc.topology.world_size())?;
        if self.baseline == Algorithm::Topk {
            crate::baselines::BaselineKind::TopK { rate: self.topk_rate }.validate()?;
        }
        let l = &self.latency;
        if [l.intra_alpha_s, l.inter_alpha_s].iter().any(|a| !(*a >= 0.0))
            || [l.intra_beta_bytes_per_s, l.inter_beta_bytes_per_s].iter().any(|b| !(*b > 0.0))
        {
            return Err(config_err!("latency model needs alpha ≥ 0 and beta > 0"));
        }
        Ok(())
    }
}

pub fn build_trainer<'w>(cfg: &ExperimentConfig, wl: &'w Workload) -> Result<Box<dyn Trainer + 'w>> {
    let hc = cfg.hsadmm_config(wl.layers())?;
    Ok(match cfg.baseline {
        Algorithm::Hsadmm => Box::new(HsAdmm::new(wl, hc)?),
        Algorithm::Dense => Box::new(GradientSync::dense(wl, hc)?),
        Algorithm::Topk => Box::new(GradientSync::top_k(wl, hc, cfg.topk_rate)?),
        Algorithm::Flat => Box::new(FlatConsensus::new(wl, hc)?),
    })
}

/// Steps until convergence (when configured) or the iteration cap, pushing
/// each record as it is produced so a failure keeps the history.
pub fn drive(t: &mut dyn Trainer, params: &ConsensusParams, records: &mut Vec<IterationRecord>) -> Result<()> {
    records.push(t.initial_record());
    for _ in 0..params.max_iters {
        let rec = t.step()?;
        let stop = rec.converged && params.stop_on_convergence;
        log::debug!("iteration {} loss {:.6e}", rec.k, rec.loss);
        records.push(rec);
        if stop {
            break;
        }
    }
    Ok(())
}

/// Everything a run produces, before it is written anywhere.
pub struct RunOutput {
    pub records: Vec<IterationRecord>,
    pub ledger: CommLedger,
    pub layers: Vec<LayerSpec>,
    pub masks: Vec<SparsityMask>,
    pub summary: RunSummary,
}

/// Runs in memory. A failure during training carries the records so far
/// and a state dump.
pub fn execute(cfg: &ExperimentConfig) -> std::result::Result<RunOutput, Box<RunError>> {
    let early = |error| Box::new(RunError { error, failure: None });
    cfg.validate().map_err(early)?;
    let world = cfg.topology.nodes * cfg.topology.accels_per_node;
    let wl = Workload::generate(&cfg.workload, world, cfg.seed).map_err(early)?;
    let mut t = build_trainer(cfg, &wl).map_err(early)?;
    let mut records = Vec::new();
    if let Err(error) = drive(t.as_mut(), &cfg.consensus, &mut records) {
        let state = t.dump().unwrap_or_else(|d| serde_json::json!({ "dump_error": d.to_string() }));
        let failure = Failure { records, ledger: t.ledger().clone(), state };
        return Err(Box::new(RunError { error, failure: Some(failure) }));
    }
    let ledger = t.ledger().clone();
    let layers = t.layers().to_vec();
    let masks = t.masks();
    let summary = RunSummary::new(&records, &ledger, &layers, &masks);
    Ok(RunOutput { records, ledger, layers, masks, summary })
}

#[derive(Debug)]
pub struct RunError {
    pub error: Error,
    pub failure: Option<Failure>,
}

/// What is left of a run that stopped on an error.
#[derive(Debug)]
pub struct Failure {
    pub records: Vec<IterationRecord>,
    pub ledger: CommLedger,
    pub state: serde_json::Value,
}

/// Runs the experiment and writes its artifacts under `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    // config errors surface before anything touches the output directory
    cfg.validate()?;
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    match execute(cfg) {
        Ok(out) => {
            write_records(&dir.join("metrics.jsonl"), &out.records)?;
            out.ledger.write_jsonl(BufWriter::new(File::create(dir.join("ledger.jsonl"))?))?;
            let masks_dir = dir.join("masks");
            fs::create_dir_all(&masks_dir)?;
            for (layer, mask) in out.layers.iter().zip(&out.masks) {
                let mut w = BufWriter::new(File::create(masks_dir.join(format!("{}.csv", layer.name)))?);
                mask.write_csv(&mut w)?;
                w.flush()?;
            }
            export_residual_traces(&out.records, File::create(dir.join("residuals.csv"))?)?;
            write_json(&dir.join("summary.json"), &out.summary)?;
            Ok(out.summary)
        }
        Err(boxed) => {
            let RunError { error: err, failure } = *boxed;
            if let Some(f) = failure {
                write_records(&dir.join("metrics.jsonl"), &f.records)?;
                f.ledger.write_jsonl(BufWriter::new(File::create(dir.join("ledger.jsonl"))?))?;
                let dump = serde_json::json!({ "error": err.to_string(), "state": f.state });
                write_json(&dir.join("dump.json"), &dump)?;
                log::error!("run aborted; state written to {}", dir.join("dump.json").display());
            }
            Err(err)
        }
    }
}

fn write_records(path: &Path, records: &[IterationRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<IterationRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn read_ledger(path: &Path) -> Result<CommLedger> {
    CommLedger::read_jsonl(BufReader::new(File::open(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationVolume {
    pub k: usize,
    pub compressed_bytes: u64,
    pub original_bytes: u64,
    /// `compressed / original`; 1 when nothing was sent.
    pub ratio: f64,
    pub cumulative_compressed: u64,
    pub cumulative_original: u64,
}

/// Cross-node parameter and gradient traffic, per rank.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VolumeReport {
    pub iterations: Vec<IterationVolume>,
    pub compressed_bytes: u64,
    pub original_bytes: u64,
    /// Percentage saved against sending every payload dense.
    pub reduction_pct: f64,
}

pub fn summarize_volume(ledger: &CommLedger) -> VolumeReport {
    let mut per: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
    for e in ledger.entries().iter().filter(|e| e.crosses_nodes() && e.purpose.is_payload()) {
        let slot = per.entry(e.iter).or_default();
        slot.0 += e.bytes;
        slot.1 += e.dense_bytes;
    }
    let mut report = VolumeReport::default();
    for (k, (c, o)) in per {
        report.compressed_bytes += c;
        report.original_bytes += o;
        report.iterations.push(IterationVolume {
            k,
            compressed_bytes: c,
            original_bytes: o,
            ratio: if o == 0 { 1.0 } else { c as f64 / o as f64 },
            cumulative_compressed: report.compressed_bytes,
            cumulative_original: report.original_bytes,
        });
    }
    if report.original_bytes > 0 {
        report.reduction_pct = 100.0 * (1.0 - report.compressed_bytes as f64 / report.original_bytes as f64);
    }
    report
}

impl fmt::Display for VolumeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>6} {:>14} {:>14} {:>9} {:>16}", "iter", "compressed_B", "original_B", "ratio", "cumulative_B")?;
        for it in &self.iterations {
            writeln!(
                f,
                "{:>6} {:>14} {:>14} {:>9.4} {:>16}",
                it.k, it.compressed_bytes, it.original_bytes, it.ratio, it.cumulative_compressed
            )?;
        }
        write!(
            f,
            "total {} of {} bytes, reduction {:.2}% (reference ratio {:.4})",
            self.compressed_bytes, self.original_bytes, self.reduction_pct, REFERENCE_RATIO
        )
    }
}

#[derive(Debug, Serialize)]
struct TraceRow<'a> {
    k: usize,
    rank: usize,
    layer: &'a str,
    r_intra: f64,
    s_intra: f64,
    r_inter: f64,
    s_inter: f64,
}

/// One CSV row per iteration, rank and layer. Records without residuals
/// (the gradient baselines) contribute nothing. Returns the row count.
pub fn export_residual_traces<W: Write>(records: &[IterationRecord], w: W) -> Result<usize> {
    let mut out = csv::Writer::from_writer(w);
    let mut n = 0;
    for rec in records {
        let Some(rep) = &rec.residuals else { continue };
        for r in &rep.ranks {
            out.serialize(TraceRow {
                k: rec.k,
                rank: r.rank,
                layer: &r.layer,
                r_intra: r.r_intra,
                s_intra: r.s_intra,
                r_inter: r.r_inter,
                s_inter: r.s_inter,
            })?;
            n += 1;
        }
    }
    if n == 0 {
        out.write_record(["k", "rank", "layer", "r_intra", "s_intra", "r_inter", "s_inter"])?;
    }
    out.flush()?;
    Ok(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: Algorithm,
    pub iterations: usize,
    pub converged: bool,
    pub final_loss: f64,
    pub r_pri: Option<f64>,
    pub r_dual: Option<f64>,
    pub eps_pri: Option<f64>,
    pub eps_dual: Option<f64>,
    pub frozen_at: Option<usize>,
    pub intra_bytes: u64,
    pub inter_bytes: u64,
    pub world_bytes: u64,
    pub latency_s: f64,
    pub volume_compressed_bytes: u64,
    pub volume_original_bytes: u64,
    pub reduction_pct: f64,
    pub reference_ratio: f64,
    pub keep_derivations: u64,
    pub keep_hits: u64,
    pub mask_density: BTreeMap<String, f64>,
}

impl RunSummary {
    pub fn new(records: &[IterationRecord], ledger: &CommLedger, layers: &[LayerSpec], masks: &[SparsityMask]) -> Self {
        let last = records.last();
        let res = last.and_then(|r| r.residuals.as_ref());
        let vol = summarize_volume(ledger);
        Self {
            algorithm: last.map_or(Algorithm::Hsadmm, |r| r.algorithm),
            iterations: last.map_or(0, |r| r.k),
            converged: last.is_some_and(|r| r.converged),
            final_loss: last.map_or(0.0, |r| r.loss),
            r_pri: res.map(|r| r.r_pri),
            r_dual: res.map(|r| r.r_dual),
            eps_pri: res.map(|r| r.eps_pri),
            eps_dual: res.map(|r| r.eps_dual),
            frozen_at: records.iter().find(|r| r.frozen).map(|r| r.k),
            intra_bytes: records.iter().map(|r| r.intra_bytes).sum(),
            inter_bytes: records.iter().map(|r| r.inter_bytes).sum(),
            world_bytes: records.iter().map(|r| r.world_bytes).sum(),
            latency_s: records.iter().map(|r| r.latency_s).sum(),
            volume_compressed_bytes: vol.compressed_bytes,
            volume_original_bytes: vol.original_bytes,
            reduction_pct: vol.reduction_pct,
            reference_ratio: REFERENCE_RATIO,
            keep_derivations: last.map_or(0, |r| r.keep_derivations),
            keep_hits: last.map_or(0, |r| r.keep_hits),
            mask_density: layers.iter().zip(masks).map(|(l, m)| (l.name.clone(), m.density())).collect(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(dir.join("summary.json"))?))?)
    }

    /// Bytes that left a node: inter-node collectives plus world-group ones.
    pub fn cross_node_bytes(&self) -> u64 {
        self.inter_bytes + self.world_bytes
    }
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "algorithm       {}", self.algorithm)?;
        writeln!(f, "iterations      {} (converged: {})", self.iterations, self.converged)?;
        writeln!(f, "final loss      {:.9e}", self.final_loss)?;
        if let (Some(p), Some(d), Some(ep), Some(ed)) = (self.r_pri, self.r_dual, self.eps_pri, self.eps_dual) {
            writeln!(f, "residuals       r_pri {p:.9e} (eps {ep:.9e}), r_dual {d:.9e} (eps {ed:.9e})")?;
        }
        if let Some(k) = self.frozen_at {
            writeln!(f, "masks frozen at {k}")?;
        }
        writeln!(f, "intra bytes     {}", self.intra_bytes)?;
        writeln!(f, "inter bytes     {}", self.inter_bytes)?;
        writeln!(f, "world bytes     {}", self.world_bytes)?;
        writeln!(f, "latency model   {:.9e} s", self.latency_s)?;
        write!(
            f,
            "payload volume  {} of {} dense bytes, reduction {:.2}%",
            self.volume_compressed_bytes, self.volume_original_bytes, self.reduction_pct
        )
    }
}

/// Reads a run directory back.
pub fn summarize_run(dir: &Path) -> Result<(RunSummary, VolumeReport)> {
    let summary = RunSummary::load(dir)?;
    let ledger = read_ledger(&dir.join("ledger.jsonl"))?;
    Ok((summary, summarize_volume(&ledger)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub metric: &'static str,
    pub a: f64,
    pub b: f64,
    /// `b / a`, or `None` when `a` is zero.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub a: Algorithm,
    pub b: Algorithm,
    pub rows: Vec<CompareRow>,
}

pub fn compare(a: &Path, b: &Path) -> Result<Comparison> {
    let (sa, sb) = (RunSummary::load(a)?, RunSummary::load(b)?);
    let row = |metric, f: fn(&RunSummary) -> f64| {
        let (x, y) = (f(&sa), f(&sb));
        CompareRow { metric, a: x, b: y, ratio: (x != 0.0).then(|| y / x) }
    };
    let rows = vec![
        row("iterations", |s| s.iterations as f64),
        row("final_loss", |s| s.final_loss),
        row("intra_bytes", |s| s.intra_bytes as f64),
        row("inter_bytes", |s| s.inter_bytes as f64),
        row("world_bytes", |s| s.world_bytes as f64),
        row("cross_node_bytes", |s| s.cross_node_bytes() as f64),
        row("payload_bytes", |s| s.volume_compressed_bytes as f64),
        row("latency_s", |s| s.latency_s),
    ];
    Ok(Comparison { a: sa.algorithm, b: sb.algorithm, rows })
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<18} {:>18} {:>18} {:>12}", "metric", self.a.to_string(), self.b.to_string(), "b/a")?;
        for (i, r) in self.rows.iter().enumerate() {
            let ratio = r.ratio.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
            write!(f, "{:<18} {:>18.9e} {:>18.9e} {:>12}", r.metric, r.a, r.b, ratio)?;
            if i + 1 < self.rows.len() {
                writeln!(f)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{LayerVolume, LedgerEntry, OpName, Purpose, Scope};
    use crate::workloads::WorkloadKind;

    fn quick() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.workload = WorkloadConfig {
            kind: WorkloadKind::TinyConvNet,
            samples_per_rank: 8,
            image_size: 4,
            input_channels: 4,
            conv_channels: vec![4],
            classes: 3,
            ..WorkloadConfig::default()
        };
        c.solver = SolverConfig { lr: 0.01, epochs: 1, batch_size: 4, ..SolverConfig::default() };
        c.consensus.max_iters = 4;
        c.consensus.t_freeze = 2;
        c.exec = ExecMode::Sequential;
        c
    }

    #[test]
    fn toml_round_trip_and_defaults() {
        let c = quick();
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
        let d = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(d, ExperimentConfig::default());
        assert_eq!((d.penalty.rho1, d.penalty.rho2, d.solver.lr, d.consensus.max_iters), (1.5e-3, 1.5e-4, 1e-3, 60));
        let partial = ExperimentConfig::from_toml("seed = 9\n[solver]\nlr = 0.5\n").unwrap();
        assert_eq!((partial.seed, partial.solver.lr, partial.solver.epochs), (9, 0.5, 5));
        assert!(ExperimentConfig::from_toml("sed = 9").is_err());
    }

    #[test]
    fn rules_resolve_to_layers() {
        let c = quick();
        let layers = c.workload.layers();
        let r = c.resolve_constraints(&layers).unwrap();
        assert_eq!(r[0], vec![SparsityConstraint::with_rate(ConstraintKind::ChannelKeep, 0.5)]);
        assert!(r[1..].iter().all(Vec::is_empty));
        let mut bad = c.clone();
        bad.constraints[0].layer = "conv9".into();
        assert!(matches!(bad.validate(), Err(Error::Config(m)) if m.contains("conv9")));
        bad.constraints[0].layer = "fc".into();
        assert!(bad.validate().is_err());
        let mut bad = c;
        bad.topology.nodes = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn volume_of_an_empty_ledger_is_empty() {
        let v = summarize_volume(&CommLedger::new());
        assert!(v.iterations.is_empty());
        assert_eq!(v.reduction_pct, 0.0);
    }

    #[test]
    fn volume_counts_cross_node_payloads_only() {
        let mut ledger = CommLedger::new();
        let entry = |iter, scope, purpose, bytes, dense| LedgerEntry {
            iter,
            round: 0,
            group: "g".into(),
            scope,
            op: OpName::AllreduceAvg,
            purpose,
            elements: 0,
            bytes,
            dense_bytes: dense,
            members: 2,
            layers: vec![LayerVolume { layer: "conv1".into(), elements: 0 }],
            latency_s: 0.0,
        };
        ledger.push(entry(1, Scope::Inter, Purpose::Params, 40, 40));
        ledger.push(entry(1, Scope::Intra, Purpose::Params, 40, 40));
        ledger.push(entry(2, Scope::Inter, Purpose::Params, 10, 40));
        ledger.push(entry(2, Scope::Inter, Purpose::Masks, 2, 2));
        let v = summarize_volume(&ledger);
        assert_eq!(v.iterations.len(), 2);
        assert_eq!((v.iterations[0].ratio, v.iterations[1].ratio), (1.0, 0.25));
        assert_eq!((v.compressed_bytes, v.original_bytes), (50, 80));
        assert_eq!(v.iterations[1].cumulative_compressed, 50);
        assert!((v.reduction_pct - 37.5).abs() < 1e-12);
    }

    #[test]
    fn trivial_quadratic_run_has_no_reduction() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = quick();
        c.topology = Topology { nodes: 1, accels_per_node: 1 };
        c.workload = WorkloadConfig { kind: WorkloadKind::Quadratic, features: 3, ..WorkloadConfig::default() };
        c.solver = SolverConfig { lr: 2e-3, epochs: 5, batch_size: 64, momentum: 0.0, weight_decay: 1e-4 };
        c.penalty.rho1 = 1.0;
        c.consensus.max_iters = 60;
        c.out_dir = dir.path().to_path_buf();
        let s = run_experiment(&c).unwrap();
        assert!(s.converged, "{s}");
        assert_eq!(s.reduction_pct, 0.0);
        for f in ["config.toml", "metrics.jsonl", "ledger.jsonl", "masks/w.csv", "residuals.csv", "summary.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let rows = fs::read_to_string(dir.path().join("residuals.csv")).unwrap();
        let first = rows.lines().nth(1).unwrap();
        assert_eq!(first, "0,0,w,0.0,0.0,0.0,0.0");
    }

    #[test]
    fn one_record_gives_one_row_per_layer_and_rank() {
        let c = quick();
        let wl = Workload::generate(&c.workload, 4, c.seed).unwrap();
        let t = build_trainer(&c, &wl).unwrap();
        let mut buf = Vec::new();
        let n = export_residual_traces(&[t.initial_record()], &mut buf).unwrap();
        assert_eq!(n, 4 * wl.layers().len());
    }

    #[test]
    fn dense_run_sends_more_than_hierarchical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let mut c = quick();
        c.out_dir = a.path().to_path_buf();
        let h = run_experiment(&c).unwrap();
        c.baseline = Algorithm::Dense;
        c.out_dir = b.path().to_path_buf();
        let d = run_experiment(&c).unwrap();
        assert_eq!(d.reduction_pct, 0.0);
        assert!(h.reduction_pct > 0.0);
        assert!(d.cross_node_bytes() > h.cross_node_bytes());
        let cmp = compare(a.path(), b.path()).unwrap();
        assert_eq!((cmp.a, cmp.b), (Algorithm::Hsadmm, Algorithm::Dense));
        let (s, v) = summarize_run(a.path()).unwrap();
        assert_eq!(s, h);
        assert_eq!(v.compressed_bytes, h.volume_compressed_bytes);
        assert_eq!(read_records(&a.path().join("metrics.jsonl")).unwrap().len(), 5);
        let mask = SparsityMask::read_csv(&fs::read_to_string(a.path().join("masks/conv1.csv")).unwrap()).unwrap();
        assert_eq!(mask.density(), 0.5);
    }

    #[test]
    fn divergence_leaves_a_dump() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = quick();
        c.solver.lr = 1e200;
        c.consensus.max_iters = 20;
        c.out_dir = dir.path().to_path_buf();
        let err = run_experiment(&c).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
        let dump: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("dump.json")).unwrap()).unwrap();
        assert!(dump["error"].as_str().unwrap().contains("rank"));
        assert!(dump["state"]["ranks"].is_array());
    }

    #[test]
    fn invalid_config_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = quick();
        c.solver.batch_size = 0;
        c.out_dir = dir.path().join("run");
        assert!(run_experiment(&c).is_err());
        assert!(!c.out_dir.exists());
    }
}
