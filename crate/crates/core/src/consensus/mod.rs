//! Two-level consensus ADMM with structured projection at the node level.
//!
//! Ranks hold local parameters `θ` and scaled duals `u`; each node holds a
//! consensus `z_i` and dual `v`; leaders agree on a global `z` through a
//! shrunken inter-node all-reduce. The pure operations here are composed by
//! [`HsAdmm`] into one outer iteration.

mod runner;

use serde::{Deserialize, Serialize};

pub use runner::{ConsensusState, HsAdmm, HsAdmmConfig, RankState};

use crate::error::{config_err, protocol, structural, Error, Result};
use crate::shrinkage::{compress, decompress, KeepIndexSets};
use crate::sparsity::{extract_mask, project_composite, SparsityConstraint, SparsityMask};
use crate::tensor::{DenseTensor, LayerSpec};
use crate::transport::{
    CommLedger, Cluster, Payload, ProcessGroup, Purpose, ReduceOp, Scope, Tag, Topology,
    LayerVolume,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyConfig {
    pub rho1: f64,
    pub rho2: f64,
    pub rho1_max: f64,
    pub rho2_max: f64,
    pub mu: f64,
    pub tau_inc: f64,
    pub tau_dec: f64,
    pub adaptive: bool,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            rho1: 1.5e-3,
            rho2: 1.5e-4,
            rho1_max: 10.0,
            rho2_max: 10.0,
            mu: 10.0,
            tau_inc: 2.0,
            tau_dec: 2.0,
            adaptive: true,
        }
    }
}

impl PenaltyConfig {
    /// `rho2 = 0` is accepted and switches off the pull toward the global
    /// variable.
    pub fn validate(&self) -> Result<()> {
        if !(self.rho1 > 0.0 && self.rho1 <= self.rho1_max) {
            return Err(config_err!("rho1 must be in (0, rho1_max], got {}", self.rho1));
        }
        if !(self.rho2 >= 0.0 && self.rho2 <= self.rho2_max) {
            return Err(config_err!("rho2 must be in [0, rho2_max], got {}", self.rho2));
        }
        if !(self.mu >= 1.0 && self.tau_inc > 1.0 && self.tau_dec > 1.0) {
            return Err(config_err!("need mu ≥ 1 and tau_inc, tau_dec > 1"));
        }
        Ok(())
    }
}

/// Layer-wise penalties for the intra (`rho1`) and inter (`rho2`) levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltySchedule {
    pub rho1: Vec<f64>,
    pub rho2: Vec<f64>,
    pub rho1_max: f64,
    pub rho2_max: f64,
    pub mu: f64,
    pub tau_inc: f64,
    pub tau_dec: f64,
}

impl PenaltySchedule {
    pub fn uniform(cfg: &PenaltyConfig, layers: usize) -> Self {
        Self {
            rho1: vec![cfg.rho1; layers],
            rho2: vec![cfg.rho2; layers],
            rho1_max: cfg.rho1_max,
            rho2_max: cfg.rho2_max,
            mu: cfg.mu,
            tau_inc: cfg.tau_inc,
            tau_dec: cfg.tau_dec,
        }
    }
}

/// Run-length and termination knobs of the outer loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusParams {
    pub max_iters: usize,
    pub t_freeze: usize,
    /// Consecutive zero-drift iterations that trigger an early freeze.
    pub drift_window: usize,
    pub drift_tolerance: f64,
    /// Inter-node consensus runs on iterations divisible by this.
    pub sync_period: usize,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub stop_on_convergence: bool,
}

impl Default for ConsensusParams {
    fn default() -> Self {
        Self {
            max_iters: 60,
            t_freeze: 10,
            drift_window: 3,
            drift_tolerance: 0.0,
            sync_period: 1,
            eps_abs: 1e-4,
            eps_rel: 1e-3,
            stop_on_convergence: true,
        }
    }
}

impl ConsensusParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || self.sync_period == 0 || self.drift_window == 0 {
            return Err(config_err!("max_iters, sync_period and drift_window must be positive"));
        }
        if !(self.eps_abs > 0.0 && self.eps_rel >= 0.0 && self.drift_tolerance >= 0.0) {
            return Err(config_err!("need eps_abs > 0, eps_rel ≥ 0, drift_tolerance ≥ 0"));
        }
        Ok(())
    }
}

/// `λ/M + P·ρ1 + ρ2`
pub fn gamma(rho1: f64, rho2: f64, lambda: f64, m: usize, p: usize) -> Result<f64> {
    let g = lambda / m as f64 + p as f64 * rho1 + rho2;
    if !(g > 0.0) || !g.is_finite() {
        return Err(config_err!("node weight gamma = {g} must be positive"));
    }
    Ok(g)
}

/// Dense node candidate `(ρ1 Σ_j(θ+u) + ρ2 (z − v)) / γ`.
#[allow(clippy::too_many_arguments)]
pub fn node_candidate(
    thetas_plus_u_sum: &DenseTensor,
    z_global: &DenseTensor,
    v: &DenseTensor,
    rho1: f64,
    rho2: f64,
    lambda: f64,
    m: usize,
    p: usize,
) -> Result<DenseTensor> {
    let g = gamma(rho1, rho2, lambda, m, p)?;
    let shape = thetas_plus_u_sum.shape();
    if z_global.shape() != shape || v.shape() != shape {
        return Err(structural!(
            "candidate inputs {:?}, {:?}, {:?} disagree",
            shape,
            z_global.shape(),
            v.shape()
        ));
    }
    let (s, z, v) = (thetas_plus_u_sum.data(), z_global.data(), v.data());
    Ok(DenseTensor::from_fn(shape, |i| (rho1 * s[i] + rho2 * (z[i] - v[i])) / g))
}

/// Node consensus from the candidate. Frozen: masked by the stored global
/// mask, no new mask. Dynamic: projected, with the local mask of the result
/// (all ones for an unconstrained layer).
pub fn update_node_consensus(
    candidate: &DenseTensor,
    constraints: &[SparsityConstraint],
    global_mask: Option<&SparsityMask>,
    frozen: bool,
) -> Result<(DenseTensor, Option<SparsityMask>)> {
    if frozen {
        let m = global_mask.ok_or_else(|| protocol!("frozen node update without a stored mask"))?;
        return Ok((m.apply(candidate)?, None));
    }
    if constraints.is_empty() {
        return Ok((candidate.clone(), Some(SparsityMask::ones(candidate.shape()))));
    }
    let z = project_composite(candidate, constraints)?;
    let m = extract_mask(&z);
    Ok((z, Some(m)))
}

/// Union of the leaders' local masks, one bitwise-OR all-reduce for all
/// given layers. `local[l][j]` is leader `l`'s mask for layer `j`.
pub fn sync_masks(
    cluster: &mut Cluster,
    leaders: &ProcessGroup,
    local: &[Vec<SparsityMask>],
    names: &[String],
) -> Result<Vec<SparsityMask>> {
    let first = local.first().ok_or_else(|| protocol!("mask sync without leaders"))?;
    if first.len() != names.len() {
        return Err(protocol!("{} masks for {} layers", first.len(), names.len()));
    }
    for masks in local {
        if masks.len() != first.len() || masks.iter().zip(first).any(|(a, b)| a.shape() != b.shape()) {
            return Err(protocol!("leaders hold masks of different shapes"));
        }
    }
    if first.is_empty() {
        return Ok(Vec::new());
    }
    let payloads = local
        .iter()
        .map(|ms| Payload::Bits(ms.iter().flat_map(|m| m.bits().iter().copied()).collect()))
        .collect();
    let tag = Tag::masks(
        names
            .iter()
            .zip(first)
            .map(|(n, m)| LayerVolume { layer: n.clone(), elements: m.len() })
            .collect(),
    );
    let results = cluster.all_reduce(leaders, payloads, ReduceOp::BitwiseOr, tag)?;
    let mut out: Option<Vec<bool>> = None;
    for r in results {
        let bits = r.into_bits()?;
        match &out {
            Some(prev) if *prev != bits => {
                return Err(protocol!("leaders received different global masks"));
            }
            Some(_) => {}
            None => out = Some(bits),
        }
    }
    split_masks(&out.expect("at least one leader"), first.iter().map(|m| m.shape()))
}

/// Cuts a concatenated bit vector into masks of the given shapes.
pub fn split_masks<'a>(bits: &[bool], shapes: impl Iterator<Item = &'a [usize]>) -> Result<Vec<SparsityMask>> {
    let mut offset = 0;
    let mut out = Vec::new();
    for shape in shapes {
        let n: usize = shape.iter().product();
        let chunk = bits
            .get(offset..offset + n)
            .ok_or_else(|| protocol!("mask payload too short"))?;
        out.push(SparsityMask::new(shape.to_vec(), chunk.to_vec())?);
        offset += n;
    }
    if offset != bits.len() {
        return Err(protocol!("mask payload has {} trailing bits", bits.len() - offset));
    }
    Ok(out)
}

/// Output of the leaders' global consensus.
#[derive(Debug, Clone, PartialEq)]
pub struct InterNodeResult {
    pub z: Vec<DenseTensor>,
    /// Averaged compact buffers, the payload leaders forward to followers.
    pub compact: Vec<Vec<f64>>,
}

/// Global consensus among leaders. Each leader sends `z_i + v_i`, shrunk to
/// its keep rectangle (dense when `None`), the compact buffers are averaged
/// and restored with zeros, then `v_i += z_i − z`. Leaders must hold
/// identical keep sets.
pub fn inter_node_consensus(
    cluster: &mut Cluster,
    leaders: &ProcessGroup,
    layers: &[LayerSpec],
    z_node: &[Vec<DenseTensor>],
    v: &mut [Vec<DenseTensor>],
    keeps: &[Vec<Option<KeepIndexSets>>],
) -> Result<InterNodeResult> {
    let n = leaders.size();
    if z_node.len() != n || v.len() != n || keeps.len() != n {
        return Err(protocol!("inter-node consensus needs one state per leader"));
    }
    if keeps.iter().any(|k| k != &keeps[0]) {
        return Err(protocol!("leaders disagree on compact shapes; masks were not synchronized"));
    }
    let mut items = Vec::with_capacity(n);
    for l in 0..n {
        let mut bufs = Vec::with_capacity(layers.len());
        for (j, keep) in keeps[l].iter().enumerate() {
            let c = z_node[l][j].add(&v[l][j])?;
            bufs.push(match keep {
                Some(k) => compress(&c, k)?.data,
                None => c.into_data(),
            });
        }
        items.push(bufs);
    }
    let names: Vec<String> = layers.iter().map(|l| l.name.clone()).collect();
    let dense: Vec<usize> = layers.iter().map(LayerSpec::numel).collect();
    let compact = cluster.all_reduce_flat(leaders, items, &names, &dense, ReduceOp::Avg, Purpose::Params)?;
    let z = restore(layers, &keeps[0], &compact)?;
    for l in 0..n {
        for j in 0..layers.len() {
            let d = z_node[l][j].sub(&z[j])?;
            v[l][j].add_assign(&d)?;
        }
    }
    Ok(InterNodeResult { z, compact })
}

/// Zero-filled full tensors from compact (or dense) buffers.
pub fn restore(
    layers: &[LayerSpec],
    keeps: &[Option<KeepIndexSets>],
    compact: &[Vec<f64>],
) -> Result<Vec<DenseTensor>> {
    layers
        .iter()
        .zip(keeps)
        .zip(compact)
        .map(|((layer, keep), buf)| match keep {
            Some(k) => decompress(
                &crate::shrinkage::CompactBuffer {
                    layer: layer.name.clone(),
                    shape: k.compact_shape(),
                    data: buf.clone(),
                },
                k,
                &layer.shape,
            ),
            None => DenseTensor::new(layer.shape.clone(), buf.clone()),
        })
        .collect()
}

/// `u + (θ − z_i)`
pub fn dual_update_intra(theta: &DenseTensor, z_node: &DenseTensor, u: &DenseTensor) -> Result<DenseTensor> {
    let d = theta.sub(z_node)?;
    u.add(&d)
}

/// Scales a scaled dual after its penalty moved from `old` to `new`.
pub fn rescale_dual(dual: &mut DenseTensor, old: f64, new: f64) {
    if old != new && new > 0.0 {
        dual.scale_assign(old / new);
    }
}

/// Squared-norm terms one rank contributes for one layer. Node-level terms
/// come only from leaders, so summing over all ranks stacks each constraint
/// exactly once.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ResidualTerms {
    pub r_intra: f64,
    pub s_intra: f64,
    pub r_inter: f64,
    pub s_inter: f64,
    pub theta: f64,
    pub z_node: f64,
    pub z: f64,
    pub scaled_u: f64,
    pub scaled_v: f64,
}

impl ResidualTerms {
    pub const WIDTH: usize = 9;

    pub fn to_array(self) -> [f64; Self::WIDTH] {
        [
            self.r_intra,
            self.s_intra,
            self.r_inter,
            self.s_inter,
            self.theta,
            self.z_node,
            self.z,
            self.scaled_u,
            self.scaled_v,
        ]
    }

    pub fn from_slice(a: &[f64]) -> Self {
        Self {
            r_intra: a[0],
            s_intra: a[1],
            r_inter: a[2],
            s_inter: a[3],
            theta: a[4],
            z_node: a[5],
            z: a[6],
            scaled_u: a[7],
            scaled_v: a[8],
        }
    }

    fn add(self, o: Self) -> Self {
        let (a, b) = (self.to_array(), o.to_array());
        let mut c = [0.0; Self::WIDTH];
        for i in 0..Self::WIDTH {
            c[i] = a[i] + b[i];
        }
        Self::from_slice(&c)
    }
}

/// One rank's view of the four residual norms for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankResidual {
    pub rank: usize,
    pub layer: String,
    pub r_intra: f64,
    pub s_intra: f64,
    pub r_inter: f64,
    pub s_inter: f64,
}

/// Inputs for one rank and layer at the end of an iteration.
pub struct ResidualInputs<'a> {
    pub theta: &'a DenseTensor,
    pub u: &'a DenseTensor,
    pub z_node: &'a DenseTensor,
    pub z_node_prev: &'a DenseTensor,
    pub v: &'a DenseTensor,
    pub z: &'a DenseTensor,
    pub z_prev: &'a DenseTensor,
    pub rho1: f64,
    pub rho2: f64,
    pub leader: bool,
}

fn dist2(a: &DenseTensor, b: &DenseTensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Local terms plus the rank's own norms for export.
pub fn residual_terms(x: &ResidualInputs<'_>) -> (ResidualTerms, [f64; 4]) {
    let r_intra = dist2(x.theta, x.z_node);
    let s_intra = x.rho1 * x.rho1 * dist2(x.z_node, x.z_node_prev);
    let r_inter = dist2(x.z_node, x.z);
    let s_inter = x.rho2 * x.rho2 * dist2(x.z, x.z_prev);
    let own = [r_intra.sqrt(), s_intra.sqrt(), r_inter.sqrt(), s_inter.sqrt()];
    let lead = if x.leader { 1.0 } else { 0.0 };
    let t = ResidualTerms {
        r_intra,
        s_intra,
        r_inter: lead * r_inter,
        s_inter: lead * s_inter,
        theta: x.theta.squared_norm(),
        z_node: lead * x.z_node.squared_norm(),
        z: lead * x.z.squared_norm(),
        scaled_u: x.rho1 * x.rho1 * x.u.squared_norm(),
        scaled_v: lead * x.rho2 * x.rho2 * x.v.squared_norm(),
    };
    (t, own)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerResidual {
    pub layer: String,
    pub r_intra: f64,
    pub s_intra: f64,
    pub r_inter: f64,
    pub s_inter: f64,
    pub r_pri: f64,
    pub r_dual: f64,
    pub eps_pri: f64,
    pub eps_dual: f64,
    pub rho1: f64,
    pub rho2: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub layers: Vec<LayerResidual>,
    pub r_pri: f64,
    pub r_dual: f64,
    pub eps_pri: f64,
    pub eps_dual: f64,
    pub ranks: Vec<RankResidual>,
}

impl ResidualReport {
    /// Aggregate test: both stacked residuals under their thresholds.
    pub fn converged(&self) -> bool {
        self.r_pri <= self.eps_pri && self.r_dual <= self.eps_dual
    }
}

fn thresholds(t: &ResidualTerms, n: usize, topo: &Topology, eps_abs: f64, eps_rel: f64) -> (f64, f64) {
    let (nr, m, p) = (topo.world_size() as f64, topo.nodes as f64, topo.accels_per_node as f64);
    let root = ((nr + m) * n as f64).sqrt() * eps_abs;
    let ax = (t.theta + t.z_node).sqrt();
    let bz = (p * t.z_node + t.z).sqrt();
    let eps_pri = root + eps_rel * ax.max(bz);
    let eps_dual = root + eps_rel * (t.scaled_u + t.scaled_v).sqrt();
    (eps_pri, eps_dual)
}

/// Per-layer and aggregate residual norms and thresholds from summed terms.
/// Thresholds follow the scaled-form recipe
/// `ε = sqrt(p)·ε_abs + ε_rel·(scale)` with `p` the stacked constraint size.
pub fn compute_residuals(
    sums: &[ResidualTerms],
    layers: &[LayerSpec],
    topo: &Topology,
    sched: &PenaltySchedule,
    eps_abs: f64,
    eps_rel: f64,
    ranks: Vec<RankResidual>,
) -> ResidualReport {
    let mut total = ResidualTerms::default();
    let mut total_n = 0;
    let per_layer = layers
        .iter()
        .zip(sums)
        .enumerate()
        .map(|(j, (layer, t))| {
            total = total.add(*t);
            total_n += layer.numel();
            let (eps_pri, eps_dual) = thresholds(t, layer.numel(), topo, eps_abs, eps_rel);
            LayerResidual {
                layer: layer.name.clone(),
                r_intra: t.r_intra.sqrt(),
                s_intra: t.s_intra.sqrt(),
                r_inter: t.r_inter.sqrt(),
                s_inter: t.s_inter.sqrt(),
                r_pri: (t.r_intra + t.r_inter).sqrt(),
                r_dual: (t.s_intra + t.s_inter).sqrt(),
                eps_pri,
                eps_dual,
                rho1: sched.rho1[j],
                rho2: sched.rho2[j],
            }
        })
        .collect();
    let (eps_pri, eps_dual) = thresholds(&total, total_n, topo, eps_abs, eps_rel);
    ResidualReport {
        layers: per_layer,
        r_pri: (total.r_intra + total.r_inter).sqrt(),
        r_dual: (total.s_intra + total.s_inter).sqrt(),
        eps_pri,
        eps_dual,
        ranks,
    }
}

fn balance(rho: f64, r: f64, s: f64, sched: &PenaltySchedule, cap: f64) -> f64 {
    if r > sched.mu * s {
        (sched.tau_inc * rho).min(cap)
    } else if s > sched.mu * r {
        rho / sched.tau_dec
    } else {
        rho
    }
}

/// Residual balancing per layer and level.
pub fn adapt_penalties(report: &ResidualReport, sched: &PenaltySchedule) -> PenaltySchedule {
    let mut next = sched.clone();
    for (j, l) in report.layers.iter().enumerate() {
        next.rho1[j] = balance(sched.rho1[j], l.r_intra, l.s_intra, sched, sched.rho1_max);
        next.rho2[j] = balance(sched.rho2[j], l.r_inter, l.s_inter, sched, sched.rho2_max);
    }
    next
}

/// Tracks mask drift and decides when to freeze.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezeMonitor {
    pub t_freeze: usize,
    pub window: usize,
    pub tolerance: f64,
    pub stable: usize,
    pub frozen: bool,
}

impl FreezeMonitor {
    pub fn new(t_freeze: usize, window: usize, tolerance: f64) -> Self {
        Self { t_freeze, window, tolerance, stable: 0, frozen: false }
    }

    /// Feeds the drift observed at iteration `k`. Once frozen, stays frozen.
    pub fn observe(&mut self, k: usize, drift: f64) -> bool {
        if self.frozen {
            return true;
        }
        self.stable = if drift <= self.tolerance { self.stable + 1 } else { 0 };
        self.frozen = k >= self.t_freeze || self.stable >= self.window;
        self.frozen
    }
}

/// Fraction of differing bits over all given mask pairs; 0 for none.
pub fn aggregate_drift(prev: &[SparsityMask], cur: &[SparsityMask]) -> Result<f64> {
    let mut diff = 0.0;
    let mut total = 0usize;
    for (a, b) in prev.iter().zip(cur) {
        diff += crate::sparsity::mask_drift(a, b)? * a.len() as f64;
        total += a.len();
    }
    Ok(if total == 0 { 0.0 } else { diff / total as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Hsadmm,
    Dense,
    Topk,
    Flat,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Algorithm::Hsadmm => "hsadmm",
            Algorithm::Dense => "dense",
            Algorithm::Topk => "topk",
            Algorithm::Flat => "flat",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hsadmm" => Ok(Algorithm::Hsadmm),
            "dense" => Ok(Algorithm::Dense),
            "topk" => Ok(Algorithm::Topk),
            "flat" => Ok(Algorithm::Flat),
            other => Err(config_err!("unknown algorithm {other:?}; use dense, topk, flat or hsadmm")),
        }
    }
}

/// One metrics line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub algorithm: Algorithm,
    pub loss: f64,
    pub residuals: Option<ResidualReport>,
    pub mask_drift: f64,
    pub frozen: bool,
    pub synced: bool,
    pub inter_bytes: u64,
    pub intra_bytes: u64,
    pub world_bytes: u64,
    pub latency_s: f64,
    pub keep_derivations: u64,
    pub keep_hits: u64,
    pub converged: bool,
}

/// Per-rank bytes of iteration `k` by scope, and the modeled latency.
pub fn iteration_traffic(ledger: &CommLedger, k: usize) -> (u64, u64, u64, f64) {
    let mut out = (0, 0, 0, 0.0);
    for e in ledger.iter_entries(k) {
        match e.scope {
            Scope::Inter => out.0 += e.bytes,
            Scope::Intra => out.1 += e.bytes,
            Scope::World => out.2 += e.bytes,
        }
        out.3 += e.latency_s;
    }
    out
}

/// Common driver interface of the algorithm and its baselines.
pub trait Trainer {
    fn algorithm(&self) -> Algorithm;
    /// Record of the initial state, before any training.
    fn initial_record(&self) -> IterationRecord;
    fn step(&mut self) -> Result<IterationRecord>;
    fn ledger(&self) -> &CommLedger;
    fn layers(&self) -> &[LayerSpec];
    /// The model a user would deploy: the global consensus or rank 0's copy.
    fn params(&self) -> &[DenseTensor];
    /// Per-layer global masks; all ones where nothing is pruned.
    fn masks(&self) -> Vec<SparsityMask>;
    /// Full state for diagnostics after a failure.
    fn dump(&self) -> Result<serde_json::Value>;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparsity::project;
    use crate::tensor::LayerSpec;

    fn t(shape: &[usize], v: &[f64]) -> DenseTensor {
        DenseTensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn gamma_by_hand() {
        let g = gamma(1.5e-3, 1.5e-4, 1e-4, 2, 2).unwrap();
        assert!((g - 3.2e-3).abs() < 1e-15);
        assert!(matches!(gamma(0.0, 0.0, 0.0, 1, 1), Err(Error::Config(_))));
    }

    #[test]
    fn candidate_degenerates_to_local() {
        let s = t(&[3], &[1.0, -2.0, 0.5]);
        let z = t(&[3], &[9.0, 9.0, 9.0]);
        let c = node_candidate(&s, &z, &z, 0.7, 0.0, 0.0, 1, 1).unwrap();
        assert_eq!(c, s);
    }

    #[test]
    fn candidate_of_equal_inputs_scales() {
        let tt = t(&[2, 2], &[1.0, 2.0, -3.0, 0.25]);
        let (p, rho1, rho2, lambda, m) = (3, 0.4, 0.1, 0.05, 2);
        let sum = tt.scale(p as f64);
        let zero = DenseTensor::zeros(&[2, 2]);
        let c = node_candidate(&sum, &tt, &zero, rho1, rho2, lambda, m, p).unwrap();
        let g = gamma(rho1, rho2, lambda, m, p).unwrap();
        let f = (p as f64 * rho1 + rho2) / g;
        for (a, b) in c.data().iter().zip(tt.data()) {
            assert!((a - f * b).abs() < 1e-14);
        }
    }

    #[test]
    fn node_update_modes() {
        let cand = DenseTensor::from_fn(&[4, 2, 1, 1], |i| i as f64 - 3.5);
        let ones = SparsityMask::ones(cand.shape());
        let (z, m) = update_node_consensus(&cand, &[], Some(&ones), true).unwrap();
        assert_eq!((z, m), (cand.clone(), None));
        let (z, m) = update_node_consensus(&cand, &[], None, false).unwrap();
        assert_eq!(z, cand);
        assert!(m.unwrap().is_all_ones());
        let c = SparsityConstraint::filter_keep(2);
        let (z, m) = update_node_consensus(&cand, &[c], None, false).unwrap();
        assert_eq!(z, project(&cand, &c).unwrap());
        assert_eq!(m.unwrap(), extract_mask(&z));
        assert!(matches!(update_node_consensus(&cand, &[c], None, true), Err(Error::Protocol(_))));
    }

    fn bitmask(bits: &[u8]) -> SparsityMask {
        SparsityMask::new(vec![bits.len()], bits.iter().map(|&b| b == 1).collect()).unwrap()
    }

    #[test]
    fn mask_union() {
        let topo = Topology::new(2, 1).unwrap();
        let mut c = Cluster::new(topo);
        let names = vec!["w".to_string()];
        let got = sync_masks(&mut c, &topo.inter_group(), &[vec![bitmask(&[1, 0, 0])], vec![bitmask(&[0, 0, 1])]], &names).unwrap();
        assert_eq!(got, vec![bitmask(&[1, 0, 1])]);

        let single = Topology::new(1, 2).unwrap();
        let mut c1 = Cluster::new(single);
        let got = sync_masks(&mut c1, &single.inter_group(), &[vec![bitmask(&[0, 1, 1])]], &names).unwrap();
        assert_eq!(got, vec![bitmask(&[0, 1, 1])]);

        let err = sync_masks(&mut c, &topo.inter_group(), &[vec![bitmask(&[1, 0])], vec![bitmask(&[0, 0, 1])]], &names);
        assert!(matches!(err, Err(Error::Protocol(_))));
    }

    #[test]
    fn union_covers_every_member() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let topo = Topology::new(4, 1).unwrap();
        for _ in 0..20 {
            let local: Vec<Vec<SparsityMask>> = (0..4)
                .map(|_| vec![SparsityMask::new(vec![16], (0..16).map(|_| rng.random_bool(0.3)).collect()).unwrap()])
                .collect();
            let mut c = Cluster::new(topo);
            let m = sync_masks(&mut c, &topo.inter_group(), &local, &["w".into()]).unwrap();
            let max = local.iter().map(|l| l[0].popcount()).max().unwrap();
            assert!(m[0].popcount() >= max);
        }
    }

    fn conv_layer() -> LayerSpec {
        LayerSpec::conv("c", [2, 2, 1, 1])
    }

    #[test]
    fn inter_consensus_averages_kept_entries() {
        let topo = Topology::new(2, 1).unwrap();
        let mut c = Cluster::new(topo);
        let layer = conv_layer();
        let keep = KeepIndexSets { layer: "c".into(), dims: [2, 2, 1, 1], k_out: vec![0, 1], k_in: vec![1] };
        let z_node = vec![vec![t(&[2, 2, 1, 1], &[0.0, 1.0, 0.0, 5.0])], vec![t(&[2, 2, 1, 1], &[0.0, 3.0, 0.0, 7.0])]];
        let mut v = vec![vec![DenseTensor::zeros(&[2, 2, 1, 1])]; 2];
        let keeps = vec![vec![Some(keep.clone())]; 2];
        let out = inter_node_consensus(&mut c, &topo.inter_group(), &[layer.clone()], &z_node, &mut v, &keeps).unwrap();
        assert_eq!(out.z[0].data(), &[0.0, 2.0, 0.0, 6.0]);
        assert_eq!(v[0][0].data(), &[0.0, -1.0, 0.0, -1.0]);
        assert_eq!(v[1][0].data(), &[0.0, 1.0, 0.0, 1.0]);
        let e = &c.ledger().entries()[0];
        assert_eq!(e.bytes, 2 * 4);
        assert_eq!(e.dense_bytes, 4 * 4);

        let mut other = keep.clone();
        other.k_in = vec![0];
        let bad = vec![vec![Some(keep)], vec![Some(other)]];
        let err = inter_node_consensus(&mut c, &topo.inter_group(), &[layer], &z_node, &mut v, &bad);
        assert!(matches!(err, Err(Error::Protocol(_))));
    }

    #[test]
    fn single_node_consensus_is_identity_with_zero_dual() {
        let topo = Topology::new(1, 1).unwrap();
        let mut c = Cluster::new(topo);
        let layer = conv_layer();
        let z_node = vec![vec![t(&[2, 2, 1, 1], &[1.0, 0.0, 2.0, 0.0])]];
        let mut v = vec![vec![DenseTensor::zeros(&[2, 2, 1, 1])]];
        let keep = KeepIndexSets { layer: "c".into(), dims: [2, 2, 1, 1], k_out: vec![0, 1], k_in: vec![0] };
        let out = inter_node_consensus(&mut c, &topo.inter_group(), &[layer], &z_node, &mut v, &[vec![Some(keep)]]).unwrap();
        assert_eq!(out.z[0], z_node[0][0]);
        assert_eq!(v[0][0], DenseTensor::zeros(&[2, 2, 1, 1]));
    }

    #[test]
    fn intra_dual_recurrence() {
        let z = t(&[2], &[1.0, 2.0]);
        let u0 = t(&[2], &[0.5, 0.5]);
        assert_eq!(dual_update_intra(&z, &z, &u0).unwrap(), u0);
        let th = t(&[2], &[1.5, 1.0]);
        let zero = DenseTensor::zeros(&[2]);
        assert_eq!(dual_update_intra(&th, &z, &zero).unwrap().data(), &[0.5, -1.0]);
        let mut u = zero;
        for _ in 0..5 {
            u = dual_update_intra(&th, &z, &u).unwrap();
        }
        assert_eq!(u.data(), &[2.5, -5.0]);
    }

    #[test]
    fn consensus_state_has_zero_residuals() {
        let a = t(&[3], &[1.0, -1.0, 2.0]);
        let zero = DenseTensor::zeros(&[3]);
        let x = ResidualInputs {
            theta: &a,
            u: &zero,
            z_node: &a,
            z_node_prev: &a,
            v: &zero,
            z: &a,
            z_prev: &a,
            rho1: 1.0,
            rho2: 1.0,
            leader: true,
        };
        let (terms, own) = residual_terms(&x);
        assert_eq!(own, [0.0; 4]);
        let topo = Topology::new(1, 1).unwrap();
        let sched = PenaltySchedule::uniform(&PenaltyConfig::default(), 1);
        let r = compute_residuals(&[terms], &[LayerSpec::bias("b", 3)], &topo, &sched, 1e-4, 1e-3, vec![]);
        assert_eq!((r.r_pri, r.r_dual), (0.0, 0.0));
        assert!(r.converged());
        assert!(r.eps_pri > 0.0);
    }

    fn report(r_intra: f64, s_intra: f64) -> ResidualReport {
        ResidualReport {
            layers: vec![LayerResidual {
                layer: "w".into(),
                r_intra,
                s_intra,
                r_inter: 1.0,
                s_inter: 1.0,
                r_pri: 0.0,
                r_dual: 0.0,
                eps_pri: 0.0,
                eps_dual: 0.0,
                rho1: 0.0,
                rho2: 0.0,
            }],
            ..ResidualReport::default()
        }
    }

    #[test]
    fn residual_balancing() {
        let mut sched = PenaltySchedule::uniform(&PenaltyConfig::default(), 1);
        sched.rho1 = vec![8.0];
        assert_eq!(adapt_penalties(&report(1.0, 1.0), &sched).rho1, vec![8.0]);
        assert_eq!(adapt_penalties(&report(10.0, 1.0), &sched).rho1, vec![8.0]);
        assert_eq!(adapt_penalties(&report(10.5, 1.0), &sched).rho1, vec![10.0]);
        assert_eq!(adapt_penalties(&report(1.0, 11.0), &sched).rho1, vec![4.0]);
        assert_eq!(adapt_penalties(&report(1.0, 1.0), &sched).rho2, sched.rho2);
    }

    #[test]
    fn dual_rescaling_keeps_unscaled_dual() {
        let mut u = t(&[2], &[1.0, -2.0]);
        let y = u.scale(4.0);
        rescale_dual(&mut u, 4.0, 8.0);
        assert_eq!(u.scale(8.0), y);
    }

    #[test]
    fn freeze_rules() {
        let mut f = FreezeMonitor::new(10, 3, 0.0);
        assert!(!f.observe(1, 0.1));
        assert!(!f.observe(2, 0.0));
        assert!(!f.observe(3, 0.0));
        assert!(f.observe(4, 0.0));

        let mut g = FreezeMonitor::new(5, 3, 0.0);
        for k in 1..5 {
            assert!(!g.observe(k, 0.1));
        }
        assert!(g.observe(5, 0.1));
        assert!(g.observe(6, 0.5));
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in [Algorithm::Hsadmm, Algorithm::Dense, Algorithm::Topk, Algorithm::Flat] {
            assert_eq!(a.to_string().parse::<Algorithm>().unwrap(), a);
        }
        assert!("ddp".parse::<Algorithm>().is_err());
    }
}
