//! Comparison systems on the same transport and workloads: dense gradient
//! averaging, top-k sparsified gradients with error feedback, and flat
//! single-level consensus ADMM.

use serde::{Deserialize, Serialize};

use crate::consensus::{
    adapt_penalties, aggregate_drift, compute_residuals, dual_update_intra, iteration_traffic,
    node_candidate, rescale_dual, residual_terms, update_node_consensus, Algorithm, FreezeMonitor,
    HsAdmmConfig, IterationRecord, PenaltySchedule, RankResidual, ResidualInputs, ResidualReport,
    ResidualTerms, Trainer,
};
use crate::error::{config_err, protocol, Error, Result};
use crate::exec;
use crate::sparsity::SparsityMask;
use crate::tensor::{DenseTensor, LayerSpec};
use crate::transport::{Cluster, CommLedger, LayerVolume, Payload, Purpose, ReduceOp, Tag};
use crate::workloads::{derive_seed, epoch_batches, proximal_sgd, ProxAnchor, Workload};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BaselineKind {
    DenseSync,
    TopK { rate: f64 },
    FlatConsensus,
}

impl BaselineKind {
    pub fn validate(&self) -> Result<()> {
        if let BaselineKind::TopK { rate } = self {
            if !(*rate > 0.0 && *rate <= 1.0) {
                return Err(config_err!("top-k rate must be in (0, 1], got {rate}"));
            }
        }
        Ok(())
    }
}

/// Entries a top-k step sends for a layer of `n` elements: `⌈rate·n⌉`, at
/// least one.
pub fn topk_count(rate: f64, n: usize) -> usize {
    ((rate * n as f64).ceil() as usize).clamp(1, n)
}

/// Selects the `k` largest-magnitude entries (ties to the lower index).
/// Returns `(indices, values)` in index order and zeroes them in `acc`,
/// which keeps the untransmitted remainder.
pub fn select_top_k(acc: &mut [f64], k: usize) -> (Vec<usize>, Vec<f64>) {
    let scores: Vec<f64> = acc.iter().map(|v| v.abs()).collect();
    let keep = crate::sparsity::top_k_membership(&scores, k);
    let mut idx = Vec::with_capacity(k);
    let mut vals = Vec::with_capacity(k);
    for (i, &b) in keep.iter().enumerate() {
        if b {
            idx.push(i);
            vals.push(acc[i]);
            acc[i] = 0.0;
        }
    }
    (idx, vals)
}

fn layer_volumes(layers: &[LayerSpec]) -> Vec<LayerVolume> {
    layers.iter().map(|l| LayerVolume { layer: l.name.clone(), elements: l.numel() }).collect()
}

/// Rank 0 broadcasts the initial parameters to everyone (iteration 0).
fn distribute_init(cluster: &mut Cluster, wl: &Workload, seed: u64) -> Result<Vec<Vec<DenseTensor>>> {
    let layers = wl.layers();
    let init = wl.init_params(seed);
    let data: Vec<f64> = init.iter().flat_map(|t| t.data().iter().copied()).collect();
    let world = cluster.topology().world_group();
    cluster.set_iteration(0);
    let copies = cluster.broadcast(
        &world,
        0,
        Payload::Real(DenseTensor::new(vec![data.len()], data)?),
        Tag::dense(Purpose::Params, layer_volumes(layers)),
    )?;
    copies
        .into_iter()
        .map(|p| {
            let flat = p.into_real()?;
            let mut offset = 0;
            layers
                .iter()
                .map(|l| {
                    let n = l.numel();
                    let t = DenseTensor::new(l.shape.clone(), flat.data()[offset..offset + n].to_vec());
                    offset += n;
                    t
                })
                .collect()
        })
        .collect()
}

fn empty_record(algorithm: Algorithm, k: usize) -> IterationRecord {
    IterationRecord {
        k,
        algorithm,
        loss: 0.0,
        residuals: None,
        mask_drift: 0.0,
        frozen: false,
        synced: true,
        inter_bytes: 0,
        intra_bytes: 0,
        world_bytes: 0,
        latency_s: 0.0,
        keep_derivations: 0,
        keep_hits: 0,
        converged: false,
    }
}

fn fill_traffic(rec: &mut IterationRecord, ledger: &CommLedger) {
    let (inter, intra, world, latency) = iteration_traffic(ledger, rec.k);
    rec.inter_bytes = inter;
    rec.intra_bytes = intra;
    rec.world_bytes = world;
    rec.latency_s = latency;
}

fn bit_equal(a: &[DenseTensor], b: &[DenseTensor]) -> bool {
    a.iter()
        .zip(b)
        .all(|(x, y)| x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()))
}

/// Data-parallel SGD. With `top_k = None` every step averages full
/// gradients; otherwise each rank sends only its top entries per layer and
/// keeps the rest as error feedback.
pub struct GradientSync<'w> {
    workload: &'w Workload,
    cfg: HsAdmmConfig,
    top_k: Option<f64>,
    cluster: Cluster,
    params: Vec<Vec<DenseTensor>>,
    velocity: Vec<Vec<DenseTensor>>,
    residual: Vec<Vec<DenseTensor>>,
    k: usize,
    initial: IterationRecord,
}

impl<'w> GradientSync<'w> {
    pub fn dense(workload: &'w Workload, cfg: HsAdmmConfig) -> Result<Self> {
        Self::build(workload, cfg, None)
    }

    pub fn top_k(workload: &'w Workload, cfg: HsAdmmConfig, rate: f64) -> Result<Self> {
        BaselineKind::TopK { rate }.validate()?;
        Self::build(workload, cfg, Some(rate))
    }

    fn build(workload: &'w Workload, cfg: HsAdmmConfig, top_k: Option<f64>) -> Result<Self> {
        cfg.solver.validate()?;
        cfg.params.validate()?;
        if cfg.topology.world_size() != workload.shards().len() {
            return Err(config_err!("topology does not match the workload's shard count"));
        }
        let mut cluster = Cluster::with_latency(cfg.topology, cfg.latency);
        let params = distribute_init(&mut cluster, workload, cfg.seed)?;
        let zeros: Vec<DenseTensor> = params[0].iter().map(|t| DenseTensor::zeros(t.shape())).collect();
        let n = params.len();
        let algorithm = if top_k.is_some() { Algorithm::Topk } else { Algorithm::Dense };
        let mut initial = empty_record(algorithm, 0);
        fill_traffic(&mut initial, cluster.ledger());
        Ok(Self {
            workload,
            cfg,
            top_k,
            cluster,
            params,
            velocity: vec![zeros.clone(); n],
            residual: vec![zeros; n],
            k: 0,
            initial,
        })
    }

    pub fn rank_params(&self, rank: usize) -> &[DenseTensor] {
        &self.params[rank]
    }

    /// Error-feedback buffer of one rank.
    pub fn residual(&self, rank: usize) -> &[DenseTensor] {
        &self.residual[rank]
    }

    /// One optimizer step on the given per-rank batches.
    pub fn sgd_step(&mut self, batches: &[Vec<usize>]) -> Result<f64> {
        let wl = self.workload;
        let layers = wl.layers();
        let results = exec::map(self.cfg.exec, &self.params, |r, p| wl.loss_and_grad(p, wl.shard(r), &batches[r]));
        let mut grads = Vec::with_capacity(results.len());
        let mut loss = 0.0;
        for res in results {
            let (l, g) = res?;
            loss += l;
            grads.push(g);
        }
        let world = self.cluster.topology().world_group();
        let avg: Vec<DenseTensor> = match self.top_k {
            None => {
                let names: Vec<String> = layers.iter().map(|l| l.name.clone()).collect();
                let dense: Vec<usize> = layers.iter().map(LayerSpec::numel).collect();
                let items = grads.into_iter().map(|g| g.into_iter().map(DenseTensor::into_data).collect()).collect();
                let red = self.cluster.all_reduce_flat(&world, items, &names, &dense, ReduceOp::Avg, Purpose::Gradients)?;
                layers.iter().zip(red).map(|(l, d)| DenseTensor::new(l.shape.clone(), d)).collect::<Result<_>>()?
            }
            Some(rate) => self.exchange_top_k(grads, rate)?,
        };
        let solver = &self.cfg.solver;
        for (w, vel) in self.params.iter_mut().zip(self.velocity.iter_mut()) {
            for j in 0..layers.len() {
                let (wd, gd) = (w[j].data_mut(), avg[j].data());
                for ((wv, vv), &g) in wd.iter_mut().zip(vel[j].data_mut()).zip(gd) {
                    let g = g + solver.weight_decay * *wv;
                    *vv = solver.momentum * *vv + g;
                    *wv -= solver.lr * *vv;
                }
            }
        }
        for (r, w) in self.params.iter().enumerate().skip(1) {
            if !bit_equal(w, &self.params[0]) {
                return Err(protocol!("rank {r} parameters diverged from rank 0"));
            }
        }
        Ok(loss / self.params.len() as f64)
    }

    fn exchange_top_k(&mut self, grads: Vec<Vec<DenseTensor>>, rate: f64) -> Result<Vec<DenseTensor>> {
        let layers = self.workload.layers();
        let counts: Vec<usize> = layers.iter().map(|l| topk_count(rate, l.numel())).collect();
        let mut payloads = Vec::with_capacity(grads.len());
        for (r, g) in grads.into_iter().enumerate() {
            let mut pairs = Vec::with_capacity(2 * counts.iter().sum::<usize>());
            for (j, gj) in g.into_iter().enumerate() {
                let mut acc = gj.into_data();
                for (a, e) in acc.iter_mut().zip(self.residual[r][j].data()) {
                    *a += e;
                }
                let (idx, vals) = select_top_k(&mut acc, counts[j]);
                for (i, v) in idx.into_iter().zip(vals) {
                    pairs.push(v);
                    pairs.push(i as f64);
                }
                self.residual[r][j] = DenseTensor::new(layers[j].shape.clone(), acc)?;
            }
            payloads.push(Payload::Real(DenseTensor::new(vec![pairs.len()], pairs)?));
        }
        let world = self.cluster.topology().world_group();
        let volumes = layers
            .iter()
            .zip(&counts)
            .map(|(l, &c)| LayerVolume { layer: l.name.clone(), elements: c })
            .collect();
        let dense = layers.iter().map(LayerSpec::numel).sum();
        let gathered = self
            .cluster
            .all_gather(&world, payloads, Tag::value_index(Purpose::Gradients, volumes, dense))?;
        // rank 0's entries are scattered first, the others added in rank order
        let mut sum: Vec<DenseTensor> = layers.iter().map(|l| DenseTensor::zeros(&l.shape)).collect();
        for (r, p) in gathered.into_iter().enumerate() {
            let t = p.into_real()?;
            let mut pairs = t.data().chunks_exact(2);
            for (j, &c) in counts.iter().enumerate() {
                let dst = sum[j].data_mut();
                for _ in 0..c {
                    let pr = pairs.next().ok_or_else(|| protocol!("short top-k payload from rank {r}"))?;
                    let i = pr[1] as usize;
                    if i >= dst.len() {
                        return Err(protocol!("rank {r} sent index {i} outside layer {}", layers[j].name));
                    }
                    if r == 0 {
                        dst[i] = pr[0];
                    } else {
                        dst[i] += pr[0];
                    }
                }
            }
        }
        let n = self.params.len() as f64;
        for t in &mut sum {
            t.data_mut().iter_mut().for_each(|v| *v /= n);
        }
        Ok(sum)
    }

    /// `E` epochs of steps; ranks shuffle their own shards.
    pub fn step(&mut self) -> Result<IterationRecord> {
        let k = self.k + 1;
        self.cluster.set_iteration(k);
        let (rows, batch) = (self.workload.shard(0).rows, self.cfg.solver.batch_size);
        let mut loss = 0.0;
        for epoch in 0..self.cfg.solver.epochs {
            let per_rank: Vec<Vec<Vec<usize>>> = (0..self.params.len())
                .map(|r| epoch_batches(rows, batch, derive_seed(self.cfg.seed, &[r as u64, k as u64, epoch as u64])))
                .collect();
            let steps = per_rank[0].len();
            loss = 0.0;
            for s in 0..steps {
                let batches: Vec<Vec<usize>> = per_rank.iter().map(|b| b[s].clone()).collect();
                loss += self.sgd_step(&batches)?;
            }
            loss /= steps as f64;
        }
        if let Some(j) = self.params[0].iter().position(|t| !t.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite parameters in layer {} at iteration {k}",
                self.workload.layers()[j].name
            )));
        }
        self.k = k;
        let mut rec = empty_record(self.algorithm(), k);
        rec.loss = loss;
        fill_traffic(&mut rec, self.cluster.ledger());
        Ok(rec)
    }
}

impl Trainer for GradientSync<'_> {
    fn algorithm(&self) -> Algorithm {
        if self.top_k.is_some() {
            Algorithm::Topk
        } else {
            Algorithm::Dense
        }
    }

    fn initial_record(&self) -> IterationRecord {
        self.initial.clone()
    }

    fn step(&mut self) -> Result<IterationRecord> {
        GradientSync::step(self)
    }

    fn ledger(&self) -> &CommLedger {
        self.cluster.ledger()
    }

    fn layers(&self) -> &[LayerSpec] {
        self.workload.layers()
    }

    fn params(&self) -> &[DenseTensor] {
        &self.params[0]
    }

    fn masks(&self) -> Vec<SparsityMask> {
        self.params[0].iter().map(|t| SparsityMask::ones(t.shape())).collect()
    }

    fn dump(&self) -> Result<serde_json::Value> {
        Ok(serde_json::json!({ "k": self.k, "params": self.params, "residual": self.residual }))
    }
}

/// Flat consensus state; the global `z` is replicated on every rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatState {
    pub k: usize,
    pub theta: Vec<Vec<DenseTensor>>,
    pub u: Vec<Vec<DenseTensor>>,
    pub z: Vec<DenseTensor>,
    pub masks: Vec<SparsityMask>,
    pub schedule: PenaltySchedule,
    pub freeze: FreezeMonitor,
    pub loss: f64,
}

/// Single-level consensus ADMM over one world group. Every rank sends its
/// dense `θ + u`; projection happens after aggregation.
pub struct FlatConsensus<'w> {
    workload: &'w Workload,
    cfg: HsAdmmConfig,
    cluster: Cluster,
    state: FlatState,
    initial: IterationRecord,
}

impl<'w> FlatConsensus<'w> {
    /// Uses `penalty.rho1` as the single penalty; `rho2` is ignored.
    pub fn new(workload: &'w Workload, cfg: HsAdmmConfig) -> Result<Self> {
        cfg.validate(workload.layers(), workload.shards().len())?;
        let mut cluster = Cluster::with_latency(cfg.topology, cfg.latency);
        let theta = distribute_init(&mut cluster, workload, cfg.seed)?;
        let layers = workload.layers();
        let mut schedule = PenaltySchedule::uniform(&cfg.penalty, layers.len());
        schedule.rho2 = vec![0.0; layers.len()];
        let zeros: Vec<DenseTensor> = theta[0].iter().map(|t| DenseTensor::zeros(t.shape())).collect();
        let state = FlatState {
            k: 0,
            u: vec![zeros; theta.len()],
            z: theta[0].clone(),
            masks: theta[0].iter().map(|t| SparsityMask::ones(t.shape())).collect(),
            theta,
            schedule,
            freeze: FreezeMonitor::new(cfg.params.t_freeze, cfg.params.drift_window, cfg.params.drift_tolerance),
            loss: 0.0,
        };
        let mut me = Self { workload, cfg, cluster, state, initial: empty_record(Algorithm::Flat, 0) };
        let z = me.state.z.clone();
        let report = me.residuals(&z)?;
        let mut initial = empty_record(Algorithm::Flat, 0);
        initial.residuals = Some(report);
        fill_traffic(&mut initial, me.cluster.ledger());
        me.initial = initial;
        Ok(me)
    }

    pub fn state(&self) -> &FlatState {
        &self.state
    }

    fn residuals(&mut self, z_prev: &[DenseTensor]) -> Result<ResidualReport> {
        let layers = self.workload.layers();
        let topo = *self.cluster.topology();
        let zero: Vec<DenseTensor> = layers.iter().map(|l| DenseTensor::zeros(&l.shape)).collect();
        let st = &self.state;
        let mut payloads = Vec::new();
        let mut ranks = Vec::new();
        for r in 0..st.theta.len() {
            let mut packed = Vec::new();
            for (j, layer) in layers.iter().enumerate() {
                let (terms, own) = residual_terms(&ResidualInputs {
                    theta: &st.theta[r][j],
                    u: &st.u[r][j],
                    z_node: &st.z[j],
                    z_node_prev: &z_prev[j],
                    v: &zero[j],
                    z: &st.z[j],
                    z_prev: &z_prev[j],
                    rho1: st.schedule.rho1[j],
                    rho2: 0.0,
                    leader: r == 0,
                });
                packed.extend_from_slice(&terms.to_array());
                ranks.push(RankResidual {
                    rank: r,
                    layer: layer.name.clone(),
                    r_intra: own[0],
                    s_intra: own[1],
                    r_inter: 0.0,
                    s_inter: 0.0,
                });
            }
            payloads.push(Payload::Real(DenseTensor::new(vec![packed.len()], packed)?));
        }
        let n = layers.len() * ResidualTerms::WIDTH;
        let sums = self
            .cluster
            .all_reduce(&topo.world_group(), payloads, ReduceOp::Sum, Tag::residuals(n))?
            .swap_remove(0)
            .into_real()?;
        let terms: Vec<ResidualTerms> = sums.data().chunks(ResidualTerms::WIDTH).map(ResidualTerms::from_slice).collect();
        let flat_topo = crate::transport::Topology::new(1, topo.world_size())?;
        Ok(compute_residuals(
            &terms,
            layers,
            &flat_topo,
            &self.state.schedule,
            self.cfg.params.eps_abs,
            self.cfg.params.eps_rel,
            ranks,
        ))
    }

    pub fn step(&mut self) -> Result<IterationRecord> {
        let k = self.state.k + 1;
        self.cluster.set_iteration(k);
        let wl = self.workload;
        let layers = wl.layers();
        let n = self.state.theta.len();
        let frozen = self.state.freeze.frozen;
        let rho = self.state.schedule.rho1.clone();
        let (solver, seed) = (&self.cfg.solver, self.cfg.seed);
        let z = &self.state.z;
        let u = &self.state.u;
        let trained = exec::map(self.cfg.exec, &self.state.theta, |r, th| {
            let anchor = ProxAnchor { z, u: &u[r], rho: &rho };
            proximal_sgd(wl, wl.shard(r), th, Some(anchor), solver, derive_seed(seed, &[r as u64, k as u64]))
        });
        let mut loss = 0.0;
        for (r, res) in trained.into_iter().enumerate() {
            let (th, l) = res.map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("rank {r}, iteration {k}: {m}")),
                other => other,
            })?;
            self.state.theta[r] = th;
            loss += l;
        }
        self.state.loss = loss / n as f64;

        let world = self.cluster.topology().world_group();
        let names: Vec<String> = layers.iter().map(|l| l.name.clone()).collect();
        let dense: Vec<usize> = layers.iter().map(LayerSpec::numel).collect();
        let items = self
            .state
            .theta
            .iter()
            .zip(&self.state.u)
            .map(|(th, u)| th.iter().zip(u).map(|(t, u)| t.add(u).map(DenseTensor::into_data)).collect())
            .collect::<Result<Vec<Vec<Vec<f64>>>>>()?;
        let sums = self.cluster.all_reduce_flat(&world, items, &names, &dense, ReduceOp::Sum, Purpose::Params)?;

        let z_prev = self.state.z.clone();
        let prev_masks = self.state.masks.clone();
        let lambda = self.cfg.solver.weight_decay;
        for (j, layer) in layers.iter().enumerate() {
            let sum = DenseTensor::new(layer.shape.clone(), sums[j].clone())?;
            let zero = DenseTensor::zeros(&layer.shape);
            let cand = node_candidate(&sum, &z_prev[j], &zero, rho[j], 0.0, lambda, 1, n)?;
            let (zj, mj) = update_node_consensus(&cand, &self.cfg.constraints[j], Some(&self.state.masks[j]), frozen)?;
            self.state.z[j] = zj;
            if let Some(m) = mj {
                self.state.masks[j] = m;
            }
        }
        for r in 0..n {
            for j in 0..layers.len() {
                self.state.u[r][j] = dual_update_intra(&self.state.theta[r][j], &self.state.z[j], &self.state.u[r][j])?;
            }
        }
        let report = self.residuals(&z_prev)?;
        if self.cfg.penalty.adaptive {
            let next = adapt_penalties(&report, &self.state.schedule);
            for u in self.state.u.iter_mut() {
                for j in 0..layers.len() {
                    rescale_dual(&mut u[j], self.state.schedule.rho1[j], next.rho1[j]);
                }
            }
            self.state.schedule = next;
        }
        let constrained: Vec<usize> = (0..layers.len()).filter(|&j| !self.cfg.constraints[j].is_empty()).collect();
        let mut drift = 0.0;
        if !frozen && !constrained.is_empty() {
            let a: Vec<SparsityMask> = constrained.iter().map(|&j| prev_masks[j].clone()).collect();
            let b: Vec<SparsityMask> = constrained.iter().map(|&j| self.state.masks[j].clone()).collect();
            drift = aggregate_drift(&a, &b)?;
        }
        if !frozen {
            self.state.freeze.observe(k, drift);
        }
        for (r, th) in self.state.theta.iter().enumerate() {
            if let Some(j) = th.iter().chain(&self.state.u[r]).position(|t| !t.is_finite()) {
                return Err(Error::Numerical(format!("non-finite state on rank {r} (tensor {j}) at iteration {k}")));
            }
        }
        self.state.k = k;
        let converged = report.converged();
        let mut rec = empty_record(Algorithm::Flat, k);
        rec.loss = self.state.loss;
        rec.residuals = Some(report);
        rec.mask_drift = drift;
        rec.frozen = self.state.freeze.frozen;
        rec.converged = converged;
        fill_traffic(&mut rec, self.cluster.ledger());
        Ok(rec)
    }
}

impl Trainer for FlatConsensus<'_> {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Flat
    }

    fn initial_record(&self) -> IterationRecord {
        self.initial.clone()
    }

    fn step(&mut self) -> Result<IterationRecord> {
        FlatConsensus::step(self)
    }

    fn ledger(&self) -> &CommLedger {
        self.cluster.ledger()
    }

    fn layers(&self) -> &[LayerSpec] {
        self.workload.layers()
    }

    fn params(&self) -> &[DenseTensor] {
        &self.state.z
    }

    fn masks(&self) -> Vec<SparsityMask> {
        self.state.masks.clone()
    }

    fn dump(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(&self.state)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::HsAdmm;
    use crate::sparsity::{ConstraintKind, SparsityConstraint};
    use crate::transport::{Encoding, Topology};
    use crate::workloads::{SolverConfig, WorkloadConfig, WorkloadKind};

    fn logistic(ranks: usize) -> Workload {
        let c = WorkloadConfig { kind: WorkloadKind::Logistic, samples_per_rank: 16, features: 6, ..WorkloadConfig::default() };
        Workload::generate(&c, ranks, 5).unwrap()
    }

    fn cfg(topo: Topology, layers: usize) -> HsAdmmConfig {
        let mut c = HsAdmmConfig::unconstrained(topo, layers);
        c.solver = SolverConfig { lr: 0.1, epochs: 2, batch_size: 4, momentum: 0.9, weight_decay: 1e-4 };
        c.params.max_iters = 3;
        c
    }

    #[test]
    fn hand_selection_with_error_feedback() {
        let mut acc = vec![3.0, -5.0, 1.0];
        let (idx, vals) = select_top_k(&mut acc, 1);
        assert_eq!((idx, vals), (vec![1], vec![-5.0]));
        assert_eq!(acc, vec![3.0, 0.0, 1.0]);
        let mut tie = vec![2.0, -2.0, 1.0];
        assert_eq!(select_top_k(&mut tie, 1).0, vec![0]);
        assert_eq!(topk_count(0.01, 50), 1);
        assert_eq!(topk_count(0.01, 1000), 10);
        assert_eq!(topk_count(1.0, 7), 7);
        assert!(BaselineKind::TopK { rate: 0.0 }.validate().is_err());
    }

    #[test]
    fn one_rank_dense_is_plain_sgd() {
        let wl = logistic(1);
        let c = cfg(Topology::new(1, 1).unwrap(), wl.layers().len());
        let mut d = GradientSync::dense(&wl, c.clone()).unwrap();
        let mut w = wl.init_params(c.seed);
        let mut vel: Vec<DenseTensor> = w.iter().map(|t| DenseTensor::zeros(t.shape())).collect();
        for k in 1..=2u64 {
            d.step().unwrap();
            for epoch in 0..2u64 {
                for rows in epoch_batches(16, 4, derive_seed(c.seed, &[0, k, epoch])) {
                    let (_, g) = wl.loss_and_grad(&w, wl.shard(0), &rows).unwrap();
                    for j in 0..w.len() {
                        for i in 0..w[j].len() {
                            let gi = g[j].data()[i] + 1e-4 * w[j].data()[i];
                            let v = 0.9 * vel[j].data()[i] + gi;
                            vel[j].data_mut()[i] = v;
                            w[j].data_mut()[i] -= 0.1 * v;
                        }
                    }
                }
            }
        }
        assert!(bit_equal(d.rank_params(0), &w));
        assert!(d.ledger().is_empty());
    }

    #[test]
    fn dense_bytes_are_parameter_count() {
        let wl = logistic(4);
        let mut d = GradientSync::dense(&wl, cfg(Topology::new(2, 2).unwrap(), 2)).unwrap();
        d.step().unwrap();
        let grads: Vec<_> = d.ledger().entries().iter().filter(|e| e.purpose == Purpose::Gradients).collect();
        assert_eq!(grads.len(), 2 * 4);
        assert!(grads.iter().all(|e| e.bytes == 7 * 4 && e.members == 4));
    }

    #[test]
    fn full_rate_top_k_tracks_dense_exactly() {
        let wl = logistic(4);
        let c = cfg(Topology::new(2, 2).unwrap(), 2);
        let mut d = GradientSync::dense(&wl, c.clone()).unwrap();
        let mut t = GradientSync::top_k(&wl, c, 1.0).unwrap();
        for _ in 0..3 {
            d.step().unwrap();
            t.step().unwrap();
            assert!(bit_equal(d.rank_params(0), t.rank_params(0)));
        }
        let e = t.ledger().entries().iter().find(|e| e.purpose == Purpose::Gradients).unwrap();
        assert_eq!(e.bytes, 7 * 8);
        assert!(t.residual(2).iter().all(|r| r.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn sparse_top_k_accounting() {
        let wl = logistic(2);
        let mut t = GradientSync::top_k(&wl, cfg(Topology::new(2, 1).unwrap(), 2), 0.01).unwrap();
        t.step().unwrap();
        let e = t.ledger().entries().iter().find(|e| e.purpose == Purpose::Gradients).unwrap();
        // one pair for the 6-wide weight and one for the bias
        assert_eq!((e.elements, e.bytes, e.dense_bytes), (2, 16, 28));
        assert_eq!(e.members, 2);
        assert_eq!(Encoding::ValueIndex.bytes_for(e.elements), e.bytes);
    }

    fn conv(ranks: usize) -> Workload {
        let c = WorkloadConfig {
            kind: WorkloadKind::TinyConvNet,
            samples_per_rank: 8,
            image_size: 4,
            input_channels: 4,
            conv_channels: vec![4],
            classes: 3,
            ..WorkloadConfig::default()
        };
        Workload::generate(&c, ranks, 9).unwrap()
    }

    #[test]
    fn flat_matches_single_node_hierarchy_without_inter_penalty() {
        let wl = conv(3);
        let mut c = cfg(Topology::new(1, 3).unwrap(), wl.layers().len());
        c.solver = SolverConfig { lr: 0.02, epochs: 1, batch_size: 4, momentum: 0.5, weight_decay: 1e-3 };
        c.constraints[0] = vec![SparsityConstraint::with_rate(ConstraintKind::ChannelKeep, 0.5)];
        c.penalty.rho1 = 0.3;
        c.penalty.rho2 = 0.0;
        c.params.t_freeze = 3;
        let mut flat = FlatConsensus::new(&wl, c.clone()).unwrap();
        let mut h = HsAdmm::new(&wl, c).unwrap();
        for _ in 0..6 {
            let a = flat.step().unwrap();
            let b = h.step().unwrap();
            assert_eq!(a.residuals.unwrap().r_pri, b.residuals.unwrap().r_pri);
            assert_eq!(a.frozen, b.frozen);
        }
        assert!(bit_equal(&flat.state().z, &h.state().ranks[0].z));
        let e = flat.ledger().entries().iter().rev().find(|e| e.purpose == Purpose::Params).unwrap();
        assert_eq!(e.bytes, e.dense_bytes);
    }

    #[test]
    fn flat_reaches_the_regularized_optimum() {
        let wc = WorkloadConfig { kind: WorkloadKind::Quadratic, samples_per_rank: 16, features: 4, ..WorkloadConfig::default() };
        let wl = Workload::generate(&wc, 2, 3).unwrap();
        let mut c = cfg(Topology::new(2, 1).unwrap(), 1);
        c.solver = SolverConfig { lr: 0.005, epochs: 5, batch_size: 16, momentum: 0.0, weight_decay: 0.1 };
        c.penalty.rho1 = 5.0;
        c.penalty.adaptive = false;
        let mut f = FlatConsensus::new(&wl, c).unwrap();
        for _ in 0..400 {
            f.step().unwrap();
        }
        let opt = wl.quadratic_optimum(0.1).unwrap();
        let st = f.state();
        let err = st.z[0].sub(&opt).unwrap().frobenius_norm();
        assert!(err < 1e-6, "{err}");
        for th in &st.theta {
            assert!(th[0].sub(&st.z[0]).unwrap().frobenius_norm() < 1e-6);
        }
    }
}
