use serde::{Deserialize, Serialize};

use super::{
    adapt_penalties, aggregate_drift, compute_residuals, dual_update_intra, inter_node_consensus,
    iteration_traffic, node_candidate, rescale_dual, residual_terms, restore, split_masks, sync_masks,
    update_node_consensus, Algorithm, ConsensusParams, FreezeMonitor, IterationRecord, PenaltyConfig,
    PenaltySchedule, RankResidual, ResidualInputs, ResidualReport, ResidualTerms, Trainer,
};
use crate::error::{config_err, protocol, Error, Result};
use crate::exec::{self, ExecMode};
use crate::shrinkage::{KeepCache, KeepIndexSets};
use crate::sparsity::{SparsityConstraint, SparsityMask};
use crate::tensor::{DenseTensor, LayerKind, LayerSpec};
use crate::transport::{
    Cluster, CommLedger, LatencyModel, LayerVolume, Payload, Purpose, ReduceOp, Tag, Topology,
};
use crate::workloads::{derive_seed, proximal_sgd, ProxAnchor, SolverConfig, Workload};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HsAdmmConfig {
    pub topology: Topology,
    pub solver: SolverConfig,
    pub penalty: PenaltyConfig,
    pub params: ConsensusParams,
    /// Constraints per layer in layer order; empty means dense.
    pub constraints: Vec<Vec<SparsityConstraint>>,
    pub seed: u64,
    pub exec: ExecMode,
    pub latency: LatencyModel,
}

impl HsAdmmConfig {
    /// Dense consensus with default knobs.
    pub fn unconstrained(topology: Topology, layers: usize) -> Self {
        Self {
            topology,
            solver: SolverConfig::default(),
            penalty: PenaltyConfig::default(),
            params: ConsensusParams::default(),
            constraints: vec![Vec::new(); layers],
            seed: 0,
            exec: ExecMode::default(),
            latency: LatencyModel::default(),
        }
    }

    pub fn validate(&self, layers: &[LayerSpec], shards: usize) -> Result<()> {
        self.solver.validate()?;
        self.penalty.validate()?;
        self.params.validate()?;
        if self.topology.world_size() != shards {
            return Err(config_err!(
                "topology has {} ranks but the workload has {shards} shards",
                self.topology.world_size()
            ));
        }
        if self.constraints.len() != layers.len() {
            return Err(config_err!("{} constraint lists for {} layers", self.constraints.len(), layers.len()));
        }
        for (layer, cs) in layers.iter().zip(&self.constraints) {
            if cs.is_empty() {
                continue;
            }
            if layer.kind != LayerKind::Conv {
                return Err(config_err!("layer {} is not a conv layer and cannot be constrained", layer.name));
            }
            let dims = layer.dims4()?;
            for c in cs {
                c.keep_count(dims).map_err(|e| config_err!("layer {}: {e}", layer.name))?;
            }
            for (i, c) in cs.iter().enumerate() {
                if cs[..i].iter().any(|d| d.kind == c.kind) {
                    return Err(config_err!("layer {} has two {:?} constraints", layer.name, c.kind));
                }
            }
        }
        Ok(())
    }
}

/// One rank's fragment. Node and global variables are replicas kept equal
/// only through collectives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankState {
    pub rank: usize,
    pub theta: Vec<DenseTensor>,
    pub u: Vec<DenseTensor>,
    pub z_node: Vec<DenseTensor>,
    pub v: Vec<DenseTensor>,
    pub z: Vec<DenseTensor>,
    /// Global mask per layer.
    pub masks: Vec<SparsityMask>,
    pub loss: f64,
}

/// Everything needed to resume a run; serializes to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusState {
    pub k: usize,
    pub ranks: Vec<RankState>,
    pub schedule: PenaltySchedule,
    pub freeze: FreezeMonitor,
    /// Compact element count per layer, fixed by the first frozen sync.
    pub frozen_counts: Option<Vec<usize>>,
}

impl ConsensusState {
    pub fn frozen(&self) -> bool {
        self.freeze.frozen
    }
}

pub struct HsAdmm<'w> {
    workload: &'w Workload,
    cfg: HsAdmmConfig,
    cluster: Cluster,
    state: ConsensusState,
    caches: Vec<KeepCache>,
    initial: IterationRecord,
}

fn bit_equal(a: &[DenseTensor], b: &[DenseTensor]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

fn flat_params(ts: &[DenseTensor]) -> Result<DenseTensor> {
    let data: Vec<f64> = ts.iter().flat_map(|t| t.data().iter().copied()).collect();
    DenseTensor::new(vec![data.len()], data)
}

fn unflatten(layers: &[LayerSpec], flat: &DenseTensor) -> Result<Vec<DenseTensor>> {
    let mut offset = 0;
    let mut out = Vec::with_capacity(layers.len());
    for l in layers {
        let n = l.numel();
        let chunk = flat
            .data()
            .get(offset..offset + n)
            .ok_or_else(|| protocol!("parameter payload too short"))?;
        out.push(DenseTensor::new(l.shape.clone(), chunk.to_vec())?);
        offset += n;
    }
    Ok(out)
}

fn layer_volumes(layers: &[LayerSpec]) -> Vec<LayerVolume> {
    layers.iter().map(|l| LayerVolume { layer: l.name.clone(), elements: l.numel() }).collect()
}

impl<'w> HsAdmm<'w> {
    /// Validates the configuration and distributes the initial parameters:
    /// rank 0 broadcasts to the leaders, each leader to its node. This is
    /// iteration 0 in the ledger.
    pub fn new(workload: &'w Workload, cfg: HsAdmmConfig) -> Result<Self> {
        let layers = workload.layers();
        cfg.validate(layers, workload.shards().len())?;
        let topo = cfg.topology;
        let mut cluster = Cluster::with_latency(topo, cfg.latency);
        cluster.set_iteration(0);

        let init = flat_params(&workload.init_params(cfg.seed))?;
        let tag = || Tag::dense(Purpose::Params, layer_volumes(layers));
        let at_leaders = cluster.broadcast(&topo.inter_group(), 0, Payload::Real(init), tag())?;
        let mut received: Vec<Option<Vec<DenseTensor>>> = vec![None; topo.world_size()];
        for (node, payload) in at_leaders.into_iter().enumerate() {
            let g = topo.intra_group(node);
            let copies = cluster.broadcast(&g, topo.leader_of(node), payload, tag())?;
            for (&r, p) in g.members.iter().zip(copies) {
                received[r] = Some(unflatten(layers, &p.into_real()?)?);
            }
        }
        let ranks = received
            .into_iter()
            .enumerate()
            .map(|(rank, p)| {
                let p = p.expect("every rank is in one node");
                let zeros: Vec<DenseTensor> = p.iter().map(|t| DenseTensor::zeros(t.shape())).collect();
                RankState {
                    rank,
                    theta: p.clone(),
                    u: zeros.clone(),
                    z_node: p.clone(),
                    v: zeros,
                    z: p.clone(),
                    masks: p.iter().map(|t| SparsityMask::ones(t.shape())).collect(),
                    loss: 0.0,
                }
            })
            .collect();
        let state = ConsensusState {
            k: 0,
            ranks,
            schedule: PenaltySchedule::uniform(&cfg.penalty, layers.len()),
            freeze: FreezeMonitor::new(cfg.params.t_freeze, cfg.params.drift_window, cfg.params.drift_tolerance),
            frozen_counts: None,
        };
        let caches = vec![KeepCache::new(); topo.world_size()];
        let mut me = Self { workload, cfg, cluster, state, caches, initial: placeholder_record() };
        let prev_zn: Vec<Vec<DenseTensor>> = me.state.ranks.iter().map(|s| s.z_node.clone()).collect();
        let prev_z: Vec<Vec<DenseTensor>> = me.state.ranks.iter().map(|s| s.z.clone()).collect();
        let report = me.residuals(&prev_zn, &prev_z)?;
        me.initial = me.record(0, report, 0.0, true, (0, 0), false);
        Ok(me)
    }

    /// Continues from a saved state with a fresh ledger.
    pub fn resume(workload: &'w Workload, cfg: HsAdmmConfig, state: ConsensusState) -> Result<Self> {
        cfg.validate(workload.layers(), workload.shards().len())?;
        if state.ranks.len() != cfg.topology.world_size() {
            return Err(config_err!("checkpoint has {} ranks", state.ranks.len()));
        }
        let cluster = Cluster::with_latency(cfg.topology, cfg.latency);
        let caches = vec![KeepCache::new(); cfg.topology.world_size()];
        let mut initial = placeholder_record();
        initial.k = state.k;
        initial.frozen = state.frozen();
        Ok(Self { workload, cfg, cluster, state, caches, initial })
    }

    pub fn state(&self) -> &ConsensusState {
        &self.state
    }

    pub fn config(&self) -> &HsAdmmConfig {
        &self.cfg
    }

    pub fn cluster(&self) -> &Cluster {
        &self.cluster
    }

    pub fn into_ledger(self) -> CommLedger {
        self.cluster.into_ledger()
    }

    /// Totals of keep-set derivations and cache hits over all ranks.
    pub fn cache_stats(&self) -> (u64, u64) {
        self.caches.iter().fold((0, 0), |(d, h), c| (d + c.derivations(), h + c.hits()))
    }

    pub fn checkpoint(&self) -> ConsensusState {
        self.state.clone()
    }

    fn record(
        &self,
        k: usize,
        residuals: ResidualReport,
        drift: f64,
        synced: bool,
        cache_delta: (u64, u64),
        converged: bool,
    ) -> IterationRecord {
        let (inter, intra, world, latency) = iteration_traffic(self.cluster.ledger(), k);
        let n = self.state.ranks.len() as f64;
        IterationRecord {
            k,
            algorithm: Algorithm::Hsadmm,
            loss: self.state.ranks.iter().map(|r| r.loss).sum::<f64>() / n,
            residuals: Some(residuals),
            mask_drift: drift,
            frozen: self.state.frozen(),
            synced,
            inter_bytes: inter,
            intra_bytes: intra,
            world_bytes: world,
            latency_s: latency,
            keep_derivations: cache_delta.0,
            keep_hits: cache_delta.1,
            converged,
        }
    }

    /// Residual terms of every rank, summed by one world all-reduce.
    fn residuals(&mut self, prev_zn: &[Vec<DenseTensor>], prev_z: &[Vec<DenseTensor>]) -> Result<ResidualReport> {
        let layers = self.workload.layers();
        let topo = self.cfg.topology;
        let sched = &self.state.schedule;
        let width = ResidualTerms::WIDTH;
        let mut payloads = Vec::with_capacity(self.state.ranks.len());
        let mut ranks = Vec::new();
        for (r, st) in self.state.ranks.iter().enumerate() {
            let mut packed = Vec::with_capacity(layers.len() * width);
            for (j, layer) in layers.iter().enumerate() {
                let (terms, own) = residual_terms(&ResidualInputs {
                    theta: &st.theta[j],
                    u: &st.u[j],
                    z_node: &st.z_node[j],
                    z_node_prev: &prev_zn[r][j],
                    v: &st.v[j],
                    z: &st.z[j],
                    z_prev: &prev_z[r][j],
                    rho1: sched.rho1[j],
                    rho2: sched.rho2[j],
                    leader: topo.is_leader(r),
                });
                packed.extend_from_slice(&terms.to_array());
                ranks.push(RankResidual {
                    rank: r,
                    layer: layer.name.clone(),
                    r_intra: own[0],
                    s_intra: own[1],
                    r_inter: own[2],
                    s_inter: own[3],
                });
            }
            payloads.push(Payload::Real(DenseTensor::new(vec![packed.len()], packed)?));
        }
        let n = layers.len() * width;
        let sums = self
            .cluster
            .all_reduce(&topo.world_group(), payloads, ReduceOp::Sum, Tag::residuals(n))?
            .swap_remove(0)
            .into_real()?;
        let terms: Vec<ResidualTerms> = sums.data().chunks(width).map(ResidualTerms::from_slice).collect();
        Ok(compute_residuals(
            &terms,
            layers,
            &topo,
            sched,
            self.cfg.params.eps_abs,
            self.cfg.params.eps_rel,
            ranks,
        ))
    }

    fn keep_sets(&mut self, rank: usize, frozen: bool) -> Result<Vec<Option<KeepIndexSets>>> {
        let layers = self.workload.layers();
        let mut out = Vec::with_capacity(layers.len());
        for (j, layer) in layers.iter().enumerate() {
            out.push(if self.cfg.constraints[j].is_empty() {
                None
            } else {
                Some(self.caches[rank].get(layer, &self.state.ranks[rank].masks[j], frozen)?.clone())
            });
        }
        Ok(out)
    }

    /// One outer iteration.
    pub fn step(&mut self) -> Result<IterationRecord> {
        let k = self.state.k + 1;
        self.cluster.set_iteration(k);
        let wl = self.workload;
        let layers = wl.layers();
        let topo = self.cfg.topology;
        let (m, p) = (topo.nodes, topo.accels_per_node);
        let frozen = self.state.frozen();
        let synced = k.is_multiple_of(self.cfg.params.sync_period);
        let lambda = self.cfg.solver.weight_decay;
        let names: Vec<String> = layers.iter().map(|l| l.name.clone()).collect();
        let dense: Vec<usize> = layers.iter().map(LayerSpec::numel).collect();
        let cache_before = self.cache_stats();

        // local proximal training
        let rho1 = self.state.schedule.rho1.clone();
        let solver = &self.cfg.solver;
        let seed = self.cfg.seed;
        let trained = exec::map(self.cfg.exec, &self.state.ranks, |r, st| {
            let anchor = ProxAnchor { z: &st.z_node, u: &st.u, rho: &rho1 };
            proximal_sgd(wl, wl.shard(r), &st.theta, Some(anchor), solver, derive_seed(seed, &[r as u64, k as u64]))
        });
        for (r, (st, res)) in self.state.ranks.iter_mut().zip(trained).enumerate() {
            let (theta, loss) = res.map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!("rank {r}, iteration {k}: {msg}")),
                other => other,
            })?;
            st.theta = theta;
            st.loss = loss;
        }

        // intra-node sums of θ + u
        let mut sums = Vec::with_capacity(m);
        for node in 0..m {
            let g = topo.intra_group(node);
            let items = g
                .members
                .iter()
                .map(|&r| {
                    let st = &self.state.ranks[r];
                    st.theta.iter().zip(&st.u).map(|(t, u)| t.add(u).map(DenseTensor::into_data)).collect()
                })
                .collect::<Result<Vec<Vec<Vec<f64>>>>>()?;
            let red = self.cluster.all_reduce_flat(&g, items, &names, &dense, ReduceOp::Sum, Purpose::Params)?;
            let ts = layers
                .iter()
                .zip(red)
                .map(|(l, d)| DenseTensor::new(l.shape.clone(), d))
                .collect::<Result<Vec<_>>>()?;
            sums.push(ts);
        }

        // node candidate and node update, replicated on every rank of a node
        let prev_zn: Vec<Vec<DenseTensor>> = self.state.ranks.iter().map(|s| s.z_node.clone()).collect();
        let prev_z: Vec<Vec<DenseTensor>> = self.state.ranks.iter().map(|s| s.z.clone()).collect();
        let mut local_masks: Vec<Vec<Option<SparsityMask>>> = Vec::with_capacity(self.state.ranks.len());
        let sched = self.state.schedule.clone();
        for (r, st) in self.state.ranks.iter_mut().enumerate() {
            let node = topo.node_of(r);
            let mut masks = Vec::with_capacity(layers.len());
            for j in 0..layers.len() {
                let cand = node_candidate(&sums[node][j], &st.z[j], &st.v[j], sched.rho1[j], sched.rho2[j], lambda, m, p)?;
                let (zn, mi) = update_node_consensus(&cand, &self.cfg.constraints[j], Some(&st.masks[j]), frozen)?;
                let support = mi.as_ref().unwrap_or(&st.masks[j]);
                if !support.covers(&zn) {
                    return Err(protocol!("rank {r} layer {}: node consensus escapes its mask", layers[j].name));
                }
                st.z_node[j] = zn;
                masks.push(mi);
            }
            local_masks.push(masks);
        }

        let constrained: Vec<usize> = (0..layers.len()).filter(|&j| !self.cfg.constraints[j].is_empty()).collect();
        let constrained_names: Vec<String> = constrained.iter().map(|&j| names[j].clone()).collect();
        let prev_masks: Vec<SparsityMask> = constrained.iter().map(|&j| self.state.ranks[0].masks[j].clone()).collect();
        let dynamic = !frozen && !constrained.is_empty();
        let mut drift = 0.0;
        let mut leader_keeps: Option<Vec<Option<KeepIndexSets>>> = None;

        if synced {
            let leaders = topo.inter_group();
            if dynamic {
                let local: Vec<Vec<SparsityMask>> = leaders
                    .members
                    .iter()
                    .map(|&r| constrained.iter().map(|&j| local_masks[r][j].clone().expect("dynamic mode yields a mask")).collect())
                    .collect();
                let global = sync_masks(&mut self.cluster, &leaders, &local, &constrained_names)?;
                for &r in &leaders.members {
                    for (i, &j) in constrained.iter().enumerate() {
                        self.state.ranks[r].masks[j] = global[i].clone();
                    }
                }
            }
            let mut keeps = Vec::with_capacity(m);
            for &r in &leaders.members {
                keeps.push(self.keep_sets(r, frozen)?);
            }
            let zn: Vec<Vec<DenseTensor>> = leaders.members.iter().map(|&r| self.state.ranks[r].z_node.clone()).collect();
            let mut vs: Vec<Vec<DenseTensor>> = leaders.members.iter().map(|&r| self.state.ranks[r].v.clone()).collect();
            let res = inter_node_consensus(&mut self.cluster, &leaders, layers, &zn, &mut vs, &keeps)?;
            for (li, &r) in leaders.members.iter().enumerate() {
                self.state.ranks[r].v = std::mem::take(&mut vs[li]);
                self.state.ranks[r].z = res.z.clone();
            }

            if p > 1 {
                self.forward_to_followers(&res.compact, &keeps[0], &constrained, dynamic)?;
            }
            if dynamic {
                let cur: Vec<SparsityMask> = constrained.iter().map(|&j| self.state.ranks[0].masks[j].clone()).collect();
                drift = aggregate_drift(&prev_masks, &cur)?;
            }
            leader_keeps = Some(keeps.swap_remove(0));
        }

        for st in self.state.ranks.iter_mut() {
            for j in 0..layers.len() {
                st.u[j] = dual_update_intra(&st.theta[j], &st.z_node[j], &st.u[j])?;
            }
        }

        let report = self.residuals(&prev_zn, &prev_z)?;

        if self.cfg.penalty.adaptive {
            let mut next = adapt_penalties(&report, &self.state.schedule);
            if !synced {
                next.rho2 = self.state.schedule.rho2.clone();
            }
            let old = std::mem::replace(&mut self.state.schedule, next);
            let new = &self.state.schedule;
            for st in self.state.ranks.iter_mut() {
                for j in 0..layers.len() {
                    rescale_dual(&mut st.u[j], old.rho1[j], new.rho1[j]);
                    rescale_dual(&mut st.v[j], old.rho2[j], new.rho2[j]);
                }
            }
        }

        if synced && !frozen {
            self.state.freeze.observe(k, drift);
        }
        if frozen {
            if let Some(keeps) = &leader_keeps {
                let counts: Vec<usize> = keeps
                    .iter()
                    .zip(layers)
                    .map(|(kp, l)| kp.as_ref().map_or(l.numel(), KeepIndexSets::compact_len))
                    .collect();
                match &self.state.frozen_counts {
                    None => self.state.frozen_counts = Some(counts),
                    Some(c) if *c != counts => {
                        return Err(protocol!("compact payload changed after freeze: {c:?} -> {counts:?}"));
                    }
                    Some(_) => {}
                }
            }
        }

        self.check_replicas()?;
        self.check_finite(k)?;
        self.state.k = k;
        let after = self.cache_stats();
        let converged = report.converged();
        Ok(self.record(k, report, drift, synced, (after.0 - cache_before.0, after.1 - cache_before.1), converged))
    }

    /// Leaders broadcast the averaged compact buffers and, while masks move,
    /// the global mask bits. Followers restore `z` with their own keep sets
    /// and update their copy of `v`.
    fn forward_to_followers(
        &mut self,
        compact: &[Vec<f64>],
        keeps: &[Option<KeepIndexSets>],
        constrained: &[usize],
        dynamic: bool,
    ) -> Result<()> {
        let layers = self.workload.layers();
        let topo = self.cfg.topology;
        let frozen = self.state.frozen();
        let volumes: Vec<LayerVolume> = layers
            .iter()
            .zip(compact)
            .filter(|(_, b)| !b.is_empty())
            .map(|(l, b)| LayerVolume { layer: l.name.clone(), elements: b.len() })
            .collect();
        let dense_total = layers.iter().map(LayerSpec::numel).sum();
        for node in 0..topo.nodes {
            let g = topo.intra_group(node);
            let leader = topo.leader_of(node);
            let list = compact
                .iter()
                .filter(|b| !b.is_empty())
                .map(|b| DenseTensor::new(vec![b.len()], b.clone()).map(Payload::Real))
                .collect::<Result<Vec<_>>>()?;
            let params = self.cluster.broadcast(
                &g,
                leader,
                Payload::List(list),
                Tag::compressed(Purpose::Params, volumes.clone(), dense_total),
            )?;
            let bits = if dynamic {
                let st = &self.state.ranks[leader];
                let bits: Vec<bool> = constrained.iter().flat_map(|&j| st.masks[j].bits().iter().copied()).collect();
                let vols = constrained
                    .iter()
                    .map(|&j| LayerVolume { layer: layers[j].name.clone(), elements: layers[j].numel() })
                    .collect();
                Some(self.cluster.broadcast(&g, leader, Payload::Bits(bits), Tag::masks(vols))?)
            } else {
                None
            };
            for (pos, &r) in g.members.iter().enumerate().skip(1) {
                if let Some(b) = &bits {
                    let received = b[pos].clone().into_bits()?;
                    let shapes: Vec<&[usize]> = constrained.iter().map(|&j| layers[j].shape.as_slice()).collect();
                    let masks = split_masks(&received, shapes.into_iter())?;
                    for (i, &j) in constrained.iter().enumerate() {
                        self.state.ranks[r].masks[j] = masks[i].clone();
                    }
                }
                let own = self.keep_sets(r, frozen)?;
                if own != keeps {
                    return Err(protocol!("rank {r} derived keep sets that differ from its leader"));
                }
                let mut entries = params[pos].clone().into_list()?.into_iter();
                let mut bufs = Vec::with_capacity(layers.len());
                for (l, kp) in layers.iter().zip(&own) {
                    let len = kp.as_ref().map_or(l.numel(), KeepIndexSets::compact_len);
                    if len == 0 {
                        bufs.push(Vec::new());
                        continue;
                    }
                    let t = entries.next().ok_or_else(|| protocol!("rank {r}: missing compact buffer"))?.into_real()?;
                    if t.len() != len {
                        return Err(protocol!("rank {r}: compact buffer for {} has {} elements, expected {len}", l.name, t.len()));
                    }
                    bufs.push(t.into_data());
                }
                let z = restore(layers, &own, &bufs)?;
                let st = &mut self.state.ranks[r];
                for j in 0..layers.len() {
                    let d = st.z_node[j].sub(&z[j])?;
                    st.v[j].add_assign(&d)?;
                }
                st.z = z;
            }
        }
        Ok(())
    }

    /// Node replicas equal their leader; global replicas and masks equal
    /// across leaders.
    fn check_replicas(&self) -> Result<()> {
        let topo = self.cfg.topology;
        let ranks = &self.state.ranks;
        let l0 = &ranks[0];
        for (r, st) in ranks.iter().enumerate() {
            let lead = &ranks[topo.leader_of(topo.node_of(r))];
            if !bit_equal(&st.z_node, &lead.z_node) || !bit_equal(&st.v, &lead.v) {
                return Err(protocol!("rank {r} node state diverged from its leader"));
            }
            if !bit_equal(&st.z, &l0.z) {
                return Err(protocol!("rank {r} global consensus diverged from rank 0"));
            }
            if st.masks != l0.masks {
                return Err(protocol!("rank {r} holds a global mask different from rank 0"));
            }
        }
        Ok(())
    }

    fn check_finite(&self, k: usize) -> Result<()> {
        let layers = self.workload.layers();
        for st in &self.state.ranks {
            for (name, ts) in [("theta", &st.theta), ("u", &st.u), ("z_node", &st.z_node), ("v", &st.v), ("z", &st.z)] {
                if let Some(j) = ts.iter().position(|t| !t.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "non-finite {name} on rank {} layer {} at iteration {k}",
                        st.rank, layers[j].name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Steps until convergence (if configured) or the iteration cap.
    pub fn run(&mut self) -> Result<Vec<IterationRecord>> {
        let mut out = vec![self.initial.clone()];
        while self.state.k < self.cfg.params.max_iters {
            let rec = self.step()?;
            let stop = rec.converged && self.cfg.params.stop_on_convergence;
            out.push(rec);
            if stop {
                break;
            }
        }
        Ok(out)
    }
}

fn placeholder_record() -> IterationRecord {
    IterationRecord {
        k: 0,
        algorithm: Algorithm::Hsadmm,
        loss: 0.0,
        residuals: None,
        mask_drift: 0.0,
        frozen: false,
        synced: false,
        inter_bytes: 0,
        intra_bytes: 0,
        world_bytes: 0,
        latency_s: 0.0,
        keep_derivations: 0,
        keep_hits: 0,
        converged: false,
    }
}

impl Trainer for HsAdmm<'_> {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Hsadmm
    }

    fn initial_record(&self) -> IterationRecord {
        self.initial.clone()
    }

    fn step(&mut self) -> Result<IterationRecord> {
        HsAdmm::step(self)
    }

    fn ledger(&self) -> &CommLedger {
        self.cluster.ledger()
    }

    fn layers(&self) -> &[LayerSpec] {
        self.workload.layers()
    }

    fn params(&self) -> &[DenseTensor] {
        &self.state.ranks[0].z
    }

    fn masks(&self) -> Vec<SparsityMask> {
        self.state.ranks[0].masks.clone()
    }

    fn dump(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(&self.state)?)
    }
}
