//! Deterministic simulated cluster.
//!
//! Ranks are logical tasks driven by a round-based scheduler. A collective is
//! opened with [`Cluster::begin`], every member submits its payload, and the
//! collective completes on the next [`Cluster::advance`] once all members
//! have arrived. Reading a result earlier is a protocol error. Reductions
//! fold payloads in member (rank) order, so results are bit-reproducible.

mod bucket;
mod ledger;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use bucket::{bucketize, bucketize_with_cap, unbucketize, Bucket, Segment, BUCKET_CAP_BYTES};
pub use ledger::{
    CommLedger, Encoding, LatencyModel, LayerVolume, LedgerEntry, OpName, Purpose, Scope, Tag,
    ELEMENT_BYTES, INDEXED_ELEMENT_BYTES,
};

use crate::error::{protocol, Error, Result};
use crate::tensor::DenseTensor;

pub type Rank = usize;

/// `nodes` × `accels_per_node` ranks; global rank `r = node * P + local`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub nodes: usize,
    pub accels_per_node: usize,
}

impl Topology {
    pub fn new(nodes: usize, accels_per_node: usize) -> Result<Self> {
        if nodes == 0 || accels_per_node == 0 {
            return Err(Error::Config(format!(
                "topology needs positive sizes, got {nodes}x{accels_per_node}"
            )));
        }
        Ok(Self { nodes, accels_per_node })
    }

    pub fn world_size(&self) -> usize {
        self.nodes * self.accels_per_node
    }

    pub fn rank(&self, node: usize, local: usize) -> Rank {
        node * self.accels_per_node + local
    }

    pub fn node_of(&self, rank: Rank) -> usize {
        rank / self.accels_per_node
    }

    pub fn local_of(&self, rank: Rank) -> usize {
        rank % self.accels_per_node
    }

    pub fn leader_of(&self, node: usize) -> Rank {
        self.rank(node, 0)
    }

    pub fn is_leader(&self, rank: Rank) -> bool {
        self.local_of(rank) == 0
    }

    pub fn intra_group(&self, node: usize) -> ProcessGroup {
        ProcessGroup {
            id: format!("intra-{node}"),
            members: (0..self.accels_per_node).map(|j| self.rank(node, j)).collect(),
            scope: GroupScope::IntraNode(node),
        }
    }

    pub fn inter_group(&self) -> ProcessGroup {
        ProcessGroup {
            id: "inter".into(),
            members: (0..self.nodes).map(|i| self.leader_of(i)).collect(),
            scope: GroupScope::InterNodeLeaders,
        }
    }

    pub fn world_group(&self) -> ProcessGroup {
        ProcessGroup {
            id: "world".into(),
            members: (0..self.world_size()).collect(),
            scope: GroupScope::World,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupScope {
    IntraNode(usize),
    InterNodeLeaders,
    World,
}

impl GroupScope {
    pub fn ledger_scope(self) -> Scope {
        match self {
            GroupScope::IntraNode(_) => Scope::Intra,
            GroupScope::InterNodeLeaders => Scope::Inter,
            GroupScope::World => Scope::World,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcessGroup {
    pub id: String,
    pub members: Vec<Rank>,
    pub scope: GroupScope,
}

impl ProcessGroup {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn contains(&self, rank: Rank) -> bool {
        self.members.contains(&rank)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Avg,
    BitwiseOr,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Real(DenseTensor),
    Bits(Vec<bool>),
    /// Result of an all-gather: one payload per member, in member order.
    List(Vec<Payload>),
}

impl Payload {
    pub fn elements(&self) -> usize {
        match self {
            Payload::Real(t) => t.len(),
            Payload::Bits(b) => b.len(),
            Payload::List(l) => l.iter().map(Payload::elements).sum(),
        }
    }

    pub fn into_real(self) -> Result<DenseTensor> {
        match self {
            Payload::Real(t) => Ok(t),
            other => Err(Error::Type(format!("expected a real payload, got {}", other.kind()))),
        }
    }

    pub fn into_bits(self) -> Result<Vec<bool>> {
        match self {
            Payload::Bits(b) => Ok(b),
            other => Err(Error::Type(format!("expected a bit payload, got {}", other.kind()))),
        }
    }

    pub fn into_list(self) -> Result<Vec<Payload>> {
        match self {
            Payload::List(l) => Ok(l),
            other => Err(Error::Type(format!("expected a gathered list, got {}", other.kind()))),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Payload::Real(_) => "real",
            Payload::Bits(_) => "bits",
            Payload::List(_) => "list",
        }
    }

    fn same_layout(&self, other: &Payload) -> bool {
        match (self, other) {
            (Payload::Real(a), Payload::Real(b)) => a.shape() == b.shape(),
            (Payload::Bits(a), Payload::Bits(b)) => a.len() == b.len(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CollectiveKind {
    AllReduce(ReduceOp),
    Broadcast { root: Rank },
    AllGather,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CollectiveId(u64);

#[derive(Debug)]
struct Pending {
    group: ProcessGroup,
    kind: CollectiveKind,
    tag: Tag,
    arrived: BTreeMap<Rank, Payload>,
    result: Option<Payload>,
    taken: Vec<bool>,
}

impl Pending {
    fn ready(&self) -> bool {
        match self.kind {
            CollectiveKind::Broadcast { root } => self.arrived.contains_key(&root),
            _ => self.arrived.len() == self.group.size(),
        }
    }
}

/// Serial left fold of payloads in the given order. This is also the
/// reference semantics every collective result must match.
pub fn reduce_payloads(payloads: &[Payload], op: ReduceOp) -> Result<Payload> {
    let first = payloads.first().ok_or_else(|| protocol!("reduction over an empty group"))?;
    if payloads.iter().any(|p| !first.same_layout(p)) {
        return Err(protocol!("members contributed payloads of different shapes"));
    }
    match (op, first) {
        (ReduceOp::BitwiseOr, Payload::Bits(b0)) => {
            let mut acc = b0.clone();
            for p in &payloads[1..] {
                if let Payload::Bits(b) = p {
                    acc.iter_mut().zip(b).for_each(|(a, &x)| *a |= x);
                }
            }
            Ok(Payload::Bits(acc))
        }
        (ReduceOp::Sum | ReduceOp::Avg, Payload::Real(t0)) => {
            let mut acc = t0.clone();
            for p in &payloads[1..] {
                if let Payload::Real(t) = p {
                    acc.add_assign(t)?;
                }
            }
            if op == ReduceOp::Avg {
                let g = payloads.len() as f64;
                acc.data_mut().iter_mut().for_each(|v| *v /= g);
            }
            Ok(Payload::Real(acc))
        }
        (ReduceOp::BitwiseOr, _) => Err(Error::Type("bitwise OR needs bit payloads".into())),
        (_, _) => Err(Error::Type(format!("{op:?} needs real payloads"))),
    }
}

/// Scheduler, process groups and communication ledger of one simulated run.
#[derive(Debug)]
pub struct Cluster {
    topology: Topology,
    ledger: CommLedger,
    latency: LatencyModel,
    iteration: usize,
    round: u64,
    next_id: u64,
    pending: BTreeMap<CollectiveId, Pending>,
}

impl Cluster {
    pub fn new(topology: Topology) -> Self {
        Self::with_latency(topology, LatencyModel::default())
    }

    pub fn with_latency(topology: Topology, latency: LatencyModel) -> Self {
        Self {
            topology,
            ledger: CommLedger::new(),
            latency,
            iteration: 0,
            round: 0,
            next_id: 0,
            pending: BTreeMap::new(),
        }
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    pub fn into_ledger(self) -> CommLedger {
        self.ledger
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    /// Iteration number stamped on subsequent ledger entries.
    pub fn set_iteration(&mut self, k: usize) {
        self.iteration = k;
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn begin(&mut self, group: &ProcessGroup, kind: CollectiveKind, tag: Tag) -> Result<CollectiveId> {
        if group.members.is_empty() {
            return Err(protocol!("group {} has no members", group.id));
        }
        if let CollectiveKind::Broadcast { root } = kind {
            if !group.contains(root) {
                return Err(protocol!("broadcast root {root} is not in group {}", group.id));
            }
        }
        let id = CollectiveId(self.next_id);
        self.next_id += 1;
        self.pending.insert(
            id,
            Pending {
                group: group.clone(),
                kind,
                tag,
                arrived: BTreeMap::new(),
                result: None,
                taken: vec![false; group.size()],
            },
        );
        Ok(id)
    }

    pub fn submit(&mut self, id: CollectiveId, rank: Rank, payload: Payload) -> Result<()> {
        let p = self.pending.get_mut(&id).ok_or_else(|| protocol!("unknown collective {id:?}"))?;
        if !p.group.contains(rank) {
            return Err(protocol!("rank {rank} is not a member of {}", p.group.id));
        }
        if p.result.is_some() {
            return Err(protocol!("rank {rank} submitted after {id:?} completed"));
        }
        if let CollectiveKind::Broadcast { root } = p.kind {
            if rank != root {
                return Err(protocol!("only root {root} submits to a broadcast"));
            }
        }
        if p.arrived.insert(rank, payload).is_some() {
            return Err(protocol!("rank {rank} submitted twice to {id:?}"));
        }
        Ok(())
    }

    /// Ends the current round and completes every collective whose members
    /// have all arrived. Returns how many completed.
    pub fn advance(&mut self) -> Result<usize> {
        self.round += 1;
        let multi_node = self.topology.nodes > 1;
        let mut done = 0;
        let ready: Vec<CollectiveId> = self
            .pending
            .iter()
            .filter(|(_, p)| p.result.is_none() && p.ready())
            .map(|(id, _)| *id)
            .collect();
        for id in ready {
            let p = self.pending.get_mut(&id).expect("id collected above");
            let ordered: Vec<Payload> = match p.kind {
                CollectiveKind::Broadcast { root } => vec![p.arrived[&root].clone()],
                _ => p.group.members.iter().map(|r| p.arrived[r].clone()).collect(),
            };
            let (result, op, elements) = match p.kind {
                CollectiveKind::AllReduce(op) => {
                    let name = match op {
                        ReduceOp::Sum => OpName::AllreduceSum,
                        ReduceOp::Avg => OpName::AllreduceAvg,
                        ReduceOp::BitwiseOr => OpName::AllreduceOr,
                    };
                    let elements = ordered[0].elements();
                    match reduce_payloads(&ordered, op) {
                        Ok(r) => (r, name, elements),
                        Err(e) => {
                            // a failed collective is abandoned so later rounds stay usable
                            self.pending.remove(&id);
                            return Err(e);
                        }
                    }
                }
                CollectiveKind::Broadcast { .. } => {
                    let elements = ordered[0].elements();
                    (ordered.into_iter().next().expect("root payload"), OpName::Broadcast, elements)
                }
                CollectiveKind::AllGather => {
                    let elements = ordered[0].elements();
                    if ordered.iter().any(|x| x.elements() != elements) {
                        self.pending.remove(&id);
                        return Err(protocol!("all-gather members sent unequal counts"));
                    }
                    (Payload::List(ordered), OpName::Allgather, elements)
                }
            };
            let scope = p.group.scope.ledger_scope();
            // value-index payloads interleave (value, index); one entry per pair
            let elements = match p.tag.encoding {
                Encoding::ValueIndex => elements / 2,
                _ => elements,
            };
            let bytes = p.tag.encoding.bytes_for(elements);
            let dense_bytes = match p.tag.encoding {
                Encoding::Bit => bytes,
                _ => p.tag.dense_elements as u64 * ELEMENT_BYTES,
            };
            // a single-member group moves nothing over any link
            if bytes > 0 && p.group.size() > 1 {
                self.ledger.push(LedgerEntry {
                    iter: self.iteration,
                    round: self.round,
                    group: p.group.id.clone(),
                    scope,
                    op,
                    purpose: p.tag.purpose,
                    elements,
                    bytes,
                    dense_bytes,
                    members: p.group.size(),
                    layers: p.tag.layers.clone(),
                    latency_s: self.latency.cost(scope, multi_node, bytes),
                });
            }
            p.result = Some(result);
            done += 1;
        }
        Ok(done)
    }

    /// A member's copy of a completed collective's result.
    pub fn take(&mut self, id: CollectiveId, rank: Rank) -> Result<Payload> {
        let p = self.pending.get_mut(&id).ok_or_else(|| protocol!("unknown collective {id:?}"))?;
        let pos = p
            .group
            .members
            .iter()
            .position(|&r| r == rank)
            .ok_or_else(|| protocol!("rank {rank} is not a member of {}", p.group.id))?;
        let result = p
            .result
            .as_ref()
            .ok_or_else(|| protocol!("rank {rank} read {id:?} before every member arrived"))?
            .clone();
        if std::mem::replace(&mut p.taken[pos], true) {
            return Err(protocol!("rank {rank} read {id:?} twice"));
        }
        if p.taken.iter().all(|&t| t) {
            self.pending.remove(&id);
        }
        Ok(result)
    }

    /// Collectives opened but not yet fully consumed.
    pub fn outstanding(&self) -> usize {
        self.pending.len()
    }

    fn run(
        &mut self,
        group: &ProcessGroup,
        kind: CollectiveKind,
        contributions: Vec<(Rank, Payload)>,
        tag: Tag,
    ) -> Result<Vec<Payload>> {
        let id = self.begin(group, kind, tag)?;
        for (rank, payload) in contributions {
            self.submit(id, rank, payload)?;
        }
        self.advance()?;
        group.members.iter().map(|&r| self.take(id, r)).collect()
    }

    /// All-reduce with one payload per member, given in member order.
    /// Returns each member's copy of the result, in member order.
    pub fn all_reduce(
        &mut self,
        group: &ProcessGroup,
        payloads: Vec<Payload>,
        op: ReduceOp,
        tag: Tag,
    ) -> Result<Vec<Payload>> {
        if payloads.len() != group.size() {
            return Err(protocol!(
                "{} payloads for a group of {}",
                payloads.len(),
                group.size()
            ));
        }
        let contributions = group.members.iter().copied().zip(payloads).collect();
        self.run(group, CollectiveKind::AllReduce(op), contributions, tag)
    }

    /// Tensor all-reduce returning the single (identical) result.
    pub fn all_reduce_tensor(
        &mut self,
        group: &ProcessGroup,
        tensors: Vec<DenseTensor>,
        op: ReduceOp,
        tag: Tag,
    ) -> Result<DenseTensor> {
        let mut out = self.all_reduce(group, tensors.into_iter().map(Payload::Real).collect(), op, tag)?;
        out.swap_remove(0).into_real()
    }

    pub fn broadcast(
        &mut self,
        group: &ProcessGroup,
        root: Rank,
        payload: Payload,
        tag: Tag,
    ) -> Result<Vec<Payload>> {
        self.run(group, CollectiveKind::Broadcast { root }, vec![(root, payload)], tag)
    }

    /// All-reduce of several flat buffers per member, coalesced into
    /// buckets of at most [`BUCKET_CAP_BYTES`]. `items[m][i]` is member `m`'s
    /// buffer for item `i`; every member must send the same lengths. Empty
    /// items are passed through. Each bucket is one ledger entry carrying the
    /// per-item element counts, with `dense_elements[i]` as the uncompressed
    /// size of item `i`.
    pub fn all_reduce_flat(
        &mut self,
        group: &ProcessGroup,
        items: Vec<Vec<Vec<f64>>>,
        names: &[String],
        dense_elements: &[usize],
        op: ReduceOp,
        purpose: Purpose,
    ) -> Result<Vec<Vec<f64>>> {
        if items.len() != group.size() {
            return Err(protocol!("{} members' buffers for a group of {}", items.len(), group.size()));
        }
        let lens: Vec<usize> = items[0].iter().map(Vec::len).collect();
        if names.len() != lens.len() || dense_elements.len() != lens.len() {
            return Err(protocol!("item metadata does not match {} buffers", lens.len()));
        }
        for (m, member) in items.iter().enumerate() {
            if member.iter().map(Vec::len).ne(lens.iter().copied()) {
                return Err(protocol!(
                    "member {} of {} sent buffer lengths that differ from member {}",
                    group.members[m],
                    group.id,
                    group.members[0]
                ));
            }
        }
        let live: Vec<usize> = (0..lens.len()).filter(|&i| lens[i] > 0).collect();
        let probe: Vec<DenseTensor> =
            live.iter().map(|&i| DenseTensor::zeros(&[lens[i]])).collect();
        let buckets = bucketize(&probe);
        let mut out: Vec<Vec<f64>> = lens.iter().map(|_| Vec::new()).collect();
        for b in &buckets {
            let payloads = items
                .iter()
                .map(|member| {
                    let mut data = Vec::with_capacity(b.data.len());
                    for s in &b.segments {
                        data.extend_from_slice(&member[live[s.index]]);
                    }
                    DenseTensor::new(vec![data.len()], data).map(Payload::Real)
                })
                .collect::<Result<Vec<_>>>()?;
            let layers = b
                .segments
                .iter()
                .map(|s| LayerVolume { layer: names[live[s.index]].clone(), elements: s.len })
                .collect();
            let dense = b.segments.iter().map(|s| dense_elements[live[s.index]]).sum();
            let tag = Tag::compressed(purpose, layers, dense);
            let reduced = self.all_reduce(group, payloads, op, tag)?.swap_remove(0).into_real()?;
            for s in &b.segments {
                out[live[s.index]] = reduced.data()[s.offset..s.offset + s.len].to_vec();
            }
        }
        Ok(out)
    }

    /// Every member receives the list of all contributions in member order.
    pub fn all_gather(
        &mut self,
        group: &ProcessGroup,
        payloads: Vec<Payload>,
        tag: Tag,
    ) -> Result<Vec<Payload>> {
        if payloads.len() != group.size() {
            return Err(protocol!("{} payloads for a group of {}", payloads.len(), group.size()));
        }
        let contributions = group.members.iter().copied().zip(payloads).collect();
        let mut out = self.run(group, CollectiveKind::AllGather, contributions, tag)?;
        out.swap_remove(0).into_list()
    }
}
