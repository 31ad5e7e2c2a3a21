//! Append-only record of every collective and its payload volume.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Bytes per element used for accounting, regardless of the 64-bit arithmetic.
pub const ELEMENT_BYTES: u64 = 4;
/// A transmitted sparse entry carries a 4-byte value and a 4-byte index.
pub const INDEXED_ELEMENT_BYTES: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Intra,
    Inter,
    /// A flat group spanning every rank.
    World,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpName {
    AllreduceSum,
    AllreduceAvg,
    AllreduceOr,
    Broadcast,
    Allgather,
}

/// What a collective carried.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    /// Model or consensus parameters.
    Params,
    Gradients,
    Masks,
    /// Scalar residual norms for convergence checks.
    Residuals,
}

impl Purpose {
    /// Parameter and gradient traffic, the volume the compression targets.
    pub fn is_payload(self) -> bool {
        matches!(self, Purpose::Params | Purpose::Gradients)
    }
}

/// Wire encoding of one payload element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    Fp32,
    /// Value plus index pairs.
    ValueIndex,
    /// Packed bits, rounded up to whole bytes.
    Bit,
}

impl Encoding {
    pub fn bytes_for(self, elements: usize) -> u64 {
        match self {
            Encoding::Fp32 => elements as u64 * ELEMENT_BYTES,
            Encoding::ValueIndex => elements as u64 * INDEXED_ELEMENT_BYTES,
            Encoding::Bit => (elements as u64).div_ceil(8),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerVolume {
    pub layer: String,
    pub elements: usize,
}

/// Annotation a caller attaches to a collective so the ledger can attribute it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tag {
    pub purpose: Purpose,
    pub encoding: Encoding,
    pub layers: Vec<LayerVolume>,
    /// Element count the same data would need without compression.
    pub dense_elements: usize,
}

impl Tag {
    pub fn dense(purpose: Purpose, layers: Vec<LayerVolume>) -> Self {
        let dense_elements = layers.iter().map(|l| l.elements).sum();
        Self { purpose, encoding: Encoding::Fp32, layers, dense_elements }
    }

    pub fn compressed(purpose: Purpose, layers: Vec<LayerVolume>, dense_elements: usize) -> Self {
        Self { purpose, encoding: Encoding::Fp32, layers, dense_elements }
    }

    /// Sparse (value, index) pairs; `layers` counts pairs.
    pub fn value_index(purpose: Purpose, layers: Vec<LayerVolume>, dense_elements: usize) -> Self {
        Self { purpose, encoding: Encoding::ValueIndex, layers, dense_elements }
    }

    pub fn masks(layers: Vec<LayerVolume>) -> Self {
        let dense_elements = layers.iter().map(|l| l.elements).sum();
        Self { purpose: Purpose::Masks, encoding: Encoding::Bit, layers, dense_elements }
    }

    pub fn residuals(n: usize) -> Self {
        Self {
            purpose: Purpose::Residuals,
            encoding: Encoding::Fp32,
            layers: Vec::new(),
            dense_elements: n,
        }
    }
}

/// One collective. `bytes` is the logical payload each member contributes;
/// `members` is kept so ring or tree wire volume can be derived offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub iter: usize,
    pub round: u64,
    pub group: String,
    pub scope: Scope,
    pub op: OpName,
    pub purpose: Purpose,
    pub elements: usize,
    pub bytes: u64,
    pub dense_bytes: u64,
    pub members: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<LayerVolume>,
    pub latency_s: f64,
}

impl LedgerEntry {
    /// Bytes summed over all participating ranks.
    pub fn total_volume(&self) -> u64 {
        self.bytes * self.members as u64
    }

    /// Bytes on the wire for a ring all-reduce, `2B(g-1)/g` per rank.
    pub fn ring_wire_bytes(&self) -> f64 {
        let g = self.members as f64;
        2.0 * self.bytes as f64 * (g - 1.0) / g
    }

    pub fn crosses_nodes(&self) -> bool {
        matches!(self.scope, Scope::Inter | Scope::World)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    entries: Vec<LedgerEntry>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(&mut self, entry: LedgerEntry) {
        debug_assert!(entry.bytes > 0, "ledger entries carry a positive byte count");
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter_entries(&self, iter: usize) -> impl Iterator<Item = &LedgerEntry> {
        self.entries.iter().filter(move |e| e.iter == iter)
    }

    pub fn sum_bytes(&self, pred: impl Fn(&LedgerEntry) -> bool) -> u64 {
        self.entries.iter().filter(|e| pred(e)).map(|e| e.bytes).sum()
    }

    /// Per-layer element count carried by matching entries.
    pub fn layer_elements(&self, layer: &str, pred: impl Fn(&LedgerEntry) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|e| pred(e))
            .flat_map(|e| e.layers.iter())
            .filter(|l| l.layer == layer)
            .map(|l| l.elements)
            .sum()
    }

    pub fn last_iter(&self) -> Option<usize> {
        self.entries.iter().map(|e| e.iter).max()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut entries = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line)?);
        }
        Ok(Self { entries })
    }
}

/// Affine cost model `alpha + bytes / beta` per collective, per scope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyModel {
    pub intra_alpha_s: f64,
    pub intra_beta_bytes_per_s: f64,
    pub inter_alpha_s: f64,
    pub inter_beta_bytes_per_s: f64,
}

impl Default for LatencyModel {
    // NVLink-class intra-node links against a 100 Gbps inter-node fabric.
    fn default() -> Self {
        Self {
            intra_alpha_s: 5e-6,
            intra_beta_bytes_per_s: 150e9,
            inter_alpha_s: 2e-5,
            inter_beta_bytes_per_s: 12.5e9,
        }
    }
}

impl LatencyModel {
    pub fn cost(&self, scope: Scope, multi_node: bool, bytes: u64) -> f64 {
        let inter = match scope {
            Scope::Intra => false,
            Scope::Inter => true,
            Scope::World => multi_node,
        };
        let (alpha, beta) = if inter {
            (self.inter_alpha_s, self.inter_beta_bytes_per_s)
        } else {
            (self.intra_alpha_s, self.intra_beta_bytes_per_s)
        };
        alpha + bytes as f64 / beta
    }
}
