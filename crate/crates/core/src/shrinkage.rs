//! Physical shrinkage of conv buffers to their kept filter × channel
//! rectangle, and zero-filled recovery.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{structural, Result};
use crate::sparsity::SparsityMask;
use crate::tensor::{DenseTensor, LayerSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeepIndexSets {
    pub layer: String,
    pub dims: [usize; 4],
    /// Output filters with at least one active mask bit, ascending.
    pub k_out: Vec<usize>,
    /// Input channels with at least one active mask bit, ascending.
    pub k_in: Vec<usize>,
}

impl KeepIndexSets {
    /// Keeps every filter and channel.
    pub fn full(layer: &LayerSpec) -> Result<Self> {
        let dims = layer.dims4()?;
        Ok(Self {
            layer: layer.name.clone(),
            dims,
            k_out: (0..dims[0]).collect(),
            k_in: (0..dims[1]).collect(),
        })
    }

    pub fn compact_shape(&self) -> [usize; 4] {
        [self.k_out.len(), self.k_in.len(), self.dims[2], self.dims[3]]
    }

    pub fn compact_len(&self) -> usize {
        self.compact_shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.compact_len() == 0
    }

    /// Indicator of the kept rectangle `k_out × k_in × all × all`.
    pub fn rectangle_mask(&self) -> SparsityMask {
        let [o, c, h, w] = self.dims;
        let mut rows = vec![false; o];
        let mut cols = vec![false; c];
        self.k_out.iter().for_each(|&i| rows[i] = true);
        self.k_in.iter().for_each(|&i| cols[i] = true);
        let bits = (0..o * c * h * w)
            .map(|idx| rows[idx / (c * h * w)] && cols[(idx / (h * w)) % c])
            .collect();
        SparsityMask::new(self.dims.to_vec(), bits).expect("dims are consistent")
    }
}

/// A kept rectangle packed contiguously. May hold zero elements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactBuffer {
    pub layer: String,
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

/// Keep sets from a global mask: an index survives iff any bit of its slice
/// is set.
pub fn derive_keep_sets(mask: &SparsityMask, layer: &LayerSpec) -> Result<KeepIndexSets> {
    let dims = layer.dims4()?;
    if mask.shape() != layer.shape.as_slice() {
        return Err(structural!(
            "mask {:?} does not match layer {} {:?}",
            mask.shape(),
            layer.name,
            layer.shape
        ));
    }
    let [o, c, h, w] = dims;
    let mut any_out = vec![false; o];
    let mut any_in = vec![false; c];
    for (idx, &b) in mask.bits().iter().enumerate() {
        if b {
            any_out[idx / (c * h * w)] = true;
            any_in[(idx / (h * w)) % c] = true;
        }
    }
    let collect = |v: &[bool]| v.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
    Ok(KeepIndexSets {
        layer: layer.name.clone(),
        dims,
        k_out: collect(&any_out),
        k_in: collect(&any_in),
    })
}

fn check_dims(keep: &KeepIndexSets, shape: &[usize]) -> Result<()> {
    if shape != keep.dims.as_slice() {
        return Err(structural!(
            "keep sets for {:?} used with tensor {:?}",
            keep.dims,
            shape
        ));
    }
    let [o, c, _, _] = keep.dims;
    let ok = |v: &[usize], n: usize| v.windows(2).all(|p| p[0] < p[1]) && v.iter().all(|&i| i < n);
    if !ok(&keep.k_out, o) || !ok(&keep.k_in, c) {
        return Err(structural!("keep sets for {} are not strictly increasing in range", keep.layer));
    }
    Ok(())
}

/// `compact[p, q, h, w] = dense[k_out[p], k_in[q], h, w]`
pub fn compress(dense: &DenseTensor, keep: &KeepIndexSets) -> Result<CompactBuffer> {
    check_dims(keep, dense.shape())?;
    let [_, c, h, w] = keep.dims;
    let kk = h * w;
    let src = dense.data();
    let mut data = Vec::with_capacity(keep.compact_len());
    for &o in &keep.k_out {
        for &ci in &keep.k_in {
            let start = (o * c + ci) * kk;
            data.extend_from_slice(&src[start..start + kk]);
        }
    }
    Ok(CompactBuffer { layer: keep.layer.clone(), shape: keep.compact_shape(), data })
}

/// Scatters a compact buffer into a zero tensor of `full_shape`.
pub fn decompress(
    compact: &CompactBuffer,
    keep: &KeepIndexSets,
    full_shape: &[usize],
) -> Result<DenseTensor> {
    check_dims(keep, full_shape)?;
    if compact.shape != keep.compact_shape() || compact.data.len() != keep.compact_len() {
        return Err(structural!(
            "compact buffer {:?} does not match keep sets {:?}",
            compact.shape,
            keep.compact_shape()
        ));
    }
    let [_, c, h, w] = keep.dims;
    let kk = h * w;
    let mut out = DenseTensor::zeros(full_shape);
    let dst = out.data_mut();
    let mut chunks = compact.data.chunks_exact(kk);
    for &o in &keep.k_out {
        for &ci in &keep.k_in {
            let start = (o * c + ci) * kk;
            dst[start..start + kk].copy_from_slice(chunks.next().expect("length checked"));
        }
    }
    Ok(out)
}

/// `|k_out| · |k_in| · k_h · k_w`
pub fn shrunk_payload_elements(keep: &KeepIndexSets, layer: &LayerSpec) -> Result<usize> {
    let dims = layer.dims4()?;
    if dims != keep.dims {
        return Err(structural!("keep sets do not belong to layer {}", layer.name));
    }
    Ok(keep.compact_len())
}

/// Per-rank cache of keep sets keyed by layer name.
///
/// While masks are dynamic an entry is reused only if the mask is unchanged.
/// Once frozen, the cached entry is returned without looking at the mask.
#[derive(Debug, Clone, Default)]
pub struct KeepCache {
    entries: BTreeMap<String, (SparsityMask, KeepIndexSets)>,
    derivations: u64,
    hits: u64,
}

impl KeepCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, layer: &LayerSpec, mask: &SparsityMask, frozen: bool) -> Result<&KeepIndexSets> {
        let reuse = match self.entries.get(&layer.name) {
            Some(_) if frozen => true,
            Some((m, _)) => m == mask,
            None => false,
        };
        if reuse {
            self.hits += 1;
        } else {
            let keep = derive_keep_sets(mask, layer)?;
            self.derivations += 1;
            self.entries.insert(layer.name.clone(), (mask.clone(), keep));
        }
        Ok(&self.entries[&layer.name].1)
    }

    pub fn derivations(&self) -> u64 {
        self.derivations
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }
}
