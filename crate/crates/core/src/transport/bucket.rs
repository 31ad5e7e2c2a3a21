//! Greedy coalescing of many small payloads into ~32 MiB buffers.

use crate::error::{structural, Result};
use crate::tensor::DenseTensor;
use crate::transport::ledger::ELEMENT_BYTES;

pub const BUCKET_CAP_BYTES: u64 = 32 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    /// Position of the tensor in the input list.
    pub index: usize,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bucket {
    pub data: Vec<f64>,
    pub segments: Vec<Segment>,
}

impl Bucket {
    pub fn bytes(&self) -> u64 {
        self.data.len() as u64 * ELEMENT_BYTES
    }
}

/// Packs tensors in order, opening a new bucket only when the next tensor
/// would push the current one past `cap_bytes`. Tensors are never split; one
/// larger than the cap gets a bucket of its own.
pub fn bucketize_with_cap(payloads: &[DenseTensor], cap_bytes: u64) -> Vec<Bucket> {
    let mut buckets: Vec<Bucket> = Vec::new();
    for (index, t) in payloads.iter().enumerate() {
        let bytes = t.len() as u64 * ELEMENT_BYTES;
        if bytes > cap_bytes {
            log::warn!("payload {index} ({bytes} bytes) exceeds the bucket cap, sent unsplit");
        }
        let fits = buckets
            .last()
            .is_some_and(|b| b.bytes() + bytes <= cap_bytes);
        if !fits {
            buckets.push(Bucket { data: Vec::new(), segments: Vec::new() });
        }
        let b = buckets.last_mut().expect("bucket just ensured");
        b.segments.push(Segment { index, offset: b.data.len(), len: t.len() });
        b.data.extend_from_slice(t.data());
    }
    buckets
}

pub fn bucketize(payloads: &[DenseTensor]) -> Vec<Bucket> {
    bucketize_with_cap(payloads, BUCKET_CAP_BYTES)
}

/// Splits reduced bucket buffers back into tensors of the given shapes.
pub fn unbucketize(
    buckets: &[Bucket],
    reduced: &[Vec<f64>],
    shapes: &[Vec<usize>],
) -> Result<Vec<DenseTensor>> {
    let mut out: Vec<Option<DenseTensor>> = vec![None; shapes.len()];
    for (b, data) in buckets.iter().zip(reduced) {
        if data.len() != b.data.len() {
            return Err(structural!("reduced bucket has {} elements, expected {}", data.len(), b.data.len()));
        }
        for s in &b.segments {
            let shape = shapes
                .get(s.index)
                .ok_or_else(|| structural!("segment for unknown payload {}", s.index))?;
            out[s.index] = Some(DenseTensor::new(shape.clone(), data[s.offset..s.offset + s.len].to_vec())?);
        }
    }
    out.into_iter()
        .enumerate()
        .map(|(i, t)| t.ok_or_else(|| structural!("payload {i} missing from buckets")))
        .collect()
}
