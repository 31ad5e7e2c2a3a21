//! Structured sparsity sets, their Euclidean projections, and binary masks.
//!
//! A constraint keeps the `keep_count` groups (filters, input channels or
//! kernel columns) with the largest Frobenius norm and zeroes the rest. Ties
//! on equal norm keep the lower group index.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{structural, Result};
use crate::tensor::{group_count_of, DenseTensor, GroupKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    FilterKeep,
    ChannelKeep,
    ShapeKeep,
}

impl ConstraintKind {
    pub fn group_kind(self) -> GroupKind {
        match self {
            ConstraintKind::FilterKeep => GroupKind::Filter,
            ConstraintKind::ChannelKeep => GroupKind::Channel,
            ConstraintKind::ShapeKeep => GroupKind::ShapePosition,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Keep {
    Count(usize),
    /// Fraction in `(0, 1]`, rounded up to a group count.
    Rate(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityConstraint {
    pub kind: ConstraintKind,
    pub keep: Keep,
}

impl SparsityConstraint {
    pub fn filter_keep(n: usize) -> Self {
        Self { kind: ConstraintKind::FilterKeep, keep: Keep::Count(n) }
    }

    pub fn channel_keep(n: usize) -> Self {
        Self { kind: ConstraintKind::ChannelKeep, keep: Keep::Count(n) }
    }

    pub fn shape_keep(n: usize) -> Self {
        Self { kind: ConstraintKind::ShapeKeep, keep: Keep::Count(n) }
    }

    pub fn with_rate(kind: ConstraintKind, rate: f64) -> Self {
        Self { kind, keep: Keep::Rate(rate) }
    }

    pub fn group_count(&self, dims: [usize; 4]) -> usize {
        group_count_of(dims, self.kind.group_kind())
    }

    /// Resolves the number of groups kept for a tensor of the given dims.
    pub fn keep_count(&self, dims: [usize; 4]) -> Result<usize> {
        let groups = self.group_count(dims);
        let k = match self.keep {
            Keep::Count(n) => n,
            Keep::Rate(r) => {
                if !(r > 0.0 && r <= 1.0) {
                    return Err(structural!("keep rate {r} outside (0, 1]"));
                }
                (r * groups as f64).ceil() as usize
            }
        };
        if k == 0 {
            return Err(structural!("{:?} keeps zero groups", self.kind));
        }
        if k > groups {
            return Err(structural!(
                "{:?} keeps {k} groups but the tensor has only {groups}",
                self.kind
            ));
        }
        Ok(k)
    }

    /// Whether `t` already lies in this constraint set.
    pub fn contains(&self, t: &DenseTensor) -> Result<bool> {
        let k = self.keep_count(t.dims4()?)?;
        let active = t
            .group_squared_norms(self.kind.group_kind())?
            .iter()
            .filter(|&&s| s > 0.0)
            .count();
        Ok(active <= k)
    }
}

/// Indices of the `k` largest values, ties broken toward the lower index.
/// Returned as a membership vector over all groups.
pub(crate) fn top_k_membership(scores: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = vec![false; scores.len()];
    for &i in order.iter().take(k) {
        keep[i] = true;
    }
    keep
}

fn zero_groups(t: &mut DenseTensor, group: GroupKind, keep: &[bool]) -> Result<()> {
    let [_, c, h, w] = t.dims4()?;
    let kk = h * w;
    for (idx, v) in t.data_mut().iter_mut().enumerate() {
        let slot = match group {
            GroupKind::Filter => idx / (c * kk),
            GroupKind::Channel => (idx / kk) % c,
            GroupKind::ShapePosition => idx % (c * kk),
        };
        if !keep[slot] {
            *v = 0.0;
        }
    }
    Ok(())
}

/// Euclidean projection of a conv tensor onto one structured sparsity set.
/// Surviving groups are left untouched.
pub fn project(t: &DenseTensor, c: &SparsityConstraint) -> Result<DenseTensor> {
    let dims = t.dims4()?;
    let k = c.keep_count(dims)?;
    let group = c.kind.group_kind();
    let scores = t.group_squared_norms(group)?;
    if k == scores.len() {
        return Ok(t.clone());
    }
    let keep = top_k_membership(&scores, k);
    let mut out = t.clone();
    zero_groups(&mut out, group, &keep)?;
    Ok(out)
}

fn check_distinct(cs: &[SparsityConstraint]) -> Result<()> {
    for (i, a) in cs.iter().enumerate() {
        if cs[..i].iter().any(|b| b.kind == a.kind) {
            return Err(structural!("duplicate constraint kind {:?}", a.kind));
        }
    }
    Ok(())
}

/// Applies the constraints one after another in exactly the given order.
///
/// Keep-top-k projections do not commute in general: zeroing filters changes
/// the channel norms seen by a later channel projection.
/// [`project_composite`] fixes a canonical order instead.
pub fn project_in_order(t: &DenseTensor, cs: &[SparsityConstraint]) -> Result<DenseTensor> {
    check_distinct(cs)?;
    let mut out = t.clone();
    for c in cs {
        out = project(&out, c)?;
    }
    Ok(out)
}

/// Projection onto the intersection of several constraints, applied
/// sequentially in the canonical order filter, channel, shape. The result
/// depends only on the set of constraints, never on their list order.
pub fn project_composite(t: &DenseTensor, cs: &[SparsityConstraint]) -> Result<DenseTensor> {
    check_distinct(cs)?;
    let mut sorted = cs.to_vec();
    sorted.sort_by_key(|c| c.kind);
    project_in_order(t, &sorted)
}

/// Binary tensor mirroring a weight tensor's shape.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SparsityMask {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl SparsityMask {
    pub fn new(shape: Vec<usize>, bits: Vec<bool>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != bits.len() || n == 0 {
            return Err(structural!("mask shape {shape:?} does not hold {} bits", bits.len()));
        }
        Ok(Self { shape, bits })
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), bits: vec![true; shape.iter().product()] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), bits: vec![false; shape.iter().product()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn density(&self) -> f64 {
        self.popcount() as f64 / self.len() as f64
    }

    pub fn is_all_ones(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    /// Bitwise OR of two masks of equal shape.
    pub fn union(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(structural!("mask union: {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| a | b).collect(),
        })
    }

    /// `t ⊙ mask`
    pub fn apply(&self, t: &DenseTensor) -> Result<DenseTensor> {
        if self.shape != t.shape() {
            return Err(structural!("mask {:?} applied to tensor {:?}", self.shape, t.shape()));
        }
        let mut out = t.clone();
        for (v, &b) in out.data_mut().iter_mut().zip(&self.bits) {
            if !b {
                *v = 0.0;
            }
        }
        Ok(out)
    }

    /// Whether every nonzero of `t` lies inside the mask.
    pub fn covers(&self, t: &DenseTensor) -> bool {
        self.shape == t.shape()
            && t.data().iter().zip(&self.bits).all(|(&v, &b)| b || v == 0.0)
    }

    /// Writes the mask as a 0/1 matrix: one row per leading index, the
    /// remaining dims flattened into columns. The first line is a
    /// `# shape=a,b,...` header so the flat bit dump can be reshaped.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        writeln!(w, "# shape={}", dims.join(","))?;
        let rows = self.shape[0];
        let cols = self.len() / rows;
        for r in 0..rows {
            let line: Vec<&str> = self.bits[r * cols..(r + 1) * cols]
                .iter()
                .map(|&b| if b { "1" } else { "0" })
                .collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let dims = header
            .strip_prefix("# shape=")
            .ok_or_else(|| structural!("mask csv missing shape header"))?;
        let shape = dims
            .split(',')
            .map(|d| d.trim().parse::<usize>().map_err(|e| structural!("bad dim {d:?}: {e}")))
            .collect::<Result<Vec<_>>>()?;
        let mut bits = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            for cell in line.split(',') {
                bits.push(match cell.trim() {
                    "1" => true,
                    "0" => false,
                    other => return Err(structural!("bad mask cell {other:?}")),
                });
            }
        }
        Self::new(shape, bits)
    }
}

/// Support of `t`: bit set iff the entry is nonzero.
pub fn extract_mask(t: &DenseTensor) -> SparsityMask {
    SparsityMask {
        shape: t.shape().to_vec(),
        bits: t.data().iter().map(|v| v.abs() > 0.0).collect(),
    }
}

/// Fraction of differing bits.
pub fn mask_drift(prev: &SparsityMask, cur: &SparsityMask) -> Result<f64> {
    if prev.shape != cur.shape {
        return Err(structural!("mask drift: {:?} vs {:?}", prev.shape, cur.shape));
    }
    let diff = prev.bits.iter().zip(&cur.bits).filter(|(a, b)| a != b).count();
    Ok(diff as f64 / prev.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], seed: u64) -> DenseTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseTensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Exhaustive search over all keep sets of size k. Among equally distant
    /// sets the lexicographically smallest index set wins.
    fn brute_force(t: &DenseTensor, c: &SparsityConstraint) -> DenseTensor {
        let dims = t.dims4().unwrap();
        let k = c.keep_count(dims).unwrap();
        let groups = c.group_count(dims);
        let mut best: Option<(f64, Vec<usize>, DenseTensor)> = None;
        for subset in 0u32..(1 << groups) {
            if subset.count_ones() as usize != k {
                continue;
            }
            let idx: Vec<usize> = (0..groups).filter(|g| subset & (1 << g) != 0).collect();
            let keep: Vec<bool> = (0..groups).map(|g| subset & (1 << g) != 0).collect();
            let mut cand = t.clone();
            zero_groups(&mut cand, c.kind.group_kind(), &keep).unwrap();
            let d = cand.sub(t).unwrap().squared_norm();
            let better = match &best {
                None => true,
                Some((bd, bidx, _)) => d < *bd || (d == *bd && idx < *bidx),
            };
            if better {
                best = Some((d, idx, cand));
            }
        }
        best.unwrap().2
    }

    #[test]
    fn full_keep_is_identity() {
        let t = random_tensor(&[4, 3, 3, 3], 1);
        assert_eq!(project(&t, &SparsityConstraint::filter_keep(4)).unwrap(), t);
        assert_eq!(project(&t, &SparsityConstraint::channel_keep(3)).unwrap(), t);
    }

    #[test]
    fn unique_support_is_kept() {
        let t = DenseTensor::new(vec![2, 1, 1, 1], vec![2.0, 0.0]).unwrap();
        let p = project(&t, &SparsityConstraint::filter_keep(1)).unwrap();
        assert_eq!(p.data(), &[2.0, 0.0]);
    }

    #[test]
    fn filter_projection_matches_exhaustive_oracle() {
        for seed in 0..20 {
            let t = random_tensor(&[4, 3, 3, 3], seed);
            let c = SparsityConstraint::filter_keep(2);
            assert_eq!(project(&t, &c).unwrap(), brute_force(&t, &c), "seed {seed}");
            let m = extract_mask(&project(&t, &c).unwrap());
            assert_eq!(m.popcount(), 54);
        }
    }

    #[test]
    fn ties_keep_lower_index() {
        let t = DenseTensor::filled(&[3, 2, 1, 1], 1.0);
        let p = project(&t, &SparsityConstraint::filter_keep(2)).unwrap();
        assert_eq!(p.data(), &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn keep_rate_rounds_up() {
        let c = SparsityConstraint::with_rate(ConstraintKind::ChannelKeep, 0.5);
        assert_eq!(c.keep_count([4, 3, 3, 3]).unwrap(), 2);
        assert_eq!(c.keep_count([4, 64, 3, 3]).unwrap(), 32);
        let bad = SparsityConstraint::with_rate(ConstraintKind::ChannelKeep, 0.0);
        assert!(bad.keep_count([4, 3, 3, 3]).is_err());
    }

    #[test]
    fn oversized_keep_count_is_structural() {
        let t = random_tensor(&[2, 2, 1, 1], 3);
        let err = project(&t, &SparsityConstraint::filter_keep(3)).unwrap_err();
        assert!(matches!(err, Error::Structural(_)));
    }

    #[test]
    fn composite_examples() {
        let t = random_tensor(&[4, 3, 3, 3], 9);
        let all = [SparsityConstraint::filter_keep(4), SparsityConstraint::channel_keep(3)];
        assert_eq!(project_composite(&t, &all).unwrap(), t);
        assert_eq!(project_composite(&t, &[]).unwrap(), t);
        let dup = [SparsityConstraint::filter_keep(1), SparsityConstraint::filter_keep(2)];
        assert!(project_composite(&t, &dup).is_err());
    }

    /// Sequential keep-top-k projections are order dependent: here the filter
    /// pass picks row 1 (norm² 4.5 > 4) and then column 0, while the channel
    /// pass picks column 1 (6.25 > 2.25) and then row 0.
    #[test]
    fn raw_sequential_order_can_change_support() {
        let t = DenseTensor::new(vec![2, 2, 1, 1], vec![0.0, 2.0, 1.5, 1.5]).unwrap();
        let f = SparsityConstraint::filter_keep(1);
        let c = SparsityConstraint::channel_keep(1);
        let fc = project_in_order(&t, &[f, c]).unwrap();
        let cf = project_in_order(&t, &[c, f]).unwrap();
        assert_eq!(fc.data(), &[0.0, 0.0, 1.5, 0.0]);
        assert_eq!(cf.data(), &[0.0, 2.0, 0.0, 0.0]);
        // The composite operator is order-free by construction.
        assert_eq!(project_composite(&t, &[f, c]).unwrap(), project_composite(&t, &[c, f]).unwrap());
    }

    #[test]
    fn mask_examples() {
        assert_eq!(extract_mask(&DenseTensor::zeros(&[2, 2])).popcount(), 0);
        assert!(extract_mask(&DenseTensor::filled(&[2, 2], 0.5)).is_all_ones());

        let a = SparsityMask::new(vec![4], vec![true, false, true, true]).unwrap();
        let b = SparsityMask::new(vec![4], vec![true, false, false, true]).unwrap();
        let not_a = SparsityMask::new(vec![4], vec![false, true, false, false]).unwrap();
        assert_eq!(mask_drift(&a, &a).unwrap(), 0.0);
        assert_eq!(mask_drift(&a, &not_a).unwrap(), 1.0);
        assert_eq!(mask_drift(&a, &b).unwrap(), 0.25);
        assert!(mask_drift(&a, &SparsityMask::ones(&[2, 2])).is_err());
    }

    #[test]
    fn mask_csv_round_trip() {
        let t = project(&random_tensor(&[3, 2, 2, 2], 4), &SparsityConstraint::channel_keep(1))
            .unwrap();
        let m = extract_mask(&t);
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# shape=3,2,2,2\n"));
        assert_eq!(text.lines().count(), 4);
        assert_eq!(SparsityMask::read_csv(&text).unwrap(), m);
    }

    fn arb_small_conv() -> impl Strategy<Value = DenseTensor> {
        (1usize..6, 1usize..6, 1usize..3, 1usize..3).prop_flat_map(|(o, c, h, w)| {
            prop::collection::vec(-3i32..=3, o * c * h * w).prop_map(move |d| {
                DenseTensor::new(vec![o, c, h, w], d.into_iter().map(f64::from).collect()).unwrap()
            })
        })
    }

    fn arb_constraint(t: &DenseTensor) -> impl Strategy<Value = SparsityConstraint> {
        let dims = t.dims4().unwrap();
        prop_oneof![
            Just(ConstraintKind::FilterKeep),
            Just(ConstraintKind::ChannelKeep),
            Just(ConstraintKind::ShapeKeep),
        ]
        .prop_flat_map(move |kind| {
            let groups = group_count_of(dims, kind.group_kind());
            (1..=groups).prop_map(move |k| SparsityConstraint { kind, keep: Keep::Count(k) })
        })
    }

    proptest! {
        #[test]
        fn projection_properties(
            (t, c) in arb_small_conv().prop_flat_map(|t| {
                let cs = arb_constraint(&t);
                (Just(t), cs)
            })
        ) {
            let p = project(&t, &c).unwrap();
            prop_assert_eq!(&project(&p, &c).unwrap(), &p);
            prop_assert!(p.sub(&t).unwrap().frobenius_norm() <= t.frobenius_norm());
            prop_assert!(c.contains(&p).unwrap());
            if c.group_count(t.dims4().unwrap()) <= 5 {
                prop_assert_eq!(&p, &brute_force(&t, &c));
            }
        }

        #[test]
        fn masks_are_constant_on_groups(t in arb_small_conv(), k in 1usize..3) {
            let [o, c, h, w] = t.dims4().unwrap();
            // strictly nonzero entries so the mask equals the kept-group indicator
            let t = DenseTensor::from_fn(t.shape(), |i| t.data()[i] + 10.0);
            for kind in [ConstraintKind::FilterKeep, ConstraintKind::ChannelKeep, ConstraintKind::ShapeKeep] {
                let sc = SparsityConstraint { kind, keep: Keep::Count(k.min(group_count_of([o, c, h, w], kind.group_kind()))) };
                let m = extract_mask(&project(&t, &sc).unwrap());
                let kept = sc.keep_count([o, c, h, w]).unwrap();
                let groups = sc.group_count([o, c, h, w]);
                prop_assert_eq!(m.popcount() * groups, m.len() * kept);
                for idx in 0..m.len() {
                    let (fo, fc, pos) = (idx / (c * h * w), (idx / (h * w)) % c, idx % (c * h * w));
                    let peer = match kind {
                        ConstraintKind::FilterKeep => fo * c * h * w,
                        ConstraintKind::ChannelKeep => fc * h * w,
                        ConstraintKind::ShapeKeep => pos,
                    };
                    prop_assert_eq!(m.bits()[idx], m.bits()[peer]);
                }
            }
        }

        #[test]
        fn composite_is_order_free_and_feasible(t in arb_small_conv(), kf in 1usize..4, kc in 1usize..4) {
            let [o, c, _, _] = t.dims4().unwrap();
            let f = SparsityConstraint::filter_keep(kf.min(o));
            let ch = SparsityConstraint::channel_keep(kc.min(c));
            let a = project_composite(&t, &[f, ch]).unwrap();
            let b = project_composite(&t, &[ch, f]).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(f.contains(&a).unwrap() && ch.contains(&a).unwrap());
        }
    }
}
