//! Dense row-major tensors and layer metadata.

use serde::{Deserialize, Serialize};

use crate::error::{structural, Error, Result};

/// Real-valued N-dimensional array in row-major order.
///
/// Conv weights are `[c_out, c_in, k_h, k_w]`, fully connected weights are
/// `[d_out, d_in]`, biases are `[d]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Which structural slices a group-norm reduction runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupKind {
    /// One group per output filter `W[o, :, :, :]`.
    Filter,
    /// One group per input channel `W[:, c, :, :]`.
    Channel,
    /// One group per kernel column `W[:, c, u, v]`, flattened over `(c, u, v)`.
    ShapePosition,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(structural!("shape {shape:?} must be non-empty with positive dims"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(structural!(
                "shape {shape:?} holds {n} elements but data has {}",
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite entry at flat index {i}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        assert!(n > 0, "zero-sized shape {shape:?}");
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        assert!(n > 0, "zero-sized shape {shape:?}");
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// The four conv dimensions, or a structural error for any other rank.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [o, c, h, w] => Ok([o, c, h, w]),
            _ => Err(structural!("expected a rank-4 tensor, got shape {:?}", self.shape)),
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.squared_norm().sqrt()
    }

    /// Squared Frobenius norm of every structural group, in group-index order.
    pub fn group_squared_norms(&self, group: GroupKind) -> Result<Vec<f64>> {
        let [o, c, h, w] = self.dims4()?;
        let kk = h * w;
        let mut out = vec![0.0; group_count_of([o, c, h, w], group)];
        for (idx, v) in self.data.iter().enumerate() {
            let slot = match group {
                GroupKind::Filter => idx / (c * kk),
                GroupKind::Channel => (idx / kk) % c,
                GroupKind::ShapePosition => idx % (c * kk),
            };
            out[slot] += v * v;
        }
        Ok(out)
    }

    pub fn group_norms(&self, group: GroupKind) -> Result<Vec<f64>> {
        Ok(self.group_squared_norms(group)?.into_iter().map(f64::sqrt).collect())
    }

    fn check_same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(structural!(
                "{op}: shape mismatch {:?} vs {:?}",
                self.shape,
                other.shape
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| alpha * v).collect(),
        }
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &Self) -> Result<()> {
        self.check_same_shape(x, "axpy")?;
        for (y, xv) in self.data.iter_mut().zip(&x.data) {
            *y += alpha * xv;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, x: &Self) -> Result<()> {
        self.check_same_shape(x, "add_assign")?;
        for (y, xv) in self.data.iter_mut().zip(&x.data) {
            *y += xv;
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, alpha: f64) {
        for y in &mut self.data {
            *y *= alpha;
        }
    }

    fn zip_with(&self, other: &Self, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }
}

/// Number of groups of `kind` in a conv tensor of the given dims.
pub fn group_count_of(dims: [usize; 4], kind: GroupKind) -> usize {
    let [o, c, h, w] = dims;
    match kind {
        GroupKind::Filter => o,
        GroupKind::Channel => c,
        GroupKind::ShapePosition => c * h * w,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    FullyConnected,
    Bias,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub shape: Vec<usize>,
    pub prunable: bool,
}

impl LayerSpec {
    pub fn conv(name: impl Into<String>, shape: [usize; 4]) -> Self {
        Self { name: name.into(), kind: LayerKind::Conv, shape: shape.to_vec(), prunable: true }
    }

    pub fn fully_connected(name: impl Into<String>, d_out: usize, d_in: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::FullyConnected,
            shape: vec![d_out, d_in],
            prunable: false,
        }
    }

    pub fn bias(name: impl Into<String>, d: usize) -> Self {
        Self { name: name.into(), kind: LayerKind::Bias, shape: vec![d], prunable: false }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let want = match self.kind {
            LayerKind::Conv => 4,
            LayerKind::FullyConnected => 2,
            LayerKind::Bias => 1,
        };
        if self.shape.len() != want || self.shape.contains(&0) {
            return Err(structural!(
                "layer {}: {:?} needs {want} positive dims, got {:?}",
                self.name,
                self.kind,
                self.shape
            ));
        }
        if self.prunable && self.kind != LayerKind::Conv {
            return Err(structural!("layer {}: only conv layers may be prunable", self.name));
        }
        Ok(())
    }

    pub fn dims4(&self) -> Result<[usize; 4]> {
        match (self.kind, &self.shape[..]) {
            (LayerKind::Conv, &[o, c, h, w]) => Ok([o, c, h, w]),
            _ => Err(structural!("layer {} is not a conv layer", self.name)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn frobenius_examples() {
        assert_eq!(DenseTensor::zeros(&[2, 3, 1, 4]).frobenius_norm(), 0.0);
        assert_eq!(DenseTensor::filled(&[1, 1, 1, 1], 3.0).frobenius_norm(), 3.0);
        assert_eq!(DenseTensor::filled(&[2, 2], 1.0).frobenius_norm(), 2.0);
    }

    #[test]
    fn group_norm_examples() {
        let t = DenseTensor::new(vec![2, 1, 1, 1], vec![2.0, 0.0]).unwrap();
        assert_eq!(t.group_norms(GroupKind::Filter).unwrap(), vec![2.0, 0.0]);

        let ones = DenseTensor::filled(&[2, 3, 1, 1], 1.0);
        let s2 = 2f64.sqrt();
        assert_eq!(ones.group_norms(GroupKind::Channel).unwrap(), vec![s2, s2, s2]);
    }

    #[test]
    fn shape_position_indexes_columns() {
        // W[o, c, u, v] = o*100 + c*10 + u*2 + v on [2, 2, 1, 2]
        let t = DenseTensor::from_fn(&[2, 2, 1, 2], |i| {
            let (o, c, v) = (i / 4, (i / 2) % 2, i % 2);
            (o * 100 + c * 10 + v) as f64
        });
        let sq = t.group_squared_norms(GroupKind::ShapePosition).unwrap();
        // column (c=1, v=0): entries 10 and 110
        assert_eq!(sq[2], 10.0f64.powi(2) + 110.0f64.powi(2));
        assert_eq!(sq.len(), 4);
    }

    #[test]
    fn group_norms_need_rank4() {
        let t = DenseTensor::zeros(&[3, 3]);
        assert!(matches!(t.group_norms(GroupKind::Filter), Err(Error::Structural(_))));
    }

    #[test]
    fn arithmetic_identities() {
        let x = DenseTensor::from_fn(&[2, 3], |i| i as f64 - 2.5);
        assert_eq!(x.add(&DenseTensor::zeros(&[2, 3])).unwrap(), x);
        assert_eq!(x.scale(1.0), x);
        assert_eq!(x.hadamard(&DenseTensor::filled(&[2, 3], 1.0)).unwrap(), x);
        assert!(x.add(&DenseTensor::zeros(&[3, 2])).is_err());

        let mut y = x.clone();
        y.axpy(2.0, &x).unwrap();
        assert_eq!(y, x.scale(3.0));
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert!(DenseTensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(matches!(
            DenseTensor::new(vec![1], vec![f64::NAN]),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn layer_spec_validation() {
        assert!(LayerSpec::conv("c", [4, 3, 3, 3]).validate().is_ok());
        assert!(LayerSpec::fully_connected("f", 2, 5).validate().is_ok());
        let mut bad = LayerSpec::fully_connected("f", 2, 5);
        bad.prunable = true;
        assert!(bad.validate().is_err());
        let wrong_rank = LayerSpec { shape: vec![4, 3], ..LayerSpec::conv("c", [1, 1, 1, 1]) };
        assert!(wrong_rank.validate().is_err());
    }

    fn arb_conv() -> impl Strategy<Value = DenseTensor> {
        (1usize..5, 1usize..5, 1usize..4, 1usize..4).prop_flat_map(|(o, c, h, w)| {
            prop::collection::vec(-10.0f64..10.0, o * c * h * w)
                .prop_map(move |d| DenseTensor::new(vec![o, c, h, w], d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn group_norms_decompose_frobenius(t in arb_conv()) {
            let total = t.squared_norm();
            for kind in [GroupKind::Filter, GroupKind::Channel, GroupKind::ShapePosition] {
                let s: f64 = t.group_norms(kind).unwrap().iter().map(|n| n * n).sum();
                let tol = 1e-10 * total.max(1e-300);
                prop_assert!((s - total).abs() <= tol, "{kind:?}: {s} vs {total}");
            }
        }

        #[test]
        fn arithmetic_is_deterministic(t in arb_conv()) {
            let a = t.add(&t).unwrap().hadamard(&t).unwrap();
            let b = t.add(&t).unwrap().hadamard(&t).unwrap();
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
