//! Desk-scale local objectives, synthetic data shards, and the proximal SGD
//! inner solver.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, structural, Result};
use crate::tensor::{DenseTensor, LayerKind, LayerSpec};

/// Mixes a root seed with a path of stream identifiers (splitmix64 finalizer).
pub fn derive_seed(root: u64, parts: &[u64]) -> u64 {
    let mut s = root ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        s = s.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = s;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        s = z ^ (z >> 31);
    }
    s
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    /// `½‖X Wᵀ − Y‖²` over the shard.
    Quadratic,
    /// Mean binary cross-entropy of `x·w + b`.
    Logistic,
    /// Conv stack with tanh, one fc layer, softmax cross-entropy.
    TinyConvNet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub kind: WorkloadKind,
    pub samples_per_rank: usize,
    /// Input dimension for the quadratic and logistic workloads.
    pub features: usize,
    /// Output columns of the quadratic workload.
    pub outputs: usize,
    pub noise: f64,
    pub image_size: usize,
    pub input_channels: usize,
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub classes: usize,
    /// Optional CSV of `features..., target` rows, sharded in contiguous blocks.
    pub data_csv: Option<std::path::PathBuf>,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            kind: WorkloadKind::TinyConvNet,
            samples_per_rank: 64,
            features: 8,
            outputs: 1,
            noise: 0.1,
            image_size: 8,
            input_channels: 3,
            conv_channels: vec![8],
            kernel: 3,
            classes: 4,
            data_csv: None,
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_rank == 0 {
            return Err(config_err!("samples_per_rank must be positive"));
        }
        match self.kind {
            WorkloadKind::Quadratic | WorkloadKind::Logistic => {
                if self.features == 0 || self.outputs == 0 {
                    return Err(config_err!("features and outputs must be positive"));
                }
            }
            WorkloadKind::TinyConvNet => {
                if self.image_size == 0 || self.input_channels == 0 || self.classes < 2 {
                    return Err(config_err!("conv net needs positive image size/channels and ≥ 2 classes"));
                }
                if self.kernel.is_multiple_of(2) || self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
                    return Err(config_err!("conv net needs an odd kernel and positive conv widths"));
                }
            }
        }
        if !(self.noise >= 0.0) {
            return Err(config_err!("noise must be non-negative"));
        }
        Ok(())
    }

    /// Parameter layers this configuration builds, in order.
    pub fn layers(&self) -> Vec<LayerSpec> {
        build_layers(self)
    }

    fn input_dim(&self) -> usize {
        match self.kind {
            WorkloadKind::TinyConvNet => self.input_channels * self.image_size * self.image_size,
            _ => self.features,
        }
    }

    fn target_dim(&self) -> usize {
        match self.kind {
            WorkloadKind::Quadratic => self.outputs,
            _ => 1,
        }
    }
}

/// One rank's rows. Features and targets are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub rows: usize,
    pub dim: usize,
    pub target_dim: usize,
    pub features: Vec<f64>,
    pub targets: Vec<f64>,
}

impl Shard {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets[i * self.target_dim..(i + 1) * self.target_dim]
    }
}

#[derive(Debug, Clone)]
pub struct Workload {
    config: WorkloadConfig,
    layers: Vec<LayerSpec>,
    shards: Vec<Shard>,
}

impl Workload {
    /// Synthetic data for `world_size` ranks, drawn in one stream and split
    /// into equal contiguous shards.
    pub fn generate(config: &WorkloadConfig, world_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if let Some(path) = &config.data_csv {
            let (x, y) = load_csv(path)?;
            return Self::from_rows(config, x, y, world_size);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xDA7A]));
        let d = config.input_dim();
        let n = config.samples_per_rank * world_size;
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        match config.kind {
            WorkloadKind::Quadratic => {
                let k = config.outputs;
                let planted: Vec<f64> = (0..k * d).map(|_| normal(&mut rng)).collect();
                for _ in 0..n {
                    let row: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
                    let t: Vec<f64> = (0..k)
                        .map(|o| dot(&planted[o * d..(o + 1) * d], &row) + config.noise * normal(&mut rng))
                        .collect();
                    x.push(row);
                    y.push(t);
                }
            }
            WorkloadKind::Logistic => {
                let planted: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
                for _ in 0..n {
                    let row: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
                    let s = dot(&planted, &row) + config.noise * normal(&mut rng);
                    x.push(row);
                    y.push(vec![if s > 0.0 { 1.0 } else { 0.0 }]);
                }
            }
            WorkloadKind::TinyConvNet => {
                let c = config.classes;
                let teacher: Vec<f64> = (0..c * d).map(|_| normal(&mut rng)).collect();
                for _ in 0..n {
                    let row: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
                    let label = (0..c)
                        .map(|o| dot(&teacher[o * d..(o + 1) * d], &row))
                        .enumerate()
                        .max_by(|a, b| a.1.total_cmp(&b.1))
                        .map(|(i, _)| i)
                        .expect("at least two classes");
                    x.push(row);
                    y.push(vec![label as f64]);
                }
            }
        }
        Self::from_rows(config, x, y, world_size)
    }

    /// Splits rows into `world_size` equal contiguous shards, dropping any
    /// remainder rows.
    pub fn from_rows(
        config: &WorkloadConfig,
        x: Vec<Vec<f64>>,
        y: Vec<Vec<f64>>,
        world_size: usize,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.input_dim();
        let t = config.target_dim();
        if x.len() != y.len() {
            return Err(structural!("{} feature rows but {} target rows", x.len(), y.len()));
        }
        if let Some(bad) = x.iter().position(|r| r.len() != d) {
            return Err(structural!("row {bad} has {} features, expected {d}", x[bad].len()));
        }
        if let Some(bad) = y.iter().position(|r| r.len() != t) {
            return Err(structural!("row {bad} has {} targets, expected {t}", y[bad].len()));
        }
        if config.kind == WorkloadKind::TinyConvNet {
            if let Some(bad) = y.iter().position(|r| r[0] < 0.0 || r[0] as usize >= config.classes || r[0].fract() != 0.0) {
                return Err(structural!("row {bad} has label {} outside 0..{}", y[bad][0], config.classes));
            }
        }
        let per = x.len() / world_size;
        if per == 0 {
            return Err(structural!("{} rows cannot fill {world_size} shards", x.len()));
        }
        if per * world_size != x.len() {
            log::warn!("dropping {} rows so shards are equal-sized", x.len() - per * world_size);
        }
        let shards = (0..world_size)
            .map(|r| Shard {
                rows: per,
                dim: d,
                target_dim: t,
                features: x[r * per..(r + 1) * per].concat(),
                targets: y[r * per..(r + 1) * per].concat(),
            })
            .collect();
        let layers = build_layers(config);
        Ok(Self { config: config.clone(), layers, shards })
    }

    pub fn config(&self) -> &WorkloadConfig {
        &self.config
    }

    pub fn kind(&self) -> WorkloadKind {
        self.config.kind
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn shards(&self) -> &[Shard] {
        &self.shards
    }

    pub fn shard(&self, rank: usize) -> &Shard {
        &self.shards[rank]
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::numel).sum()
    }

    /// Scaled Gaussian weights, zero biases.
    pub fn init_params(&self, seed: u64) -> Vec<DenseTensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x1417]));
        self.layers
            .iter()
            .map(|l| match l.kind {
                LayerKind::Bias => DenseTensor::zeros(&l.shape),
                _ => {
                    let fan_in: usize = l.shape[1..].iter().product();
                    let scale = 1.0 / (fan_in as f64).sqrt();
                    DenseTensor::from_fn(&l.shape, |_| scale * normal(&mut rng))
                }
            })
            .collect()
    }

    fn check_params(&self, params: &[DenseTensor]) -> Result<()> {
        if params.len() != self.layers.len() {
            return Err(structural!("{} tensors for {} layers", params.len(), self.layers.len()));
        }
        for (p, l) in params.iter().zip(&self.layers) {
            if p.shape() != l.shape.as_slice() {
                return Err(structural!("layer {} expects {:?}, got {:?}", l.name, l.shape, p.shape()));
            }
        }
        Ok(())
    }

    /// Loss and gradient on the given rows of a shard.
    pub fn loss_and_grad(
        &self,
        params: &[DenseTensor],
        shard: &Shard,
        rows: &[usize],
    ) -> Result<(f64, Vec<DenseTensor>)> {
        self.check_params(params)?;
        if shard.dim != self.config.input_dim() {
            return Err(structural!("shard dim {} does not fit the model", shard.dim));
        }
        if rows.is_empty() {
            return Err(structural!("empty batch"));
        }
        match self.config.kind {
            WorkloadKind::Quadratic => Ok(quadratic(params, shard, rows)),
            WorkloadKind::Logistic => Ok(logistic(params, shard, rows)),
            WorkloadKind::TinyConvNet => Ok(conv_net(&self.config, params, shard, rows)),
        }
    }

    pub fn full_loss_and_grad(&self, params: &[DenseTensor], rank: usize) -> Result<(f64, Vec<DenseTensor>)> {
        let shard = &self.shards[rank];
        let rows: Vec<usize> = (0..shard.rows).collect();
        self.loss_and_grad(params, shard, &rows)
    }

    /// Minimizer of `Σ_r f_r(w) + λ/2 ‖w‖²` for the quadratic workload.
    pub fn quadratic_optimum(&self, lambda: f64) -> Result<DenseTensor> {
        if self.config.kind != WorkloadKind::Quadratic {
            return Err(structural!("closed-form optimum exists only for the quadratic workload"));
        }
        let d = self.config.features;
        let k = self.config.outputs;
        let mut gram = vec![0.0; d * d];
        let mut rhs = vec![0.0; d * k];
        for s in &self.shards {
            for i in 0..s.rows {
                let x = s.row(i);
                for a in 0..d {
                    for b in 0..d {
                        gram[a * d + b] += x[a] * x[b];
                    }
                    for o in 0..k {
                        rhs[a * k + o] += x[a] * s.target(i)[o];
                    }
                }
            }
        }
        for a in 0..d {
            gram[a * d + a] += lambda;
        }
        let sol = solve_linear(gram, rhs, d, k)?;
        // sol is d × k; parameters are stored k × d
        Ok(DenseTensor::from_fn(&[k, d], |idx| sol[(idx % d) * k + idx / d]))
    }
}

fn build_layers(c: &WorkloadConfig) -> Vec<LayerSpec> {
    match c.kind {
        WorkloadKind::Quadratic => vec![LayerSpec::fully_connected("w", c.outputs, c.features)],
        WorkloadKind::Logistic => {
            vec![LayerSpec::fully_connected("w", 1, c.features), LayerSpec::bias("b", 1)]
        }
        WorkloadKind::TinyConvNet => {
            let mut layers = Vec::new();
            let mut cin = c.input_channels;
            for (i, &cout) in c.conv_channels.iter().enumerate() {
                layers.push(LayerSpec::conv(format!("conv{}", i + 1), [cout, cin, c.kernel, c.kernel]));
                layers.push(LayerSpec::bias(format!("conv{}.bias", i + 1), cout));
                cin = cout;
            }
            let flat = cin * c.image_size * c.image_size;
            layers.push(LayerSpec::fully_connected("fc", c.classes, flat));
            layers.push(LayerSpec::bias("fc.bias", c.classes));
            layers
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn quadratic(params: &[DenseTensor], shard: &Shard, rows: &[usize]) -> (f64, Vec<DenseTensor>) {
    let w = &params[0];
    let [k, d] = [w.shape()[0], w.shape()[1]];
    let mut grad = DenseTensor::zeros(w.shape());
    let mut loss = 0.0;
    for &i in rows {
        let x = shard.row(i);
        for o in 0..k {
            let r = dot(&w.data()[o * d..(o + 1) * d], x) - shard.target(i)[o];
            loss += 0.5 * r * r;
            for (g, xv) in grad.data_mut()[o * d..(o + 1) * d].iter_mut().zip(x) {
                *g += r * xv;
            }
        }
    }
    (loss, vec![grad])
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn logistic(params: &[DenseTensor], shard: &Shard, rows: &[usize]) -> (f64, Vec<DenseTensor>) {
    let (w, b) = (&params[0], params[1].data()[0]);
    let mut gw = DenseTensor::zeros(w.shape());
    let mut gb = 0.0;
    let mut loss = 0.0;
    let inv = 1.0 / rows.len() as f64;
    for &i in rows {
        let x = shard.row(i);
        let y = shard.target(i)[0];
        let z = dot(w.data(), x) + b;
        loss += softplus(z) - y * z;
        let e = sigmoid(z) - y;
        for (g, xv) in gw.data_mut().iter_mut().zip(x) {
            *g += e * xv * inv;
        }
        gb += e * inv;
    }
    (loss * inv, vec![gw, DenseTensor::filled(&[1], gb)])
}

/// `[c, s, s]` input to `[c·k·k, s·s]` columns, zero "same" padding.
fn im2col(x: &[f64], c: usize, s: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = s * s;
    let mut cols = vec![0.0; c * k * k * hw];
    for ci in 0..c {
        for u in 0..k {
            for v in 0..k {
                let row = (ci * k + u) * k + v;
                for y in 0..s {
                    let iy = y as isize + u as isize - pad;
                    if iy < 0 || iy >= s as isize {
                        continue;
                    }
                    for xx in 0..s {
                        let ix = xx as isize + v as isize - pad;
                        if ix < 0 || ix >= s as isize {
                            continue;
                        }
                        cols[row * hw + y * s + xx] = x[(ci * s + iy as usize) * s + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], c: usize, s: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = s * s;
    let mut x = vec![0.0; c * hw];
    for ci in 0..c {
        for u in 0..k {
            for v in 0..k {
                let row = (ci * k + u) * k + v;
                for y in 0..s {
                    let iy = y as isize + u as isize - pad;
                    if iy < 0 || iy >= s as isize {
                        continue;
                    }
                    for xx in 0..s {
                        let ix = xx as isize + v as isize - pad;
                        if ix < 0 || ix >= s as isize {
                            continue;
                        }
                        x[(ci * s + iy as usize) * s + ix as usize] += cols[row * hw + y * s + xx];
                    }
                }
            }
        }
    }
    x
}

/// `out[m×n] = a[m×p] · b[p×n]`
fn matmul(a: &[f64], b: &[f64], m: usize, p: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for t in 0..p {
            let av = a[i * p + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn conv_net(cfg: &WorkloadConfig, params: &[DenseTensor], shard: &Shard, rows: &[usize]) -> (f64, Vec<DenseTensor>) {
    let s = cfg.image_size;
    let hw = s * s;
    let k = cfg.kernel;
    let depth = cfg.conv_channels.len();
    let classes = cfg.classes;
    let mut grads: Vec<DenseTensor> = params.iter().map(|p| DenseTensor::zeros(p.shape())).collect();
    let inv = 1.0 / rows.len() as f64;
    let mut loss = 0.0;

    for &i in rows {
        // forward
        let mut acts: Vec<Vec<f64>> = vec![shard.row(i).to_vec()];
        let mut cols_cache: Vec<Vec<f64>> = Vec::with_capacity(depth);
        let mut cin = cfg.input_channels;
        for l in 0..depth {
            let cout = cfg.conv_channels[l];
            let cols = im2col(&acts[l], cin, s, k);
            let mut pre = matmul(params[2 * l].data(), &cols, cout, cin * k * k, hw);
            let bias = params[2 * l + 1].data();
            for o in 0..cout {
                pre[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = (*v + bias[o]).tanh());
            }
            cols_cache.push(cols);
            acts.push(pre);
            cin = cout;
        }
        let h = &acts[depth];
        let fc = params[2 * depth].data();
        let fcb = params[2 * depth + 1].data();
        let flat = h.len();
        let logits: Vec<f64> = (0..classes).map(|c| dot(&fc[c * flat..(c + 1) * flat], h) + fcb[c]).collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
        let label = shard.target(i)[0] as usize;
        loss += mx + z.ln() - logits[label];

        // backward
        let mut dlogits: Vec<f64> = logits.iter().map(|v| (v - mx).exp() / z).collect();
        dlogits[label] -= 1.0;
        let mut dh = vec![0.0; flat];
        {
            let (gfc, rest) = grads[2 * depth..].split_at_mut(1);
            let gfc = gfc[0].data_mut();
            let gfcb = rest[0].data_mut();
            for c in 0..classes {
                let g = dlogits[c] * inv;
                gfcb[c] += g;
                for (j, hv) in h.iter().enumerate() {
                    gfc[c * flat + j] += g * hv;
                    dh[j] += dlogits[c] * fc[c * flat + j];
                }
            }
        }
        let mut da = dh;
        for l in (0..depth).rev() {
            let cout = cfg.conv_channels[l];
            let cin = if l == 0 { cfg.input_channels } else { cfg.conv_channels[l - 1] };
            let a = &acts[l + 1];
            let dpre: Vec<f64> = da.iter().zip(a).map(|(g, av)| g * (1.0 - av * av)).collect();
            let cols = &cols_cache[l];
            let p = cin * k * k;
            {
                let gw = grads[2 * l].data_mut();
                for o in 0..cout {
                    let drow = &dpre[o * hw..(o + 1) * hw];
                    for t in 0..p {
                        gw[o * p + t] += inv * dot(drow, &cols[t * hw..(t + 1) * hw]);
                    }
                }
                let gb = grads[2 * l + 1].data_mut();
                for o in 0..cout {
                    gb[o] += inv * dpre[o * hw..(o + 1) * hw].iter().sum::<f64>();
                }
            }
            if l > 0 {
                let w = params[2 * l].data();
                let mut dcols = vec![0.0; p * hw];
                for o in 0..cout {
                    let drow = &dpre[o * hw..(o + 1) * hw];
                    for t in 0..p {
                        let wv = w[o * p + t];
                        for (dc, dv) in dcols[t * hw..(t + 1) * hw].iter_mut().zip(drow) {
                            *dc += wv * dv;
                        }
                    }
                }
                da = col2im(&dcols, cin, s, k);
            }
        }
    }
    (loss * inv, grads)
}

/// Gaussian elimination with partial pivoting for `A X = B`, `A` n×n and
/// `B` n×m, both row-major.
fn solve_linear(mut a: Vec<f64>, mut b: Vec<f64>, n: usize, m: usize) -> Result<Vec<f64>> {
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .expect("non-empty range");
        if a[piv * n + col].abs() < 1e-300 {
            return Err(crate::error::Error::Numerical("singular normal equations".into()));
        }
        if piv != col {
            for j in 0..n {
                a.swap(col * n + j, piv * n + j);
            }
            for j in 0..m {
                b.swap(col * m + j, piv * m + j);
            }
        }
        for r in col + 1..n {
            let f = a[r * n + col] / a[col * n + col];
            for j in col..n {
                a[r * n + j] -= f * a[col * n + j];
            }
            for j in 0..m {
                b[r * m + j] -= f * b[col * m + j];
            }
        }
    }
    let mut x = vec![0.0; n * m];
    for r in (0..n).rev() {
        for j in 0..m {
            let mut acc = b[r * m + j];
            for c in r + 1..n {
                acc -= a[r * n + c] * x[c * m + j];
            }
            x[r * m + j] = acc / a[r * n + r];
        }
    }
    Ok(x)
}

/// Reads `features..., target` rows; the last column is the target.
pub fn load_csv(path: &Path) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).comment(Some(b'#')).from_path(path)?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let vals = rec
            .iter()
            .map(|c| c.trim().parse::<f64>().map_err(|e| structural!("row {i}: bad number {c:?}: {e}")))
            .collect::<Result<Vec<_>>>()?;
        let (target, features) = vals.split_last().ok_or_else(|| structural!("row {i} is empty"))?;
        xs.push(features.to_vec());
        ys.push(vec![*target]);
    }
    Ok((xs, ys))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { lr: 1e-3, epochs: 5, batch_size: 128, momentum: 0.9, weight_decay: 1e-4 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err!("solver needs lr > 0, epochs ≥ 1 and batch_size ≥ 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(config_err!("momentum must be in [0, 1) and weight_decay ≥ 0"));
        }
        Ok(())
    }
}

/// Shuffled mini-batches of one epoch.
pub fn epoch_batches(rows: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.chunks(batch_size.min(rows).max(1)).map(<[usize]>::to_vec).collect()
}

/// Quadratic pull toward a consensus anchor: `ρ_ℓ/2 ‖θ_ℓ − z_ℓ + u_ℓ‖²`.
#[derive(Debug, Clone, Copy)]
pub struct ProxAnchor<'a> {
    pub z: &'a [DenseTensor],
    pub u: &'a [DenseTensor],
    pub rho: &'a [f64],
}

/// Runs `epochs` of mini-batch SGD with momentum on
/// `f(θ) + Σ_ℓ ρ_ℓ/2 ‖θ_ℓ − z_ℓ + u_ℓ‖²`. Momentum acts on the combined
/// gradient. Batch order comes from `stream_seed`. Returns the final
/// parameters and the mean batch loss of the last epoch.
pub fn proximal_sgd(
    workload: &Workload,
    shard: &Shard,
    w0: &[DenseTensor],
    anchor: Option<ProxAnchor<'_>>,
    cfg: &SolverConfig,
    stream_seed: u64,
) -> Result<(Vec<DenseTensor>, f64)> {
    let mut w = w0.to_vec();
    let mut velocity: Vec<DenseTensor> = w.iter().map(|p| DenseTensor::zeros(p.shape())).collect();
    let mut last_loss = 0.0;
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(shard.rows, cfg.batch_size, derive_seed(stream_seed, &[epoch as u64]));
        let mut epoch_loss = 0.0;
        for rows in &batches {
            let (loss, mut grad) = workload.loss_and_grad(&w, shard, rows)?;
            epoch_loss += loss;
            if let Some(a) = anchor {
                for (l, g) in grad.iter_mut().enumerate() {
                    let rho = a.rho[l];
                    if rho == 0.0 {
                        continue;
                    }
                    let (th, z, u) = (w[l].data(), a.z[l].data(), a.u[l].data());
                    for (i, gv) in g.data_mut().iter_mut().enumerate() {
                        *gv += rho * (th[i] - z[i] + u[i]);
                    }
                }
            }
            for ((p, v), g) in w.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vv = cfg.momentum * *vv + gv;
                    *pv -= cfg.lr * *vv;
                }
            }
        }
        last_loss = epoch_loss / batches.len() as f64;
    }
    if let Some(bad) = w.iter().position(|p| !p.is_finite()) {
        return Err(crate::error::Error::Numerical(format!(
            "layer {} diverged during local training",
            workload.layers()[bad].name
        )));
    }
    Ok((w, last_loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(kind: WorkloadKind) -> WorkloadConfig {
        WorkloadConfig {
            kind,
            samples_per_rank: 12,
            features: 5,
            outputs: 2,
            image_size: 5,
            input_channels: 2,
            conv_channels: vec![3, 2],
            classes: 3,
            ..WorkloadConfig::default()
        }
    }

    /// Central differences on sampled coordinates.
    fn fd_check(kind: WorkloadKind) {
        let wl = Workload::generate(&cfg(kind), 2, 11).unwrap();
        let mut params = wl.init_params(5);
        // non-zero biases so their gradients are exercised off the origin
        for (p, l) in params.iter_mut().zip(wl.layers()) {
            if l.kind == LayerKind::Bias {
                p.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * (i as f64 + 1.0));
            }
        }
        let shard = wl.shard(1);
        let rows: Vec<usize> = (0..shard.rows).collect();
        let (_, grad) = wl.loss_and_grad(&params, shard, &rows).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-5;
        for _ in 0..20 {
            let l = rand::Rng::random_range(&mut rng, 0..params.len());
            let i = rand::Rng::random_range(&mut rng, 0..params[l].len());
            let mut plus = params.clone();
            plus[l].data_mut()[i] += h;
            let mut minus = params.clone();
            minus[l].data_mut()[i] -= h;
            let fp = wl.loss_and_grad(&plus, shard, &rows).unwrap().0;
            let fm = wl.loss_and_grad(&minus, shard, &rows).unwrap().0;
            let fd = (fp - fm) / (2.0 * h);
            let g = grad[l].data()[i];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
            assert!(rel <= 1e-4, "{kind:?} layer {l} coord {i}: analytic {g} vs fd {fd}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        fd_check(WorkloadKind::Quadratic);
        fd_check(WorkloadKind::Logistic);
        fd_check(WorkloadKind::TinyConvNet);
    }

    #[test]
    fn quadratic_gradient_vanishes_at_solution() {
        let c = WorkloadConfig { samples_per_rank: 30, ..cfg(WorkloadKind::Quadratic) };
        let wl = Workload::generate(&c, 1, 2).unwrap();
        let x = wl.quadratic_optimum(0.0).unwrap();
        let (_, g) = wl.full_loss_and_grad(&[x], 0).unwrap();
        assert!(g[0].frobenius_norm() < 1e-9);
    }

    #[test]
    fn logistic_at_zero_on_balanced_batch_is_ln2() {
        let c = WorkloadConfig { features: 2, ..cfg(WorkloadKind::Logistic) };
        let x = vec![vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.3, 0.3], vec![2.0, -1.0]];
        let y = vec![vec![1.0], vec![0.0], vec![1.0], vec![0.0]];
        let wl = Workload::from_rows(&c, x, y, 1).unwrap();
        let zero = vec![DenseTensor::zeros(&[1, 2]), DenseTensor::zeros(&[1])];
        let (loss, _) = wl.full_loss_and_grad(&zero, 0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn shards_are_disjoint_and_equal() {
        let wl = Workload::generate(&cfg(WorkloadKind::Logistic), 3, 1).unwrap();
        assert!(wl.shards().iter().all(|s| s.rows == 12));
        assert_ne!(wl.shard(0).features, wl.shard(1).features);
        let again = Workload::generate(&cfg(WorkloadKind::Logistic), 3, 1).unwrap();
        assert_eq!(again.shard(2), wl.shard(2));
    }

    #[test]
    fn dimension_mismatch_is_structural() {
        let wl = Workload::generate(&cfg(WorkloadKind::Quadratic), 1, 1).unwrap();
        let bad = vec![DenseTensor::zeros(&[2, 4])];
        assert!(wl.loss_and_grad(&bad, wl.shard(0), &[0]).is_err());
    }

    #[test]
    fn plain_sgd_when_penalty_is_zero() {
        let wl = Workload::generate(&cfg(WorkloadKind::Logistic), 1, 4).unwrap();
        let w0 = wl.init_params(1);
        let solver = SolverConfig { lr: 0.1, epochs: 3, batch_size: 5, momentum: 0.9, weight_decay: 0.0 };
        let z = wl.init_params(99);
        let u = z.clone();
        let rho = vec![0.0; w0.len()];
        let anchor = ProxAnchor { z: &z, u: &u, rho: &rho };
        let (got, _) = proximal_sgd(&wl, wl.shard(0), &w0, Some(anchor), &solver, 7).unwrap();

        // reference loop
        let mut w = w0.clone();
        let mut vel: Vec<DenseTensor> = w.iter().map(|p| DenseTensor::zeros(p.shape())).collect();
        for epoch in 0..3u64 {
            for rows in epoch_batches(12, 5, derive_seed(7, &[epoch])) {
                let (_, g) = wl.loss_and_grad(&w, wl.shard(0), &rows).unwrap();
                for l in 0..w.len() {
                    for i in 0..w[l].len() {
                        let v = 0.9 * vel[l].data()[i] + g[l].data()[i];
                        vel[l].data_mut()[i] = v;
                        w[l].data_mut()[i] -= 0.1 * v;
                    }
                }
            }
        }
        for (a, b) in got.iter().zip(&w) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn zero_data_pulls_geometrically_toward_anchor() {
        let c = WorkloadConfig { features: 3, outputs: 1, ..cfg(WorkloadKind::Quadratic) };
        let x = vec![vec![0.0; 3]; 4];
        let y = vec![vec![0.0]; 4];
        let wl = Workload::from_rows(&c, x, y, 1).unwrap();
        let w0 = vec![DenseTensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap()];
        let z = vec![DenseTensor::new(vec![1, 3], vec![0.2, 0.2, 0.2]).unwrap()];
        let u = vec![DenseTensor::zeros(&[1, 3])];
        let (eta, rho) = (0.1, 2.0);
        let solver = SolverConfig { lr: eta, epochs: 6, batch_size: 4, momentum: 0.0, weight_decay: 0.0 };
        let rhos = [rho];
        let (w, _) = proximal_sgd(&wl, wl.shard(0), &w0, Some(ProxAnchor { z: &z, u: &u, rho: &rhos }), &solver, 0).unwrap();
        let factor = (1.0 - eta * rho).powi(6);
        for i in 0..3 {
            let want = z[0].data()[i] + factor * (w0[0].data()[i] - z[0].data()[i]);
            assert!((w[0].data()[i] - want).abs() < 1e-12);
        }
        let before = w0[0].sub(&z[0]).unwrap().frobenius_norm();
        let after = w[0].sub(&z[0]).unwrap().frobenius_norm();
        assert!(after <= before);
    }

    #[test]
    fn long_full_batch_limit_solves_prox_subproblem() {
        let c = WorkloadConfig { samples_per_rank: 20, features: 4, outputs: 1, ..cfg(WorkloadKind::Quadratic) };
        let wl = Workload::generate(&c, 1, 8).unwrap();
        let shard = wl.shard(0);
        let rho = 1.5;
        let z = vec![DenseTensor::from_fn(&[1, 4], |i| 0.3 * i as f64)];
        let u = vec![DenseTensor::from_fn(&[1, 4], |i| -0.1 * i as f64)];
        let solver = SolverConfig { lr: 0.01, epochs: 4000, batch_size: 20, momentum: 0.0, weight_decay: 0.0 };
        let rhos = [rho];
        let (w, _) = proximal_sgd(&wl, shard, &wl.init_params(0), Some(ProxAnchor { z: &z, u: &u, rho: &rhos }), &solver, 0).unwrap();

        // (AᵀA + ρI) x = Aᵀb + ρ(z − u), solved independently by Cramer-free elimination
        let d = 4;
        let mut a = vec![0.0; d * d];
        let mut b = vec![0.0; d];
        for i in 0..shard.rows {
            let x = shard.row(i);
            for p in 0..d {
                for q in 0..d {
                    a[p * d + q] += x[p] * x[q];
                }
                b[p] += x[p] * shard.target(i)[0];
            }
        }
        for p in 0..d {
            a[p * d + p] += rho;
            b[p] += rho * (z[0].data()[p] - u[0].data()[p]);
        }
        let want = solve_linear(a, b, d, 1).unwrap();
        for p in 0..d {
            assert!((w[0].data()[p] - want[p]).abs() < 1e-3, "coord {p}");
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let wl = Workload::generate(&cfg(WorkloadKind::TinyConvNet), 1, 4).unwrap();
        let solver = SolverConfig { lr: 0.05, epochs: 2, batch_size: 4, ..SolverConfig::default() };
        let a = proximal_sgd(&wl, wl.shard(0), &wl.init_params(1), None, &solver, 3).unwrap();
        let b = proximal_sgd(&wl, wl.shard(0), &wl.init_params(1), None, &solver, 3).unwrap();
        assert_eq!(a.0, b.0);
        let c = proximal_sgd(&wl, wl.shard(0), &wl.init_params(1), None, &solver, 4).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn csv_loader_shards_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "# x0,x1,y\n1,2,1\n3,4,0\n5,6,1\n7,8,0\n9,10,1\n").unwrap();
        let c = WorkloadConfig { kind: WorkloadKind::Logistic, features: 2, data_csv: Some(path), ..WorkloadConfig::default() };
        let wl = Workload::generate(&c, 2, 0).unwrap();
        assert_eq!(wl.shard(1).features, vec![5.0, 6.0, 7.0, 8.0]);
        assert_eq!(wl.shard(0).targets, vec![1.0, 0.0]);
    }
}
