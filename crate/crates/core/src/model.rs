//! Tiny convolutional regressor `(image, category) → FisherParam`.
//!
//! ```text
//! x ∈ [−½, ½]^{3×H×W}
//!   → conv k×k stride 2 → ReLU → conv k×k stride 2 → ReLU → flatten
//!   ⊕ embedding[category]
//!   → affine → 9 reals (row-major 3×3) → norm cap → F
//! ```
//!
//! Gradients are written out by hand. All math is `f64`.

use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augment::ImageTensor;
use crate::error::{Error, Result};
use crate::fisher::FisherParam;

/// Network outputs with a larger Frobenius norm are scaled back onto this
/// sphere, which keeps every prediction a valid [`FisherParam`].
pub const OUTPUT_NORM_CAP: f64 = 59.0;

const STRIDE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub height: usize,
    pub channels: [usize; 2],
    pub kernel: usize,
    pub n_embedding: usize,
    pub n_categories: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 64,
            height: 64,
            channels: [8, 16],
            kernel: 3,
            n_embedding: 16,
            n_categories: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dims {
    h1: usize,
    w1: usize,
    h2: usize,
    w2: usize,
    conv_features: usize,
    features: usize,
}

fn conv_out(n: usize, k: usize) -> usize {
    let pad = (k - 1) / 2;
    (n + 2 * pad - k) / STRIDE + 1
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_embedding < 1 || self.n_categories < 1 {
            return Err(Error::Config("model needs N_embedding ≥ 1 and K ≥ 1".into()));
        }
        if self.channels.iter().any(|&c| c == 0) || self.kernel == 0 {
            return Err(Error::Config("channel widths and kernel must be positive".into()));
        }
        if self.width < 2 || self.height < 2 || self.kernel > self.width.min(self.height) {
            return Err(Error::Config(format!(
                "input {}×{} too small for kernel {}",
                self.width, self.height, self.kernel
            )));
        }
        Ok(())
    }

    fn dims(&self) -> Dims {
        let (h1, w1) = (conv_out(self.height, self.kernel), conv_out(self.width, self.kernel));
        let (h2, w2) = (conv_out(h1, self.kernel), conv_out(w1, self.kernel));
        let conv_features = self.channels[1] * h2 * w2;
        Dims {
            h1,
            w1,
            h2,
            w2,
            conv_features,
            features: conv_features + self.n_embedding,
        }
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// All trainable tensors, flat and in declaration order:
/// `conv1_w [c1,3,k,k]`, `conv1_b [c1]`, `conv2_w [c2,c1,k,k]`, `conv2_b [c2]`,
/// `embedding [K,E]`, `head_w [9,D]`, `head_b [9]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorParams {
    config: ModelConfig,
    pub(crate) conv1_w: Vec<f64>,
    pub(crate) conv1_b: Vec<f64>,
    pub(crate) conv2_w: Vec<f64>,
    pub(crate) conv2_b: Vec<f64>,
    pub(crate) embedding: Vec<f64>,
    pub(crate) head_w: Vec<f64>,
    pub(crate) head_b: Vec<f64>,
    /// Identity of the current values, used to reject stale caches.
    id: u64,
}

pub const TENSOR_NAMES: [&str; 7] = ["conv1_w", "conv1_b", "conv2_w", "conv2_b", "embedding", "head_w", "head_b"];

impl RegressorParams {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dims();
        let [c1, c2] = config.channels;
        let kk = config.kernel * config.kernel;
        Ok(RegressorParams {
            config,
            conv1_w: vec![0.0; c1 * 3 * kk],
            conv1_b: vec![0.0; c1],
            conv2_w: vec![0.0; c2 * c1 * kk],
            conv2_b: vec![0.0; c2],
            embedding: vec![0.0; config.n_categories * config.n_embedding],
            head_w: vec![0.0; 9 * d.features],
            head_b: vec![0.0; 9],
            id: fresh_id(),
        })
    }

    /// He-normal convolutions, unit-normal embeddings, small head, zero
    /// biases; seeded from `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let kk = (config.kernel * config.kernel) as f64;
        let fill = |v: &mut Vec<f64>, std: f64, rng: &mut ChaCha8Rng| {
            for x in v.iter_mut() {
                *x = rng.sample::<f64, _>(StandardNormal) * std;
            }
        };
        fill(&mut p.conv1_w, (2.0 / (3.0 * kk)).sqrt(), &mut rng);
        fill(&mut p.conv2_w, (2.0 / (config.channels[0] as f64 * kk)).sqrt(), &mut rng);
        fill(&mut p.embedding, 1.0, &mut rng);
        let head_std = 0.1 / (config.dims().features as f64).sqrt();
        fill(&mut p.head_w, head_std, &mut rng);
        Ok(p)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> [&[f64]; 7] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.embedding,
            &self.head_w,
            &self.head_b,
        ]
    }

    /// Mutable access; any mutation invalidates outstanding caches.
    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 7] {
        self.id = fresh_id();
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.embedding,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn same_shape(&self, other: &RegressorParams) -> bool {
        self.config == other.config
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config).expect("config already validated")
    }

    /// Flat view of all parameters in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.iter().copied()).collect()
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &RegressorParams, scale: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape("parameter sets have different configs".into()));
        }
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Checkpoint: `b"RKCK"`, format version, config, then every tensor as
    /// a u64 length followed by little-endian f64 values.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let c = &self.config;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for v in [
            c.width,
            c.height,
            c.channels[0],
            c.channels[1],
            c.kernel,
            c.n_embedding,
            c.n_categories,
        ] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&c.seed.to_le_bytes())?;
        for t in self.tensors() {
            w.write_all(&(t.len() as u64).to_le_bytes())?;
            for v in t {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("wrong magic"));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b).map_err(|_| bad("truncated header"))?;
        let version = u32::from_le_bytes(u32b);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let read_u64 = |r: &mut R| -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
            Ok(u64::from_le_bytes(b))
        };
        let mut f = [0usize; 7];
        for v in f.iter_mut() {
            *v = read_u64(&mut r)? as usize;
        }
        let seed = read_u64(&mut r)?;
        let config = ModelConfig {
            width: f[0],
            height: f[1],
            channels: [f[2], f[3]],
            kernel: f[4],
            n_embedding: f[5],
            n_categories: f[6],
            seed,
        };
        let mut p = RegressorParams::zeros(config)?;
        for t in p.tensors_mut() {
            let len = read_u64(&mut r)? as usize;
            if len != t.len() {
                return Err(Error::Checkpoint(format!("tensor length {len}, expected {}", t.len())));
            }
            for v in t.iter_mut() {
                *v = f64::from_bits(read_u64(&mut r)?);
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|_| bad("read failure"))?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        if !p.is_finite() {
            return Err(bad("non-finite parameters"));
        }
        Ok(p)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"RKCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Everything [`backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    params_id: u64,
    category: usize,
    /// Unfolded layer inputs.
    cols1: DMatrix<f64>,
    cols2: DMatrix<f64>,
    /// Post-ReLU activations, channel-major.
    act1: Vec<f64>,
    act2: Vec<f64>,
    features: Vec<f64>,
    raw: [f64; 9],
}

/// Stride-2 convolution with padding `(k−1)/2`.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h_in: usize,
    w_in: usize,
    c_out: usize,
    k: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Calls `f(col, row, input index)` for every in-bounds tap; padding taps
    /// are skipped.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let pad = (self.k - 1) / 2;
        for oy in 0..self.h_out {
            for ox in 0..self.w_out {
                let col = oy * self.w_out + ox;
                for ci in 0..self.c_in {
                    for ky in 0..self.k {
                        let iy = (oy * STRIDE + ky) as isize - pad as isize;
                        if iy < 0 || iy >= self.h_in as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * STRIDE + kx) as isize - pad as isize;
                            if ix < 0 || ix >= self.w_in as isize {
                                continue;
                            }
                            let row = (ci * self.k + ky) * self.k + kx;
                            let idx = (ci * self.h_in + iy as usize) * self.w_in + ix as usize;
                            f(col, row, idx);
                        }
                    }
                }
            }
        }
    }

    /// `(c_in·k·k) × (h_out·w_out)` patch matrix.
    fn im2col(&self, input: &[f64]) -> DMatrix<f64> {
        let rows = self.patch_len();
        let mut cols = DMatrix::zeros(rows, self.positions());
        let buf = cols.as_mut_slice();
        self.for_each_tap(|col, row, idx| buf[col * rows + row] = input[idx]);
        cols
    }

    /// Channel-major output. The weight `[c_out][c_in·k·k]` read
    /// column-major is `Wᵀ`, so `colsᵀ·Wᵀ` lands channel-major directly.
    fn forward(&self, cols: &DMatrix<f64>, weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let wt = DMatrix::from_column_slice(self.patch_len(), self.c_out, weight);
        let mut out = cols.transpose() * wt;
        for (co, mut column) in out.column_iter_mut().enumerate() {
            column.add_scalar_mut(bias[co]);
        }
        out.data.into()
    }

    /// Accumulates weight and bias gradients; returns the input gradient
    /// when asked.
    fn backward(
        &self,
        cols: &DMatrix<f64>,
        weight: &[f64],
        d_out: &[f64],
        d_weight: &mut [f64],
        d_bias: &mut [f64],
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let d_out = DMatrix::from_column_slice(self.positions(), self.c_out, d_out);
        let dwt = cols * &d_out;
        for (g, v) in d_weight.iter_mut().zip(dwt.as_slice()) {
            *g += v;
        }
        for (co, column) in d_out.column_iter().enumerate() {
            d_bias[co] += column.sum();
        }
        if !want_input {
            return None;
        }
        let wt = DMatrix::from_column_slice(self.patch_len(), self.c_out, weight);
        let d_cols = wt * d_out.transpose();
        let rows = self.patch_len();
        let dc = d_cols.as_slice();
        let mut d_input = vec![0.0; self.c_in * self.h_in * self.w_in];
        self.for_each_tap(|col, row, idx| d_input[idx] += dc[col * rows + row]);
        Some(d_input)
    }
}

impl ModelConfig {
    fn geoms(&self) -> (ConvGeom, ConvGeom) {
        let d = self.dims();
        let [c1, c2] = self.channels;
        (
            ConvGeom {
                c_in: 3,
                h_in: self.height,
                w_in: self.width,
                c_out: c1,
                k: self.kernel,
                h_out: d.h1,
                w_out: d.w1,
            },
            ConvGeom {
                c_in: c1,
                h_in: d.h1,
                w_in: d.w1,
                c_out: c2,
                k: self.kernel,
                h_out: d.h2,
                w_out: d.w2,
            },
        )
    }
}

/// `v/255 − ½`, channel-major.
fn normalize_input(img: &ImageTensor) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let mut out = vec![0.0; 3 * w * h];
    for (i, px) in img.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * w * h + i] = px[c] as f64 / 255.0 - 0.5;
        }
    }
    out
}

fn cap_norm(raw: &[f64; 9]) -> [f64; 9] {
    let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n <= OUTPUT_NORM_CAP {
        *raw
    } else {
        raw.map(|v| v * OUTPUT_NORM_CAP / n)
    }
}

/// Pulls `∂L/∂F` back through the norm cap.
fn cap_norm_backward(raw: &[f64; 9], d_f: &[f64; 9]) -> [f64; 9] {
    let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n <= OUTPUT_NORM_CAP {
        return *d_f;
    }
    // F = c·r/‖r‖ ⇒ ∂F/∂r = (c/‖r‖)(I − r̂ r̂ᵀ)
    let dot: f64 = raw.iter().zip(d_f).map(|(r, g)| r * g).sum::<f64>() / (n * n);
    let s = OUTPUT_NORM_CAP / n;
    std::array::from_fn(|i| s * (d_f[i] - raw[i] * dot))
}

/// Deterministic, side-effect-free forward pass.
pub fn forward(params: &RegressorParams, img: &ImageTensor, category: usize) -> Result<(FisherParam, ActivationCache)> {
    let cfg = &params.config;
    if category >= cfg.n_categories {
        return Err(Error::InvalidArgument(format!(
            "category {category} out of range for K = {}",
            cfg.n_categories
        )));
    }
    if img.width() != cfg.width || img.height() != cfg.height {
        return Err(Error::Shape(format!(
            "image {}×{} but model expects {}×{}",
            img.width(),
            img.height(),
            cfg.width,
            cfg.height
        )));
    }
    let d = cfg.dims();
    let (g1, g2) = cfg.geoms();
    let cols1 = g1.im2col(&normalize_input(img));
    let mut act1 = g1.forward(&cols1, &params.conv1_w, &params.conv1_b);
    act1.iter_mut().for_each(|v| *v = v.max(0.0));
    let cols2 = g2.im2col(&act1);
    let mut act2 = g2.forward(&cols2, &params.conv2_w, &params.conv2_b);
    act2.iter_mut().for_each(|v| *v = v.max(0.0));

    let mut features = Vec::with_capacity(d.features);
    features.extend_from_slice(&act2);
    let e = cfg.n_embedding;
    features.extend_from_slice(&params.embedding[category * e..(category + 1) * e]);

    let mut raw = [0.0; 9];
    for (o, r) in raw.iter_mut().enumerate() {
        let row = &params.head_w[o * d.features..(o + 1) * d.features];
        *r = params.head_b[o] + row.iter().zip(&features).map(|(w, x)| w * x).sum::<f64>();
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("network output"));
    }
    let f = FisherParam::new(Matrix3::from_row_slice(&cap_norm(&raw)))?;
    Ok((
        f,
        ActivationCache {
            params_id: params.id,
            category,
            cols1,
            cols2,
            act1,
            act2,
            features,
            raw,
        },
    ))
}

/// Gradients of a scalar loss w.r.t. every parameter, given `∂loss/∂F`.
pub fn backward(params: &RegressorParams, cache: &ActivationCache, upstream: &Matrix3<f64>) -> Result<RegressorParams> {
    let mut grads = params.zeros_like();
    backward_into(params, cache, upstream, &mut grads)?;
    Ok(grads)
}

/// Like [`backward`], accumulating into `grads`.
pub fn backward_into(
    params: &RegressorParams,
    cache: &ActivationCache,
    upstream: &Matrix3<f64>,
    grads: &mut RegressorParams,
) -> Result<()> {
    if cache.params_id != params.id {
        return Err(Error::StaleCache("parameters changed since the forward pass".into()));
    }
    if !grads.same_shape(params) {
        return Err(Error::Shape("gradient buffer does not match parameters".into()));
    }
    if upstream.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("upstream gradient"));
    }
    grads.id = fresh_id();
    let cfg = &params.config;
    let d = cfg.dims();
    let (g1, g2) = cfg.geoms();

    let mut d_f = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            d_f[3 * r + c] = upstream[(r, c)];
        }
    }
    let d_raw = cap_norm_backward(&cache.raw, &d_f);
    if d_raw.iter().all(|&g| g == 0.0) {
        return Ok(());
    }

    let mut d_features = vec![0.0; d.features];
    for (o, &g) in d_raw.iter().enumerate() {
        grads.head_b[o] += g;
        if g == 0.0 {
            continue;
        }
        let wrow = &params.head_w[o * d.features..(o + 1) * d.features];
        let grow = &mut grads.head_w[o * d.features..(o + 1) * d.features];
        for j in 0..d.features {
            grow[j] += g * cache.features[j];
            d_features[j] += g * wrow[j];
        }
    }

    let e = cfg.n_embedding;
    let erow = &mut grads.embedding[cache.category * e..(cache.category + 1) * e];
    for (g, d) in erow.iter_mut().zip(&d_features[d.conv_features..]) {
        *g += d;
    }

    let mut d_act2 = d_features[..d.conv_features].to_vec();
    for (g, a) in d_act2.iter_mut().zip(&cache.act2) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
    let mut d_act1 = g2
        .backward(&cache.cols2, &params.conv2_w, &d_act2, &mut grads.conv2_w, &mut grads.conv2_b, true)
        .expect("input gradient requested");
    for (g, a) in d_act1.iter_mut().zip(&cache.act1) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
    g1.backward(&cache.cols1, &params.conv1_w, &d_act1, &mut grads.conv1_w, &mut grads.conv1_b, false);
    Ok(())
}

/// SGD with heavy-ball momentum: `v ← μv + g`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Option<RegressorParams>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, params: &mut RegressorParams, grads: &RegressorParams, lr: f64) -> Result<()> {
        sgd_step(params, grads, lr, self.momentum, &mut self.velocity)
    }
}

/// One momentum-SGD update. The first call (no velocity yet) is plain
/// `p − lr·g`.
pub fn sgd_step(
    params: &mut RegressorParams,
    grads: &RegressorParams,
    lr: f64,
    momentum: f64,
    velocity: &mut Option<RegressorParams>,
) -> Result<()> {
    if !params.same_shape(grads) {
        return Err(Error::Shape("gradient shape does not match parameters".into()));
    }
    const GRAD_NAMES: [&str; 7] = [
        "gradient of conv1_w",
        "gradient of conv1_b",
        "gradient of conv2_w",
        "gradient of conv2_b",
        "gradient of embedding",
        "gradient of head_w",
        "gradient of head_b",
    ];
    if let Some(t) = grads.tensors().iter().position(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite(GRAD_NAMES[t]));
    }
    let v = match velocity {
        Some(v) => {
            v.scale(momentum);
            v.add_scaled(grads, 1.0)?;
            v
        }
        None => velocity.insert(grads.clone()),
    };
    if lr != 0.0 {
        params.add_scaled(v, -lr)?;
    }
    Ok(())
}

/// `θ′ ← m·θ′ + (1−m)·θ` for every parameter.
pub fn ema_update(teacher: &mut RegressorParams, student: &RegressorParams, m: f64) -> Result<()> {
    if !teacher.same_shape(student) {
        return Err(Error::Shape("teacher and student differ in shape".into()));
    }
    if !(0.0..1.0).contains(&m) {
        return Err(Error::InvalidArgument(format!("EMA momentum {m} outside [0, 1)")));
    }
    for (t, s) in teacher.tensors_mut().into_iter().zip(student.tensors()) {
        for (tv, sv) in t.iter_mut().zip(s) {
            *tv = m * *tv + (1.0 - m) * sv;
        }
    }
    Ok(())
}
