//! 3D U-Net generator with unimodal (CBCT) and early-fusion (CT + CBCT) inputs.
//!
//! Encoder: three double-convolution blocks (3×3×3 conv → batch norm → ReLU,
//! twice) each followed by 2×2×2 max pooling. Bottleneck: one double
//! convolution at the widest feature width. Decoder: per level, trilinear ×2
//! upsampling and a 3×3×3 convolution down to the skip width, channel
//! concatenation with the matching encoder output, then a double
//! convolution. Head: 1×1×1 convolution to one channel with no activation.
//!
//! Forward passes return a [`ForwardTrace`] holding everything the backward
//! pass needs; gradients come back as a [`Gradients`] aligned with
//! [`NetworkWeights::params`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, BnCache, ConvGeom};
use crate::rng::{hash_str, rng_for};
use crate::tensor::Tensor;
use crate::volume::{Domain, Volume};

pub const KERNEL: usize = 3;
pub const OUT_CHANNELS: usize = 1;
/// Spatial dims must be divisible by this (three pooling levels).
pub const SIZE_DIVISOR: usize = 8;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// 1 for CBCT-only, 2 for CT + CBCT early fusion.
    pub in_channels: usize,
    /// Widths of the three encoder levels and the bottleneck.
    #[serde(default = "default_feature_maps")]
    pub feature_maps: Vec<usize>,
    #[serde(default = "default_true")]
    pub batch_norm: bool,
}

fn default_feature_maps() -> Vec<usize> {
    vec![32, 64, 128, 256]
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn multimodal() -> Self {
        Self {
            in_channels: 2,
            feature_maps: default_feature_maps(),
            batch_norm: true,
        }
    }

    pub fn unimodal() -> Self {
        Self {
            in_channels: 1,
            ..Self::multimodal()
        }
    }

    /// Small widths `(4, 8, 16, 32)` for desk-scale runs and tests.
    pub fn tiny(in_channels: usize) -> Self {
        Self {
            in_channels,
            feature_maps: vec![4, 8, 16, 32],
            batch_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.in_channels) {
            return Err(Error::Parameter(format!(
                "in_channels must be 1 or 2, got {}",
                self.in_channels
            )));
        }
        if self.feature_maps.len() != 4 {
            return Err(Error::Parameter(format!(
                "feature_maps needs 4 widths, got {:?}",
                self.feature_maps
            )));
        }
        if self.feature_maps[0] == 0 || self.feature_maps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parameter(format!(
                "feature_maps must be positive and strictly increasing, got {:?}",
                self.feature_maps
            )));
        }
        Ok(())
    }

    /// Stable identifier of the architecture, stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        let canon = format!(
            "unet3d;in={};fm={:?};k={KERNEL};bn={};out={OUT_CHANNELS}",
            self.in_channels, self.feature_maps, self.batch_norm
        );
        format!("{:016x}", hash_str(&canon))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub data: Vec<f64>,
}

/// Learned parameters plus normalization running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    pub config: ModelConfig,
    pub params: Vec<NamedTensor>,
    pub buffers: Vec<NamedTensor>,
}

impl NetworkWeights {
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&NamedTensor> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients(self.params.iter().map(|p| vec![0.0; p.data.len()]).collect())
    }

    /// Exponential running-average update of normalization statistics from
    /// a training-mode forward pass.
    pub fn update_running_stats(&mut self, trace: &ForwardTrace) {
        for u in &trace.bn_updates {
            for (r, b) in self.buffers[u.mean_buf].data.iter_mut().zip(&u.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, b) in self.buffers[u.var_buf].data.iter_mut().zip(&u.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
}

/// Parameter gradients, index-aligned with [`NetworkWeights::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().flatten().for_each(|x| *x *= s);
    }

    pub fn zero(&mut self) {
        self.0.iter_mut().flatten().for_each(|x| *x = 0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|x| x.is_finite())
    }
}

// ---------------------------------------------------------------------------
// layout

#[derive(Debug, Clone, Copy)]
struct ConvIdx {
    w: usize,
    b: usize,
    cin: usize,
    cout: usize,
    k: usize,
}

#[derive(Debug, Clone, Copy)]
struct BnIdx {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    c1: ConvIdx,
    n1: Option<BnIdx>,
    c2: ConvIdx,
    n2: Option<BnIdx>,
}

#[derive(Debug, Clone)]
struct Layout {
    enc: Vec<BlockIdx>,
    mid: BlockIdx,
    /// Upsampling convolutions, deepest first.
    up: Vec<ConvIdx>,
    /// Decoder blocks, deepest first.
    dec: Vec<BlockIdx>,
    head: ConvIdx,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// `U(±sqrt(6 / fan_in))`, for layers followed by ReLU.
    HeUniform(usize),
    /// `U(±1 / sqrt(fan_in))`, for linear outputs.
    FanInUniform(usize),
    Zeros,
    Ones,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct LayoutBuilder {
    params: Vec<Spec>,
    buffers: Vec<Spec>,
}

impl LayoutBuilder {
    fn param(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.params.push(Spec { name, shape, init });
        self.params.len() - 1
    }

    fn buffer(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.buffers.push(Spec { name, shape, init });
        self.buffers.len() - 1
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, relu_follows: bool) -> ConvIdx {
        let fan_in = cin * k * k * k;
        let init = if relu_follows {
            Init::HeUniform(fan_in)
        } else {
            Init::FanInUniform(fan_in)
        };
        let w = self.param(format!("{prefix}.weight"), vec![cout, cin, k, k, k], init);
        let b = self.param(format!("{prefix}.bias"), vec![cout], Init::Zeros);
        ConvIdx { w, b, cin, cout, k }
    }

    fn bn(&mut self, prefix: &str, c: usize) -> BnIdx {
        BnIdx {
            gamma: self.param(format!("{prefix}.gamma"), vec![c], Init::Ones),
            beta: self.param(format!("{prefix}.beta"), vec![c], Init::Zeros),
            mean: self.buffer(format!("{prefix}.running_mean"), vec![c], Init::Zeros),
            var: self.buffer(format!("{prefix}.running_var"), vec![c], Init::Ones),
        }
    }

    fn block(&mut self, prefix: &str, cin: usize, cout: usize, norm: bool) -> BlockIdx {
        let c1 = self.conv(&format!("{prefix}.conv1"), cin, cout, KERNEL, true);
        let n1 = norm.then(|| self.bn(&format!("{prefix}.bn1"), cout));
        let c2 = self.conv(&format!("{prefix}.conv2"), cout, cout, KERNEL, true);
        let n2 = norm.then(|| self.bn(&format!("{prefix}.bn2"), cout));
        BlockIdx { c1, n1, c2, n2 }
    }
}

fn layout(cfg: &ModelConfig) -> (Layout, LayoutBuilder) {
    let fm = &cfg.feature_maps;
    let norm = cfg.batch_norm;
    let mut b = LayoutBuilder::default();
    let mut enc = Vec::new();
    let mut cin = cfg.in_channels;
    for (level, &width) in fm[..3].iter().enumerate() {
        enc.push(b.block(&format!("enc{}", level + 1), cin, width, norm));
        cin = width;
    }
    let mid = b.block("bottleneck", fm[2], fm[3], norm);
    let mut up = Vec::new();
    let mut dec = Vec::new();
    let mut below = fm[3];
    for level in (0..3).rev() {
        let width = fm[level];
        up.push(b.conv(&format!("up{}.conv", level + 1), below, width, KERNEL, false));
        dec.push(b.block(&format!("dec{}", level + 1), 2 * width, width, norm));
        below = width;
    }
    let head = b.conv("head", fm[0], OUT_CHANNELS, 1, false);
    (Layout { enc, mid, up, dec, head }, b)
}

/// Deterministically initializes a network for `cfg`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<NetworkWeights> {
    cfg.validate()?;
    let (_, specs) = layout(cfg);
    let mut rng = rng_for(seed, &[0x1e7]);
    let mut materialize = |s: &Spec| -> NamedTensor {
        let n: usize = s.shape.iter().product();
        let data = match s.init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::HeUniform(fan_in) => {
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
            Init::FanInUniform(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        NamedTensor {
            name: s.name.clone(),
            shape: s.shape.clone(),
            data,
        }
    };
    let params = specs.params.iter().map(&mut materialize).collect();
    let buffers = specs.buffers.iter().map(&mut materialize).collect();
    Ok(NetworkWeights {
        config: cfg.clone(),
        params,
        buffers,
    })
}

/// Stacks the network input: channels `[CT, CBCT]` for fusion, `[CBCT]` alone otherwise.
pub fn fuse_inputs(cbct: &Volume, ct: Option<&Volume>) -> Result<Tensor> {
    if cbct.domain() != Domain::Normalized {
        return Err(Error::Domain("CBCT input must be normalized".into()));
    }
    let [d, h, w] = cbct.dims();
    match ct {
        None => Ok(Tensor::from_volume(cbct)),
        Some(ct) => {
            if ct.domain() != Domain::Normalized {
                return Err(Error::Domain("CT input must be normalized".into()));
            }
            if ct.dims() != cbct.dims() {
                return Err(Error::Shape(format!(
                    "CT dims {:?} differ from CBCT dims {:?}",
                    ct.dims(),
                    cbct.dims()
                )));
            }
            let data = ct
                .data()
                .iter()
                .chain(cbct.data())
                .map(|&x| x as f64)
                .collect();
            Tensor::new(vec![1, 2, d, h, w], data)
        }
    }
}

// ---------------------------------------------------------------------------
// forward / backward

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers.
    Train,
    /// Running statistics in normalization layers.
    Eval,
}

struct BnUpdate {
    mean_buf: usize,
    var_buf: usize,
    mean: Vec<f64>,
    var: Vec<f64>,
}

struct BlockTrace {
    input: Vec<f64>,
    n1: Option<BnCache>,
    a1: Vec<f64>,
    n2: Option<BnCache>,
    out: Vec<f64>,
}

/// Saved activations of one forward pass.
pub struct ForwardTrace {
    n: usize,
    size: [usize; 3],
    enc: Vec<BlockTrace>,
    pool_args: Vec<Vec<u32>>,
    mid: BlockTrace,
    /// Upsampled decoder inputs, deepest first.
    ups: Vec<Vec<f64>>,
    dec: Vec<BlockTrace>,
    bn_updates: Vec<BnUpdate>,
}

struct Net<'a> {
    w: &'a NetworkWeights,
    n: usize,
    mode: Mode,
}

impl Net<'_> {
    fn p(&self, i: usize) -> &[f64] {
        &self.w.params[i].data
    }

    fn geom(&self, c: &ConvIdx, size: [usize; 3]) -> ConvGeom {
        ConvGeom {
            n: self.n,
            cin: c.cin,
            cout: c.cout,
            size,
            kernel: [c.k; 3],
        }
    }

    fn conv(&self, c: &ConvIdx, x: &[f64], size: [usize; 3]) -> Vec<f64> {
        let g = self.geom(c, size);
        let mut y = vec![0.0; self.n * c.cout * g.positions()];
        nn::conv_forward(x, self.p(c.w), self.p(c.b), &g, &mut y);
        y
    }

    fn bn(&self, b: &BnIdx, x: &mut [f64], c: usize, p: usize, updates: &mut Vec<BnUpdate>) -> BnCache {
        let running = match self.mode {
            Mode::Train => None,
            Mode::Eval => Some((
                self.w.buffers[b.mean].data.as_slice(),
                self.w.buffers[b.var].data.as_slice(),
            )),
        };
        let cache = nn::batchnorm_forward(x, self.n, c, p, self.p(b.gamma), self.p(b.beta), running);
        if self.mode == Mode::Train {
            updates.push(BnUpdate {
                mean_buf: b.mean,
                var_buf: b.var,
                mean: cache.mean.clone(),
                var: cache.var_unbiased.clone(),
            });
        }
        cache
    }

    fn block(&self, b: &BlockIdx, input: Vec<f64>, size: [usize; 3], updates: &mut Vec<BnUpdate>) -> BlockTrace {
        let p: usize = size.iter().product();
        let mut a1 = self.conv(&b.c1, &input, size);
        let n1 = b.n1.as_ref().map(|bn| self.bn(bn, &mut a1, b.c1.cout, p, updates));
        nn::relu_inplace(&mut a1);
        let mut out = self.conv(&b.c2, &a1, size);
        let n2 = b.n2.as_ref().map(|bn| self.bn(bn, &mut out, b.c2.cout, p, updates));
        nn::relu_inplace(&mut out);
        BlockTrace { input, n1, a1, n2, out }
    }

    fn conv_back(&self, c: &ConvIdx, x: &[f64], dy: &[f64], size: [usize; 3], grads: &mut Gradients, need_dx: bool) -> Option<Vec<f64>> {
        let g = self.geom(c, size);
        let mut dx = need_dx.then(|| vec![0.0; x.len()]);
        let (gw, gb) = two_mut(&mut grads.0, c.w, c.b);
        nn::conv_backward(x, self.p(c.w), dy, &g, gw, gb, dx.as_deref_mut());
        dx
    }

    fn bn_back(&self, b: &BnIdx, cache: &BnCache, dy: &mut [f64], c: usize, p: usize, grads: &mut Gradients) {
        let (gg, gb) = two_mut(&mut grads.0, b.gamma, b.beta);
        nn::batchnorm_backward(dy, cache, self.n, c, p, self.p(b.gamma), gg, gb);
    }

    fn block_back(&self, b: &BlockIdx, t: &BlockTrace, mut dy: Vec<f64>, size: [usize; 3], grads: &mut Gradients, need_dx: bool) -> Option<Vec<f64>> {
        let p: usize = size.iter().product();
        nn::relu_backward_inplace(&t.out, &mut dy);
        if let (Some(bn), Some(cache)) = (&b.n2, &t.n2) {
            self.bn_back(bn, cache, &mut dy, b.c2.cout, p, grads);
        }
        let mut da1 = self
            .conv_back(&b.c2, &t.a1, &dy, size, grads, true)
            .expect("dx requested");
        nn::relu_backward_inplace(&t.a1, &mut da1);
        if let (Some(bn), Some(cache)) = (&b.n1, &t.n1) {
            self.bn_back(bn, cache, &mut da1, b.c1.cout, p, grads);
        }
        self.conv_back(&b.c1, &t.input, &da1, size, grads, need_dx)
    }
}

fn two_mut<T>(v: &mut [T], i: usize, j: usize) -> (&mut T, &mut T) {
    assert!(i != j);
    if i < j {
        let (a, b) = v.split_at_mut(j);
        (&mut a[i], &mut b[0])
    } else {
        let (a, b) = v.split_at_mut(i);
        (&mut b[0], &mut a[j])
    }
}

fn half(size: [usize; 3]) -> [usize; 3] {
    [size[0] / 2, size[1] / 2, size[2] / 2]
}

fn check_input(cfg: &ModelConfig, input: &Tensor) -> Result<()> {
    if input.shape().len() != 5 {
        return Err(Error::Shape(format!(
            "network input must be [N, C, D, H, W], got {:?}",
            input.shape()
        )));
    }
    let [n, c, d, h, w] = input.dims5();
    if n == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if c != cfg.in_channels {
        return Err(Error::Shape(format!(
            "model expects {} input channels, got {c}",
            cfg.in_channels
        )));
    }
    if [d, h, w].iter().any(|&s| s == 0 || s % SIZE_DIVISOR != 0) {
        return Err(Error::Shape(format!(
            "spatial dims {:?} must be positive multiples of {SIZE_DIVISOR}",
            [d, h, w]
        )));
    }
    if let Some(i) = input.data().iter().position(|x| !x.is_finite()) {
        return Err(Error::Shape(format!("non-finite network input at element {i}")));
    }
    Ok(())
}

/// Runs the network; the output is `[N, 1, D, H, W]` raw logits.
pub fn forward(weights: &NetworkWeights, input: &Tensor, mode: Mode) -> Result<(Tensor, ForwardTrace)> {
    let cfg = &weights.config;
    check_input(cfg, input)?;
    let (lay, _) = layout(cfg);
    let [n, _, d, h, w] = input.dims5();
    let net = Net { w: weights, n, mode };
    let mut updates = Vec::new();

    let mut size = [d, h, w];
    let mut x = input.data().to_vec();
    let mut enc = Vec::with_capacity(3);
    let mut pool_args = Vec::with_capacity(3);
    for b in &lay.enc {
        let t = net.block(b, x, size, &mut updates);
        let (pooled, arg) = nn::maxpool_forward(&t.out, n * b.c2.cout, size, [2, 2, 2]);
        enc.push(t);
        pool_args.push(arg);
        x = pooled;
        size = half(size);
    }
    let mid = net.block(&lay.mid, x, size, &mut updates);

    let mut ups = Vec::with_capacity(3);
    let mut dec: Vec<BlockTrace> = Vec::with_capacity(3);
    for (level, (upc, b)) in lay.up.iter().zip(&lay.dec).enumerate() {
        let below = dec.last().unwrap_or(&mid);
        let below_c = upc.cin;
        let up = nn::upsample2_forward(&below.out, n * below_c, size);
        size = [size[0] * 2, size[1] * 2, size[2] * 2];
        let projected = net.conv(upc, &up, size);
        let skip = &enc[2 - level];
        let p: usize = size.iter().product();
        let cat = nn::concat_channels(&skip.out, upc.cout, &projected, upc.cout, n, p);
        ups.push(up);
        dec.push(net.block(b, cat, size, &mut updates));
    }
    let top = &dec.last().expect("three decoder levels").out;
    let out = net.conv(&lay.head, top, size);
    let trace = ForwardTrace {
        n,
        size,
        enc,
        pool_args,
        mid,
        ups,
        dec,
        bn_updates: updates,
    };
    Ok((Tensor::new(vec![n, OUT_CHANNELS, d, h, w], out)?, trace))
}

/// Parameter gradients of `Σ grad_out · forward(input)`.
pub fn backward(weights: &NetworkWeights, trace: &ForwardTrace, grad_out: &Tensor) -> Result<Gradients> {
    let (lay, _) = layout(&weights.config);
    let n = trace.n;
    let full = trace.size;
    if grad_out.shape() != [n, OUT_CHANNELS, full[0], full[1], full[2]] {
        return Err(Error::Shape(format!(
            "output gradient {:?} does not match forward output",
            grad_out.shape()
        )));
    }
    // Mode only matters in the forward pass; caches record which statistics were used.
    let net = Net { w: weights, n, mode: Mode::Eval };
    let mut grads = weights.zero_grads();

    let top = &trace.dec[2].out;
    let mut dy = net
        .conv_back(&lay.head, top, grad_out.data(), full, &mut grads, true)
        .expect("dx requested");

    let mut size = full;
    let mut skip_grads: Vec<Option<Vec<f64>>> = vec![None, None, None];
    for level in (0..3).rev() {
        let b = &lay.dec[level];
        let upc = &lay.up[level];
        let t = &trace.dec[level];
        let p: usize = size.iter().product();
        let dcat = net
            .block_back(b, t, dy, size, &mut grads, true)
            .expect("dx requested");
        let (dskip, dproj) = nn::split_channels(&dcat, upc.cout, upc.cout, n, p);
        skip_grads[2 - level] = Some(dskip);
        let dup = net
            .conv_back(upc, &trace.ups[level], &dproj, size, &mut grads, true)
            .expect("dx requested");
        size = half(size);
        dy = nn::upsample2_backward(&dup, n * upc.cin, size);
    }

    let mut dx = net.block_back(&lay.mid, &trace.mid, dy, size, &mut grads, true).expect("dx requested");
    for level in (0..3).rev() {
        let b = &lay.enc[level];
        let t = &trace.enc[level];
        let coarse = size;
        size = [size[0] * 2, size[1] * 2, size[2] * 2];
        let p: usize = size.iter().product();
        let _ = coarse;
        let mut dout = nn::maxpool_backward(&dx, &trace.pool_args[level], n * b.c2.cout, p);
        let skip = skip_grads[level].take().expect("decoder produced skip gradient");
        dout.iter_mut().zip(&skip).for_each(|(a, b)| *a += b);
        let need_dx = level > 0;
        match net.block_back(b, t, dout, size, &mut grads, need_dx) {
            Some(g) => dx = g,
            None => break,
        }
    }
    Ok(grads)
}

// ---------------------------------------------------------------------------
// checkpoints
//
// Layout: b"SCTW" | u32 version | u64 header length | JSON header |
// little-endian f64 payload (params then buffers, header order) |
// u32 CRC-32 of everything before it.

const MAGIC: &[u8; 4] = b"SCTW";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    fingerprint: String,
    params: Vec<NamedTensor>,
    buffers: Vec<NamedTensor>,
    #[serde(default)]
    metadata: serde_json::Value,
}

pub fn save_weights(weights: &NetworkWeights, path: impl AsRef<Path>) -> Result<()> {
    save_weights_with_metadata(weights, serde_json::Value::Null, path)
}

/// Saves weights with an arbitrary JSON metadata blob (epoch, metrics, ...).
pub fn save_weights_with_metadata(weights: &NetworkWeights, metadata: serde_json::Value, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = CheckpointHeader {
        config: weights.config.clone(),
        fingerprint: weights.config.fingerprint(),
        params: weights.params.clone(),
        buffers: weights.buffers.clone(),
        metadata,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(16 + header.len() + 8 * weights.parameter_count());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for t in weights.params.iter().chain(&weights.buffers) {
        for x in &t.data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, returning the weights and the stored metadata.
pub fn load_weights_with_metadata(path: impl AsRef<Path>) -> Result<(NetworkWeights, serde_json::Value)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 20 || &bytes[..4] != MAGIC {
        return Err(bad("not a weight checkpoint"));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(bad("checksum mismatch (corrupt or truncated file)"));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    let header_bytes = body.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(header_bytes).map_err(|e| bad(&format!("bad header: {e}")))?;
    header.config.validate().map_err(|e| bad(&e.to_string()))?;
    if header.fingerprint != header.config.fingerprint() {
        return Err(bad("stored fingerprint does not match stored config"));
    }
    let (_, specs) = layout(&header.config);
    let expect = |stored: &[NamedTensor], specs: &[Spec]| {
        stored.len() == specs.len()
            && stored
                .iter()
                .zip(specs)
                .all(|(t, s)| t.name == s.name && t.shape == s.shape)
    };
    if !expect(&header.params, &specs.params) || !expect(&header.buffers, &specs.buffers) {
        return Err(bad("tensor list does not match the architecture"));
    }
    let mut payload = &body[16 + hlen..];
    let mut fill = |tensors: Vec<NamedTensor>| -> Result<Vec<NamedTensor>> {
        tensors
            .into_iter()
            .map(|mut t| {
                let n: usize = t.shape.iter().product();
                if payload.len() < 8 * n {
                    return Err(bad("truncated payload"));
                }
                t.data = payload[..8 * n]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                payload = &payload[8 * n..];
                Ok(t)
            })
            .collect()
    };
    let params = fill(header.params)?;
    let buffers = fill(header.buffers)?;
    if !payload.is_empty() {
        return Err(bad("trailing bytes after payload"));
    }
    Ok((
        NetworkWeights {
            config: header.config,
            params,
            buffers,
        },
        header.metadata,
    ))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<NetworkWeights> {
    load_weights_with_metadata(path).map(|(w, _)| w)
}

/// Loads a checkpoint and requires it to match `cfg`.
pub fn load_weights_for(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<NetworkWeights> {
    let w = load_weights(path)?;
    if w.config.fingerprint() != cfg.fingerprint() {
        return Err(Error::Config(format!(
            "checkpoint was built for {:?}, expected {:?}",
            w.config, cfg
        )));
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(shape: [usize; 5], seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen::<f64>()).collect()).unwrap()
    }

    /// Parameter count from the architecture description alone.
    fn analytic_param_count(cfg: &ModelConfig) -> usize {
        let k3 = KERNEL.pow(3);
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k + cout;
        let bn = |c: usize| if cfg.batch_norm { 2 * c } else { 0 };
        let block = |cin: usize, cout: usize| conv(cin, cout, k3) + bn(cout) + conv(cout, cout, k3) + bn(cout);
        let fm = &cfg.feature_maps;
        let mut total = block(cfg.in_channels, fm[0]) + block(fm[0], fm[1]) + block(fm[1], fm[2]) + block(fm[2], fm[3]);
        for level in 0..3 {
            total += conv(fm[level + 1], fm[level], k3) + block(2 * fm[level], fm[level]);
        }
        total + conv(fm[0], 1, 1)
    }

    #[test]
    fn parameter_count_difference_is_first_conv_channel() {
        let one = build_model(&ModelConfig::unimodal(), 0).unwrap();
        let two = build_model(&ModelConfig::multimodal(), 0).unwrap();
        assert_eq!(two.parameter_count() - one.parameter_count(), 32 * 27);
        assert_eq!(one.parameter_count(), analytic_param_count(&ModelConfig::unimodal()));
        assert_eq!(two.parameter_count(), analytic_param_count(&ModelConfig::multimodal()));
        let widths: Vec<usize> = two
            .params
            .iter()
            .filter(|p| p.name.starts_with("enc") || p.name.starts_with("bottleneck"))
            .filter(|p| p.name.ends_with("conv2.weight"))
            .map(|p| p.shape[0])
            .collect();
        assert_eq!(widths, vec![32, 64, 128, 256]);
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = ModelConfig::tiny(2);
        assert_eq!(build_model(&cfg, 5).unwrap(), build_model(&cfg, 5).unwrap());
        assert_ne!(build_model(&cfg, 5).unwrap(), build_model(&cfg, 6).unwrap());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = ModelConfig::tiny(3);
        assert!(build_model(&c, 0).is_err());
        c.in_channels = 1;
        c.feature_maps = vec![4, 4, 8, 16];
        assert!(build_model(&c, 0).is_err());
        c.feature_maps = vec![4, 8, 16];
        assert!(build_model(&c, 0).is_err());
    }

    #[test]
    fn fuse_orders_ct_first() {
        let ct = Volume::filled([8, 8, 8], Domain::Normalized, 0.25).unwrap();
        let cbct = Volume::filled([8, 8, 8], Domain::Normalized, 0.75).unwrap();
        let t = fuse_inputs(&cbct, Some(&ct)).unwrap();
        assert_eq!(t.shape(), &[1, 2, 8, 8, 8]);
        assert_eq!(t.data()[0], 0.25);
        assert_eq!(t.data()[512], 0.75);
        assert_eq!(fuse_inputs(&cbct, None).unwrap().shape(), &[1, 1, 8, 8, 8]);
        let small = Volume::filled([4, 8, 8], Domain::Normalized, 0.1).unwrap();
        assert!(matches!(fuse_inputs(&cbct, Some(&small)), Err(Error::Shape(_))));
        let hu = Volume::filled([8, 8, 8], Domain::Hu, 100.0).unwrap();
        assert!(matches!(fuse_inputs(&hu, None), Err(Error::Domain(_))));
    }

    #[test]
    fn output_shape_and_shape_errors() {
        let w = build_model(&ModelConfig::tiny(1), 1).unwrap();
        let (y, _) = forward(&w, &random_input([1, 1, 24, 40, 32], 0), Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 1, 24, 40, 32]);
        assert!(y.data().iter().all(|v| v.is_finite()));
        let err = forward(&w, &random_input([1, 1, 30, 30, 30], 0), Mode::Eval);
        assert!(matches!(err, Err(Error::Shape(_))));
        let err = forward(&w, &random_input([1, 2, 8, 8, 8], 0), Mode::Eval);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    fn fd_check(cfg: &ModelConfig, mode: Mode, input_shape: [usize; 5]) {
        let w = build_model(cfg, 3).unwrap();
        let x = random_input(input_shape, 4);
        let r = random_input([input_shape[0], 1, input_shape[2], input_shape[3], input_shape[4]], 5);
        let objective = |w: &NetworkWeights| -> f64 {
            let (y, _) = forward(w, &x, mode).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let (_, trace) = forward(&w, &x, mode).unwrap();
        let g = backward(&w, &trace, &r).unwrap();
        let eps = 1e-6;
        let mut checked = 0;
        for (pi, p) in w.params.iter().enumerate() {
            let picks = [0, p.data.len() / 2, p.data.len() - 1];
            for &i in &picks {
                let mut wp = w.clone();
                wp.params[pi].data[i] += eps;
                let mut wm = w.clone();
                wm.params[pi].data[i] -= eps;
                let fd = (objective(&wp) - objective(&wm)) / (2.0 * eps);
                let an = g.0[pi][i];
                let scale = fd.abs().max(an.abs());
                assert!(
                    (fd - an).abs() <= 1e-2 * scale + 1e-5,
                    "{} [{i}] analytic {an} vs fd {fd} ({mode:?})",
                    p.name
                );
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn gradients_match_finite_differences_without_norm() {
        let mut cfg = ModelConfig::tiny(2);
        cfg.batch_norm = false;
        fd_check(&cfg, Mode::Train, [1, 2, 8, 8, 8]);
    }

    #[test]
    fn gradients_match_finite_differences_with_norm() {
        let cfg = ModelConfig::tiny(2);
        fd_check(&cfg, Mode::Eval, [1, 2, 8, 8, 8]);
        fd_check(&cfg, Mode::Train, [2, 2, 16, 16, 16]);
    }

    #[test]
    fn ct_channel_influences_output() {
        let w = build_model(&ModelConfig::tiny(2), 7).unwrap();
        let x = random_input([1, 2, 16, 16, 16], 8);
        let mut xp = x.clone();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let n = 16 * 16 * 16;
        let delta: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let norm = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
        for (v, d) in xp.data_mut()[..n].iter_mut().zip(&delta) {
            *v += 0.1 * d / norm;
        }
        let (a, _) = forward(&w, &x, Mode::Eval).unwrap();
        let (b, _) = forward(&w, &xp, Mode::Eval).unwrap();
        let diff = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn running_stats_follow_batch_statistics() {
        let mut w = build_model(&ModelConfig::tiny(1), 1).unwrap();
        let before = w.buffers.clone();
        let (_, t) = forward(&w, &random_input([1, 1, 8, 8, 8], 2), Mode::Train).unwrap();
        w.update_running_stats(&t);
        assert_ne!(before, w.buffers);
        assert_eq!(w.buffers.len(), 2 * 2 * 7);
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::tiny(2);
        let w = build_model(&cfg, 11).unwrap();
        let p = dir.path().join("w.ckpt");
        save_weights(&w, &p).unwrap();
        let back = load_weights_for(&p, &cfg).unwrap();
        assert_eq!(back, w);
        let x = random_input([1, 2, 8, 8, 8], 3);
        assert_eq!(forward(&w, &x, Mode::Eval).unwrap().0, forward(&back, &x, Mode::Eval).unwrap().0);

        assert!(matches!(load_weights_for(&p, &ModelConfig::tiny(1)), Err(Error::Config(_))));

        let mut bytes = std::fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(load_weights(&bad), Err(Error::Format(_))));
        std::fs::write(&bad, b"junk").unwrap();
        assert!(matches!(load_weights(&bad), Err(Error::Format(_))));
    }
}
