//! Frozen feature extractor: full-precision and XNOR-popcount convolutions,
//! inference-mode batch normalization, ReLU and global average pooling.
//!
//! Tensors are stored height × width × channels (HWC). Binarized tensors
//! pack each pixel's channel vector into `ceil(channels / 64)` words so a
//! convolution tap is a handful of XOR + popcount operations.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;
use thiserror::Error;

use crate::audio::LogMelSpectrogram;

const MODEL_MAGIC: &[u8; 8] = b"BNNKWS01";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BnnError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a BNNKWS01 weights file")]
    BadMagic,
    #[error("unsupported weights file version {0}")]
    Version(u32),
    #[error("truncated weights file")]
    Truncated,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// Real-valued HWC activation map.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self, BnnError> {
        if data.len() != shape.len() {
            return Err(BnnError::ShapeMismatch(format!(
                "{} values for shape {}",
                data.len(),
                shape
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_spectrogram(spec: &LogMelSpectrogram) -> Self {
        Self {
            shape: Shape::new(spec.frames(), spec.bands(), 1),
            data: spec.values().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.shape.width + x) * self.shape.channels + c]
    }

    fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let c = self.shape.channels;
        let start = (y * self.shape.width + x) * c;
        &self.data[start..start + c]
    }
}

fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

/// Packs a ±1 sign vector (`true` = +1) into words; bit i of word i/64.
fn pack_signs(signs: impl Iterator<Item = bool>, out: &mut [u64]) {
    for (i, s) in signs.enumerate() {
        if s {
            out[i / 64] |= 1u64 << (i % 64);
        }
    }
}

/// Bit-packed ±1 tensor. Bit 1 encodes +1, bit 0 encodes −1; pad bits in
/// each pixel's last word are zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitTensor {
    shape: Shape,
    words_per_pixel: usize,
    bits: Vec<u64>,
}

impl BitTensor {
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn words_per_pixel(&self) -> usize {
        self.words_per_pixel
    }

    pub fn words(&self) -> &[u64] {
        &self.bits
    }

    #[inline]
    fn pixel(&self, y: usize, x: usize) -> &[u64] {
        let start = (y * self.shape.width + x) * self.words_per_pixel;
        &self.bits[start..start + self.words_per_pixel]
    }

    pub fn sign(&self, y: usize, x: usize, c: usize) -> bool {
        self.pixel(y, x)[c / 64] >> (c % 64) & 1 == 1
    }

    /// Expands back to a ±1.0 tensor.
    pub fn unpack(&self) -> Tensor {
        let Shape {
            height,
            width,
            channels,
        } = self.shape;
        let mut data = Vec::with_capacity(self.shape.len());
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(if self.sign(y, x, c) { 1.0 } else { -1.0 });
                }
            }
        }
        Tensor {
            shape: self.shape,
            data,
        }
    }

    /// True when every pad bit is clear.
    pub fn pad_bits_clear(&self) -> bool {
        let tail = self.shape.channels % 64;
        if tail == 0 || self.words_per_pixel == 0 {
            return true;
        }
        let mask = !0u64 << tail;
        self.bits
            .chunks_exact(self.words_per_pixel)
            .all(|p| p[self.words_per_pixel - 1] & mask == 0)
    }
}

/// Sign binarization with sign(0) = +1.
pub fn binarize(x: &Tensor) -> BitTensor {
    let shape = x.shape;
    let wpp = words_for(shape.channels);
    let mut bits = vec![0u64; shape.height * shape.width * wpp];
    if wpp > 0 {
        for (pixel, words) in x
            .data
            .chunks_exact(shape.channels)
            .zip(bits.chunks_exact_mut(wpp))
        {
            pack_signs(pixel.iter().map(|&v| v >= 0.0), words);
        }
    }
    BitTensor {
        shape,
        words_per_pixel: wpp,
        bits,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeometry {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(
        kernel: (usize, usize),
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            kernel_h: kernel.0,
            kernel_w: kernel.1,
            in_channels,
            out_channels,
            stride,
            padding,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.out_channels * self.kernel_h * self.kernel_w * self.in_channels
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape, BnnError> {
        if input.channels != self.in_channels {
            return Err(BnnError::ShapeMismatch(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, input.channels
            )));
        }
        if self.stride == 0 || self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(BnnError::ShapeMismatch(
                "conv kernel dims and stride must be positive".into(),
            ));
        }
        let (ph, pw) = (
            input.height + 2 * self.padding,
            input.width + 2 * self.padding,
        );
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(BnnError::ShapeMismatch(format!(
                "{}x{} kernel does not fit padded input {}",
                self.kernel_h, self.kernel_w, input
            )));
        }
        Ok(Shape::new(
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
            self.out_channels,
        ))
    }

    /// Input coordinate for output position `o` and kernel tap `k`, if in bounds.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        (o * self.stride + k)
            .checked_sub(self.padding)
            .filter(|&i| i < extent)
    }
}

/// Full-precision convolution. Weights are laid out `[out][kh][kw][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FpConv {
    pub geometry: ConvGeometry,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl FpConv {
    pub fn new(geometry: ConvGeometry, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self, BnnError> {
        if weights.len() != geometry.weight_count() || bias.len() != geometry.out_channels {
            return Err(BnnError::ShapeMismatch(format!(
                "conv weights {} / bias {} do not match geometry {:?}",
                weights.len(),
                bias.len(),
                geometry
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(BnnError::InvalidWeights("non-finite conv weight".into()));
        }
        Ok(Self {
            geometry,
            weights,
            bias,
        })
    }
}

/// Standard zero-padded cross-correlation.
pub fn conv2d_fp(x: &Tensor, conv: &FpConv) -> Result<Tensor, BnnError> {
    let g = &conv.geometry;
    let out_shape = g.output_shape(x.shape)?;
    let tap_len = g.in_channels;
    let mut out = Vec::with_capacity(out_shape.len());
    for oy in 0..out_shape.height {
        for ox in 0..out_shape.width {
            for oc in 0..g.out_channels {
                let mut acc = conv.bias[oc] as f64;
                for ky in 0..g.kernel_h {
                    let Some(iy) = g.source(oy, ky, x.shape.height) else {
                        continue;
                    };
                    for kx in 0..g.kernel_w {
                        let Some(ix) = g.source(ox, kx, x.shape.width) else {
                            continue;
                        };
                        let w_start = ((oc * g.kernel_h + ky) * g.kernel_w + kx) * tap_len;
                        let w = &conv.weights[w_start..w_start + tap_len];
                        acc += x
                            .pixel(iy, ix)
                            .iter()
                            .zip(w)
                            .map(|(&a, &b)| a * b as f64)
                            .sum::<f64>();
                    }
                }
                out.push(acc);
            }
        }
    }
    Ok(Tensor {
        shape: out_shape,
        data: out,
    })
}

/// Binarized convolution with packed ±1 weights, `[out][kh][kw][word]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinConv {
    pub geometry: ConvGeometry,
    words_per_tap: usize,
    weights: Vec<u64>,
}

impl BinConv {
    /// Packs real weights by sign (sign(0) = +1). Layout `[out][kh][kw][in]`.
    pub fn from_real(geometry: ConvGeometry, weights: &[f64]) -> Result<Self, BnnError> {
        if weights.len() != geometry.weight_count() {
            return Err(BnnError::ShapeMismatch(format!(
                "{} weights for geometry {:?}",
                weights.len(),
                geometry
            )));
        }
        let wpt = words_for(geometry.in_channels);
        let taps = geometry.out_channels * geometry.kernel_h * geometry.kernel_w;
        let mut packed = vec![0u64; taps * wpt];
        if wpt > 0 {
            for (tap, words) in weights
                .chunks_exact(geometry.in_channels)
                .zip(packed.chunks_exact_mut(wpt))
            {
                pack_signs(tap.iter().map(|&v| v >= 0.0), words);
            }
        }
        Ok(Self {
            geometry,
            words_per_tap: wpt,
            weights: packed,
        })
    }

    pub fn from_words(geometry: ConvGeometry, weights: Vec<u64>) -> Result<Self, BnnError> {
        let wpt = words_for(geometry.in_channels);
        let taps = geometry.out_channels * geometry.kernel_h * geometry.kernel_w;
        if weights.len() != taps * wpt {
            return Err(BnnError::ShapeMismatch(format!(
                "{} packed words, expected {}",
                weights.len(),
                taps * wpt
            )));
        }
        let tail = geometry.in_channels % 64;
        if tail != 0 {
            let mask = !0u64 << tail;
            if weights.chunks_exact(wpt).any(|t| t[wpt - 1] & mask != 0) {
                return Err(BnnError::InvalidWeights(
                    "nonzero pad bits in binarized weights".into(),
                ));
            }
        }
        Ok(Self {
            geometry,
            words_per_tap: wpt,
            weights,
        })
    }

    pub fn words(&self) -> &[u64] {
        &self.weights
    }

    /// ±1.0 weights in `[out][kh][kw][in]` order.
    pub fn unpack(&self) -> Vec<f64> {
        let c = self.geometry.in_channels;
        let mut out = Vec::with_capacity(self.geometry.weight_count());
        if self.words_per_tap == 0 {
            return out;
        }
        for tap in self.weights.chunks_exact(self.words_per_tap) {
            for i in 0..c {
                out.push(if tap[i / 64] >> (i % 64) & 1 == 1 { 1.0 } else { -1.0 });
            }
        }
        out
    }

    /// Equivalent full-precision layer (zero bias) over the unpacked weights.
    pub fn to_fp(&self) -> FpConv {
        FpConv {
            geometry: self.geometry,
            weights: self.unpack().into_iter().map(|v| v as f32).collect(),
            bias: vec![0.0; self.geometry.out_channels],
        }
    }

    fn tap(&self, oc: usize, ky: usize, kx: usize) -> &[u64] {
        let g = &self.geometry;
        let start = ((oc * g.kernel_h + ky) * g.kernel_w + kx) * self.words_per_tap;
        &self.weights[start..start + self.words_per_tap]
    }
}

/// XNOR-popcount convolution. Each in-bounds tap contributes
/// `2·popcount(xnor) − c_in`; zero-padded taps contribute nothing, exactly as
/// in the full-precision cross-correlation of the unpacked ±1 tensors.
pub fn conv2d_bin(x: &BitTensor, conv: &BinConv) -> Result<Tensor, BnnError> {
    let g = &conv.geometry;
    let out_shape = g.output_shape(x.shape)?;
    let c_in = g.in_channels as i64;
    let mut out = Vec::with_capacity(out_shape.len());
    for oy in 0..out_shape.height {
        for ox in 0..out_shape.width {
            for oc in 0..g.out_channels {
                let mut acc: i64 = 0;
                for ky in 0..g.kernel_h {
                    let Some(iy) = g.source(oy, ky, x.shape.height) else {
                        continue;
                    };
                    for kx in 0..g.kernel_w {
                        let Some(ix) = g.source(ox, kx, x.shape.width) else {
                            continue;
                        };
                        // pad bits are zero on both sides, so they never mismatch
                        let mismatches: u32 = x
                            .pixel(iy, ix)
                            .iter()
                            .zip(conv.tap(oc, ky, kx))
                            .map(|(a, w)| (a ^ w).count_ones())
                            .sum();
                        acc += c_in - 2 * mismatches as i64;
                    }
                }
                out.push(acc as f64);
            }
        }
    }
    Ok(Tensor {
        shape: out_shape,
        data: out,
    })
}

/// Inference-mode batch normalization with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BatchNorm {
    pub fn new(
        gamma: Vec<f32>,
        beta: Vec<f32>,
        mean: Vec<f32>,
        var: Vec<f32>,
        eps: f32,
    ) -> Result<Self, BnnError> {
        let c = gamma.len();
        if beta.len() != c || mean.len() != c || var.len() != c {
            return Err(BnnError::ShapeMismatch(
                "batch norm parameter lengths differ".into(),
            ));
        }
        if var.iter().any(|&v| v < 0.0) {
            return Err(BnnError::InvalidWeights("negative batch norm variance".into()));
        }
        if eps < 0.0 || gamma.iter().chain(&beta).chain(&mean).chain(&var).any(|v| !v.is_finite()) {
            return Err(BnnError::InvalidWeights(
                "non-finite batch norm parameter or negative epsilon".into(),
            ));
        }
        Ok(Self {
            gamma,
            beta,
            mean,
            var,
            eps,
        })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps: 0.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    #[inline]
    fn apply_one(&self, c: usize, v: f64) -> f64 {
        let scale = (self.var[c] as f64 + self.eps as f64).sqrt();
        (v - self.mean[c] as f64) / scale * self.gamma[c] as f64 + self.beta[c] as f64
    }

    /// Folds this normalization followed by sign binarization into one
    /// comparison per channel.
    pub fn sign_thresholds(&self) -> Vec<SignThreshold> {
        (0..self.channels())
            .map(|c| {
                let gamma = self.gamma[c] as f64;
                let beta = self.beta[c] as f64;
                if gamma == 0.0 {
                    return SignThreshold::Constant(beta >= 0.0);
                }
                let scale = (self.var[c] as f64 + self.eps as f64).sqrt();
                let t = self.mean[c] as f64 - beta * scale / gamma;
                if gamma > 0.0 {
                    SignThreshold::AtLeast(t)
                } else {
                    SignThreshold::AtMost(t)
                }
            })
            .collect()
    }
}

/// Per-channel replacement for `sign(batch_norm(x))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SignThreshold {
    AtLeast(f64),
    AtMost(f64),
    Constant(bool),
}

impl SignThreshold {
    pub fn sign(&self, x: f64) -> bool {
        match *self {
            SignThreshold::AtLeast(t) => x >= t,
            SignThreshold::AtMost(t) => x <= t,
            SignThreshold::Constant(s) => s,
        }
    }
}

pub fn batch_norm_apply(x: &Tensor, bn: &BatchNorm) -> Result<Tensor, BnnError> {
    if bn.channels() != x.shape.channels {
        return Err(BnnError::ShapeMismatch(format!(
            "batch norm over {} channels applied to {}",
            bn.channels(),
            x.shape
        )));
    }
    let c = x.shape.channels;
    let data = x
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| bn.apply_one(i % c, v))
        .collect();
    Ok(Tensor {
        shape: x.shape,
        data,
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape,
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Per-channel mean over all spatial positions.
pub fn global_avg_pool(x: &Tensor) -> Vec<f64> {
    let c = x.shape.channels;
    let positions = x.shape.height * x.shape.width;
    let mut sums = vec![0.0; c];
    for pixel in x.data.chunks_exact(c.max(1)) {
        for (s, v) in sums.iter_mut().zip(pixel) {
            *s += v;
        }
    }
    if positions > 0 {
        for s in &mut sums {
            *s /= positions as f64;
        }
    }
    sums
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    ConvFp,
    ConvBin,
    BatchNorm,
    Relu,
    GlobalAvgPool,
}

impl LayerKind {
    fn code(self) -> u8 {
        match self {
            LayerKind::ConvFp => 0,
            LayerKind::ConvBin => 1,
            LayerKind::BatchNorm => 2,
            LayerKind::Relu => 3,
            LayerKind::GlobalAvgPool => 4,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => LayerKind::ConvFp,
            1 => LayerKind::ConvBin,
            2 => LayerKind::BatchNorm,
            3 => LayerKind::Relu,
            4 => LayerKind::GlobalAvgPool,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    ConvFp(FpConv),
    ConvBin(BinConv),
    BatchNorm(BatchNorm),
    Relu { channels: usize },
    GlobalAvgPool { channels: usize },
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::ConvFp(_) => LayerKind::ConvFp,
            Layer::ConvBin(_) => LayerKind::ConvBin,
            Layer::BatchNorm(_) => LayerKind::BatchNorm,
            Layer::Relu { .. } => LayerKind::Relu,
            Layer::GlobalAvgPool { .. } => LayerKind::GlobalAvgPool,
        }
    }

    fn in_channels(&self) -> usize {
        match self {
            Layer::ConvFp(c) => c.geometry.in_channels,
            Layer::ConvBin(c) => c.geometry.in_channels,
            Layer::BatchNorm(bn) => bn.channels(),
            Layer::Relu { channels } | Layer::GlobalAvgPool { channels } => *channels,
        }
    }

    fn out_channels(&self) -> usize {
        match self {
            Layer::ConvFp(c) => c.geometry.out_channels,
            Layer::ConvBin(c) => c.geometry.out_channels,
            other => other.in_channels(),
        }
    }

    /// Spatial output shape for the given input (pool collapses to 1×1).
    pub fn output_shape(&self, input: Shape) -> Result<Shape, BnnError> {
        if input.channels != self.in_channels() {
            return Err(BnnError::ShapeMismatch(format!(
                "{:?} layer expects {} channels, got {}",
                self.kind(),
                self.in_channels(),
                input
            )));
        }
        match self {
            Layer::ConvFp(c) => c.geometry.output_shape(input),
            Layer::ConvBin(c) => c.geometry.output_shape(input),
            Layer::GlobalAvgPool { channels } => Ok(Shape::new(1, 1, *channels)),
            _ => Ok(input),
        }
    }
}

/// Frozen extractor: ordered layers ending in global average pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct BnnModel {
    layers: Vec<Layer>,
    feature_dim: usize,
}

impl BnnModel {
    /// Validates channel composition, precision placement and the pooling head.
    pub fn new(layers: Vec<Layer>, feature_dim: usize) -> Result<Self, BnnError> {
        let Some(last) = layers.last() else {
            return Err(BnnError::ShapeMismatch("model has no layers".into()));
        };
        if last.kind() != LayerKind::GlobalAvgPool {
            return Err(BnnError::ShapeMismatch(
                "final layer must be global average pooling".into(),
            ));
        }
        for pair in layers.windows(2) {
            if pair[0].out_channels() != pair[1].in_channels() {
                return Err(BnnError::ShapeMismatch(format!(
                    "{:?} emits {} channels but {:?} expects {}",
                    pair[0].kind(),
                    pair[0].out_channels(),
                    pair[1].kind(),
                    pair[1].in_channels()
                )));
            }
        }
        if layers[..layers.len() - 1]
            .iter()
            .any(|l| l.kind() == LayerKind::GlobalAvgPool)
        {
            return Err(BnnError::ShapeMismatch(
                "global average pooling may only be the final layer".into(),
            ));
        }
        let convs: Vec<LayerKind> = layers
            .iter()
            .map(Layer::kind)
            .filter(|k| matches!(k, LayerKind::ConvFp | LayerKind::ConvBin))
            .collect();
        if convs.first() == Some(&LayerKind::ConvBin) || convs.last() == Some(&LayerKind::ConvBin)
        {
            return Err(BnnError::ShapeMismatch(
                "first and last convolutions must be full precision".into(),
            ));
        }
        if last.out_channels() != feature_dim {
            return Err(BnnError::ShapeMismatch(format!(
                "model emits {} features, header says {}",
                last.out_channels(),
                feature_dim
            )));
        }
        Ok(Self {
            layers,
            feature_dim,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn input_channels(&self) -> usize {
        self.layers[0].in_channels()
    }

    /// Shape after each layer, failing at the first one that does not compose.
    pub fn layer_shapes(&self, input: Shape) -> Result<Vec<Shape>, BnnError> {
        let mut shape = input;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer.output_shape(shape)?;
            out.push(shape);
        }
        Ok(out)
    }

    pub fn forward_tensor(&self, input: &Tensor) -> Result<Vec<f64>, BnnError> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = match layer {
                Layer::ConvFp(c) => conv2d_fp(&x, c)?,
                Layer::ConvBin(c) => conv2d_bin(&binarize(&x), c)?,
                Layer::BatchNorm(bn) => batch_norm_apply(&x, bn)?,
                Layer::Relu { channels } => {
                    check_channels(&x, *channels)?;
                    relu(&x)
                }
                Layer::GlobalAvgPool { channels } => {
                    check_channels(&x, *channels)?;
                    return Ok(global_avg_pool(&x));
                }
            };
        }
        unreachable!("validated models end in global average pooling")
    }

    /// Runs the spectrogram (frames × bands × 1) through every layer.
    pub fn forward_features(&self, spec: &LogMelSpectrogram) -> Result<Vec<f64>, BnnError> {
        self.forward_tensor(&Tensor::from_spectrogram(spec))
    }

    /// Small default stack for a 98×64 log-mel input with random weights.
    ///
    /// Binarized convolutions take the sign of a batch-normalized map; a ReLU
    /// in front of one would make every input bit +1, so ReLU only appears
    /// ahead of full-precision consumers.
    pub fn toy(seed: u64, feature_dim: usize) -> Self {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut normal = |n: usize, scale: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    v * scale
                })
                .collect()
        };
        let fp = |g: ConvGeometry, w: Vec<f64>| {
            FpConv::new(
                g,
                w.into_iter().map(|v| v as f32).collect(),
                vec![0.0; g.out_channels],
            )
            .expect("toy geometry is consistent")
        };
        let g1 = ConvGeometry::new((3, 3), 1, 16, 2, 1);
        let g2 = ConvGeometry::new((3, 3), 16, 32, 2, 1);
        let g3 = ConvGeometry::new((3, 3), 32, 32, 1, 1);
        let g4 = ConvGeometry::new((1, 1), 32, feature_dim, 1, 0);
        let w1 = normal(g1.weight_count(), 0.3);
        let w2 = normal(g2.weight_count(), 1.0);
        let w3 = normal(g3.weight_count(), 1.0);
        let w4 = normal(g4.weight_count(), 0.2);
        let mut rng2 = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut bn = |c: usize, mean_scale: f32, var_scale: f32| {
            BatchNorm::new(
                (0..c).map(|_| rng2.random_range(0.5..1.5)).collect(),
                (0..c).map(|_| rng2.random_range(-0.1..0.1)).collect(),
                (0..c).map(|_| rng2.random_range(-1.0..1.0) * mean_scale).collect(),
                (0..c).map(|_| rng2.random_range(0.5..1.5) * var_scale).collect(),
                1e-3,
            )
            .expect("toy batch norm is valid")
        };
        let layers = vec![
            Layer::ConvFp(fp(g1, w1)),
            Layer::BatchNorm(bn(16, 1.0, 4.0)),
            Layer::ConvBin(BinConv::from_real(g2, &w2).expect("toy geometry")),
            Layer::BatchNorm(bn(32, 4.0, 144.0)),
            Layer::ConvBin(BinConv::from_real(g3, &w3).expect("toy geometry")),
            Layer::BatchNorm(bn(32, 4.0, 288.0)),
            Layer::Relu { channels: 32 },
            Layer::ConvFp(fp(g4, w4)),
            Layer::BatchNorm(bn(feature_dim, 0.1, 1.0)),
            Layer::Relu {
                channels: feature_dim,
            },
            Layer::GlobalAvgPool {
                channels: feature_dim,
            },
        ];
        Self::new(layers, feature_dim).expect("toy model composes")
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), BnnError> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        w.write_all(&(self.feature_dim as u32).to_le_bytes())?;
        for layer in &self.layers {
            let (precision, kh, kw, stride, pad) = match layer {
                Layer::ConvFp(c) => (0u8, c.geometry.kernel_h, c.geometry.kernel_w, c.geometry.stride, c.geometry.padding),
                Layer::ConvBin(c) => (1u8, c.geometry.kernel_h, c.geometry.kernel_w, c.geometry.stride, c.geometry.padding),
                _ => (0u8, 0, 0, 0, 0),
            };
            w.write_all(&[layer.kind().code(), precision])?;
            w.write_all(&(kh as u16).to_le_bytes())?;
            w.write_all(&(kw as u16).to_le_bytes())?;
            w.write_all(&(layer.in_channels() as u32).to_le_bytes())?;
            w.write_all(&(layer.out_channels() as u32).to_le_bytes())?;
            w.write_all(&[stride as u8, pad as u8])?;
            match layer {
                Layer::ConvFp(c) => {
                    write_f32s(&mut w, &c.weights)?;
                    write_f32s(&mut w, &c.bias)?;
                }
                Layer::ConvBin(c) => {
                    for word in &c.weights {
                        w.write_all(&word.to_le_bytes())?;
                    }
                }
                Layer::BatchNorm(bn) => {
                    w.write_all(&bn.eps.to_le_bytes())?;
                    for v in [&bn.gamma, &bn.beta, &bn.mean, &bn.var] {
                        write_f32s(&mut w, v)?;
                    }
                }
                Layer::Relu { .. } | Layer::GlobalAvgPool { .. } => {}
            }
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BnnError> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != MODEL_MAGIC {
            return Err(BnnError::BadMagic);
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(BnnError::Version(version));
        }
        let layer_count = r.u32()? as usize;
        let feature_dim = r.u32()? as usize;
        let mut layers = Vec::with_capacity(layer_count.min(1024));
        for _ in 0..layer_count {
            let kind_code = r.u8()?;
            let precision = r.u8()?;
            let kh = r.u16()? as usize;
            let kw = r.u16()? as usize;
            let c_in = r.u32()? as usize;
            let c_out = r.u32()? as usize;
            let stride = r.u8()? as usize;
            let pad = r.u8()? as usize;
            let kind = LayerKind::from_code(kind_code).ok_or_else(|| {
                BnnError::InvalidWeights(format!("unknown layer kind {kind_code}"))
            })?;
            let expected_precision = u8::from(kind == LayerKind::ConvBin);
            if precision != expected_precision {
                return Err(BnnError::InvalidWeights(format!(
                    "{kind:?} layer with precision flag {precision}"
                )));
            }
            let geometry = ConvGeometry::new((kh, kw), c_in, c_out, stride, pad);
            let layer = match kind {
                LayerKind::ConvFp => {
                    let weights = r.f32s(geometry.weight_count())?;
                    let bias = r.f32s(c_out)?;
                    Layer::ConvFp(FpConv::new(geometry, weights, bias)?)
                }
                LayerKind::ConvBin => {
                    let n = c_out * kh * kw * words_for(c_in);
                    let words = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
                    Layer::ConvBin(BinConv::from_words(geometry, words)?)
                }
                LayerKind::BatchNorm | LayerKind::Relu | LayerKind::GlobalAvgPool => {
                    if c_in != c_out {
                        return Err(BnnError::ShapeMismatch(format!(
                            "{kind:?} layer maps {c_in} channels to {c_out}"
                        )));
                    }
                    match kind {
                        LayerKind::BatchNorm => {
                            let eps = r.f32()?;
                            let gamma = r.f32s(c_in)?;
                            let beta = r.f32s(c_in)?;
                            let mean = r.f32s(c_in)?;
                            let var = r.f32s(c_in)?;
                            Layer::BatchNorm(BatchNorm::new(gamma, beta, mean, var, eps)?)
                        }
                        LayerKind::Relu => Layer::Relu { channels: c_in },
                        _ => Layer::GlobalAvgPool { channels: c_in },
                    }
                }
            };
            if matches!(layer, Layer::ConvFp(_) | Layer::ConvBin(_)) && stride == 0 {
                return Err(BnnError::ShapeMismatch("zero convolution stride".into()));
            }
            layers.push(layer);
        }
        if r.pos != bytes.len() {
            return Err(BnnError::InvalidWeights(format!(
                "{} trailing bytes after the last layer",
                bytes.len() - r.pos
            )));
        }
        Self::new(layers, feature_dim)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }
}

fn check_channels(x: &Tensor, channels: usize) -> Result<(), BnnError> {
    if x.shape.channels != channels {
        return Err(BnnError::ShapeMismatch(format!(
            "layer over {} channels applied to {}",
            channels, x.shape
        )));
    }
    Ok(())
}

fn write_f32s(w: &mut impl Write, values: &[f32]) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BnnError> {
        let end = self.pos.checked_add(n).ok_or(BnnError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(BnnError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, BnnError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, BnnError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, BnnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, BnnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, BnnError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, BnnError> {
        let raw = self.take(n.checked_mul(4).ok_or(BnnError::Truncated)?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<BnnModel, BnnError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    BnnModel::from_bytes(&bytes)
}

pub fn save_model(model: &BnnModel, path: impl AsRef<Path>) -> Result<(), BnnError> {
    let mut w = BufWriter::new(File::create(path)?);
    model.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn binarize_sign_rule() {
        let b = binarize(&t(Shape::new(1, 1, 3), &[0.3, -0.2, 0.0]));
        assert_eq!(b.unpack().data(), &[1.0, -1.0, 1.0]);
        let neg = binarize(&Tensor::filled(Shape::new(2, 3, 70), -0.5));
        assert!(neg.words().iter().all(|&w| w == 0));
        let pos = binarize(&Tensor::filled(Shape::new(2, 3, 70), 0.5));
        assert!(pos.pad_bits_clear());
        assert_eq!(pos.words()[1], (1u64 << 6) - 1);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let g = ConvGeometry::new((1, 1), 1, 1, 1, 0);
        let conv = FpConv::new(g, vec![1.0], vec![0.0]).unwrap();
        let x = t(Shape::new(2, 3, 1), &[1.0, -2.0, 3.5, 0.0, 7.0, -1.25]);
        assert_eq!(conv2d_fp(&x, &conv).unwrap(), x);
    }

    #[test]
    fn all_ones_valid_conv() {
        let c = 5;
        let g = ConvGeometry::new((3, 3), c, 2, 1, 0);
        let conv = FpConv::new(g, vec![1.0; g.weight_count()], vec![0.0; 2]).unwrap();
        let out = conv2d_fp(&Tensor::filled(Shape::new(3, 3, c), 1.0), &conv).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 2));
        assert!(out.data().iter().all(|&v| v == 9.0 * c as f64));

        let bconv = BinConv::from_real(g, &vec![1.0; g.weight_count()]).unwrap();
        let bout = conv2d_bin(&binarize(&Tensor::filled(Shape::new(3, 3, c), 1.0)), &bconv).unwrap();
        assert!(bout.data().iter().all(|&v| v == 9.0 * c as f64));
    }

    #[test]
    fn anticorrelated_binary_kernel() {
        let c = 67;
        let g = ConvGeometry::new((3, 3), c, 1, 1, 0);
        let x: Vec<f64> = (0..9 * c).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect();
        let w: Vec<f64> = x.iter().map(|v| -v).collect();
        let conv = BinConv::from_real(g, &w).unwrap();
        let out = conv2d_bin(&binarize(&t(Shape::new(3, 3, c), &x)), &conv).unwrap();
        assert_eq!(out.data(), &[-(9.0 * c as f64)]);
    }

    #[test]
    fn conv_rejects_shape_mismatch() {
        let g = ConvGeometry::new((3, 3), 2, 1, 1, 0);
        let conv = FpConv::new(g, vec![0.0; 18], vec![0.0]).unwrap();
        assert!(conv2d_fp(&Tensor::zeros(Shape::new(4, 4, 3)), &conv).is_err());
        assert!(conv2d_fp(&Tensor::zeros(Shape::new(2, 2, 2)), &conv).is_err());
        assert!(FpConv::new(g, vec![0.0; 17], vec![0.0]).is_err());
    }

    #[test]
    fn batch_norm_identities() {
        let x = t(Shape::new(1, 2, 2), &[1.0, -2.0, 3.0, 0.5]);
        assert_eq!(batch_norm_apply(&x, &BatchNorm::identity(2)).unwrap(), x);
        let bn = BatchNorm::new(vec![0.0, 0.0], vec![0.25, -3.0], vec![1.0, 2.0], vec![2.0, 3.0], 1e-5)
            .unwrap();
        let y = batch_norm_apply(&x, &bn).unwrap();
        assert_eq!(y.data(), &[0.25, -3.0, 0.25, -3.0]);
        assert!(BatchNorm::new(vec![1.0], vec![0.0], vec![0.0], vec![-1.0], 0.0).is_err());
        assert!(batch_norm_apply(&x, &BatchNorm::identity(3)).is_err());
    }

    #[test]
    fn relu_and_pool() {
        let x = t(Shape::new(1, 2, 1), &[-1.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
        let neg = Tensor::filled(Shape::new(2, 2, 2), -3.0);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        let pos = t(Shape::new(1, 3, 1), &[0.5, 1.0, 2.0]);
        assert_eq!(relu(&pos), pos);

        assert_eq!(global_avg_pool(&Tensor::filled(Shape::new(3, 4, 2), 2.5)), vec![2.5, 2.5]);
        assert_eq!(global_avg_pool(&t(Shape::new(2, 2, 1), &[0.0, 2.0, 2.0, 0.0])), vec![1.0]);
    }

    #[test]
    fn folded_thresholds_match_sign_of_batch_norm() {
        let bn = BatchNorm::new(
            vec![1.5, -0.5, 0.0, 2.0],
            vec![0.3, 0.7, -0.1, 0.0],
            vec![2.0, -1.0, 0.0, 0.5],
            vec![4.0, 0.25, 1.0, 9.0],
            1e-3,
        )
        .unwrap();
        let thresholds = bn.sign_thresholds();
        for xi in -40..=40 {
            let x = xi as f64 * 0.5;
            for (c, th) in thresholds.iter().enumerate() {
                assert_eq!(th.sign(x), bn.apply_one(c, x) >= 0.0, "channel {c} at {x}");
            }
        }
    }

    #[test]
    fn identity_model_forward() {
        let g = ConvGeometry::new((1, 1), 3, 3, 1, 0);
        let mut w = vec![0.0f32; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let model = BnnModel::new(
            vec![
                Layer::ConvFp(FpConv::new(g, w, vec![0.0; 3]).unwrap()),
                Layer::GlobalAvgPool { channels: 3 },
            ],
            3,
        )
        .unwrap();
        let f = model
            .forward_tensor(&Tensor::filled(Shape::new(4, 5, 3), 1.75))
            .unwrap();
        assert_eq!(f, vec![1.75; 3]);
    }

    #[test]
    fn model_validation_rules() {
        let fp = |cin, cout| {
            let g = ConvGeometry::new((1, 1), cin, cout, 1, 0);
            Layer::ConvFp(FpConv::new(g, vec![0.5; cin * cout], vec![0.0; cout]).unwrap())
        };
        let bin = |cin, cout| {
            let g = ConvGeometry::new((1, 1), cin, cout, 1, 0);
            Layer::ConvBin(BinConv::from_real(g, &vec![1.0; cin * cout]).unwrap())
        };
        let gap = |c| Layer::GlobalAvgPool { channels: c };
        assert!(BnnModel::new(vec![fp(1, 4), bin(4, 4), fp(4, 2), gap(2)], 2).is_ok());
        assert!(BnnModel::new(vec![bin(1, 4), fp(4, 2), gap(2)], 2).is_err());
        assert!(BnnModel::new(vec![fp(1, 4), bin(4, 2), gap(2)], 2).is_err());
        assert!(BnnModel::new(vec![fp(1, 4), fp(3, 2), gap(2)], 2).is_err());
        assert!(BnnModel::new(vec![fp(1, 4), fp(4, 2)], 2).is_err());
        assert!(BnnModel::new(vec![fp(1, 4), fp(4, 2), gap(2)], 3).is_err());
        assert!(BnnModel::new(vec![], 0).is_err());
    }

    #[test]
    fn toy_model_runs_on_a_spectrogram_and_is_pure() {
        let model = BnnModel::toy(7, 12);
        let values: Vec<f32> = (0..98 * 64).map(|i| ((i * 37) % 101) as f32 / 10.0 - 12.0).collect();
        let spec = LogMelSpectrogram::new(98, 64, values).unwrap();
        let before = model.clone();
        let a = model.forward_features(&spec).unwrap();
        let b = model.forward_features(&spec).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(a, b);
        assert_eq!(model, before);
        assert!(a.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn weights_file_round_trip_is_byte_identical() {
        let model = BnnModel::toy(3, 12);
        let bytes = model.to_bytes();
        assert_eq!(&bytes[..8], b"BNNKWS01");
        let loaded = BnnModel::from_bytes(&bytes).unwrap();
        assert_eq!(loaded, model);
        assert_eq!(loaded.to_bytes(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bnn");
        save_model(&model, &p).unwrap();
        assert_eq!(load_model(&p).unwrap(), model);
    }

    #[test]
    fn weights_file_errors() {
        let bytes = BnnModel::toy(3, 12).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(matches!(BnnModel::from_bytes(&bad), Err(BnnError::BadMagic)));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(BnnModel::from_bytes(&bad), Err(BnnError::Version(9))));
        assert!(matches!(
            BnnModel::from_bytes(&bytes[..bytes.len() - 3]),
            Err(BnnError::Truncated)
        ));
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(BnnModel::from_bytes(&bad).is_err());
        // feature_dim in the header no longer matches the pooled channel count
        let mut bad = bytes.clone();
        bad[16..20].copy_from_slice(&11u32.to_le_bytes());
        assert!(matches!(BnnModel::from_bytes(&bad), Err(BnnError::ShapeMismatch(_))));
    }

    #[test]
    fn nonzero_pad_bits_rejected() {
        let g = ConvGeometry::new((1, 1), 3, 1, 1, 0);
        assert!(BinConv::from_words(g, vec![0b111]).is_ok());
        assert!(BinConv::from_words(g, vec![0b1111]).is_err());
    }
}
