//! Frozen CNN backbones: the `.spwt` weight format, validation, and the
//! tapped forward pass that produces a feature pyramid.
//!
//! Layout of a `.spwt` file (all little-endian):
//!
//! ```text
//! "SPWT" | u32 version=1 | u8 norm_flag | [6×f32 means, stds if norm_flag=1]
//! u32 n_layers | u32 n_taps | n_taps×u32 tap indices
//! per layer: u8 kind (0=Conv, 1=ReLU, 2=MaxPool)
//!   Conv:    6×u32 (out_c, in_c, kH, kW, stride, pad), weights, biases (f32)
//!   MaxPool: 2×u32 (k, stride)
//! ```

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{conv2d, maxpool2d, relu, Tensor};

pub const SPWT_MAGIC: &[u8; 4] = b"SPWT";
pub const SPWT_VERSION: u32 = 1;

/// ImageNet statistics used by torchvision-style pretrained weights.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputNorm {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl InputNorm {
    pub fn imagenet() -> Self {
        InputNorm {
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `out_c × in_c × kH × kW`.
    pub weights: Tensor,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    fn kernel(&self) -> (usize, usize) {
        (self.weights.shape()[2], self.weights.shape()[3])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerDef {
    Conv(ConvLayer),
    Relu,
    MaxPool { k: usize, stride: usize },
}

impl fmt::Display for LayerDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerDef::Conv(c) => {
                let (kh, kw) = c.kernel();
                write!(
                    f,
                    "Conv({}→{}, {kh}×{kw}, stride {}, pad {})",
                    c.in_channels(),
                    c.out_channels(),
                    c.stride,
                    c.pad
                )
            }
            LayerDef::Relu => write!(f, "ReLU"),
            LayerDef::MaxPool { k, stride } => write!(f, "MaxPool({k}, stride {stride})"),
        }
    }
}

/// A validated, immutable backbone definition.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneSpec {
    name: String,
    layers: Vec<LayerDef>,
    taps: Vec<usize>,
    norm: Option<InputNorm>,
}

/// Feature maps recorded at each tap, in tap order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub features: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

impl BackboneSpec {
    pub fn new(
        name: impl Into<String>,
        layers: Vec<LayerDef>,
        taps: Vec<usize>,
        norm: Option<InputNorm>,
    ) -> Result<Self> {
        let spec = BackboneSpec {
            name: name.into(),
            layers,
            taps,
            norm,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.taps.is_empty() {
            return Err(Error::Validation("backbone declares no taps".into()));
        }
        if self.taps.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Validation(format!(
                "tap indices {:?} are not strictly increasing",
                self.taps
            )));
        }
        if let Some(&last) = self.taps.last() {
            if last >= self.layers.len() {
                return Err(Error::Validation(format!(
                    "tap {last} out of range for {} layers",
                    self.layers.len()
                )));
            }
        }
        if let Some(norm) = &self.norm {
            if norm
                .std
                .iter()
                .any(|&s| s.is_nan() || s <= 0.0 || !s.is_finite())
                || norm.mean.iter().any(|m| !m.is_finite())
            {
                return Err(Error::Validation(format!(
                    "bad input normalization {norm:?}"
                )));
            }
        }
        let mut channels = 3;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerDef::Conv(c) => {
                    if c.weights.shape().len() != 4 {
                        return Err(Error::Validation(format!(
                            "layer {i}: conv weights must be rank 4"
                        )));
                    }
                    if c.in_channels() != channels {
                        return Err(Error::Validation(format!(
                            "layer {i}: conv expects {} input channels but receives {channels}",
                            c.in_channels()
                        )));
                    }
                    if c.bias.len() != c.out_channels() {
                        return Err(Error::Validation(format!(
                            "layer {i}: {} biases for {} output channels",
                            c.bias.len(),
                            c.out_channels()
                        )));
                    }
                    if c.stride == 0
                        || c.kernel().0 == 0
                        || c.kernel().1 == 0
                        || c.out_channels() == 0
                    {
                        return Err(Error::Validation(format!(
                            "layer {i}: degenerate conv {layer}"
                        )));
                    }
                    if c.bias.iter().any(|b| !b.is_finite()) {
                        return Err(Error::Validation(format!("layer {i}: non-finite bias")));
                    }
                    channels = c.out_channels();
                }
                LayerDef::Relu => {}
                LayerDef::MaxPool { k, stride } => {
                    if *k == 0 || *stride == 0 {
                        return Err(Error::Validation(format!("layer {i}: degenerate {layer}")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layers(&self) -> &[LayerDef] {
        &self.layers
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    pub fn norm(&self) -> Option<&InputNorm> {
        self.norm.as_ref()
    }

    /// Number of feature-extraction layers.
    pub fn depth(&self) -> usize {
        self.taps.len()
    }

    /// Output channel count at each tap.
    pub fn tap_channels(&self) -> Vec<usize> {
        let mut channels = 3;
        let mut out = Vec::with_capacity(self.taps.len());
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerDef::Conv(c) = layer {
                channels = c.out_channels();
            }
            if self.taps.contains(&i) {
                out.push(channels);
            }
        }
        out
    }

    /// `[C, H, W]` of every tap for an `h×w` input, without running the
    /// network.
    pub fn tap_shapes(&self, h: usize, w: usize) -> Result<Vec<[usize; 3]>> {
        let (mut c, mut h, mut w) = (3usize, h, w);
        let mut out = Vec::with_capacity(self.taps.len());
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerDef::Conv(conv) => {
                    let (kh, kw) = conv.kernel();
                    let (ph, pw) = (h + 2 * conv.pad, w + 2 * conv.pad);
                    if ph < kh || pw < kw {
                        return Err(too_small(i, layer, h, w));
                    }
                    h = (ph - kh) / conv.stride + 1;
                    w = (pw - kw) / conv.stride + 1;
                    c = conv.out_channels();
                }
                LayerDef::Relu => {}
                LayerDef::MaxPool { k, stride } => {
                    if *k > h || *k > w {
                        return Err(too_small(i, layer, h, w));
                    }
                    h = (h - k) / stride + 1;
                    w = (w - k) / stride + 1;
                }
            }
            if self.taps.contains(&i) {
                out.push([c, h, w]);
            }
            if self.taps.last() == Some(&i) {
                break;
            }
        }
        Ok(out)
    }

    /// Runs the network on a `3×H×W` image in `[0, 1]` and records the
    /// output of every tap layer. Layers after the last tap are skipped.
    pub fn extract_features(&self, image: &Tensor) -> Result<FeaturePyramid> {
        let (c, h, w) = image.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!(
                "backbone input must have 3 channels, got {c}"
            )));
        }
        if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "image value {v} outside [0, 1]"
            )));
        }
        let mut x = match &self.norm {
            Some(n) => {
                let plane = h * w;
                let data = image
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let ch = i / plane;
                        (v - n.mean[ch]) / n.std[ch]
                    })
                    .collect();
                Tensor::new(vec![3, h, w], data)?
            }
            None => image.clone(),
        };

        let last_tap = *self.taps.last().expect("validated non-empty");
        let mut features = Vec::with_capacity(self.taps.len());
        let mut next_tap = 0;
        for (i, layer) in self.layers.iter().enumerate().take(last_tap + 1) {
            let (_, lh, lw) = x.dims3()?;
            x = match layer {
                LayerDef::Conv(conv) => {
                    conv2d(&x, &conv.weights, &conv.bias, conv.stride, conv.pad)
                        .map_err(|_| too_small(i, layer, lh, lw))?
                }
                LayerDef::Relu => relu(&x),
                LayerDef::MaxPool { k, stride } => {
                    maxpool2d(&x, *k, *stride).map_err(|_| too_small(i, layer, lh, lw))?
                }
            };
            if self.taps[next_tap] == i {
                features.push(x.clone());
                next_tap += 1;
            }
        }
        Ok(FeaturePyramid { features })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SPWT_MAGIC);
        out.extend_from_slice(&SPWT_VERSION.to_le_bytes());
        match &self.norm {
            Some(n) => {
                out.push(1);
                for v in n.mean.iter().chain(&n.std) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            None => out.push(0),
        }
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.taps.len() as u32).to_le_bytes());
        for &t in &self.taps {
            out.extend_from_slice(&(t as u32).to_le_bytes());
        }
        for layer in &self.layers {
            match layer {
                LayerDef::Conv(c) => {
                    out.push(0);
                    let (kh, kw) = c.kernel();
                    for v in [c.out_channels(), c.in_channels(), kh, kw, c.stride, c.pad] {
                        out.extend_from_slice(&(v as u32).to_le_bytes());
                    }
                    for v in c.weights.data().iter().chain(&c.bias) {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                LayerDef::Relu => out.push(1),
                LayerDef::MaxPool { k, stride } => {
                    out.push(2);
                    out.extend_from_slice(&(*k as u32).to_le_bytes());
                    out.extend_from_slice(&(*stride as u32).to_le_bytes());
                }
            }
        }
        out
    }

    /// Parses a `.spwt` byte stream; `path` is only used in error messages
    /// and `name` becomes the backbone name.
    pub fn from_bytes(bytes: &[u8], name: &str, path: &Path) -> Result<Self> {
        let fmt_err = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let mut r = ByteReader::new(bytes, path);
        let magic = r.take(4)?;
        if magic != SPWT_MAGIC {
            return Err(fmt_err(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = r.u32()?;
        if version != SPWT_VERSION {
            return Err(fmt_err(format!("unsupported version {version}")));
        }
        let norm = match r.u8()? {
            0 => None,
            1 => {
                let mut vals = [0f32; 6];
                for v in &mut vals {
                    *v = r.f32()?;
                }
                Some(InputNorm {
                    mean: [vals[0], vals[1], vals[2]],
                    std: [vals[3], vals[4], vals[5]],
                })
            }
            f => return Err(fmt_err(format!("bad normalization flag {f}"))),
        };
        let n_layers = r.u32()? as usize;
        let n_taps = r.u32()? as usize;
        if n_taps > bytes.len() {
            return Err(fmt_err(format!("implausible tap count {n_taps}")));
        }
        let taps = (0..n_taps)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut layers = Vec::new();
        for i in 0..n_layers {
            let layer = match r.u8()? {
                0 => {
                    let mut dims = [0usize; 6];
                    for d in &mut dims {
                        *d = r.u32()? as usize;
                    }
                    let [out_c, in_c, kh, kw, stride, pad] = dims;
                    let n = out_c
                        .checked_mul(in_c)
                        .and_then(|v| v.checked_mul(kh))
                        .and_then(|v| v.checked_mul(kw))
                        .filter(|&n| n <= bytes.len())
                        .ok_or_else(|| {
                            fmt_err(format!("layer {i}: implausible conv shape {dims:?}"))
                        })?;
                    let weights = r.f32_vec(n)?;
                    let bias = r.f32_vec(out_c)?;
                    let weights = Tensor::new(vec![out_c, in_c, kh, kw], weights)
                        .map_err(|e| fmt_err(format!("layer {i}: {e}")))?;
                    LayerDef::Conv(ConvLayer {
                        weights,
                        bias,
                        stride,
                        pad,
                    })
                }
                1 => LayerDef::Relu,
                2 => {
                    let k = r.u32()? as usize;
                    let stride = r.u32()? as usize;
                    LayerDef::MaxPool { k, stride }
                }
                kind => return Err(fmt_err(format!("layer {i}: unknown kind {kind}"))),
            };
            layers.push(layer);
        }
        if !r.is_empty() {
            return Err(fmt_err(format!("{} trailing bytes", r.remaining())));
        }
        BackboneSpec::new(name, layers, taps, norm)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn too_small(index: usize, layer: &LayerDef, h: usize, w: usize) -> Error {
    Error::Shape(format!(
        "input too small at layer {index} ({layer}): receives {h}×{w}"
    ))
}

/// Reads a `.spwt` file. The backbone is named after the file stem.
pub fn load_backbone(path: impl AsRef<Path>) -> Result<BackboneSpec> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "backbone".to_string());
    BackboneSpec::from_bytes(&bytes, &name, path)
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        ByteReader {
            bytes,
            pos: 0,
            path,
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                msg: format!("truncated: needed {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.saturating_mul(4))?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.remaining() == 0
    }
}

/// The five-conv AlexNet feature stack, tapped after each ReLU.
/// Returns `(layers, taps)` with weights drawn by `init`.
fn alexnet_layers(
    mut init: impl FnMut(usize, usize, usize) -> ConvLayer,
) -> (Vec<LayerDef>, Vec<usize>) {
    let layers = vec![
        LayerDef::Conv(init(64, 3, 11).with_geometry(4, 2)),
        LayerDef::Relu,
        LayerDef::MaxPool { k: 3, stride: 2 },
        LayerDef::Conv(init(192, 64, 5).with_geometry(1, 2)),
        LayerDef::Relu,
        LayerDef::MaxPool { k: 3, stride: 2 },
        LayerDef::Conv(init(384, 192, 3).with_geometry(1, 1)),
        LayerDef::Relu,
        LayerDef::Conv(init(256, 384, 3).with_geometry(1, 1)),
        LayerDef::Relu,
        LayerDef::Conv(init(256, 256, 3).with_geometry(1, 1)),
        LayerDef::Relu,
    ];
    (layers, vec![1, 4, 7, 9, 11])
}

impl ConvLayer {
    fn with_geometry(mut self, stride: usize, pad: usize) -> Self {
        self.stride = stride;
        self.pad = pad;
        self
    }
}

/// AlexNet-shaped backbone with seeded He-uniform weights and zero biases.
///
/// Useful wherever pretrained weights are unavailable: the layer geometry,
/// channel counts and taps match the exported network exactly.
pub fn alexnet_random(seed: u64) -> BackboneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (layers, taps) = alexnet_layers(|out_c, in_c, k| {
        let fan_in = (in_c * k * k) as f32;
        let bound = (6.0 / fan_in).sqrt();
        let n = out_c * in_c * k * k;
        let weights = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        ConvLayer {
            weights: Tensor::new(vec![out_c, in_c, k, k], weights).expect("sized above"),
            bias: vec![0.0; out_c],
            stride: 1,
            pad: 0,
        }
    });
    BackboneSpec::new(
        format!("alexnet-random-{seed}"),
        layers,
        taps,
        Some(InputNorm::imagenet()),
    )
    .expect("static AlexNet definition is valid")
}
