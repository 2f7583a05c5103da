//! The trainable fusion head.
//!
//! Every quality map gets its own 1×1 convolution to a single channel,
//! followed by ReLU and a spatial mean. Map means are averaged within each
//! group, and the group means are mixed with softmax weights that live on
//! the simplex. A two-parameter logistic on the score gap turns a pair of
//! scores into a preference probability for 2AFC training.
//!
//! Parameters are kept in `f64`; the `.spht` file stores them as `f32`.
//! All gradients are written out by hand.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneSpec, ByteReader};
use crate::deep::QualityGroups;
use crate::error::{Error, Result};
use crate::traditional::QualityMap;

pub const SPHT_MAGIC: &[u8; 4] = b"SPHT";
pub const SPHT_VERSION: u32 = 1;
/// Stored in place of the logit of a group the ablation removes.
pub const ABSENT_LOGIT: f64 = -1e30;
/// Amplitude of the uniform noise added to the channel-mean kernels.
pub const INIT_NOISE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Tradition,
    Percept,
    Semantic,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Tradition, Group::Percept, Group::Semantic];

    pub fn index(self) -> usize {
        self as usize
    }

    fn from_index(i: u32) -> Option<Group> {
        Group::ALL.get(i as usize).copied()
    }

    fn maps(self, groups: &QualityGroups) -> &[QualityMap] {
        match self {
            Group::Tradition => &groups.tradition,
            Group::Percept => &groups.percept,
            Group::Semantic => &groups.semantic,
        }
    }
}

/// Which groups take part in scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Ablation {
    #[default]
    Full,
    NoSemantic,
    NoTradition,
}

impl Ablation {
    pub fn is_active(self, g: Group) -> bool {
        !matches!(
            (self, g),
            (Ablation::NoSemantic, Group::Semantic) | (Ablation::NoTradition, Group::Tradition)
        )
    }

    pub fn active_groups(self) -> impl Iterator<Item = Group> {
        Group::ALL.into_iter().filter(move |&g| self.is_active(g))
    }

    pub fn code(self) -> u8 {
        match self {
            Ablation::Full => 0,
            Ablation::NoSemantic => 1,
            Ablation::NoTradition => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Ablation::Full),
            1 => Some(Ablation::NoSemantic),
            2 => Some(Ablation::NoTradition),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoSemantic => "no-semantic",
            Ablation::NoTradition => "no-tradition",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no-semantic" => Ok(Ablation::NoSemantic),
            "no-tradition" => Ok(Ablation::NoTradition),
            _ => Err(Error::InvalidInput(format!("unknown ablation {s:?}"))),
        }
    }
}

/// A 1×1 convolution from one quality map's channels to a single channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub group: Group,
    pub weights: Vec<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    pub ablation: Ablation,
    /// Kernels of the active groups, tradition first, then percept, then
    /// semantic, each in map order.
    pub kernels: Vec<Kernel>,
    pub lambda_logits: [f64; 3],
    pub comparator_scale: f64,
    pub comparator_bias: f64,
}

/// Same layout as [`FusionHead`], holding `∂loss/∂θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHeadGradients {
    pub kernels: Vec<KernelGrad>,
    pub lambda_logits: [f64; 3],
    pub comparator_scale: f64,
    pub comparator_bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelGrad {
    pub weights: Vec<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreBreakdown {
    pub f_trad_mean: f64,
    pub f_percept_mean: f64,
    pub f_semantic_mean: f64,
    /// Zero for groups the ablation removes.
    pub lambdas: [f64; 3],
    pub score: f64,
}

impl ScoreBreakdown {
    fn group_means(&self) -> [f64; 3] {
        [self.f_trad_mean, self.f_percept_mean, self.f_semantic_mean]
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Softmax over the active groups; inactive groups get weight 0.
pub fn simplex_weights(logits: &[f64; 3], ablation: Ablation) -> [f64; 3] {
    let max = ablation
        .active_groups()
        .map(|g| logits[g.index()])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; 3];
    let mut total = 0.0;
    for g in ablation.active_groups() {
        let e = (logits[g.index()] - max).exp();
        out[g.index()] = e;
        total += e;
    }
    for v in &mut out {
        *v /= total;
    }
    out
}

/// Spatial mean of `ReLU(w·Q + b)` for one map.
fn map_feature(kernel: &Kernel, map: &QualityMap) -> f64 {
    let data = map.map.data();
    let c = kernel.weights.len();
    let p = data.len() / c;
    let mut total = 0.0;
    for i in 0..p {
        let mut y = kernel.bias;
        for (ci, w) in kernel.weights.iter().enumerate() {
            y += w * data[ci * p + i] as f64;
        }
        if y > 0.0 {
            total += y;
        }
    }
    total / p as f64
}

/// As [`map_feature`], plus `∂f/∂w` and `∂f/∂b`.
fn map_feature_grad(kernel: &Kernel, map: &QualityMap) -> (f64, Vec<f64>, f64) {
    let data = map.map.data();
    let c = kernel.weights.len();
    let p = data.len() / c;
    let mut total = 0.0;
    let mut gw = vec![0.0; c];
    let mut active = 0usize;
    for i in 0..p {
        let mut y = kernel.bias;
        for (ci, w) in kernel.weights.iter().enumerate() {
            y += w * data[ci * p + i] as f64;
        }
        if y > 0.0 {
            total += y;
            active += 1;
            for (ci, g) in gw.iter_mut().enumerate() {
                *g += data[ci * p + i] as f64;
            }
        }
    }
    let inv = 1.0 / p as f64;
    gw.iter_mut().for_each(|g| *g *= inv);
    (total * inv, gw, active as f64 * inv)
}

impl FusionHead {
    /// Channel-mean kernels plus `U(-amplitude, amplitude)` noise, zero
    /// biases, equal group weights, `a = 1`, `b = 0`.
    pub fn with_noise(
        channels: &[(Group, usize)],
        ablation: Ablation,
        seed: u64,
        amplitude: f64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernels = channels
            .iter()
            .filter(|(g, _)| ablation.is_active(*g))
            .map(|&(group, c)| Kernel {
                group,
                weights: (0..c)
                    .map(|_| {
                        let noise = if amplitude > 0.0 {
                            rng.random_range(-amplitude..amplitude)
                        } else {
                            0.0
                        };
                        1.0 / c as f64 + noise
                    })
                    .collect(),
                bias: 0.0,
            })
            .collect();
        let mut lambda_logits = [0.0; 3];
        for g in Group::ALL {
            if !ablation.is_active(g) {
                lambda_logits[g.index()] = ABSENT_LOGIT;
            }
        }
        FusionHead {
            ablation,
            kernels,
            lambda_logits,
            comparator_scale: 1.0,
            comparator_bias: 0.0,
        }
    }

    pub fn lambdas(&self) -> [f64; 3] {
        simplex_weights(&self.lambda_logits, self.ablation)
    }

    fn group_kernels(&self, g: Group) -> impl Iterator<Item = (usize, &Kernel)> {
        self.kernels
            .iter()
            .enumerate()
            .filter(move |(_, k)| k.group == g)
    }

    /// Checks kernel counts and channel counts against a set of groups.
    pub fn check_groups(&self, groups: &QualityGroups) -> Result<()> {
        for g in self.ablation.active_groups() {
            let maps = g.maps(groups);
            let kernels: Vec<_> = self.group_kernels(g).map(|(_, k)| k).collect();
            if kernels.len() != maps.len() {
                return Err(Error::Shape(format!(
                    "{g:?} group has {} maps but the head has {} kernels",
                    maps.len(),
                    kernels.len()
                )));
            }
            for (i, (k, m)) in kernels.iter().zip(maps).enumerate() {
                if k.weights.len() != m.channels() {
                    return Err(Error::Shape(format!(
                        "{g:?} map {i} has {} channels but its kernel expects {}",
                        m.channels(),
                        k.weights.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Input channel count of the MS-SSIM kernel, i.e. the scale count the
    /// head was built for.
    pub fn msssim_scales(&self) -> Option<usize> {
        self.group_kernels(Group::Tradition)
            .nth(2)
            .map(|(_, k)| k.weights.len())
    }

    /// Flattened parameters: every kernel's weights then bias, the three
    /// logits, then `a` and `b`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for k in &self.kernels {
            out.extend_from_slice(&k.weights);
            out.push(k.bias);
        }
        out.extend_from_slice(&self.lambda_logits);
        out.push(self.comparator_scale);
        out.push(self.comparator_bias);
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.params_len(), "parameter vector length");
        let mut it = flat.iter().copied();
        for k in &mut self.kernels {
            for w in &mut k.weights {
                *w = it.next().unwrap();
            }
            k.bias = it.next().unwrap();
        }
        for l in &mut self.lambda_logits {
            *l = it.next().unwrap();
        }
        self.comparator_scale = it.next().unwrap();
        self.comparator_bias = it.next().unwrap();
    }

    pub fn params_len(&self) -> usize {
        self.kernels
            .iter()
            .map(|k| k.weights.len() + 1)
            .sum::<usize>()
            + 5
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SPHT_MAGIC);
        out.extend_from_slice(&SPHT_VERSION.to_le_bytes());
        out.push(self.ablation.code());
        out.extend_from_slice(&(self.kernels.len() as u32).to_le_bytes());
        for k in &self.kernels {
            out.extend_from_slice(&(k.group.index() as u32).to_le_bytes());
            out.extend_from_slice(&(k.weights.len() as u32).to_le_bytes());
            for &w in &k.weights {
                out.extend_from_slice(&(w as f32).to_le_bytes());
            }
            out.extend_from_slice(&(k.bias as f32).to_le_bytes());
        }
        for g in Group::ALL {
            let v = if self.ablation.is_active(g) {
                self.lambda_logits[g.index()]
            } else {
                ABSENT_LOGIT
            };
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&(self.comparator_scale as f32).to_le_bytes());
        out.extend_from_slice(&(self.comparator_bias as f32).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fmt_err = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let mut r = ByteReader::new(bytes, path);
        if r.take(4)? != SPHT_MAGIC {
            return Err(fmt_err("bad magic".into()));
        }
        let version = r.u32()?;
        if version != SPHT_VERSION {
            return Err(fmt_err(format!("unsupported version {version}")));
        }
        let code = r.u8()?;
        let ablation = Ablation::from_code(code)
            .ok_or_else(|| fmt_err(format!("bad ablation code {code}")))?;
        let n = r.u32()? as usize;
        if n > bytes.len() {
            return Err(fmt_err(format!("implausible kernel count {n}")));
        }
        let mut kernels = Vec::with_capacity(n);
        for i in 0..n {
            let g = r.u32()?;
            let group = Group::from_index(g)
                .ok_or_else(|| fmt_err(format!("kernel {i}: bad group {g}")))?;
            let c = r.u32()? as usize;
            if c == 0 || c > bytes.len() {
                return Err(fmt_err(format!("kernel {i}: bad channel count {c}")));
            }
            let weights = r.f32_vec(c)?.into_iter().map(f64::from).collect();
            let bias = r.f32()? as f64;
            kernels.push(Kernel {
                group,
                weights,
                bias,
            });
        }
        let mut lambda_logits = [0.0; 3];
        for l in &mut lambda_logits {
            *l = r.f32()? as f64;
        }
        let comparator_scale = r.f32()? as f64;
        let comparator_bias = r.f32()? as f64;
        if !r.is_empty() {
            return Err(fmt_err(format!("{} trailing bytes", r.remaining())));
        }
        let head = FusionHead {
            ablation,
            kernels,
            lambda_logits,
            comparator_scale,
            comparator_bias,
        };
        head.validate().map_err(|e| fmt_err(e.to_string()))?;
        Ok(head)
    }

    fn validate(&self) -> Result<()> {
        let mut last = None;
        for k in &self.kernels {
            if !self.ablation.is_active(k.group) {
                return Err(Error::Validation(format!(
                    "{:?} kernel present under ablation {}",
                    k.group,
                    self.ablation.name()
                )));
            }
            if last.is_some_and(|g| g > k.group) {
                return Err(Error::Validation("kernels are not ordered by group".into()));
            }
            last = Some(k.group);
        }
        let count = |g| self.kernels.iter().filter(|k| k.group == g).count();
        for g in self.ablation.active_groups() {
            let n = count(g);
            let ok = match g {
                Group::Tradition => n == 3,
                Group::Percept => n >= 1,
                Group::Semantic => n == 2,
            };
            if !ok {
                return Err(Error::Validation(format!("{g:?} group has {n} kernels")));
            }
        }
        let finite = self.params().iter().enumerate().all(|(i, v)| {
            v.is_finite() || {
                // inactive logits may hold the sentinel
                let logit = i + 5 - self.params_len();
                logit < 3 && !self.ablation.is_active(Group::ALL[logit])
            }
        });
        if !finite {
            return Err(Error::Validation("non-finite head parameter".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

impl FusionHeadGradients {
    fn zeros_like(head: &FusionHead) -> Self {
        FusionHeadGradients {
            kernels: head
                .kernels
                .iter()
                .map(|k| KernelGrad {
                    weights: vec![0.0; k.weights.len()],
                    bias: 0.0,
                })
                .collect(),
            lambda_logits: [0.0; 3],
            comparator_scale: 0.0,
            comparator_bias: 0.0,
        }
    }

    /// Flattened in the same order as [`FusionHead::params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for k in &self.kernels {
            out.extend_from_slice(&k.weights);
            out.push(k.bias);
        }
        out.extend_from_slice(&self.lambda_logits);
        out.push(self.comparator_scale);
        out.push(self.comparator_bias);
        out
    }
}

/// Channel layout a head needs for a backbone: three traditional maps
/// (RGB PSNR, RGB SSIM, one channel per MS-SSIM scale), then one map per
/// backbone tap.
pub fn head_layout(spec: &BackboneSpec, msssim_scales: usize) -> Result<Vec<(Group, usize)>> {
    let taps = spec.tap_channels();
    if taps.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "fusion needs a backbone with at least 3 taps, {} has {}",
            spec.name(),
            taps.len()
        )));
    }
    let split = taps.len() - 2;
    let mut layout = vec![
        (Group::Tradition, 3),
        (Group::Tradition, 3),
        (Group::Tradition, msssim_scales),
    ];
    for (l, c) in taps.into_iter().enumerate() {
        layout.push((
            if l < split {
                Group::Percept
            } else {
                Group::Semantic
            },
            c,
        ));
    }
    Ok(layout)
}

/// Fresh head for the backbone `spec` with the standard initialization noise.
pub fn init_head(
    spec: &BackboneSpec,
    msssim_scales: usize,
    ablation: Ablation,
    seed: u64,
) -> Result<FusionHead> {
    init_head_with_noise(spec, msssim_scales, ablation, seed, INIT_NOISE)
}

pub fn init_head_with_noise(
    spec: &BackboneSpec,
    msssim_scales: usize,
    ablation: Ablation,
    seed: u64,
    amplitude: f64,
) -> Result<FusionHead> {
    let layout = head_layout(spec, msssim_scales)?;
    Ok(FusionHead::with_noise(&layout, ablation, seed, amplitude))
}

/// Group means and the weighted score for one image pair.
pub fn score(head: &FusionHead, groups: &QualityGroups) -> Result<ScoreBreakdown> {
    head.check_groups(groups)?;
    let mut means = [0.0; 3];
    for g in head.ablation.active_groups() {
        let maps = g.maps(groups);
        let total: f64 = head
            .group_kernels(g)
            .zip(maps)
            .map(|((_, k), m)| map_feature(k, m))
            .sum();
        means[g.index()] = total / maps.len() as f64;
    }
    Ok(breakdown(head, means))
}

fn breakdown(head: &FusionHead, means: [f64; 3]) -> ScoreBreakdown {
    let lambdas = head.lambdas();
    let score = lambdas[0] * means[0] + lambdas[1] * means[1] + lambdas[2] * means[2];
    ScoreBreakdown {
        f_trad_mean: means[0],
        f_percept_mean: means[1],
        f_semantic_mean: means[2],
        lambdas,
        score,
    }
}

/// Predicted probability that image1 is preferred: `σ(a·(s0 − s1) + b)`.
pub fn compare_2afc(head: &FusionHead, s0: &ScoreBreakdown, s1: &ScoreBreakdown) -> f64 {
    sigmoid(head.comparator_scale * (s0.score - s1.score) + head.comparator_bias)
}

/// Per-map features and their local gradients, kept for the backward pass.
struct ForwardCache {
    breakdown: ScoreBreakdown,
    /// (kernel index, ∂f/∂w, ∂f/∂b, group size)
    locals: Vec<(usize, Vec<f64>, f64, usize)>,
}

fn forward_with_grad(head: &FusionHead, groups: &QualityGroups) -> Result<ForwardCache> {
    head.check_groups(groups)?;
    let mut means = [0.0; 3];
    let mut locals = Vec::with_capacity(head.kernels.len());
    for g in head.ablation.active_groups() {
        let maps = g.maps(groups);
        let mut total = 0.0;
        for ((ki, k), m) in head.group_kernels(g).zip(maps) {
            let (f, gw, gb) = map_feature_grad(k, m);
            total += f;
            locals.push((ki, gw, gb, maps.len()));
        }
        means[g.index()] = total / maps.len() as f64;
    }
    Ok(ForwardCache {
        breakdown: breakdown(head, means),
        locals,
    })
}

/// Accumulates `upstream · ∂score/∂θ` into `grads`.
fn backprop_score(
    head: &FusionHead,
    cache: &ForwardCache,
    upstream: f64,
    grads: &mut FusionHeadGradients,
) {
    let lambdas = cache.breakdown.lambdas;
    for (ki, gw, gb, group_size) in &cache.locals {
        let g = head.kernels[*ki].group;
        let scale = upstream * lambdas[g.index()] / *group_size as f64;
        let kg = &mut grads.kernels[*ki];
        for (acc, d) in kg.weights.iter_mut().zip(gw) {
            *acc += scale * d;
        }
        kg.bias += scale * gb;
    }
    let means = cache.breakdown.group_means();
    let s = cache.breakdown.score;
    for g in head.ablation.active_groups() {
        let i = g.index();
        grads.lambda_logits[i] += upstream * lambdas[i] * (means[i] - s);
    }
}

/// Binary cross-entropy between the human preference fraction and the
/// comparator output, with gradients for every head parameter.
pub fn loss_and_gradients(
    head: &FusionHead,
    sample_groups: (&QualityGroups, &QualityGroups),
    human: f64,
) -> Result<(f64, FusionHeadGradients)> {
    if !(0.0..=1.0).contains(&human) {
        return Err(Error::InvalidInput(format!(
            "human judgment {human} outside [0, 1]"
        )));
    }
    let c0 = forward_with_grad(head, sample_groups.0)?;
    let c1 = forward_with_grad(head, sample_groups.1)?;
    let gap = c0.breakdown.score - c1.breakdown.score;
    let z = head.comparator_scale * gap + head.comparator_bias;
    let loss = human * softplus(-z) + (1.0 - human) * softplus(z);
    let dz = sigmoid(z) - human;

    let mut grads = FusionHeadGradients::zeros_like(head);
    grads.comparator_scale = dz * gap;
    grads.comparator_bias = dz;
    backprop_score(head, &c0, dz * head.comparator_scale, &mut grads);
    backprop_score(head, &c1, -dz * head.comparator_scale, &mut grads);
    Ok((loss, grads))
}

/// Loss only, for evaluation and finite-difference checks.
pub fn loss(
    head: &FusionHead,
    sample_groups: (&QualityGroups, &QualityGroups),
    human: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&human) {
        return Err(Error::InvalidInput(format!(
            "human judgment {human} outside [0, 1]"
        )));
    }
    let s0 = score(head, sample_groups.0)?;
    let s1 = score(head, sample_groups.1)?;
    let z = head.comparator_scale * (s0.score - s1.score) + head.comparator_bias;
    Ok(human * softplus(-z) + (1.0 - human) * softplus(z))
}
