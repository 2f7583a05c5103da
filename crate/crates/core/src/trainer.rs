//! Fitting the fusion head on 2AFC judgments.
//!
//! The backbone is frozen, so every sample's quality maps are computed once
//! (optionally cached on disk) and the optimizer only ever touches the
//! head. A seeded shuffle holds out a tenth of the samples; the head with
//! the lowest held-out loss is returned.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::{BackboneSpec, ByteReader};
use crate::datasets::TwoAFCSample;
use crate::deep::QualityGroups;
use crate::error::{Error, Result};
use crate::fusion::{init_head, loss, loss_and_gradients, score, Ablation, FusionHead};
use crate::pipeline::quality_groups_with_ref;
use crate::tensor::Tensor;
use crate::traditional::{max_scales, MapSource, QualityMap};

pub const VAL_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    /// β1 = 0.9, β2 = 0.999, ε = 1e-8.
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub optimizer: Optimizer,
    pub cache_dir: Option<PathBuf>,
    /// Keep the group weights at their initial values.
    pub freeze_lambdas: bool,
    /// Keep the comparator's `a` and `b` at their initial values.
    pub freeze_comparator: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-2,
            seed: 0,
            ablation: Ablation::Full,
            optimizer: Optimizer::Adam,
            cache_dir: None,
            freeze_lambdas: false,
            freeze_comparator: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidInput("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch size must be at least 1".into()));
        }
        // lr = 0 is allowed: it leaves the head untouched
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Held-out loss after each epoch.
    pub val_losses: Vec<f64>,
    /// Held-out soft 2AFC accuracy after each epoch.
    pub val_accuracies: Vec<f64>,
    /// 0-based epoch whose head was kept.
    pub best_epoch: usize,
    /// Held-out soft 2AFC accuracy of the returned head.
    pub final_accuracy: f64,
    pub n_train: usize,
    pub n_val: usize,
}

/// A sample with its quality maps ready for the head.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub groups: (QualityGroups, QualityGroups),
    pub judge: f64,
}

/// Soft 2AFC credit: the model prefers the image with the lower score
/// (ties count half), and earns the fraction of humans who agree.
pub fn soft_2afc_credit(s0: f64, s1: f64, judge: f64) -> f64 {
    let m = if s1 < s0 {
        1.0
    } else if s1 == s0 {
        0.5
    } else {
        0.0
    };
    m * judge + (1.0 - m) * (1.0 - judge)
}

/// MS-SSIM depth shared by every sample: the smallest image decides.
pub fn sample_scales(samples: &[TwoAFCSample]) -> Result<usize> {
    let mut scales = usize::MAX;
    for s in samples {
        let (h, w) = s.dimensions().map_err(|e| Error::Sample {
            id: s.id.clone(),
            source: Box::new(e),
        })?;
        scales = scales.min(max_scales(h, w));
    }
    match scales {
        usize::MAX => Err(Error::InvalidInput("no samples".into())),
        0 => Err(Error::Shape(
            "an image is smaller than one SSIM window".into(),
        )),
        s => Ok(s),
    }
}

/// Groups for (image0 vs reference) and (image1 vs reference).
pub fn precompute_groups(
    spec: &BackboneSpec,
    sample: &TwoAFCSample,
    scales: usize,
) -> Result<(QualityGroups, QualityGroups)> {
    let wrap = |e| Error::Sample {
        id: sample.id.clone(),
        source: Box::new(e),
    };
    let t = sample.load_images()?;
    let ref_features = spec.extract_features(&t.reference).map_err(wrap)?;
    let g0 = quality_groups_with_ref(spec, &t.p0, &t.reference, &ref_features, Some(scales))
        .map_err(wrap)?;
    let g1 = quality_groups_with_ref(spec, &t.p1, &t.reference, &ref_features, Some(scales))
        .map_err(wrap)?;
    Ok((g0, g1))
}

/// Cache file for a sample: `<dir>/<backbone name>/<id>.s<scales>.spgc`.
/// Characters outside `[A-Za-z0-9._-]` in the id are percent-escaped.
pub fn cache_path(dir: &Path, spec_name: &str, id: &str, scales: usize) -> PathBuf {
    let mut safe = String::with_capacity(id.len());
    for b in id.bytes() {
        if b.is_ascii_alphanumeric() || b == b'_' || b == b'-' || (b == b'.' && !safe.is_empty()) {
            safe.push(b as char);
        } else {
            safe.push_str(&format!("%{b:02X}"));
        }
    }
    dir.join(spec_name).join(format!("{safe}.s{scales}.spgc"))
}

/// [`precompute_groups`] through an optional disk cache. Unreadable cache
/// entries are recomputed and overwritten.
pub fn precompute_groups_cached(
    spec: &BackboneSpec,
    sample: &TwoAFCSample,
    scales: usize,
    cache_dir: Option<&Path>,
) -> Result<(QualityGroups, QualityGroups)> {
    let Some(dir) = cache_dir else {
        return precompute_groups(spec, sample, scales);
    };
    let path = cache_path(dir, spec.name(), &sample.id, scales);
    if let Ok(bytes) = std::fs::read(&path) {
        match decode_groups(&bytes, &path) {
            Ok(g) => return Ok(g),
            Err(e) => log::warn!("ignoring cache entry: {e}"),
        }
    }
    let groups = precompute_groups(spec, sample, scales)?;
    let parent = path.parent().expect("cache path has a parent");
    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    // write then rename so a concurrent reader never sees half a file
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    std::fs::write(&tmp, encode_groups(&groups)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(groups)
}

const CACHE_MAGIC: &[u8; 4] = b"SPGC";
const CACHE_VERSION: u32 = 1;

pub fn encode_groups(groups: &(QualityGroups, QualityGroups)) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    for g in [&groups.0, &groups.1] {
        for maps in [&g.tradition, &g.percept, &g.semantic] {
            out.extend_from_slice(&(maps.len() as u32).to_le_bytes());
            for m in maps.iter() {
                let (tag, layer) = match m.source {
                    MapSource::Psnr => (0u8, 0u32),
                    MapSource::Ssim => (1, 0),
                    MapSource::MsSsim => (2, 0),
                    MapSource::Deep(l) => (3, l as u32),
                };
                out.push(tag);
                out.extend_from_slice(&layer.to_le_bytes());
                out.extend_from_slice(&(m.map.shape().len() as u32).to_le_bytes());
                for &d in m.map.shape() {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for &v in m.map.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn decode_groups(bytes: &[u8], path: &Path) -> Result<(QualityGroups, QualityGroups)> {
    let fmt_err = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut r = ByteReader::new(bytes, path);
    if r.take(4)? != CACHE_MAGIC || r.u32()? != CACHE_VERSION {
        return Err(fmt_err("not a group cache file".into()));
    }
    let read_maps = |r: &mut ByteReader| -> Result<Vec<QualityMap>> {
        let n = r.u32()? as usize;
        let mut maps = Vec::new();
        for _ in 0..n {
            let tag = r.u8()?;
            let layer = r.u32()? as usize;
            let source = match tag {
                0 => MapSource::Psnr,
                1 => MapSource::Ssim,
                2 => MapSource::MsSsim,
                3 => MapSource::Deep(layer),
                t => return Err(fmt_err(format!("bad map tag {t}"))),
            };
            let rank = r.u32()? as usize;
            if !(1..=4).contains(&rank) {
                return Err(fmt_err(format!("bad rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = len
                .filter(|&l| l * 4 <= r.remaining())
                .ok_or_else(|| fmt_err("truncated map".into()))?;
            let data = r.f32_vec(len)?;
            maps.push(QualityMap {
                map: Tensor::new(shape, data)?,
                source,
            });
        }
        Ok(maps)
    };
    let mut pair = Vec::with_capacity(2);
    for _ in 0..2 {
        pair.push(QualityGroups {
            tradition: read_maps(&mut r)?,
            percept: read_maps(&mut r)?,
            semantic: read_maps(&mut r)?,
        });
    }
    if !r.is_empty() {
        return Err(fmt_err(format!("{} trailing bytes", r.remaining())));
    }
    let g1 = pair.pop().unwrap();
    let g0 = pair.pop().unwrap();
    Ok((g0, g1))
}

/// Precomputes every sample in parallel; output order follows input order.
pub fn prepare(
    spec: &BackboneSpec,
    samples: &[TwoAFCSample],
    scales: usize,
    cache_dir: Option<&Path>,
) -> Result<Vec<PreparedSample>> {
    samples
        .par_iter()
        .map(|s| {
            Ok(PreparedSample {
                id: s.id.clone(),
                groups: precompute_groups_cached(spec, s, scales, cache_dir)?,
                judge: s.judge,
            })
        })
        .collect()
}

/// Mean soft 2AFC accuracy over prepared samples.
pub fn accuracy_on(head: &FusionHead, data: &[&PreparedSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidInput(
            "accuracy needs at least one sample".into(),
        ));
    }
    let mut total = 0.0;
    for s in data {
        let s0 = score(head, &s.groups.0)?;
        let s1 = score(head, &s.groups.1)?;
        total += soft_2afc_credit(s0.score, s1.score, s.judge);
    }
    Ok(total / data.len() as f64)
}

pub fn twoafc_accuracy(
    head: &FusionHead,
    samples: &[TwoAFCSample],
    spec: &BackboneSpec,
) -> Result<f64> {
    let scales = head
        .msssim_scales()
        .map_or_else(|| sample_scales(samples), Ok)?;
    let data = prepare(spec, samples, scales, None)?;
    accuracy_on(head, &data.iter().collect::<Vec<_>>())
}

fn mean_loss(head: &FusionHead, data: &[&PreparedSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in data {
        total += loss(head, (&s.groups.0, &s.groups.1), s.judge)?;
    }
    Ok(total / data.len() as f64)
}

/// Elementwise sum by pairwise halving, so the rounding does not depend on
/// how the batch was split across threads.
fn pairwise_sum(v: &[Vec<f64>]) -> Vec<f64> {
    match v.len() {
        0 => unreachable!("empty batch"),
        1 => v[0].clone(),
        n => {
            let (a, b) = v.split_at(n / 2);
            let mut left = pairwise_sum(a);
            for (x, y) in left.iter_mut().zip(pairwise_sum(b)) {
                *x += y;
            }
            left
        }
    }
}

struct OptState {
    kind: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptState {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(kind: Optimizer, n: usize) -> Self {
        OptState {
            kind,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam => {
                self.t += 1;
                let c1 = 1.0 - Self::BETA1.powi(self.t);
                let c2 = 1.0 - Self::BETA2.powi(self.t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
                    self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + Self::EPS);
                }
            }
        }
    }
}

/// Trains a fresh head: precomputes (through the cache if configured),
/// initializes from `cfg.seed`, then runs [`train_prepared`].
pub fn train(
    spec: &BackboneSpec,
    samples: &[TwoAFCSample],
    cfg: &TrainConfig,
) -> Result<(FusionHead, TrainReport)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let scales = sample_scales(samples)?;
    let data = prepare(spec, samples, scales, cfg.cache_dir.as_deref())?;
    let head = init_head(spec, scales, cfg.ablation, cfg.seed)?;
    train_prepared(head, &data, cfg)
}

/// Optimizes `head` on prepared samples. The 90/10 split, the per-epoch
/// shuffles and the optimizer state all derive from `cfg.seed`.
pub fn train_prepared(
    mut head: FusionHead,
    data: &[PreparedSample],
    cfg: &TrainConfig,
) -> Result<(FusionHead, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    for s in data {
        head.check_groups(&s.groups.0)
            .and_then(|_| head.check_groups(&s.groups.1))
            .map_err(|e| Error::Sample {
                id: s.id.clone(),
                source: Box::new(e),
            })?;
    }

    // the shuffle stream is offset from the init stream so they differ
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_val = if data.len() >= 2 {
        ((data.len() as f64 * VAL_FRACTION).round() as usize).max(1)
    } else {
        0
    };
    let val: Vec<&PreparedSample> = order[..n_val].iter().map(|&i| &data[i]).collect();
    let mut train_idx: Vec<usize> = order[n_val..].to_vec();
    // with a single sample, select on the training set itself
    let select: Vec<&PreparedSample> = if val.is_empty() {
        train_idx.iter().map(|&i| &data[i]).collect()
    } else {
        val.clone()
    };

    let n_params = head.params_len();
    let mut frozen = vec![false; n_params];
    if cfg.freeze_lambdas {
        frozen[n_params - 5..n_params - 2].fill(true);
    }
    if cfg.freeze_comparator {
        frozen[n_params - 2..].fill(true);
    }
    let mut opt = OptState::new(cfg.optimizer, n_params);
    let mut params = head.params();

    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        val_losses: Vec::with_capacity(cfg.epochs),
        val_accuracies: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        final_accuracy: 0.0,
        n_train: train_idx.len(),
        n_val,
    };
    let mut best: Option<(f64, FusionHead)> = None;

    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut sample_loss = vec![0.0; data.len()];
        for batch in train_idx.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let s = &data[i];
                    let (l, g) = loss_and_gradients(&head, (&s.groups.0, &s.groups.1), s.judge)?;
                    let flat = g.flat();
                    if !l.is_finite() || flat.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Numeric(format!(
                            "non-finite loss or gradient at epoch {}, sample {}",
                            epoch + 1,
                            s.id
                        )));
                    }
                    Ok((l, flat))
                })
                .collect::<Result<Vec<_>>>()?;
            for (&i, r) in batch.iter().zip(&results) {
                sample_loss[i] = r.0;
            }
            let grads: Vec<Vec<f64>> = results.into_iter().map(|r| r.1).collect();
            let mut g = pairwise_sum(&grads);
            let scale = 1.0 / batch.len() as f64;
            for (gi, &fz) in g.iter_mut().zip(&frozen) {
                *gi = if fz { 0.0 } else { *gi * scale };
            }
            opt.step(&mut params, &g, cfg.learning_rate);
            head.set_params(&params);
        }
        // summed in index order so the trace does not depend on the shuffle
        let train_loss = sample_loss.iter().sum::<f64>() / train_idx.len().max(1) as f64;
        let sel_loss = mean_loss(&head, &select)?;
        if !train_loss.is_finite() || !sel_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss after epoch {}",
                epoch + 1
            )));
        }
        let sel_acc = accuracy_on(&head, &select)?;
        log::info!(
            "epoch {:>3}  train loss {train_loss:.5}  val loss {sel_loss:.5}  val acc {sel_acc:.4}",
            epoch + 1
        );
        report.epoch_losses.push(train_loss);
        report.val_losses.push(sel_loss);
        report.val_accuracies.push(sel_acc);
        if best.as_ref().is_none_or(|(b, _)| sel_loss < *b) {
            best = Some((sel_loss, head.clone()));
            report.best_epoch = epoch;
        }
    }
    let (_, best_head) = best.expect("at least one epoch");
    report.final_accuracy = report.val_accuracies[report.best_epoch];
    Ok((best_head, report))
}

/// `head.spht` → `head.metrics.tsv`.
pub fn metrics_path(head_path: &Path) -> PathBuf {
    head_path.with_extension("metrics.tsv")
}

/// One line per epoch: `epoch<TAB>train_loss<TAB>val_loss<TAB>val_acc`.
pub fn write_metrics(path: &Path, report: &TrainReport) -> Result<()> {
    let mut out = Vec::new();
    for (e, ((t, v), a)) in report
        .epoch_losses
        .iter()
        .zip(&report.val_losses)
        .zip(&report.val_accuracies)
        .enumerate()
    {
        writeln!(out, "{}\t{t}\t{v}\t{a}", e + 1).expect("writing to a Vec");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
