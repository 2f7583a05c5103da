//! Manifest ingestion, PNG decoding and the synthetic 2AFC corpus.
//!
//! A 2AFC manifest is a CSV file with header `id,category,ref,p0,p1,judge,split`
//! and a JND manifest has `id,category,img0,img1,diff_fraction`. Image paths
//! are resolved against the manifest's directory. Rows are validated when
//! the manifest is loaded (columns, ranges, file existence, matching image
//! sizes from the PNG headers); pixels are decoded only when asked for.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, ImageFormat, ImageReader, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TWOAFC_COLUMNS: [&str; 7] = ["id", "category", "ref", "p0", "p1", "judge", "split"];
pub const JND_COLUMNS: [&str; 5] = ["id", "category", "img0", "img1", "diff_fraction"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Category {
    Trad,
    #[serde(rename = "CNN")]
    Cnn,
    Deblur,
    Interp,
    #[serde(rename = "SR")]
    Sr,
    Color,
    Synth,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::Trad,
        Category::Cnn,
        Category::Deblur,
        Category::Interp,
        Category::Sr,
        Category::Color,
        Category::Synth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Trad => "Trad",
            Category::Cnn => "CNN",
            Category::Deblur => "Deblur",
            Category::Interp => "Interp",
            Category::Sr => "SR",
            Category::Color => "Color",
            Category::Synth => "Synth",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Category::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown category {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoAFCSample {
    pub id: String,
    pub category: Category,
    pub ref_path: PathBuf,
    pub p0_path: PathBuf,
    pub p1_path: PathBuf,
    /// Fraction of annotators preferring image1.
    pub judge: f64,
    pub split: Split,
}

/// Decoded `(reference, image0, image1)`.
pub struct Triplet {
    pub reference: Tensor,
    pub p0: Tensor,
    pub p1: Tensor,
}

impl TwoAFCSample {
    pub fn load_images(&self) -> Result<Triplet> {
        let wrap = |e| Error::Sample {
            id: self.id.clone(),
            source: Box::new(e),
        };
        let reference = decode_image(&self.ref_path).map_err(wrap)?;
        let p0 = decode_image(&self.p0_path).map_err(wrap)?;
        let p1 = decode_image(&self.p1_path).map_err(wrap)?;
        if p0.shape() != reference.shape() || p1.shape() != reference.shape() {
            return Err(wrap(Error::Shape(format!(
                "image shapes differ: ref {:?}, p0 {:?}, p1 {:?}",
                reference.shape(),
                p0.shape(),
                p1.shape()
            ))));
        }
        Ok(Triplet { reference, p0, p1 })
    }

    /// `(height, width)` read from the reference's header.
    pub fn dimensions(&self) -> Result<(usize, usize)> {
        png_dimensions(&self.ref_path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JNDSample {
    pub id: String,
    pub category: Category,
    pub img0_path: PathBuf,
    pub img1_path: PathBuf,
    /// Fraction of annotators judging the pair different.
    pub diff_fraction: f64,
}

impl JNDSample {
    pub fn load_images(&self) -> Result<(Tensor, Tensor)> {
        let wrap = |e| Error::Sample {
            id: self.id.clone(),
            source: Box::new(e),
        };
        let a = decode_image(&self.img0_path).map_err(wrap)?;
        let b = decode_image(&self.img1_path).map_err(wrap)?;
        Ok((a, b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManifestKind {
    TwoAfc,
    Jnd,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Manifest {
    TwoAfc(Vec<TwoAFCSample>),
    Jnd(Vec<JNDSample>),
}

impl Manifest {
    pub fn len(&self) -> usize {
        match self {
            Manifest::TwoAfc(v) => v.len(),
            Manifest::Jnd(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn load_manifest(path: impl AsRef<Path>, kind: ManifestKind) -> Result<Manifest> {
    match kind {
        ManifestKind::TwoAfc => load_2afc_manifest(path).map(Manifest::TwoAfc),
        ManifestKind::Jnd => load_jnd_manifest(path).map(Manifest::Jnd),
    }
}

/// One parsed CSV row with named-column access and row-numbered errors.
struct Row<'a> {
    record: &'a csv::StringRecord,
    columns: &'a HashMap<&'static str, usize>,
    number: usize,
    base: &'a Path,
    manifest: &'a Path,
}

impl Row<'_> {
    fn err(&self, msg: impl fmt::Display) -> Error {
        Error::Manifest {
            path: self.manifest.to_path_buf(),
            msg: format!("row {}: {msg}", self.number),
        }
    }

    fn get(&self, col: &str) -> Result<&str> {
        let v = self.record.get(self.columns[col]).unwrap_or("").trim();
        if v.is_empty() {
            return Err(self.err(format!("empty {col}")));
        }
        Ok(v)
    }

    fn fraction(&self, col: &str) -> Result<f64> {
        let raw = self.get(col)?;
        let v: f64 = raw
            .parse()
            .map_err(|_| self.err(format!("{col} {raw:?} is not a number")))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(self.err(format!("{col} {v} outside [0, 1]")));
        }
        Ok(v)
    }

    fn category(&self) -> Result<Category> {
        self.get("category")?
            .parse()
            .map_err(|e: String| self.err(e))
    }

    fn image(&self, col: &str) -> Result<PathBuf> {
        let p = self.base.join(self.get(col)?);
        if !p.is_file() {
            return Err(Error::Manifest {
                path: self.manifest.to_path_buf(),
                msg: format!("row {}: missing image file {}", self.number, p.display()),
            });
        }
        Ok(p)
    }

    fn same_size(&self, paths: &[&PathBuf]) -> Result<()> {
        let dims = paths
            .iter()
            .map(|p| png_dimensions(p).map_err(|e| self.err(e)))
            .collect::<Result<Vec<_>>>()?;
        if dims.windows(2).any(|w| w[0] != w[1]) {
            return Err(self.err(format!("image sizes differ: {dims:?}")));
        }
        Ok(())
    }
}

fn read_rows<T>(
    path: &Path,
    expected: &[&'static str],
    mut parse: impl FnMut(&Row) -> Result<T>,
) -> Result<Vec<T>> {
    let manifest_err = |msg: String| Error::Manifest {
        path: path.to_path_buf(),
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| manifest_err(e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| manifest_err(e.to_string()))?
        .clone();
    let mut columns = HashMap::new();
    for &col in expected {
        let idx = header
            .iter()
            .position(|h| h == col)
            .ok_or_else(|| manifest_err(format!("missing column {col:?}")))?;
        columns.insert(col, idx);
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let record = rec.map_err(|e| manifest_err(format!("row {}: {e}", i + 1)))?;
        let row = Row {
            record: &record,
            columns: &columns,
            number: i + 1,
            base,
            manifest: path,
        };
        out.push(parse(&row)?);
    }
    Ok(out)
}

pub fn load_2afc_manifest(path: impl AsRef<Path>) -> Result<Vec<TwoAFCSample>> {
    read_rows(path.as_ref(), &TWOAFC_COLUMNS, |row| {
        let id = row.get("id")?.to_string();
        let category = row.category()?;
        let judge = row.fraction("judge")?;
        let split = row.get("split")?.parse().map_err(|e: String| row.err(e))?;
        let ref_path = row.image("ref")?;
        let p0_path = row.image("p0")?;
        let p1_path = row.image("p1")?;
        if ref_path == p0_path || ref_path == p1_path || p0_path == p1_path {
            return Err(row.err("ref, p0 and p1 must be distinct files"));
        }
        row.same_size(&[&ref_path, &p0_path, &p1_path])?;
        Ok(TwoAFCSample {
            id,
            category,
            ref_path,
            p0_path,
            p1_path,
            judge,
            split,
        })
    })
}

pub fn load_jnd_manifest(path: impl AsRef<Path>) -> Result<Vec<JNDSample>> {
    read_rows(path.as_ref(), &JND_COLUMNS, |row| {
        let id = row.get("id")?.to_string();
        let category = row.category()?;
        if !matches!(category, Category::Trad | Category::Cnn) {
            return Err(row.err(format!("JND category must be Trad or CNN, got {category}")));
        }
        let diff_fraction = row.fraction("diff_fraction")?;
        let img0_path = row.image("img0")?;
        let img1_path = row.image("img1")?;
        row.same_size(&[&img0_path, &img1_path])?;
        Ok(JNDSample {
            id,
            category,
            img0_path,
            img1_path,
            diff_fraction,
        })
    })
}

fn png_reader(path: &Path) -> Result<ImageReader<std::io::BufReader<std::fs::File>>> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    if reader.format() != Some(ImageFormat::Png) {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            msg: "unsupported format, only PNG is read".into(),
        });
    }
    Ok(reader)
}

fn png_dimensions(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = png_reader(path)?
        .into_dimensions()
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    Ok((h as usize, w as usize))
}

/// Decodes an 8- or 16-bit PNG to a `3×H×W` tensor in `[0, 1]`. Gray is
/// replicated to three channels and alpha is dropped.
pub fn decode_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = png_reader(path)?.decode().map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    let mut scatter = |i: usize, px: [f32; 3]| {
        for (c, v) in px.into_iter().enumerate() {
            data[c * plane + i] = v;
        }
    };
    match img {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_) => {
            for (i, p) in img.to_rgb8().pixels().enumerate() {
                scatter(i, p.0.map(|v| v as f32 / 255.0));
            }
        }
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => {
            for (i, p) in img.to_rgb16().pixels().enumerate() {
                scatter(i, p.0.map(|v| v as f32 / 65535.0));
            }
        }
        other => {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                msg: format!("unsupported pixel format {:?}", other.color()),
            })
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Quantizes a `3×H×W` (or `1×H×W`) tensor in `[0, 1]` to an 8-bit RGB PNG.
pub fn encode_png(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = image.dims3()?;
    if c != 1 && c != 3 {
        return Err(Error::Shape(format!("cannot write a {c}-channel image")));
    }
    let plane = h * w;
    let d = image.data();
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let ch = |k: usize| q(d[if c == 3 { k * plane + i } else { i }]);
        Rgb([ch(0), ch(1), ch(2)])
    });
    out.save_with_format(path, ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Decode {
                path: path.to_path_buf(),
                msg: other.to_string(),
            },
        })
}

/// Writes the channel mean of a map as an 8-bit grayscale PNG, min-max
/// stretched to the full range. A flat map is written black.
pub fn write_heatmap(map: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = map.dims3()?;
    let plane = h * w;
    let d = map.data();
    let mean: Vec<f64> = (0..plane)
        .map(|i| (0..c).map(|ci| d[ci * plane + i] as f64).sum::<f64>() / c as f64)
        .collect();
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let pixels: Vec<u8> = mean
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer matches size");
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Decode {
                path: path.to_path_buf(),
                msg: other.to_string(),
            },
        })
}

pub const SYNTH_SIZE: usize = 64;
/// Noise levels the synthetic corpus draws from: 0.02, 0.04, …, 0.30.
pub const SYNTH_SIGMAS: [f64; 15] = [
    0.02, 0.04, 0.06, 0.08, 0.10, 0.12, 0.14, 0.16, 0.18, 0.20, 0.22, 0.24, 0.26, 0.28, 0.30,
];
pub const SYNTH_FLIP_PROB: f64 = 0.1;

/// What [`generate_2afc`] wrote, including the ground truth the manifest
/// does not carry.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub manifest: PathBuf,
    /// `(σ0, σ1)` per row.
    pub sigmas: Vec<(f64, f64)>,
    /// Whether the row's judgment was flipped.
    pub flipped: Vec<bool>,
}

/// Smooth procedural texture: a colour gradient plus a few Gabor patches.
pub fn procedural_texture(rng: &mut impl Rng, size: usize) -> Tensor {
    let s = size as f64;
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7));
    let gx: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.25..0.25));
    let gy: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.25..0.25));
    struct Patch {
        cx: f64,
        cy: f64,
        sigma: f64,
        freq: f64,
        cos: f64,
        sin: f64,
        phase: f64,
        amp: [f64; 3],
    }
    let n_patches = rng.random_range(3..=6);
    let patches: Vec<Patch> = (0..n_patches)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            Patch {
                cx: rng.random_range(0.0..s),
                cy: rng.random_range(0.0..s),
                sigma: rng.random_range(0.08 * s..0.25 * s),
                freq: rng.random_range(0.05..0.25),
                cos: theta.cos(),
                sin: theta.sin(),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                amp: std::array::from_fn(|_| rng.random_range(0.05..0.2)),
            }
        })
        .collect();
    Tensor::from_fn(3, size, size, |c, y, x| {
        let (xf, yf) = (x as f64 / s - 0.5, y as f64 / s - 0.5);
        let mut v = base[c] + gx[c] * xf + gy[c] * yf;
        for p in &patches {
            let (dx, dy) = (x as f64 - p.cx, y as f64 - p.cy);
            let env = (-(dx * dx + dy * dy) / (2.0 * p.sigma * p.sigma)).exp();
            let carrier =
                (std::f64::consts::TAU * p.freq * (dx * p.cos + dy * p.sin) + p.phase).cos();
            v += p.amp[c] * env * carrier;
        }
        v.clamp(0.0, 1.0) as f32
    })
}

/// Adds `N(0, σ²)` noise and clips to `[0, 1]`.
pub fn add_gaussian_noise(image: &Tensor, sigma: f64, rng: &mut impl Rng) -> Tensor {
    if sigma == 0.0 {
        return image.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    image.map(|v| (v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32)
}

/// Writes `n` synthetic triplets under `outdir` and returns the manifest
/// path. See [`generate_2afc`].
pub fn synth_2afc(outdir: impl AsRef<Path>, n: usize, seed: u64) -> Result<PathBuf> {
    generate_2afc(outdir, n, seed).map(|c| c.manifest)
}

/// Each row pairs a 64×64 texture with two noisy copies at distinct σ. The
/// judge is 1 when image1 is the cleaner copy, flipped with probability
/// 0.1. The last tenth of the rows is marked `val`.
pub fn generate_2afc(outdir: impl AsRef<Path>, n: usize, seed: u64) -> Result<SynthCorpus> {
    let outdir = outdir.as_ref();
    if n == 0 {
        return Err(Error::InvalidInput("synthetic corpus needs n ≥ 1".into()));
    }
    for sub in ["ref", "p0", "p1"] {
        let d = outdir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let manifest = outdir.join("manifest.csv");
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&manifest)
        .map_err(|e| csv_write_err(&manifest, e))?;
    writer
        .write_record(TWOAFC_COLUMNS)
        .map_err(|e| csv_write_err(&manifest, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_val = n / 10;
    let mut sigmas = Vec::with_capacity(n);
    let mut flipped = Vec::with_capacity(n);
    for i in 0..n {
        let reference = procedural_texture(&mut rng, SYNTH_SIZE);
        let i0 = rng.random_range(0..SYNTH_SIGMAS.len());
        let mut i1 = rng.random_range(0..SYNTH_SIGMAS.len() - 1);
        if i1 >= i0 {
            i1 += 1;
        }
        let (s0, s1) = (SYNTH_SIGMAS[i0], SYNTH_SIGMAS[i1]);
        let p0 = add_gaussian_noise(&reference, s0, &mut rng);
        let p1 = add_gaussian_noise(&reference, s1, &mut rng);
        let flip = rng.random_bool(SYNTH_FLIP_PROB);
        let judge = (s1 < s0) != flip;

        let name = format!("{i:06}.png");
        for (sub, img) in [("ref", &reference), ("p0", &p0), ("p1", &p1)] {
            encode_png(img, outdir.join(sub).join(&name))?;
        }
        let split = if i >= n - n_val {
            Split::Val
        } else {
            Split::Train
        };
        writer
            .write_record([
                format!("s{i:06}").as_str(),
                Category::Synth.name(),
                &format!("ref/{name}"),
                &format!("p0/{name}"),
                &format!("p1/{name}"),
                if judge { "1" } else { "0" },
                split.name(),
            ])
            .map_err(|e| csv_write_err(&manifest, e))?;
        sigmas.push((s0, s1));
        flipped.push(flip);
    }
    writer.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(SynthCorpus {
        manifest,
        sigmas,
        flipped,
    })
}

fn csv_write_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        if let csv::ErrorKind::Io(io) = e.into_kind() {
            return Error::io(path, io);
        }
        unreachable!()
    } else {
        Error::Manifest {
            path: path.to_path_buf(),
            msg: e.to_string(),
        }
    }
}
