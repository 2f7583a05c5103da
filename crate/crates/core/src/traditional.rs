//! Classical full-reference metrics as per-pixel quality maps.
//!
//! Each map is inverted so that 0 means "no difference" and larger values
//! mean worse quality, which lines them up with the squared deep-feature
//! differences.
//!
//! Windowed SSIM moments are accumulated in `f64` and the finished maps are
//! stored as `f32` tensors.

use crate::error::{Error, Result};
use crate::tensor::{downsample2x, gaussian_kernel_1d, resize_bilinear, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Dynamic range of the pixel values.
pub const SSIM_RANGE: f64 = 1.0;

/// Per-pixel PSNR is capped at this value before normalization.
pub const PSNR_CAP_DB: f64 = 50.0;
pub const PSNR_EPS: f64 = 1e-10;

/// Standard five-scale MS-SSIM exponents, finest scale first.
pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const MSSSIM_MAX_SCALES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MapSource {
    Psnr,
    Ssim,
    MsSsim,
    /// Deep feature difference at tap index `l` (0-based).
    Deep(usize),
}

/// A per-pixel difference map; lower is better.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityMap {
    pub map: Tensor,
    pub source: MapSource,
}

impl QualityMap {
    pub fn channels(&self) -> usize {
        self.map.shape()[0]
    }
}

fn check_pair(eval: &Tensor, reference: &Tensor) -> Result<(usize, usize, usize)> {
    let dims = eval.dims3()?;
    if eval.shape() != reference.shape() {
        return Err(Error::Shape(format!(
            "eval image {:?} and reference {:?} differ in shape",
            eval.shape(),
            reference.shape()
        )));
    }
    for (name, t) in [("eval", eval), ("reference", reference)] {
        if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "{name} image has value {v} outside [0, 1]"
            )));
        }
    }
    Ok(dims)
}

/// Inverted, capped per-pixel PSNR: `1 - clamp(psnr / 50, 0, 1)`.
pub fn psnr_map(eval: &Tensor, reference: &Tensor) -> Result<QualityMap> {
    let (c, h, w) = check_pair(eval, reference)?;
    let data = eval
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            let se = (d * d).max(PSNR_EPS);
            let psnr = 10.0 * (1.0 / se).log10();
            (1.0 - (psnr / PSNR_CAP_DB).clamp(0.0, 1.0)) as f32
        })
        .collect();
    Ok(QualityMap {
        map: Tensor::new(vec![c, h, w], data)?,
        source: MapSource::Psnr,
    })
}

/// Zero-padded "same" Gaussian filtering of one plane, separable.
fn filter_same(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let r = g.len() / 2;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            for ix in lo..=hi {
                acc += g[ix + r - x] * row[ix];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            let mut acc = 0.0;
            for iy in lo..=hi {
                acc += g[iy + r - y] * tmp[iy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Local SSIM and contrast-structure maps of one plane pair.
pub(crate) struct SsimPlanes {
    pub ssim: Vec<f64>,
    pub cs: Vec<f64>,
}

pub(crate) fn ssim_planes(x: &[f64], y: &[f64], h: usize, w: usize) -> SsimPlanes {
    let g = gaussian_kernel_1d(SSIM_WINDOW, SSIM_SIGMA).expect("constant window is valid");
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);

    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = filter_same(x, h, w, &g);
    let mu_y = filter_same(y, h, w, &g);
    let e_xx = filter_same(&xx, h, w, &g);
    let e_yy = filter_same(&yy, h, w, &g);
    let e_xy = filter_same(&xy, h, w, &g);

    let n = h * w;
    let mut ssim = Vec::with_capacity(n);
    let mut cs = Vec::with_capacity(n);
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let var_x = e_xx[i] - mx * mx;
        let var_y = e_yy[i] - my * my;
        let cov = e_xy[i] - mx * my;
        let contrast = (2.0 * cov + c2) / (var_x + var_y + c2);
        let luminance = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        cs.push(contrast);
        ssim.push(luminance * contrast);
    }
    SsimPlanes { ssim, cs }
}

fn plane_f64(t: &Tensor, c: usize) -> Vec<f64> {
    let (_, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    t.data()[c * h * w..(c + 1) * h * w]
        .iter()
        .map(|&v| v as f64)
        .collect()
}

/// Per-channel local SSIM, inverted: `1 - clamp(ssim, 0, 1)`.
pub fn ssim_map(eval: &Tensor, reference: &Tensor) -> Result<QualityMap> {
    let (c, h, w) = check_pair(eval, reference)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, image is {h}×{w}"
        )));
    }
    let mut data = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        let planes = ssim_planes(&plane_f64(eval, ci), &plane_f64(reference, ci), h, w);
        data.extend(
            planes
                .ssim
                .iter()
                .map(|&s| (1.0 - s.clamp(0.0, 1.0)) as f32),
        );
    }
    Ok(QualityMap {
        map: Tensor::new(vec![c, h, w], data)?,
        source: MapSource::Ssim,
    })
}

/// Largest scale count (at most five) the image supports.
pub fn max_scales(h: usize, w: usize) -> usize {
    (1..=MSSSIM_MAX_SCALES)
        .rev()
        .find(|&s| h.min(w) >= SSIM_WINDOW << (s - 1))
        .unwrap_or(0)
}

/// Exponent applied to scale `index` of a `scales`-level pyramid. Finer
/// scales keep their standard contrast-structure exponent; the coarsest
/// (full SSIM) level always takes the luminance exponent.
pub fn msssim_exponent(index: usize, scales: usize) -> f64 {
    if index + 1 == scales {
        MSSSIM_WEIGHTS[MSSSIM_MAX_SCALES - 1]
    } else {
        MSSSIM_WEIGHTS[index]
    }
}

/// RGB mean as a single-channel plane.
pub fn luminance(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    let plane = h * w;
    let data = (0..plane)
        .map(|i| {
            let s: f64 = (0..c).map(|ci| image.data()[ci * plane + i] as f64).sum();
            (s / c as f64) as f32
        })
        .collect();
    Tensor::new(vec![1, h, w], data)
}

/// Multi-scale SSIM map with one channel per scale.
///
/// Scale `j` carries the contrast-structure map (or the full SSIM map at the
/// coarsest scale) of the luminance plane, raised to its exponent,
/// upsampled back to `H×W` and inverted.
pub fn msssim_map(eval: &Tensor, reference: &Tensor, scales: usize) -> Result<QualityMap> {
    let (_, h, w) = check_pair(eval, reference)?;
    if scales == 0 || scales > MSSSIM_MAX_SCALES {
        return Err(Error::InvalidInput(format!(
            "MS-SSIM scale count must be 1..={MSSSIM_MAX_SCALES}, got {scales}"
        )));
    }
    let need = SSIM_WINDOW << (scales - 1);
    if h < need || w < need {
        return Err(Error::Shape(format!(
            "{scales}-scale MS-SSIM needs at least {need}×{need} pixels, image is {h}×{w}"
        )));
    }

    let mut x = luminance(eval)?;
    let mut y = luminance(reference)?;
    let mut channels = Vec::with_capacity(scales);
    for j in 0..scales {
        if j > 0 {
            x = downsample2x(&x)?;
            y = downsample2x(&y)?;
        }
        let (_, sh, sw) = x.dims3()?;
        let planes = ssim_planes(&plane_f64(&x, 0), &plane_f64(&y, 0), sh, sw);
        let index = if j + 1 == scales {
            planes.ssim
        } else {
            planes.cs
        };
        let e = msssim_exponent(j, scales);
        let powered: Vec<f32> = index
            .iter()
            .map(|&v| v.clamp(0.0, 1.0).powf(e) as f32)
            .collect();
        let up = resize_bilinear(&Tensor::new(vec![1, sh, sw], powered)?, h, w)?;
        channels.push(up.map(|v| 1.0 - v.clamp(0.0, 1.0)));
    }
    Ok(QualityMap {
        map: Tensor::concat_channels(&channels)?,
        source: MapSource::MsSsim,
    })
}

/// `[Q_psnr, Q_ssim, Q_msssim]` using as many MS-SSIM scales as fit.
pub fn traditional_maps(eval: &Tensor, reference: &Tensor) -> Result<[QualityMap; 3]> {
    let (_, h, w) = check_pair(eval, reference)?;
    let scales = max_scales(h, w);
    if scales == 0 {
        return Err(Error::Shape(format!(
            "image {h}×{w} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} SSIM window"
        )));
    }
    Ok([
        psnr_map(eval, reference)?,
        ssim_map(eval, reference)?,
        msssim_map(eval, reference, scales)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(3, h, w, |_, _, _| rng.random::<f32>())
    }

    /// Smooth texture so that SSIM is meaningfully above zero.
    fn texture(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f: [f32; 6] = std::array::from_fn(|_| rng.random_range(0.05..0.4));
        Tensor::from_fn(3, h, w, |c, y, x| {
            let (y, x) = (y as f32, x as f32);
            0.5 + 0.2 * (f[c] * x + f[c + 3] * y).sin() + 0.15 * (0.07 * (x - y)).cos()
        })
    }

    fn add_noise(img: &Tensor, sigma: f64, rng: &mut ChaCha8Rng) -> Tensor {
        if sigma == 0.0 {
            return img.clone();
        }
        let n = Normal::new(0.0, sigma).unwrap();
        img.map(|v| (v as f64 + n.sample(rng)).clamp(0.0, 1.0) as f32)
    }

    #[test]
    fn psnr_examples() {
        let a = Tensor::filled(vec![3, 4, 4], 0.5);
        let b = Tensor::filled(vec![3, 4, 4], 0.25);
        assert!(psnr_map(&a, &a)
            .unwrap()
            .map
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let q = psnr_map(&a, &b).unwrap();
        // 10·log10(16) = 12.041199826559248 dB
        let want = 1.0 - 12.041_199_826_559_248 / 50.0;
        assert!(q.map.data().iter().all(|&v| (v as f64 - want).abs() < 1e-6));
        let one = Tensor::filled(vec![3, 2, 2], 1.0);
        let zero = Tensor::zeros(vec![3, 2, 2]);
        assert!(psnr_map(&one, &zero)
            .unwrap()
            .map
            .data()
            .iter()
            .all(|&v| v == 1.0));
    }

    #[test]
    fn pair_validation() {
        let a = Tensor::filled(vec![3, 16, 16], 0.5);
        let b = Tensor::filled(vec![3, 16, 12], 0.5);
        assert!(matches!(psnr_map(&a, &b), Err(Error::Shape(_))));
        let c = Tensor::filled(vec![3, 16, 16], 1.5);
        assert!(matches!(ssim_map(&a, &c), Err(Error::InvalidInput(_))));
        let small = Tensor::filled(vec![3, 10, 16], 0.5);
        assert!(ssim_map(&small, &small).is_err());
        assert!(msssim_map(&a, &a, 2).is_err());
    }

    #[test]
    fn ssim_constant_images_luminance_only() {
        let a = Tensor::filled(vec![3, 32, 32], 0.5);
        let b = Tensor::filled(vec![3, 32, 32], 0.25);
        let q = ssim_map(&a, &b).unwrap();
        // (2·0.5·0.25 + 1e-4) / (0.25 + 0.0625 + 1e-4) = 0.2501 / 0.3126
        let want = 1.0 - 0.2501 / 0.3126;
        for c in 0..3 {
            for y in 5..27 {
                for x in 5..27 {
                    assert!((q.map.at3(c, y, x) as f64 - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn identical_images_give_zero_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 48, 48);
        for q in traditional_maps(&img, &img).unwrap() {
            assert!(q.map.data().iter().all(|&v| v == 0.0), "{:?}", q.source);
        }
        let flat = Tensor::filled(vec![3, 48, 48], 0.0);
        for q in traditional_maps(&flat, &flat).unwrap() {
            assert!(q.map.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn constant_pairs_stay_finite_and_bounded() {
        let a = Tensor::filled(vec![3, 48, 48], 0.0);
        let b = Tensor::filled(vec![3, 48, 48], 1.0);
        for q in traditional_maps(&a, &b).unwrap() {
            assert!(q.map.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn msssim_single_scale_is_powered_ssim_of_luminance() {
        let a = texture(1, 32, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = add_noise(&a, 0.05, &mut rng);
        let q = msssim_map(&a, &b, 1).unwrap();
        assert_eq!(q.map.shape(), &[1, 32, 32]);
        let la = luminance(&a).unwrap();
        let lb = luminance(&b).unwrap();
        let s = ssim_map(&la, &lb).unwrap();
        for (m, sv) in q.map.data().iter().zip(s.map.data()) {
            let ssim = 1.0 - *sv as f64;
            let want = 1.0 - ssim.clamp(0.0, 1.0).powf(0.1333);
            assert!((*m as f64 - want).abs() < 1e-5);
        }
    }

    #[test]
    fn msssim_shape_and_scale_count() {
        assert_eq!(max_scales(176, 200), 5);
        assert_eq!(max_scales(64, 64), 3);
        assert_eq!(max_scales(10, 64), 0);
        let a = texture(2, 64, 64);
        let q = traditional_maps(&a, &a).unwrap();
        assert_eq!(q[2].map.shape(), &[3, 64, 64]);
        assert_eq!(msssim_exponent(2, 3), 0.1333);
        assert_eq!(msssim_exponent(1, 3), 0.2856);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn error_means_grow_with_noise() {
        let sigmas = [0.0, 0.02, 0.05, 0.1, 0.2];
        let mut ok = [0usize; 3];
        let mut total = 0usize;
        for seed in 0..20u64 {
            let reference = texture(seed, 64, 64);
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let means: Vec<[f64; 3]> = sigmas
                .iter()
                .map(|&s| {
                    let noisy = add_noise(&reference, s, &mut rng);
                    let maps = traditional_maps(&noisy, &reference).unwrap();
                    [maps[0].map.mean(), maps[1].map.mean(), maps[2].map.mean()]
                })
                .collect();
            for i in 0..sigmas.len() {
                for j in i + 1..sigmas.len() {
                    total += 1;
                    for m in 0..3 {
                        if means[j][m] >= means[i][m] {
                            ok[m] += 1;
                        }
                    }
                }
            }
        }
        for m in 0..3 {
            assert!(
                ok[m] as f64 >= 0.95 * total as f64,
                "metric {m}: {}/{total}",
                ok[m]
            );
        }
    }
}
