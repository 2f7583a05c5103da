//! Slow, direct reference implementations used to check the fast paths.
//! Everything here is written from the textbook definitions and shares no
//! code with the library.

#![allow(dead_code)]

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;
pub const MS_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Normalized 2-D Gaussian window, built directly in two dimensions.
fn window_2d() -> Vec<f64> {
    let r = (WINDOW / 2) as f64;
    let mut w: Vec<f64> = (0..WINDOW * WINDOW)
        .map(|i| {
            let dy = (i / WINDOW) as f64 - r;
            let dx = (i % WINDOW) as f64 - r;
            (-(dx * dx + dy * dy) / (2.0 * SIGMA * SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Local (ssim, cs) at every pixel, zero padding outside the image.
pub fn ssim_cs_maps(x: &[f64], y: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let win = window_2d();
    let r = (WINDOW / 2) as isize;
    let mut ssim = vec![0.0; h * w];
    let mut cs = vec![0.0; h * w];
    for py in 0..h {
        for px in 0..w {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for wy in 0..WINDOW {
                for wx in 0..WINDOW {
                    let iy = py as isize + wy as isize - r;
                    let ix = px as isize + wx as isize - r;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    let k = win[wy * WINDOW + wx];
                    let (a, b) = (
                        x[iy as usize * w + ix as usize],
                        y[iy as usize * w + ix as usize],
                    );
                    mx += k * a;
                    my += k * b;
                    sxx += k * a * a;
                    syy += k * b * b;
                    sxy += k * a * b;
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            let l = (2.0 * mx * my + C1) / (mx * mx + my * my + C1);
            let c = (2.0 * cov + C2) / (vx + vy + C2);
            ssim[py * w + px] = l * c;
            cs[py * w + px] = c;
        }
    }
    (ssim, cs)
}

/// Mean over channels and pixels of clamp(ssim, 0, 1) for CHW images.
pub fn mean_ssim(a: &[f32], b: &[f32], c: usize, h: usize, w: usize) -> f64 {
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = a[ch * plane..(ch + 1) * plane]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let y: Vec<f64> = b[ch * plane..(ch + 1) * plane]
            .iter()
            .map(|&v| v as f64)
            .collect();
        total += ssim_cs_maps(&x, &y, h, w)
            .0
            .iter()
            .map(|v| v.clamp(0.0, 1.0))
            .sum::<f64>();
    }
    total / (c * plane) as f64
}

fn gray(img: &[f32], c: usize, plane: usize) -> Vec<f64> {
    (0..plane)
        .map(|i| (0..c).map(|ch| img[ch * plane + i] as f64).sum::<f64>() / c as f64)
        .collect()
}

fn halve(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for xx in 0..ow {
            let s = x[2 * y * w + 2 * xx]
                + x[2 * y * w + 2 * xx + 1]
                + x[(2 * y + 1) * w + 2 * xx]
                + x[(2 * y + 1) * w + 2 * xx + 1];
            out[y * ow + xx] = s / 4.0;
        }
    }
    out
}

/// Scalar MS-SSIM on the channel-mean plane: product over scales of the
/// mean of the clamped, exponentiated per-pixel index (cs on finer scales,
/// full ssim on the coarsest).
#[allow(clippy::needless_range_loop)]
pub fn msssim(a: &[f32], b: &[f32], c: usize, h: usize, w: usize, scales: usize) -> f64 {
    let mut x = gray(a, c, h * w);
    let mut y = gray(b, c, h * w);
    let (mut sh, mut sw) = (h, w);
    let mut product = 1.0;
    for j in 0..scales {
        if j > 0 {
            x = halve(&x, sh, sw);
            y = halve(&y, sh, sw);
            sh /= 2;
            sw /= 2;
        }
        let (ssim, cs) = ssim_cs_maps(&x, &y, sh, sw);
        let (index, e) = if j + 1 == scales {
            (ssim, MS_WEIGHTS[4])
        } else {
            (cs, MS_WEIGHTS[j])
        };
        product *= index.iter().map(|v| v.clamp(0.0, 1.0).powf(e)).sum::<f64>() / (sh * sw) as f64;
    }
    product
}

/// Cross-correlation by the definition, in f64.
pub fn conv2d(
    input: &[f32],
    (c, h, w): (usize, usize, usize),
    weights: &[f32],
    (oc, kh, kw): (usize, usize, usize),
    bias: &[f32],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; oc * oh * ow];
    for o in 0..oc {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = bias[o] as f64;
                for i in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (x * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += weights[((o * c + i) * kh + ky) * kw + kx] as f64
                                    * input[(i * h + iy as usize) * w + ix as usize] as f64;
                            }
                        }
                    }
                }
                out[(o * oh + y) * ow + x] = acc;
            }
        }
    }
    (out, oh, ow)
}

/// Pearson r from exact integer moments: `N / sqrt(Vx·Vy)` where
/// `N = nΣxy − ΣxΣy`, `V = nΣx² − (Σx)²`.
pub fn pearson_int(x: &[i64], y: &[i64]) -> f64 {
    let n = x.len() as i128;
    let sx: i128 = x.iter().map(|&v| v as i128).sum();
    let sy: i128 = y.iter().map(|&v| v as i128).sum();
    let sxy: i128 = x.iter().zip(y).map(|(&a, &b)| a as i128 * b as i128).sum();
    let sxx: i128 = x.iter().map(|&v| (v as i128).pow(2)).sum();
    let syy: i128 = y.iter().map(|&v| (v as i128).pow(2)).sum();
    let num = n * sxy - sx * sy;
    let vx = n * sxx - sx * sx;
    let vy = n * syy - sy * sy;
    (num as f64 / (vx as f64 * vy as f64).sqrt()).clamp(-1.0, 1.0)
}

/// Twice the average rank, by counting: 2·(#smaller) + (#equal) + 1.
pub fn doubled_ranks(v: &[i64]) -> Vec<i64> {
    v.iter()
        .map(|&a| {
            let less = v.iter().filter(|&&b| b < a).count() as i64;
            let equal = v.iter().filter(|&&b| b == a).count() as i64;
            2 * less + equal + 1
        })
        .collect()
}

pub fn spearman_int(x: &[i64], y: &[i64]) -> f64 {
    pearson_int(&doubled_ranks(x), &doubled_ranks(y))
}

/// Kendall tau-b over all ordered pairs (each unordered pair counted twice).
pub fn kendall_int(x: &[i64], y: &[i64]) -> f64 {
    let (mut con, mut dis, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in 0..x.len() {
            if i == j {
                continue;
            }
            let p = (x[i] - x[j]).signum() * (y[i] - y[j]).signum();
            if x[i] == x[j] && y[i] == y[j] {
            } else if x[i] == x[j] {
                tx += 1;
            } else if y[i] == y[j] {
                ty += 1;
            } else if p > 0 {
                con += 1;
            } else {
                dis += 1;
            }
        }
    }
    let (con, dis, tx, ty) = (con / 2, dis / 2, tx / 2, ty / 2);
    let a = (con + dis + tx) as f64;
    let b = (con + dis + ty) as f64;
    ((con - dis) as f64 / (a * b).sqrt()).clamp(-1.0, 1.0)
}
