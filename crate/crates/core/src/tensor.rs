//! Dense row-major `f32` tensors and the handful of kernels the backbone and
//! the quality maps run on.
//!
//! Every operation is a pure function of its arguments. Convolution is
//! cross-correlation (no kernel flip) with zero padding, the convention
//! pretrained CNN weights are exported in.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor of rank 1 to 4. Rejects length mismatches and
    /// non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::Shape(format!(
                "tensor rank must be 1..=4, got {}",
                shape.len()
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite value {} at flat index {}",
                data[pos], pos
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        assert!(
            !shape.is_empty() && shape.len() <= 4,
            "tensor rank must be 1..=4"
        );
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::filled(shape, 0.0)
    }

    /// Builds a `C×H×W` tensor from a closure over `(c, y, x)`.
    pub fn from_fn(
        c: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ci, y, x));
                }
            }
        }
        Tensor {
            shape: vec![c, h, w],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape(format!(
                "expected a C×H×W tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f32 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    /// Single channel `c` as a `1×H×W` tensor.
    pub fn channel(&self, c: usize) -> Result<Tensor> {
        let (channels, h, w) = self.dims3()?;
        if c >= channels {
            return Err(Error::Shape(format!(
                "channel {c} out of range for {channels} channels"
            )));
        }
        let plane = h * w;
        Ok(Tensor {
            shape: vec![1, h, w],
            data: self.data[c * plane..(c + 1) * plane].to_vec(),
        })
    }

    /// Stacks rank-3 tensors of equal spatial size along the channel axis.
    pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cannot concatenate zero tensors".into()))?;
        let (_, h, w) = first.dims3()?;
        let mut channels = 0;
        let mut data = Vec::new();
        for p in parts {
            let (c, ph, pw) = p.dims3()?;
            if (ph, pw) != (h, w) {
                return Err(Error::Shape(format!(
                    "spatial size {ph}×{pw} does not match {h}×{w}"
                )));
            }
            channels += c;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: vec![channels, h, w],
            data,
        })
    }

    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Mean of all entries, accumulated in `f64`.
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }
}

fn output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// 2-D cross-correlation of a `C_in×H×W` input with `C_out×C_in×kH×kW`
/// weights, zero padding `pad` on every side.
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f32],
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (in_c, h, w) = input.dims3()?;
    let (out_c, w_in_c, kh, kw) = match weights.shape[..] {
        [o, i, kh, kw] => (o, i, kh, kw),
        _ => {
            return Err(Error::Shape(format!(
                "conv weights must be C_out×C_in×kH×kW, got {:?}",
                weights.shape
            )))
        }
    };
    if w_in_c != in_c {
        return Err(Error::Shape(format!(
            "conv expects {w_in_c} input channels, input has {in_c}"
        )));
    }
    if bias.len() != out_c {
        return Err(Error::Shape(format!(
            "conv has {out_c} output channels but {} biases",
            bias.len()
        )));
    }
    if stride == 0 {
        return Err(Error::Shape("conv stride must be positive".into()));
    }
    let (oh, ow) = match (
        output_extent(h, kh, stride, pad),
        output_extent(w, kw, stride, pad),
    ) {
        (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => (oh, ow),
        _ => {
            return Err(Error::Shape(format!(
                "conv {kh}×{kw} (stride {stride}, pad {pad}) has no valid output on a {h}×{w} input"
            )))
        }
    };

    // im2col: row (ic, ky, kx) holds the input value under that tap for
    // every output position, zero where the tap falls in the padding
    let k_len = in_c * kh * kw;
    let p_len = oh * ow;
    let mut cols = vec![0.0f32; k_len * p_len];
    for ic in 0..in_c {
        let in_plane = &input.data[ic * h * w..(ic + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut cols[((ic * kh + ky) * kw + kx) * p_len..][..p_len];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_row = &in_plane[iy as usize * w..][..w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            row[oy * ow + ox] = in_row[ix as usize];
                        }
                    }
                }
            }
        }
    }

    let mut out = vec![0.0f32; out_c * p_len];
    for (oc, out_plane) in out.chunks_exact_mut(p_len).enumerate() {
        out_plane.fill(bias[oc]);
        let w_row = &weights.data[oc * k_len..(oc + 1) * k_len];
        for (k, &wv) in w_row.iter().enumerate() {
            if wv == 0.0 {
                continue;
            }
            for (o, &c) in out_plane.iter_mut().zip(&cols[k * p_len..(k + 1) * p_len]) {
                *o += wv * c;
            }
        }
    }
    Tensor::new(vec![out_c, oh, ow], out)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Per-channel sliding-window maximum without padding.
pub fn maxpool2d(input: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if k == 0 || stride == 0 {
        return Err(Error::Shape(
            "maxpool window and stride must be positive".into(),
        ));
    }
    if k > h || k > w {
        return Err(Error::Shape(format!(
            "maxpool window {k} larger than {h}×{w} input"
        )));
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for dy in 0..k {
                    for dx in 0..k {
                        m = m.max(input.at3(ci, oy * stride + dy, ox * stride + dx));
                    }
                }
                out.push(m);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Separable bilinear resize with half-pixel-centred sampling and edge
/// clamping.
pub fn resize_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape(format!(
            "resize target {out_h}×{out_w} is empty"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::Shape("cannot resize an empty input".into()));
    }
    let ys = bilinear_taps(h, out_h);
    let xs = bilinear_taps(w, out_w);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ci in 0..c {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let a = input.at3(ci, y0, x0) as f64;
                let b = input.at3(ci, y0, x1) as f64;
                let cc = input.at3(ci, y1, x0) as f64;
                let d = input.at3(ci, y1, x1) as f64;
                let top = a + fx * (b - a);
                let bottom = cc + fx * (d - cc);
                out.push((top + fy * (bottom - top)) as f32);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// 2×2 average pooling with stride 2; an odd trailing row or column is
/// dropped.
pub fn downsample2x(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!("cannot downsample a {h}×{w} input")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let s = input.at3(ci, 2 * oy, 2 * ox) as f64
                    + input.at3(ci, 2 * oy, 2 * ox + 1) as f64
                    + input.at3(ci, 2 * oy + 1, 2 * ox) as f64
                    + input.at3(ci, 2 * oy + 1, 2 * ox + 1) as f64;
                out.push((s * 0.25) as f32);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Normalized 1-D Gaussian of odd length, in `f64`.
pub fn gaussian_kernel_1d(size: usize, sigma: f64) -> Result<Vec<f64>> {
    if size.is_multiple_of(2) {
        return Err(Error::InvalidInput(format!(
            "gaussian window size must be odd, got {size}"
        )));
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "gaussian sigma must be positive, got {sigma}"
        )));
    }
    let half = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Separable 2-D Gaussian window `size×size`, entries summing to one.
pub fn gaussian_window(size: usize, sigma: f64) -> Result<Tensor> {
    let g = gaussian_kernel_1d(size, sigma)?;
    let mut data = Vec::with_capacity(size * size);
    for gy in &g {
        for gx in &g {
            data.push((gy * gx) as f32);
        }
    }
    Tensor::new(vec![size, size], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t3(c: usize, h: usize, w: usize, data: &[f32]) -> Tensor {
        Tensor::new(vec![c, h, w], data.to_vec()).unwrap()
    }

    /// Direct quadruple loop in f64, independent of the strided fast path.
    #[allow(clippy::needless_range_loop)]
    fn conv_oracle(
        input: &Tensor,
        weights: &Tensor,
        bias: &[f32],
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let (ic, h, w) = input.dims3().unwrap();
        let (oc, kh, kw) = (weights.shape()[0], weights.shape()[2], weights.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = Vec::new();
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[o] as f64;
                    for i in 0..ic {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let wv = weights.data()[((o * ic + i) * kh + ky) * kw + kx] as f64;
                                acc += wv * input.at3(i, iy as usize, ix as usize) as f64;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![1], vec![f32::NAN]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1, 1], vec![1.0]).is_err());
    }

    #[test]
    fn conv_identity_scalar() {
        let x = t3(1, 1, 1, &[5.0]);
        let k = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv2d(&x, &k, &[0.0], 1, 0).unwrap();
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn conv_hand_evaluated() {
        let x = t3(1, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let k = Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let y = conv2d(&x, &k, &[0.5], 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[10.5]);
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let x = Tensor::from_fn(2, 5, 5, |c, y, x| (c + y * 3 + x) as f32 * 0.1);
        let k = Tensor::zeros(vec![3, 2, 3, 3]);
        let y = conv2d(&x, &k, &[0.25, -1.0, 2.0], 1, 1).unwrap();
        assert_eq!(y.shape(), &[3, 5, 5]);
        for c in 0..3 {
            let b = [0.25, -1.0, 2.0][c];
            assert!(y.channel(c).unwrap().data().iter().all(|&v| v == b));
        }
    }

    #[test]
    fn conv_identity_1x1_is_exact() {
        let x = Tensor::from_fn(3, 4, 6, |c, y, x| {
            (c as f32 - 1.0) * 0.37 + y as f32 * 0.11 - x as f32
        });
        let mut w = vec![0.0; 9];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let k = Tensor::new(vec![3, 3, 1, 1], w).unwrap();
        assert_eq!(conv2d(&x, &k, &[0.0; 3], 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::zeros(vec![2, 4, 4]);
        let k = Tensor::zeros(vec![1, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &k, &[0.0], 1, 0), Err(Error::Shape(_))));
        let k = Tensor::zeros(vec![1, 2, 5, 5]);
        assert!(matches!(conv2d(&x, &k, &[0.0], 1, 0), Err(Error::Shape(_))));
        let k = Tensor::zeros(vec![1, 2, 3, 3]);
        assert!(conv2d(&x, &k, &[0.0, 1.0], 1, 0).is_err());
        assert!(conv2d(&x, &k, &[0.0], 0, 0).is_err());
    }

    #[test]
    fn relu_cases() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let x = Tensor::new(vec![1], vec![-0.5]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0]);
        let pos = Tensor::from_fn(1, 3, 3, |_, y, x| (y * x) as f32);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn maxpool_cases() {
        let x = t3(1, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(maxpool2d(&x, 2, 2).unwrap().data(), &[4.0]);

        let c = Tensor::filled(vec![2, 5, 5], 0.7);
        let p = maxpool2d(&c, 3, 2).unwrap();
        assert_eq!(p.shape(), &[2, 2, 2]);
        assert!(p.data().iter().all(|&v| v == 0.7));

        let mut d = vec![0.0; 16];
        for i in 0..4 {
            d[i * 4 + i] = 1.0;
        }
        d[0] = 9.0;
        let p = maxpool2d(&t3(1, 4, 4, &d), 2, 2).unwrap();
        assert_eq!(p.data(), &[9.0, 0.0, 0.0, 1.0]);

        assert!(maxpool2d(&x, 3, 1).is_err());
    }

    #[test]
    fn resize_cases() {
        let c = Tensor::filled(vec![2, 3, 5], 0.3);
        let r = resize_bilinear(&c, 7, 2).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.3).abs() < 1e-7));

        let x = Tensor::from_fn(2, 4, 5, |c, y, x| (c * 20 + y * 5 + x) as f32 / 40.0);
        let same = resize_bilinear(&x, 4, 5).unwrap();
        for (a, b) in same.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }

        let ramp = t3(1, 1, 2, &[0.0, 1.0]);
        let up = resize_bilinear(&ramp, 1, 4).unwrap();
        assert!(
            up.data().windows(2).all(|p| p[0] <= p[1]),
            "{:?}",
            up.data()
        );

        assert!(resize_bilinear(&ramp, 0, 4).is_err());
    }

    #[test]
    fn resize_even_factor_preserves_mean() {
        let x = Tensor::from_fn(1, 11, 11, |_, y, x| ((y * 7 + x * 13) % 17) as f32 / 17.0);
        for f in [2, 4, 16] {
            let up = resize_bilinear(&x, 11 * f, 11 * f).unwrap();
            assert!((up.mean() - x.mean()).abs() < 1e-6);
        }
    }

    #[test]
    fn downsample_cases() {
        let x = t3(1, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(downsample2x(&x).unwrap().data(), &[2.5]);

        let c = Tensor::filled(vec![3, 6, 4], 0.4);
        let d = downsample2x(&c).unwrap();
        assert_eq!(d.shape(), &[3, 3, 2]);
        assert!(d.data().iter().all(|&v| v == 0.4));

        let odd = t3(
            1,
            3,
            3,
            &[1.0, 2.0, 100.0, 3.0, 4.0, 100.0, 100.0, 100.0, 100.0],
        );
        let d = downsample2x(&odd).unwrap();
        assert_eq!(d.shape(), &[1, 1, 1]);
        assert_eq!(d.data(), &[2.5]);

        assert!(downsample2x(&Tensor::zeros(vec![1, 1, 4])).is_err());
    }

    #[test]
    fn gaussian_cases() {
        assert_eq!(gaussian_window(1, 1.5).unwrap().data(), &[1.0]);
        assert!(gaussian_window(4, 1.0).is_err());
        assert!(gaussian_window(3, 0.0).is_err());
        for (size, sigma) in [(3, 0.5), (7, 2.0), (11, 1.5), (21, 4.0)] {
            let g = gaussian_window(size, sigma).unwrap();
            assert!((g.mean() * (size * size) as f64 - 1.0).abs() < 1e-6);
        }
        let g = gaussian_window(11, 1.5).unwrap();
        assert_eq!(g.data()[60], g.max_value());
    }

    fn small_tensor(c: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(-1.0f32..1.0, c * h * w)
            .prop_map(move |d| Tensor::new(vec![c, h, w], d).unwrap())
    }

    fn conv_case() -> impl Strategy<Value = (Tensor, Tensor, Vec<f32>, usize, usize)> {
        (
            1usize..=4,
            1usize..=8,
            1usize..=8,
            1usize..=3,
            1usize..=3,
            1usize..=3,
            1usize..=3,
            0usize..=2,
        )
            .prop_filter("needs an output", |&(_, h, w, _, kh, kw, s, p)| {
                output_extent(h, kh, s, p).is_some() && output_extent(w, kw, s, p).is_some()
            })
            .prop_flat_map(|(c, h, w, oc, kh, kw, s, p)| {
                (
                    small_tensor(c, h, w),
                    prop::collection::vec(-1.0f32..1.0, oc * c * kh * kw)
                        .prop_map(move |d| Tensor::new(vec![oc, c, kh, kw], d).unwrap()),
                    prop::collection::vec(-1.0f32..1.0, oc),
                    Just(s),
                    Just(p),
                )
            })
    }

    proptest! {
        #[test]
        fn conv_matches_direct_oracle((x, k, b, s, p) in conv_case()) {
            let got = conv2d(&x, &k, &b, s, p).unwrap();
            let want = conv_oracle(&x, &k, &b, s, p);
            prop_assert_eq!(got.len(), want.len());
            for (g, w) in got.data().iter().zip(&want) {
                prop_assert!((*g as f64 - w).abs() < 1e-5);
            }
        }

        #[test]
        fn conv_is_linear(
            x in small_tensor(2, 6, 5),
            y in small_tensor(2, 6, 5),
            k in prop::collection::vec(-1.0f32..1.0, 3 * 2 * 9),
            a in -2.0f32..2.0,
            b in -2.0f32..2.0,
        ) {
            let k = Tensor::new(vec![3, 2, 3, 3], k).unwrap();
            let zero = [0.0; 3];
            let mix = Tensor::new(
                vec![2, 6, 5],
                x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect(),
            ).unwrap();
            let lhs = conv2d(&mix, &k, &zero, 1, 1).unwrap();
            let cx = conv2d(&x, &k, &zero, 1, 1).unwrap();
            let cy = conv2d(&y, &k, &zero, 1, 1).unwrap();
            for i in 0..lhs.len() {
                let rhs = a * cx.data()[i] + b * cy.data()[i];
                prop_assert!((lhs.data()[i] - rhs).abs() < 1e-5);
            }
        }

        #[test]
        fn relu_idempotent(x in small_tensor(2, 3, 4)) {
            let once = relu(&x);
            prop_assert_eq!(relu(&once), once);
        }

        #[test]
        fn downsample_preserves_mean(h in 1usize..6, w in 1usize..6, seed in prop::collection::vec(0.0f32..1.0, 144)) {
            let (h, w) = (2 * h, 2 * w);
            let x = Tensor::from_fn(1, h, w, |_, y, xx| seed[(y * w + xx) % seed.len()]);
            let d = downsample2x(&x).unwrap();
            prop_assert!((d.mean() - x.mean()).abs() < 1e-6);
        }
    }
}
