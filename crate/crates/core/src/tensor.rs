//! Dense row-major `f32` tensors and the handful of kernels the denoiser
//! needs.
//!
//! Every kernel uses a fixed loop nest so that results are bit-identical from
//! run to run. Accumulation always starts from zero (or the bias) and walks
//! the reduction axis in ascending order.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!("zero-sized dimension in {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..len).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
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

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Interprets the tensor as `C×H×W`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Dimension(format!("expected C×H×W, got {:?}", self.shape))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Dimension(format!("expected a matrix, got {:?}", self.shape))),
        }
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensors have rank >= 1")
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.expect_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        self.expect_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).fold(0.0f32, |m, (a, b)| m.max((a - b).abs())))
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(&[c, r], out)
    }

    /// `C×H×W` feature map to an `HW×C` token matrix.
    pub fn to_tokens(&self) -> Result<Self> {
        let (c, h, w) = self.dims3()?;
        Self::new(&[c, h * w], self.data.clone())?.transpose()
    }

    /// `HW×C` token matrix back to a `C×H×W` feature map.
    pub fn from_tokens(tokens: &Tensor, h: usize, w: usize) -> Result<Self> {
        let (hw, c) = tokens.dims2()?;
        if hw != h * w {
            return Err(Error::Dimension(format!("{hw} tokens cannot form a {h}x{w} map")));
        }
        tokens.transpose()?.reshape(&[c, h, w])
    }
}

/// `c[M×N] = a[M×K] · b[K×N]` over row-major slices.
#[allow(unsafe_code)]
fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }
    // SAFETY: the three slices cover exactly the row-major extents passed
    // to the kernel (checked above), `c` is uniquely borrowed, and with
    // beta = 0 its previous contents are never read.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product `a[M×K] · b[K×N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0f32; m * n];
    gemm(m, k, n, &a.data, &b.data, &mut out);
    Tensor::new(&[m, n], out)
}

/// 3×3 cross-correlation with zero padding of one pixel.
///
/// `x` is `C×H×W`, `kernel` is `O×C×3×3`, `bias` has `O` entries. The output
/// is `O×⌈H/stride⌉×⌈W/stride⌉`. Evaluated as one matrix product of the
/// `O×9C` kernel with the `9C×(outH·outW)` patch matrix.
pub fn conv2d(x: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let (o, kc) = match *kernel.shape() {
        [o, kc, 3, 3] => (o, kc),
        _ => {
            return Err(Error::Dimension(format!(
                "conv kernel must be O×C×3×3, got {:?}",
                kernel.shape()
            )))
        }
    };
    if kc != c {
        return Err(Error::Dimension(format!("conv expects {kc} input channels, got {c}")));
    }
    if bias.shape() != [o] {
        return Err(Error::Dimension(format!("conv bias must have {o} entries")));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::Dimension(format!("unsupported stride {stride}")));
    }
    let oh = h.div_ceil(stride);
    let ow = w.div_ceil(stride);
    let n = oh * ow;
    let patches = im2col(&x.data, c, h, w, oh, ow, stride);
    let mut out = vec![0.0f32; o * n];
    gemm(o, 9 * c, n, &kernel.data, &patches, &mut out);
    for (plane, &b) in out.chunks_exact_mut(n).zip(&bias.data) {
        for v in plane.iter_mut() {
            *v += b;
        }
    }
    Tensor::new(&[o, oh, ow], out)
}

/// Row `(ic·9 + ky·3 + kx)` holds input channel `ic` sampled at offset
/// `(ky − 1, kx − 1)` for every output position, zero outside the image.
fn im2col(src: &[f32], c: usize, h: usize, w: usize, oh: usize, ow: usize, stride: usize) -> Vec<f32> {
    let n = oh * ow;
    let mut cols = vec![0.0f32; 9 * c * n];
    for (row, dst) in cols.chunks_exact_mut(n).enumerate() {
        let (ic, tap) = (row / 9, row % 9);
        let (ky, kx) = (tap / 3, tap % 3);
        let plane = &src[ic * h * w..(ic + 1) * h * w];
        for oy in 0..oh {
            let iy = oy * stride + ky;
            if iy == 0 || iy > h {
                continue;
            }
            let in_row = &plane[(iy - 1) * w..iy * w];
            let out_row = &mut dst[oy * ow..(oy + 1) * ow];
            if stride == 1 {
                // Output columns whose source column ox + kx - 1 is inside the image.
                let x0 = usize::from(kx == 0);
                let x1 = if kx == 2 { w - 1 } else { w };
                if x0 < x1 {
                    out_row[x0..x1].copy_from_slice(&in_row[x0 + kx - 1..x1 + kx - 1]);
                }
            } else {
                for (ox, o) in out_row.iter_mut().enumerate() {
                    let ix = ox * stride + kx;
                    if ix != 0 && ix <= w {
                        *o = in_row[ix - 1];
                    }
                }
            }
        }
    }
    cols
}

/// Nearest-neighbour resize of a `C×H×W` (or `H×W`) tensor.
///
/// Output pixel `(i, j)` reads source pixel `(⌊i·H/outH⌋, ⌊j·W/outW⌋)`.
pub fn resize_nearest(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Dimension("resize target must be at least 1x1".into()));
    }
    let (c, h, w, planar) = match *x.shape() {
        [c, h, w] => (c, h, w, true),
        [h, w] => (1, h, w, false),
        _ => return Err(Error::Dimension(format!("cannot resize shape {:?}", x.shape()))),
    };
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let src = &x.data[ch * h * w..(ch + 1) * h * w];
        for i in 0..out_h {
            let si = i * h / out_h;
            for j in 0..out_w {
                out.push(src[si * w + j * w / out_w]);
            }
        }
    }
    if planar {
        Tensor::new(&[c, out_h, out_w], out)
    } else {
        Tensor::new(&[out_h, out_w], out)
    }
}

/// Softmax over the last axis restricted to the entries where `allowed` is
/// non-zero.
///
/// Disallowed entries are left out of the normaliser entirely and come back
/// as exactly `0.0`.
pub fn softmax_lastdim(scores: &Tensor, allowed: &Tensor) -> Result<Tensor> {
    scores.expect_same_shape(allowed)?;
    let k = scores.last_dim();
    let mut out = scores.data.clone();
    for (row, mask) in out.chunks_exact_mut(k).zip(allowed.data.chunks_exact(k)) {
        masked_softmax_in_place(row, |j| mask[j] != 0.0)?;
    }
    Tensor::new(&scores.shape, out)
}

/// In-place masked softmax over one row.
pub(crate) fn masked_softmax_in_place(row: &mut [f32], allowed: impl Fn(usize) -> bool) -> Result<()> {
    let mut max = f32::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if allowed(j) && v > max {
            max = v;
        }
    }
    if max == f32::NEG_INFINITY {
        return Err(Error::DegenerateMask("softmax row has no allowed entries".into()));
    }
    let mut sum = 0.0f32;
    for (j, v) in row.iter_mut().enumerate() {
        if allowed(j) {
            *v = libm::expf(*v - max);
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    let inv = 1.0 / sum;
    for (j, v) in row.iter_mut().enumerate() {
        if allowed(j) {
            *v *= inv;
        }
    }
    Ok(())
}

/// Normalises every slice along the last axis to zero mean and unit variance,
/// then applies `gain` and `shift`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, shift: &Tensor, eps: f32) -> Result<Tensor> {
    let d = x.last_dim();
    if gain.len() != d || shift.len() != d {
        return Err(Error::Dimension(format!("layer norm parameters must have {d} entries")));
    }
    let mut out = x.data.clone();
    for row in out.chunks_exact_mut(d) {
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let inv = 1.0 / libm::sqrtf(var + eps);
        for ((v, &g), &b) in row.iter_mut().zip(&gain.data).zip(&shift.data) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Tensor::new(&x.shape, out)
}

/// Normalises each pixel's channel vector of a `C×H×W` map.
pub fn channel_norm(x: &Tensor, gain: &Tensor, shift: &Tensor, eps: f32) -> Result<Tensor> {
    let (_, h, w) = x.dims3()?;
    let tokens = layer_norm(&x.to_tokens()?, gain, shift, eps)?;
    Tensor::from_tokens(&tokens, h, w)
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v / (1.0 + libm::expf(-v)))
}

/// Stacks two `C×H×W` maps along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ca, ha, wa) = a.dims3()?;
    let (cb, hb, wb) = b.dims3()?;
    if (ha, wa) != (hb, wb) {
        return Err(Error::Dimension(format!(
            "cannot concatenate {ha}x{wa} and {hb}x{wb} maps"
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::new(&[ca + cb, ha, wa], data)
}

/// `x[N×K] · w[K×M] + bias[M]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let mut out = matmul(x, weight)?;
    if let Some(bias) = bias {
        let m = out.last_dim();
        if bias.len() != m {
            return Err(Error::Dimension(format!("linear bias must have {m} entries")));
        }
        for row in out.data.chunks_exact_mut(m) {
            for (v, &b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(matches!(Tensor::new(&[2, 2], vec![1.0; 3]), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_identity() {
        let id = t(&[2, 2], &[1., 0., 0., 1.]);
        let m = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(matmul(&id, &m).unwrap(), m);
        assert_eq!(matmul(&m, &id).unwrap(), m);
    }

    #[test]
    fn matmul_row_by_column() {
        let out = matmul(&t(&[1, 2], &[1., 2.]), &t(&[2, 1], &[3., 4.])).unwrap();
        assert_eq!(out.data(), &[11.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let z = Tensor::zeros(&[2, 3]);
        let b = Tensor::from_fn(&[3, 4], |i| i as f32 - 5.0);
        assert!(matmul(&z, &b).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let r = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3]));
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    fn delta_kernel(c: usize) -> Tensor {
        let mut k = Tensor::zeros(&[c, c, 3, 3]);
        for i in 0..c {
            k.data_mut()[(i * c + i) * 9 + 4] = 1.0;
        }
        k
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let x = Tensor::from_fn(&[2, 5, 4], |i| (i as f32 * 0.37).sin());
        let out = conv2d(&x, &delta_kernel(2), &Tensor::zeros(&[2]), 1).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn conv_ones_kernel_on_constant_interior() {
        let x = Tensor::full(&[1, 5, 5], 0.5);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let out = conv2d(&x, &k, &Tensor::zeros(&[1]), 1).unwrap();
        assert_eq!(out.data()[2 * 5 + 2], 4.5);
        // corner sees four in-bounds taps
        assert_eq!(out.data()[0], 2.0);
    }

    #[test]
    fn conv_stride_two_shape() {
        let x = Tensor::zeros(&[3, 4, 4]);
        let out = conv2d(&x, &Tensor::zeros(&[5, 3, 3, 3]), &Tensor::zeros(&[5]), 2).unwrap();
        assert_eq!(out.shape(), &[5, 2, 2]);
        let odd = conv2d(&Tensor::zeros(&[3, 5, 7]), &Tensor::zeros(&[1, 3, 3, 3]), &Tensor::zeros(&[1]), 2);
        assert_eq!(odd.unwrap().shape(), &[1, 3, 4]);
    }

    #[test]
    fn conv_strided_matches_subsampled_stride_one() {
        let x = Tensor::from_fn(&[2, 6, 5], |i| ((i * 7919) % 13) as f32 - 6.0);
        let k = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 31) % 7) as f32 - 3.0);
        let b = t(&[3], &[0.5, -1.0, 2.0]);
        let full = conv2d(&x, &k, &b, 1).unwrap();
        let strided = conv2d(&x, &k, &b, 2).unwrap();
        for o in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(strided.data()[(o * 3 + i) * 3 + j], full.data()[(o * 6 + 2 * i) * 5 + 2 * j]);
                }
            }
        }
    }

    #[test]
    fn conv_zero_kernel_gives_zero() {
        let x = Tensor::from_fn(&[2, 4, 4], |i| i as f32);
        let out = conv2d(&x, &Tensor::zeros(&[3, 2, 3, 3]), &Tensor::zeros(&[3]), 1).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_channel_mismatch() {
        let r = conv2d(&Tensor::zeros(&[2, 4, 4]), &Tensor::zeros(&[1, 3, 3, 3]), &Tensor::zeros(&[1]), 1);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn resize_same_size_is_identity() {
        let x = Tensor::from_fn(&[1, 4, 4], |i| i as f32);
        assert_eq!(resize_nearest(&x, 4, 4).unwrap(), x);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let x = Tensor::full(&[2, 3, 5], 0.25);
        let out = resize_nearest(&x, 7, 2).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn resize_upsizes_top_left_pixel_to_block() {
        let x = t(&[2, 2], &[1., 0., 0., 0.]);
        let out = resize_nearest(&x, 4, 4).unwrap();
        let expected = [1., 1., 0., 0., 1., 1., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0.];
        assert_eq!(out.data(), &expected);
    }

    #[test]
    fn softmax_symmetric() {
        let out = softmax_lastdim(&t(&[2], &[0., 0.]), &t(&[2], &[1., 1.])).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_single_survivor() {
        let out = softmax_lastdim(&t(&[2], &[5., 1e30]), &t(&[2], &[1., 0.])).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_ln2_case() {
        let out = softmax_lastdim(&t(&[2], &[core::f32::consts::LN_2, 0.]), &t(&[2], &[1., 1.])).unwrap();
        assert!((out.data()[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((out.data()[1] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_all_disallowed_is_degenerate() {
        let r = softmax_lastdim(&t(&[2, 2], &[0., 0., 1., 1.]), &t(&[2, 2], &[1., 0., 0., 0.]));
        assert!(matches!(r, Err(Error::DegenerateMask(_))));
    }

    #[test]
    fn layer_norm_constant_slice_is_zero() {
        let out = layer_norm(&Tensor::full(&[2, 4], 3.0), &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), 1e-5).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_already_standardised() {
        let out = layer_norm(&t(&[2], &[1., -1.]), &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), 1e-12).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-6);
        assert!((out.data()[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_zero_gain_returns_shift() {
        let shift = t(&[3], &[0.5, -2.0, 7.0]);
        let x = Tensor::from_fn(&[4, 3], |i| i as f32 * 1.5);
        let out = layer_norm(&x, &Tensor::zeros(&[3]), &shift, 1e-5).unwrap();
        for row in out.data().chunks(3) {
            assert_eq!(row, shift.data());
        }
    }

    #[test]
    fn token_round_trip() {
        let x = Tensor::from_fn(&[3, 2, 4], |i| i as f32);
        let tokens = x.to_tokens().unwrap();
        assert_eq!(tokens.shape(), &[8, 3]);
        assert_eq!(tokens.data()[3], 1.0);
        assert_eq!(Tensor::from_tokens(&tokens, 2, 4).unwrap(), x);
    }
}
