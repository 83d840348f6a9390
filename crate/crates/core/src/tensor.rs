//! Dense row-major `f32` tensors and the raw kernels the autograd layer is
//! built from.
//!
//! Feature maps and images are laid out `[C, H, W]`; convolution weights are
//! `[C_out, C_in, K, K]`. There is no batch axis: every model in this crate
//! works on one image at a time.

use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Self {
        let shape = shape.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n])
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::new(Vec::new(), vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data.as_ref().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected [C,H,W], got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Tensor {
        let shape = shape.into();
        assert_eq!(shape.iter().product::<usize>(), self.len());
        Tensor {
            shape,
            data: Arc::clone(&self.data),
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
        assert_eq!(self.shape, other.shape, "shape mismatch in elementwise op");
        Tensor::new(
            self.shape.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// SHA-256 over the shape and the little-endian bytes of the data.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for &d in &self.shape {
            h.update((d as u64).to_le_bytes());
        }
        for v in self.data.iter() {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }
}

fn out_len(len: usize, k: usize, pad: usize, stride: usize) -> usize {
    assert!(len + 2 * pad >= k, "kernel {k} larger than padded input {len}+2*{pad}");
    (len + 2 * pad - k) / stride + 1
}

/// Unfolds `[C,H,W]` into a `[C*K*K, Ho*Wo]` patch matrix with zero padding.
fn im2col(
    x: &[f32],
    (c, h, w): (usize, usize, usize),
    k: usize,
    pad: usize,
    stride: usize,
) -> (Vec<f32>, usize, usize) {
    let ho = out_len(h, k, pad, stride);
    let wo = out_len(w, k, pad, stride);
    let cols_w = ho * wo;
    let mut cols = vec![0.0f32; c * k * k * cols_w];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for a in 0..k {
            for b in 0..k {
                let row = &mut cols[((ci * k + a) * k + b) * cols_w..][..cols_w];
                for oy in 0..ho {
                    let iy = (oy * stride + a) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..][..w];
                    let dst = &mut row[oy * wo..][..wo];
                    if stride == 1 {
                        // valid ox range: 0 <= ox + b - pad < w
                        let lo = pad.saturating_sub(b);
                        let hi = (w + pad).saturating_sub(b).min(wo);
                        if lo < hi {
                            let s0 = lo + b - pad;
                            dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + b) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// `c = a · b + beta·c` for row-major `a: m×k`, `b: k×n`.
fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    let a = ArrayView2::from_shape((m, k), a).expect("gemm lhs shape");
    let b = ArrayView2::from_shape((k, n), b).expect("gemm rhs shape");
    let mut c = ArrayViewMut2::from_shape((m, n), c).expect("gemm out shape");
    general_mat_mul(1.0, &a, &b, beta, &mut c);
}

/// Cross-correlation with zero padding. `x: [Ci,H,W]`, `w: [Co,Ci,K,K]`.
pub fn conv2d(x: &Tensor, w: &Tensor, pad: usize, stride: usize) -> Tensor {
    let (ci, h, wd) = x.chw();
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "conv weight must be [Co,Ci,K,K]");
    assert_eq!(ws[1], ci, "conv input channels {ci} != weight channels {}", ws[1]);
    assert_eq!(ws[2], ws[3], "square kernels only");
    let (co, k) = (ws[0], ws[2]);
    let (cols, ho, wo) = im2col(x.data(), (ci, h, wd), k, pad, stride);
    let mut out = vec![0.0f32; co * ho * wo];
    gemm(co, ci * k * k, ho * wo, w.data(), &cols, 0.0, &mut out);
    Tensor::new(vec![co, ho, wo], out)
}

/// Gradient of a stride-1 [`conv2d`] with respect to its weight:
/// `dw[o,i,a,b] = Σ_yx gy[o,y,x] · xpad[i,y+a,x+b]`.
pub fn conv2d_weight_grad(x: &Tensor, gy: &Tensor, pad: usize, k: usize) -> Tensor {
    let (ci, h, wd) = x.chw();
    let (co, gh, gw) = gy.chw();
    let (cols, ho, wo) = im2col(x.data(), (ci, h, wd), k, pad, 1);
    assert_eq!((ho, wo), (gh, gw), "weight-grad output-gradient shape mismatch");
    let p = ho * wo;
    let lhs = ArrayView2::from_shape((co, p), gy.data()).expect("gy shape");
    let rhs = ArrayView2::from_shape((ci * k * k, p), &cols).expect("cols shape");
    let mut out = vec![0.0f32; co * ci * k * k];
    {
        let mut o = ArrayViewMut2::from_shape((co, ci * k * k), &mut out).expect("out shape");
        general_mat_mul(1.0, &lhs, &rhs.t(), 0.0, &mut o);
    }
    Tensor::new(vec![co, ci, k, k], out)
}

/// `[Co,Ci,K,K] -> [Ci,Co,K,K]` with both spatial axes reversed. Turns a
/// convolution weight into the weight of its adjoint (transposed) convolution.
pub fn flip_transpose(w: &Tensor) -> Tensor {
    let s = w.shape();
    let (co, ci, k) = (s[0], s[1], s[2]);
    let src = w.data();
    let mut out = vec![0.0f32; w.len()];
    for o in 0..co {
        for i in 0..ci {
            for a in 0..k {
                for b in 0..k {
                    out[((i * co + o) * k + a) * k + b] = src[((o * ci + i) * k + (k - 1 - a)) * k + (k - 1 - b)];
                }
            }
        }
    }
    Tensor::new(vec![ci, co, k, k], out)
}

fn reflect_index(i: isize, len: usize) -> usize {
    let n = len as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// Mirror padding without repeating the edge sample (`abc|ba`).
pub fn reflect_pad(x: &Tensor, pad: usize) -> Tensor {
    let (c, h, w) = x.chw();
    assert!(pad < h && pad < w, "reflect pad {pad} needs sides > pad");
    let (ho, wo) = (h + 2 * pad, w + 2 * pad);
    let src = x.data();
    let mut out = vec![0.0f32; c * ho * wo];
    for ch in 0..c {
        for y in 0..ho {
            let sy = reflect_index(y as isize - pad as isize, h);
            for xx in 0..wo {
                let sx = reflect_index(xx as isize - pad as isize, w);
                out[(ch * ho + y) * wo + xx] = src[(ch * h + sy) * w + sx];
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}

/// Adjoint of [`reflect_pad`]: folds the border back onto the interior.
pub fn reflect_pad_adjoint(g: &Tensor, pad: usize) -> Tensor {
    let (c, ho, wo) = g.chw();
    let (h, w) = (ho - 2 * pad, wo - 2 * pad);
    let src = g.data();
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for y in 0..ho {
            let sy = reflect_index(y as isize - pad as isize, h);
            for xx in 0..wo {
                let sx = reflect_index(xx as isize - pad as isize, w);
                out[(ch * h + sy) * w + sx] += src[(ch * ho + y) * wo + xx];
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Applies `out[c] = rows · x[c] · colsᵀ` to every channel, with
/// `rows: [Ho,H]` and `cols: [Wo,W]` row-major.
pub fn separable_map(x: &Tensor, rows: &[f32], cols: &[f32], ho: usize, wo: usize) -> Tensor {
    let (c, h, w) = x.chw();
    assert_eq!(rows.len(), ho * h);
    assert_eq!(cols.len(), wo * w);
    let rows = ArrayView2::from_shape((ho, h), rows).expect("row operator");
    let cols = ArrayView2::from_shape((wo, w), cols).expect("column operator");
    let mut tmp = vec![0.0f32; ho * w];
    let mut out = vec![0.0f32; c * ho * wo];
    for ch in 0..c {
        let plane = ArrayView2::from_shape((h, w), &x.data()[ch * h * w..(ch + 1) * h * w]).expect("plane");
        {
            let mut t = ArrayViewMut2::from_shape((ho, w), &mut tmp).expect("tmp");
            general_mat_mul(1.0, &rows, &plane, 0.0, &mut t);
        }
        let t = ArrayView2::from_shape((ho, w), &tmp).expect("tmp");
        let mut o = ArrayViewMut2::from_shape((ho, wo), &mut out[ch * ho * wo..(ch + 1) * ho * wo]).expect("out");
        general_mat_mul(1.0, &t, &cols.t(), 0.0, &mut o);
    }
    Tensor::new(vec![c, ho, wo], out)
}

/// Max pooling without padding, used by the feature extractors.
pub fn max_pool2d(x: &Tensor, k: usize, stride: usize) -> Tensor {
    let (c, h, w) = x.chw();
    let ho = out_len(h, k, 0, stride);
    let wo = out_len(w, k, 0, stride);
    let src = x.data();
    let mut out = vec![f32::NEG_INFINITY; c * ho * wo];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut m = f32::NEG_INFINITY;
                for a in 0..k {
                    for b in 0..k {
                        m = m.max(src[(ch * h + oy * stride + a) * w + ox * stride + b]);
                    }
                }
                out[(ch * ho + oy) * wo + ox] = m;
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, pad: usize, stride: usize) -> Tensor {
        let (ci, h, wd) = x.chw();
        let s = w.shape();
        let (co, k) = (s[0], s[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0f32; co * ho * wo];
        for o in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = 0.0f64;
                    for i in 0..ci {
                        for a in 0..k {
                            for b in 0..k {
                                let iy = (y * stride + a) as isize - pad as isize;
                                let ix = (xx * stride + b) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.data()[(i * h + iy as usize) * wd + ix as usize] as f64
                                        * w.data()[((o * ci + i) * k + a) * k + b] as f64;
                                }
                            }
                        }
                    }
                    out[(o * ho + y) * wo + xx] = acc as f32;
                }
            }
        }
        Tensor::new(vec![co, ho, wo], out)
    }

    fn ramp(shape: Vec<usize>, seed: f32) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| (i as f32 * 0.37 + seed).sin()).collect())
    }

    #[test]
    fn conv_matches_direct_loops() {
        let x = ramp(vec![3, 7, 9], 0.1);
        let w = ramp(vec![4, 3, 3, 3], 1.3);
        for (pad, stride) in [(0, 1), (1, 1), (2, 1), (0, 2), (1, 2)] {
            let fast = conv2d(&x, &w, pad, stride);
            let slow = naive_conv(&x, &w, pad, stride);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-4, "pad {pad} stride {stride}");
        }
    }

    #[test]
    fn weight_grad_is_adjoint_of_conv() {
        // <gy, conv(x, w)> == <conv_weight_grad(x, gy), w>
        let x = ramp(vec![2, 6, 5], 0.4);
        let w = ramp(vec![3, 2, 3, 3], 2.0);
        for pad in [0, 1, 2] {
            let y = conv2d(&x, &w, pad, 1);
            let gy = ramp(y.shape().to_vec(), 0.9);
            let lhs: f64 = y.data().iter().zip(gy.data()).map(|(a, b)| (a * b) as f64).sum();
            let dw = conv2d_weight_grad(&x, &gy, pad, 3);
            let rhs: f64 = dw.data().iter().zip(w.data()).map(|(a, b)| (a * b) as f64).sum();
            assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn reflect_pad_adjoint_identity() {
        let x = ramp(vec![2, 5, 4], 0.2);
        let p = reflect_pad(&x, 1);
        assert_eq!(p.shape(), &[2, 7, 6]);
        let g = ramp(vec![2, 7, 6], 1.1);
        let lhs: f64 = p.data().iter().zip(g.data()).map(|(a, b)| (a * b) as f64).sum();
        let back = reflect_pad_adjoint(&g, 1);
        let rhs: f64 = back.data().iter().zip(x.data()).map(|(a, b)| (a * b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn flip_transpose_is_involution() {
        let w = ramp(vec![3, 2, 3, 3], 0.5);
        assert_eq!(flip_transpose(&flip_transpose(&w)), w);
    }

    #[test]
    fn max_pool_picks_window_maximum() {
        let x = Tensor::new(vec![1, 3, 3], (0..9).map(|v| v as f32).collect());
        assert_eq!(max_pool2d(&x, 2, 1).data(), &[4.0, 5.0, 7.0, 8.0]);
    }
}
