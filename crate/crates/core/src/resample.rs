//! Anti-aliased bicubic resampling expressed as a pair of dense linear
//! operators (rows, columns).
//!
//! The same operator is used for building image pyramids, for moving feature
//! maps between generator stages and for stage-0 inputs, so every resize in
//! the crate shares one kernel. Because it is linear, its adjoint is just the
//! transposed pair, which is what the autograd layer differentiates through.

use crate::tensor::{separable_map, Tensor};

const CUBIC_A: f64 = -0.5;

fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// `[out_len, in_len]` row-major resampling matrix. When shrinking, the kernel
/// is stretched by the scale factor so it integrates over the source pixels it
/// covers. Every row sums to one, so constants are preserved exactly (up to
/// float rounding) and `in_len == out_len` gives the identity.
pub fn resample_matrix(in_len: usize, out_len: usize) -> Vec<f32> {
    assert!(in_len > 0 && out_len > 0, "resample to/from empty axis");
    let scale = in_len as f64 / out_len as f64;
    let filter_scale = scale.max(1.0);
    let support = 2.0 * filter_scale;
    let mut m = vec![0.0f32; out_len * in_len];
    let mut weights = Vec::new();
    for i in 0..out_len {
        let center = (i as f64 + 0.5) * scale;
        let lo = ((center - support).floor().max(0.0)) as usize;
        let hi = ((center + support).ceil() as usize).min(in_len);
        weights.clear();
        let mut total = 0.0;
        for j in lo..hi {
            let w = cubic((j as f64 + 0.5 - center) / filter_scale);
            weights.push(w);
            total += w;
        }
        for (j, w) in (lo..hi).zip(&weights) {
            m[i * in_len + j] = (w / total) as f32;
        }
    }
    m
}

fn transpose(m: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut t = vec![0.0f32; m.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = m[r * cols + c];
        }
    }
    t
}

/// A separable linear map from `[C, in_h, in_w]` to `[C, out_h, out_w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Resampler {
    pub in_size: (usize, usize),
    pub out_size: (usize, usize),
    rows: Vec<f32>,
    cols: Vec<f32>,
}

impl Resampler {
    pub fn new(in_size: (usize, usize), out_size: (usize, usize)) -> Self {
        Resampler {
            in_size,
            out_size,
            rows: resample_matrix(in_size.0, out_size.0),
            cols: resample_matrix(in_size.1, out_size.1),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.in_size == self.out_size
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let (_, h, w) = x.chw();
        assert_eq!((h, w), self.in_size, "resampler input size mismatch");
        if self.is_identity() {
            return x.clone();
        }
        separable_map(x, &self.rows, &self.cols, self.out_size.0, self.out_size.1)
    }

    /// The transposed operator, mapping `out_size` back to `in_size`.
    pub fn adjoint(&self) -> Resampler {
        Resampler {
            in_size: self.out_size,
            out_size: self.in_size,
            rows: transpose(&self.rows, self.out_size.0, self.in_size.0),
            cols: transpose(&self.cols, self.out_size.1, self.in_size.1),
        }
    }
}

/// Resizes a `[C,H,W]` tensor to `(h, w)`.
pub fn resize(x: &Tensor, size: (usize, usize)) -> Tensor {
    let (_, h, w) = x.chw();
    Resampler::new((h, w), size).apply(x)
}
