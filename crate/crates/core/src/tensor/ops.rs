//! Eager (non-differentiable) field operations and the scalar kernels shared
//! with the differentiable graph.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::field::DenseField;
use crate::error::{Error, Result};

/// Parameters of a per-voxel linear map (`out x in` weights plus bias).
///
/// Values are kept in `f64` but the trainer keeps them representable in
/// `f32`, which is the precision they are checkpointed at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub out_dim: usize,
    pub in_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            out_dim,
            in_dim,
            weight: vec![0.0; out_dim * in_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut l = Self::zeros(dim, dim);
        for i in 0..dim {
            l.weight[i * dim + i] = 1.0;
        }
        l
    }

    pub fn from_parts(
        out_dim: usize,
        in_dim: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if weight.len() != out_dim * in_dim || bias.len() != out_dim {
            return Err(Error::Shape(format!(
                "linear {out_dim}x{in_dim} needs {} weights and {out_dim} biases, got {} and {}",
                out_dim * in_dim,
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self {
            out_dim,
            in_dim,
            weight,
            bias,
        })
    }

    /// Uniform fan-in initialization, `U(-scale/sqrt(in), scale/sqrt(in))`, zero bias.
    /// [`UNIT_VARIANCE_GAIN`] keeps the output variance equal to the input variance.
    pub fn random<R: Rng + ?Sized>(out_dim: usize, in_dim: usize, scale: f64, rng: &mut R) -> Self {
        let bound = scale / (in_dim as f64).sqrt();
        let weight = (0..out_dim * in_dim)
            .map(|_| round_f32(rng.random_range(-bound..=bound)))
            .collect();
        Self {
            out_dim,
            in_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }
}

/// `sqrt(3)`: the uniform bound that gives weights variance `1 / in`.
pub const UNIT_VARIANCE_GAIN: f64 = 1.732_050_807_568_877_2;

#[inline]
pub fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// `log(1 + e^x)` without overflow for large `x`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, the derivative of [`softplus`].
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax over a strided class vector.
pub(crate) fn softmax_strided(src: &[f64], dst: &mut [f64], base: usize, classes: usize, stride: usize) {
    let mut max = f64::NEG_INFINITY;
    for c in 0..classes {
        max = max.max(src[base + c * stride]);
    }
    let mut sum = 0.0;
    for c in 0..classes {
        let e = (src[base + c * stride] - max).exp();
        dst[base + c * stride] = e;
        sum += e;
    }
    for c in 0..classes {
        dst[base + c * stride] /= sum;
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

/// Shannon entropy with `0 log 0 = 0`.
pub fn entropy(probs: impl IntoIterator<Item = f64>) -> f64 {
    probs
        .into_iter()
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum::<f64>()
        .max(0.0)
}

fn finite(out: Vec<f64>, shape: Vec<usize>, op: &'static str) -> Result<DenseField> {
    if out.iter().any(|x| !x.is_finite() || x.abs() > f32::MAX as f64) {
        return Err(Error::NonFinite(op));
    }
    DenseField::from_f64(shape, &out)
}

/// Applies `lin` at every voxel: `out_c(i) = sum_k W[c,k] f_k(i) + b[c]`.
pub fn pointwise_linear(lin: &Linear, f: &DenseField) -> Result<DenseField> {
    if f.channels() != lin.in_dim {
        return Err(Error::Channels {
            expected: lin.in_dim,
            actual: f.channels(),
        });
    }
    let x = f.to_f64();
    let out = linear_kernel(&lin.weight, &lin.bias, &x, f.batch(), lin.in_dim, lin.out_dim, f.voxels());
    finite(out, f.shape_with_channels(lin.out_dim), "pointwise_linear")
}

/// Strided view of a row-major or transposed matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn fits(&self, rows: usize, cols: usize) -> bool {
        rows == 0 || cols == 0 || (rows - 1) * self.row_stride + (cols - 1) * self.col_stride < self.data.len()
    }
}

/// `c += a * b` with `a: m x k`, `b: k x n` and row-major `c: m x n`.
pub(crate) fn gemm_acc(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64]) {
    assert!(a.fits(m, k) && b.fits(k, n) && c.len() >= m * n, "gemm operand out of bounds");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the assertion above keeps every strided access inside its slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn linear_kernel(
    weight: &[f64],
    bias: &[f64],
    x: &[f64],
    batch: usize,
    in_dim: usize,
    out_dim: usize,
    voxels: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch * out_dim * voxels);
    for &b in bias.iter().cycle().take(batch * out_dim) {
        out.extend(std::iter::repeat_n(b, voxels));
    }
    let block = out_dim * voxels;
    for b in 0..batch {
        let xb = &x[b * in_dim * voxels..(b + 1) * in_dim * voxels];
        gemm_acc(
            out_dim,
            in_dim,
            voxels,
            MatRef::rows(weight, in_dim),
            MatRef::rows(xb, voxels),
            &mut out[b * block..(b + 1) * block],
        );
    }
    out
}

/// Channel-wise softmax at every voxel.
pub fn softmax(z: &DenseField) -> Result<DenseField> {
    if z.channels() < 2 {
        return Err(Error::InvalidArgument(
            "softmax needs at least two channels".into(),
        ));
    }
    let out = softmax_f64(&z.to_f64(), z.batch(), z.channels(), z.voxels());
    finite(out, z.shape().to_vec(), "softmax")
}

pub(crate) fn softmax_f64(z: &[f64], batch: usize, classes: usize, voxels: usize) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    for b in 0..batch {
        for i in 0..voxels {
            softmax_strided(z, &mut out, b * classes * voxels + i, classes, voxels);
        }
    }
    out
}

/// Elementwise overflow-safe softplus.
pub fn softplus_field(x: &DenseField) -> Result<DenseField> {
    let out: Vec<f64> = x.data().iter().map(|&v| softplus(v as f64)).collect();
    finite(out, x.shape().to_vec(), "softplus")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn field(shape: Vec<usize>, data: &[f32]) -> DenseField {
        DenseField::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_zero_and_hand_product() {
        let f = field(vec![1, 2, 3], &[1.0, -2.0, 0.5, 3.0, 4.0, -1.0]);
        assert_eq!(pointwise_linear(&Linear::identity(2), &f).unwrap(), f);

        let mut zero = Linear::zeros(2, 2);
        zero.bias = vec![1.0, -1.0];
        let out = pointwise_linear(&zero, &f).unwrap();
        assert_eq!(out.data(), &[1.0, 1.0, 1.0, -1.0, -1.0, -1.0]);

        let lin = Linear::from_parts(2, 2, vec![1.0, 2.0, 3.0, 4.0], vec![0.0, 0.0]).unwrap();
        let out = pointwise_linear(&lin, &field(vec![1, 2, 1], &[1.0, 1.0])).unwrap();
        assert_eq!(out.data(), &[3.0, 7.0]);
    }

    #[test]
    fn linear_rejects_channel_mismatch_and_overflow() {
        let f = DenseField::zeros(vec![1, 3, 2]).unwrap();
        assert!(matches!(
            pointwise_linear(&Linear::identity(2), &f),
            Err(Error::Channels { expected: 2, actual: 3 })
        ));
        let big = field(vec![1, 1, 1], &[f32::MAX]);
        let lin = Linear::from_parts(1, 1, vec![10.0], vec![0.0]).unwrap();
        assert!(matches!(pointwise_linear(&lin, &big), Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&field(vec![1, 4, 1], &[0.0; 4])).unwrap();
        for &x in p.data() {
            assert!((x - 0.25).abs() < 1e-7);
        }
        let p = softmax(&field(vec![1, 2, 1], &[2f32.ln(), 0.0])).unwrap();
        assert!((p.data()[0] as f64 - 2.0 / 3.0).abs() < 1e-6);
        assert!((p.data()[1] as f64 - 1.0 / 3.0).abs() < 1e-6);
        assert!(softmax(&field(vec![1, 1, 1], &[0.0])).is_err());
    }

    #[test]
    fn softplus_examples() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((softplus(50.0) - 50.0).abs() < 1e-6);
        let tiny = softplus(-20.0);
        assert!(tiny > 0.0 && (tiny - 2.061_153_6e-9).abs() < 1e-15);
        assert!(softplus(1000.0).is_finite());
        let f = softplus_field(&field(vec![1, 1, 3], &[0.0, 50.0, -20.0])).unwrap();
        assert!(f.data().iter().all(|&x| x > 0.0));
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax([1.0, 1.0, 0.0]), 0);
        assert_eq!(argmax([0.0, 2.0, 2.0]), 1);
    }

    fn small_field(channels: usize) -> impl Strategy<Value = DenseField> {
        (1usize..3, 1usize..6).prop_flat_map(move |(b, n)| {
            prop::collection::vec(-5.0f32..5.0, b * channels * n)
                .prop_map(move |d| DenseField::new(vec![b, channels, n], d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(z in small_field(3), shift in -10.0f32..10.0) {
            let p = softmax(&z).unwrap();
            let n = z.voxels();
            for b in 0..z.batch() {
                for i in 0..n {
                    let s: f64 = (0..3).map(|c| p.get(b, c, i) as f64).sum();
                    prop_assert!((s - 1.0).abs() < 1e-6);
                    let h = entropy((0..3).map(|c| p.get(b, c, i) as f64));
                    prop_assert!(h <= 3f64.ln() + 1e-9);
                }
            }
            let shifted = DenseField::new(z.shape().to_vec(), z.data().iter().map(|x| x + shift).collect()).unwrap();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.data().iter().zip(q.data()) {
                prop_assert!((a - b).abs() < 1e-5);
            }
        }

        #[test]
        fn pointwise_linear_is_linear(
            f in small_field(2),
            w in prop::collection::vec(-2.0f64..2.0, 6),
            bias in prop::collection::vec(-2.0f64..2.0, 3),
            alpha in -2.0f64..2.0,
            beta in -2.0f64..2.0,
            seed in prop::collection::vec(-5.0f32..5.0, 64),
        ) {
            let g_data: Vec<f32> = (0..f.len()).map(|i| seed[i % seed.len()]).collect();
            let g = DenseField::new(f.shape().to_vec(), g_data).unwrap();
            let lin = Linear::from_parts(3, 2, w.clone(), bias.clone()).unwrap();
            let nobias = Linear::from_parts(3, 2, w, vec![0.0; 3]).unwrap();
            let combo: Vec<f64> = f.to_f64().iter().zip(g.to_f64()).map(|(a, b)| alpha * a + beta * b).collect();
            let combo = DenseField::from_f64(f.shape().to_vec(), &combo).unwrap();
            let lhs = pointwise_linear(&lin, &combo).unwrap();
            let of = pointwise_linear(&nobias, &f).unwrap();
            let og = pointwise_linear(&nobias, &g).unwrap();
            let n = f.voxels();
            for b in 0..f.batch() {
                for c in 0..3 {
                    for i in 0..n {
                        let rhs = alpha * of.get(b, c, i) as f64 + beta * og.get(b, c, i) as f64 + bias[c];
                        let l = lhs.get(b, c, i) as f64;
                        prop_assert!((l - rhs).abs() <= 1e-5 * (1.0 + rhs.abs()));
                    }
                }
            }
        }
    }
}
