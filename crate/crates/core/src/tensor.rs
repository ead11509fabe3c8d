//! Dense row-major tensors and the handful of kernels the forward pass needs.
//!
//! Every reduction runs in a fixed order: dot products use eight interleaved
//! lane accumulators that are combined left to right, followed by the tail.
//! Repeated calls on identical inputs are therefore bit-identical, and a
//! matrix product computes each output element independently of how many
//! rows are stacked in the left operand.

use crate::error::{ProbeError, Result};
use crate::scalar::Scalar;

/// Norm product below which a cosine is treated as undefined.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(ProbeError::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![S::zero(); n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    /// Builds a matrix from nested rows; all rows must share one length.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(ProbeError::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(0)
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn row(&self, r: usize) -> &[S] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols() + c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Result<Self> {
        self.expect_matrix("transpose")?;
        let (m, n) = (self.rows(), self.cols());
        let mut out = Vec::with_capacity(m * n);
        for c in 0..n {
            for r in 0..m {
                out.push(self.data[r * n + c]);
            }
        }
        Self::new(vec![n, m], out)
    }

    /// Converts element type, rounding where the target is narrower.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    fn expect_matrix(&self, op: &str) -> Result<()> {
        if self.is_matrix() {
            Ok(())
        } else {
            Err(ProbeError::Shape(format!(
                "{op} expects a matrix, got shape {:?}",
                self.shape
            )))
        }
    }
}

/// Fixed-order dot product.
#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [S::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    let mut acc = lanes[0];
    for lane in &lanes[1..] {
        acc += *lane;
    }
    for (x, y) in ta.iter().zip(tb) {
        acc += *x * *y;
    }
    acc
}

/// `A · B` for an `m×k` and a `k×n` matrix.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    a.expect_matrix("matmul")?;
    b.expect_matrix("matmul")?;
    if a.cols() != b.rows() {
        return Err(ProbeError::Shape(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let bt = b.transpose()?;
    matmul_nt(a, &bt, None)
}

/// `A · Wᵀ + bias` where `W` is stored `[out, in]`, the layout every
/// projection in the model uses.
///
/// The weight row stays hot while all input rows stream past it, so each
/// weight is read once per call.
pub fn matmul_nt<S: Scalar>(
    a: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&[S]>,
) -> Result<Tensor<S>> {
    a.expect_matrix("matmul_nt")?;
    w.expect_matrix("matmul_nt")?;
    if a.cols() != w.cols() {
        return Err(ProbeError::Shape(format!(
            "projection expects input width {}, got {}",
            w.cols(),
            a.cols()
        )));
    }
    let (m, n) = (a.rows(), w.rows());
    if let Some(b) = bias {
        if b.len() != n {
            return Err(ProbeError::Shape(format!(
                "bias length {} does not match output width {n}",
                b.len()
            )));
        }
    }
    let mut out = vec![S::zero(); m * n];
    for o in 0..n {
        let wrow = w.row(o);
        let b = bias.map_or(S::zero(), |b| b[o]);
        for r in 0..m {
            out[r * n + o] = dot(a.row(r), wrow) + b;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// In-place softmax of `scale · row`, stabilized by max subtraction.
///
/// Entries equal to `-inf` receive exactly zero mass.
pub fn softmax_in_place<S: Scalar>(row: &mut [S], scale: S) {
    let mut max = S::neg_infinity();
    for v in row.iter() {
        let s = *v * scale;
        if s > max {
            max = s;
        }
    }
    if !max.is_finite() {
        // every entry masked; leave a uniform row rather than NaNs
        let u = S::one() / S::from_usize(row.len().max(1)).unwrap_or_else(S::one);
        row.iter_mut().for_each(|v| *v = u);
        return;
    }
    let mut sum = S::zero();
    for v in row.iter_mut() {
        let e = (*v * scale - max).exp();
        *v = e;
        sum += e;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax of `scale · M`.
pub fn softmax_rows<S: Scalar>(m: &Tensor<S>, scale: S) -> Result<Tensor<S>> {
    m.expect_matrix("softmax_rows")?;
    let mut out = m.clone();
    let cols = out.cols();
    if cols > 0 {
        for row in out.data.chunks_exact_mut(cols) {
            softmax_in_place(row, scale);
        }
    }
    Ok(out)
}

/// `(x − mean) / sqrt(var + eps) ⊙ gain + bias` with population variance.
pub fn layer_norm<S: Scalar>(x: &[S], gain: &[S], bias: &[S], eps: S) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    layer_norm_into(x, gain, bias, eps, &mut out);
    out
}

pub(crate) fn layer_norm_into<S: Scalar>(x: &[S], gain: &[S], bias: &[S], eps: S, out: &mut [S]) {
    let n = S::from_usize(x.len()).unwrap_or_else(S::one);
    let mut mean = S::zero();
    for v in x {
        mean += *v;
    }
    mean /= n;
    let mut var = S::zero();
    for v in x {
        let d = *v - mean;
        var += d * d;
    }
    var /= n;
    let denom = (var + eps).sqrt();
    for k in 0..x.len() {
        let centered = x[k] - mean;
        // zero-variance input with eps = 0 maps to the bias
        let normed = if denom > S::zero() {
            centered / denom
        } else {
            S::zero()
        };
        out[k] = normed * gain[k] + bias[k];
    }
}

/// Exact GELU, `x · Φ(x)`.
pub fn gelu<S: Scalar>(x: S) -> S {
    let xf = x.as_f64();
    S::from_f64_lossy(0.5 * xf * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2)))
}

/// Tanh-approximated GELU used by the original GPT-2 checkpoints.
pub fn gelu_tanh<S: Scalar>(x: S) -> S {
    let xf = x.as_f64();
    let c = (2.0 / std::f64::consts::PI).sqrt();
    S::from_f64_lossy(0.5 * xf * (1.0 + (c * (xf + 0.044715 * xf * xf * xf)).tanh()))
}

/// Euclidean norm with an `f64` accumulator.
pub fn l2_norm<S: Scalar>(v: &[S]) -> f64 {
    v.iter()
        .map(|x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Cosine similarity clamped to `[-1, 1]`, or `None` when the norm product is
/// below [`COSINE_EPS`].
pub fn cosine<S: Scalar>(u: &[S], v: &[S]) -> Option<f64> {
    let mut uv = 0.0;
    let mut uu = 0.0;
    let mut vv = 0.0;
    for (a, b) in u.iter().zip(v) {
        let (a, b) = (a.as_f64(), b.as_f64());
        uv += a * b;
        uu += a * a;
        vv += b * b;
    }
    let denom = uu.sqrt() * vv.sqrt();
    if denom < COSINE_EPS {
        None
    } else {
        Some((uv / denom).clamp(-1.0, 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f32]]) -> Tensor<f32> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn tensor_rejects_bad_length() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let b = m(&[&[1.5, -2.0], &[3.25, 0.5]]);
        assert_eq!(matmul(&Tensor::identity(2), &b).unwrap(), b);
        assert_eq!(matmul(&b, &Tensor::identity(2)).unwrap(), b);
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let c = m(&[&[0.0], &[1.0]]);
        assert_eq!(matmul(&a, &c).unwrap(), m(&[&[2.0], &[4.0]]));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        assert!(matches!(matmul(&a, &a), Err(ProbeError::Shape(_))));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f32> = (0..35).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ta = Tensor::new(vec![7, 5], a.clone()).unwrap();
        let tb = Tensor::new(vec![5, 3], b.clone()).unwrap();
        let c = matmul(&ta, &tb).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut s = 0.0f64;
                for k in 0..5 {
                    s += a[i * 5 + k] as f64 * b[k * 3 + j] as f64;
                }
                assert!((c.get2(i, j) as f64 - s).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn matmul_nt_rows_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f32> = (0..40 * 19).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f32> = (0..6 * 19).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Tensor::new(vec![40, 19], w).unwrap();
        let full = matmul_nt(&Tensor::new(vec![6, 19], x.clone()).unwrap(), &w, None).unwrap();
        let single = matmul_nt(&Tensor::new(vec![1, 19], x[4 * 19..5 * 19].to_vec()).unwrap(), &w, None)
            .unwrap();
        assert_eq!(full.row(4), single.row(0));
    }

    #[test]
    fn softmax_cases() {
        let s = softmax_rows(&m(&[&[2.0, 2.0, 2.0, 2.0]]), 1.0).unwrap();
        assert!(s.data().iter().all(|v| (*v - 0.25).abs() < 1e-7));
        let s = softmax_rows(&Tensor::from_rows(&[vec![0.0f64, 3f64.ln()]]).unwrap(), 1.0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-12 && (s.data()[1] - 0.75).abs() < 1e-12);
        let s = softmax_rows(&m(&[&[0.1, 0.3, 0.2]]), 1e4).unwrap();
        assert!((s.data()[1] - 1.0).abs() < 1e-6 && s.data()[0] < 1e-6);
    }

    #[test]
    fn softmax_masked_entries_get_zero() {
        let mut row = [1.0f32, f32::NEG_INFINITY, 0.5];
        softmax_in_place(&mut row, 1.0);
        assert_eq!(row[1], 0.0);
    }

    #[test]
    fn layer_norm_cases() {
        let z = layer_norm(&[3.0f32; 5], &[1.0; 5], &[0.0; 5], 1e-5);
        assert!(z.iter().all(|v| *v == 0.0));
        let u = layer_norm(&[1.0f64, -1.0], &[1.0, 1.0], &[0.0, 0.0], 0.0);
        assert_eq!(u, vec![1.0, -1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f32> = (0..64).map(|_| rng.random_range(-5.0..9.0)).collect();
        let y = layer_norm(&x, &[1.0; 64], &[0.0; 64], 1e-5);
        let mean = y.iter().map(|v| *v as f64).sum::<f64>() / 64.0;
        let var = y.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4);
    }

    /// erf by its Maclaurin series, summed in f64 until terms vanish.
    fn erf_series(z: f64) -> f64 {
        let mut term = z;
        let mut sum = z;
        let mut n = 0.0;
        loop {
            n += 1.0;
            term *= -z * z / n;
            let t = term / (2.0 * n + 1.0);
            sum += t;
            if t.abs() < 1e-18 {
                break;
            }
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    }

    #[test]
    fn gelu_cases() {
        assert_eq!(gelu(0.0f32), 0.0);
        assert!((gelu(10.0f32) - 10.0).abs() < 1e-6);
        let oracle = 0.5 * (1.0 + erf_series(1.0 / std::f64::consts::SQRT_2));
        assert!((gelu(1.0f32) as f64 - oracle).abs() < 1e-6);
        let x = -0.7;
        let oracle = 0.5 * x * (1.0 + erf_series(x / std::f64::consts::SQRT_2));
        assert!((gelu(x) - oracle).abs() < 1e-12);
        // the tanh form stays close to the exact one
        assert!((gelu_tanh(1.0f64) - gelu(1.0f64)).abs() < 1e-3);
    }

    #[test]
    fn cosine_cases() {
        let u = [0.3f64, -1.2, 2.0];
        let neg: Vec<f64> = u.iter().map(|v| -v).collect();
        assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine(&u, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0f32, 0.0], &[0.0, 1.0]), Some(0.0));
        assert_eq!(cosine(&[0.0f32, 0.0], &[1.0, 1.0]), None);
        assert!((l2_norm(&[3.0f32, 4.0]) - 5.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in proptest::collection::vec(-50.0f32..50.0, 1..40), scale in 0.01f32..20.0) {
            let t = Tensor::new(vec![1, row.len()], row).unwrap();
            let s = softmax_rows(&t, scale).unwrap();
            let sum: f64 = s.data().iter().map(|v| *v as f64).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }

        #[test]
        fn cosine_is_bounded(
            u in proptest::collection::vec(-1e3f32..1e3, 6),
            v in proptest::collection::vec(-1e3f32..1e3, 6),
        ) {
            if let Some(c) = cosine(&u, &v) {
                prop_assert!((-1.0..=1.0).contains(&c));
            }
        }

        #[test]
        fn kernels_are_deterministic(x in proptest::collection::vec(-10.0f32..10.0, 12)) {
            let a = Tensor::new(vec![3, 4], x.clone()).unwrap();
            let w = Tensor::new(vec![3, 4], x.iter().rev().copied().collect()).unwrap();
            prop_assert_eq!(matmul_nt(&a, &w, None).unwrap(), matmul_nt(&a, &w, None).unwrap());
            prop_assert_eq!(matmul(&a, &Tensor::identity(4)).unwrap(), a);
        }
    }
}
