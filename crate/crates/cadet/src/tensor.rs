//! Minimal dense-tensor math with hand-written backward kernels.
//!
//! Tensors are row-major `Vec<T>` buffers with an explicit shape. Two scalar
//! types are supported: `f64` for gradient/oracle verification and `f32` for
//! training speed. Angles and other precision-critical intermediates are
//! computed in f64 regardless of `T`.

use crate::error::{Error, Result};
use crate::parallel::for_each_row;
use num_traits::Float;
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Scalar types tensors can hold.
pub trait Scalar:
    Float + Sum + Send + Sync + Debug + Display + Default + 'static
{
    const IS_F64: bool;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const IS_F64: bool = false;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const IS_F64: bool = true;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at2(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: T) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `self += scale * other`, shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor<T>, scale: T) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + scale * *b;
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T + Sync) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Error if any entry is NaN or infinite. `-inf` is not exempt here;
    /// mask sentinels live in score matrices that are never validated
    /// through this call.
    pub fn validate_finite(&self, context: &str) -> Result<()> {
        for &v in &self.data {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{context}: found {v}")));
            }
        }
        Ok(())
    }

    pub fn to_f64_tensor(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.as_f64()).collect(),
        }
    }
}

fn check_2d<T: Scalar>(t: &Tensor<T>, name: &str) -> Result<()> {
    if t.shape.len() != 2 {
        return Err(Error::Shape(format!(
            "{name} must be 2-D, got shape {:?}",
            t.shape
        )));
    }
    Ok(())
}

/// `C = A · B`. Accepts 2-D operands, or 3-D operands with an equal leading
/// batch dimension (the product is applied slice by slice).
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    match (a.shape.len(), b.shape.len()) {
        (2, 2) => {
            let (m, k) = (a.shape[0], a.shape[1]);
            let (k2, n) = (b.shape[0], b.shape[1]);
            if k != k2 {
                return Err(Error::Shape(format!(
                    "matmul inner dims disagree: {:?} vs {:?}",
                    a.shape, b.shape
                )));
            }
            let mut out = Tensor::zeros(&[m, n]);
            matmul_nn_into(&a.data, &b.data, &mut out.data, m, k, n);
            Ok(out)
        }
        (3, 3) => {
            if a.shape[0] != b.shape[0] {
                return Err(Error::Shape(format!(
                    "batched matmul leading dims disagree: {:?} vs {:?}",
                    a.shape, b.shape
                )));
            }
            let (bs, m, k) = (a.shape[0], a.shape[1], a.shape[2]);
            let (k2, n) = (b.shape[1], b.shape[2]);
            if k != k2 {
                return Err(Error::Shape(format!(
                    "batched matmul inner dims disagree: {:?} vs {:?}",
                    a.shape, b.shape
                )));
            }
            let mut out = Tensor::zeros(&[bs, m, n]);
            for s in 0..bs {
                matmul_nn_into(
                    &a.data[s * m * k..(s + 1) * m * k],
                    &b.data[s * k * n..(s + 1) * k * n],
                    &mut out.data[s * m * n..(s + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            Ok(out)
        }
        _ => Err(Error::Shape(format!(
            "matmul supports 2-D or batched 3-D operands, got {:?} and {:?}",
            a.shape, b.shape
        ))),
    }
}

/// `C = A · Bᵀ` for 2-D operands; used by backward passes.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_2d(a, "a")?;
    check_2d(b, "b")?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let (n, k2) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul_nt inner dims disagree: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let (ad, bd) = (&a.data, &b.data);
    for_each_row(&mut out.data, n, k * n, |i, row| {
        let arow = &ad[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &bd[j * k..(j + 1) * k];
            *o = dot(arow, brow);
        }
    });
    Ok(out)
}

/// `C = Aᵀ · B` for 2-D operands; used by backward passes.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_2d(a, "a")?;
    check_2d(b, "b")?;
    let (k, m) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul_tn leading dims disagree: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let (ad, bd) = (&a.data, &b.data);
    // out[i][j] = sum_t a[t][i] * b[t][j]; parallel over output rows keeps
    // each accumulator owned by one worker.
    for_each_row(&mut out.data, n, k * n, |i, row| {
        for t in 0..k {
            let ati = ad[t * m + i];
            if ati != T::zero() {
                let brow = &bd[t * n..(t + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o = *o + ati * bv;
                }
            }
        }
    });
    Ok(out)
}

fn matmul_nn_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], _m: usize, k: usize, n: usize) {
    for_each_row(out, n, k * n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (t, &av) in arow.iter().enumerate() {
            if av != T::zero() {
                let brow = &b[t * n..(t + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
    });
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut sum = T::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        sum = sum + x * y;
    }
    sum
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    check_2d(a, "a")?;
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..m {
        for j in 0..n {
            out.data[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(out)
}

/// Numerically stable element-wise logistic function. Saturates cleanly at
/// both tails instead of overflowing.
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        let t = (-x).exp();
        T::one() / (T::one() + t)
    } else {
        let t = x.exp();
        t / (T::one() + t)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// dL/dx given y = sigmoid(x) and upstream dL/dy.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(y.shape, dy.shape);
    Tensor {
        shape: y.shape.clone(),
        data: y
            .data
            .iter()
            .zip(dy.data.iter())
            .map(|(&yv, &dv)| dv * yv * (T::one() - yv))
            .collect(),
    }
}

pub fn silu_scalar<T: Scalar>(x: T) -> T {
    x * sigmoid_scalar(x)
}

/// dL/dx for y = x·σ(x): σ(x)·(1 + x·(1−σ(x))).
pub fn silu_backward_scalar<T: Scalar>(x: T, dy: T) -> T {
    let s = sigmoid_scalar(x);
    dy * (s * (T::one() + x * (T::one() - s)))
}

/// Row-wise softmax over the last dimension of a 2-D tensor. Entries equal to
/// `-inf` are treated as mask sentinels and map to exactly zero; a row with no
/// finite entry is an error. Stabilized by row-max subtraction.
pub fn softmax_rows<T: Scalar>(scores: &Tensor<T>) -> Result<Tensor<T>> {
    check_2d(scores, "scores")?;
    let (m, n) = (scores.shape[0], scores.shape[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        softmax_row(scores.row(i), out.row_mut(i)).map_err(|e| match e {
            Error::DegenerateRow { .. } => Error::DegenerateRow { row: i },
            other => other,
        })?;
    }
    Ok(out)
}

pub(crate) fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) -> Result<()> {
    let mut max = T::neg_infinity();
    for &v in row {
        if v.is_nan() {
            return Err(Error::NonFinite("softmax input".into()));
        }
        if v > max {
            max = v;
        }
    }
    if max == T::neg_infinity() {
        return Err(Error::DegenerateRow { row: 0 });
    }
    let mut denom = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        if v == T::neg_infinity() {
            *o = T::zero();
        } else {
            let e = (v - max).exp();
            *o = e;
            denom = denom + e;
        }
    }
    let inv = T::one() / denom;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
    Ok(())
}

/// dL/dscores given p = softmax(scores) row-wise and upstream dL/dp.
/// Masked entries (p == 0) receive zero gradient.
pub fn softmax_rows_backward<T: Scalar>(p: &Tensor<T>, dp: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(p.shape, dp.shape);
    let (m, n) = (p.shape[0], p.shape[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let prow = p.row(i);
        let drow = dp.row(i);
        let mut inner = T::zero();
        for (&pv, &dv) in prow.iter().zip(drow) {
            inner = inner + pv * dv;
        }
        for (o, (&pv, &dv)) in out.row_mut(i).iter_mut().zip(prow.iter().zip(drow)) {
            *o = pv * (dv - inner);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent element-wise oracle for matrix products.
    fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..k {
                    acc += a.at2(i, t) * b.at2(t, j);
                }
                out.set2(i, j, acc);
            }
        }
        out
    }

    fn lcg(state: &mut u64) -> f64 {
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*state >> 11) as f64) / ((1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn matmul_identity() {
        let i = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::from_vec(&[2, 2], vec![3.0, -1.0, 2.5, 7.0]).unwrap();
        assert_eq!(matmul(&i, &m).unwrap(), m);
    }

    #[test]
    fn matmul_row_times_col() {
        let a = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut s = 42u64;
        for &(m, k, n) in &[(3usize, 4usize, 2usize), (16, 16, 16), (1, 7, 5), (9, 1, 3)] {
            let a = Tensor::from_fn(&[m, k], |_| lcg(&mut s));
            let b = Tensor::from_fn(&[k, n], |_| lcg(&mut s));
            let got = matmul(&a, &b).unwrap();
            let want = matmul_oracle(&a, &b);
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!((g - w).abs() < 1e-12, "got {g}, want {w}");
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn matmul_batched_matches_per_slice() {
        let mut s = 7u64;
        let a = Tensor::from_fn(&[2, 3, 4], |_| lcg(&mut s));
        let b = Tensor::from_fn(&[2, 4, 2], |_| lcg(&mut s));
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        for slice in 0..2 {
            let a2 =
                Tensor::from_vec(&[3, 4], a.data()[slice * 12..(slice + 1) * 12].to_vec()).unwrap();
            let b2 =
                Tensor::from_vec(&[4, 2], b.data()[slice * 8..(slice + 1) * 8].to_vec()).unwrap();
            let want = matmul(&a2, &b2).unwrap();
            assert_eq!(&c.data()[slice * 6..(slice + 1) * 6], want.data());
        }
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let mut s = 3u64;
        let a = Tensor::from_fn(&[4, 3], |_| lcg(&mut s));
        let b = Tensor::from_fn(&[5, 3], |_| lcg(&mut s));
        let nt = matmul_nt(&a, &b).unwrap();
        let want = matmul(&a, &transpose(&b).unwrap()).unwrap();
        for (g, w) in nt.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
        let c = Tensor::from_fn(&[4, 6], |_| lcg(&mut s));
        let tn = matmul_tn(&a, &c).unwrap();
        let want = matmul(&transpose(&a).unwrap(), &c).unwrap();
        for (g, w) in tn.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        let y = sigmoid_scalar(2.0f64);
        assert!((y - 0.8807970779778823).abs() < 1e-15);
        // saturation without NaN
        let lo = sigmoid_scalar(-1000.0f64);
        assert!(lo >= 0.0 && lo < 1e-300);
        let hi = sigmoid_scalar(1000.0f64);
        assert_eq!(hi, 1.0);
    }

    #[test]
    fn softmax_uniform_and_masked() {
        let t = Tensor::from_vec(&[1, 3], vec![0.0f64, 0.0, 0.0]).unwrap();
        let p = softmax_rows(&t).unwrap();
        for &v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let t = Tensor::from_vec(&[1, 3], vec![5.0f64, f64::NEG_INFINITY, f64::NEG_INFINITY])
            .unwrap();
        let p = softmax_rows(&t).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_direct_evaluation() {
        let t = Tensor::from_vec(&[1, 3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let p = softmax_rows(&t).unwrap();
        let want = [0.09003, 0.24473, 0.66524];
        for (g, w) in p.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-5, "got {g}, want {w}");
        }
        let sum: f64 = p.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_all_masked_row_errors() {
        let t = Tensor::from_vec(&[2, 2], vec![0.0f64, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY])
            .unwrap();
        match softmax_rows(&t) {
            Err(Error::DegenerateRow { row }) => assert_eq!(row, 1),
            other => panic!("expected degenerate-row error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_with_sentinels() {
        let mut s = 11u64;
        for _ in 0..50 {
            let mut t = Tensor::from_fn(&[4, 8], |_| lcg(&mut s) * 10.0);
            // mask a few entries, keep at least one finite per row
            for i in 0..4 {
                for j in 0..7 {
                    if lcg(&mut s) > 0.3 {
                        t.set2(i, j, f64::NEG_INFINITY);
                    }
                }
            }
            let p = softmax_rows(&t).unwrap();
            for i in 0..4 {
                let sum: f64 = p.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                for j in 0..8 {
                    if t.at2(i, j) == f64::NEG_INFINITY {
                        assert_eq!(p.at2(i, j), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn validate_finite_catches_nan() {
        let mut t = Tensor::<f64>::zeros(&[2, 2]);
        t.data_mut()[3] = f64::NAN;
        assert!(t.validate_finite("unit").is_err());
    }
}
