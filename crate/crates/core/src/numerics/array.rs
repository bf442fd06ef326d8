//! Dense row-major arrays of 64-bit reals.
//!
//! Everything downstream (calibrator, encoder, losses) is built from these.
//! Shapes are kept as explicit dimension lists; a scalar is shape `[1]`.

use serde::{Deserialize, Serialize};

use super::NumericsError;

/// A dense, row-major array with an explicit shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseArray {
    /// Builds an array, checking that `data` length matches the shape product.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::ShapeMismatch {
                context: "DenseArray::new",
                expected: shape.clone(),
                actual: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn zeros_like(other: &DenseArray) -> Self {
        Self::zeros(other.shape.clone())
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        Self::new(vec![rows, cols], data)
    }

    /// Identity matrix of side `n`.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self {
            shape: vec![n, n],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element array.
    ///
    /// Panics if the array has more than one element; callers use this only on
    /// nodes they created as scalars.
    pub fn as_scalar(&self) -> f64 {
        assert!(
            self.is_scalar(),
            "as_scalar on array of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn get(&self, idx: usize) -> f64 {
        self.data[idx]
    }

    /// 2D accessor for matrices.
    pub fn get2(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &DenseArray) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Elementwise map into a new array.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseArray {
        DenseArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combine with another array of identical shape.
    pub fn zip(&self, other: &DenseArray, f: impl Fn(f64, f64) -> f64) -> DenseArray {
        assert_eq!(
            self.shape, other.shape,
            "zip on mismatched shapes {:?} vs {:?}",
            self.shape, other.shape
        );
        DenseArray {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> DenseArray {
        self.map(|v| v * s)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &DenseArray) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    /// In-place `self += s * other`.
    pub fn add_scaled(&mut self, other: &DenseArray, s: f64) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += s * b;
        }
    }

    /// Matrix product of two 2D arrays.
    pub fn matmul(&self, other: &DenseArray) -> DenseArray {
        assert_eq!(self.shape.len(), 2, "matmul lhs must be 2D");
        assert_eq!(other.shape.len(), 2, "matmul rhs must be 2D");
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for (o, b) in dst.iter_mut().zip(row.iter()) {
                    *o += a * b;
                }
            }
        }
        DenseArray {
            shape: vec![m, n],
            data: out,
        }
    }

    /// `W x` for a 2D `W` of shape `[m, k]` and 1D `x` of length `k`.
    pub fn matvec(&self, x: &DenseArray) -> DenseArray {
        assert_eq!(self.shape.len(), 2, "matvec lhs must be 2D");
        let (m, k) = (self.shape[0], self.shape[1]);
        assert_eq!(x.len(), k, "matvec dims [{m},{k}] vs {}", x.len());
        let mut out = vec![0.0; m];
        for i in 0..m {
            out[i] = self.data[i * k..(i + 1) * k]
                .iter()
                .zip(x.data.iter())
                .map(|(a, b)| a * b)
                .sum();
        }
        DenseArray::vector(out)
    }

    /// `xᵀ W` for a 1D `x` of length `k` and 2D `W` of shape `[k, n]`.
    pub fn vecmat(x: &DenseArray, w: &DenseArray) -> DenseArray {
        assert_eq!(w.shape.len(), 2, "vecmat rhs must be 2D");
        let (k, n) = (w.shape[0], w.shape[1]);
        assert_eq!(x.len(), k, "vecmat dims {} vs [{k},{n}]", x.len());
        let mut out = vec![0.0; n];
        for p in 0..k {
            let a = x.data[p];
            if a == 0.0 {
                continue;
            }
            let row = &w.data[p * n..(p + 1) * n];
            for (o, b) in out.iter_mut().zip(row.iter()) {
                *o += a * b;
            }
        }
        DenseArray::vector(out)
    }

    pub fn transposed(&self) -> DenseArray {
        assert_eq!(self.shape.len(), 2, "transpose needs a 2D array");
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        DenseArray {
            shape: vec![n, m],
            data: out,
        }
    }

    /// Concatenation of 1D arrays.
    pub fn concat(parts: &[&DenseArray]) -> DenseArray {
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        DenseArray::vector(data)
    }

    /// Reinterprets the data under a new shape of the same total size.
    pub fn reshaped(&self, shape: Vec<usize>) -> DenseArray {
        let expected: usize = shape.iter().product();
        assert_eq!(expected, self.len(), "reshape {:?} -> {:?}", self.shape, shape);
        DenseArray {
            shape,
            data: self.data.clone(),
        }
    }
}

/// An L2-normalized vector on the unit hypersphere.
///
/// Construction goes through [`UnitVector::normalize`], which is the only
/// place allowed to divide by the input norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitVector(DenseArray);

impl UnitVector {
    /// L2-normalizes `v`. Errors with [`NumericsError::ZeroNorm`] below 1e-12.
    pub fn normalize(v: &DenseArray) -> Result<UnitVector, NumericsError> {
        let n = v.norm();
        if n < 1e-12 {
            return Err(NumericsError::ZeroNorm { norm: n });
        }
        let out = v.scaled(1.0 / n);
        debug_assert!(out.all_finite());
        Ok(UnitVector(out))
    }

    /// Wraps a vector that is already unit-norm (within 1e-6).
    pub fn from_unit(v: DenseArray) -> Result<UnitVector, NumericsError> {
        let n = v.norm();
        if (n - 1.0).abs() > 1e-6 {
            return Err(NumericsError::NotUnit { norm: n });
        }
        Ok(UnitVector(v))
    }

    pub fn as_array(&self) -> &DenseArray {
        &self.0
    }

    pub fn into_array(self) -> DenseArray {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &UnitVector) -> f64 {
        self.0.dot(&other.0)
    }
}

/// Clamp applied to a cosine before `acos`, bounding the slerp gradient near
/// collinear or antipodal pairs.
pub const COS_CLAMP: f64 = 1.0 - 1e-9;

/// Below this angle slerp switches to normalized linear interpolation; the two
/// formulas agree to O(Ω²) there.
pub const SLERP_MIN_ANGLE: f64 = 1e-4;

/// Angle in radians between two unit vectors, with the dot product clamped to
/// `[-1+1e-9, 1-1e-9]` before `arccos`.
pub fn angle(u: &UnitVector, v: &UnitVector) -> f64 {
    u.dot(v).clamp(-COS_CLAMP, COS_CLAMP).acos()
}

/// Spherical linear interpolation between unit vectors.
///
/// Falls back to normalized linear interpolation when the angle is below
/// [`SLERP_MIN_ANGLE`], which removes the sin(Ω) division singularity.
pub fn slerp(u: &UnitVector, v: &UnitVector, lambda: f64) -> UnitVector {
    let omega = angle(u, v);
    if omega < SLERP_MIN_ANGLE {
        let mixed = u
            .as_array()
            .scaled(1.0 - lambda)
            .zip(&v.as_array().scaled(lambda), |a, b| a + b);
        // u ≈ v here, so the mix cannot vanish for lambda in (0,1).
        return UnitVector::normalize(&mixed).expect("near-identical slerp inputs");
    }
    let sin_omega = omega.sin();
    let cu = ((1.0 - lambda) * omega).sin() / sin_omega;
    let cv = (lambda * omega).sin() / sin_omega;
    let out = u
        .as_array()
        .scaled(cu)
        .zip(&v.as_array().scaled(cv), |a, b| a + b);
    UnitVector(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(data: Vec<f64>) -> UnitVector {
        UnitVector::normalize(&DenseArray::vector(data)).unwrap()
    }

    #[test]
    fn normalize_three_four_five() {
        let u = unit(vec![3.0, 4.0]);
        assert!((u.as_array().get(0) - 0.6).abs() < 1e-15);
        assert!((u.as_array().get(1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_idempotent() {
        let u = unit(vec![0.3, -1.2, 2.0, 0.01]);
        let again = UnitVector::normalize(u.as_array()).unwrap();
        for (a, b) in u.as_array().iter().zip(again.as_array().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_axis_scaling() {
        let u = unit(vec![2.0, 0.0, 0.0, 0.0]);
        assert_eq!(u.as_array().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_zero_rejected() {
        let err = UnitVector::normalize(&DenseArray::vector(vec![0.0, 0.0])).unwrap_err();
        assert!(matches!(err, NumericsError::ZeroNorm { .. }));
    }

    #[test]
    fn angle_axes() {
        let e1 = unit(vec![1.0, 0.0, 0.0]);
        let e2 = unit(vec![0.0, 1.0, 0.0]);
        let neg = unit(vec![-1.0, 0.0, 0.0]);
        assert!(angle(&e1, &e1) < 1e-4);
        assert!((angle(&e1, &e2) - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert!((angle(&e1, &neg) - std::f64::consts::PI).abs() < 1e-4);
    }

    #[test]
    fn slerp_midpoint_of_axes() {
        let e1 = unit(vec![1.0, 0.0]);
        let e2 = unit(vec![0.0, 1.0]);
        let mid = slerp(&e1, &e2, 0.5);
        let c = 1.0 / 2.0_f64.sqrt();
        assert!((mid.as_array().get(0) - c).abs() < 1e-12);
        assert!((mid.as_array().get(1) - c).abs() < 1e-12);
    }

    #[test]
    fn slerp_endpoints() {
        let u = unit(vec![1.0, 2.0, -0.5]);
        let v = unit(vec![-0.3, 0.7, 1.1]);
        let near_u = slerp(&u, &v, 1e-9);
        let near_v = slerp(&u, &v, 1.0 - 1e-9);
        for (a, b) in near_u.as_array().iter().zip(u.as_array().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in near_v.as_array().iter().zip(v.as_array().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_matches_manual() {
        let a = DenseArray::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = DenseArray::matrix(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let a = DenseArray::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(a.transposed().transposed(), a);
    }

    #[test]
    fn vecmat_agrees_with_matvec_of_transpose() {
        let w = DenseArray::matrix(3, 4, (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let x = DenseArray::vector(vec![0.5, -1.0, 2.0]);
        let a = DenseArray::vecmat(&x, &w);
        let b = w.transposed().matvec(&x);
        for (p, q) in a.iter().zip(b.iter()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
