//! Tiny row-major 3x3 kernels shared by the exact algebra layer and the tape.
//!
//! A matrix is nine consecutive scalars, `m[3*row + col]`. Everything here is
//! allocation-free so the tape can run these over channel-major slices.

use crate::Real;

/// Row-major 3x3 matrix.
pub type Mat3 = [Real; 9];

/// 3x3 identity.
pub const IDENTITY: Mat3 = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

/// `out = a * b` (matrix product). Slices must each hold 9 elements.
#[inline]
pub fn mul_into(a: &[Real], b: &[Real], out: &mut [Real]) {
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] =
                a[3 * r] * b[c] + a[3 * r + 1] * b[3 + c] + a[3 * r + 2] * b[6 + c];
        }
    }
}

/// Matrix product of two 3x3 matrices.
#[inline]
pub fn mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [0.0; 9];
    mul_into(a, b, &mut out);
    out
}

/// `out = a^T`.
#[inline]
pub fn transpose_into(a: &[Real], out: &mut [Real]) {
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = a[3 * c + r];
        }
    }
}

#[inline]
pub fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [0.0; 9];
    transpose_into(a, &mut out);
    out
}

#[inline]
pub fn trace(a: &[Real]) -> Real {
    a[0] + a[4] + a[8]
}

#[inline]
pub fn add(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| a[i] + b[i])
}

#[inline]
pub fn sub(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| a[i] - b[i])
}

#[inline]
pub fn scale(a: &Mat3, k: Real) -> Mat3 {
    std::array::from_fn(|i| k * a[i])
}

/// `s * Id`.
#[inline]
pub fn eye_scaled(s: Real) -> Mat3 {
    let mut out = [0.0; 9];
    out[0] = s;
    out[4] = s;
    out[8] = s;
    out
}

/// Sum of squared entries, i.e. `Tr(a^T a)`. This squared Frobenius form is
/// the norm used throughout the model.
#[inline]
pub fn frob_sq(a: &[Real]) -> Real {
    a.iter().map(|x| x * x).sum()
}

/// Outer product `v w^T`.
#[inline]
pub fn outer(v: &[Real; 3], w: &[Real; 3]) -> Mat3 {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = v[r] * w[c];
        }
    }
    out
}

/// Skew matrix holding a vector, laid out as
///
/// ```text
/// [[  0,   v_z, -v_y],
///  [-v_z,   0,   v_x],
///  [ v_y, -v_x,   0 ]]
/// ```
///
/// so the vector reads back from the upper triangle as
/// `v = (m[1][2], m[2][0], m[0][1])`.
#[inline]
pub fn skew(v: &[Real; 3]) -> Mat3 {
    [0.0, v[2], -v[1], -v[2], 0.0, v[0], v[1], -v[0], 0.0]
}

/// Inverse of [`skew`] for an exactly skew-symmetric matrix.
#[inline]
pub fn skew_vector(m: &[Real]) -> [Real; 3] {
    [m[5], m[6], m[1]]
}

/// `m v` (matrix times column vector).
#[inline]
pub fn matvec(m: &[Real], v: &[Real; 3]) -> [Real; 3] {
    [
        m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
        m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
        m[6] * v[0] + m[7] * v[1] + m[8] * v[2],
    ]
}

/// Largest absolute entry of `a - b`.
#[inline]
pub fn max_abs_diff(a: &[Real], b: &[Real]) -> Real {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, Real::max)
}
