//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Eigen-decomposition of a real matrix with conjugate pairs stored adjacently.
///
/// For every complex pair the member with positive imaginary part comes first
/// and its partner's eigenvector is the exact conjugate.
#[derive(Debug, Clone)]
pub struct RealEigen {
    pub values: Vec<Complex64>,
    pub vectors: DMatrix<Complex64>,
    /// `true` at index `i` when `values[i]` opens a conjugate pair.
    pub pair_start: Vec<bool>,
}

/// Spectral radius through the real Schur form.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    schur_eigenvalues(a).into_iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Eigenvalues read from the 1x1 / 2x2 diagonal blocks of the real Schur form.
///
/// Returns the values paired with the flag that marks the first member of a
/// conjugate pair; the orthogonal Schur basis is returned alongside.
fn schur_blocks(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, Vec<(Complex64, bool)>) {
    let n = a.nrows();
    let (z, t) = a.clone().schur().unpack();
    let scale = t.norm().max(f64::MIN_POSITIVE);
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        let has_block = i + 1 < n && t[(i + 1, i)].abs() > 1e-14 * scale;
        if !has_block {
            out.push((Complex64::new(t[(i, i)], 0.0), false));
            i += 1;
            continue;
        }
        let (p, q, r, s) = (t[(i, i)], t[(i, i + 1)], t[(i + 1, i)], t[(i + 1, i + 1)]);
        let mean = 0.5 * (p + s);
        let half = 0.5 * (p - s);
        let disc = half * half + q * r;
        if disc >= 0.0 {
            let root = disc.sqrt();
            out.push((Complex64::new(mean + root, 0.0), false));
            out.push((Complex64::new(mean - root, 0.0), false));
        } else {
            let im = (-disc).sqrt();
            out.push((Complex64::new(mean, im), true));
            out.push((Complex64::new(mean, -im), false));
        }
        i += 2;
    }
    (z, t, out)
}

pub fn schur_eigenvalues(a: &DMatrix<f64>) -> Vec<Complex64> {
    schur_blocks(a).2.into_iter().map(|(z, _)| z).collect()
}

fn to_complex(m: &DMatrix<f64>) -> DMatrix<Complex64> {
    m.map(|x| Complex64::new(x, 0.0))
}

/// Unit-norm null vector of a (numerically) singular complex matrix.
fn null_vector(m: &DMatrix<Complex64>) -> DVector<Complex64> {
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    // rows of v_t are conjugated right singular vectors
    let mut v = DVector::from_iterator(m.ncols(), v_t.row(idx).iter().map(|z| z.conj()));
    // fix the phase so the largest component is real positive
    let (kmax, _) = v.iter().enumerate().fold(
        (0, -1.0),
        |acc, (i, z)| if z.norm() > acc.1 { (i, z.norm()) } else { acc },
    );
    let phase = v[kmax] / v[kmax].norm();
    v.iter_mut().for_each(|z| *z /= phase);
    v
}

/// Full eigen-decomposition of a real matrix (assumed diagonalizable).
pub fn real_eigen(a: &DMatrix<f64>) -> RealEigen {
    let n = a.nrows();
    let (z, t, blocks) = schur_blocks(a);
    let tc = to_complex(&t);
    let zc = to_complex(&z);
    let mut vectors = DMatrix::<Complex64>::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    let mut pair_start = Vec::with_capacity(n);
    let mut k = 0;
    while k < n {
        let (lambda, opens_pair) = blocks[k];
        let mut shifted = tc.clone();
        for i in 0..n {
            shifted[(i, i)] -= lambda;
        }
        let w = null_vector(&shifted);
        let mut v = &zc * w;
        if !opens_pair {
            // real eigenvalue: the null vector is real up to rounding
            v.iter_mut().for_each(|c| c.im = 0.0);
            let norm = v.norm();
            v /= Complex64::new(norm, 0.0);
            vectors.set_column(k, &v);
            values.push(Complex64::new(lambda.re, 0.0));
            pair_start.push(false);
            k += 1;
        } else {
            vectors.set_column(k, &v);
            vectors.set_column(k + 1, &v.map(|c| c.conj()));
            values.push(lambda);
            values.push(lambda.conj());
            pair_start.push(true);
            pair_start.push(false);
            k += 2;
        }
    }
    RealEigen {
        values,
        vectors,
        pair_start,
    }
}

/// 2-norm condition number of a complex matrix.
pub fn condition_number(m: &DMatrix<Complex64>) -> f64 {
    let s = m.clone().singular_values();
    let max = s.iter().cloned().fold(0.0, f64::max);
    let min = s.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Dense LU solve with partial pivoting for a 4x4 system.
pub fn solve4(mut m: [[f64; 4]; 4], mut rhs: [f64; 4]) -> Result<[f64; 4]> {
    for col in 0..4 {
        let mut piv = col;
        let mut best = m[col][col].abs();
        for row in col + 1..4 {
            if m[row][col].abs() > best {
                best = m[row][col].abs();
                piv = row;
            }
        }
        if best < 1e-300 || !best.is_finite() {
            return Err(Error::Singular(format!("4x4 pivot {best:e} in column {col}")));
        }
        if piv != col {
            m.swap(piv, col);
            rhs.swap(piv, col);
        }
        let inv = 1.0 / m[col][col];
        for row in col + 1..4 {
            let f = m[row][col] * inv;
            if f != 0.0 {
                for k in col..4 {
                    m[row][k] -= f * m[col][k];
                }
                rhs[row] -= f * rhs[col];
            }
        }
    }
    let mut x = [0.0; 4];
    for row in (0..4).rev() {
        let mut acc = rhs[row];
        for k in row + 1..4 {
            acc -= m[row][k] * x[k];
        }
        x[row] = acc / m[row][row];
    }
    Ok(x)
}

/// Solves `L X = B` for lower-triangular `L`, overwriting `B`.
pub fn solve_lower_in_place(l: &DMatrix<f64>, b: &mut DMatrix<f64>) -> Result<()> {
    if l.solve_lower_triangular_mut(b) {
        Ok(())
    } else {
        Err(Error::Singular("lower-triangular factor has a zero diagonal".into()))
    }
}

/// Solves `Lᵀ X = B` for lower-triangular `L`, overwriting `B`.
pub fn solve_lower_transpose_in_place(l: &DMatrix<f64>, b: &mut DMatrix<f64>) -> Result<()> {
    if l.tr_solve_lower_triangular_mut(b) {
        Ok(())
    } else {
        Err(Error::Singular("lower-triangular factor has a zero diagonal".into()))
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Singular values sorted in descending order.
pub fn sorted_singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.clone().singular_values().iter().cloned().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    s
}

/// SVD with singular triplets in descending order: `(U, s, V)` with `M = U diag(s) Vᵀ`.
pub fn sorted_svd(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vt");
    let k = svd.singular_values.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut us = DMatrix::zeros(u.nrows(), k);
    let mut vs = DMatrix::zeros(v_t.ncols(), k);
    let mut s = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        us.set_column(dst, &u.column(src));
        vs.set_column(dst, &v_t.row(src).transpose());
        s.push(svd.singular_values[src]);
    }
    (us, s, vs)
}
