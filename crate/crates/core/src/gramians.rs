//! Controllability and observability gramians.
//!
//! `P` solves `A P Aᵀ - P + B Bᵀ = 0` and `Q` solves `Aᵀ Q A - Q + Cᵀ C = 0`.
//! For the rotation parametrization `A` is block diagonal, so the equation
//! splits into `q` 2x2 Lyapunov equations on the diagonal blocks and
//! `q(q-1)/2` 2x2 Sylvester equations above the diagonal; the lower triangle
//! is filled by mirroring. The Kronecker solver is kept as an oracle for
//! small systems.

use std::sync::OnceLock;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::lti::{RotationBlock, RotationSsm};

/// 2x2 matrix stored row-major.
pub type Mat2 = [[f64; 2]; 2];

/// Largest state dimension accepted by [`solve_lyapunov_naive`].
pub const NAIVE_LIMIT: usize = 32;

/// Retention clamp applied inside gramian computations.
pub const RHO_CLAMP: f64 = 1.0 - 1e-6;

/// Default relative jitter for factorizing gramians.
pub const DEFAULT_JITTER: f64 = 1e-12;

/// Gramians of one system with lazily computed Cholesky factors.
#[derive(Debug)]
pub struct GramianPair {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    chol_p: OnceLock<Result<DMatrix<f64>>>,
    chol_q: OnceLock<Result<DMatrix<f64>>>,
}

impl GramianPair {
    pub fn new(p: DMatrix<f64>, q: DMatrix<f64>) -> Self {
        Self {
            p,
            q,
            chol_p: OnceLock::new(),
            chol_q: OnceLock::new(),
        }
    }

    /// Block-structured gramians of a rotation layer.
    pub fn of_rotation(params: &RotationSsm) -> Result<Self> {
        Ok(Self::new(
            controllability_gramian_block(params)?,
            observability_gramian_block(params)?,
        ))
    }

    /// Lower-triangular `R` with `R Rᵀ = P`.
    pub fn chol_p(&self) -> Result<&DMatrix<f64>> {
        self.chol_p
            .get_or_init(|| cholesky_psd(&self.p, DEFAULT_JITTER))
            .as_ref()
            .map_err(Clone::clone)
    }

    /// Lower-triangular `S` with `S Sᵀ = Q`.
    pub fn chol_q(&self) -> Result<&DMatrix<f64>> {
        self.chol_q
            .get_or_init(|| cholesky_psd(&self.q, DEFAULT_JITTER))
            .as_ref()
            .map_err(Clone::clone)
    }
}

/// `‖A X Aᵀ - X + M‖_F / ‖M‖_F` (or with `A` transposed).
pub fn lyapunov_residual(a: &DMatrix<f64>, x: &DMatrix<f64>, m: &DMatrix<f64>, transpose: bool) -> f64 {
    let r = if transpose {
        a.transpose() * x * a - x + m
    } else {
        a * x * a.transpose() - x + m
    };
    let scale = m.norm();
    if scale == 0.0 {
        r.norm()
    } else {
        r.norm() / scale
    }
}

/// Solves `A X Aᵀ - X + M = 0` through `vec(X) = -(A⊗A - I)⁻¹ vec(M)`.
pub fn solve_lyapunov_naive(a: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || m.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "Lyapunov operands {:?} and {:?}",
            a.shape(),
            m.shape()
        )));
    }
    if n > NAIVE_LIMIT {
        return Err(Error::OracleTooLarge { n, limit: NAIVE_LIMIT });
    }
    let radius = linalg::spectral_radius(a);
    // the eigenvalues of A⊗A - I are λᵢλⱼ - 1, so 1 - ρ² bounds the smallest one
    let cond_estimate = (1.0 + radius * radius) / (1.0 - radius * radius).max(0.0);
    if radius >= 1.0 || !(cond_estimate <= 1e8) {
        return Err(Error::Unstable(radius));
    }
    let mut k = a.kronecker(a);
    for i in 0..n * n {
        k[(i, i)] -= 1.0;
    }
    let rhs = DMatrix::from_column_slice(n * n, 1, m.as_slice()) * -1.0;
    let sol = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("Kronecker Lyapunov system".into()))?;
    let x = DMatrix::from_column_slice(n, n, sol.as_slice());
    Ok(linalg::symmetrize(&x))
}

/// Solves `Aᵢ X Aⱼᵀ - X + M = 0` for 2x2 blocks with a direct 4x4 solve.
pub fn solve_sylvester_2x2(ai: &Mat2, aj: &Mat2, mij: &Mat2) -> Result<Mat2> {
    // unknown ordering x = [X00, X01, X10, X11]; equation (r, s) at row 2r + s
    let mut k = [[0.0; 4]; 4];
    for r in 0..2 {
        for s in 0..2 {
            let row = 2 * r + s;
            for kk in 0..2 {
                for l in 0..2 {
                    k[row][2 * kk + l] = ai[r][kk] * aj[s][l];
                }
            }
            k[row][row] -= 1.0;
        }
    }
    let rhs = [-mij[0][0], -mij[0][1], -mij[1][0], -mij[1][1]];
    let x = linalg::solve4(k, rhs)?;
    Ok([[x[0], x[1]], [x[2], x[3]]])
}

fn clamped_blocks(params: &RotationSsm) -> Vec<Mat2> {
    params
        .blocks()
        .into_iter()
        .map(|b| {
            let blk = RotationBlock {
                rho: b.rho.clamp(-RHO_CLAMP, RHO_CLAMP),
                alpha: b.alpha,
            };
            let [a11, a12, a21, a22] = blk.matrix();
            [[a11, a12], [a21, a22]]
        })
        .collect()
}

/// The 2x2 blocks of a rotation layer as used by the gramian solvers (clamped `ρ`).
pub fn solver_blocks(params: &RotationSsm) -> Vec<Mat2> {
    clamped_blocks(params)
}

fn transpose2(m: &Mat2) -> Mat2 {
    [[m[0][0], m[1][0]], [m[0][1], m[1][1]]]
}

fn block_of(m: &DMatrix<f64>, i: usize, j: usize) -> Mat2 {
    let (r, c) = (2 * i, 2 * j);
    [[m[(r, c)], m[(r, c + 1)]], [m[(r + 1, c)], m[(r + 1, c + 1)]]]
}

/// Solves `A X Aᵀ - X + M = 0` (or `Aᵀ X A - X + M = 0` when `transpose`) for
/// block-diagonal `A` given by its 2x2 blocks and symmetric `M`.
///
/// Only blocks with `i <= j` are solved; the result is mirrored so it is exactly symmetric.
pub fn solve_block_lyapunov(blocks: &[Mat2], m: &DMatrix<f64>, transpose: bool) -> Result<DMatrix<f64>> {
    let q = blocks.len();
    let n = 2 * q;
    if m.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "right-hand side {:?}, expected {:?}",
            m.shape(),
            (n, n)
        )));
    }
    let eff: Vec<Mat2> = if transpose {
        blocks.iter().map(transpose2).collect()
    } else {
        blocks.to_vec()
    };
    let solve_row = |i: usize| -> Result<Vec<Mat2>> {
        (i..q)
            .map(|j| solve_sylvester_2x2(&eff[i], &eff[j], &block_of(m, i, j)))
            .collect()
    };
    let rows: Vec<Vec<Mat2>> = if q >= 64 {
        (0..q).into_par_iter().map(solve_row).collect::<Result<_>>()?
    } else {
        (0..q).map(solve_row).collect::<Result<_>>()?
    };
    let mut x = DMatrix::zeros(n, n);
    for (i, row) in rows.iter().enumerate() {
        for (offset, blk) in row.iter().enumerate() {
            let j = i + offset;
            let (r, c) = (2 * i, 2 * j);
            for a in 0..2 {
                for b in 0..2 {
                    x[(r + a, c + b)] = blk[a][b];
                    x[(c + b, r + a)] = blk[a][b];
                }
            }
        }
    }
    Ok(x)
}

/// Controllability gramian `P` of a rotation layer via per-block solves.
pub fn controllability_gramian_block(params: &RotationSsm) -> Result<DMatrix<f64>> {
    let b = params.b_full();
    let bbt = &b * b.transpose();
    solve_block_lyapunov(&clamped_blocks(params), &bbt, false)
}

/// Observability gramian `Q` of a rotation layer via per-block solves.
pub fn observability_gramian_block(params: &RotationSsm) -> Result<DMatrix<f64>> {
    let ctc = params.c.transpose() * &params.c;
    solve_block_lyapunov(&clamped_blocks(params), &ctc, true)
}

/// Lower-triangular `F` with `F Fᵀ ≈ M` for symmetric positive semidefinite `M`.
///
/// Positive definite inputs use the plain Cholesky factorization. Semidefinite
/// inputs are factorized through the eigen-decomposition with negative
/// eigenvalues within `jitter · ‖M‖_F` clipped to zero, and the resulting
/// factor is triangularized by a QR decomposition.
pub fn cholesky_psd(m: &DMatrix<f64>, jitter: f64) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::Dimension(format!("Cholesky of non-square {:?}", m.shape())));
    }
    let scale = m.norm();
    if scale == 0.0 {
        return Ok(DMatrix::zeros(n, n));
    }
    if !scale.is_finite() {
        return Err(Error::NonFinite("Cholesky input".into()));
    }
    let sym = linalg::symmetrize(m);
    if let Some(ch) = sym.clone().cholesky() {
        let l = ch.l();
        // a PD factorization can still lose accuracy on nearly singular input
        let resid = (&l * l.transpose() - &sym).norm();
        if resid <= 10.0 * jitter * scale && (0..n).all(|i| l[(i, i)] > 0.0) {
            return Ok(l);
        }
    }
    let eig = sym.symmetric_eigen();
    let tol = jitter * scale;
    let mut factor = eig.eigenvectors.clone();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda < -tol {
            return Err(Error::Indefinite {
                index: j,
                pivot: lambda,
            });
        }
        let s = lambda.max(0.0).sqrt();
        factor.column_mut(j).scale_mut(s);
    }
    // factor factorᵀ = M₊; QR of factorᵀ gives factor = Rᵀ Qᵀ, hence M₊ = Rᵀ R
    let r = factor.transpose().qr().r();
    let mut l = r.transpose();
    for j in 0..n {
        if l[(j, j)] < 0.0 {
            l.column_mut(j).neg_mut();
        }
    }
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::{realize, rho_to_raw};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn naive_zero_dynamics_returns_rhs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random_matrix(&mut rng, 3, 2);
        let m = &b * b.transpose();
        let x = solve_lyapunov_naive(&DMatrix::zeros(3, 3), &m).unwrap();
        assert!(rel(&x, &m) < 1e-15);
    }

    #[test]
    fn naive_scalar_closed_form() {
        let x = solve_lyapunov_naive(&DMatrix::from_element(1, 1, 0.5), &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert!((x[(0, 0)] - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn naive_random_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a0 = random_matrix(&mut rng, 6, 6);
        let a = &a0 * (0.9 / linalg::spectral_radius(&a0));
        let g = random_matrix(&mut rng, 6, 6);
        let m = &g * g.transpose();
        let x = solve_lyapunov_naive(&a, &m).unwrap();
        assert!(lyapunov_residual(&a, &x, &m, false) <= 1e-10);
    }

    #[test]
    fn naive_guards() {
        let big = DMatrix::zeros(NAIVE_LIMIT + 1, NAIVE_LIMIT + 1);
        assert!(matches!(
            solve_lyapunov_naive(&big, &big),
            Err(Error::OracleTooLarge { .. })
        ));
        let unstable = DMatrix::from_element(1, 1, 1.0);
        assert!(matches!(
            solve_lyapunov_naive(&unstable, &unstable),
            Err(Error::Unstable(_))
        ));
    }

    #[test]
    fn sylvester_zero_blocks() {
        let z = [[0.0; 2]; 2];
        let m = [[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(solve_sylvester_2x2(&z, &z, &m).unwrap(), m);
    }

    #[test]
    fn sylvester_matches_naive_on_equal_blocks() {
        let blk = RotationBlock { rho: 0.7, alpha: 1.3 }.matrix();
        let a2 = [[blk[0], blk[1]], [blk[2], blk[3]]];
        let m = [[2.0, 0.5], [0.5, 1.0]];
        let x = solve_sylvester_2x2(&a2, &a2, &m).unwrap();
        let a = DMatrix::from_row_slice(2, 2, &blk);
        let md = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let xn = solve_lyapunov_naive(&a, &md).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert!((x[r][c] - xn[(r, c)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sylvester_near_resonance_stays_finite() {
        let blk = RotationBlock {
            rho: 0.9,
            alpha: std::f64::consts::PI - 1e-3,
        }
        .matrix();
        let a2 = [[blk[0], blk[1]], [blk[2], blk[3]]];
        let id = [[1.0, 0.0], [0.0, 1.0]];
        let x = solve_sylvester_2x2(&a2, &a2, &id).unwrap();
        let norm = x.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm.is_finite());
        // for A Aᵀ = ρ² I the solution is I / (1 - ρ²)
        let expected = 1.0 / (1.0 - 0.81);
        assert!((x[0][0] - expected).abs() < 1e-10 && x[0][1].abs() < 1e-10);
        let a = DMatrix::from_row_slice(2, 2, &blk);
        let xn = solve_lyapunov_naive(&a, &DMatrix::identity(2, 2)).unwrap();
        assert!((x[1][1] - xn[(1, 1)]).abs() < 1e-10);
    }

    #[test]
    fn block_single_pair_matches_naive() {
        let params = RotationSsm::random(1, 3, 4);
        let dense = realize(&params);
        let p_block = controllability_gramian_block(&params).unwrap();
        let p_naive = solve_lyapunov_naive(&dense.a, &(&dense.b * dense.b.transpose())).unwrap();
        assert!(rel(&p_block, &p_naive) < 1e-12);
        let q_block = observability_gramian_block(&params).unwrap();
        let q_naive = solve_lyapunov_naive(&dense.a.transpose(), &(dense.c.transpose() * &dense.c)).unwrap();
        assert!(rel(&q_block, &q_naive) < 1e-12);
    }

    #[test]
    fn block_matches_naive_q4() {
        let params = RotationSsm::random(4, 3, 5);
        let dense = realize(&params);
        let p_block = controllability_gramian_block(&params).unwrap();
        let p_naive = solve_lyapunov_naive(&dense.a, &(&dense.b * dense.b.transpose())).unwrap();
        assert!(rel(&p_block, &p_naive) <= 1e-10);
        assert_eq!(&p_block - p_block.transpose(), DMatrix::zeros(8, 8));
    }

    #[test]
    fn structural_column_only() {
        let mut params = RotationSsm::random(3, 2, 9);
        params.b_learn.fill(0.0);
        params.alpha_raw = vec![-1.0, 0.0, 1.0];
        let dense = realize(&params);
        let p_block = controllability_gramian_block(&params).unwrap();
        let p_naive = solve_lyapunov_naive(&dense.a, &(&dense.b * dense.b.transpose())).unwrap();
        assert!(rel(&p_block, &p_naive) <= 1e-10);
    }

    #[test]
    fn zero_output_gives_zero_observability() {
        let mut params = RotationSsm::random(3, 2, 2);
        params.c.fill(0.0);
        let q = observability_gramian_block(&params).unwrap();
        assert_eq!(q, DMatrix::zeros(6, 6));
    }

    #[test]
    fn clamping_keeps_near_unit_retention_finite() {
        let mut params = RotationSsm::random(2, 2, 3);
        params.rho_raw = vec![rho_to_raw(1.0 - 1e-14), 30.0];
        let p = controllability_gramian_block(&params).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cholesky_trivial_cases() {
        let id = DMatrix::<f64>::identity(4, 4);
        assert!((cholesky_psd(&id, DEFAULT_JITTER).unwrap() - &id).norm() < 1e-15);
        let z = DMatrix::<f64>::zeros(4, 4);
        assert_eq!(cholesky_psd(&z, DEFAULT_JITTER).unwrap(), z);
    }

    #[test]
    fn cholesky_reconstructs_gram_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = random_matrix(&mut rng, 8, 8);
        let m = &g * g.transpose();
        let f = cholesky_psd(&m, DEFAULT_JITTER).unwrap();
        assert!((&f * f.transpose() - &m).norm() <= 1e-10 * m.norm());
        assert!(f.upper_triangle().norm() - f.diagonal().norm() < 1e-15);
    }

    #[test]
    fn cholesky_semidefinite_is_lower_triangular() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = random_matrix(&mut rng, 6, 2);
        let m = &g * g.transpose();
        let f = cholesky_psd(&m, DEFAULT_JITTER).unwrap();
        assert!((&f * f.transpose() - &m).norm() <= 10.0 * DEFAULT_JITTER * m.norm());
        for i in 0..6 {
            for j in i + 1..6 {
                assert_eq!(f[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            cholesky_psd(&m, DEFAULT_JITTER),
            Err(Error::Indefinite { .. })
        ));
    }
}
