//! Hankel singular values, the Hankel nuclear norm and its analytic gradient.
//!
//! The singular values are computed from Cholesky factors `R Rᵀ = P`,
//! `S Sᵀ = Q` as the singular values of `Sᵀ R`, which equal `sqrt(λ(PQ))`
//! while staying real and nonnegative.
//!
//! For the gradient of `f = ‖Sᵀ R‖_*` with `Sᵀ R = Φ Σ Ψᵀ` we use
//!
//! ```text
//! ∂f/∂P = ½ R⁻ᵀ Ψ Φᵀ Sᵀ        ∂f/∂Q = ½ S⁻ᵀ Φ Ψᵀ Rᵀ
//! ```
//!
//! (both symmetric), which only involves the polar factor `Φ Ψᵀ` and is
//! therefore well defined at repeated singular values. The gramian adjoints
//! are discrete Lyapunov solves with the transposed coefficient, handled by
//! the same block solver as the forward gramians.

use std::f64::consts::FRAC_PI_2;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gramians::{self, Mat2, RHO_CLAMP};
use crate::linalg;
use crate::lti::{realize, RotationSsm};

/// Relative floor below which singular values are reported as zero.
pub const HSV_FLOOR: f64 = 1e-14;

/// Per-layer Hankel singular values.
#[derive(Debug, Clone, PartialEq)]
pub struct HsvReport {
    pub sigmas: Vec<Vec<f64>>,
    pub energies: Vec<f64>,
    pub layer_dims: Vec<usize>,
}

impl HsvReport {
    pub fn from_sigmas(sigmas: Vec<Vec<f64>>) -> Self {
        let energies = sigmas.iter().map(|s| s.iter().sum()).collect();
        let layer_dims = sigmas.iter().map(Vec::len).collect();
        Self {
            sigmas,
            energies,
            layer_dims,
        }
    }

    pub fn layers(&self) -> usize {
        self.sigmas.len()
    }

    /// `Σ_{i>r} σᵢ` for layer `layer`.
    pub fn tail(&self, layer: usize, r: usize) -> f64 {
        self.sigmas[layer].iter().skip(r).sum()
    }
}

/// Gradient of the Hankel nuclear norm of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RegGradient {
    pub d_rho_raw: Vec<f64>,
    pub d_alpha_raw: Vec<f64>,
    /// Gradient for the learnable columns of `B` only.
    pub d_b: DMatrix<f64>,
    pub d_c: DMatrix<f64>,
}

impl RegGradient {
    pub fn zeros_like(layer: &RotationSsm) -> Self {
        Self {
            d_rho_raw: vec![0.0; layer.q()],
            d_alpha_raw: vec![0.0; layer.q()],
            d_b: DMatrix::zeros(layer.n(), layer.p() - 1),
            d_c: DMatrix::zeros(layer.p(), layer.n()),
        }
    }
}

/// Which Lyapunov solver backs the gramians.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GramianSolver {
    #[default]
    Block,
    /// Kronecker oracle, only for `n <= 32`.
    Naive,
}

fn apply_floor(mut s: Vec<f64>) -> Vec<f64> {
    let top = s.first().copied().unwrap_or(0.0);
    for v in s.iter_mut() {
        if *v < HSV_FLOOR * top || *v < 0.0 {
            *v = 0.0;
        }
    }
    s
}

/// Hankel singular values from the Cholesky factors of `P` and `Q`, descending.
pub fn hsv_from_factors(r: &DMatrix<f64>, s: &DMatrix<f64>) -> Vec<f64> {
    apply_floor(linalg::sorted_singular_values(&(s.transpose() * r)))
}

/// Hankel singular values of a system with gramians `P` and `Q`, descending.
pub fn hankel_singular_values(p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<Vec<f64>> {
    let r = gramians::cholesky_psd(p, gramians::DEFAULT_JITTER)?;
    let s = gramians::cholesky_psd(q, gramians::DEFAULT_JITTER)?;
    Ok(hsv_from_factors(&r, &s))
}

/// Hankel singular values of a rotation layer through the block gramian path.
pub fn layer_hsv(layer: &RotationSsm) -> Result<Vec<f64>> {
    let pair = gramians::GramianPair::of_rotation(layer)?;
    Ok(hsv_from_factors(pair.chol_p()?, pair.chol_q()?))
}

pub fn hsv_report(layers: &[RotationSsm]) -> Result<HsvReport> {
    let sigmas = layers.iter().map(layer_hsv).collect::<Result<Vec<_>>>()?;
    Ok(HsvReport::from_sigmas(sigmas))
}

/// Sum of all Hankel singular values over all layers.
pub fn hankel_nuclear_norm(layers: &[RotationSsm]) -> Result<f64> {
    layers.iter().map(|l| layer_hsv(l).map(|s| s.iter().sum::<f64>())).sum()
}

/// Factor used on the gradient path: it must be invertible.
fn invertible_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let sym = linalg::symmetrize(m);
    if let Some(ch) = sym.clone().cholesky() {
        return Ok(ch.unpack());
    }
    let shift = gramians::DEFAULT_JITTER * sym.norm().max(f64::MIN_POSITIVE);
    (sym + DMatrix::identity(n, n) * shift)
        .cholesky()
        .map(|c| c.unpack())
        .ok_or_else(|| Error::Singular("gramian is not positive definite even after jitter".into()))
}

fn block_diag_dense(blocks: &[Mat2]) -> DMatrix<f64> {
    let n = 2 * blocks.len();
    let mut a = DMatrix::zeros(n, n);
    for (i, b) in blocks.iter().enumerate() {
        let k = 2 * i;
        a[(k, k)] = b[0][0];
        a[(k, k + 1)] = b[0][1];
        a[(k + 1, k)] = b[1][0];
        a[(k + 1, k + 1)] = b[1][1];
    }
    a
}

/// `X · blockdiag(blocks)` in O(n²).
fn mul_block_diag_right(x: &DMatrix<f64>, blocks: &[Mat2]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    for (j, b) in blocks.iter().enumerate() {
        let c = 2 * j;
        for r in 0..x.nrows() {
            let (x0, x1) = (x[(r, c)], x[(r, c + 1)]);
            out[(r, c)] = x0 * b[0][0] + x1 * b[1][0];
            out[(r, c + 1)] = x0 * b[0][1] + x1 * b[1][1];
        }
    }
    out
}

/// Diagonal 2x2 blocks of `X Y`.
fn diag_blocks_of_product(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Vec<Mat2> {
    let q = x.nrows() / 2;
    (0..q)
        .map(|i| {
            let k = 2 * i;
            let mut out = [[0.0; 2]; 2];
            for (a, row) in out.iter_mut().enumerate() {
                for (b, v) in row.iter_mut().enumerate() {
                    *v = x.row(k + a).dot(&y.column(k + b).transpose());
                }
            }
            out
        })
        .collect()
}

/// Value of the Hankel nuclear norm of one layer and its gradient.
pub fn reg_value_and_gradient(layer: &RotationSsm) -> Result<(f64, RegGradient)> {
    reg_value_and_gradient_with(layer, GramianSolver::Block)
}

pub fn reg_value_and_gradient_with(layer: &RotationSsm, solver: GramianSolver) -> Result<(f64, RegGradient)> {
    let blocks = gramians::solver_blocks(layer);
    let b = layer.b_full();
    let c = &layer.c;
    let bbt = &b * b.transpose();
    let ctc = c.transpose() * c;
    let dense_a = match solver {
        GramianSolver::Block => None,
        GramianSolver::Naive => Some(block_diag_dense(&blocks)),
    };
    // forward and adjoint Lyapunov solves; `transpose` selects Aᵀ X A - X + M = 0
    let lyap = |m: &DMatrix<f64>, transpose: bool| -> Result<DMatrix<f64>> {
        match &dense_a {
            None => gramians::solve_block_lyapunov(&blocks, m, transpose),
            Some(a) if transpose => gramians::solve_lyapunov_naive(&a.transpose(), m),
            Some(a) => gramians::solve_lyapunov_naive(a, m),
        }
    };
    let p = lyap(&bbt, false)?;
    let q = lyap(&ctc, true)?;

    let r = invertible_factor(&p)?;
    let s = invertible_factor(&q)?;
    let (phi, sigma, psi) = linalg::sorted_svd(&(s.transpose() * &r));
    let value: f64 = sigma.iter().sum();
    if !value.is_finite() {
        return Err(Error::NonFinite("Hankel nuclear norm".into()));
    }

    // dP = ½ R⁻ᵀ Ψ Φᵀ Sᵀ, dQ = ½ S⁻ᵀ Φ Ψᵀ Rᵀ
    let mut grad_p = &psi * phi.transpose() * s.transpose();
    linalg::solve_lower_transpose_in_place(&r, &mut grad_p)?;
    let grad_p = linalg::symmetrize(&grad_p) * 0.5;
    let mut grad_q = &phi * psi.transpose() * r.transpose();
    linalg::solve_lower_transpose_in_place(&s, &mut grad_q)?;
    let grad_q = linalg::symmetrize(&grad_q) * 0.5;

    // adjoints: Aᵀ Λ A - Λ + dP = 0 and A Λ̃ Aᵀ - Λ̃ + dQ = 0
    let lam = lyap(&grad_p, true)?;
    let lam_t = lyap(&grad_q, false)?;

    let d_b_full = &lam * &b * 2.0;
    let d_c = c * &lam_t * 2.0;

    // dA = 2 Λ A P + 2 Q A Λ̃, only the diagonal blocks are needed
    let lam_a = mul_block_diag_right(&lam, &blocks);
    let q_a = mul_block_diag_right(&q, &blocks);
    let g1 = diag_blocks_of_product(&lam_a, &p);
    let g2 = diag_blocks_of_product(&q_a, &lam_t);

    let qn = layer.q();
    let mut d_rho_raw = vec![0.0; qn];
    let mut d_alpha_raw = vec![0.0; qn];
    for i in 0..qn {
        let rho = layer.rho_raw[i].tanh();
        let ta = layer.alpha_raw[i].tanh();
        let alpha = FRAC_PI_2 * (ta + 1.0);
        let rho_eff = rho.clamp(-RHO_CLAMP, RHO_CLAMP);
        let (sn, cs) = alpha.sin_cos();
        let g = [
            [2.0 * (g1[i][0][0] + g2[i][0][0]), 2.0 * (g1[i][0][1] + g2[i][0][1])],
            [2.0 * (g1[i][1][0] + g2[i][1][0]), 2.0 * (g1[i][1][1] + g2[i][1][1])],
        ];
        // A = ρ [[c, s], [-s, c]]
        let d_rho = g[0][0] * cs + g[0][1] * sn - g[1][0] * sn + g[1][1] * cs;
        let d_alpha = rho_eff * (-g[0][0] * sn + g[0][1] * cs - g[1][0] * cs - g[1][1] * sn);
        d_rho_raw[i] = if rho.abs() > RHO_CLAMP {
            0.0
        } else {
            d_rho * (1.0 - rho * rho)
        };
        d_alpha_raw[i] = d_alpha * FRAC_PI_2 * (1.0 - ta * ta);
    }
    let p_in = layer.p();
    let d_b = d_b_full.columns(1, p_in - 1).into_owned();
    Ok((
        value,
        RegGradient {
            d_rho_raw,
            d_alpha_raw,
            d_b,
            d_c,
        },
    ))
}

/// Sorted `sqrt(λ(PQ))` from a dense nonsymmetric eigensolver (reference route).
pub fn hsv_eigen_route(p: &DMatrix<f64>, q: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = linalg::schur_eigenvalues(&(p * q))
        .into_iter()
        .map(|z| z.re.max(0.0).sqrt())
        .collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}

/// Hankel singular values of a layer through the dense realization and the Kronecker solver.
pub fn layer_hsv_naive(layer: &RotationSsm) -> Result<Vec<f64>> {
    let dense = realize(layer);
    let p = gramians::solve_lyapunov_naive(&dense.a, &(&dense.b * dense.b.transpose()))?;
    let q = gramians::solve_lyapunov_naive(&dense.a.transpose(), &(dense.c.transpose() * &dense.c))?;
    hankel_singular_values(&p, &q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::{alpha_to_raw, rho_to_raw};

    fn scalar_like(a: f64, c: f64) -> RotationSsm {
        RotationSsm::new(
            vec![rho_to_raw(a)],
            vec![alpha_to_raw(0.0)],
            DMatrix::zeros(2, 0),
            DMatrix::from_row_slice(1, 2, &[c, 0.0]),
            vec![0.0],
        )
        .unwrap()
    }

    #[test]
    fn scalar_closed_form() {
        let s = layer_hsv(&scalar_like(0.5, 1.0)).unwrap();
        assert!((s[0] - 4.0 / 3.0).abs() < 1e-14);
        assert_eq!(s[1], 0.0);
        let p = DMatrix::from_element(1, 1, 4.0 / 3.0);
        let direct = hankel_singular_values(&p, &p).unwrap();
        assert!((direct[0] - 4.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn zero_observability_gives_zero_sigmas() {
        let p = DMatrix::<f64>::identity(3, 3);
        let s = hankel_singular_values(&p, &DMatrix::zeros(3, 3)).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nuclear_norm_is_additive() {
        let layer = scalar_like(0.5, 1.0);
        let one = hankel_nuclear_norm(std::slice::from_ref(&layer)).unwrap();
        assert!((one - 4.0 / 3.0).abs() < 1e-14);
        let two = hankel_nuclear_norm(&[layer.clone(), layer]).unwrap();
        assert_eq!(two, 2.0 * one);
    }

    #[test]
    fn scalar_gradient_wrt_output() {
        // σ = |b c| / (1 - a²), so dσ/dc = sign(c) |b| / (1 - a²)
        let a = 0.5;
        let layer = scalar_like(a, 0.7);
        let (value, grad) = reg_value_and_gradient(&layer).unwrap();
        // the unreachable second state only contributes jitter
        assert!((value - 0.7 / (1.0 - a * a)).abs() < 1e-9);
        let expected = 1.0 / (1.0 - a * a);
        assert!((grad.d_c[(0, 0)] - expected).abs() < 1e-4 * expected);
    }

    #[test]
    fn naive_and_block_gradients_agree() {
        let layer = RotationSsm::random(3, 2, 21);
        let (v1, g1) = reg_value_and_gradient_with(&layer, GramianSolver::Block).unwrap();
        let (v2, g2) = reg_value_and_gradient_with(&layer, GramianSolver::Naive).unwrap();
        assert!((v1 - v2).abs() < 1e-10 * v1);
        assert!((&g1.d_c - &g2.d_c).norm() < 1e-8 * g1.d_c.norm());
        assert!((&g1.d_b - &g2.d_b).norm() < 1e-8 * g1.d_b.norm().max(1.0));
        for i in 0..3 {
            assert!((g1.d_rho_raw[i] - g2.d_rho_raw[i]).abs() < 1e-8 * (1.0 + g1.d_rho_raw[i].abs()));
        }
    }

    fn rel(a: f64, f: f64) -> f64 {
        (a - f).abs() / a.abs().max(f.abs()).max(1e-8)
    }

    #[test]
    fn gradient_matches_central_differences() {
        let layer = RotationSsm::random(3, 3, 5);
        let (_, g) = reg_value_and_gradient(&layer).unwrap();
        let h = 1e-6;
        let f = |l: &RotationSsm| hankel_nuclear_norm(std::slice::from_ref(l)).unwrap();
        for i in 0..3 {
            let mut lp = layer.clone();
            let mut lm = layer.clone();
            lp.rho_raw[i] += h;
            lm.rho_raw[i] -= h;
            let fd = (f(&lp) - f(&lm)) / (2.0 * h);
            assert!(rel(g.d_rho_raw[i], fd) < 1e-5, "rho {i}: {} vs {fd}", g.d_rho_raw[i]);
            let mut lp = layer.clone();
            let mut lm = layer.clone();
            lp.alpha_raw[i] += h;
            lm.alpha_raw[i] -= h;
            let fd = (f(&lp) - f(&lm)) / (2.0 * h);
            assert!(
                rel(g.d_alpha_raw[i], fd) < 1e-5,
                "alpha {i}: {} vs {fd}",
                g.d_alpha_raw[i]
            );
        }
        for (r, c) in [(0, 0), (3, 1), (5, 0)] {
            let mut lp = layer.clone();
            let mut lm = layer.clone();
            lp.b_learn[(r, c)] += h;
            lm.b_learn[(r, c)] -= h;
            let fd = (f(&lp) - f(&lm)) / (2.0 * h);
            assert!(rel(g.d_b[(r, c)], fd) < 1e-5, "b: {} vs {fd}", g.d_b[(r, c)]);
        }
        for (r, c) in [(0, 0), (2, 5), (1, 3)] {
            let mut lp = layer.clone();
            let mut lm = layer.clone();
            lp.c[(r, c)] += h;
            lm.c[(r, c)] -= h;
            let fd = (f(&lp) - f(&lm)) / (2.0 * h);
            assert!(rel(g.d_c[(r, c)], fd) < 1e-5, "c: {} vs {fd}", g.d_c[(r, c)]);
        }
    }
}
