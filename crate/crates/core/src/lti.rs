//! Linear time-invariant system representations.
//!
//! Two forms are used throughout the crate:
//!
//! * [`RotationSsm`] holds the trainable parameters of a layer. Its state
//!   matrix is block diagonal with 2x2 scaled rotations
//!   `ρᵢ [[cos αᵢ, sin αᵢ], [-sin αᵢ, cos αᵢ]]`, the first input column is the
//!   fixed stack of `e₁ = [1, 0]ᵀ` blocks, and the feedthrough is diagonal.
//! * [`DenseSsm`] is an explicit `(A, B, C, D)` realization.
//!
//! Sequence convention: the state after consuming `u_k` is
//! `x_k = A x_{k-1} + B u_k` with `x_0 = 0`, and `y_k = C x_k + D u_k`. This is
//! the indexing produced by the associative scan, so the sequential reference
//! and the scan evaluate the same map.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;

/// Raw pre-activation value whose `tanh` rounds to exactly `-1.0`.
pub const ALPHA_RAW_ZERO: f64 = -20.0;

#[inline]
pub fn rho_from_raw(raw: f64) -> f64 {
    raw.tanh()
}

#[inline]
pub fn alpha_from_raw(raw: f64) -> f64 {
    0.5 * PI * (raw.tanh() + 1.0)
}

/// Inverse of [`rho_from_raw`]; `rho` must lie in `(-1, 1)`.
pub fn rho_to_raw(rho: f64) -> f64 {
    rho.atanh()
}

/// Inverse of [`alpha_from_raw`]; `alpha = 0` maps to [`ALPHA_RAW_ZERO`].
pub fn alpha_to_raw(alpha: f64) -> f64 {
    if alpha <= 0.0 {
        return ALPHA_RAW_ZERO;
    }
    let t = (2.0 * alpha / PI - 1.0).min(1.0);
    if t >= 1.0 {
        -ALPHA_RAW_ZERO
    } else {
        t.atanh().max(ALPHA_RAW_ZERO)
    }
}

/// One 2x2 scaled rotation `ρ R(α)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationBlock {
    pub rho: f64,
    pub alpha: f64,
}

impl RotationBlock {
    /// Entries `[a11, a12, a21, a22]`.
    #[inline]
    pub fn matrix(&self) -> [f64; 4] {
        let (s, c) = self.alpha.sin_cos();
        [self.rho * c, self.rho * s, -self.rho * s, self.rho * c]
    }
}

/// Trainable rotation-parametrized layer with `m = p` inputs and outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationSsm {
    pub rho_raw: Vec<f64>,
    pub alpha_raw: Vec<f64>,
    /// Learnable columns of `B` (everything but the structural first column), `n × (p-1)`.
    pub b_learn: DMatrix<f64>,
    /// `p × n`.
    pub c: DMatrix<f64>,
    /// Diagonal of the feedthrough, length `p`.
    pub d: Vec<f64>,
}

impl RotationSsm {
    pub fn new(
        rho_raw: Vec<f64>,
        alpha_raw: Vec<f64>,
        b_learn: DMatrix<f64>,
        c: DMatrix<f64>,
        d: Vec<f64>,
    ) -> Result<Self> {
        let q = rho_raw.len();
        let n = 2 * q;
        let p = d.len();
        if q == 0 || p == 0 {
            return Err(Error::Dimension("rotation SSM needs q >= 1 and p >= 1".into()));
        }
        if alpha_raw.len() != q {
            return Err(Error::Dimension(format!(
                "alpha_raw has {} entries, expected {q}",
                alpha_raw.len()
            )));
        }
        if b_learn.shape() != (n, p - 1) {
            return Err(Error::Dimension(format!(
                "learnable B is {:?}, expected {:?}",
                b_learn.shape(),
                (n, p - 1)
            )));
        }
        if c.shape() != (p, n) {
            return Err(Error::Dimension(format!("C is {:?}, expected {:?}", c.shape(), (p, n))));
        }
        Ok(Self {
            rho_raw,
            alpha_raw,
            b_learn,
            c,
            d,
        })
    }

    /// Layer with all raw parameters and weights set to zero.
    pub fn zeros(q: usize, p: usize) -> Self {
        Self {
            rho_raw: vec![0.0; q],
            alpha_raw: vec![0.0; q],
            b_learn: DMatrix::zeros(2 * q, p.saturating_sub(1)),
            c: DMatrix::zeros(p, 2 * q),
            d: vec![0.0; p],
        }
    }

    /// Random layer with `ρ` concentrated near 0.75 (used by tests and benchmarks).
    pub fn random(q: usize, p: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2 * q;
        let mut g = || -> f64 { rng.sample(StandardNormal) };
        let rho_raw = (0..q).map(|_| 1.0 + 0.5 * g()).collect();
        let alpha_raw = (0..q).map(|_| g()).collect();
        let scale = 1.0 / (n as f64).sqrt();
        let b_learn = DMatrix::from_fn(n, p - 1, |_, _| g());
        let c = DMatrix::from_fn(p, n, |_, _| scale * g());
        let d = (0..p).map(|_| g()).collect();
        Self {
            rho_raw,
            alpha_raw,
            b_learn,
            c,
            d,
        }
    }

    pub fn q(&self) -> usize {
        self.rho_raw.len()
    }

    pub fn n(&self) -> usize {
        2 * self.q()
    }

    pub fn p(&self) -> usize {
        self.d.len()
    }

    pub fn rho(&self) -> Vec<f64> {
        self.rho_raw.iter().map(|&r| rho_from_raw(r)).collect()
    }

    pub fn alpha(&self) -> Vec<f64> {
        self.alpha_raw.iter().map(|&a| alpha_from_raw(a)).collect()
    }

    pub fn blocks(&self) -> Vec<RotationBlock> {
        self.rho_raw
            .iter()
            .zip(&self.alpha_raw)
            .map(|(&r, &a)| RotationBlock {
                rho: rho_from_raw(r),
                alpha: alpha_from_raw(a),
            })
            .collect()
    }

    /// Full `n × p` input matrix including the structural first column.
    pub fn b_full(&self) -> DMatrix<f64> {
        let n = self.n();
        let p = self.p();
        let mut b = DMatrix::zeros(n, p);
        for i in 0..self.q() {
            b[(2 * i, 0)] = 1.0;
        }
        if p > 1 {
            b.columns_mut(1, p - 1).copy_from(&self.b_learn);
        }
        b
    }

    /// Number of scalar parameters (`2q + n(p-1) + pn + p`).
    pub fn num_params(&self) -> usize {
        let (n, p) = (self.n(), self.p());
        n + n * (p - 1) + p * n + p
    }
}

/// Explicit realization `(A, B, C, D)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSsm {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl DenseSsm {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Dimension(format!("A must be square, got {:?}", a.shape())));
        }
        if b.nrows() != n {
            return Err(Error::Dimension(format!("B has {} rows, expected {n}", b.nrows())));
        }
        if c.ncols() != n {
            return Err(Error::Dimension(format!("C has {} columns, expected {n}", c.ncols())));
        }
        if d.shape() != (c.nrows(), b.ncols()) {
            return Err(Error::Dimension(format!(
                "D is {:?}, expected {:?}",
                d.shape(),
                (c.nrows(), b.ncols())
            )));
        }
        Ok(Self { a, b, c, d })
    }

    /// Like [`DenseSsm::new`] but also rejects systems with spectral radius `>= 1`.
    pub fn new_stable(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let sys = Self::new(a, b, c, d)?;
        let rho = sys.spectral_radius();
        if rho >= 1.0 {
            return Err(Error::Unstable(rho));
        }
        Ok(sys)
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.c.nrows()
    }

    pub fn spectral_radius(&self) -> f64 {
        linalg::spectral_radius(&self.a)
    }

    /// `(T⁻¹AT, T⁻¹B, CT, D)`.
    pub fn similarity(&self, t: &DMatrix<f64>) -> Result<Self> {
        let lu = t.clone().lu();
        let t_inv_a = lu
            .solve(&self.a)
            .ok_or_else(|| Error::Singular("similarity transform".into()))?;
        let t_inv_b = lu
            .solve(&self.b)
            .ok_or_else(|| Error::Singular("similarity transform".into()))?;
        Ok(Self {
            a: t_inv_a * t,
            b: t_inv_b,
            c: &self.c * t,
            d: self.d.clone(),
        })
    }
}

/// Markov parameters `h₀ = D`, `h_k = C A^{k-1} B`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseResponse {
    pub h: Vec<DMatrix<f64>>,
}

impl ImpulseResponse {
    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    /// `sqrt(Σ_k ‖h_k - g_k‖_F²)` over the common taps.
    pub fn distance(&self, other: &ImpulseResponse) -> f64 {
        self.h
            .iter()
            .zip(&other.h)
            .map(|(a, b)| (a - b).norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    pub fn norm(&self) -> f64 {
        self.h.iter().map(|a| a.norm_squared()).sum::<f64>().sqrt()
    }
}

/// Builds the dense realization of a rotation layer.
pub fn realize(params: &RotationSsm) -> DenseSsm {
    let n = params.n();
    let mut a = DMatrix::zeros(n, n);
    for (i, blk) in params.blocks().iter().enumerate() {
        let [a11, a12, a21, a22] = blk.matrix();
        let k = 2 * i;
        a[(k, k)] = a11;
        a[(k, k + 1)] = a12;
        a[(k + 1, k)] = a21;
        a[(k + 1, k + 1)] = a22;
    }
    let d = DMatrix::from_diagonal(&DVector::from_column_slice(&params.d));
    DenseSsm {
        a,
        b: params.b_full(),
        c: params.c.clone(),
        d,
    }
}

/// Reference recurrence; `u` has one row per time step.
pub fn simulate_sequential(sys: &DenseSsm, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if u.ncols() != sys.inputs() {
        return Err(Error::Dimension(format!(
            "input has {} channels, system expects {}",
            u.ncols(),
            sys.inputs()
        )));
    }
    let steps = u.nrows();
    let mut x = DVector::zeros(sys.n());
    let mut y = DMatrix::zeros(steps, sys.outputs());
    for k in 0..steps {
        let uk = u.row(k).transpose();
        x = &sys.a * &x + &sys.b * &uk;
        let yk = &sys.c * &x + &sys.d * &uk;
        y.set_row(k, &yk.transpose());
    }
    Ok(y)
}

/// First `taps` Markov parameters, by repeated propagation of `B`.
pub fn impulse_response(sys: &DenseSsm, taps: usize) -> ImpulseResponse {
    let mut h = Vec::with_capacity(taps);
    if taps == 0 {
        return ImpulseResponse { h };
    }
    h.push(sys.d.clone());
    let mut x = sys.b.clone();
    for _ in 1..taps {
        h.push(&sys.c * &x);
        x = &sys.a * x;
    }
    ImpulseResponse { h }
}

/// Output of the recurrence written as a convolution with Markov parameters.
///
/// The state absorbs `u_k` before it is read, so
/// `y_k = h₀ u_k + Σ_{i=0}^{k} h_{i+1} u_{k-i}`; `h` needs `L + 1` taps.
pub fn convolve(h: &ImpulseResponse, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let steps = u.nrows();
    if h.len() < steps + 1 {
        return Err(Error::Invalid(format!(
            "{} taps for a sequence of length {steps}",
            h.len()
        )));
    }
    let (p, m) = h.h[0].shape();
    if u.ncols() != m {
        return Err(Error::Dimension(format!(
            "input has {} channels, response expects {m}",
            u.ncols()
        )));
    }
    let mut y = DMatrix::zeros(steps, p);
    for k in 0..steps {
        let mut yk = &h.h[0] * u.row(k).transpose();
        for i in 0..=k {
            yk += &h.h[i + 1] * u.row(k - i).transpose();
        }
        y.set_row(k, &yk.transpose());
    }
    Ok(y)
}

/// Result of converting a dense system into rotation form.
#[derive(Debug, Clone)]
pub struct RotationForm {
    pub ssm: RotationSsm,
    /// State indices added as uncontrollable/unobservable padding for real eigenvalues.
    pub padded_states: Vec<usize>,
    /// Whether the random perturbation of `A` was applied.
    pub perturbed: bool,
}

const EIGVEC_COND_LIMIT: f64 = 1e8;

struct BlockBasis {
    /// Real similarity whose columns span the real/complex eigenspaces.
    t: DMatrix<f64>,
    /// For each block: `Some((a, b))` for a pair with eigenvalue `a + ib`, `None` for a real one.
    kinds: Vec<BlockKind>,
    cond: f64,
}

#[derive(Debug, Clone, Copy)]
enum BlockKind {
    Real(f64),
    Pair(f64, f64),
}

fn block_basis(a: &DMatrix<f64>) -> BlockBasis {
    let n = a.nrows();
    let eig = linalg::real_eigen(a);
    let cond = linalg::condition_number(&eig.vectors);
    let mut t = DMatrix::zeros(n, n);
    let mut kinds = Vec::new();
    let mut k = 0;
    while k < n {
        let v = eig.vectors.column(k);
        if eig.pair_start[k] {
            let lambda = eig.values[k];
            for i in 0..n {
                t[(i, k)] = v[i].re;
                t[(i, k + 1)] = v[i].im;
            }
            kinds.push(BlockKind::Pair(lambda.re, lambda.im));
            k += 2;
        } else {
            for i in 0..n {
                t[(i, k)] = v[i].re;
            }
            kinds.push(BlockKind::Real(eig.values[k].re));
            k += 1;
        }
    }
    BlockBasis { t, kinds, cond }
}

/// Smallest first-column scaling magnitude in the block basis (controllability proxy).
fn min_scaling(kinds: &[BlockKind], bt: &DMatrix<f64>) -> f64 {
    let mut row = 0;
    let mut min = f64::INFINITY;
    for kind in kinds {
        match kind {
            BlockKind::Real(_) => {
                min = min.min(bt[(row, 0)].abs());
                row += 1;
            }
            BlockKind::Pair(..) => {
                let mag = bt[(row, 0)].hypot(bt[(row + 1, 0)]);
                min = min.min(mag);
                row += 2;
            }
        }
    }
    min
}

/// Converts a stable dense system with `m = p` and diagonal `D` into rotation form.
///
/// Real Schur form gives the spectrum, the eigenbasis block-diagonalizes `A`
/// into 1x1 and `[[a, b], [-b, a]]` blocks, and a per-block scaled rotation
/// (which commutes with the block) maps the first input column onto `e₁`.
/// Real eigenvalues become `α = 0` blocks with a padded zero state.
pub fn to_rotation_form(sys: &DenseSsm, perturb_eps: f64) -> Result<RotationForm> {
    let n = sys.n();
    let p = sys.outputs();
    if sys.inputs() != p {
        return Err(Error::Dimension(format!(
            "rotation form needs m = p, got m = {}, p = {p}",
            sys.inputs()
        )));
    }
    if n == 0 {
        return Err(Error::Dimension("empty state".into()));
    }
    let d_norm = sys.d.norm().max(1.0);
    for i in 0..p {
        for j in 0..p {
            if i != j && sys.d[(i, j)].abs() > 1e-12 * d_norm {
                return Err(Error::Invalid("rotation form needs a diagonal feedthrough".into()));
            }
        }
    }
    let radius = sys.spectral_radius();
    if radius >= 1.0 {
        return Err(Error::Unstable(radius));
    }

    let mut a = sys.a.clone();
    let mut basis = block_basis(&a);
    let mut bt = basis
        .t
        .clone()
        .lu()
        .solve(&sys.b)
        .unwrap_or_else(|| DMatrix::zeros(n, p));
    let mut perturbed = false;
    let ill_posed = |basis: &BlockBasis, bt: &DMatrix<f64>| {
        !basis.cond.is_finite() || basis.cond > EIGVEC_COND_LIMIT || min_scaling(&basis.kinds, bt) < perturb_eps
    };
    if ill_posed(&basis, &bt) {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let e = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let e_norm = e.norm();
        a += e * (perturb_eps / e_norm);
        basis = block_basis(&a);
        bt = basis
            .t
            .clone()
            .lu()
            .solve(&sys.b)
            .ok_or_else(|| Error::Singular("eigenbasis after perturbation".into()))?;
        perturbed = true;
        if !basis.cond.is_finite() || basis.cond > EIGVEC_COND_LIMIT {
            return Err(Error::Singular(format!(
                "eigenvector basis condition {:e} after perturbation",
                basis.cond
            )));
        }
        let s = min_scaling(&basis.kinds, &bt);
        if s < perturb_eps {
            return Err(Error::Uncontrollable(format!(
                "input-column scaling {s:e} below {perturb_eps:e} after perturbation"
            )));
        }
    }
    let ct = &sys.c * &basis.t;

    let q = basis.kinds.len();
    let n_out = 2 * q;
    let mut rho_raw = Vec::with_capacity(q);
    let mut alpha_raw = Vec::with_capacity(q);
    let mut b_learn = DMatrix::zeros(n_out, p - 1);
    let mut c = DMatrix::zeros(p, n_out);
    let mut padded_states = Vec::new();
    let mut row = 0;
    for (blk, kind) in basis.kinds.iter().enumerate() {
        let k = 2 * blk;
        match *kind {
            BlockKind::Real(lambda) => {
                let s = bt[(row, 0)];
                rho_raw.push(rho_to_raw(lambda));
                alpha_raw.push(ALPHA_RAW_ZERO);
                for j in 1..p {
                    b_learn[(k, j - 1)] = bt[(row, j)] / s;
                }
                for i in 0..p {
                    c[(i, k)] = ct[(i, row)] * s;
                }
                padded_states.push(k + 1);
                row += 1;
            }
            BlockKind::Pair(re, im) => {
                let (b1, b2) = (bt[(row, 0)], bt[(row + 1, 0)]);
                let mag2 = b1 * b1 + b2 * b2;
                // K = [[x, y], [-y, x]] maps (b1, b2) to e1; T3 = K⁻¹ = [[b1, -b2], [b2, b1]]
                let (x, y) = (b1 / mag2, b2 / mag2);
                for j in 1..p {
                    let (u1, u2) = (bt[(row, j)], bt[(row + 1, j)]);
                    b_learn[(k, j - 1)] = x * u1 + y * u2;
                    b_learn[(k + 1, j - 1)] = -y * u1 + x * u2;
                }
                for i in 0..p {
                    let (c1, c2) = (ct[(i, row)], ct[(i, row + 1)]);
                    c[(i, k)] = c1 * b1 + c2 * b2;
                    c[(i, k + 1)] = -c1 * b2 + c2 * b1;
                }
                let rho = re.hypot(im);
                let alpha = im.atan2(re);
                rho_raw.push(rho_to_raw(rho));
                alpha_raw.push(alpha_to_raw(alpha));
                row += 2;
            }
        }
    }
    let d = (0..p).map(|i| sys.d[(i, i)]).collect();
    Ok(RotationForm {
        ssm: RotationSsm::new(rho_raw, alpha_raw, b_learn, c, d)?,
        padded_states,
        perturbed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_like(rho: f64, alpha: f64) -> RotationSsm {
        RotationSsm::new(
            vec![rho_to_raw(rho)],
            vec![alpha_to_raw(alpha)],
            DMatrix::zeros(2, 0),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            vec![0.0],
        )
        .unwrap()
    }

    #[test]
    fn realize_zero_angle_is_scaled_identity() {
        let sys = realize(&scalar_like(0.5, 0.0));
        assert!((sys.a[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((sys.a[(1, 1)] - 0.5).abs() < 1e-15);
        assert_eq!(sys.a[(0, 1)], 0.0);
        assert_eq!(sys.a[(1, 0)], 0.0);
        assert_eq!(sys.b, DMatrix::from_column_slice(2, 1, &[1.0, 0.0]));
    }

    #[test]
    fn realize_quarter_turn() {
        let sys = realize(&scalar_like(0.9, PI / 2.0));
        let expected = DMatrix::from_row_slice(2, 2, &[0.0, 0.9, -0.9, 0.0]);
        assert!((sys.a - expected).norm() < 1e-12);
    }

    #[test]
    fn alpha_raw_zero_gives_exact_zero_angle() {
        assert_eq!(alpha_from_raw(ALPHA_RAW_ZERO), 0.0);
        assert_eq!(alpha_to_raw(0.0), ALPHA_RAW_ZERO);
    }

    #[test]
    fn raw_round_trips() {
        for &rho in &[-0.95, -0.2, 0.0, 0.5, 0.999] {
            assert!((rho_from_raw(rho_to_raw(rho)) - rho).abs() < 1e-14);
        }
        for &alpha in &[1e-3, 0.5, 1.0, PI / 2.0, 3.0] {
            assert!((alpha_from_raw(alpha_to_raw(alpha)) - alpha).abs() < 1e-12);
        }
    }

    #[test]
    fn memoryless_state_copy() {
        let sys = DenseSsm::new(
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
        )
        .unwrap();
        let u = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let y = simulate_sequential(&sys, &u).unwrap();
        assert_eq!(y, u);
    }

    #[test]
    fn near_unit_retention_accumulates_geometric_series() {
        let rho = 0.999;
        let sys = realize(&scalar_like(rho, 0.0));
        let steps = 50;
        let u = DMatrix::from_element(steps, 1, 1.0);
        let y = simulate_sequential(&sys, &u).unwrap();
        for k in 0..steps {
            let expected = (1.0 - rho.powi(k as i32 + 1)) / (1.0 - rho);
            assert!((y[(k, 0)] - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn simulate_rejects_wrong_width() {
        let sys = realize(&scalar_like(0.5, 0.0));
        assert!(matches!(
            simulate_sequential(&sys, &DMatrix::zeros(3, 2)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn impulse_response_nilpotent() {
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let c = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        let d = DMatrix::from_element(1, 1, 0.5);
        let sys = DenseSsm::new(DMatrix::zeros(2, 2), b, c, d).unwrap();
        let h = impulse_response(&sys, 4);
        assert_eq!(h.h[0][(0, 0)], 0.5);
        assert_eq!(h.h[1][(0, 0)], 11.0);
        assert_eq!(h.h[2][(0, 0)], 0.0);
        assert_eq!(h.h[3][(0, 0)], 0.0);
    }

    #[test]
    fn impulse_response_scalar_geometric() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let sys = DenseSsm::new(DMatrix::from_element(1, 1, 0.5), one.clone(), one, DMatrix::zeros(1, 1)).unwrap();
        let h = impulse_response(&sys, 5);
        let expected = [0.0, 1.0, 0.5, 0.25, 0.125];
        for (k, e) in expected.iter().enumerate() {
            assert!((h.h[k][(0, 0)] - e).abs() < 1e-15);
        }
    }

    #[test]
    fn new_stable_rejects_unstable() {
        let a = DMatrix::from_element(1, 1, 1.2);
        let one = DMatrix::from_element(1, 1, 1.0);
        assert!(matches!(
            DenseSsm::new_stable(a, one.clone(), one.clone(), one),
            Err(Error::Unstable(_))
        ));
    }

    #[test]
    fn rotation_ssm_shape_checks() {
        assert!(RotationSsm::new(
            vec![0.0],
            vec![0.0, 1.0],
            DMatrix::zeros(2, 1),
            DMatrix::zeros(2, 2),
            vec![0.0; 2]
        )
        .is_err());
        assert!(RotationSsm::new(
            vec![0.0],
            vec![0.0],
            DMatrix::zeros(2, 0),
            DMatrix::zeros(2, 2),
            vec![0.0; 2]
        )
        .is_err());
    }

    #[test]
    fn real_eigenvalues_become_padded_blocks() {
        let a = DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, -0.3]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let c = DMatrix::from_row_slice(1, 2, &[0.5, -1.0]);
        let sys = DenseSsm::new(a, b, c, DMatrix::from_element(1, 1, 0.2)).unwrap();
        let form = to_rotation_form(&sys, 1e-10).unwrap();
        assert_eq!(form.ssm.q(), 2);
        assert_eq!(form.ssm.n(), 4);
        assert_eq!(form.padded_states.len(), 2);
        assert!(form.ssm.alpha().iter().all(|&a| a == 0.0));
        let mut rhos = form.ssm.rho();
        rhos.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((rhos[0] + 0.3).abs() < 1e-12 && (rhos[1] - 0.1).abs() < 1e-12);
        let err = impulse_response(&sys, 32).distance(&impulse_response(&realize(&form.ssm), 32));
        assert!(err < 1e-12, "impulse response error {err}");
    }

    #[test]
    fn to_rotation_form_rejects_nondiagonal_feedthrough() {
        let sys = DenseSsm::new(
            DMatrix::from_element(2, 2, 0.1),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::from_element(2, 2, 1.0),
        )
        .unwrap();
        assert!(matches!(to_rotation_form(&sys, 1e-10), Err(Error::Invalid(_))));
    }

    #[test]
    fn to_rotation_form_reports_uncontrollable_pair() {
        // the first input column is zero, so no perturbation of A can fix it
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.2]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 0.0]);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let sys = DenseSsm::new(a, b, c, DMatrix::zeros(1, 1)).unwrap();
        assert!(matches!(to_rotation_form(&sys, 1e-10), Err(Error::Uncontrollable(_))));
    }
}
