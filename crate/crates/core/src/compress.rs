//! Post-training compression: square-root balanced truncation, rank
//! allocation and modal (diagonal) realizations of the reduced systems.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gramians::{self, GramianPair};
use crate::hankel::{self, HsvReport, HSV_FLOOR};
use crate::linalg;
use crate::lti::{realize, DenseSsm, ImpulseResponse, RotationSsm};
use crate::net::{SequenceModel, SsmLayer};

/// Eigenvector condition number above which diagonalization is refused.
pub const MAX_EIGENVECTOR_COND: f64 = 1e8;

/// Reduced system in complex modal form.
///
/// Eigenvalues closed under conjugation are stored adjacently with the
/// positive-imaginary member first, and the partner's rows of `b` and
/// columns of `c` are the exact conjugates.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalSsm {
    pub lambda: Vec<Complex64>,
    pub b: DMatrix<Complex64>,
    pub c: DMatrix<Complex64>,
    pub d: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReducedSystem {
    DenseReal(DenseSsm),
    DiagonalComplex(DiagonalSsm),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedSsm {
    pub system: ReducedSystem,
    pub r: usize,
    pub truncated_tail: f64,
}

impl ReducedSsm {
    pub fn mode_name(&self) -> &'static str {
        match self.system {
            ReducedSystem::DenseReal(_) => "dense_real",
            ReducedSystem::DiagonalComplex(_) => "diagonal_complex",
        }
    }

    pub fn inputs(&self) -> usize {
        match &self.system {
            ReducedSystem::DenseReal(s) => s.inputs(),
            ReducedSystem::DiagonalComplex(s) => s.b.ncols(),
        }
    }

    pub fn outputs(&self) -> usize {
        match &self.system {
            ReducedSystem::DenseReal(s) => s.outputs(),
            ReducedSystem::DiagonalComplex(s) => s.c.nrows(),
        }
    }

    pub fn simulate(&self, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match &self.system {
            ReducedSystem::DenseReal(s) => crate::lti::simulate_sequential(s, u),
            ReducedSystem::DiagonalComplex(s) => s.simulate(u),
        }
    }

    pub fn impulse_response(&self, taps: usize) -> ImpulseResponse {
        match &self.system {
            ReducedSystem::DenseReal(s) => crate::lti::impulse_response(s, taps),
            ReducedSystem::DiagonalComplex(s) => s.impulse_response(taps),
        }
    }

    pub fn spectral_radius(&self) -> f64 {
        match &self.system {
            ReducedSystem::DenseReal(s) => s.spectral_radius(),
            ReducedSystem::DiagonalComplex(s) => s.lambda.iter().map(|z| z.norm()).fold(0.0, f64::max),
        }
    }
}

/// One retained mode of a conjugate-folded modal system.
#[derive(Debug, Clone)]
pub struct FoldedModes {
    /// `(re, im)` of each kept eigenvalue; real modes have `im == 0`.
    pub lambda: Vec<(f64, f64)>,
    pub complex: Vec<bool>,
    /// Real and imaginary parts of the input rows (`k × m`).
    pub b_re: DMatrix<f64>,
    pub b_im: DMatrix<f64>,
    /// Output columns with the pair weight 2 folded in (`p × k`).
    pub c_re: DMatrix<f64>,
    pub c_im: DMatrix<f64>,
}

impl DiagonalSsm {
    pub fn order(&self) -> usize {
        self.lambda.len()
    }

    /// Keeps one member per conjugate pair; the output is `Re Σ w c_k x_k`.
    pub fn folded(&self) -> FoldedModes {
        let keep: Vec<usize> = (0..self.order())
            .filter(|&i| self.lambda[i].im > 0.0 || self.lambda[i].im == 0.0)
            .collect();
        let k = keep.len();
        let m = self.b.ncols();
        let p = self.c.nrows();
        let mut out = FoldedModes {
            lambda: Vec::with_capacity(k),
            complex: Vec::with_capacity(k),
            b_re: DMatrix::zeros(k, m),
            b_im: DMatrix::zeros(k, m),
            c_re: DMatrix::zeros(p, k),
            c_im: DMatrix::zeros(p, k),
        };
        for (dst, &i) in keep.iter().enumerate() {
            let is_pair = self.lambda[i].im != 0.0;
            let w = if is_pair { 2.0 } else { 1.0 };
            out.lambda.push((self.lambda[i].re, self.lambda[i].im));
            out.complex.push(is_pair);
            for j in 0..m {
                out.b_re[(dst, j)] = self.b[(i, j)].re;
                out.b_im[(dst, j)] = self.b[(i, j)].im;
            }
            for j in 0..p {
                out.c_re[(j, dst)] = w * self.c[(j, i)].re;
                out.c_im[(j, dst)] = w * self.c[(j, i)].im;
            }
        }
        out
    }

    /// Real outputs through the folded modal recurrence.
    pub fn simulate(&self, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if u.ncols() != self.b.ncols() {
            return Err(Error::Dimension(format!(
                "input has {} channels, system expects {}",
                u.ncols(),
                self.b.ncols()
            )));
        }
        let f = self.folded();
        let mut xr = u * f.b_re.transpose();
        let mut xi = u * f.b_im.transpose();
        run_modal_recurrence(&f, &mut xr, &mut xi);
        Ok(xr * f.c_re.transpose() - xi * f.c_im.transpose() + u * self.d.transpose())
    }

    /// Complex outputs of the unfolded system, used to check realness.
    pub fn simulate_complex(&self, u: &DMatrix<f64>) -> Result<DMatrix<Complex64>> {
        let uc = u.map(|v| Complex64::new(v, 0.0));
        let r = self.order();
        let (l, p) = (u.nrows(), self.c.nrows());
        let bu = &uc * self.b.transpose();
        let mut x = DVector::<Complex64>::zeros(r);
        let mut y = DMatrix::<Complex64>::zeros(l, p);
        let dc = self.d.map(|v| Complex64::new(v, 0.0));
        for k in 0..l {
            for i in 0..r {
                x[i] = self.lambda[i] * x[i] + bu[(k, i)];
            }
            let yk = &self.c * &x + &dc * uc.row(k).transpose();
            y.set_row(k, &yk.transpose());
        }
        Ok(y)
    }

    /// Markov parameters `h₀ = D`, `h_k = Re(C Λ^{k-1} B)`.
    pub fn impulse_response(&self, taps: usize) -> ImpulseResponse {
        let (p, m, r) = (self.c.nrows(), self.b.ncols(), self.order());
        let mut h = Vec::with_capacity(taps);
        if taps == 0 {
            return ImpulseResponse { h };
        }
        h.push(self.d.clone());
        let mut powers = vec![Complex64::new(1.0, 0.0); r];
        for _ in 1..taps {
            let mut hk = DMatrix::zeros(p, m);
            for (i, pw) in powers.iter_mut().enumerate() {
                for a in 0..p {
                    for b in 0..m {
                        hk[(a, b)] += (self.c[(a, i)] * *pw * self.b[(i, b)]).re;
                    }
                }
                *pw *= self.lambda[i];
            }
            h.push(hk);
        }
        ImpulseResponse { h }
    }
}

/// In-place modal recurrence over row-major time: rows of `xr`/`xi` hold the
/// drive terms on entry and the states on exit.
pub fn run_modal_recurrence(f: &FoldedModes, xr: &mut DMatrix<f64>, xi: &mut DMatrix<f64>) {
    let l = xr.nrows();
    for (j, &(lr, li)) in f.lambda.iter().enumerate() {
        let (mut sr, mut si) = (0.0, 0.0);
        if f.complex[j] {
            for k in 0..l {
                let nr = lr * sr - li * si + xr[(k, j)];
                let ni = lr * si + li * sr + xi[(k, j)];
                sr = nr;
                si = ni;
                xr[(k, j)] = sr;
                xi[(k, j)] = si;
            }
        } else {
            for k in 0..l {
                sr = lr * sr + xr[(k, j)];
                xr[(k, j)] = sr;
                xi[(k, j)] = 0.0;
            }
        }
    }
}

/// Square-root balanced truncation of `sys` with gramians `p`, `q` to order `r`.
///
/// With Cholesky factors `R Rᵀ = P`, `S Sᵀ = Q` and `Sᵀ R = Φ Σ Ψᵀ` the
/// projectors are `V = R Ψ_r Σ_r^{-1/2}` and `W = S Φ_r Σ_r^{-1/2}`, so that
/// `Wᵀ V = I_r`.
pub fn balanced_truncation(sys: &DenseSsm, p: &DMatrix<f64>, q: &DMatrix<f64>, r: usize) -> Result<ReducedSsm> {
    let n = sys.n();
    let (v, w, sigma) = projectors(p, q, r, n)?;
    let a_r = w.transpose() * &sys.a * &v;
    let b_r = w.transpose() * &sys.b;
    let c_r = &sys.c * &v;
    let reduced = DenseSsm::new(a_r, b_r, c_r, sys.d.clone())?;
    let radius = reduced.spectral_radius();
    if radius >= 1.0 + 1e-10 {
        return Err(Error::Unstable(radius));
    }
    Ok(ReducedSsm {
        system: ReducedSystem::DenseReal(reduced),
        r,
        truncated_tail: sigma.iter().skip(r).sum(),
    })
}

/// The projectors `(V, W)` and all Hankel singular values.
pub fn projectors(
    p: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: usize,
    n: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<f64>)> {
    if p.shape() != (n, n) || q.shape() != (n, n) {
        return Err(Error::Dimension(format!("gramians must be {n}x{n}")));
    }
    let rf = gramians::cholesky_psd(p, gramians::DEFAULT_JITTER)?;
    let sf = gramians::cholesky_psd(q, gramians::DEFAULT_JITTER)?;
    factor_projectors(&rf, &sf, r)
}

fn factor_projectors(rf: &DMatrix<f64>, sf: &DMatrix<f64>, r: usize) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<f64>)> {
    let (phi, sigma, psi) = linalg::sorted_svd(&(sf.transpose() * rf));
    let rank = numerical_rank(&sigma);
    if r == 0 || r > rank {
        return Err(Error::RankExceeded { requested: r, rank });
    }
    let scale = DMatrix::from_diagonal(&DVector::from_iterator(r, sigma[..r].iter().map(|s| s.powf(-0.5))));
    let v = rf * psi.columns(0, r) * &scale;
    let w = sf * phi.columns(0, r) * &scale;
    Ok((v, w, sigma))
}

/// Number of singular values above the relative floor.
pub fn numerical_rank(sigma: &[f64]) -> usize {
    let top = sigma.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return 0;
    }
    sigma.iter().filter(|&&s| s > HSV_FLOOR * top).count()
}

/// Balanced truncation of a rotation layer using the block gramians.
pub fn truncate_rotation(layer: &RotationSsm, r: usize) -> Result<ReducedSsm> {
    let pair = GramianPair::of_rotation(layer)?;
    let dense = realize(layer);
    let (v, w, sigma) = factor_projectors(pair.chol_p()?, pair.chol_q()?, r)?;
    let reduced = DenseSsm::new(
        w.transpose() * &dense.a * &v,
        w.transpose() * &dense.b,
        &dense.c * &v,
        dense.d.clone(),
    )?;
    let radius = reduced.spectral_radius();
    if radius >= 1.0 + 1e-10 {
        return Err(Error::Unstable(radius));
    }
    Ok(ReducedSsm {
        system: ReducedSystem::DenseReal(reduced),
        r,
        truncated_tail: sigma.iter().skip(r).sum(),
    })
}

/// Smallest order whose cumulative energy reaches `fraction` of the total.
///
/// Returns `(r, degenerate)`; all-zero input gives `(1, true)`.
pub fn rank_by_energy(sigmas: &[f64], fraction: f64) -> Result<(usize, bool)> {
    if sigmas.is_empty() {
        return Err(Error::Invalid("empty singular value list".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Invalid(format!("energy fraction {fraction} outside (0, 1]")));
    }
    let total: f64 = sigmas.iter().sum();
    if total <= 0.0 {
        return Ok((1, true));
    }
    let goal = fraction * total;
    let mut acc = 0.0;
    for (i, s) in sigmas.iter().enumerate() {
        acc += s;
        if acc >= goal {
            return Ok(((i + 1).max(1), false));
        }
    }
    Ok((sigmas.len(), false))
}

/// Fraction of a layer's energy kept by its leading `r` values.
pub fn retained_energy(sigmas: &[f64], r: usize) -> f64 {
    let total: f64 = sigmas.iter().sum();
    if total <= 0.0 {
        return 1.0;
    }
    sigmas.iter().take(r).sum::<f64>() / total
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankCriterion {
    EnergyFraction(f64),
    /// Target mean rank across layers.
    Budget(f64),
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankPlan {
    pub ranks: Vec<usize>,
    pub criterion: RankCriterion,
    pub achieved_energy: Vec<f64>,
    /// Final threshold and iteration count of the bisection, when used.
    pub threshold: Option<f64>,
    pub iterations: usize,
}

impl RankPlan {
    pub fn mean_rank(&self) -> f64 {
        self.ranks.iter().sum::<usize>() as f64 / self.ranks.len().max(1) as f64
    }

    pub fn full(report: &HsvReport) -> Self {
        Self {
            ranks: report.layer_dims.clone(),
            criterion: RankCriterion::Full,
            achieved_energy: vec![1.0; report.layers()],
            threshold: None,
            iterations: 0,
        }
    }

    pub fn by_energy(report: &HsvReport, fraction: f64) -> Result<Self> {
        let mut ranks = Vec::with_capacity(report.layers());
        for s in &report.sigmas {
            let (r, degenerate) = rank_by_energy(s, fraction)?;
            if degenerate {
                log::warn!("layer with all-zero Hankel singular values kept at rank 1");
            }
            ranks.push(r);
        }
        Ok(Self::with_ranks(report, ranks, RankCriterion::EnergyFraction(fraction)))
    }

    /// Budget plan for truncation ratio `chi`: target mean rank `n (1 - χ)`.
    pub fn by_truncation_ratio(report: &HsvReport, chi: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&chi) {
            return Err(Error::Invalid(format!("truncation ratio {chi} outside [0, 1)")));
        }
        let n = report.layer_dims.iter().copied().max().unwrap_or(0) as f64;
        Ok(allocate_ranks_bisection_with(
            report,
            n * (1.0 - chi),
            1e-8,
            100,
            BudgetRule::Feasible,
        ))
    }

    fn with_ranks(report: &HsvReport, ranks: Vec<usize>, criterion: RankCriterion) -> Self {
        let achieved_energy = report
            .sigmas
            .iter()
            .zip(&ranks)
            .map(|(s, &r)| retained_energy(s, r))
            .collect();
        Self {
            ranks,
            criterion,
            achieved_energy,
            threshold: None,
            iterations: 0,
        }
    }
}

fn normalized(sigmas: &[f64]) -> Vec<f64> {
    let total: f64 = sigmas.iter().sum();
    if total <= 0.0 {
        return vec![0.0; sigmas.len()];
    }
    sigmas.iter().map(|s| s / total).collect()
}

/// Per-layer ranks for a shared normalized threshold `gamma`.
pub fn ranks_at_threshold(normalized_sigmas: &[Vec<f64>], gamma: f64) -> Vec<usize> {
    normalized_sigmas
        .iter()
        .map(|s| s.iter().filter(|&&v| v > gamma).count().max(1))
        .collect()
}

fn mean(ranks: &[usize]) -> f64 {
    ranks.iter().sum::<usize>() as f64 / ranks.len().max(1) as f64
}

/// How the bisection resolves a target mean rank that no threshold hits exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BudgetRule {
    /// The achievable mean closest to the target; ties go to the smaller mean.
    #[default]
    Nearest,
    /// The largest achievable mean not above the target.
    Feasible,
}

/// Shared energy threshold found by bisection so that the mean rank meets
/// `target_mean_rank`, resolved with [`BudgetRule::Nearest`].
pub fn allocate_ranks_bisection(report: &HsvReport, target_mean_rank: f64, eps: f64, n_max: usize) -> RankPlan {
    allocate_ranks_bisection_with(report, target_mean_rank, eps, n_max, BudgetRule::Nearest)
}

/// Bisection on the shared normalized threshold `γ`.
///
/// Raising `γ` lowers every layer's rank, so `γ` moves up while the mean
/// rank exceeds the target. After the loop the two sides of the final
/// bracket are compared according to `rule`; if no threshold is feasible
/// every layer gets rank 1.
pub fn allocate_ranks_bisection_with(
    report: &HsvReport,
    target_mean_rank: f64,
    eps: f64,
    n_max: usize,
    rule: BudgetRule,
) -> RankPlan {
    let norm: Vec<Vec<f64>> = report.sigmas.iter().map(|s| normalized(s)).collect();
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut chosen = None;
    let mut iterations = 0;
    while iterations < n_max {
        iterations += 1;
        let gamma = 0.5 * (lo + hi);
        let trial = ranks_at_threshold(&norm, gamma);
        let r_hat = mean(&trial);
        if (r_hat - target_mean_rank).abs() <= eps {
            chosen = Some((gamma, trial));
            break;
        }
        if r_hat > target_mean_rank {
            lo = gamma;
        } else {
            hi = gamma;
        }
    }
    let (gamma, ranks) = chosen.unwrap_or_else(|| {
        let above = ranks_at_threshold(&norm, lo);
        let below = ranks_at_threshold(&norm, hi);
        let take_above =
            rule == BudgetRule::Nearest && mean(&above) - target_mean_rank < target_mean_rank - mean(&below);
        if take_above {
            (lo, above)
        } else {
            (hi, below)
        }
    });
    let mut plan = RankPlan::with_ranks(report, ranks, RankCriterion::Budget(target_mean_rank));
    plan.threshold = Some(gamma);
    plan.iterations = iterations;
    plan
}

/// Modal form `[T⁻¹ A T, T⁻¹ B, C T, D]` of a dense reduced system.
///
/// Returns the input unchanged together with `true` when the eigenvector
/// basis is too ill-conditioned.
pub fn diagonalize(reduced: &ReducedSsm) -> Result<(ReducedSsm, bool)> {
    let sys = match &reduced.system {
        ReducedSystem::DenseReal(s) => s,
        ReducedSystem::DiagonalComplex(_) => return Ok((reduced.clone(), false)),
    };
    let eig = linalg::real_eigen(&sys.a);
    let cond = linalg::condition_number(&eig.vectors);
    if !cond.is_finite() || cond > MAX_EIGENVECTOR_COND {
        log::warn!("eigenvector condition number {cond:e}; keeping the dense realization");
        return Ok((reduced.clone(), true));
    }
    let t = &eig.vectors;
    let Some(t_inv) = t.clone().try_inverse() else {
        log::warn!("singular eigenvector basis; keeping the dense realization");
        return Ok((reduced.clone(), true));
    };
    let bc = sys.b.map(|v| Complex64::new(v, 0.0));
    let cc = sys.c.map(|v| Complex64::new(v, 0.0));
    let mut b = &t_inv * bc;
    let c = cc * t;
    let mut i = 0;
    while i < eig.values.len() {
        if eig.pair_start[i] {
            for j in 0..b.ncols() {
                b[(i + 1, j)] = b[(i, j)].conj();
            }
            i += 2;
        } else {
            for j in 0..b.ncols() {
                b[(i, j)].im = 0.0;
            }
            i += 1;
        }
    }
    let mut c = c;
    for (i, lam) in eig.values.iter().enumerate() {
        if lam.im == 0.0 {
            for j in 0..c.nrows() {
                c[(j, i)].im = 0.0;
            }
        }
    }
    Ok((
        ReducedSsm {
            system: ReducedSystem::DiagonalComplex(DiagonalSsm {
                lambda: eig.values,
                b,
                c,
                d: sys.d.clone(),
            }),
            r: reduced.r,
            truncated_tail: reduced.truncated_tail,
        },
        false,
    ))
}

/// Replaces every rotation layer of `model` by its reduction at the planned order.
///
/// Orders above a layer's numerical rank are clipped with a warning. All
/// other parameters are copied unchanged.
pub fn compress_model(model: &SequenceModel, plan: &RankPlan, diagonal: bool) -> Result<SequenceModel> {
    if plan.ranks.len() != model.blocks.len() {
        return Err(Error::Dimension(format!(
            "plan has {} layers, model has {}",
            plan.ranks.len(),
            model.blocks.len()
        )));
    }
    let mut out = model.clone();
    for (block, &r) in out.blocks.iter_mut().zip(&plan.ranks) {
        let SsmLayer::Rotation(layer) = &block.ssm else {
            return Err(Error::Invalid("layer is already compressed".into()));
        };
        let sigma = hankel::layer_hsv(layer)?;
        let rank = numerical_rank(&sigma).max(1);
        let r_eff = r.clamp(1, rank);
        if r_eff != r {
            log::warn!("requested order {r} clipped to numerical rank {rank}");
        }
        let mut reduced = truncate_rotation(layer, r_eff)?;
        if diagonal {
            let (diag, fallback) = diagonalize(&reduced)?;
            if fallback {
                log::warn!("diagonalization fell back to the dense realization");
            }
            reduced = diag;
        }
        block.ssm = SsmLayer::Reduced(reduced);
    }
    Ok(out)
}
