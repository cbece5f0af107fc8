//! Rotation-aware associative scan over the recurrence `x_k = A x_{k-1} + B u_k`.
//!
//! Elements are triples `(ρ, α, x)`; composing two elements multiplies the
//! retention factors, adds the angles and applies the second element's
//! scaled rotation to the first element's state. Angles are accumulated
//! without reduction modulo 2π.
//!
//! The parallel schedule is a two-pass chunked scan: every chunk is scanned
//! locally from a zero state, chunk summaries are combined with an exclusive
//! prefix, and each chunk is then fixed up with its carried-in state.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lti::{RotationBlock, RotationSsm};

#[derive(Debug, Clone, PartialEq)]
pub struct ScanElement {
    pub rho_part: Vec<f64>,
    pub alpha_part: Vec<f64>,
    pub state_part: Vec<f64>,
}

impl ScanElement {
    /// The two-sided identity `(1, 0, 0)`.
    pub fn identity(q: usize) -> Self {
        Self {
            rho_part: vec![1.0; q],
            alpha_part: vec![0.0; q],
            state_part: vec![0.0; 2 * q],
        }
    }

    pub fn new(rho_part: Vec<f64>, alpha_part: Vec<f64>, state_part: Vec<f64>) -> Result<Self> {
        if rho_part.len() != alpha_part.len() || state_part.len() != 2 * rho_part.len() {
            return Err(Error::Dimension(format!(
                "scan element with {} retentions, {} angles and {} states",
                rho_part.len(),
                alpha_part.len(),
                state_part.len()
            )));
        }
        Ok(Self {
            rho_part,
            alpha_part,
            state_part,
        })
    }

    pub fn q(&self) -> usize {
        self.rho_part.len()
    }
}

#[inline]
fn rotate_pair(rho: f64, cos: f64, sin: f64, x0: f64, x1: f64) -> (f64, f64) {
    (rho * (cos * x0 + sin * x1), rho * (cos * x1 - sin * x0))
}

/// `a ∘ b`: `(a.ρ ⊙ b.ρ, a.α + b.α, A(b.ρ, b.α) a.x + b.x)`.
pub fn combine(a: &ScanElement, b: &ScanElement) -> Result<ScanElement> {
    if a.q() != b.q() || a.state_part.len() != b.state_part.len() {
        return Err(Error::Dimension(format!("combining q = {} with q = {}", a.q(), b.q())));
    }
    let q = a.q();
    let mut out = ScanElement::identity(q);
    for i in 0..q {
        out.rho_part[i] = a.rho_part[i] * b.rho_part[i];
        out.alpha_part[i] = a.alpha_part[i] + b.alpha_part[i];
        let (s, c) = b.alpha_part[i].sin_cos();
        let (y0, y1) = rotate_pair(b.rho_part[i], c, s, a.state_part[2 * i], a.state_part[2 * i + 1]);
        out.state_part[2 * i] = y0 + b.state_part[2 * i];
        out.state_part[2 * i + 1] = y1 + b.state_part[2 * i + 1];
    }
    Ok(out)
}

/// Per-block coefficients `(ρ, cos α, sin α)`; `transpose` flips the angle.
fn coefficients(blocks: &[RotationBlock], transpose: bool) -> Vec<(f64, f64, f64)> {
    blocks
        .iter()
        .map(|b| {
            let (s, c) = b.alpha.sin_cos();
            (b.rho, c, if transpose { -s } else { s })
        })
        .collect()
}

fn sequential_in_place(coef: &[(f64, f64, f64)], x: &mut [f64], n: usize) {
    let len = x.len() / n;
    for k in 1..len {
        let (prev, cur) = x.split_at_mut(k * n);
        let prev = &prev[(k - 1) * n..];
        let cur = &mut cur[..n];
        for (i, &(rho, c, s)) in coef.iter().enumerate() {
            let (y0, y1) = rotate_pair(rho, c, s, prev[2 * i], prev[2 * i + 1]);
            cur[2 * i] += y0;
            cur[2 * i + 1] += y1;
        }
    }
}

/// Runs the recurrence in place: on entry row `k` of `x` (row-major, `n`
/// columns) holds the drive term, on exit it holds the state.
///
/// With `reverse` the recurrence runs from the last row backwards, and with
/// `transpose` every block is replaced by its transpose; together they give
/// the adjoint recurrence used for backpropagation.
pub fn scan_states_in_place(
    blocks: &[RotationBlock],
    x: &mut [f64],
    workers: usize,
    reverse: bool,
    transpose: bool,
) -> Result<()> {
    let n = 2 * blocks.len();
    if n == 0 || x.len() % n != 0 {
        return Err(Error::Dimension(format!(
            "state buffer of {} values for n = {n}",
            x.len()
        )));
    }
    let len = x.len() / n;
    if reverse {
        reverse_rows(x, n);
    }
    let coef = coefficients(blocks, transpose);
    let workers = workers.max(1).min(len.max(1));
    if workers == 1 {
        sequential_in_place(&coef, x, n);
    } else {
        chunked_in_place(&coef, x, n, workers);
    }
    if reverse {
        reverse_rows(x, n);
    }
    Ok(())
}

fn reverse_rows(x: &mut [f64], n: usize) {
    let len = x.len() / n;
    for k in 0..len / 2 {
        let (head, tail) = x.split_at_mut((len - 1 - k) * n);
        head[k * n..(k + 1) * n].swap_with_slice(&mut tail[..n]);
    }
}

fn chunked_in_place(coef: &[(f64, f64, f64)], x: &mut [f64], n: usize, workers: usize) {
    let len = x.len() / n;
    let rows_per_chunk = len.div_ceil(workers);
    let q = coef.len();

    // upsweep: local scans from zero state, summarised as scan elements
    let summaries: Vec<ScanElement> = x
        .par_chunks_mut(rows_per_chunk * n)
        .map(|chunk| {
            sequential_in_place(coef, chunk, n);
            let rows = chunk.len() / n;
            let last = &chunk[(rows - 1) * n..];
            ScanElement {
                rho_part: coef.iter().map(|&(r, _, _)| r.powi(rows as i32)).collect(),
                alpha_part: coef.iter().map(|&(_, c, s)| s.atan2(c) * rows as f64).collect(),
                state_part: last.to_vec(),
            }
        })
        .collect();

    // exclusive prefix over chunk summaries
    let mut carries = Vec::with_capacity(summaries.len());
    let mut acc = ScanElement::identity(q);
    for s in &summaries {
        carries.push(acc.state_part.clone());
        acc = combine(&acc, s).expect("summaries share q");
    }

    // fixup: add A^j · carry to the j-th row of each chunk
    x.par_chunks_mut(rows_per_chunk * n)
        .zip(carries.par_iter())
        .for_each(|(chunk, carry)| {
            if carry.iter().all(|&v| v == 0.0) {
                return;
            }
            let mut z = carry.clone();
            for row in chunk.chunks_mut(n) {
                for (i, &(rho, c, s)) in coef.iter().enumerate() {
                    let (y0, y1) = rotate_pair(rho, c, s, z[2 * i], z[2 * i + 1]);
                    z[2 * i] = y0;
                    z[2 * i + 1] = y1;
                    row[2 * i] += y0;
                    row[2 * i + 1] += y1;
                }
            }
        });
}

/// Drive terms `B u_k` as a row-major `L × n` buffer.
pub fn drive_terms(params: &RotationSsm, u: &DMatrix<f64>) -> Vec<f64> {
    let bu = u * params.b_full().transpose();
    let (l, n) = bu.shape();
    let mut out = vec![0.0; l * n];
    for k in 0..l {
        for i in 0..n {
            out[k * n + i] = bu[(k, i)];
        }
    }
    out
}

/// Outputs `y_k = C x_k + D ⊙ u_k` for an input of shape `L × p`.
///
/// `workers` fixes the number of chunks of the parallel schedule; the
/// result is bitwise reproducible for a fixed worker count.
pub fn scan_sequence(params: &RotationSsm, u: &DMatrix<f64>, workers: usize) -> Result<DMatrix<f64>> {
    let p = params.p();
    if u.ncols() != p {
        return Err(Error::Dimension(format!(
            "input has {} channels, layer expects {p}",
            u.ncols()
        )));
    }
    if u.nrows() == 0 {
        return Err(Error::Invalid("empty input sequence".into()));
    }
    let n = params.n();
    let mut x = drive_terms(params, u);
    scan_states_in_place(&params.blocks(), &mut x, workers, false, false)?;
    let states = DMatrix::from_row_slice(u.nrows(), n, &x);
    let mut y = states * params.c.transpose();
    for (k, mut row) in y.row_iter_mut().enumerate() {
        for j in 0..p {
            row[j] += params.d[j] * u[(k, j)];
        }
    }
    Ok(y)
}
