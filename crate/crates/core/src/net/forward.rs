//! Batched forward pass and manual reverse-mode gradients.
//!
//! Activations are stored feature-major: a `p × (B·L)` matrix whose columns
//! are time steps, with each sample's steps contiguous. SSM states then form
//! contiguous row-major `L × n` buffers per sample, which is the layout the
//! scan kernel works on.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::compress::{ReducedSsm, ReducedSystem};
use crate::error::{Error, Result};
use crate::hankel;
use crate::lti::RotationSsm;
use crate::scan::scan_states_in_place;

use super::{NormKind, SequenceModel, SsmLayer};

const NORM_EPS: f64 = 1e-5;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    pub input: DMatrix<f64>,
    pub normed: DMatrix<f64>,
    xhat: DMatrix<f64>,
    inv_std: Vec<f64>,
    /// Batch statistics when batch norm ran in training mode.
    pub batch_stats: Option<(DVector<f64>, DVector<f64>)>,
    states: DMatrix<f64>,
    y: DMatrix<f64>,
    g1: DMatrix<f64>,
    sig: DMatrix<f64>,
    mask: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct Cache {
    pub batch: usize,
    pub len: usize,
    inputs: DMatrix<f64>,
    pub blocks: Vec<BlockCache>,
    pooled: DMatrix<f64>,
}

/// Gradient with the same layout as the trainable tensors of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub encoder_w: DMatrix<f64>,
    pub encoder_b: DVector<f64>,
    pub blocks: Vec<BlockGrad>,
    pub decoder_w: DMatrix<f64>,
    pub decoder_b: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrad {
    pub gamma: DVector<f64>,
    pub beta: DVector<f64>,
    pub rho_raw: Vec<f64>,
    pub alpha_raw: Vec<f64>,
    pub b_learn: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: Vec<f64>,
    pub gate: DMatrix<f64>,
}

impl ModelGrad {
    /// Concatenation in the order of `SequenceModel::tensors_mut`.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.encoder_w.as_slice());
        out.extend_from_slice(self.encoder_b.as_slice());
        for b in &self.blocks {
            out.extend_from_slice(b.gamma.as_slice());
            out.extend_from_slice(b.beta.as_slice());
            out.extend_from_slice(&b.rho_raw);
            out.extend_from_slice(&b.alpha_raw);
            out.extend_from_slice(b.b_learn.as_slice());
            out.extend_from_slice(b.c.as_slice());
            out.extend_from_slice(&b.d);
            out.extend_from_slice(b.gate.as_slice());
        }
        out.extend_from_slice(self.decoder_w.as_slice());
        out.extend_from_slice(self.decoder_b.as_slice());
        out
    }
}

fn stack_inputs(batch: &[&DMatrix<f64>]) -> Result<(DMatrix<f64>, usize)> {
    let first = batch.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let (d, len) = first.shape();
    if len == 0 {
        return Err(Error::Invalid("sequence length must be at least 1".into()));
    }
    let mut u = DMatrix::zeros(d, batch.len() * len);
    for (b, x) in batch.iter().enumerate() {
        if x.shape() != (d, len) {
            return Err(Error::Dimension(format!(
                "sample {b} has shape {:?}, expected {:?}",
                x.shape(),
                (d, len)
            )));
        }
        u.columns_mut(b * len, len).copy_from(x);
    }
    Ok((u, len))
}

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

struct NormOut {
    out: DMatrix<f64>,
    xhat: DMatrix<f64>,
    inv_std: Vec<f64>,
    batch_stats: Option<(DVector<f64>, DVector<f64>)>,
}

fn norm_forward(model_norm: &super::Norm, kind: NormKind, x: &DMatrix<f64>, train: bool) -> NormOut {
    let (p, cols) = x.shape();
    match kind {
        NormKind::None => NormOut {
            out: x.clone(),
            xhat: DMatrix::zeros(0, 0),
            inv_std: Vec::new(),
            batch_stats: None,
        },
        NormKind::Layer => {
            let mut xhat = x.clone();
            let mut inv_std = Vec::with_capacity(cols);
            for mut col in xhat.column_iter_mut() {
                let mu = col.sum() / p as f64;
                col.add_scalar_mut(-mu);
                let var = col.norm_squared() / p as f64;
                let inv = 1.0 / (var + NORM_EPS).sqrt();
                col *= inv;
                inv_std.push(inv);
            }
            let mut out = xhat.clone();
            for mut col in out.column_iter_mut() {
                col.component_mul_assign(&model_norm.gamma);
                col += &model_norm.beta;
            }
            NormOut {
                out,
                xhat,
                inv_std,
                batch_stats: None,
            }
        }
        NormKind::Batch => {
            let (mean, var) = if train {
                let mean = x.column_mean();
                let mut var = DVector::zeros(p);
                for col in x.column_iter() {
                    var += (col - &mean).map(|v| v * v);
                }
                (mean, var / cols as f64)
            } else {
                (model_norm.running_mean.clone(), model_norm.running_var.clone())
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
            let mut xhat = x.clone();
            let mut out = x.clone();
            for j in 0..cols {
                for i in 0..p {
                    let h = (x[(i, j)] - mean[i]) * inv_std[i];
                    xhat[(i, j)] = h;
                    out[(i, j)] = model_norm.gamma[i] * h + model_norm.beta[i];
                }
            }
            NormOut {
                out,
                xhat,
                inv_std,
                batch_stats: train.then_some((mean, var)),
            }
        }
    }
}

fn norm_backward(
    gamma: &DVector<f64>,
    kind: NormKind,
    cache: &BlockCache,
    dout: &DMatrix<f64>,
) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let (p, cols) = dout.shape();
    if kind == NormKind::None {
        return (dout.clone(), DVector::zeros(p), DVector::zeros(p));
    }
    let xhat = &cache.xhat;
    let mut d_gamma = DVector::zeros(p);
    let mut d_beta = DVector::zeros(p);
    for j in 0..cols {
        for i in 0..p {
            d_gamma[i] += dout[(i, j)] * xhat[(i, j)];
            d_beta[i] += dout[(i, j)];
        }
    }
    let mut dx = DMatrix::zeros(p, cols);
    match kind {
        NormKind::Layer => {
            for j in 0..cols {
                let (mut m1, mut m2) = (0.0, 0.0);
                for i in 0..p {
                    let g = dout[(i, j)] * gamma[i];
                    m1 += g;
                    m2 += g * xhat[(i, j)];
                }
                m1 /= p as f64;
                m2 /= p as f64;
                let inv = cache.inv_std[j];
                for i in 0..p {
                    let g = dout[(i, j)] * gamma[i];
                    dx[(i, j)] = inv * (g - m1 - xhat[(i, j)] * m2);
                }
            }
        }
        NormKind::Batch => {
            for i in 0..p {
                let (mut m1, mut m2) = (0.0, 0.0);
                for j in 0..cols {
                    let g = dout[(i, j)] * gamma[i];
                    m1 += g;
                    m2 += g * xhat[(i, j)];
                }
                m1 /= cols as f64;
                m2 /= cols as f64;
                let inv = cache.inv_std[i];
                for j in 0..cols {
                    let g = dout[(i, j)] * gamma[i];
                    dx[(i, j)] = inv * (g - m1 - xhat[(i, j)] * m2);
                }
            }
        }
        NormKind::None => unreachable!(),
    }
    (dx, d_gamma, d_beta)
}

fn add_diag_feedthrough(y: &mut DMatrix<f64>, d: &[f64], x: &DMatrix<f64>) {
    for (j, mut col) in y.column_iter_mut().enumerate() {
        for (i, v) in col.iter_mut().enumerate() {
            *v += d[i] * x[(i, j)];
        }
    }
}

fn rotation_forward(ssm: &RotationSsm, x: &DMatrix<f64>, len: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = ssm.n();
    let blocks = ssm.blocks();
    let mut states = ssm.b_full() * x;
    states
        .as_mut_slice()
        .par_chunks_mut(n * len)
        .try_for_each(|chunk| scan_states_in_place(&blocks, chunk, 1, false, false))?;
    let mut y = &ssm.c * &states;
    add_diag_feedthrough(&mut y, &ssm.d, x);
    Ok((states, y))
}

fn diagonal_of(d: &DMatrix<f64>) -> Option<Vec<f64>> {
    let p = d.nrows();
    for j in 0..d.ncols() {
        for i in 0..p {
            if i != j && d[(i, j)] != 0.0 {
                return None;
            }
        }
    }
    Some(d.diagonal().iter().copied().collect())
}

fn reduced_forward(red: &ReducedSsm, x: &DMatrix<f64>, len: usize) -> DMatrix<f64> {
    let (d, mut y) = match &red.system {
        ReducedSystem::DenseReal(sys) => {
            let r = sys.n();
            let mut s = &sys.b * x;
            let a = &sys.a;
            s.as_mut_slice().par_chunks_mut(r * len).for_each(|chunk| {
                let mut prev = DVector::zeros(r);
                let mut next = DVector::zeros(r);
                for t in 0..len {
                    let cur = &mut chunk[t * r..(t + 1) * r];
                    if t > 0 {
                        next.gemv(1.0, a, &prev, 0.0);
                        for (c, v) in cur.iter_mut().zip(next.iter()) {
                            *c += v;
                        }
                    }
                    prev.as_mut_slice().copy_from_slice(cur);
                }
            });
            (&sys.d, &sys.c * s)
        }
        ReducedSystem::DiagonalComplex(sys) => {
            let f = sys.folded();
            let k = f.lambda.len();
            let mut xr = &f.b_re * x;
            let mut xi = &f.b_im * x;
            xr.as_mut_slice()
                .par_chunks_mut(k * len)
                .zip(xi.as_mut_slice().par_chunks_mut(k * len))
                .for_each(|(cr, ci)| {
                    for t in 1..len {
                        let (pr, cur_r) = cr.split_at_mut(t * k);
                        let (pi, cur_i) = ci.split_at_mut(t * k);
                        let (pr, pi) = (&pr[(t - 1) * k..], &pi[(t - 1) * k..]);
                        for j in 0..k {
                            let (lr, li) = f.lambda[j];
                            if f.complex[j] {
                                cur_r[j] += lr * pr[j] - li * pi[j];
                                cur_i[j] += lr * pi[j] + li * pr[j];
                            } else {
                                cur_r[j] += lr * pr[j];
                            }
                        }
                    }
                });
            (&sys.d, &f.c_re * xr - &f.c_im * xi)
        }
    };
    match diagonal_of(d) {
        Some(dd) => add_diag_feedthrough(&mut y, &dd, x),
        None => y += d * x,
    }
    y
}

/// Forward pass over a batch of `input_dim × L` sequences of equal length.
///
/// Returns logits of shape `classes × batch`. Dropout is active only when
/// `train` is set and an RNG is supplied.
pub fn forward(
    model: &SequenceModel,
    batch: &[&DMatrix<f64>],
    train: bool,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(DMatrix<f64>, Cache)> {
    let (inputs, len) = stack_inputs(batch)?;
    if inputs.nrows() != model.encoder_w.ncols() {
        return Err(Error::Dimension(format!(
            "inputs have {} features, encoder expects {}",
            inputs.nrows(),
            model.encoder_w.ncols()
        )));
    }
    let bsz = batch.len();
    let cfg = &model.config;
    let mut h = &model.encoder_w * &inputs;
    for mut col in h.column_iter_mut() {
        col += &model.encoder_b;
    }
    let mut caches = Vec::with_capacity(model.blocks.len());
    for (li, block) in model.blocks.iter().enumerate() {
        let nrm = norm_forward(&block.norm, cfg.norm, &h, train);
        let (states, y) = match &block.ssm {
            SsmLayer::Rotation(ssm) => rotation_forward(ssm, &nrm.out, len)?,
            SsmLayer::Reduced(red) => (DMatrix::zeros(0, 0), reduced_forward(red, &nrm.out, len)),
        };
        let g1 = y.map(gelu);
        let sig = (&block.gate * &g1).map(sigmoid);
        let mut out = g1.component_mul(&sig);
        let mask = match (&mut rng, train && cfg.dropout > 0.0) {
            (Some(r), true) => {
                let keep = 1.0 / (1.0 - cfg.dropout);
                let m = DMatrix::from_fn(out.nrows(), out.ncols(), |_, _| {
                    if r.random::<f64>() < cfg.dropout {
                        0.0
                    } else {
                        keep
                    }
                });
                out.component_mul_assign(&m);
                Some(m)
            }
            _ => None,
        };
        let next = if cfg.residual { &h + &out } else { out };
        check_finite(&next, &format!("activations after block {li}"))?;
        caches.push(BlockCache {
            input: std::mem::replace(&mut h, next),
            normed: nrm.out,
            xhat: nrm.xhat,
            inv_std: nrm.inv_std,
            batch_stats: nrm.batch_stats,
            states,
            y,
            g1,
            sig,
            mask,
        });
    }
    let p = h.nrows();
    let mut pooled = DMatrix::zeros(p, bsz);
    for b in 0..bsz {
        pooled.set_column(b, &(h.columns(b * len, len).column_sum() / len as f64));
    }
    let mut logits = &model.decoder_w * &pooled;
    for mut col in logits.column_iter_mut() {
        col += &model.decoder_b;
    }
    check_finite(&logits, "logits")?;
    Ok((
        logits,
        Cache {
            batch: bsz,
            len,
            inputs,
            blocks: caches,
            pooled,
        },
    ))
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &DMatrix<f64>, labels: &[usize]) -> Result<(f64, DMatrix<f64>)> {
    let (classes, bsz) = logits.shape();
    if labels.len() != bsz {
        return Err(Error::Dimension(format!("{} labels for {bsz} logits", labels.len())));
    }
    let mut grad = DMatrix::zeros(classes, bsz);
    let mut loss = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Invalid(format!("label {label} out of range")));
        }
        let col = logits.column(b);
        let max = col.max();
        let z: f64 = col.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + z.ln();
        loss += log_z - col[label];
        for c in 0..classes {
            grad[(c, b)] = (col[c] - log_z).exp() / bsz as f64;
        }
        grad[(label, b)] -= 1.0 / bsz as f64;
    }
    Ok((loss / bsz as f64, grad))
}

/// Chains a gradient with respect to the 2x2 blocks of `A` to the raw angles.
pub(crate) fn chain_block_grad(ssm: &RotationSsm, g: &[[f64; 4]]) -> (Vec<f64>, Vec<f64>) {
    let mut d_rho = Vec::with_capacity(g.len());
    let mut d_alpha = Vec::with_capacity(g.len());
    for (i, gi) in g.iter().enumerate() {
        let rho = ssm.rho_raw[i].tanh();
        let ta = ssm.alpha_raw[i].tanh();
        let alpha = FRAC_PI_2 * (ta + 1.0);
        let (s, c) = alpha.sin_cos();
        let [g00, g01, g10, g11] = *gi;
        let dr = g00 * c + g01 * s - g10 * s + g11 * c;
        let da = rho * (-g00 * s + g01 * c - g10 * c - g11 * s);
        d_rho.push(dr * (1.0 - rho * rho));
        d_alpha.push(da * FRAC_PI_2 * (1.0 - ta * ta));
    }
    (d_rho, d_alpha)
}

/// Backpropagates `d_logits` through a cached forward pass.
pub fn backward(model: &SequenceModel, cache: &Cache, d_logits: &DMatrix<f64>) -> Result<ModelGrad> {
    let cfg = &model.config;
    let (bsz, len) = (cache.batch, cache.len);
    let d_decoder_w = d_logits * cache.pooled.transpose();
    let d_decoder_b = d_logits.column_sum();
    let d_pooled = model.decoder_w.transpose() * d_logits;
    let p = d_pooled.nrows();
    let mut dh = DMatrix::zeros(p, bsz * len);
    for b in 0..bsz {
        let g = d_pooled.column(b) / len as f64;
        for t in 0..len {
            dh.set_column(b * len + t, &g);
        }
    }
    let mut block_grads = Vec::with_capacity(model.blocks.len());
    for (block, bc) in model.blocks.iter().zip(&cache.blocks).rev() {
        let SsmLayer::Rotation(ssm) = &block.ssm else {
            return Err(Error::Invalid("compressed layers have no gradient".into()));
        };
        let mut d_out = dh.clone();
        if let Some(mask) = &bc.mask {
            d_out.component_mul_assign(mask);
        }
        // gate: out = g1 ⊙ σ(W g1)
        let mut d_g1 = d_out.component_mul(&bc.sig);
        let d_z = d_out.component_mul(&bc.g1).zip_map(&bc.sig, |v, s| v * s * (1.0 - s));
        let d_gate = &d_z * bc.g1.transpose();
        d_g1 += block.gate.transpose() * &d_z;
        let d_y = d_g1.zip_map(&bc.y, |g, y| g * gelu_grad(y));

        // SSM: y = C s + d ⊙ x, s_t = A s_{t-1} + B x_t
        let n = ssm.n();
        let x = &bc.normed;
        let d_c = &d_y * bc.states.transpose();
        let mut d_d = vec![0.0; p];
        for j in 0..d_y.ncols() {
            for i in 0..p {
                d_d[i] += d_y[(i, j)] * x[(i, j)];
            }
        }
        let mut d_x = d_y.clone();
        for mut col in d_x.column_iter_mut() {
            for (i, v) in col.iter_mut().enumerate() {
                *v *= ssm.d[i];
            }
        }
        let blocks = ssm.blocks();
        let mut lam = ssm.c.transpose() * &d_y;
        lam.as_mut_slice()
            .par_chunks_mut(n * len)
            .try_for_each(|chunk| scan_states_in_place(&blocks, chunk, 1, true, true))?;
        let b_full = ssm.b_full();
        let d_b_full = &lam * x.transpose();
        d_x += b_full.transpose() * &lam;
        let q = ssm.q();
        let states = bc.states.as_slice();
        let lam_s = lam.as_slice();
        let partial: Vec<Vec<[f64; 4]>> = (0..bsz)
            .into_par_iter()
            .map(|b| {
                let mut g = vec![[0.0; 4]; q];
                for t in 1..len {
                    let cur = (b * len + t) * n;
                    let prev = cur - n;
                    for (i, gi) in g.iter_mut().enumerate() {
                        let (l0, l1) = (lam_s[cur + 2 * i], lam_s[cur + 2 * i + 1]);
                        let (s0, s1) = (states[prev + 2 * i], states[prev + 2 * i + 1]);
                        gi[0] += l0 * s0;
                        gi[1] += l0 * s1;
                        gi[2] += l1 * s0;
                        gi[3] += l1 * s1;
                    }
                }
                g
            })
            .collect();
        let mut g_a = vec![[0.0; 4]; q];
        for part in &partial {
            for (acc, v) in g_a.iter_mut().zip(part) {
                for k in 0..4 {
                    acc[k] += v[k];
                }
            }
        }
        let (d_rho_raw, d_alpha_raw) = chain_block_grad(ssm, &g_a);

        let (d_in_norm, d_gamma, d_beta) = norm_backward(&block.norm.gamma, cfg.norm, bc, &d_x);
        if cfg.residual {
            dh += d_in_norm;
        } else {
            dh = d_in_norm;
        }
        block_grads.push(BlockGrad {
            gamma: d_gamma,
            beta: d_beta,
            rho_raw: d_rho_raw,
            alpha_raw: d_alpha_raw,
            b_learn: d_b_full.columns(1, p - 1).into_owned(),
            c: d_c,
            d: d_d,
            gate: d_gate,
        });
    }
    block_grads.reverse();
    Ok(ModelGrad {
        encoder_w: &dh * cache.inputs.transpose(),
        encoder_b: dh.column_sum(),
        blocks: block_grads,
        decoder_w: d_decoder_w,
        decoder_b: d_decoder_b,
    })
}

/// Loss value split into its parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    /// Unweighted sum of Hankel nuclear norms.
    pub reg: f64,
}

/// `CE + λ Σ R_*` and its full gradient.
pub fn loss_and_grad(
    model: &SequenceModel,
    batch: &[&DMatrix<f64>],
    labels: &[usize],
    train: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(LossParts, ModelGrad, Cache)> {
    let (logits, cache) = forward(model, batch, train, rng)?;
    let (ce, d_logits) = cross_entropy(&logits, labels)?;
    let mut grad = backward(model, &cache, &d_logits)?;
    let lambda = model.config.reg;
    let mut reg = 0.0;
    if lambda > 0.0 {
        let layers = model.rotation_layers()?;
        let parts: Vec<(f64, hankel::RegGradient)> = layers
            .par_iter()
            .map(|l| hankel::reg_value_and_gradient_with(l, model.config.reg_solver))
            .collect::<Result<_>>()?;
        for (bg, (value, rg)) in grad.blocks.iter_mut().zip(parts) {
            reg += value;
            for (a, b) in bg.rho_raw.iter_mut().zip(&rg.d_rho_raw) {
                *a += lambda * b;
            }
            for (a, b) in bg.alpha_raw.iter_mut().zip(&rg.d_alpha_raw) {
                *a += lambda * b;
            }
            bg.b_learn += &rg.d_b * lambda;
            bg.c += &rg.d_c * lambda;
        }
    }
    let total = ce + lambda * reg;
    if !total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok((LossParts { total, ce, reg }, grad, cache))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_model, TrainConfig};
    use rand::SeedableRng;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            depth: 2,
            n: 4,
            p: 3,
            input_dim: 2,
            classes: 3,
            dropout: 0.0,
            ..TrainConfig::default()
        }
    }

    fn tiny_batch(seed: u64, bsz: usize, len: usize) -> (Vec<DMatrix<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = (0..bsz)
            .map(|_| DMatrix::from_fn(2, len, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let ys = (0..bsz).map(|i| i % 3).collect();
        (xs, ys)
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((gelu_grad(x) - fd).abs() < 1e-8);
        }
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn zero_input_gives_decoder_bias() {
        let mut model = init_model(&tiny_config(), 1).unwrap();
        model.decoder_b = DVector::from_vec(vec![0.1, -0.2, 0.3]);
        let x = DMatrix::zeros(2, 5);
        let (logits, _) = forward(&model, &[&x], false, None).unwrap();
        assert!((logits.column(0) - &model.decoder_b).norm() < 1e-15);
    }

    #[test]
    fn batch_matches_single_samples() {
        let model = init_model(&tiny_config(), 2).unwrap();
        let (xs, _) = tiny_batch(3, 4, 7);
        let refs: Vec<&DMatrix<f64>> = xs.iter().collect();
        let (all, _) = forward(&model, &refs, false, None).unwrap();
        for (b, x) in xs.iter().enumerate() {
            let (one, _) = forward(&model, &[x], false, None).unwrap();
            assert!((all.column(b) - one.column(0)).norm() < 1e-10);
        }
    }

    #[test]
    fn full_gradient_matches_differences() {
        let mut cfg = tiny_config();
        cfg.reg = 0.05;
        let mut model = init_model(&cfg, 4).unwrap();
        let (xs, ys) = tiny_batch(5, 3, 8);
        let refs: Vec<&DMatrix<f64>> = xs.iter().collect();
        let (_, grad, _) = loss_and_grad(&model, &refs, &ys, true, None).unwrap();
        let g = grad.flat();
        let theta = model.flat_params().unwrap();
        assert_eq!(g.len(), theta.len());
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for k in (0..theta.len()).step_by(3) {
            let mut m = model.clone();
            let mut t = theta.clone();
            t[k] += h;
            m.set_flat_params(&t).unwrap();
            let fp = loss_and_grad(&m, &refs, &ys, true, None).unwrap().0.total;
            t[k] -= 2.0 * h;
            m.set_flat_params(&t).unwrap();
            let fm = loss_and_grad(&m, &refs, &ys, true, None).unwrap().0.total;
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-6);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
