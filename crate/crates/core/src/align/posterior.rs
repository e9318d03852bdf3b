use log::warn;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::EnergyMatrix;

/// `alpha[i][c]`: probability that token `i` ends at frame `c + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryPosterior(pub Tensor);

/// `beta[i][c]`: probability that frame `c + 1` belongs to token `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentPosterior(pub Tensor);

impl BoundaryPosterior {
    pub fn matrix(&self) -> &Tensor {
        &self.0
    }

    /// Total boundary mass per token; falls below 1 when earlier tokens
    /// exhaust the frames.
    pub fn row_mass(&self) -> Vec<f64> {
        (0..self.0.rows()).map(|i| self.0.row(i).iter().sum()).collect()
    }
}

impl AlignmentPosterior {
    pub fn matrix(&self) -> &Tensor {
        &self.0
    }
}

/// Softmax of `row[lo..hi]` with a window-local max shift, written into `out`.
#[inline]
fn window_softmax(row: &[f64], lo: usize, hi: usize, out: &mut [f64]) {
    let window = &row[lo..hi];
    let max = window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(window) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut().take(hi - lo) {
        *o /= total;
    }
}

/// Boundary distribution of token `token` given that the previous token
/// ended at frame `prev` (0 = before the first frame). Entry `t` is the
/// probability of boundary frame `prev + 1 + t`.
pub fn conditional_boundary(
    e: &EnergyMatrix,
    token: usize,
    prev: usize,
    max_duration: usize,
) -> Result<Vec<f64>> {
    let frames = e.frames();
    if prev >= frames {
        return Err(Error::InvalidInput(format!(
            "previous boundary {prev} leaves no frames out of {frames}"
        )));
    }
    if max_duration == 0 || token >= e.tokens() {
        return Err(Error::InvalidInput(format!(
            "token {token} / max duration {max_duration} out of range"
        )));
    }
    let hi = (prev + max_duration).min(frames);
    let mut out = vec![0.0; hi - prev];
    window_softmax(e.logits().row(token), prev, hi, &mut out);
    Ok(out)
}

fn check_dims(tokens: usize, frames: usize, max_duration: usize) -> Result<()> {
    if tokens == 0 || frames == 0 {
        return Err(Error::InvalidInput("alignment needs at least one token and frame".into()));
    }
    if tokens > frames {
        return Err(Error::InvalidInput(format!(
            "{tokens} tokens cannot be monotonically aligned to {frames} frames"
        )));
    }
    if max_duration == 0 {
        return Err(Error::InvalidInput("max duration must be at least 1".into()));
    }
    Ok(())
}

/// Probability mass of the previous token's boundary at frame `k`
/// (`k = 0` is the virtual start).
#[inline]
fn prev_mass(alpha: &Tensor, token: usize, k: usize) -> f64 {
    match (token, k) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => alpha.get(token - 1, k - 1),
    }
}

/// Runs the boundary and alignment recursions in one sweep.
///
/// Cost is `O(I·J·D)`; each previous-boundary state contributes a window
/// softmax to `alpha` and its suffix sums to `beta`.
pub fn posteriors(
    e: &EnergyMatrix,
    max_duration: usize,
) -> Result<(BoundaryPosterior, AlignmentPosterior)> {
    let (tokens, frames) = (e.tokens(), e.frames());
    check_dims(tokens, frames, max_duration)?;
    let logits = e.logits();
    let mut alpha = Tensor::zeros(&[tokens, frames]);
    let mut beta = Tensor::zeros(&[tokens, frames]);
    let mut p = vec![0.0; max_duration];

    for i in 0..tokens {
        for k in 0..frames {
            let a = prev_mass(&alpha, i, k);
            if a == 0.0 {
                continue;
            }
            let hi = (k + max_duration).min(frames);
            let width = hi - k;
            window_softmax(logits.row(i), k, hi, &mut p);
            let arow = alpha.row_mut(i);
            for t in 0..width {
                arow[k + t] += a * p[t];
            }
            let brow = beta.row_mut(i);
            let mut tail = 0.0;
            for t in (0..width).rev() {
                tail += p[t];
                brow[k + t] += a * tail;
            }
        }
    }

    let subnormal = count_subnormal(&alpha);
    if subnormal > 0 {
        warn!("boundary posterior has {subnormal} subnormal entries (I={tokens}, J={frames})");
    }
    Ok((BoundaryPosterior(alpha), AlignmentPosterior(beta)))
}

/// `alpha[i][j] = Σ_k alpha[i-1][k] · P(B_i = j | B_{i-1} = k)`.
pub fn boundary_forward(e: &EnergyMatrix, max_duration: usize) -> Result<BoundaryPosterior> {
    Ok(posteriors(e, max_duration)?.0)
}

/// `beta[i][j] = Σ_k alpha[i-1][k] · P(B_i ≥ j | B_{i-1} = k)` for a boundary
/// posterior previously computed from the same energies.
pub fn alignment_posterior(
    e: &EnergyMatrix,
    alpha: &BoundaryPosterior,
    max_duration: usize,
) -> Result<AlignmentPosterior> {
    let (tokens, frames) = (e.tokens(), e.frames());
    check_dims(tokens, frames, max_duration)?;
    if alpha.0.shape() != [tokens, frames] {
        return Err(Error::shape(
            "alignment_posterior",
            format!("alpha {:?} vs energy {tokens}x{frames}", alpha.0.shape()),
        ));
    }
    let mut beta = Tensor::zeros(&[tokens, frames]);
    let mut p = vec![0.0; max_duration];
    for i in 0..tokens {
        for k in 0..frames {
            let a = prev_mass(&alpha.0, i, k);
            if a == 0.0 {
                continue;
            }
            let hi = (k + max_duration).min(frames);
            window_softmax(e.logits().row(i), k, hi, &mut p);
            let brow = beta.row_mut(i);
            let mut tail = 0.0;
            for t in (0..hi - k).rev() {
                tail += p[t];
                brow[k + t] += a * tail;
            }
        }
    }
    Ok(AlignmentPosterior(beta))
}

/// Reverse pass of [`posteriors`]: given upstream gradients on `alpha`
/// and/or `beta`, returns the gradient with respect to the logits that
/// produced them.
pub fn posteriors_backward(
    logits: &Tensor,
    alpha: &Tensor,
    max_duration: usize,
    grad_alpha: Option<&Tensor>,
    grad_beta: Option<&Tensor>,
) -> Result<Tensor> {
    let (tokens, frames) = (logits.rows(), logits.cols());
    check_dims(tokens, frames, max_duration)?;
    for g in [Some(alpha), grad_alpha, grad_beta].into_iter().flatten() {
        if g.shape() != logits.shape() {
            return Err(Error::shape(
                "posteriors_backward",
                format!("{:?} vs logits {:?}", g.shape(), logits.shape()),
            ));
        }
    }
    // Adjoint of alpha accumulates contributions from the row below.
    let mut g_alpha = grad_alpha
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(&[tokens, frames]));
    let zero_beta;
    let g_beta = match grad_beta {
        Some(g) => g,
        None => {
            zero_beta = Tensor::zeros(&[tokens, frames]);
            &zero_beta
        }
    };
    let mut g_logits = Tensor::zeros(&[tokens, frames]);
    let mut p = vec![0.0; max_duration];
    let mut tail = vec![0.0; max_duration];
    let mut gp = vec![0.0; max_duration];

    for i in (0..tokens).rev() {
        for k in 0..frames {
            let a = prev_mass(alpha, i, k);
            let hi = (k + max_duration).min(frames);
            let width = hi - k;
            window_softmax(logits.row(i), k, hi, &mut p);
            let mut acc = 0.0;
            for t in (0..width).rev() {
                acc += p[t];
                tail[t] = acc;
            }
            let ga_row = g_alpha.row(i);
            let gb_row = g_beta.row(i);

            if i > 0 && k > 0 {
                let mut g_prev = 0.0;
                for t in 0..width {
                    g_prev += ga_row[k + t] * p[t] + gb_row[k + t] * tail[t];
                }
                let cur = g_alpha.get(i - 1, k - 1);
                g_alpha.set(i - 1, k - 1, cur + g_prev);
            }
            if a == 0.0 {
                continue;
            }

            // d beta[k+t'] / d p[t] = a for t' <= t, so the beta adjoint
            // enters as a running prefix sum.
            let ga_row = g_alpha.row(i);
            let mut prefix = 0.0;
            let mut dot = 0.0;
            for t in 0..width {
                prefix += gb_row[k + t];
                gp[t] = a * (ga_row[k + t] + prefix);
                dot += p[t] * gp[t];
            }
            let gl_row = g_logits.row_mut(i);
            for t in 0..width {
                gl_row[k + t] += p[t] * (gp[t] - dot);
            }
        }
    }
    Ok(g_logits)
}

/// Number of entries that have fallen into the subnormal range.
pub fn count_subnormal(t: &Tensor) -> usize {
    t.data()
        .iter()
        .filter(|v| **v != 0.0 && v.abs() < f64::MIN_POSITIVE)
        .count()
}
