//! Exhaustive enumeration of monotone boundary sequences.
//!
//! Every strictly increasing, duration-bounded sequence of boundaries
//! `0 = b_0 < b_1 < … < b_I ≤ J` is expanded explicitly together with its
//! probability (product of window-normalized energies along the path).
//! Prefixes whose last boundary already sits on frame `J` before all tokens
//! are placed cannot be extended; they are kept separately as leaked
//! mass. Marginals of this enumeration are the ground truth the DP is
//! checked against, so nothing here shares code with [`crate::align`]'s
//! recursions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::align::EnergyMatrix;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_TOKENS: usize = 6;
pub const MAX_FRAMES: usize = 10;
pub const MAX_DURATION: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryPath {
    /// Boundaries including the virtual `b_0 = 0`.
    pub boundaries: Vec<usize>,
    pub weight: f64,
}

impl BoundaryPath {
    /// Number of tokens placed by this path.
    pub fn tokens(&self) -> usize {
        self.boundaries.len() - 1
    }
}

#[derive(Debug, Clone)]
pub struct Enumeration {
    pub tokens: usize,
    pub frames: usize,
    /// Paths placing all `tokens` boundaries.
    pub complete: Vec<BoundaryPath>,
    /// Prefixes that reached frame `J` with tokens still unplaced.
    pub leaked: Vec<BoundaryPath>,
}

impl Enumeration {
    pub fn complete_mass(&self) -> f64 {
        self.complete.iter().map(|p| p.weight).sum()
    }

    pub fn leaked_mass(&self) -> f64 {
        self.leaked.iter().map(|p| p.weight).sum()
    }
}

pub fn enumerate_paths(e: &EnergyMatrix, max_duration: usize) -> Result<Enumeration> {
    let (tokens, frames) = (e.tokens(), e.frames());
    if tokens > MAX_TOKENS || frames > MAX_FRAMES || max_duration > MAX_DURATION {
        return Err(Error::OracleGuard(format!(
            "I={tokens}, J={frames}, D={max_duration} exceeds I<={MAX_TOKENS}, J<={MAX_FRAMES}, D<={MAX_DURATION}"
        )));
    }
    if tokens == 0 || frames == 0 || max_duration == 0 {
        return Err(Error::InvalidInput("empty instance".into()));
    }
    let mut out = Enumeration {
        tokens,
        frames,
        complete: Vec::new(),
        leaked: Vec::new(),
    };
    let mut prefix = vec![0usize];
    expand(e, max_duration, &mut prefix, 1.0, &mut out);
    Ok(out)
}

fn expand(
    e: &EnergyMatrix,
    max_duration: usize,
    prefix: &mut Vec<usize>,
    weight: f64,
    out: &mut Enumeration,
) {
    let placed = prefix.len() - 1;
    let last = *prefix.last().unwrap();
    if placed == out.tokens {
        out.complete.push(BoundaryPath {
            boundaries: prefix.clone(),
            weight,
        });
        return;
    }
    if last == out.frames {
        out.leaked.push(BoundaryPath {
            boundaries: prefix.clone(),
            weight,
        });
        return;
    }
    let hi = (last + max_duration).min(out.frames);
    let energies = e.values().row(placed);
    let norm: f64 = (last + 1..=hi).map(|j| energies[j - 1]).sum();
    for j in last + 1..=hi {
        prefix.push(j);
        expand(e, max_duration, prefix, weight * energies[j - 1] / norm, out);
        prefix.pop();
    }
}

/// Exact `alpha` and `beta` marginals, counting leaked prefixes for the
/// tokens they did place.
pub fn oracle_marginals(en: &Enumeration) -> (Tensor, Tensor) {
    let mut alpha = Tensor::zeros(&[en.tokens, en.frames]);
    let mut beta = Tensor::zeros(&[en.tokens, en.frames]);
    for path in en.complete.iter().chain(&en.leaked) {
        for i in 1..=path.tokens() {
            let (start, end) = (path.boundaries[i - 1], path.boundaries[i]);
            let a = alpha.get(i - 1, end - 1);
            alpha.set(i - 1, end - 1, a + path.weight);
            for j in start + 1..=end {
                let b = beta.get(i - 1, j - 1);
                beta.set(i - 1, j - 1, b + path.weight);
            }
        }
    }
    (alpha, beta)
}

/// `P(B_I ≥ j)` for every frame, from complete paths only.
pub fn coverage(en: &Enumeration) -> Vec<f64> {
    (1..=en.frames)
        .map(|j| {
            en.complete
                .iter()
                .filter(|p| *p.boundaries.last().unwrap() >= j)
                .map(|p| p.weight)
                .sum()
        })
        .collect()
}

/// Sweep of random instances over every `(I, J, D)` with
/// `I ≤ max_tokens`, `I ≤ J ≤ max_frames`, `D ≤ max_duration`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleGrid {
    pub max_tokens: usize,
    pub max_frames: usize,
    pub max_duration: usize,
    /// Random energy matrices per shape.
    pub trials: usize,
    pub seed: u64,
}

impl Default for OracleGrid {
    fn default() -> Self {
        Self {
            max_tokens: 4,
            max_frames: 8,
            max_duration: 4,
            trials: 100,
            seed: 0,
        }
    }
}

impl OracleGrid {
    pub fn validate(&self) -> Result<()> {
        if self.max_tokens > MAX_TOKENS || self.max_frames > MAX_FRAMES || self.max_duration > MAX_DURATION {
            return Err(Error::OracleGuard(format!(
                "grid I<={}, J<={}, D<={} exceeds I<={MAX_TOKENS}, J<={MAX_FRAMES}, D<={MAX_DURATION}",
                self.max_tokens, self.max_frames, self.max_duration
            )));
        }
        if self.max_tokens == 0 || self.max_frames == 0 || self.max_duration == 0 {
            return Err(Error::InvalidInput("grid bounds must be positive".into()));
        }
        Ok(())
    }

    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for i in 1..=self.max_tokens {
            for j in i..=self.max_frames {
                for d in 1..=self.max_duration {
                    out.push((i, j, d));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleReport {
    pub instances: usize,
    pub max_diff: f64,
    /// Shape `(I, J, D)` where `max_diff` occurred.
    pub worst: Option<(usize, usize, usize)>,
}

/// Energies `exp(u)` with `u ~ U(-3, 3)`.
pub fn random_energies(tokens: usize, frames: usize, rng: &mut impl Rng) -> Result<EnergyMatrix> {
    let values = (0..tokens * frames)
        .map(|_| rng.random_range(-3.0..3.0f64).exp())
        .collect();
    EnergyMatrix::from_energies(&Tensor::matrix(tokens, frames, values)?)
}

/// Compares `dp`'s `(alpha, beta)` with enumeration marginals on random
/// instances across `grid`. Each shape draws from its own seeded stream.
pub fn verify_grid<F>(grid: &OracleGrid, dp: F) -> Result<OracleReport>
where
    F: Fn(&EnergyMatrix, usize) -> Result<(Tensor, Tensor)> + Sync,
{
    grid.validate()?;
    let per_shape = grid
        .shapes()
        .into_par_iter()
        .map(|(i, j, d)| {
            let mut rng = ChaCha8Rng::seed_from_u64(grid.seed ^ ((i * 10_000 + j * 100 + d) as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
            let mut worst: f64 = 0.0;
            for _ in 0..grid.trials {
                let e = random_energies(i, j, &mut rng)?;
                let (oa, ob) = oracle_marginals(&enumerate_paths(&e, d)?);
                let (a, b) = dp(&e, d)?;
                let diff = a.max_abs_diff(&oa).max(b.max_abs_diff(&ob));
                // NaN must count as a failure.
                worst = if diff.is_nan() { f64::INFINITY } else { worst.max(diff) };
            }
            Ok(((i, j, d), worst))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = OracleReport {
        instances: per_shape.len() * grid.trials,
        max_diff: 0.0,
        worst: None,
    };
    for (shape, diff) in per_shape {
        if report.worst.is_none() || diff > report.max_diff {
            report.max_diff = diff;
            report.worst = Some(shape);
        }
    }
    if grid.trials == 0 {
        report.worst = None;
    }
    Ok(report)
}
