//! Monotonic boundary attention.
//!
//! Tokens scan the frame sequence left to right. For token `i` the model
//! scores every frame as a candidate *boundary* (last frame of the token);
//! given the previous token's boundary `k`, the boundary of token `i` is
//! distributed over the window `k+1 ..= min(k+D, J)` in proportion to the
//! token–frame energies. Marginalizing over previous boundaries gives the
//! boundary posterior `alpha`; the alignment posterior `beta` is the
//! probability that a frame lies in the token's span.
//!
//! Conventions used throughout: matrices are `tokens × frames`, column `c`
//! is frame `c + 1`, and boundary values are 1-based frame numbers with 0
//! reserved for the virtual boundary before the first frame.

mod energy;
mod gumbel;
mod interlace;
mod posterior;

pub use energy::{energy, gumbel_energy, EnergyMatrix};
pub use gumbel::{gumbel_from_uniform, sample_gumbel, GumbelDraw};
pub use interlace::{
    interlace_column_map, interlace_downsample, interlace_recover, interlace_rows,
    subsampled_max_duration,
};
pub use posterior::{
    alignment_posterior, boundary_forward, conditional_boundary, count_subnormal, posteriors,
    posteriors_backward, AlignmentPosterior, BoundaryPosterior,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Temperature used for clean (noise-free) evaluation and inference.
pub const INFERENCE_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct AlignConfig {
    /// Maximum number of frames a single token may span.
    pub max_duration: usize,
    /// Current ceiling for sampled per-token temperatures.
    pub tau_max: f64,
    /// Lower end of the temperature range; also the annealing target.
    pub tau_final: f64,
    /// Run the DP on every second frame.
    pub interlace: bool,
    /// Add Gumbel noise to the logits.
    pub noise: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            max_duration: 20,
            tau_max: 1.0,
            tau_final: INFERENCE_TEMPERATURE,
            interlace: false,
            noise: true,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_duration == 0 {
            return Err(Error::InvalidInput("max duration must be at least 1".into()));
        }
        if !(self.tau_final > 0.0 && self.tau_final <= self.tau_max && self.tau_max <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "temperatures must satisfy 0 < tau_final ({}) <= tau_max ({}) <= 1",
                self.tau_final, self.tau_max
            )));
        }
        Ok(())
    }
}

/// `h̃ = βᵀ·H`: every frame receives the posterior-weighted mix of token
/// hidden states.
pub fn expand_hidden(beta: &Tensor, text: &Tensor) -> Result<Tensor> {
    if beta.rows() != text.rows() {
        return Err(Error::shape(
            "expand_hidden",
            format!("beta {:?} vs text {:?}", beta.shape(), text.shape()),
        ));
    }
    beta.transpose().matmul(text)
}
