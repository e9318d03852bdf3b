use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One draw of per-token temperatures and per-pair Gumbel noise.
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelDraw {
    temperatures: Vec<f64>,
    uniforms: Tensor,
    noise: Tensor,
}

/// Smallest uniform value we let through; keeps `-ln(-ln u)` finite at both ends.
const UNIFORM_EPS: f64 = 1e-300;

/// `G = -ln(-ln u)` for `u ∈ (0, 1)`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

impl GumbelDraw {
    /// No noise and the same temperature for every token.
    pub fn noiseless(tokens: usize, frames: usize, tau: f64) -> Self {
        // u = 1/e maps to G = 0.
        Self {
            temperatures: vec![tau; tokens],
            uniforms: Tensor::filled(&[tokens, frames], (-1.0f64).exp()),
            noise: Tensor::zeros(&[tokens, frames]),
        }
    }

    /// Builds a draw from explicit uniforms.
    pub fn from_uniforms(temperatures: Vec<f64>, uniforms: Tensor) -> Result<Self> {
        if temperatures.len() != uniforms.rows() {
            return Err(Error::shape(
                "gumbel_draw",
                format!(
                    "{} temperatures for {} tokens",
                    temperatures.len(),
                    uniforms.rows()
                ),
            ));
        }
        if uniforms.data().iter().any(|&u| !(u > 0.0 && u < 1.0)) {
            return Err(Error::InvalidInput("uniform draws must lie in (0, 1)".into()));
        }
        let noise = uniforms.map(gumbel_from_uniform);
        Ok(Self {
            temperatures,
            uniforms,
            noise,
        })
    }

    pub fn temperatures(&self) -> &[f64] {
        &self.temperatures
    }

    pub fn uniforms(&self) -> &Tensor {
        &self.uniforms
    }

    pub fn noise(&self) -> &Tensor {
        &self.noise
    }
}

/// Samples `τ_i ~ U(tau_final, tau_max)` per token and `G_ij ~ Gumbel(0, 1)`
/// per token–frame pair.
pub fn sample_gumbel<R: Rng + ?Sized>(
    tokens: usize,
    frames: usize,
    tau_final: f64,
    tau_max: f64,
    rng: &mut R,
) -> Result<GumbelDraw> {
    if !(tau_final > 0.0 && tau_final <= tau_max) {
        return Err(Error::InvalidInput(format!(
            "temperature range [{tau_final}, {tau_max}] is empty or non-positive"
        )));
    }
    let temperatures = (0..tokens)
        .map(|_| {
            if tau_max > tau_final {
                rng.random_range(tau_final..=tau_max)
            } else {
                tau_final
            }
        })
        .collect();
    let uniforms: Vec<f64> = (0..tokens * frames)
        .map(|_| rng.random::<f64>().clamp(UNIFORM_EPS, 1.0 - f64::EPSILON / 2.0))
        .collect();
    GumbelDraw::from_uniforms(temperatures, Tensor::matrix(tokens, frames, uniforms)?)
}
