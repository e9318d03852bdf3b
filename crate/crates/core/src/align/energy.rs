use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::GumbelDraw;

/// Token–frame energies, stored as logits plus a per-row max shift.
///
/// `values[i][j] = exp(logit[i][j] - shift[i])`, so the true energy is
/// `values[i][j] * exp(shift[i])`. Every quantity the DP needs is a ratio
/// of energies within one row, so the shift never has to be undone.
#[derive(Debug, Clone)]
pub struct EnergyMatrix {
    logits: Tensor,
    shift: Vec<f64>,
    values: Tensor,
}

impl EnergyMatrix {
    pub fn from_logits(logits: Tensor) -> Result<Self> {
        if !logits.is_matrix() {
            return Err(Error::shape("energy", format!("logits {:?}", logits.shape())));
        }
        if !logits.all_finite() {
            return Err(Error::NonFinite {
                context: "energy logits".into(),
            });
        }
        let shift: Vec<f64> = (0..logits.rows())
            .map(|i| logits.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mut values = logits.clone();
        for (i, s) in shift.iter().enumerate() {
            for v in values.row_mut(i) {
                *v = (*v - s).exp();
            }
        }
        Ok(Self {
            logits,
            shift,
            values,
        })
    }

    /// Builds the matrix from strictly positive energies.
    pub fn from_energies(energies: &Tensor) -> Result<Self> {
        if energies.data().iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::InvalidInput(
                "energies must be strictly positive and finite".into(),
            ));
        }
        Self::from_logits(energies.map(f64::ln))
    }

    pub fn tokens(&self) -> usize {
        self.logits.rows()
    }

    pub fn frames(&self) -> usize {
        self.logits.cols()
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn shift(&self) -> &[f64] {
        &self.shift
    }

    /// Shifted energies, `exp(logit - row max)`; each row peaks at 1.
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Unshifted energy `exp(logit)` of one token–frame pair.
    pub fn energy_at(&self, token: usize, frame_col: usize) -> f64 {
        self.logits.get(token, frame_col).exp()
    }
}

/// Scaled dot-product energies `exp(Q_i·K_j / √d)` with queries taken from
/// the text hidden rows and keys from the mel hidden rows.
pub fn energy(text: &Tensor, mel: &Tensor) -> Result<EnergyMatrix> {
    if !text.is_matrix() || !mel.is_matrix() || text.cols() != mel.cols() {
        return Err(Error::shape(
            "energy",
            format!("text {:?} vs mel {:?}", text.shape(), mel.shape()),
        ));
    }
    let scale = 1.0 / (text.cols() as f64).sqrt();
    let logits = text.matmul(&mel.transpose())?.map(|v| v * scale);
    EnergyMatrix::from_logits(logits)
}

/// Gumbel-perturbed, temperature-scaled energies
/// `exp(logit/τ_i + G_ij/τ_i)`.
pub fn gumbel_energy(logits: &Tensor, draw: &GumbelDraw) -> Result<EnergyMatrix> {
    if logits.shape() != draw.noise().shape() || draw.temperatures().len() != logits.rows() {
        return Err(Error::shape(
            "gumbel_energy",
            format!(
                "logits {:?} vs noise {:?} with {} temperatures",
                logits.shape(),
                draw.noise().shape(),
                draw.temperatures().len()
            ),
        ));
    }
    if let Some(t) = draw.temperatures().iter().find(|&&t| t <= 0.0) {
        return Err(Error::InvalidInput(format!("temperature {t} is not positive")));
    }
    let mut out = logits.clone();
    for (i, &tau) in draw.temperatures().iter().enumerate() {
        let noise = draw.noise().row(i);
        for (v, g) in out.row_mut(i).iter_mut().zip(noise) {
            *v = (*v + g) / tau;
        }
    }
    EnergyMatrix::from_logits(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::conditional_boundary;

    #[test]
    fn zero_dot_products_give_unit_energy() {
        let text = Tensor::zeros(&[3, 4]);
        let mel = Tensor::from_rows(&[vec![1.0; 4], vec![-2.0; 4]]).unwrap();
        let e = energy(&text, &mel).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(e.energy_at(i, j), 1.0);
                assert_eq!(e.values().get(i, j), 1.0);
            }
        }
    }

    #[test]
    fn dot_product_is_scaled_by_root_dim() {
        // d = 4, Q·K = 2 → logit 1
        let text = Tensor::from_rows(&[vec![1.0, 1.0, 0.0, 0.0]]).unwrap();
        let mel = Tensor::from_rows(&[vec![1.0, 1.0, 0.0, 0.0]]).unwrap();
        let e = energy(&text, &mel).unwrap();
        assert_eq!(e.logits().get(0, 0), 1.0);
        assert!((e.energy_at(0, 0) - std::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn row_shift_leaves_conditionals_unchanged() {
        let base = Tensor::from_rows(&[vec![0.3, -1.2, 2.5, 0.7, -0.4]]).unwrap();
        let shifted = base.map(|v| v + 37.0);
        let a = EnergyMatrix::from_logits(base).unwrap();
        let b = EnergyMatrix::from_logits(shifted).unwrap();
        for k in 0..5 {
            let pa = conditional_boundary(&a, 0, k, 3).unwrap();
            let pb = conditional_boundary(&b, 0, k, 3).unwrap();
            for (x, y) in pa.iter().zip(&pb) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn non_finite_logits_are_rejected() {
        let logits = Tensor::from_rows(&[vec![0.0, f64::NAN]]).unwrap();
        assert!(EnergyMatrix::from_logits(logits).is_err());
        let text = Tensor::from_rows(&[vec![f64::INFINITY, 0.0]]).unwrap();
        let mel = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(energy(&text, &mel).is_err());
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        assert!(energy(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 5])).is_err());
    }

    #[test]
    fn unit_temperature_without_noise_reduces_to_plain_energy() {
        let logits = Tensor::from_rows(&[vec![0.1, 0.2], vec![-0.5, 1.5]]).unwrap();
        let draw = GumbelDraw::noiseless(2, 2, 1.0);
        let g = gumbel_energy(&logits, &draw).unwrap();
        let plain = EnergyMatrix::from_logits(logits).unwrap();
        assert_eq!(g.values(), plain.values());
    }

    #[test]
    fn non_positive_temperature_is_rejected() {
        let logits = Tensor::zeros(&[1, 2]);
        let draw = GumbelDraw::noiseless(1, 2, 0.0);
        assert!(gumbel_energy(&logits, &draw).is_err());
    }
}
