use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row indices kept when subsampling `frames` frames: the first of every pair.
pub fn interlace_rows(frames: usize) -> Vec<usize> {
    (0..frames).step_by(2).collect()
}

/// For each original frame, the subsampled column that covers it.
pub fn interlace_column_map(frames: usize) -> Vec<usize> {
    (0..frames).map(|c| c / 2).collect()
}

/// Max duration in subsampled frames.
pub fn subsampled_max_duration(max_duration: usize) -> usize {
    max_duration.div_ceil(2)
}

pub fn interlace_downsample(mel: &Tensor) -> Tensor {
    let cols = mel.cols();
    let rows = interlace_rows(mel.rows());
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in &rows {
        data.extend_from_slice(mel.row(*r));
    }
    Tensor::matrix(rows.len(), cols, data).expect("row gather preserves shape")
}

/// Restores full-length posteriors from a subsampled DP: `alpha` columns
/// land on the first frame of each pair with zeros in between, `beta`
/// columns are repeated for both frames of the pair.
pub fn interlace_recover(
    alpha_sub: &Tensor,
    beta_sub: &Tensor,
    frames: usize,
) -> Result<(Tensor, Tensor)> {
    let sub = frames.div_ceil(2);
    if alpha_sub.cols() != sub || beta_sub.cols() != sub || alpha_sub.rows() != beta_sub.rows() {
        return Err(Error::shape(
            "interlace_recover",
            format!(
                "alpha {:?}, beta {:?} for {frames} frames (expected {sub} columns)",
                alpha_sub.shape(),
                beta_sub.shape()
            ),
        ));
    }
    let tokens = alpha_sub.rows();
    let mut alpha = Tensor::zeros(&[tokens, frames]);
    let mut beta = Tensor::zeros(&[tokens, frames]);
    for i in 0..tokens {
        for c in 0..frames {
            if c % 2 == 0 {
                alpha.set(i, c, alpha_sub.get(i, c / 2));
            }
            beta.set(i, c, beta_sub.get(i, c / 2));
        }
    }
    Ok((alpha, beta))
}
