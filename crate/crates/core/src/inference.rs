//! Hard boundary search, duration extraction and sample rejection.
//!
//! Durations are written as JSON lines, one accepted utterance per line:
//!
//! ```json
//! {"utterance_id":"utt00003","token_ids":[4,1,7],"durations":[3,2,4],"accepted":true,"J":9}
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{conditional_boundary, energy, EnergyMatrix, INFERENCE_TEMPERATURE};
use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::Model;

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn onehot(len: usize, index: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}

/// 1-based boundary frames. The last entry is always `J`; the boundary the
/// scan actually picked for the last token is kept in `scanned_last`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardBoundaries {
    pub boundaries: Vec<usize>,
    pub scanned_last: usize,
}

/// Greedy token-by-token boundary search over temperature-scaled logits.
///
/// Each token's boundary distribution is conditioned on the previous
/// token's hard boundary, and the highest-probability frame is taken.
pub fn scan_logits(logits: &Tensor, max_duration: usize) -> Result<HardBoundaries> {
    let e = EnergyMatrix::from_logits(logits.map(|l| l / INFERENCE_TEMPERATURE))?;
    let (tokens, frames) = (e.tokens(), e.frames());
    if tokens == 0 || frames == 0 {
        return Err(Error::InvalidInput("hard scan needs at least one token and frame".into()));
    }
    let mut boundaries = Vec::with_capacity(tokens);
    let mut prev = 0;
    for i in 0..tokens {
        if prev >= frames {
            return Err(Error::AlignmentFailure {
                token: i + 1,
                boundary: prev,
            });
        }
        let p = conditional_boundary(&e, i, prev, max_duration)?;
        prev += 1 + argmax(&p);
        boundaries.push(prev);
    }
    let scanned_last = prev;
    *boundaries.last_mut().expect("at least one token") = frames;
    Ok(HardBoundaries {
        boundaries,
        scanned_last,
    })
}

/// [`scan_logits`] on scaled dot-product energies of encoder outputs.
pub fn hard_boundary_scan(text: &Tensor, mel: &Tensor, max_duration: usize) -> Result<HardBoundaries> {
    scan_logits(energy(text, mel)?.logits(), max_duration)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DurationVector {
    pub durations: Vec<usize>,
    pub accepted: bool,
}

/// Differences of consecutive boundaries, with the last token taking
/// whatever frames remain. Rejected when that residual is not in `1..=D`.
pub fn durations_from_boundaries(boundaries: &[usize], frames: usize, max_duration: usize) -> DurationVector {
    let tokens = boundaries.len();
    let mut durations = Vec::with_capacity(tokens);
    let mut prev = 0;
    for &b in boundaries.iter().take(tokens.saturating_sub(1)) {
        durations.push(b.saturating_sub(prev));
        prev = b;
    }
    let last = frames as i64 - prev as i64;
    durations.push(last.max(0) as usize);
    let accepted = tokens > 0 && (1..=max_duration as i64).contains(&last);
    DurationVector { durations, accepted }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DurationRecord {
    pub utterance_id: String,
    pub token_ids: Vec<usize>,
    pub durations: Vec<usize>,
    pub accepted: bool,
    #[serde(rename = "J")]
    pub frames: usize,
}

/// Per-utterance result of extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub record: DurationRecord,
    /// `None` when the scan stranded tokens.
    pub boundaries: Option<HardBoundaries>,
    pub failure: Option<String>,
}

/// Agreement with reference durations where the corpus has them.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MatchStats {
    pub tokens: usize,
    pub exact_tokens: usize,
    pub boundaries: usize,
    pub boundaries_within_one: usize,
}

impl MatchStats {
    pub fn exact_rate(&self) -> f64 {
        ratio(self.exact_tokens, self.tokens)
    }

    pub fn within_one_rate(&self) -> f64 {
        ratio(self.boundaries_within_one, self.boundaries)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionReport {
    pub results: Vec<Extraction>,
    pub rejected: usize,
    /// Present when every utterance carries reference durations.
    pub matches: Option<MatchStats>,
}

impl ExtractionReport {
    pub fn total(&self) -> usize {
        self.results.len()
    }

    /// Rejected fraction; an empty corpus reports 0.
    pub fn rejection_rate(&self) -> f64 {
        ratio(self.rejected, self.total())
    }

    pub fn accepted_records(&self) -> impl Iterator<Item = &DurationRecord> {
        self.results
            .iter()
            .map(|r| &r.record)
            .filter(|r| r.accepted)
    }
}

/// Hard boundaries of one utterance under `model`, mapped back to full
/// frame rate when the model aligns on interlaced frames.
pub fn utterance_boundaries(model: &Model, utt: &Utterance) -> Result<HardBoundaries> {
    let (text, mel) = model.encode(&utt.tokens, &utt.mel)?;
    let frames = utt.frames();
    if !model.config.interlace {
        return hard_boundary_scan(&text, &mel, model.config.max_duration);
    }
    let keys = crate::align::interlace_downsample(&mel);
    let sub = hard_boundary_scan(&text, &keys, model.config.dp_max_duration())?;
    // Subsampled frame s covers original frames 2s-1 and 2s.
    let mut boundaries: Vec<usize> = sub.boundaries.iter().map(|&s| (2 * s).min(frames)).collect();
    *boundaries.last_mut().expect("at least one token") = frames;
    Ok(HardBoundaries {
        boundaries,
        scanned_last: (2 * sub.scanned_last).min(frames),
    })
}

pub fn extract_utterance(model: &Model, utt: &Utterance) -> Result<Extraction> {
    utt.validate()?;
    let frames = utt.frames();
    let record = |durations: Vec<usize>, accepted: bool| DurationRecord {
        utterance_id: utt.id.clone(),
        token_ids: utt.tokens.clone(),
        durations,
        accepted,
        frames,
    };
    match utterance_boundaries(model, utt) {
        Ok(b) => {
            let d = durations_from_boundaries(&b.boundaries, frames, model.config.max_duration);
            Ok(Extraction {
                record: record(d.durations, d.accepted),
                boundaries: Some(b),
                failure: None,
            })
        }
        Err(e @ (Error::AlignmentFailure { .. } | Error::InvalidInput(_))) => {
            log::warn!("rejecting '{}': {e}", utt.id);
            Ok(Extraction {
                record: record(Vec::new(), false),
                boundaries: None,
                failure: Some(e.to_string()),
            })
        }
        Err(e) => Err(e),
    }
}

/// Extracts durations for every utterance, in corpus order.
pub fn extract_corpus(model: &Model, corpus: &[Utterance]) -> Result<ExtractionReport> {
    let results = corpus
        .par_iter()
        .map(|u| extract_utterance(model, u))
        .collect::<Result<Vec<_>>>()?;
    let rejected = results.iter().filter(|r| !r.record.accepted).count();
    let matches = if corpus.iter().all(|u| u.durations.is_some()) {
        let mut s = MatchStats::default();
        for (u, r) in corpus.iter().zip(&results) {
            add_matches(&mut s, u.durations.as_deref().expect("checked"), r);
        }
        Some(s)
    } else {
        None
    };
    Ok(ExtractionReport {
        results,
        rejected,
        matches,
    })
}

/// Rejected utterances count as misses. Only the scanned boundaries
/// (all but the last, which is pinned to `J`) are compared.
fn add_matches(s: &mut MatchStats, truth: &[usize], r: &Extraction) {
    s.tokens += truth.len();
    s.boundaries += truth.len() - 1;
    if r.record.accepted {
        s.exact_tokens += truth
            .iter()
            .zip(&r.record.durations)
            .filter(|(a, b)| a == b)
            .count();
    }
    if let Some(b) = &r.boundaries {
        let mut cum = 0;
        for (t, &got) in truth.iter().zip(&b.boundaries).take(truth.len() - 1) {
            cum += t;
            if got.abs_diff(cum) <= 1 {
                s.boundaries_within_one += 1;
            }
        }
    }
}

pub fn write_durations(report: &ExtractionReport, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in report.accepted_records() {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_durations(path: &Path) -> Result<Vec<DurationRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: n + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn argmax_picks_peak_and_lowest_tie() {
        assert_eq!(argmax(&[0.2, 0.5, 0.3]), 1);
        assert_eq!(onehot(3, argmax(&[0.2, 0.5, 0.3])), vec![0.0, 1.0, 0.0]);
        assert_eq!(argmax(&[0.25, 0.25, 0.25, 0.25]), 0);
    }

    #[test]
    fn single_token_single_frame() {
        let b = scan_logits(&Tensor::matrix(1, 1, vec![0.3]).unwrap(), 4).unwrap();
        assert_eq!(b.boundaries, vec![1]);
        assert_eq!(b.scanned_last, 1);
    }

    #[test]
    fn uniform_logits_take_one_frame_per_token() {
        let b = scan_logits(&Tensor::zeros(&[3, 7]), 4).unwrap();
        assert_eq!(b.boundaries, vec![1, 2, 7]);
        assert_eq!(b.scanned_last, 3);
    }

    #[test]
    fn follows_peaks_in_logits() {
        let mut l = Tensor::zeros(&[3, 9]);
        l.set(0, 2, 5.0);
        l.set(1, 5, 5.0);
        l.set(2, 8, 5.0);
        let b = scan_logits(&l, 5).unwrap();
        assert_eq!(b.boundaries, vec![3, 6, 9]);
        let d = durations_from_boundaries(&b.boundaries, 9, 5);
        assert_eq!(d.durations, vec![3, 3, 3]);
        assert!(d.accepted);
    }

    #[test]
    fn stranded_tokens_are_alignment_failures() {
        // Token 1 grabs both frames, leaving nothing for token 2.
        let l = Tensor::matrix(2, 2, vec![0.0, 9.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            scan_logits(&l, 2),
            Err(Error::AlignmentFailure { token: 2, boundary: 2 })
        ));
    }

    #[test]
    fn residual_duration_rules() {
        let d = durations_from_boundaries(&[3, 7, 10], 10, 20);
        assert_eq!(d.durations, vec![3, 4, 3]);
        assert!(d.accepted);
        let d = durations_from_boundaries(&[5, 30], 30, 20);
        assert_eq!(d.durations, vec![5, 25]);
        assert!(!d.accepted);
        let d = durations_from_boundaries(&[4, 6, 6], 6, 20);
        assert_eq!(d.durations, vec![4, 2, 0]);
        assert!(!d.accepted);
    }

    #[test]
    fn record_json_uses_documented_keys() {
        let r = DurationRecord {
            utterance_id: "u".into(),
            token_ids: vec![1, 2],
            durations: vec![2, 1],
            accepted: true,
            frames: 3,
        };
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(
            s,
            r#"{"utterance_id":"u","token_ids":[1,2],"durations":[2,1],"accepted":true,"J":3}"#
        );
    }

    #[test]
    fn empty_corpus_reports_zero_rate() {
        let report = ExtractionReport {
            results: vec![],
            rejected: 0,
            matches: None,
        };
        assert_eq!(report.rejection_rate(), 0.0);
    }

    proptest! {
        #[test]
        fn scan_is_monotone_and_accepted_durations_are_valid(
            tokens in 1usize..6,
            extra in 0usize..12,
            d in 1usize..6,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let frames = tokens + extra;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let l = Tensor::matrix(tokens, frames, (0..tokens * frames).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
            match scan_logits(&l, d) {
                Ok(b) => {
                    let mut prev = 0;
                    for (i, &x) in b.boundaries.iter().enumerate() {
                        prop_assert!(x > prev && x <= frames);
                        if i + 1 < tokens {
                            prop_assert!(x - prev <= d);
                        }
                        prev = x;
                    }
                    let dv = durations_from_boundaries(&b.boundaries, frames, d);
                    if dv.accepted {
                        prop_assert_eq!(dv.durations.iter().sum::<usize>(), frames);
                        prop_assert!(dv.durations.iter().all(|&x| (1..=d).contains(&x)));
                    }
                }
                Err(Error::AlignmentFailure { .. }) => {}
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }
    }
}
