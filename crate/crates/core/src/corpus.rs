//! Utterance corpora: synthetic generation with known durations and
//! JSON-lines persistence.
//!
//! One utterance per line:
//!
//! ```json
//! {"id":"utt00000","tokens":[3,1,4],"mel":{"J":6,"C":2,"values":[...]},"durations":[2,3,1]}
//! ```
//!
//! `values` is the `J × C` mel matrix flattened row-major (frame by frame).
//! `durations` is optional and only present for synthetic data.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub tokens: Vec<usize>,
    /// `J × C` frames.
    pub mel: Tensor,
    pub durations: Option<Vec<usize>>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.mel.rows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::InvalidInput(format!("{}: no tokens", self.id)));
        }
        if !self.mel.is_matrix() || self.mel.rows() == 0 {
            return Err(Error::InvalidInput(format!("{}: empty mel", self.id)));
        }
        if let Some(d) = &self.durations {
            if d.len() != self.tokens.len() {
                return Err(Error::InvalidInput(format!(
                    "{}: {} durations for {} tokens",
                    self.id,
                    d.len(),
                    self.tokens.len()
                )));
            }
            if d.contains(&0) || d.iter().sum::<usize>() != self.frames() {
                return Err(Error::InvalidInput(format!(
                    "{}: durations must be positive and sum to J={}",
                    self.id,
                    self.frames()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct MelRecord {
    #[serde(rename = "J")]
    frames: usize,
    #[serde(rename = "C")]
    channels: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct UtteranceRecord {
    id: String,
    tokens: Vec<usize>,
    mel: MelRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    durations: Option<Vec<usize>>,
}

impl From<&Utterance> for UtteranceRecord {
    fn from(u: &Utterance) -> Self {
        Self {
            id: u.id.clone(),
            tokens: u.tokens.clone(),
            mel: MelRecord {
                frames: u.mel.rows(),
                channels: u.mel.cols(),
                values: u.mel.data().to_vec(),
            },
            durations: u.durations.clone(),
        }
    }
}

impl TryFrom<UtteranceRecord> for Utterance {
    type Error = Error;

    fn try_from(r: UtteranceRecord) -> Result<Self> {
        let mel = Tensor::matrix(r.mel.frames, r.mel.channels, r.mel.values).map_err(|_| {
            Error::InvalidInput(format!(
                "{}: mel values do not match J={} x C={}",
                r.id, r.mel.frames, r.mel.channels
            ))
        })?;
        let u = Utterance {
            id: r.id,
            tokens: r.tokens,
            mel,
            durations: r.durations,
        };
        u.validate()?;
        Ok(u)
    }
}

pub fn to_json_line(u: &Utterance) -> String {
    serde_json::to_string(&UtteranceRecord::from(u)).expect("utterance serializes")
}

pub fn save(corpus: &[Utterance], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for u in corpus {
        writeln!(w, "{}", to_json_line(u)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Best-effort id of a damaged record, for error messages.
fn record_id_hint(line: &str) -> Option<&str> {
    let rest = &line[line.find("\"id\"")? + 4..];
    let rest = &rest[rest.find('"')? + 1..];
    Some(&rest[..rest.find('"')?])
}

pub fn parse(text: &str) -> Result<Vec<Utterance>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let describe = |msg: String| Error::Parse {
            line: n + 1,
            message: match record_id_hint(line) {
                Some(id) => format!("record '{id}': {msg}"),
                None => msg,
            },
        };
        let record: UtteranceRecord =
            serde_json::from_str(line).map_err(|e| describe(e.to_string()))?;
        out.push(Utterance::try_from(record).map_err(|e| describe(e.to_string()))?);
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<Vec<Utterance>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}

/// Parameters of a synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub vocab_size: usize,
    pub mel_channels: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Standard deviation of the Gaussian noise added to every frame.
    pub noise: f64,
    pub samples: usize,
    pub seed: u64,
    /// Templates are redrawn until every pair has cosine similarity below this.
    pub max_template_cosine: f64,
    /// Forbid the same token twice in a row (boundary between two
    /// identical templates is invisible in the frames).
    pub distinct_neighbors: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            mel_channels: 8,
            min_duration: 1,
            max_duration: 5,
            min_tokens: 3,
            max_tokens: 8,
            noise: 0.05,
            samples: 200,
            seed: 0,
            max_template_cosine: 0.8,
            distinct_neighbors: true,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return fail("durations need 1 <= min_duration <= max_duration");
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return fail("token counts need 1 <= min_tokens <= max_tokens");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail("noise must be a finite value >= 0");
        }
        if self.vocab_size == 0 || self.mel_channels == 0 {
            return fail("vocab_size and mel_channels must be positive");
        }
        if self.distinct_neighbors && self.vocab_size < 2 && self.max_tokens > 1 {
            return fail("distinct_neighbors needs at least two token ids");
        }
        Ok(())
    }

    pub fn from_key_values(mut kv: KeyValues) -> Result<Self> {
        let mut s = Self::default();
        kv.take_into("vocab_size", &mut s.vocab_size)?;
        kv.take_into("mel_channels", &mut s.mel_channels)?;
        kv.take_into("min_duration", &mut s.min_duration)?;
        kv.take_into("max_duration", &mut s.max_duration)?;
        kv.take_into("min_tokens", &mut s.min_tokens)?;
        kv.take_into("max_tokens", &mut s.max_tokens)?;
        kv.take_into("noise", &mut s.noise)?;
        kv.take_into("samples", &mut s.samples)?;
        kv.take_into("seed", &mut s.seed)?;
        kv.take_into("max_template_cosine", &mut s.max_template_cosine)?;
        kv.take_into("distinct_neighbors", &mut s.distinct_neighbors)?;
        kv.finish()?;
        s.validate()?;
        Ok(s)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

const TEMPLATE_ATTEMPTS: usize = 100_000;

fn draw_templates(spec: &SynthSpec, rng: &mut impl Rng) -> Result<Tensor> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let c = spec.mel_channels;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(spec.vocab_size);
    let mut attempts = 0;
    while rows.len() < spec.vocab_size {
        attempts += 1;
        if attempts > TEMPLATE_ATTEMPTS {
            return Err(Error::Config(format!(
                "could not draw {} templates in {} channels with cosine < {}",
                spec.vocab_size, c, spec.max_template_cosine
            )));
        }
        let cand: Vec<f64> = (0..c).map(|_| normal.sample(rng)).collect();
        if rows.iter().all(|r| cosine(r, &cand) < spec.max_template_cosine) {
            rows.push(cand);
        }
    }
    Tensor::from_rows(&rows)
}

/// Generates a corpus and returns it together with the per-token spectral
/// templates (`vocab × C`).
pub fn generate_with_templates(spec: &SynthSpec) -> Result<(Vec<Utterance>, Tensor)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let templates = draw_templates(spec, &mut rng)?;
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("valid noise level");
    let mut corpus = Vec::with_capacity(spec.samples);
    for idx in 0..spec.samples {
        let count = rng.random_range(spec.min_tokens..=spec.max_tokens);
        let mut tokens: Vec<usize> = Vec::with_capacity(count);
        while tokens.len() < count {
            let t = rng.random_range(0..spec.vocab_size);
            if spec.distinct_neighbors && tokens.last() == Some(&t) {
                continue;
            }
            tokens.push(t);
        }
        let durations: Vec<usize> = (0..count)
            .map(|_| rng.random_range(spec.min_duration..=spec.max_duration))
            .collect();
        let frames: usize = durations.iter().sum();
        let mut values = Vec::with_capacity(frames * spec.mel_channels);
        for (&tok, &d) in tokens.iter().zip(&durations) {
            for _ in 0..d {
                for &base in templates.row(tok) {
                    let n = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    values.push(base + n);
                }
            }
        }
        corpus.push(Utterance {
            id: format!("utt{idx:05}"),
            tokens,
            mel: Tensor::matrix(frames, spec.mel_channels, values)?,
            durations: Some(durations),
        });
    }
    Ok((corpus, templates))
}

pub fn generate(spec: &SynthSpec) -> Result<Vec<Utterance>> {
    Ok(generate_with_templates(spec)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_single_token_repeats_template() {
        let spec = SynthSpec {
            min_tokens: 1,
            max_tokens: 1,
            min_duration: 3,
            max_duration: 3,
            noise: 0.0,
            samples: 1,
            ..SynthSpec::default()
        };
        let (corpus, templates) = generate_with_templates(&spec).unwrap();
        let u = &corpus[0];
        assert_eq!(u.frames(), 3);
        for f in 0..3 {
            assert_eq!(u.mel.row(f), templates.row(u.tokens[0]));
        }
    }

    #[test]
    fn generated_utterances_satisfy_invariants() {
        let spec = SynthSpec {
            samples: 50,
            ..SynthSpec::default()
        };
        let (corpus, templates) = generate_with_templates(&spec).unwrap();
        assert_eq!(corpus.len(), 50);
        for u in &corpus {
            u.validate().unwrap();
            let d = u.durations.as_ref().unwrap();
            assert_eq!(d.iter().sum::<usize>(), u.frames());
            assert!(d.iter().all(|&x| (1..=5).contains(&x)));
            assert!((3..=8).contains(&u.tokens.len()));
            assert!(u.tokens.windows(2).all(|w| w[0] != w[1]));
        }
        for a in 0..templates.rows() {
            for b in 0..a {
                assert!(cosine(templates.row(a), templates.row(b)) < 0.8);
            }
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let spec = SynthSpec {
            samples: 5,
            seed: 42,
            ..SynthSpec::default()
        };
        let a: Vec<_> = generate(&spec).unwrap().iter().map(to_json_line).collect();
        let b: Vec<_> = generate(&spec).unwrap().iter().map(to_json_line).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn spec_validation() {
        let bad = SynthSpec {
            min_duration: 4,
            max_duration: 2,
            ..SynthSpec::default()
        };
        assert!(bad.validate().is_err());
        let kv = KeyValues::parse("samples=3\nmax_duration=2\nmin_duration=3\n").unwrap();
        assert!(SynthSpec::from_key_values(kv).is_err());
        let kv = KeyValues::parse("samples=3\nbogus=1\n").unwrap();
        assert!(SynthSpec::from_key_values(kv).is_err());
        let kv = KeyValues::parse("samples=3\nnoise=0.1\n").unwrap();
        let s = SynthSpec::from_key_values(kv).unwrap();
        assert_eq!((s.samples, s.noise), (3, 0.1));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let corpus = generate(&SynthSpec {
            samples: 10,
            ..SynthSpec::default()
        })
        .unwrap();
        let text: String = corpus.iter().map(|u| to_json_line(u) + "\n").collect();
        let back = parse(&text).unwrap();
        assert_eq!(back.len(), 10);
        for (a, b) in corpus.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.durations, b.durations);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.mel), bits(&b.mel));
        }
    }

    #[test]
    fn truncated_record_reports_line_and_id() {
        let corpus = generate(&SynthSpec {
            samples: 3,
            ..SynthSpec::default()
        })
        .unwrap();
        let mut text: String = corpus.iter().map(|u| to_json_line(u) + "\n").collect();
        text.truncate(text.len() - 20);
        match parse(&text) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("utt00002"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn inconsistent_records_are_rejected() {
        let bad_shape = r#"{"id":"x","tokens":[1],"mel":{"J":2,"C":2,"values":[1.0,2.0,3.0]}}"#;
        assert!(parse(bad_shape).is_err());
        let bad_sum = r#"{"id":"y","tokens":[1],"mel":{"J":1,"C":1,"values":[1.0]},"durations":[2]}"#;
        assert!(parse(bad_sum).is_err());
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        assert!(parse("").unwrap().is_empty());
        assert!(parse("\n\n").unwrap().is_empty());
    }
}
