//! Model assembly, reconstruction loss and the Adam training loop.

mod model;
mod schedule;

pub use model::{mse_loss, reconstruct, AlignMode, Model, ModelConfig, Reconstruction};
pub use schedule::{noam_lr, tau_max_at};

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{AdamConfig, Tape};
use crate::config::KeyValues;
use crate::corpus::Utterance;
use crate::encoders::Dropout;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optimizer, schedule and batching settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Frame budget per batch; utterances are added until it would be exceeded.
    pub batch_frames: usize,
    pub warmup: usize,
    pub lr_scale: f64,
    /// `τ_max` at the first step.
    pub tau_start: f64,
    /// `τ_max` at the last step, also the lower end of the temperature range.
    pub tau_end: f64,
    pub seed: u64,
    /// Write `step_<n>.ckpt` every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Stop after this many total steps even if epochs remain.
    pub stop_after: Option<u64>,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_frames: 2000,
            warmup: 4000,
            lr_scale: 1.0,
            tau_start: 1.0,
            tau_end: 0.1,
            seed: 0,
            checkpoint_every: 0,
            stop_after: None,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Reads training keys out of `kv`, leaving other keys in place.
    pub fn take_from(kv: &mut KeyValues) -> Result<Self> {
        let mut c = Self::default();
        kv.take_into("epochs", &mut c.epochs)?;
        kv.take_into("batch_frames", &mut c.batch_frames)?;
        kv.take_into("warmup", &mut c.warmup)?;
        kv.take_into("lr_scale", &mut c.lr_scale)?;
        kv.take_into("tau_start", &mut c.tau_start)?;
        kv.take_into("tau_end", &mut c.tau_end)?;
        kv.take_into("seed", &mut c.seed)?;
        kv.take_into("checkpoint_every", &mut c.checkpoint_every)?;
        c.stop_after = kv.take("stop_after")?;
        kv.take_into("adam_beta1", &mut c.adam.beta1)?;
        kv.take_into("adam_beta2", &mut c.adam.beta2)?;
        kv.take_into("adam_eps", &mut c.adam.eps)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_frames == 0 {
            return bad("batch_frames must be positive");
        }
        if self.warmup == 0 {
            return bad("warmup must be positive");
        }
        if !(self.lr_scale > 0.0 && self.lr_scale.is_finite()) {
            return bad("lr_scale must be positive");
        }
        if !(self.tau_end > 0.0 && self.tau_end <= self.tau_start) {
            return bad("temperatures need 0 < tau_end <= tau_start");
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }
}

/// One row of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPoint {
    /// 1-based update number.
    pub step: u64,
    pub lr: f64,
    pub tau_max: f64,
    /// Mean reconstruction loss of the batch, before the update.
    pub loss: f64,
}

/// Shuffled, frame-budgeted batches for every epoch, in training order.
pub fn plan_batches(frame_counts: &[usize], batch_frames: usize, epochs: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut plan = Vec::new();
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..frame_counts.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        let mut batch = Vec::new();
        let mut frames = 0;
        for idx in order {
            let f = frame_counts[idx];
            if !batch.is_empty() && frames + f > batch_frames {
                plan.push(std::mem::take(&mut batch));
                frames = 0;
            }
            batch.push(idx);
            frames += f;
        }
        if !batch.is_empty() {
            plan.push(batch);
        }
    }
    plan
}

/// Independent stream for one sample of one step.
fn sample_rng(seed: u64, step: u64, sample: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&step.to_le_bytes());
    key[16..24].copy_from_slice(&(sample as u64).to_le_bytes());
    key[24..].copy_from_slice(b"trainrng");
    ChaCha8Rng::from_seed(key)
}

/// Whether the DP grid has at least one frame per token.
pub fn alignable(model: &ModelConfig, utt: &Utterance) -> bool {
    let grid = if model.interlace {
        utt.frames().div_ceil(2)
    } else {
        utt.frames()
    };
    utt.tokens.len() <= grid
}

struct SampleResult {
    loss: f64,
    grads: BTreeMap<String, Tensor>,
}

fn sample_step(model: &Model, utt: &Utterance, tau_final: f64, tau_max: f64, rng: &mut ChaCha8Rng) -> Result<SampleResult> {
    let mut tape = Tape::new();
    let rate = model.config.encoder.dropout;
    let mut noise_rng = rng.clone();
    // Keep dropout and Gumbel draws on separate streams so that changing the
    // dropout rate does not shift the noise.
    noise_rng.set_stream(1);
    let mut dropout = Dropout::train(rate, rng);
    let rec = reconstruct(
        &mut tape,
        model,
        &utt.tokens,
        &utt.mel,
        AlignMode::Noisy {
            tau_final,
            tau_max,
            rng: &mut noise_rng,
        },
        &mut dropout,
    )?;
    let loss = mse_loss(&mut tape, rec.mel_hat, &utt.mel)?;
    let grads = tape.backward(loss)?.parameter_grads(&tape);
    Ok(SampleResult {
        loss: tape.value(loss).data()[0],
        grads,
    })
}

/// Runs one update on `batch` and returns the batch loss.
fn train_step(model: &mut Model, corpus: &[Utterance], batch: &[usize], cfg: &TrainConfig, lr: f64, tau_max: f64) -> Result<f64> {
    let step = model.params.step();
    let usable: Vec<usize> = batch
        .iter()
        .copied()
        .filter(|&i| {
            let ok = alignable(&model.config, &corpus[i]);
            if !ok {
                log::warn!(
                    "skipping '{}': {} tokens, {} frames",
                    corpus[i].id,
                    corpus[i].tokens.len(),
                    corpus[i].frames()
                );
            }
            ok
        })
        .collect();
    let snapshot: &Model = model;
    let results: Vec<Result<SampleResult>> = usable
        .par_iter()
        .map(|&i| {
            let mut rng = sample_rng(cfg.seed, step, i);
            sample_step(snapshot, &corpus[i], cfg.tau_end, tau_max, &mut rng)
        })
        .collect();

    let n = usable.len().max(1) as f64;
    let mut total = BTreeMap::<String, Tensor>::new();
    let mut loss = 0.0;
    for (r, &i) in results.into_iter().zip(&usable) {
        let r = match r {
            Err(Error::NonFinite { .. }) => {
                return Err(Error::Diverged {
                    step: step as usize + 1,
                    tau_max,
                    utterance: corpus[i].id.clone(),
                })
            }
            other => other?,
        };
        if !r.loss.is_finite() {
            return Err(Error::Diverged {
                step: step as usize + 1,
                tau_max,
                utterance: corpus[i].id.clone(),
            });
        }
        loss += r.loss;
        for (name, g) in r.grads {
            match total.get_mut(&name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    total.insert(name, g);
                }
            }
        }
    }
    for g in total.values_mut() {
        g.data_mut().iter_mut().for_each(|x| *x /= n);
    }
    model.params.adam_step(&total, lr, &cfg.adam)?;
    Ok(loss / n)
}

/// Trains `model` on `corpus`, resuming from `model.params.step()`.
///
/// With `out_dir` set, appends to `loss_curve.csv`, writes periodic
/// `step_<n>.ckpt` files and a `final.ckpt`.
pub fn train(model: &mut Model, corpus: &[Utterance], cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<Vec<LossPoint>> {
    cfg.validate()?;
    model.config.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidInput("training corpus is empty".into()));
    }
    for utt in corpus {
        utt.validate()?;
        if utt.mel.cols() != model.config.encoder.mel_channels {
            return Err(Error::InvalidInput(format!(
                "'{}' has {} mel channels, model expects {}",
                utt.id,
                utt.mel.cols(),
                model.config.encoder.mel_channels
            )));
        }
        if let Some(&t) = utt.tokens.iter().find(|&&t| t >= model.config.encoder.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "'{}' has token {t} outside vocabulary of {}",
                utt.id, model.config.encoder.vocab_size
            )));
        }
    }

    let frames: Vec<usize> = corpus.iter().map(Utterance::frames).collect();
    let plan = plan_batches(&frames, cfg.batch_frames, cfg.epochs, cfg.seed);
    let total_steps = plan.len();
    let end = cfg
        .stop_after
        .map_or(total_steps, |s| (s as usize).min(total_steps));
    let start = model.params.step() as usize;

    let mut csv = match out_dir {
        Some(dir) => Some(open_curve(dir, start > 0)?),
        None => None,
    };
    let mut curve = Vec::with_capacity(end.saturating_sub(start));
    for (idx, batch) in plan.iter().enumerate().take(end).skip(start) {
        let step = idx as u64 + 1;
        let lr = noam_lr(step as usize, cfg.warmup, cfg.lr_scale, model.config.encoder.model_dim);
        let tau_max = tau_max_at(idx, total_steps, cfg.tau_start, cfg.tau_end);
        let loss = train_step(model, corpus, batch, cfg, lr, tau_max)?;
        let point = LossPoint { step, lr, tau_max, loss };
        log::debug!("step {step} lr {lr:.3e} tau_max {tau_max:.4} loss {loss:.6}");
        if let Some((w, path)) = csv.as_mut() {
            writeln!(w, "{},{},{},{}", step, lr, tau_max, loss).map_err(|e| Error::io(path.clone(), e))?;
        }
        curve.push(point);
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every as u64) {
                model.save(&dir.join(format!("step_{step}.ckpt")))?;
            }
        }
    }
    if let Some((mut w, path)) = csv {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(dir) = out_dir {
        model.save(&dir.join("final.ckpt"))?;
    }
    Ok(curve)
}

fn open_curve(dir: &Path, append: bool) -> Result<(BufWriter<File>, std::path::PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("loss_curve.csv");
    let existing = append && path.exists();
    let file = if existing {
        OpenOptions::new().append(true).open(&path)
    } else {
        File::create(&path)
    }
    .map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    if !existing {
        writeln!(w, "step,lr,tau_max,loss").map_err(|e| Error::io(&path, e))?;
    }
    Ok((w, path))
}

/// Clean-mode reconstruction loss of every alignable utterance.
pub fn evaluate_loss(model: &Model, corpus: &[Utterance], tau: f64) -> Result<f64> {
    let losses: Vec<Result<f64>> = corpus
        .par_iter()
        .filter(|u| alignable(&model.config, u))
        .map(|u| {
            let mut tape = Tape::new();
            let rec = reconstruct(&mut tape, model, &u.tokens, &u.mel, AlignMode::Clean { tau }, &mut Dropout::eval())?;
            let loss = mse_loss(&mut tape, rec.mel_hat, &u.mel)?;
            Ok(tape.value(loss).data()[0])
        })
        .collect();
    let mut sum = 0.0;
    let mut n = 0usize;
    for l in losses {
        sum += l?;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}
