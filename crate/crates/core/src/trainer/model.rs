use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{
    interlace_column_map, interlace_recover, interlace_rows, sample_gumbel,
    subsampled_max_duration, GumbelDraw,
};
use crate::autodiff::{read_checkpoint, write_checkpoint, ParameterStore, Tape, Var};
use crate::config::KeyValues;
use crate::encoders::{encode_mel, encode_text, init_encoder_params, init_linear, linear, Dropout, EncoderConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Architecture and alignment settings stored alongside the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Maximum frames per token.
    pub max_duration: usize,
    /// Run the alignment DP on every second frame.
    pub interlace: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            max_duration: 8,
            interlace: false,
        }
    }
}

impl ModelConfig {
    /// Reads model keys out of `kv`, leaving other keys in place.
    pub fn take_from(kv: &mut KeyValues) -> Result<Self> {
        let mut c = Self::default();
        let e = &mut c.encoder;
        kv.take_into("vocab_size", &mut e.vocab_size)?;
        kv.take_into("model_dim", &mut e.model_dim)?;
        kv.take_into("heads", &mut e.heads)?;
        kv.take_into("ffn_hidden", &mut e.ffn_hidden)?;
        kv.take_into("fft_blocks", &mut e.fft_blocks)?;
        kv.take_into("conv_kernel", &mut e.conv_kernel)?;
        kv.take_into("mel_channels", &mut e.mel_channels)?;
        kv.take_into("cnn_channels", &mut e.cnn_channels)?;
        kv.take_into("cnn_dilation", &mut e.cnn_dilation)?;
        kv.take_into("dropout", &mut e.dropout)?;
        kv.take_into("sublayer_dropout", &mut e.sublayer_dropout)?;
        kv.take_into("max_duration", &mut c.max_duration)?;
        kv.take_into("interlace", &mut c.interlace)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.max_duration == 0 {
            return Err(Error::Config("max_duration must be positive".into()));
        }
        Ok(())
    }

    pub fn to_header(&self) -> String {
        let e = &self.encoder;
        let mut kv = KeyValues::default();
        kv.insert("vocab_size", e.vocab_size);
        kv.insert("model_dim", e.model_dim);
        kv.insert("heads", e.heads);
        kv.insert("ffn_hidden", e.ffn_hidden);
        kv.insert("fft_blocks", e.fft_blocks);
        kv.insert("conv_kernel", e.conv_kernel);
        kv.insert("mel_channels", e.mel_channels);
        kv.insert("cnn_channels", e.cnn_channels);
        kv.insert("cnn_dilation", e.cnn_dilation);
        kv.insert("dropout", e.dropout);
        kv.insert("sublayer_dropout", e.sublayer_dropout);
        kv.insert("max_duration", self.max_duration);
        kv.insert("interlace", self.interlace);
        kv.render()
    }

    pub fn from_header(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let c = Self::take_from(&mut kv)?;
        kv.finish()?;
        Ok(c)
    }

    /// Duration bound on the grid the DP actually runs on.
    pub fn dp_max_duration(&self) -> usize {
        if self.interlace {
            subsampled_max_duration(self.max_duration)
        } else {
            self.max_duration
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterStore,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterStore::new();
        init_encoder_params(&config.encoder, &mut params, &mut rng)?;
        init_linear(
            &mut params,
            &mut rng,
            "head.proj",
            config.encoder.model_dim,
            config.encoder.mel_channels,
        );
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.config.to_header(), &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, params) = read_checkpoint(path)?;
        let config = ModelConfig::from_header(&header)?;
        let fresh = Model::init(config.clone(), 0)?;
        for (name, p) in fresh.params.iter() {
            let loaded = params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))?;
            if loaded.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' has shape {:?}, config implies {:?}",
                    loaded.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    /// Clean-mode encoder outputs `(text I × d, mel J × d)`.
    pub fn encode(&self, tokens: &[usize], mel: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let cfg = &self.config.encoder;
        let t = encode_text(&mut tape, &self.params, cfg, tokens, &mut Dropout::eval())?;
        let m = encode_mel(&mut tape, &self.params, cfg, mel, &mut Dropout::eval())?;
        Ok((tape.value(t).clone(), tape.value(m).clone()))
    }
}

/// How the alignment logits are discretized.
pub enum AlignMode<'a> {
    /// Training: per-token temperatures from `U(tau_final, tau_max)` plus
    /// Gumbel noise drawn from `rng`.
    Noisy {
        tau_final: f64,
        tau_max: f64,
        rng: &'a mut dyn RngCore,
    },
    /// Fixed temperature, no noise.
    Clean { tau: f64 },
}

/// Nodes and side products of one reconstruction pass.
pub struct Reconstruction {
    pub text: Var,
    pub mel_hidden: Var,
    /// Scaled dot-product logits on the DP grid, before temperature/noise.
    pub logits: Var,
    /// Alignment posterior at full frame rate (`I × J`).
    pub beta: Var,
    /// Boundary posterior at full frame rate (`I × J`).
    pub alpha: Tensor,
    pub mel_hat: Var,
    pub draw: Option<GumbelDraw>,
}

/// Encoders → alignment → expansion → linear projection back to mel.
pub fn reconstruct(
    tape: &mut Tape,
    model: &Model,
    tokens: &[usize],
    mel: &Tensor,
    mode: AlignMode<'_>,
    dropout: &mut Dropout<'_>,
) -> Result<Reconstruction> {
    let cfg = &model.config;
    let store = &model.params;
    let text = encode_text(tape, store, &cfg.encoder, tokens, dropout)?;
    let mel_hidden = encode_mel(tape, store, &cfg.encoder, mel, dropout)?;
    let frames = mel.rows();
    let keys = if cfg.interlace {
        tape.gather_rows(mel_hidden, &interlace_rows(frames))?
    } else {
        mel_hidden
    };
    let grid = tape.value(keys).rows();
    if tokens.len() > grid {
        return Err(Error::InvalidInput(format!(
            "{} tokens exceed {} alignable frames",
            tokens.len(),
            grid
        )));
    }
    let keys_t = tape.transpose(keys)?;
    let dots = tape.matmul(text, keys_t)?;
    let logits = tape.scale(dots, 1.0 / (cfg.encoder.model_dim as f64).sqrt())?;

    let (scaled, draw) = match mode {
        AlignMode::Noisy {
            tau_final,
            tau_max,
            rng,
        } => {
            let draw = sample_gumbel(tokens.len(), grid, tau_final, tau_max, rng)?;
            let noise = tape.constant(draw.noise().clone());
            let noisy = tape.add(logits, noise)?;
            let inv_tau = Tensor::vector(draw.temperatures().iter().map(|t| 1.0 / t).collect());
            let inv_tau = tape.constant(inv_tau);
            (tape.mul_col(noisy, inv_tau)?, Some(draw))
        }
        AlignMode::Clean { tau } => {
            if tau <= 0.0 {
                return Err(Error::InvalidInput(format!("temperature {tau} is not positive")));
            }
            (tape.scale(logits, 1.0 / tau)?, None)
        }
    };

    let beta_grid = tape.monotonic_align(scaled, cfg.dp_max_duration())?;
    let alpha_grid = tape
        .boundary_posterior(beta_grid)
        .expect("alignment node keeps alpha")
        .clone();
    let (beta, alpha) = if cfg.interlace {
        let beta = tape.gather_cols(beta_grid, &interlace_column_map(frames))?;
        let (alpha, _) = interlace_recover(&alpha_grid, tape.value(beta_grid), frames)?;
        (beta, alpha)
    } else {
        (beta_grid, alpha_grid)
    };

    let beta_t = tape.transpose(beta)?;
    let expanded = tape.matmul(beta_t, text)?;
    let mel_hat = linear(tape, store, "head.proj", expanded)?;
    Ok(Reconstruction {
        text,
        mel_hidden,
        logits,
        beta,
        alpha,
        mel_hat,
        draw,
    })
}

/// Mean of squared differences over all `J × C` entries.
pub fn mse_loss(tape: &mut Tape, prediction: Var, target: &Tensor) -> Result<Var> {
    if tape.value(prediction).shape() != target.shape() {
        return Err(Error::shape(
            "mse_loss",
            format!(
                "prediction {:?} vs target {:?}",
                tape.value(prediction).shape(),
                target.shape()
            ),
        ));
    }
    let n = target.len() as f64;
    let target = tape.constant(target.clone());
    let diff = tape.sub(prediction, target)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    tape.scale(total, 1.0 / n)
}
