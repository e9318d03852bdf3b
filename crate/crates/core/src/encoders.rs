//! Text and mel encoders projecting both sequences into one hidden space.
//!
//! Text: embedding → scaled positional embedding → FFT blocks (multi-head
//! self-attention and a convolutional feed-forward, each with residual and
//! layer norm).
//!
//! Mel: linear prenet → two dilated convolutions → linear projection →
//! scaled positional embedding → one self-attention sublayer.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ParameterStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub fft_blocks: usize,
    pub conv_kernel: usize,
    pub mel_channels: usize,
    pub cnn_channels: usize,
    pub cnn_dilation: usize,
    pub dropout: f64,
    /// Whether FFT-block and mel self-attention sublayers use dropout.
    pub sublayer_dropout: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            model_dim: 64,
            heads: 2,
            ffn_hidden: 128,
            fft_blocks: 1,
            conv_kernel: 3,
            mel_channels: 8,
            cnn_channels: 32,
            cnn_dilation: 2,
            dropout: 0.1,
            sublayer_dropout: true,
        }
    }
}

impl EncoderConfig {
    /// Full-size configuration (512-dim, 8 heads, 3 FFT blocks, 80 mel bins).
    pub fn full_size(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            model_dim: 512,
            heads: 8,
            ffn_hidden: 2048,
            fft_blocks: 3,
            conv_kernel: 3,
            mel_channels: 80,
            cnn_channels: 256,
            cnn_dilation: 2,
            dropout: 0.1,
            sublayer_dropout: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("conv_kernel", self.conv_kernel),
            ("mel_channels", self.mel_channels),
            ("cnn_channels", self.cnn_channels),
            ("cnn_dilation", self.cnn_dilation),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config("conv_kernel must be odd".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Frames seen by one output of the mel convolution stack.
    pub fn mel_receptive_field(&self) -> usize {
        1 + 2 * (self.conv_kernel - 1) * self.cnn_dilation
    }
}

/// Dropout source; `None` means evaluation mode.
pub struct Dropout<'a> {
    rate: f64,
    rng: Option<&'a mut dyn rand::RngCore>,
}

impl<'a> Dropout<'a> {
    pub fn train(rate: f64, rng: &'a mut dyn rand::RngCore) -> Self {
        Self {
            rate,
            rng: Some(rng),
        }
    }

    pub fn eval() -> Self {
        Self { rate: 0.0, rng: None }
    }

    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if self.rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - self.rate);
        let shape = tape.value(x).shape().to_vec();
        let n = tape.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < self.rate { 0.0 } else { keep })
            .collect();
        let mask = tape.constant(Tensor::new(shape, mask)?);
        tape.mul(x, mask)
    }
}

fn xavier(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-limit..limit)).collect(),
    )
    .expect("shape and count agree")
}

pub(crate) fn init_linear(store: &mut ParameterStore, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{name}.weight"), xavier(rng, &[fan_in, fan_out], fan_in, fan_out));
    store.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
}

fn init_conv(store: &mut ParameterStore, rng: &mut impl Rng, name: &str, c_in: usize, c_out: usize, kernel: usize) {
    store.insert(
        format!("{name}.weight"),
        xavier(rng, &[c_out, c_in, kernel], c_in * kernel, c_out * kernel),
    );
    store.insert(format!("{name}.bias"), Tensor::zeros(&[c_out]));
}

fn init_layer_norm(store: &mut ParameterStore, name: &str, dim: usize) {
    store.insert(format!("{name}.gain"), Tensor::filled(&[dim], 1.0));
    store.insert(format!("{name}.bias"), Tensor::zeros(&[dim]));
}

fn init_attention(store: &mut ParameterStore, rng: &mut impl Rng, name: &str, dim: usize) {
    for proj in ["query", "key", "value", "out"] {
        init_linear(store, rng, &format!("{name}.{proj}"), dim, dim);
    }
}

/// Adds freshly initialized encoder parameters to `store`.
pub fn init_encoder_params(cfg: &EncoderConfig, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let d = cfg.model_dim;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    store.insert(
        "text.embedding",
        Tensor::new(
            vec![cfg.vocab_size, d],
            (0..cfg.vocab_size * d).map(|_| normal.sample(rng)).collect(),
        )?,
    );
    store.insert("text.pos_scale", Tensor::scalar(1.0));
    for b in 0..cfg.fft_blocks {
        let p = format!("text.block{b}");
        init_attention(store, rng, &format!("{p}.attn"), d);
        init_layer_norm(store, &format!("{p}.ln1"), d);
        init_conv(store, rng, &format!("{p}.ffn.conv1"), d, cfg.ffn_hidden, cfg.conv_kernel);
        init_conv(store, rng, &format!("{p}.ffn.conv2"), cfg.ffn_hidden, d, cfg.conv_kernel);
        init_layer_norm(store, &format!("{p}.ln2"), d);
    }
    init_linear(store, rng, "mel.prenet", cfg.mel_channels, cfg.cnn_channels);
    init_conv(store, rng, "mel.conv1", cfg.cnn_channels, cfg.cnn_channels, cfg.conv_kernel);
    init_conv(store, rng, "mel.conv2", cfg.cnn_channels, cfg.cnn_channels, cfg.conv_kernel);
    init_linear(store, rng, "mel.proj", cfg.cnn_channels, d);
    store.insert("mel.pos_scale", Tensor::scalar(1.0));
    init_attention(store, rng, "mel.attn", d);
    init_layer_norm(store, "mel.ln", d);
    Ok(())
}

fn bind(tape: &mut Tape, store: &ParameterStore, name: &str) -> Result<Var> {
    Ok(tape.param(name, store.require(name)?.clone()))
}

pub(crate) fn linear(tape: &mut Tape, store: &ParameterStore, name: &str, x: Var) -> Result<Var> {
    let w = bind(tape, store, &format!("{name}.weight"))?;
    let b = bind(tape, store, &format!("{name}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn conv(tape: &mut Tape, store: &ParameterStore, name: &str, x: Var, dilation: usize) -> Result<Var> {
    let w = bind(tape, store, &format!("{name}.weight"))?;
    let b = bind(tape, store, &format!("{name}.bias"))?;
    let y = tape.conv1d(x, w, dilation)?;
    tape.add_row(y, b)
}

fn layer_norm(tape: &mut Tape, store: &ParameterStore, name: &str, x: Var) -> Result<Var> {
    let gain = bind(tape, store, &format!("{name}.gain"))?;
    let bias = bind(tape, store, &format!("{name}.bias"))?;
    let n = tape.layer_norm(x, LAYER_NORM_EPS)?;
    let g = tape.mul_row(n, gain)?;
    tape.add_row(g, bias)
}

fn self_attention(tape: &mut Tape, store: &ParameterStore, name: &str, x: Var, heads: usize) -> Result<Var> {
    let q = linear(tape, store, &format!("{name}.query"), x)?;
    let k = linear(tape, store, &format!("{name}.key"), x)?;
    let v = linear(tape, store, &format!("{name}.value"), x)?;
    let dim = tape.value(x).cols();
    let head_dim = dim / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / (head_dim as f64).sqrt())?;
        let weights = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    let merged = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    linear(tape, store, &format!("{name}.out"), merged)
}

/// Sinusoidal table: `sin(pos / 10000^(2i/d))` on even channels, `cos` on odd.
pub fn sinusoid_table(length: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(&[length, dim]);
    for pos in 0..length {
        for c in 0..dim {
            let pair = (c / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            t.set(pos, c, if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

/// `scale · PE` as a tape node; `scale` is a one-element parameter.
pub fn scaled_positional_embedding(tape: &mut Tape, length: usize, dim: usize, scale: Var) -> Result<Var> {
    let table = tape.constant(sinusoid_table(length, dim));
    tape.mul_scalar(table, scale)
}

/// Embedding rows plus the scaled positional embedding; the FFT blocks'
/// input.
pub fn text_input(tape: &mut Tape, store: &ParameterStore, cfg: &EncoderConfig, tokens: &[usize]) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::InvalidInput("token sequence is empty".into()));
    }
    let table = bind(tape, store, "text.embedding")?;
    let emb = tape.embedding(table, tokens)?;
    let scale = bind(tape, store, "text.pos_scale")?;
    let pe = scaled_positional_embedding(tape, tokens.len(), cfg.model_dim, scale)?;
    tape.add(emb, pe)
}

/// Token hidden states, `I × model_dim`.
pub fn encode_text(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &EncoderConfig,
    tokens: &[usize],
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let mut x = text_input(tape, store, cfg, tokens)?;
    for b in 0..cfg.fft_blocks {
        let p = format!("text.block{b}");
        let mut att = self_attention(tape, store, &format!("{p}.attn"), x, cfg.heads)?;
        if cfg.sublayer_dropout {
            att = dropout.apply(tape, att)?;
        }
        let res = tape.add(x, att)?;
        x = layer_norm(tape, store, &format!("{p}.ln1"), res)?;

        let h = conv(tape, store, &format!("{p}.ffn.conv1"), x, 1)?;
        let h = tape.relu(h)?;
        let mut h = conv(tape, store, &format!("{p}.ffn.conv2"), h, 1)?;
        if cfg.sublayer_dropout {
            h = dropout.apply(tape, h)?;
        }
        let res = tape.add(x, h)?;
        x = layer_norm(tape, store, &format!("{p}.ln2"), res)?;
    }
    Ok(x)
}

/// Prenet and dilated convolution stack, `J × cnn_channels`.
pub fn mel_cnn_stack(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &EncoderConfig,
    mel: &Tensor,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    if !mel.is_matrix() || mel.rows() == 0 || mel.cols() != cfg.mel_channels {
        return Err(Error::shape(
            "encode_mel",
            format!("mel {:?}, expected J x {}", mel.shape(), cfg.mel_channels),
        ));
    }
    let x = tape.constant(mel.clone());
    let h = linear(tape, store, "mel.prenet", x)?;
    let h = tape.relu(h)?;
    let mut h = dropout.apply(tape, h)?;
    for layer in ["mel.conv1", "mel.conv2"] {
        h = conv(tape, store, layer, h, cfg.cnn_dilation)?;
        h = tape.relu(h)?;
        h = dropout.apply(tape, h)?;
    }
    Ok(h)
}

/// Frame hidden states, `J × model_dim`.
pub fn encode_mel(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &EncoderConfig,
    mel: &Tensor,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let h = mel_cnn_stack(tape, store, cfg, mel, dropout)?;
    let h = linear(tape, store, "mel.proj", h)?;
    let scale = bind(tape, store, "mel.pos_scale")?;
    let pe = scaled_positional_embedding(tape, mel.rows(), cfg.model_dim, scale)?;
    let x = tape.add(h, pe)?;
    let mut att = self_attention(tape, store, "mel.attn", x, cfg.heads)?;
    if cfg.sublayer_dropout {
        att = dropout.apply(tape, att)?;
    }
    let res = tape.add(x, att)?;
    layer_norm(tape, store, "mel.ln", res)
}
