use monoalign::autodiff::Tape;
use monoalign::corpus::{generate, SynthSpec};
use monoalign::encoders::{Dropout, EncoderConfig};
use monoalign::inference::extract_corpus;
use monoalign::oracle::{verify_grid, OracleGrid};
use monoalign::trainer::{mse_loss, reconstruct, AlignMode, Model, ModelConfig};
use monoalign::{align, Tensor};

fn small_model(interlace: bool) -> Model {
    Model::init(
        ModelConfig {
            encoder: EncoderConfig {
                vocab_size: 6,
                model_dim: 8,
                heads: 2,
                ffn_hidden: 8,
                mel_channels: 3,
                cnn_channels: 4,
                ..EncoderConfig::default()
            },
            max_duration: 4,
            interlace,
        },
        17,
    )
    .unwrap()
}

fn mel(frames: usize, channels: usize) -> Tensor {
    Tensor::matrix(
        frames,
        channels,
        (0..frames * channels).map(|k| ((k * 7919) % 13) as f64 / 13.0 - 0.5).collect(),
    )
    .unwrap()
}

#[test]
fn oracle_grid_matches_dp() {
    let report = verify_grid(&OracleGrid::default(), |e, d| {
        let (a, b) = align::posteriors(e, d)?;
        Ok((a.0, b.0))
    })
    .unwrap();
    assert_eq!(report.instances, 100 * OracleGrid::default().shapes().len());
    assert!(report.max_diff < 1e-10, "{report:?}");
}

#[test]
fn reconstruction_has_mel_shape() {
    let model = small_model(false);
    let target = mel(9, 3);
    let mut tape = Tape::new();
    let rec = reconstruct(&mut tape, &model, &[1, 2, 5], &target, AlignMode::Clean { tau: 0.1 }, &mut Dropout::eval()).unwrap();
    assert_eq!(tape.value(rec.mel_hat).shape(), &[9, 3]);
    assert_eq!(tape.value(rec.beta).shape(), &[3, 9]);
    assert_eq!(rec.alpha.shape(), &[3, 9]);
}

/// With one token every frame expands the same hidden row, scaled by
/// `beta[0][j] = P(B_1 >= j)`, so predictions differ from the bias only by
/// that scale. A single frame has `beta = 1`.
#[test]
fn single_token_expands_one_row() {
    let model = small_model(false);
    let bias = model.params.get("head.proj.bias").unwrap().clone();
    for frames in [1, 3] {
        let mut tape = Tape::new();
        let rec = reconstruct(&mut tape, &model, &[4], &mel(frames, 3), AlignMode::Clean { tau: 1.0 }, &mut Dropout::eval()).unwrap();
        let out = tape.value(rec.mel_hat);
        let beta = tape.value(rec.beta);
        assert_eq!(beta.get(0, 0), 1.0);
        for j in 0..frames {
            for c in 0..3 {
                let unit = (out.get(0, c) - bias.data()[c]) / beta.get(0, 0);
                let here = (out.get(j, c) - bias.data()[c]) / beta.get(0, j);
                assert!((unit - here).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn zero_projection_on_zero_mel_has_zero_loss() {
    let mut model = small_model(false);
    for name in ["head.proj.weight", "head.proj.bias"] {
        model.params.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let target = Tensor::zeros(&[4, 3]);
    let mut tape = Tape::new();
    let rec = reconstruct(&mut tape, &model, &[0, 1], &target, AlignMode::Clean { tau: 1.0 }, &mut Dropout::eval()).unwrap();
    let loss = mse_loss(&mut tape, rec.mel_hat, &target).unwrap();
    assert_eq!(tape.value(loss).data()[0], 0.0);
}

#[test]
fn mse_gradient_is_scaled_difference() {
    let pred = mel(4, 3);
    let target = Tensor::matrix(4, 3, (0..12).map(|k| k as f64 / 10.0).collect()).unwrap();
    let mut tape = Tape::new();
    let p = tape.leaf(pred.clone());
    let loss = mse_loss(&mut tape, p, &target).unwrap();
    let g = tape.backward(loss).unwrap();
    for k in 0..12 {
        let expect = 2.0 * (pred.data()[k] - target.data()[k]) / 12.0;
        assert!((g.get(p).unwrap().data()[k] - expect).abs() < 1e-15);
    }
    let ones = Tensor::filled(&[4, 3], 1.0);
    let mut tape = Tape::new();
    let p = tape.leaf(ones);
    let loss = mse_loss(&mut tape, p, &Tensor::zeros(&[4, 3])).unwrap();
    assert_eq!(tape.value(loss).data()[0], 1.0);
}

#[test]
fn too_few_frames_is_an_error() {
    let model = small_model(true);
    let mut tape = Tape::new();
    // Interlacing leaves 2 alignable frames for 3 tokens.
    let r = reconstruct(&mut tape, &model, &[0, 1, 2], &mel(4, 3), AlignMode::Clean { tau: 1.0 }, &mut Dropout::eval());
    assert!(r.is_err());
}

#[test]
fn noisy_reconstruction_is_seed_deterministic() {
    use rand::SeedableRng;
    let model = small_model(false);
    let target = mel(8, 3);
    let run = || {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let rec = reconstruct(
            &mut tape,
            &model,
            &[3, 1],
            &target,
            AlignMode::Noisy {
                tau_final: 0.1,
                tau_max: 1.0,
                rng: &mut rng,
            },
            &mut Dropout::eval(),
        )
        .unwrap();
        tape.value(rec.mel_hat).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn extraction_is_deterministic_and_ordered() {
    let model = small_model(false);
    let data = generate(&SynthSpec {
        samples: 8,
        vocab_size: 6,
        mel_channels: 3,
        max_tokens: 4,
        seed: 2,
        ..SynthSpec::default()
    })
    .unwrap();
    let a = extract_corpus(&model, &data).unwrap();
    let b = extract_corpus(&model, &data).unwrap();
    assert_eq!(a, b);
    let ids: Vec<_> = a.results.iter().map(|r| r.record.utterance_id.clone()).collect();
    let expect: Vec<_> = data.iter().map(|u| u.id.clone()).collect();
    assert_eq!(ids, expect);
    for r in a.accepted_records() {
        assert_eq!(r.durations.iter().sum::<usize>(), r.frames);
    }
}
