//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use monoalign::align::{interlace_downsample, interlace_recover, posteriors, EnergyMatrix};
use monoalign::autodiff::Tape;
use monoalign::corpus::{self, generate, SynthSpec, Utterance};
use monoalign::encoders::{Dropout, EncoderConfig};
use monoalign::inference::{durations_from_boundaries, extract_corpus, scan_logits, ExtractionReport};
use monoalign::oracle::{enumerate_paths, oracle_marginals};
use monoalign::trainer::{mse_loss, reconstruct, train, AlignMode, LossPoint, Model, ModelConfig, TrainConfig};
use monoalign::Tensor;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

// Criterion 1

fn oracle_equivalence() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    for i in 1..=4 {
        for j in i..=8 {
            for d in 1..=4 {
                for _ in 0..100 {
                    let values = (0..i * j).map(|_| rng.random_range(-3.0..3.0f64).exp()).collect();
                    let e = EnergyMatrix::from_energies(&Tensor::matrix(i, j, values).unwrap()).unwrap();
                    let (oa, ob) = oracle_marginals(&enumerate_paths(&e, d).unwrap());
                    let (a, b) = posteriors(&e, d).unwrap();
                    let diff = a.0.max_abs_diff(&oa).max(b.0.max_abs_diff(&ob));
                    worst = if diff.is_nan() { f64::INFINITY } else { worst.max(diff) };
                    instances += 1;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        worst < 1e-10 && elapsed < Duration::from_secs(60),
        format!("max |DP - oracle| = {worst:.2e} over {instances} instances (< 1e-10), {}", secs(elapsed)),
    )
}

// Criterion 2

fn hand_instance() -> Verdict {
    let mut ok = true;
    let mut worst: f64 = 0.0;
    let mut beta_first = f64::NAN;
    let mut leaked = f64::NAN;
    for d in 3..=5 {
        let e = EnergyMatrix::from_energies(&Tensor::filled(&[2, 3], 1.0)).unwrap();
        let (a, b) = posteriors(&e, d).unwrap();
        let expect_a = [[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], [0.0, 1.0 / 6.0, 1.0 / 2.0]];
        let expect_b = [[1.0, 2.0 / 3.0, 1.0 / 3.0], [0.0, 1.0 / 3.0, 1.0 / 2.0]];
        for i in 0..2 {
            for j in 0..3 {
                worst = worst.max((a.0.get(i, j) - expect_a[i][j]).abs());
                worst = worst.max((b.0.get(i, j) - expect_b[i][j]).abs());
            }
        }
        leaked = 1.0 - a.row_mass()[1];
        let en = enumerate_paths(&e, d).unwrap();
        ok &= (en.leaked_mass() - 1.0 / 3.0).abs() < 1e-12;
        ok &= (leaked - 1.0 / 3.0).abs() < 1e-12;
        beta_first = b.0.get(0, 0);
        ok &= beta_first == 1.0;
    }
    ok &= worst < 1e-12;
    verdict(
        ok,
        format!("D=3..5: max deviation from hand values {worst:.2e}, leaked mass {leaked:.6}, beta[1][1] = {beta_first}"),
    )
}

// Criterion 3

fn micro_gradient_check() -> Verdict {
    let start = Instant::now();
    let config = ModelConfig {
        encoder: EncoderConfig {
            vocab_size: 5,
            model_dim: 8,
            heads: 2,
            ffn_hidden: 16,
            fft_blocks: 1,
            mel_channels: 4,
            cnn_channels: 8,
            ..EncoderConfig::default()
        },
        max_duration: 3,
        interlace: false,
    };
    let mut model = Model::init(config, 11).unwrap();
    // Nonzero biases so their gradients are exercised away from init.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let names: Vec<String> = model.params.names().cloned().collect();
    for name in &names {
        if name.ends_with(".bias") {
            for v in model.params.get_mut(name).unwrap().data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    let tokens = [1, 3];
    let mel = Tensor::matrix(4, 4, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();

    let loss_of = |m: &Model| -> (f64, Option<std::collections::BTreeMap<String, Tensor>>) {
        let mut tape = Tape::new();
        let rec = reconstruct(&mut tape, m, &tokens, &mel, AlignMode::Clean { tau: 1.0 }, &mut Dropout::eval()).unwrap();
        let loss = mse_loss(&mut tape, rec.mel_hat, &mel).unwrap();
        let grads = tape.backward(loss).unwrap().parameter_grads(&tape);
        (tape.value(loss).data()[0], Some(grads))
    };
    let (_, grads) = loss_of(&model);
    let grads = grads.unwrap();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut worst_name = String::new();
    let mut checked = 0;
    for name in &names {
        let n = model.params.get(name).unwrap().len();
        for k in 0..n {
            let orig = model.params.get(name).unwrap().data()[k];
            model.params.get_mut(name).unwrap().data_mut()[k] = orig + h;
            let plus = loss_of(&model).0;
            model.params.get_mut(name).unwrap().data_mut()[k] = orig - h;
            let minus = loss_of(&model).0;
            model.params.get_mut(name).unwrap().data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads[name].data()[k];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
                worst_name = format!("{name}[{k}]");
            }
            checked += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        worst < 1e-4 && elapsed < Duration::from_secs(30),
        format!(
            "{checked} parameters in {} tensors, max relative error {worst:.2e} at {worst_name} (< 1e-4), {}",
            names.len(),
            secs(elapsed)
        ),
    )
}

// Criteria 4 to 6 share one trained model.

struct Recovery {
    model: Model,
    eval: Vec<Utterance>,
    report: ExtractionReport,
    curve: Vec<LossPoint>,
    elapsed: Duration,
}

fn recovery_model_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            vocab_size: 16,
            model_dim: 32,
            ffn_hidden: 64,
            mel_channels: 8,
            // Synthetic frames are constant within a token, so two dilation-2
            // layers see only even offsets and cannot tell a boundary at j
            // from one at j+1.
            cnn_dilation: 1,
            ..EncoderConfig::default()
        },
        max_duration: 8,
        interlace: false,
    }
}

fn run_recovery() -> Recovery {
    let spec = SynthSpec {
        samples: 220,
        vocab_size: 16,
        mel_channels: 8,
        min_tokens: 3,
        max_tokens: 8,
        min_duration: 1,
        max_duration: 5,
        noise: 0.05,
        seed: 100,
        ..SynthSpec::default()
    };
    let mut data = generate(&spec).unwrap();
    let eval = data.split_off(200);
    let cfg = TrainConfig {
        epochs: 1200,
        batch_frames: 256,
        warmup: 1000,
        lr_scale: 1.0,
        seed: 0,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let mut model = Model::init(recovery_model_config(), 0).unwrap();
    let curve = train(&mut model, &data, &cfg, None).unwrap();
    let elapsed = start.elapsed();
    let report = extract_corpus(&model, &eval).unwrap();
    Recovery {
        model,
        eval,
        report,
        curve,
        elapsed,
    }
}

fn duration_recovery(r: &Recovery) -> Verdict {
    let m = r.report.matches.expect("synthetic corpus has durations");
    let steps = r.curve.len();
    let first = r.curve.first().map_or(f64::NAN, |p| p.loss);
    let tail = &r.curve[steps.saturating_sub(50)..];
    let last = tail.iter().map(|p| p.loss).sum::<f64>() / tail.len() as f64;
    // The gate counts rejected utterances as misses; accepted-only rates are
    // printed alongside.
    let (mut acc_tokens, mut acc_exact) = (0, 0);
    for (x, u) in r.report.results.iter().zip(&r.eval) {
        if x.record.accepted {
            let truth = u.durations.as_ref().unwrap();
            acc_tokens += truth.len();
            acc_exact += truth.iter().zip(&x.record.durations).filter(|(a, b)| a == b).count();
        }
    }
    let acc_rate = acc_exact as f64 / acc_tokens.max(1) as f64;
    verdict(
        m.exact_rate() >= 0.8
            && m.within_one_rate() >= 0.95
            && r.report.rejection_rate() < 0.1
            && steps <= 20_000
            && r.elapsed < Duration::from_secs(600),
        format!(
            "exact durations {:.3} ({}/{}, >= 0.80), boundaries within 1 frame {:.3} ({}/{}, >= 0.95), rejected {}/{} (< 10%), {steps} steps in {} (loss {first:.3} -> {last:.4}); accepted-only exact {acc_rate:.3}",
            m.exact_rate(),
            m.exact_tokens,
            m.tokens,
            m.within_one_rate(),
            m.boundaries_within_one,
            m.boundaries,
            r.report.rejected,
            r.report.total(),
            secs(r.elapsed)
        ),
    )
}

// Criterion 5

fn inference_contracts(r: &Recovery) -> Verdict {
    let d = r.model.config.max_duration;
    let mut ok = true;
    let mut accepted = 0;
    for (x, utt) in r.report.results.iter().zip(&r.eval) {
        let rec = &x.record;
        if !rec.accepted {
            continue;
        }
        accepted += 1;
        let j = utt.frames();
        let n = rec.durations.len();
        ok &= n == utt.tokens.len();
        ok &= rec.durations.iter().sum::<usize>() == j;
        ok &= rec.durations.iter().all(|&x| (1..=d).contains(&x));
        ok &= rec.durations[n - 1] == j - rec.durations[..n - 1].iter().sum::<usize>();
    }
    // Residual rule on a crafted scan: J=30, I=2, first boundary at 5, D=20.
    let mut logits = Tensor::zeros(&[2, 30]);
    logits.set(0, 4, 1.0);
    let b = scan_logits(&logits, 20).unwrap();
    let crafted = durations_from_boundaries(&b.boundaries, 30, 20);
    ok &= b.boundaries == vec![5, 30] && crafted.durations == vec![5, 25] && !crafted.accepted;
    verdict(
        ok,
        format!(
            "{accepted} accepted eval samples satisfy sum d = J, 1 <= d <= {d}, residual last duration; crafted J=30, b1=5, D=20 gives d={:?}, accepted={}",
            crafted.durations, crafted.accepted
        ),
    )
}

// Criterion 6

fn column_entropy(beta: &Tensor) -> f64 {
    let mut total = 0.0;
    for j in 0..beta.cols() {
        let col = beta.column(j);
        let mass: f64 = col.iter().sum();
        total -= col
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| (p / mass) * (p / mass).ln())
            .sum::<f64>();
    }
    total / beta.cols() as f64
}

fn mean_entropy(model: &Model, data: &[Utterance], tau: f64) -> f64 {
    let mut sum = 0.0;
    for u in data {
        let mut tape = Tape::new();
        let rec = reconstruct(&mut tape, model, &u.tokens, &u.mel, AlignMode::Clean { tau }, &mut Dropout::eval()).unwrap();
        sum += column_entropy(tape.value(rec.beta));
    }
    sum / data.len() as f64
}

fn discreteness(r: &Recovery) -> Verdict {
    let sharp = mean_entropy(&r.model, &r.eval, 0.1);
    let soft = mean_entropy(&r.model, &r.eval, 1.0);
    verdict(
        sharp < soft,
        format!("mean beta column entropy {sharp:.4} nats at tau=0.1 vs {soft:.4} at tau=1.0"),
    )
}

// Criterion 7

fn interlacement() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ok = true;
    for frames in [8usize, 7] {
        let sub = frames.div_ceil(2);
        let values = (0..3 * sub).map(|_| rng.random_range(-2.0..2.0f64).exp()).collect();
        let e = EnergyMatrix::from_energies(&Tensor::matrix(3, sub, values).unwrap()).unwrap();
        let (a, b) = posteriors(&e, 3).unwrap();
        let (alpha, beta) = interlace_recover(&a.0, &b.0, frames).unwrap();
        ok &= alpha.cols() == frames && beta.cols() == frames;
        for i in 0..3 {
            for c in 0..frames {
                let t = c / 2;
                if c % 2 == 0 {
                    ok &= alpha.get(i, c) == a.0.get(i, t);
                } else {
                    ok &= alpha.get(i, c) == 0.0;
                }
                ok &= beta.get(i, c) == b.0.get(i, t);
            }
        }
    }
    // Same pattern through the full model path.
    let config = ModelConfig {
        interlace: true,
        max_duration: 4,
        encoder: EncoderConfig {
            vocab_size: 5,
            model_dim: 8,
            heads: 2,
            ffn_hidden: 8,
            mel_channels: 4,
            cnn_channels: 4,
            ..EncoderConfig::default()
        },
    };
    let model = Model::init(config, 3).unwrap();
    for frames in [10usize, 9] {
        let mel = Tensor::matrix(frames, 4, (0..frames * 4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut tape = Tape::new();
        let rec = reconstruct(&mut tape, &model, &[0, 2, 4], &mel, AlignMode::Clean { tau: 0.5 }, &mut Dropout::eval()).unwrap();
        let beta = tape.value(rec.beta);
        ok &= beta.cols() == frames && rec.alpha.cols() == frames;
        for c in 0..frames {
            for i in 0..3 {
                if c % 2 == 1 {
                    ok &= beta.get(i, c) == beta.get(i, c - 1);
                    ok &= rec.alpha.get(i, c) == 0.0;
                }
            }
        }
        ok &= interlace_downsample(&mel).rows() == frames.div_ceil(2);
    }
    verdict(
        ok,
        "J=8 and J=7 (DP) and J=10 and J=9 (model): alpha zero off the kept frames, beta duplicated pairwise, odd J keeps a single last copy",
    )
}

// Criterion 8

fn persistence() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(&SynthSpec {
        samples: 12,
        vocab_size: 6,
        mel_channels: 4,
        max_tokens: 4,
        seed: 21,
        ..SynthSpec::default()
    })
    .unwrap();
    let config = ModelConfig {
        max_duration: 6,
        encoder: EncoderConfig {
            vocab_size: 6,
            model_dim: 8,
            heads: 2,
            ffn_hidden: 8,
            mel_channels: 4,
            cnn_channels: 4,
            ..EncoderConfig::default()
        },
        interlace: false,
    };
    let cfg = TrainConfig {
        epochs: 4,
        batch_frames: 40,
        warmup: 10,
        seed: 5,
        ..TrainConfig::default()
    };
    let run = |name: &str, stop: Option<u64>, from: Option<Model>| {
        let out = dir.path().join(name);
        let mut m = from.unwrap_or_else(|| Model::init(config.clone(), 9).unwrap());
        let curve = train(&mut m, &data, &TrainConfig { stop_after: stop, ..cfg.clone() }, Some(&out)).unwrap();
        (m, curve, std::fs::read(out.join("loss_curve.csv")).unwrap())
    };
    let (full_a, curve, csv_a) = run("a", None, None);
    let (_, _, csv_b) = run("b", None, None);
    let same_csv = csv_a == csv_b;

    let half = curve.len() as u64 / 2;
    let (partial, _, _) = run("c", Some(half), None);
    let ckpt = dir.path().join("c").join("final.ckpt");
    let restored = Model::load(&ckpt).unwrap();
    let restored_ok = restored == partial;
    let (resumed, rest, csv_c) = run("c", None, Some(restored));
    let resume_ok = rest == curve[half as usize..] && resumed == full_a && csv_c == csv_a;

    let path = dir.path().join("corpus.jsonl");
    corpus::save(&data, &path).unwrap();
    let back = corpus::load(&path).unwrap();
    let path2 = dir.path().join("corpus2.jsonl");
    corpus::save(&back, &path2).unwrap();
    let bits = |c: &[Utterance]| -> Vec<u64> { c.iter().flat_map(|u| u.mel.data().iter().map(|v| v.to_bits())).collect() };
    let corpus_ok = back == data
        && bits(&back) == bits(&data)
        && std::fs::read(&path).unwrap() == std::fs::read(&path2).unwrap();

    verdict(
        same_csv && restored_ok && resume_ok && corpus_ok,
        format!(
            "loss curve identical across runs: {same_csv}; checkpoint restore exact: {restored_ok}; resume after {half}/{} steps identical (curve, params, CSV): {resume_ok}; corpus round-trip bit-exact: {corpus_ok}",
            curve.len()
        ),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut report = |n: u32, name: &'static str, v: Verdict| {
        println!("criterion {n} {name}: {} | {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((n, name, v));
    };
    report(1, "oracle-equivalence", oracle_equivalence());
    report(2, "hand-instance", hand_instance());
    report(3, "gradient-check", micro_gradient_check());
    let recovery = run_recovery();
    report(4, "duration-recovery", duration_recovery(&recovery));
    report(5, "inference-contracts", inference_contracts(&recovery));
    report(6, "discreteness", discreteness(&recovery));
    report(7, "interlacement", interlacement());
    report(8, "determinism-persistence", persistence());

    let passed = results.iter().filter(|r| r.2.pass).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
