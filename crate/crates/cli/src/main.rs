//! `monoalign` command-line tool.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::warn;

use monoalign::align::{posteriors, EnergyMatrix, INFERENCE_TEMPERATURE};
use monoalign::autodiff::Tape;
use monoalign::config::KeyValues;
use monoalign::corpus::{self, SynthSpec, Utterance};
use monoalign::encoders::Dropout;
use monoalign::export::{write_csv, write_pgm};
use monoalign::inference::{extract_corpus, write_durations};
use monoalign::oracle::{verify_grid, OracleGrid};
use monoalign::trainer::{reconstruct, train, AlignMode, Model, ModelConfig, TrainConfig};
use monoalign::{Error, Tensor};

const ORACLE_TOLERANCE: f64 = 1e-10;

#[derive(Parser)]
#[command(name = "monoalign", version, about = "Monotonic boundary alignment: train, inspect, extract durations")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// key=value file; command-line overrides win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// key=value overrides.
    #[arg(value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn load(&self) -> Result<KeyValues, Error> {
        let mut kv = match &self.config {
            Some(p) => KeyValues::read(p)?,
            None => KeyValues::default(),
        };
        kv.apply_overrides(&self.set)?;
        Ok(kv)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with known durations.
    GenData {
        /// Output corpus (JSON lines).
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        kv: Overrides,
    },
    /// Train an aligner; writes loss_curve.csv and checkpoints into --out.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        kv: Overrides,
    },
    /// Write soft alignment matrices and the reconstructed mel of one utterance.
    Align {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract per-token durations for a corpus.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Output durations (JSON lines, accepted utterances only).
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the alignment DP against exhaustive enumeration.
    VerifyOracle {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 4)]
        max_tokens: usize,
        #[arg(long, default_value_t = 8)]
        max_frames: usize,
        #[arg(long, default_value_t = 4)]
        max_duration: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb the DP output (negative control).
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Align { .. } => "align",
            Command::Extract { .. } => "extract",
            Command::VerifyOracle { .. } => "verify-oracle",
        }
    }
}

enum Outcome {
    Ok(String),
    Fail(String),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            warn!("could not size worker pool: {e}");
        }
    }
    let name = cli.command.name();
    match run(cli.command) {
        Ok(Outcome::Ok(summary)) => {
            println!("RESULT: {name} ok {summary}");
            ExitCode::SUCCESS
        }
        Ok(Outcome::Fail(summary)) => {
            println!("RESULT: {name} fail {summary}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            let (kind, code) = classify(&e);
            println!("RESULT: {name} error kind={kind}");
            ExitCode::from(code)
        }
    }
}

fn classify(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Config(_) => ("config", 2),
        Error::InvalidInput(_) => ("invalid-input", 2),
        Error::Parse { .. } => ("parse", 2),
        Error::OracleGuard(_) => ("oracle-guard", 2),
        Error::Shape { .. } => ("shape", 2),
        Error::Io { .. } => ("io", 1),
        Error::Checkpoint(_) => ("checkpoint", 1),
        Error::Diverged { .. } => ("diverged", 1),
        Error::NonFinite { .. } => ("non-finite", 1),
        Error::AlignmentFailure { .. } => ("alignment-failure", 1),
    }
}

fn run(cmd: Command) -> Result<Outcome, Error> {
    match cmd {
        Command::GenData { out, kv } => gen_data(&out, kv.load()?),
        Command::Train {
            corpus,
            out,
            resume,
            kv,
        } => train_cmd(&corpus, &out, resume.as_deref(), kv.load()?),
        Command::Align {
            checkpoint,
            corpus,
            id,
            out,
        } => align_cmd(&checkpoint, &corpus, &id, &out),
        Command::Extract {
            checkpoint,
            corpus,
            out,
        } => extract_cmd(&checkpoint, &corpus, &out),
        Command::VerifyOracle {
            trials,
            max_tokens,
            max_frames,
            max_duration,
            seed,
            inject_fault,
        } => verify_cmd(
            OracleGrid {
                max_tokens,
                max_frames,
                max_duration,
                trials,
                seed,
            },
            inject_fault,
        ),
    }
}

fn gen_data(out: &Path, kv: KeyValues) -> Result<Outcome, Error> {
    let spec = SynthSpec::from_key_values(kv)?;
    let data = corpus::generate(&spec)?;
    corpus::save(&data, out)?;
    let frames: Vec<usize> = data.iter().map(Utterance::frames).collect();
    let total: usize = frames.iter().sum();
    let mean = if data.is_empty() { 0.0 } else { total as f64 / data.len() as f64 };
    Ok(Outcome::Ok(format!(
        "samples={} frames_min={} frames_mean={mean:.2} frames_max={} out={}",
        data.len(),
        frames.iter().min().copied().unwrap_or(0),
        frames.iter().max().copied().unwrap_or(0),
        out.display()
    )))
}

fn train_cmd(corpus_path: &Path, out: &Path, resume: Option<&Path>, mut kv: KeyValues) -> Result<Outcome, Error> {
    let model_cfg = ModelConfig::take_from(&mut kv)?;
    let train_cfg = TrainConfig::take_from(&mut kv)?;
    let init_seed = kv.take::<u64>("init_seed")?.unwrap_or(train_cfg.seed);
    kv.finish()?;
    let data = corpus::load(corpus_path)?;
    let mut model = match resume {
        Some(path) => {
            let m = Model::load(path)?;
            if m.config != model_cfg {
                warn!("model settings come from the checkpoint; config model keys are ignored");
            }
            m
        }
        None => Model::init(model_cfg, init_seed)?,
    };
    let curve = train(&mut model, &data, &train_cfg, Some(out))?;
    let final_loss = curve.last().map_or(f64::NAN, |p| p.loss);
    Ok(Outcome::Ok(format!(
        "steps={} final_loss={final_loss:.6} checkpoint={}",
        model.params.step(),
        out.join("final.ckpt").display()
    )))
}

fn find<'a>(data: &'a [Utterance], id: &str) -> Result<&'a Utterance, Error> {
    data.iter()
        .find(|u| u.id == id)
        .ok_or_else(|| Error::InvalidInput(format!("no utterance with id '{id}'")))
}

fn align_cmd(checkpoint: &Path, corpus_path: &Path, id: &str, out: &Path) -> Result<Outcome, Error> {
    let model = Model::load(checkpoint)?;
    let data = corpus::load(corpus_path)?;
    let utt = find(&data, id)?;
    let mut tape = Tape::new();
    let rec = reconstruct(
        &mut tape,
        &model,
        &utt.tokens,
        &utt.mel,
        AlignMode::Clean {
            tau: INFERENCE_TEMPERATURE,
        },
        &mut Dropout::eval(),
    )?;
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let beta = tape.value(rec.beta);
    write_csv(&rec.alpha, &out.join("alpha.csv"))?;
    write_csv(beta, &out.join("beta.csv"))?;
    write_pgm(&rec.alpha, &out.join("alpha.pgm"))?;
    write_pgm(beta, &out.join("beta.pgm"))?;
    write_csv(tape.value(rec.mel_hat), &out.join("recon_mel.csv"))?;
    Ok(Outcome::Ok(format!(
        "id={id} tokens={} frames={} out={}",
        utt.tokens.len(),
        utt.frames(),
        out.display()
    )))
}

fn extract_cmd(checkpoint: &Path, corpus_path: &Path, out: &Path) -> Result<Outcome, Error> {
    let model = Model::load(checkpoint)?;
    let data = corpus::load(corpus_path)?;
    let report = extract_corpus(&model, &data)?;
    write_durations(&report, out)?;
    println!("rejected: {}/{}", report.rejected, report.total());
    let mut summary = format!(
        "accepted={} rejected={} total={} rejection_rate={:.4}",
        report.total() - report.rejected,
        report.rejected,
        report.total(),
        report.rejection_rate()
    );
    if let Some(m) = report.matches {
        println!(
            "match rate: {:.4} exact durations ({}/{}), {:.4} boundaries within 1 frame ({}/{})",
            m.exact_rate(),
            m.exact_tokens,
            m.tokens,
            m.within_one_rate(),
            m.boundaries_within_one,
            m.boundaries
        );
        summary.push_str(&format!(
            " exact_rate={:.4} within_one_rate={:.4}",
            m.exact_rate(),
            m.within_one_rate()
        ));
    }
    Ok(Outcome::Ok(summary))
}

fn dp(e: &EnergyMatrix, d: usize) -> monoalign::Result<(Tensor, Tensor)> {
    let (a, b) = posteriors(e, d)?;
    Ok((a.0, b.0))
}

fn verify_cmd(grid: OracleGrid, inject_fault: bool) -> Result<Outcome, Error> {
    grid.validate()?;
    if grid.trials == 0 {
        warn!("trials=0: nothing to compare");
    }
    let report = if inject_fault {
        verify_grid(&grid, |e: &EnergyMatrix, d: usize| {
            let (mut a, b) = dp(e, d)?;
            a.data_mut()[0] += 1e-6;
            Ok((a, b))
        })?
    } else {
        verify_grid(&grid, dp)?
    };
    let shape = report
        .worst
        .map_or("-".to_string(), |(i, j, d)| format!("I={i},J={j},D={d}"));
    let summary = format!(
        "instances={} max_diff={:e} worst={shape} tolerance={ORACLE_TOLERANCE:e}",
        report.instances, report.max_diff
    );
    if report.max_diff < ORACLE_TOLERANCE {
        println!("PASS, max diff {:e} < {ORACLE_TOLERANCE:e}", report.max_diff);
        Ok(Outcome::Ok(summary))
    } else {
        println!("FAIL, max diff {:e} >= {ORACLE_TOLERANCE:e}", report.max_diff);
        Ok(Outcome::Fail(summary))
    }
}
