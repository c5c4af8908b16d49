use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use partalign::align::{AlignmentVariant, MatchMode};
use partalign::harness::bench::{self, BenchConfig};
use partalign::harness::gradcheck::{self, GradcheckOptions};
use partalign::harness::{cmd_eval, cmd_train, Checkpoint, Precision, RunConfig};
use partalign::losses::KlDirection;
use partalign::synth;
use partalign::tensor::OpKind;
use partalign::{Error, Result};

#[derive(Parser)]
#[command(name = "partalign", version, about = "Part-alignment fine-grained classification on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its checkpoint and metrics.
    Train {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        /// Directory holding checkpoint.json and checkpoint.bin.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest from gen-data; defaults to the checkpoint's own test set.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the alignment-by-jitter ablation matrix.
    Bench {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seed set shared by every cell.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// JSON bench config; run flags below override its base config.
        #[arg(long)]
        bench_config: Option<PathBuf>,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Finite-difference check of every differentiable component.
    Gradcheck {
        #[arg(long, default_value_t = gradcheck::DEFAULT_SEEDS)]
        seeds: u64,
        /// Corrupt one backward rule to exercise the failure path.
        #[arg(long, hide = true, value_parser = parse_op)]
        tamper: Option<OpKind>,
    },
    /// Write the train and test sets as manifest plus binary blob.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunFlags,
    },
}

/// RunConfig fields as flags; anything given overrides `--config`.
#[derive(Args, Default)]
struct RunFlags {
    /// JSON RunConfig to start from.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_serde::<AlignmentVariant>)]
    alignment: Option<AlignmentVariant>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    jitter: Option<bool>,
    #[arg(long)]
    jitter_strength: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    lambda_reg: Option<f64>,
    #[arg(long)]
    lambda_part: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_parser = parse_serde::<KlDirection>)]
    kl_direction: Option<KlDirection>,
    #[arg(long)]
    ema_rate: Option<f64>,
    #[arg(long)]
    num_parts: Option<usize>,
    #[arg(long, value_parser = parse_serde::<MatchMode>)]
    match_mode: Option<MatchMode>,
    #[arg(long, value_delimiter = ',', num_args = 3)]
    widths: Option<Vec<usize>>,
    #[arg(long)]
    d_repr: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    nms_iou: Option<f64>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    expansion: Option<usize>,
    #[arg(long, value_parser = parse_serde::<Precision>)]
    precision: Option<Precision>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    record_wall_time: Option<bool>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    parts_per_object: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pose_permute: Option<bool>,
    #[arg(long)]
    jitter_radius: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long)]
    test_count: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    texture_only: Option<bool>,
    /// Seed of the synthetic dataset, independent of the training seed.
    #[arg(long)]
    data_seed: Option<u64>,
}

fn parse_serde<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_op(s: &str) -> std::result::Result<OpKind, String> {
    OpKind::parse(s).ok_or_else(|| format!("unknown op '{s}'"))
}

macro_rules! set {
    ($flags:expr, $target:expr, $($field:ident),+) => {
        $(if let Some(v) = $flags.$field.clone() { $target.$field = v; })+
    };
}

impl RunFlags {
    fn apply(&self, mut c: RunConfig) -> Result<RunConfig> {
        set!(self, c, seed, alignment, jitter, jitter_strength, epochs, batch_size, lr, momentum);
        set!(self, c, lambda_reg, lambda_part, tau, kl_direction, ema_rate, num_parts, match_mode);
        set!(self, c, d_repr, window, nms_iou, heads, expansion, precision, record_wall_time);
        set!(self, c.synth, num_classes, parts_per_object, image_size, pose_permute, jitter_radius);
        set!(self, c.synth, noise_sigma, train_count, test_count, texture_only);
        if let Some(w) = &self.widths {
            c.widths = w
                .as_slice()
                .try_into()
                .map_err(|_| Error::Config("--widths takes exactly three values".into()))?;
        }
        if let Some(s) = self.data_seed {
            c.synth.seed = s;
        }
        c.validate()?;
        Ok(c)
    }

    fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(path) => RunConfig::from_json_file(path)?,
            None => RunConfig::default(),
        };
        self.apply(base)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<u8> {
    match command {
        Command::Train { out, run } => {
            let config = run.resolve()?;
            let outcome = cmd_train(&config, &out)?;
            if let Some(acc) = outcome.final_test_accuracy() {
                println!("test accuracy {acc:.4}");
            }
            Ok(0)
        }
        Command::Eval { checkpoint, data } => {
            let dataset = match data {
                Some(manifest) => synth::import(&manifest)?,
                None => default_test_set(&checkpoint)?,
            };
            let report = cmd_eval(&checkpoint, &dataset)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(0)
        }
        Command::Bench { out, seeds, bench_config, run } => {
            let mut config = match &bench_config {
                Some(path) => BenchConfig::from_json_file(path)?,
                None => BenchConfig::default(),
            };
            let base = match &run.config {
                Some(path) => RunConfig::from_json_file(path)?,
                None => config.base.clone(),
            };
            let base = run.apply(base)?;
            // keep the tables' datasets in step with the base synth overrides
            let food_tables: Vec<bool> = config.tables.iter().map(|t| t.synth.texture_only).collect();
            for (t, texture_only) in config.tables.iter_mut().zip(food_tables) {
                t.synth = synth::SynthSpec {
                    texture_only,
                    ..base.synth.clone()
                };
            }
            config.base = base;
            if let Some(s) = seeds {
                config.seeds = s;
            }
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let report = bench::cmd_bench(&config, Some(&out))?;
            print!("{}", report.render());
            Ok(0)
        }
        Command::Gradcheck { seeds, tamper } => {
            let reports = gradcheck::run(&GradcheckOptions { seeds, tamper })?;
            let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(0);
            let mut all = true;
            for r in &reports {
                all &= r.pass;
                println!(
                    "{:<width$}  max_rel_err {:.3e}  coords {:>6}  {}",
                    r.name,
                    r.max_rel_err,
                    r.coords_checked,
                    if r.pass { "ok" } else { "FAIL" }
                );
            }
            Ok(if all { 0 } else { 2 })
        }
        Command::GenData { out, run } => {
            let config = run.resolve()?;
            let (train, test) = synth::generate(&config.synth)?;
            synth::export(&train, &out, "train")?;
            synth::export(&test, &out, "test")?;
            println!("wrote {} train and {} test samples to {}", train.len(), test.len(), out.display());
            Ok(0)
        }
    }
}

fn default_test_set(checkpoint: &Path) -> Result<synth::Dataset> {
    let ckpt = Checkpoint::load(checkpoint)?;
    Ok(synth::generate(&ckpt.config.synth)?.1)
}
