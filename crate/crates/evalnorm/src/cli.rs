//! The `evalnorm` command. Exit status: 0 on success, 1 on usage errors,
//! 2 on runtime errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use evalnorm_core::normalization::NormMode;
use evalnorm_core::train::EvalModeTag;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{read_file, write_file, Error};
use crate::harness;
use crate::report::{self, parse_record_csv, write_en_csv, write_record_csv};

#[derive(Debug, Parser)]
#[command(name = "evalnorm", version, about = "Microbatched batch-norm training and EvalNorm evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model; writes a checkpoint and CSVs to the output directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: u64,
    },
    /// Evaluate a checkpoint on the evaluation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// ema, en, simple_inv_b, simple_inv_b2, instance or simple=<alpha>.
        #[arg(long)]
        mode: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train once per microbatch size with a shared seed.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,32")]
        sizes: Vec<usize>,
    },
    /// Fit EvalNorm parameters on a frozen checkpoint and write a new one.
    EstimateOffline {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Histogram one channel's normalized activations under TrainBN, EMA and EN.
    Hist {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        channel: usize,
        /// Histogram CSV; defaults to `<output_dir>/<run_id>.hist.l<layer>c<channel>.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Merge record CSVs and print final accuracies per run and mode.
    Report {
        #[arg(required = true)]
        records: Vec<PathBuf>,
        /// Merged record CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<evalnorm_core::Error> for Failure {
    fn from(e: evalnorm_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn resolve(base: Option<RunConfig>, args: &ConfigArgs) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => base.unwrap_or_default(),
    };
    for kv in &args.set {
        cfg.apply_override(kv).map_err(|m| Failure::Usage(format!("--set {kv}: {m}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_mode(s: &str, microbatch: usize) -> std::result::Result<NormMode, Failure> {
    if let Some(a) = s.strip_prefix("simple=") {
        return match a.parse::<f64>() {
            Ok(v) if (0.0..=1.0).contains(&v) => Ok(NormMode::EvalSimple(v)),
            _ => Err(Failure::Usage(format!("simple weight {a:?} must be in [0, 1]"))),
        };
    }
    EvalModeTag::from_name(s)
        .map(|t| t.mode(microbatch))
        .ok_or_else(|| Failure::Usage(format!("unknown mode {s:?}")))
}

fn execute(cmd: Command, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let say = |out: &mut dyn Write, text: String| {
        let _ = out.write_all(text.as_bytes());
    };
    match cmd {
        Command::Train { cfg, seed } => {
            let mut cfg = resolve(None, &cfg)?;
            cfg.seed = seed;
            let outcome = harness::train(&cfg)?;
            let a = harness::write_run(&outcome, &cfg.output_dir)?;
            let rows = report::record_rows(std::slice::from_ref(&outcome.record));
            say(out, report::summary(&rows));
            say(out, format!("checkpoint {}\nrecords {}\nen {}\n", a.checkpoint.display(), a.records.display(), a.en_params.display()));
        }
        Command::Eval { checkpoint, mode, cfg } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let cfg = resolve(Some(ckpt.config.clone()), &cfg)?;
            let mode = parse_mode(&mode, ckpt.config.microbatch)?;
            let (_, eval) = harness::load_datasets(&cfg)?;
            let r = harness::evaluate(&ckpt, &eval, mode)?;
            say(out, format!("accuracy {}\n", r.accuracy));
            for (i, l) in r.layers.iter().enumerate() {
                say(out, format!("layer {i} mean {} variance {}\n", l.mean, l.variance));
            }
        }
        Command::Sweep { cfg, seed, sizes } => {
            let mut cfg = resolve(None, &cfg)?;
            cfg.seed = seed;
            if let Some(b) = sizes.iter().find(|&&b| b == 0 || cfg.sgd_batch % b != 0) {
                return Err(Failure::Usage(format!("size {b} does not divide sgd_batch {}", cfg.sgd_batch)));
            }
            let runs = harness::sweep(&cfg, &sizes)?;
            let mut en = Vec::new();
            for r in &runs {
                harness::write_run(r, &cfg.output_dir)?;
                let params: Vec<_> = r.checkpoint.en.iter().flatten().cloned().collect();
                en.extend(report::en_rows(&r.record.run_id, &params));
            }
            let records: Vec<_> = runs.iter().map(|r| r.record.clone()).collect();
            let rows = report::record_rows(&records);
            let dir = &cfg.output_dir;
            write_file(&dir.join(format!("{}.sweep.records.csv", cfg.run_id)), write_record_csv(&rows).as_bytes())?;
            write_file(&dir.join(format!("{}.sweep.en.csv", cfg.run_id)), write_en_csv(&en).as_bytes())?;
            say(out, report::summary(&rows));
        }
        Command::EstimateOffline { checkpoint, out: dest, cfg } => {
            if same_file(&checkpoint, &dest) {
                return Err(Failure::Runtime(Error::Config(
                    "--out must differ from --checkpoint; the original is never overwritten".into(),
                )));
            }
            let ckpt = Checkpoint::load(&checkpoint)?;
            let cfg = resolve(Some(ckpt.config.clone()), &cfg)?;
            let (train, _) = harness::load_datasets(&cfg)?;
            let est = harness::estimate_offline_cmd(&ckpt, &train, &cfg)?;
            est.save(&dest)?;
            let params: Vec<_> = est.en.iter().flatten().cloned().collect();
            say(out, write_en_csv(&report::en_rows(&cfg.run_id, &params)));
        }
        Command::Hist { checkpoint, layer, channel, out: dest, cfg } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let cfg = resolve(Some(ckpt.config.clone()), &cfg)?;
            let (_, eval) = harness::load_datasets(&cfg)?;
            let rep = harness::histograms(&ckpt, &eval, layer, channel)?;
            let dest = dest.unwrap_or_else(|| {
                cfg.output_dir
                    .join(format!("{}.hist.l{layer}c{channel}.csv", cfg.run_id))
            });
            write_file(&dest, rep.to_csv().as_bytes())?;
            say(out, format!("w1_ema {}\nw1_en {}\nhistogram {}\n", rep.distance_ema, rep.distance_en, dest.display()));
        }
        Command::Report { records, out: dest } => {
            let mut rows = Vec::new();
            for p in &records {
                let text = String::from_utf8(read_file(p)?)
                    .map_err(|_| Error::format("record csv", 0, format!("{} is not UTF-8", p.display())))?;
                rows.extend(parse_record_csv(&text)?);
            }
            if let Some(d) = dest {
                write_file(&d, write_record_csv(&rows).as_bytes())?;
            }
            say(out, report::summary(&rows));
        }
    }
    Ok(())
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

/// Runs the command line `argv` (including the program name).
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    1
                }
            };
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            1
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}
