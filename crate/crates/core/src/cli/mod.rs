//! Command-line surface: `describe`, `cost`, `gradcheck`, `train`, `eval`,
//! `gen-data`.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod io;
pub mod train;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::costmodel::{self, CostScope};
use crate::error::{Error, Result};
use crate::tensor::Scalar;
use crate::topology::build_skeleton;
use config::{parse_size, Precision, RunConfig};

pub const THREADS_ENV: &str = "HRNET_FORGE_THREADS";
pub const DEFAULT_CONFIG: &str = "tiny";

#[derive(Parser, Debug)]
#[command(name = "hrnet-forge", version, about = "High-resolution network toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PrecisionArg {
    Verify,
    Fast,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Config file or preset name.
    #[arg(long, default_value = DEFAULT_CONFIG)]
    pub config: String,
    /// Input size override, HxW.
    #[arg(long, value_parser = size_arg)]
    pub size: Option<(usize, usize)>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// List every layer with its output shape.
    Describe(Common),
    /// Parameter and FLOP counts per layer.
    Cost(Common),
    /// Finite-difference gradient check of the whole network.
    Gradcheck(Common),
    /// Train on the configured data.
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to resume from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the configured data.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Average with predictions on mirrored inputs.
        #[arg(long)]
        flip_eval: bool,
    },
    /// Write the synthetic dataset of the config to a directory.
    GenData(Common),
}

fn size_arg(s: &str) -> std::result::Result<(usize, usize), String> {
    parse_size(s).ok_or_else(|| format!("`{s}` is not HxW"))
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(size) = common.size {
        cfg.network.input_size = size;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(p) = common.precision {
        cfg.precision = match p {
            PrecisionArg::Verify => Precision::Verify,
            PrecisionArg::Fast => Precision::Fast,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_out(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Error::config(0, "out", "this command needs --out DIR"))
}

/// Caps rayon's global pool from `HRNET_FORGE_THREADS`.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(0, THREADS_ENV, format!("`{v}` is not a positive integer")))?;
    // a second initialization in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, A>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match configure_threads().and_then(|_| dispatch(cli.command, out)) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Describe(c) => describe(&resolve(&c)?, out),
        Command::Cost(c) => cost(&resolve(&c)?, c.out.as_deref(), out),
        Command::Gradcheck(c) => {
            let cfg = resolve(&c)?;
            if cfg.precision != Precision::Verify {
                return Err(Error::config(0, "precision", "gradcheck runs at verify precision"));
            }
            run_gradcheck(&cfg, None, out)
        }
        Command::Train { common, resume } => {
            let cfg = resolve(&common)?;
            let dir = require_out(&common)?;
            match cfg.precision {
                Precision::Verify => run_train::<f64>(&cfg, dir, resume.as_deref(), out),
                Precision::Fast => run_train::<f32>(&cfg, dir, resume.as_deref(), out),
            }
        }
        Command::Eval {
            common,
            checkpoint,
            flip_eval,
        } => {
            let cfg = resolve(&common)?;
            let dir = common.out.as_deref();
            let report = match cfg.precision {
                Precision::Verify => train::eval::<f64>(&cfg, &checkpoint, dir, flip_eval)?,
                Precision::Fast => train::eval::<f32>(&cfg, &checkpoint, dir, flip_eval)?,
            };
            write!(out, "{}", report.to_text())?;
            Ok(())
        }
        Command::GenData(c) => {
            let cfg = resolve(&c)?;
            let dir = require_out(&c)?;
            let n = &cfg.network;
            let data = data::synthetic(cfg.task, cfg.data_samples, n.input_size, n.out_dim, n.input_channels, cfg.seed)?;
            data::write_dataset(dir, &data)?;
            writeln!(out, "wrote {} {} samples to {}", data.len(), cfg.task.as_str(), dir.display())?;
            Ok(())
        }
    }
}

pub fn describe(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let g = build_skeleton::<f32>(&cfg.network)?;
    let (h, w) = cfg.network.input_size;
    let shapes = g.infer_shapes(h, w)?;
    let n = &cfg.network;
    writeln!(
        out,
        "network width {} head {} input {}x{}x{} params {}",
        n.width,
        n.head.as_str(),
        n.input_channels,
        h,
        w,
        costmodel::count_params(&g)
    )?;
    for (node, s) in g.nodes().iter().zip(&shapes) {
        let ins: Vec<String> = node.inputs.iter().map(|&i| shapes[i].to_string()).collect();
        writeln!(out, "{}\t{}\t{}\t{}", node.name, node.op.kind_name(), ins.join(" "), s)?;
    }
    for (name, id) in g.outputs() {
        writeln!(out, "output {name} {}", shapes[*id])?;
    }
    Ok(())
}

pub fn cost(cfg: &RunConfig, dir: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let g = build_skeleton::<f32>(&cfg.network)?;
    let report = costmodel::report(&g, cfg.network.input_size, CostScope::Full)?;
    write!(out, "{}", report.to_text())?;
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("cost.tsv"), report.to_tsv())?;
    }
    Ok(())
}

pub fn run_gradcheck(cfg: &RunConfig, fault: Option<f64>, out: &mut dyn Write) -> Result<()> {
    let r = train::gradcheck(cfg, fault)?;
    writeln!(out, "checked\t{}", r.checked)?;
    writeln!(out, "skipped_kinks\t{}", r.skipped_kinks)?;
    writeln!(out, "max_rel_error\t{:e}", r.max_rel_error)?;
    writeln!(out, "worst\t{}", r.worst)?;
    let pass = r.passed(train::GRADCHECK_TOLERANCE);
    writeln!(out, "tolerance\t{:e}\t{}", train::GRADCHECK_TOLERANCE, if pass { "PASS" } else { "FAIL" })?;
    if pass {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "gradient check error {:e} at {} exceeds {:e}",
            r.max_rel_error,
            r.worst,
            train::GRADCHECK_TOLERANCE
        )))
    }
}

fn run_train<T: Scalar>(cfg: &RunConfig, dir: &Path, resume: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let every = (cfg.max_iter / 20).max(1);
    let mut lines = Vec::new();
    let mut progress = |it: usize, lr: f64, loss: f64| {
        if it.is_multiple_of(every) || it + 1 == cfg.max_iter {
            lines.push(format!("iter {it} lr {lr:.6} loss {loss:.6}"));
        }
    };
    let summary = train::train::<T>(cfg, dir, resume, &mut progress)?;
    for l in lines {
        writeln!(out, "{l}")?;
    }
    writeln!(out, "trained {} iterations, final loss {:.6}", summary.iterations, summary.final_loss)?;
    write!(out, "{}", summary.report.to_text())?;
    writeln!(out, "checkpoint {}", summary.checkpoint.display())?;
    Ok(())
}
