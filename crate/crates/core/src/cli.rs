//! The `rsp` command-line tool.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::attention::dump_attention;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::cost::count_flops;
use crate::data::{generate_marker_dataset, load_dataset, read_ppm, save_dataset, SegmentationSample};
use crate::error::{Error, Result};
use crate::gradcheck::run_suite;
use crate::model::SegModel;
use crate::train::{evaluate, train_steps};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const CHECKPOINT_FILE: &str = "checkpoint.rspc";
pub const METRICS_FILE: &str = "metrics.log";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Parser)]
#[command(
    name = "rsp",
    about = "Relation-propagation segmentation heads: training, evaluation and inspection",
    after_help = "Settings come from `--config FILE` (key = value lines) and `--key value` overrides."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct Overrides {
    /// `--config FILE` and `--key value` pairs
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "SETTINGS")]
    args: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes a checkpoint, metrics log and the effective config
    Train(Overrides),
    /// mIoU of a checkpoint on a directory of PPM/PGM pairs (or generated data)
    Eval(Overrides),
    /// Write the marker dataset to disk
    GenData(Overrides),
    /// Parameter and multiply-add table
    Count(Overrides),
    /// Finite-difference gradient suite
    Gradcheck(Overrides),
    /// Relation weights and query/key maps at one fusion site
    DumpAttn(Overrides),
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

/// Runs the tool on `argv` (including the program name), writing reports to
/// `out`; returns the process exit code.
pub fn run_cli<S: AsRef<str>>(argv: &[S], out: &mut dyn Write) -> i32 {
    let argv: Vec<&str> = argv.iter().map(AsRef::as_ref).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            EXIT_RUNTIME
        }
    }
}

fn load_config(o: &Overrides) -> Result<RunConfig> {
    let mut path = None;
    let mut rest = Vec::new();
    let mut it = o.args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            path = Some(PathBuf::from(it.next().ok_or_else(|| Error::Config("--config needs a path".into()))?));
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        } else {
            rest.push(a.clone());
        }
    }
    let cfg = RunConfig::load(path.as_deref(), &rest)?;
    for line in cfg.to_string().lines() {
        log::info!("config {line}");
    }
    Ok(cfg)
}

fn require_path(cfg: &RunConfig, key: &str) -> Result<PathBuf> {
    let p = cfg.path(key)?.ok_or_else(|| Error::Config(format!("{key} must be set")))?;
    if !p.exists() {
        return Err(Error::Config(format!("{key}: {} does not exist", p.display())));
    }
    Ok(p)
}

fn optional_dir(cfg: &RunConfig, key: &str) -> Result<Option<PathBuf>> {
    match cfg.path(key)? {
        Some(p) if !p.is_dir() => Err(Error::Config(format!("{key}: {} is not a directory", p.display()))),
        other => Ok(other),
    }
}

fn split(cfg: &RunConfig, eval: bool) -> Result<Vec<SegmentationSample>> {
    let dir_key = if eval { "data.eval_dir" } else { "data.train_dir" };
    match optional_dir(cfg, dir_key)? {
        Some(dir) => load_dataset(&dir),
        None => generate_marker_dataset(&cfg.dataset_spec(eval)?),
    }
}

fn io_err(e: std::io::Error) -> Failure {
    Failure::Runtime(e.to_string())
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> std::result::Result<i32, Failure> {
    match cmd {
        Command::Train(o) => {
            let cfg = load_config(&o)?;
            let arch = cfg.architecture()?;
            let tcfg = cfg.train_config()?;
            optional_dir(&cfg, "data.train_dir")?;
            optional_dir(&cfg, "data.eval_dir")?;
            let out_dir = cfg.path("out.dir")?.unwrap_or_else(|| PathBuf::from("."));
            let train = split(&cfg, false)?;
            let eval = split(&cfg, true)?;
            let mut model = SegModel::new(arch, tcfg.seed)?;
            fs::create_dir_all(&out_dir).map_err(io_err)?;
            fs::write(out_dir.join(CONFIG_FILE), cfg.to_string()).map_err(io_err)?;
            let mut log = String::new();
            let eval_ref = (!eval.is_empty()).then_some(eval.as_slice());
            let history = train_steps(&mut model, &train, eval_ref, &tcfg, &mut |line| {
                log::info!("{line}");
                let _ = writeln!(out, "{line}");
                log.push_str(line);
                log.push('\n');
            })?;
            fs::write(out_dir.join(METRICS_FILE), log).map_err(io_err)?;
            save_checkpoint(&model.params, &out_dir.join(CHECKPOINT_FILE))?;
            writeln!(out, "trained {} steps; checkpoint {}", history.steps.len(), out_dir.join(CHECKPOINT_FILE).display())
                .map_err(io_err)?;
            Ok(EXIT_OK)
        }
        Command::Eval(o) => {
            let cfg = load_config(&o)?;
            let ckpt = require_path(&cfg, "checkpoint")?;
            let arch = cfg.architecture()?;
            optional_dir(&cfg, "data.eval_dir")?;
            let samples = split(&cfg, true)?;
            let mut model = SegModel::new(arch, 0)?;
            model.params.load_from(&load_checkpoint(&ckpt)?)?;
            let cm = evaluate(&model, &samples, cfg.get("train.batch_size")?)?;
            let ious: Vec<String> =
                cm.class_iou().iter().map(|v| v.map_or("-".to_string(), |x| format!("{x:.4}"))).collect();
            writeln!(out, "miou={:.6} images={} class_iou={}", cm.miou()?, samples.len(), ious.join(",")).map_err(io_err)?;
            Ok(EXIT_OK)
        }
        Command::GenData(o) => {
            let cfg = load_config(&o)?;
            let out_dir = cfg.path("out.dir")?.unwrap_or_else(|| PathBuf::from("."));
            for (eval, sub) in [(false, "train"), (true, "eval")] {
                let samples = generate_marker_dataset(&cfg.dataset_spec(eval)?)?;
                let dir = out_dir.join(sub);
                save_dataset(&samples, &dir)?;
                writeln!(out, "wrote {} samples to {}", samples.len(), dir.display()).map_err(io_err)?;
            }
            Ok(EXIT_OK)
        }
        Command::Count(o) => {
            let cfg = load_config(&o)?;
            let arch = cfg.architecture()?;
            let report = count_flops(&arch, cfg.get("count.height")?, cfg.get("count.width")?)?;
            writeln!(out, "{report}").map_err(io_err)?;
            Ok(EXIT_OK)
        }
        Command::Gradcheck(o) => {
            let cfg = load_config(&o)?;
            let seeds: Vec<u64> = cfg.get_list("gradcheck.seeds")?;
            let checks = run_suite(&seeds)?;
            let mut failed = 0;
            for c in &checks {
                let verdict = if c.passed() { "ok" } else { "FAIL" };
                failed += usize::from(!c.passed());
                writeln!(out, "{verdict:<4} {:<40} seed {:>3}  max rel err {:.3e}", c.name, c.seed, c.max_rel_err)
                    .map_err(io_err)?;
            }
            writeln!(out, "{} checks, {failed} failed", checks.len()).map_err(io_err)?;
            Ok(if failed == 0 { EXIT_OK } else { EXIT_RUNTIME })
        }
        Command::DumpAttn(o) => {
            let cfg = load_config(&o)?;
            let ckpt = require_path(&cfg, "checkpoint")?;
            let image_path = cfg.path("image")?;
            if let Some(p) = &image_path {
                if !p.exists() {
                    return Err(Failure::Usage(format!("image: {} does not exist", p.display())));
                }
            }
            let arch = cfg.architecture()?;
            let mut model = SegModel::new(arch, 0)?;
            model.params.load_from(&load_checkpoint(&ckpt)?)?;
            let image = match image_path {
                Some(p) => read_ppm(&p)?,
                None => cfg.dataset_spec(true)?.sample(0)?.0.image,
            };
            let s = image.shape().to_vec();
            let image = image.reshape(vec![1, s[0], s[1], s[2]])?;
            let out_dir: PathBuf = cfg.path("out.dir")?.unwrap_or_else(|| PathBuf::from("."));
            let site = cfg.raw("attn.site")?.to_string();
            let pixel = (cfg.get("attn.row")?, cfg.get("attn.col")?);
            let dump = dump_attention(&model, &image, &site, pixel, &cfg.get_list("attn.channels")?, &out_dir)?;
            for f in &dump.files {
                writeln!(out, "wrote {}", f.display()).map_err(io_err)?;
            }
            Ok(EXIT_OK)
        }
    }
}
