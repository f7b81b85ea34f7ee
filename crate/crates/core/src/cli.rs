//! Command-line front end. `run` returns the process exit code.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::alignment::{FlowEstimator, PrecomputedFlow, PyramidalFlow};
use crate::data::{is_sequence_dir, load_sequence, synthesize_dataset, write_synthetic, PairedDataset, StreakConfig, VideoSequence, RAINY_DIR};
use crate::error::{Error, Result};
use crate::eval::{derived_architecture, evaluate, infer_sequence, score};
use crate::trainer::{load_checkpoint, run_finetune_aas, run_search, run_train, Config, Logger, RunControl};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "derain", version, about = "Searchable collaborative video deraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// Configuration file of dotted keys, applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base settings: light, heavy or toy.
    #[arg(long, value_parser = ["light", "heavy", "toy"])]
    preset: Option<String>,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Temporal window size; overrides `data.frames`.
    #[arg(long, value_parser = ["3", "5", "7"])]
    frames: Option<String>,
    /// Single `key=value` override, applied last. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a seeded synthetic rainy/clean dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        sequences: usize,
        /// Frames per sequence.
        #[arg(long, default_value_t = 9)]
        length: usize,
        /// Frame side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Search the cell and alignment module; writes the relaxed checkpoint and the derived cell.
    Search {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train both branches of the derived model.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from this training checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Stop after this many steps of the schedule.
        #[arg(long)]
        halt_after: Option<u64>,
    },
    /// Train only the fusion weights of a trained checkpoint.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Restore every frame of the rainy sequences under `--data`.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory of precomputed `.flo2` flows instead of the built-in estimator.
        #[arg(long)]
        flows: Option<PathBuf>,
    },
    /// Luminance PSNR/SSIM against ground truth, from a checkpoint or restored frames.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "restored", conflicts_with = "restored")]
        ckpt: Option<PathBuf>,
        /// Directory of already restored sequences.
        #[arg(long)]
        restored: Option<PathBuf>,
        /// Directory receiving `report.txt` and `report.kv`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        flows: Option<PathBuf>,
    },
    /// Write the derived cell of a checkpoint as one text line.
    ExportArch {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl ConfigArgs {
    fn resolve(&self, base: Option<Config>) -> Result<Config> {
        let mut cfg = match (&self.preset, base) {
            (Some(p), _) => Config::preset(p)?,
            (None, Some(b)) => b,
            (None, None) => Config::light(),
        };
        if let Some(path) = &self.config {
            cfg = Config::load(path, cfg)?;
        }
        let mut lines = Vec::new();
        if let Some(s) = self.seed {
            lines.push(format!("run.seed = {s}"));
        }
        if let Some(f) = &self.frames {
            lines.push(format!("data.frames = {f}"));
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Argument(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let quoted = v.parse::<f64>().is_err() && v != "true" && v != "false" && !v.starts_with('"');
            lines.push(if quoted { format!("{k} = \"{v}\"") } else { format!("{k} = {v}") });
        }
        if !lines.is_empty() {
            cfg.apply_toml(&lines.join("\n"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(p)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A dataset root with a `rainy/` directory, a directory of sequence directories,
/// or a single sequence directory.
fn load_inputs(path: &Path) -> Result<Vec<VideoSequence>> {
    let root = if path.join(RAINY_DIR).is_dir() {
        path.join(RAINY_DIR)
    } else {
        path.to_path_buf()
    };
    if is_sequence_dir(&root) {
        return Ok(vec![load_sequence(&root)?]);
    }
    if !root.is_dir() {
        return Err(Error::NotFound(root));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(&root)
        .map_err(|e| Error::io(&root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Format(format!("no sequences under {}", root.display())));
    }
    dirs.iter().map(|d| load_sequence(d)).collect()
}

fn estimator(flows: &Option<PathBuf>, cfg: &Config) -> Box<dyn FlowEstimator> {
    match flows {
        Some(dir) => Box::new(PrecomputedFlow { dir: dir.clone() }),
        None => Box::new(PyramidalFlow {
            config: cfg.flow.clone(),
        }),
    }
}

fn logger(out: &Path) -> Result<Logger> {
    create_dir(out)?;
    Logger::to_file(&out.join("log.txt"), true)
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth {
            out,
            sequences,
            length,
            size,
            seed,
        } => {
            let (data, rain, manifest) = synthesize_dataset(sequences, length, size, &StreakConfig::default(), seed)?;
            write_synthetic(&out, &data, &rain, &manifest)?;
            println!("wrote {} sequence(s) of {length} frame(s) to {}", data.len(), out.display());
        }
        Command::Search { cfg, data, out } => {
            let cfg = cfg.resolve(None)?;
            let all = PairedDataset::load(&data)?;
            let (train, val) = all.split(cfg.data.val_every)?;
            let mut log = logger(&out)?;
            let res = run_search(&cfg, &train, &val, Some(&out), &mut log)?;
            write_file(&out.join("genotype.txt"), &format!("{}\n", res.cell))?;
            println!("cell = {}", res.cell);
            println!("align = {}", res.align);
        }
        Command::Train {
            cfg,
            data,
            out,
            ckpt,
            halt_after,
        } => {
            let resume = ckpt.as_deref().map(load_checkpoint).transpose()?;
            let cfg = cfg.resolve(resume.as_ref().map(|c| c.config.clone()))?;
            let ds = PairedDataset::load(&data)?;
            let mut log = logger(&out)?;
            let c = run_train(
                &cfg,
                cfg.model.genotype.clone(),
                cfg.model.align,
                &ds,
                resume,
                RunControl { halt_after },
                Some(&out),
                &mut log,
            )?;
            println!("trained {} step(s); checkpoint at {}", c.step, out.join("checkpoint").display());
        }
        Command::Finetune { cfg, ckpt, data, out } => {
            let ck = load_checkpoint(&ckpt)?;
            let cfg = cfg.resolve(Some(ck.config.clone()))?;
            let ds = PairedDataset::load(&data)?;
            let mut log = logger(&out)?;
            let c = run_finetune_aas(&cfg, &ck, &ds, Some(&out), &mut log)?;
            println!("fine-tuned {} step(s); checkpoint at {}", c.step, out.join("finetuned").display());
        }
        Command::Infer { ckpt, data, out, flows } => {
            let ck = load_checkpoint(&ckpt)?;
            let est = estimator(&flows, &ck.config);
            for seq in load_inputs(&data)? {
                let restored = infer_sequence(&ck, &seq, ck.config.data.frames, est.as_ref())?;
                restored.save(&out.join(&restored.identifier))?;
                println!("{}: {} frame(s)", restored.identifier, restored.len());
            }
        }
        Command::Eval {
            data,
            ckpt,
            restored,
            out,
            flows,
        } => {
            let ds = PairedDataset::load(&data)?;
            let report = match (ckpt, restored) {
                (Some(c), _) => {
                    let ck = load_checkpoint(&c)?;
                    evaluate(&ck, &ds, estimator(&flows, &ck.config).as_ref())?
                }
                (None, Some(dir)) => {
                    let seqs = ds
                        .clean
                        .iter()
                        .map(|c| load_sequence(&dir.join(&c.identifier)))
                        .collect::<Result<Vec<_>>>()?;
                    score(&seqs, &ds, &Config::light().loss, "-")?
                }
                (None, None) => return Err(Error::Argument("eval needs --ckpt or --restored".into())),
            };
            print!("{}", report.to_table());
            if let Some(dir) = out {
                write_file(&dir.join("report.txt"), &report.to_table())?;
                write_file(&dir.join("report.kv"), &report.to_key_values())?;
            }
        }
        Command::ExportArch { ckpt, out } => {
            let (cell, align) = derived_architecture(&load_checkpoint(&ckpt)?)?;
            write_file(&out, &format!("{cell}\n"))?;
            println!("cell = {cell}");
            println!("align = {align}");
        }
    }
    Ok(())
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Argument(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["derain", "search", "--frames", "4", "--data", "d", "--out", "o"]), EXIT_USAGE);
        assert_eq!(run(["derain", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["derain", "eval", "--data", "d"]), EXIT_USAGE);
        assert_eq!(run(["derain", "--help"]), EXIT_OK);
    }

    #[test]
    fn runtime_errors_exit_one() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope");
        let m = missing.to_str().unwrap();
        assert_eq!(run(["derain", "export-arch", "--ckpt", m, "--out", m]), EXIT_RUNTIME);
    }

    #[test]
    fn overrides_apply_in_order() {
        let a = ConfigArgs {
            preset: Some("toy".into()),
            seed: Some(9),
            frames: Some("5".into()),
            set: vec!["model.genotype=heavy".into(), "train.lr0=0.5".into()],
            ..Default::default()
        };
        let c = a.resolve(None).unwrap();
        assert_eq!((c.seed, c.data.frames, c.train.lr0), (9, 5, 0.5));
        assert_eq!(c.model.genotype, crate::searchspace::CellSpec::heavy());
        let bad = ConfigArgs {
            set: vec!["train.nope=1".into()],
            ..Default::default()
        };
        assert!(matches!(bad.resolve(None), Err(Error::Config(_))));
    }
}
