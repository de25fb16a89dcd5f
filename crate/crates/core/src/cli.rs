//! Command-line entry points.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::eval::{class_names, complete, evaluate, sample_pairs, write_pairs, EvalMode};
use crate::gradcheck;
use crate::model::load_checkpoint;
use crate::scene::{make_dataset, SceneConfig};
use crate::trainer::{train, RunConfig};
use crate::voxel::GridSpec;

const DEFAULT_VOXEL_SIZE: f32 = 0.15;

/// Grid dims in storage order, written `AxBxC`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridArg(pub [usize; 3]);

impl FromStr for GridArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(['x', 'X']).collect();
        if parts.len() != 3 {
            return Err(format!("expected LxWxH, got {s:?}"));
        }
        let mut dims = [0; 3];
        for (d, p) in dims.iter_mut().zip(parts) {
            *d = p.trim().parse().map_err(|_| format!("bad extent {p:?}"))?;
        }
        Ok(GridArg(dims))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Full,
    Surface,
}

impl From<ModeArg> for EvalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => EvalMode::Full,
            ModeArg::Surface => EvalMode::Surface,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "forknet", version, about = "Semantic scene completion from a single depth image")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenData),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out split.
    Eval(EvalArgs),
    /// Complete one depth image.
    Complete(CompleteArgs),
    /// Decode paired SDF and semantic volumes from sampled latent codes.
    Sample(SampleArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

#[derive(Debug, Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "32x16x32")]
    grid: GridArg,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = DEFAULT_VOXEL_SIZE)]
    voxel_size: f32,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML file with `[model]` and `[train]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    grid: Option<GridArg>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Both modes when omitted.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Directory for the `class iou tp fp fn` files.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompleteArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// PGM depth image with its sidecar.
    #[arg(long)]
    depth: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mesh: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_VOXEL_SIZE)]
    voxel_size: f32,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_VOXEL_SIZE)]
    voxel_size: f32,
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::GenData(a) => {
            let grid = GridSpec::new(a.grid.0, a.voxel_size, [0.0; 3]);
            let manifest = make_dataset(&a.out, a.count, a.seed, &SceneConfig::for_grid(grid, a.classes))?;
            println!("wrote {} samples to {}", manifest.entries.len(), a.out.display());
        }
        Command::Train(a) => {
            let mut config = match &a.config {
                Some(p) => RunConfig::from_toml(&read_text(p)?)?,
                None => RunConfig::default(),
            };
            if let Some(s) = a.seed {
                config.train.seed = s;
            }
            if let Some(g) = a.grid {
                config.model.grid = g.0;
            }
            if let Some(c) = a.classes {
                config.model.classes = c;
            }
            if let Some(e) = a.epochs {
                config.train.epochs = e;
            }
            fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
            let cfg_path = a.out.join("config.toml");
            fs::write(&cfg_path, config.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
            let outcome = train(&a.data, &config, &a.out)?;
            if let Some(last) = outcome.epochs.last() {
                println!("epochs {} l_pred {:.4} l_recon {:.4}", outcome.epochs.len(), last.l_pred, last.l_recon);
            }
            println!("checkpoint {}", outcome.checkpoint.display());
            println!("metrics {}", outcome.metrics.display());
        }
        Command::Eval(a) => {
            let net = load_checkpoint(&a.ckpt)?;
            let names = class_names(net.config().classes);
            let modes = match a.mode {
                Some(m) => vec![m.into()],
                None => vec![EvalMode::Full, EvalMode::Surface],
            };
            for mode in modes {
                let e = evaluate(&net, &a.data, mode)?;
                println!("model ({})", mode.name());
                print!("{}", e.model.table(&names));
                println!("majority fill (class {})", e.majority_class);
                print!("{}", e.majority.table(&names));
                println!("copy visible");
                print!("{}", e.copy_visible.table(&names));
                println!();
                if let Some(dir) = &a.out {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                    for (tag, report) in [("model", &e.model), ("majority", &e.majority), ("copy_visible", &e.copy_visible)] {
                        let p = dir.join(format!("iou_{}_{tag}.txt", mode.name()));
                        fs::write(&p, report.to_text()).map_err(|e| Error::io(&p, e))?;
                    }
                }
            }
        }
        Command::Complete(a) => {
            let net = load_checkpoint(&a.ckpt)?;
            complete(&a.depth, &net, a.voxel_size, &a.out, a.mesh.as_deref())?;
            println!("wrote x_hat.fvox g.fvox s.fvox to {}", a.out.display());
        }
        Command::Sample(a) => {
            let net = load_checkpoint(&a.ckpt)?;
            let pairs = sample_pairs(&net, a.count, 1.0, a.seed, a.voxel_size)?;
            let written = write_pairs(&pairs, &a.out)?;
            println!("wrote {} pairs to {}", written.len(), a.out.display());
        }
        Command::Gradcheck => {
            let results = gradcheck::run_all()?;
            let mut ok = true;
            for r in &results {
                ok &= r.passed();
                println!("{:<40} {:.3e} {}", r.name, r.worst, if r.passed() { "pass" } else { "FAIL" });
            }
            println!("tolerance {:.0e}: {}", gradcheck::TOLERANCE, if ok { "all pass" } else { "failures" });
            return Ok(if ok { 0 } else { 1 });
        }
    }
    Ok(0)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_argument() {
        assert_eq!("32x16x32".parse::<GridArg>().unwrap(), GridArg([32, 16, 32]));
        assert!("32x16".parse::<GridArg>().is_err());
        assert!("axbxc".parse::<GridArg>().is_err());
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        assert_ne!(run(["forknet", "eval", "--bogus"]), 0);
        assert_ne!(run(["forknet"]), 0);
    }
}
