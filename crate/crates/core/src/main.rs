use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use intent_core::adaptation::{intent_adapt, LambdaGrid, Strategy, DEFAULT_RHO};
use intent_core::harness::{load_domain, run_sweep, train_trial, ExperimentConfig};
use intent_core::kernel::Tensor;
use intent_core::network::checkpoint;
use intent_core::synthdata::{read_image, read_mask, write_dataset, write_image, write_mask};
use intent_core::{Error, Result};

#[derive(Parser)]
#[command(name = "intent", version, about = "Single-image test-time adaptation over batch-norm statistics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by the config.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train on the source domain and save a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a checkpoint to one image.
    Adapt {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Ground truth; adds Dice scores to the report.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value = "ENT_BALN")]
        strategy: Strategy,
        /// Grid step.
        #[arg(long, default_value_t = 0.2)]
        c: f64,
        #[arg(long, default_value_t = DEFAULT_RHO)]
        rho: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train per trial and evaluate every method on every target image.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Config file plus command-line overrides.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    source: Option<String>,
    /// Replaces the target list; repeatable.
    #[arg(long = "target")]
    targets: Vec<String>,
    /// Grid step.
    #[arg(long)]
    c: Option<f64>,
    /// Replaces the strategy list; repeatable.
    #[arg(long = "strategy")]
    strategies: Vec<Strategy>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_target_images: Option<usize>,
    /// Replaces the C-sensitivity steps; comma separated.
    #[arg(long, value_delimiter = ',')]
    c_values: Vec<f64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::from_file(&self.config)?;
        if let Some(v) = &self.data_root {
            cfg.data_root = v.clone();
        }
        if let Some(v) = &self.source {
            cfg.source = v.clone();
        }
        if !self.targets.is_empty() {
            cfg.targets = self.targets.clone();
        }
        if let Some(v) = self.c {
            cfg.grid_step = v;
        }
        if !self.strategies.is_empty() {
            cfg.strategies = self.strategies.clone();
        }
        if let Some(v) = self.rho {
            cfg.rho = v;
        }
        if let Some(v) = self.trials {
            cfg.trials = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if self.max_target_images.is_some() {
            cfg.max_target_images = self.max_target_images;
        }
        if !self.c_values.is_empty() {
            cfg.c_values = self.c_values.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn log(line: &str) {
    eprintln!("{line}");
}

fn gen_data(cfg: &ExperimentConfig) -> Result<()> {
    let plan = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("config has no \"dataset\" section".into()))?;
    write_dataset(&cfg.data_root, plan)?;
    log(&format!("wrote {} domains to {}", plan.domains.len(), cfg.data_root.display()));
    Ok(())
}

fn train(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let source = load_domain(cfg, &cfg.source)?;
    let (net, history) = train_trial(cfg, 0, &source, &mut |l| log(l))?;
    checkpoint::save(&net, out)?;
    history.write_csv(&out.join("history.csv"))?;
    log(&format!(
        "best val dice {:.4} at epoch {}; checkpoint in {}",
        history.best_val_dice,
        history.best_epoch,
        out.display()
    ));
    Ok(())
}

fn adapt(
    ckpt: &Path,
    image: &Path,
    mask: Option<&Path>,
    strategy: Strategy,
    c: f64,
    rho: f64,
    out: &Path,
) -> Result<()> {
    let grid = LambdaGrid::new(c)?;
    if let Strategy::EntTopK(k) = strategy {
        if k == 0 || k > grid.len() {
            return Err(Error::Config(format!("ENT_TOPK K = {k} needs 1 <= K <= {}", grid.len())));
        }
    }
    let net = checkpoint::load(ckpt)?;
    let (h, w, pixels) = read_image(image)?;
    net.config()
        .check_spatial(h, w)
        .map_err(|e| Error::Format(format!("{}: {e}", image.display())))?;
    let x = Tensor::new(vec![1, net.config().in_channels, h, w], pixels)
        .map_err(|e| Error::Format(format!("{}: {e}", image.display())))?;
    let mut report = intent_adapt(&net, &x, &grid, strategy, rho)?;
    if let Some(mask) = mask {
        let (mh, mw, gt) = read_mask(mask)?;
        if (mh, mw) != (h, w) {
            return Err(Error::Format(format!("mask {mh}x{mw} does not match image {h}x{w}")));
        }
        report.score(&gt)?;
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Contract(e.to_string()))?;
    let path = out.join("report.json");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    write_image(&out.join("prediction.pgm"), h, w, report.integrated.values())?;
    write_mask(&out.join("segmentation.pgm"), h, w, &report.integrated.threshold(0.5))?;
    match report.dice {
        Some(d) => log(&format!("{strategy}: dice {d:.4}")),
        None => log(&format!("{strategy}: weights {:?}", report.weights)),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config } => gen_data(&config.load()?),
        Command::Train { config, out } => train(&config.load()?, &out),
        Command::Adapt {
            ckpt,
            image,
            mask,
            strategy,
            c,
            rho,
            out,
        } => adapt(&ckpt, &image, mask.as_deref(), strategy, c, rho, &out),
        Command::Sweep { config, out } => {
            let cfg = config.load()?;
            run_sweep(&cfg, Some(&out), log)?;
            log(&format!("results in {}", out.display()));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
