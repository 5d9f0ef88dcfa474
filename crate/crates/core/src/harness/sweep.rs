use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use super::config::ExperimentConfig;
use super::report::{CSensitivityRow, ResultRow, ResultsTable};
use crate::adaptation::{
    balanced_entropy, build_ensemble, compute_weights, integrate, tent_baseline, AdaptationReport,
    LambdaGrid, Strategy,
};
use crate::error::{Error, Result};
use crate::network::{checkpoint, Network, ProbMap, StatMode};
use crate::synthdata::{read_domain, Sample, DOMAINS_FILE};
use crate::trainer::{dice, train_with_progress, History};

pub const TENT_METHOD: &str = "TENT";

/// Row label of a fixed-lambda member.
pub fn lambda_label(lambda: f64) -> String {
    format!("lambda={lambda:?}")
}

/// Dice of every method on one image, in report order: grid members,
/// strategies, then Tent.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageResult {
    pub index: usize,
    pub methods: Vec<(String, f64)>,
}

/// Settings that apply to each target image.
#[derive(Clone, Debug)]
pub struct ImageProtocol {
    pub grid: LambdaGrid,
    pub strategies: Vec<Strategy>,
    pub rho: f64,
    pub tent_steps: usize,
    pub tent_lr: f32,
}

impl ImageProtocol {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            grid: cfg.grid()?,
            strategies: cfg.strategies.clone(),
            rho: cfg.rho,
            tent_steps: cfg.tent_steps,
            tent_lr: cfg.tent_lr,
        })
    }

    pub fn method_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.grid.values().iter().map(|&l| lambda_label(l)).collect();
        names.extend(self.strategies.iter().map(ToString::to_string));
        names.push(TENT_METHOD.into());
        names
    }
}

/// Adapts to one image from scratch. The network is only read, so images
/// can be evaluated in any order.
pub fn evaluate_image(net: &Network, sample: &Sample, protocol: &ImageProtocol) -> Result<ImageResult> {
    let where_ = |what: String| format!("{} image {} {what}", sample.domain, sample.index);
    let x = sample.tensor();
    let rho = protocol
        .strategies
        .iter()
        .any(|s| s.needs_sharpness())
        .then_some(protocol.rho);
    let (predictions, entropy, sharpness) =
        build_ensemble(net, &x, &protocol.grid, rho).map_err(|e| e.context(where_("ensemble".into())))?;
    let mut methods = Vec::new();
    for (&l, p) in protocol.grid.values().iter().zip(&predictions) {
        let d = dice(&p.threshold(0.5), &sample.mask).map_err(|e| e.context(where_(format!("lambda {l}"))))?;
        methods.push((lambda_label(l), d));
    }
    let base = AdaptationReport {
        strategy: Strategy::default(),
        lambdas: protocol.grid.values().to_vec(),
        predictions,
        entropy,
        sharpness,
        scores: Vec::new(),
        weights: Vec::new(),
        integrated: ProbMap::uniform(sample.height, sample.width, 0.5)?,
        dice: None,
        member_dice: None,
    };
    for &s in &protocol.strategies {
        let d = base
            .reweigh(s)
            .and_then(|r| dice(&r.integrated.threshold(0.5), &sample.mask))
            .map_err(|e| e.context(where_(format!("strategy {s}"))))?;
        methods.push((s.to_string(), d));
    }
    let d = tent_baseline(net, &x, protocol.tent_steps, protocol.tent_lr)
        .and_then(|p| dice(&p.threshold(0.5), &sample.mask))
        .map_err(|e| e.context(where_(TENT_METHOD.into())))?;
    methods.push((TENT_METHOD.into(), d));
    Ok(ImageResult {
        index: sample.index,
        methods,
    })
}

/// Mean Dice per method over images, accumulated in image order.
pub fn average_results(results: &[ImageResult]) -> Result<Vec<(String, f64)>> {
    let first = results
        .first()
        .ok_or_else(|| Error::Config("no target images to evaluate".into()))?;
    let mut sums: Vec<(String, f64)> = first.methods.iter().map(|(m, _)| (m.clone(), 0.0)).collect();
    for r in results {
        for ((name, sum), (m, d)) in sums.iter_mut().zip(&r.methods) {
            debug_assert_eq!(name, m);
            *sum += d;
        }
    }
    let n = results.len() as f64;
    Ok(sums.into_iter().map(|(m, s)| (m, s / n)).collect())
}

/// ENT_BALN Dice on one image for each grid step. Forwards are shared
/// between grids with common members.
pub fn c_sensitivity_image(net: &Network, sample: &Sample, c_values: &[f64]) -> Result<Vec<(f64, usize, f64)>> {
    let x = sample.tensor();
    let mut cache: HashMap<i64, ProbMap> = HashMap::new();
    let mut out = Vec::with_capacity(c_values.len());
    for &c in c_values {
        let grid = LambdaGrid::new(c)?;
        let mut preds = Vec::with_capacity(grid.len());
        for &l in grid.values() {
            let key = (l * 1e9).round() as i64;
            let p = match cache.entry(key) {
                Entry::Occupied(e) => e.into_mut(),
                Entry::Vacant(e) => e.insert(
                    net.forward(&x, StatMode::new(l as f32)?)
                        .map_err(|e| e.context(format!("{} image {} lambda {l}", sample.domain, sample.index)))?,
                ),
            };
            preds.push(p.clone());
        }
        let stats: Vec<_> = preds.iter().map(balanced_entropy).collect();
        let w = compute_weights(Strategy::EntBaln, &stats, None)?;
        let d = dice(&integrate(&preds, &w.normalized)?.threshold(0.5), &sample.mask)?;
        out.push((c, grid.len(), d));
    }
    Ok(out)
}

/// Reads a domain from `data_root`, or generates it from the config's
/// dataset recipe when nothing is on disk.
pub fn load_domain(cfg: &ExperimentConfig, name: &str) -> Result<Vec<Sample>> {
    if cfg.data_root.join(DOMAINS_FILE).exists() {
        return read_domain(&cfg.data_root, name);
    }
    match &cfg.dataset {
        Some(plan) => plan.generate_domain(name),
        None => Err(Error::MissingPath(cfg.data_root.join(DOMAINS_FILE))),
    }
}

/// Everything a sweep produces.
#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub table: ResultsTable,
    pub histories: Vec<History>,
    /// Wall-clock training time per trial.
    pub train_seconds: Vec<f64>,
}

/// Trains a fresh network for trial `t` on the source samples.
pub fn train_trial(
    cfg: &ExperimentConfig,
    trial: usize,
    source: &[Sample],
    log: &mut impl FnMut(&str),
) -> Result<(Network, History)> {
    let init = Network::build(cfg.network, cfg.trial_init_seed(trial))?;
    train_with_progress(&init, source, &cfg.trial_train_config(trial), |r| {
        log(&format!(
            "trial {trial} epoch {:3}  loss {:.4}  val dice {:.4}",
            r.epoch, r.train_loss, r.val_dice
        ))
    })
}

/// Runs every trial: train on the source, adapt to each target image
/// independently, average. With `out` set, the report files and per-trial
/// checkpoints are written there.
pub fn run_sweep(cfg: &ExperimentConfig, out: Option<&Path>, mut log: impl FnMut(&str)) -> Result<SweepOutcome> {
    cfg.validate()?;
    if cfg.targets.is_empty() {
        return Err(Error::Config("sweep needs at least one target domain".into()));
    }
    let protocol = ImageProtocol::from_config(cfg)?;
    let source = load_domain(cfg, &cfg.source)?;
    let mut targets = Vec::with_capacity(cfg.targets.len());
    for name in &cfg.targets {
        let mut samples = load_domain(cfg, name)?;
        if let Some(m) = cfg.max_target_images {
            samples.truncate(m);
        }
        targets.push((name.clone(), samples));
    }

    let mut table = ResultsTable::default();
    let mut histories = Vec::with_capacity(cfg.trials);
    let mut train_seconds = Vec::with_capacity(cfg.trials);
    for trial in 0..cfg.trials {
        let started = Instant::now();
        let (net, history) = train_trial(cfg, trial, &source, &mut log)?;
        train_seconds.push(started.elapsed().as_secs_f64());
        log(&format!(
            "trial {trial}: best val dice {:.4} at epoch {}",
            history.best_val_dice, history.best_epoch
        ));
        if let Some(out) = out {
            let dir = out.join("trials").join(trial.to_string());
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            checkpoint::save(&net, &dir.join("checkpoint"))?;
            history.write_csv(&dir.join("history.csv"))?;
        }
        for (name, samples) in &targets {
            let results: Vec<ImageResult> = samples
                .iter()
                .map(|s| evaluate_image(&net, s, &protocol))
                .collect::<Result<_>>()?;
            for (method, d) in average_results(&results)? {
                table.rows.push(ResultRow {
                    method,
                    source: cfg.source.clone(),
                    target: name.clone(),
                    trial,
                    dice: d,
                });
            }
            if !cfg.c_values.is_empty() {
                let mut sums = vec![0.0; cfg.c_values.len()];
                let mut members = vec![0; cfg.c_values.len()];
                for s in samples {
                    for (k, (_, m, d)) in c_sensitivity_image(&net, s, &cfg.c_values)?.into_iter().enumerate() {
                        sums[k] += d;
                        members[k] = m;
                    }
                }
                for (k, &c) in cfg.c_values.iter().enumerate() {
                    table.c_sensitivity.push(CSensitivityRow {
                        c,
                        members: members[k],
                        source: cfg.source.clone(),
                        target: name.clone(),
                        trial,
                        dice: sums[k] / samples.len() as f64,
                    });
                }
            }
            log(&format!("trial {trial}: evaluated {} images of {name}", samples.len()));
        }
        histories.push(history);
    }
    if let Some(out) = out {
        table.write(out)?;
    }
    Ok(SweepOutcome {
        table,
        histories,
        train_seconds,
    })
}
