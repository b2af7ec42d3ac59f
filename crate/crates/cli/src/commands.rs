use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use dfg_core::arch::{load_checkpoint, save_checkpoint, Checkpoint, SplitModel};
use dfg_core::attention::{calibration_indices, write_filter_weights};
use dfg_core::data::TensorDataset;
use dfg_core::eval::{evaluate, export_features, sweep_rho, write_report_file, write_sweep, RunReport, SweepRow};
use dfg_core::train::{baseline_train, pretrain_source, DfgTrainer, LogWriter, TrainMode};
use dfg_core::DfgError;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

/// Caps worker threads when set to a positive integer.
pub const THREADS_ENV: &str = "DFG_NUM_THREADS";

pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn unix_secs() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// Timestamps and other run facts that are expected to differ between
/// otherwise identical runs. Kept out of every CSV.
#[derive(Debug, Serialize)]
pub struct RunMeta {
    pub command: String,
    pub mode: Option<TrainMode>,
    pub seed: u64,
    pub config_hash: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub wall_time_secs: f64,
    pub iterations_run: usize,
    pub resumed_from: Option<usize>,
    pub deterministic: bool,
    pub version: &'static str,
}

fn write_meta(dir: &Path, meta: &RunMeta) -> Result<()> {
    let text = serde_json::to_string_pretty(meta).expect("plain struct serialises");
    write_file(&dir.join("run_meta.json"), text + "\n")
}

fn write_effective_config(cfg: &RunConfig) -> Result<()> {
    write_file(&cfg.output_dir.join("effective_config.toml"), cfg.to_toml()?)
}

/// Loads the pretrained extractor/classifier named by the config.
pub fn load_source(cfg: &RunConfig) -> Result<SplitModel<f32>> {
    let path = cfg.source_checkpoint();
    if !path.is_file() {
        return Err(CliError::config(format!(
            "source checkpoint {} not found; run `dfg pretrain` or set source.checkpoint",
            path.display()
        )));
    }
    let ck = load_checkpoint::<f32>(&path, Some(cfg.architecture.split_hash()?)).map_err(|e| match e {
        DfgError::Checkpoint(msg) => {
            DfgError::Checkpoint(format!("{}: {msg} (not a source checkpoint for this architecture?)", path.display()))
        }
        other => other,
    })?;
    let mut model = cfg.architecture.build_split(0)?;
    ck.restore_network("extractor", &mut model.extractor)?;
    ck.restore_network("classifier", &mut model.classifier)?;
    Ok(model)
}

fn split_checkpoint(model: &SplitModel<f32>, hash: u64, seed: u64, iteration: u64) -> Checkpoint<f32> {
    let mut ck = Checkpoint::new(hash, seed, iteration);
    ck.insert_network("extractor", &model.extractor);
    ck.insert_network("classifier", &model.classifier);
    ck
}

/// Trains the source networks and writes `source.ckpt` and `report.csv`
/// (accuracy on the source data) under the output directory.
pub fn cmd_pretrain(cfg: &RunConfig, deterministic: bool) -> Result<RunReport> {
    cfg.validate()?;
    let data_cfg = cfg
        .source
        .data
        .as_ref()
        .ok_or_else(|| CliError::config("pretrain needs a [source.data] section"))?;
    let started = unix_secs();
    let clock = Instant::now();
    create_dir(&cfg.output_dir)?;
    write_effective_config(cfg)?;
    let hash = cfg.hash()?;
    let data = data_cfg.load("source.data")?;
    let seed = cfg.source.pretrain.seed;
    let mut model = cfg.architecture.build_split(seed)?;
    let summary = pretrain_source(&mut model, &data, &cfg.source.pretrain)?;
    log::info!(
        "pretrained {} steps, source accuracy {:.4}",
        summary.steps,
        summary.train_accuracy
    );
    let ck = split_checkpoint(&model, cfg.architecture.split_hash()?, seed, summary.steps as u64);
    save_checkpoint(&ck, &cfg.output_dir.join("source.ckpt"))?;
    let mut report = evaluate(&mut model, &data, seed, &hash)?;
    report.wall_time_secs = clock.elapsed().as_secs_f64();
    write_report_file(&cfg.output_dir.join("report.csv"), std::slice::from_ref(&report))?;
    write_meta(
        &cfg.output_dir,
        &RunMeta {
            command: "pretrain".into(),
            mode: None,
            seed,
            config_hash: hash,
            started_unix: started,
            finished_unix: unix_secs(),
            wall_time_secs: report.wall_time_secs,
            iterations_run: summary.steps,
            resumed_from: None,
            deterministic,
            version: env!("CARGO_PKG_VERSION"),
        },
    )?;
    Ok(report)
}

/// Trains in `cfg.train.mode` and writes the run artifacts. Returns the
/// test report.
pub fn cmd_train(cfg: &RunConfig, resume: bool, deterministic: bool) -> Result<RunReport> {
    cfg.validate()?;
    let mode = cfg.train.mode;
    if resume && mode != TrainMode::Dfg {
        return Err(CliError::config("--resume is supported for dfg runs only"));
    }
    let source = match mode {
        TrainMode::Original => {
            if cfg.source.checkpoint.is_some() {
                log::warn!("original mode ignores source.checkpoint");
            }
            None
        }
        TrainMode::Finetune | TrainMode::Dfg => Some(load_source(cfg)?),
    };
    let started = unix_secs();
    let clock = Instant::now();
    let out = &cfg.output_dir;
    create_dir(out)?;
    write_effective_config(cfg)?;
    let hash = cfg.hash()?;
    let train = cfg.data.train.load("data.train")?;
    let test = cfg.data.test.load("data.test")?;
    check_classes(cfg, &train, "data.train")?;
    check_classes(cfg, &test, "data.test")?;

    let (mut model, resumed_from) = match (mode, source) {
        (TrainMode::Dfg, Some(source)) => run_dfg(cfg, &train, &test, &source, resume)?,
        (_, source) => {
            let template = cfg.architecture.build_split(cfg.train.seed)?;
            let outcome = baseline_train(&cfg.train, &train, &template, source.as_ref())?;
            let mut log = LogWriter::create(&out.join("training_log.csv"), None)?;
            for row in &outcome.log {
                log.push(row)?;
            }
            let ck = split_checkpoint(
                &outcome.model,
                cfg.architecture.split_hash()?,
                cfg.train.seed,
                cfg.train.iterations as u64,
            );
            save_checkpoint(&ck, &out.join("model.ckpt"))?;
            (outcome.model, None)
        }
    };

    let mut report = evaluate(&mut model, &test, cfg.train.seed, &hash)?;
    report.wall_time_secs = clock.elapsed().as_secs_f64();
    write_report_file(&out.join("report.csv"), std::slice::from_ref(&report))?;
    log::info!(
        "{mode:?} seed {}: test accuracy {:.4}",
        cfg.train.seed,
        report.overall_accuracy
    );
    write_meta(
        out,
        &RunMeta {
            command: "train".into(),
            mode: Some(mode),
            seed: cfg.train.seed,
            config_hash: hash,
            started_unix: started,
            finished_unix: unix_secs(),
            wall_time_secs: report.wall_time_secs,
            iterations_run: cfg.train.iterations - resumed_from.unwrap_or(0),
            resumed_from,
            deterministic,
            version: env!("CARGO_PKG_VERSION"),
        },
    )?;
    Ok(report)
}

fn check_classes(cfg: &RunConfig, data: &TensorDataset<f32>, key: &str) -> Result<()> {
    if data.n_classes > cfg.architecture.n_classes {
        return Err(CliError::config(format!(
            "{key} has {} classes but architecture.n_classes = {}",
            data.n_classes, cfg.architecture.n_classes
        )));
    }
    Ok(())
}

fn run_dfg(
    cfg: &RunConfig,
    train: &TensorDataset<f32>,
    test: &TensorDataset<f32>,
    source: &SplitModel<f32>,
    resume: bool,
) -> Result<(SplitModel<f32>, Option<usize>)> {
    let out = &cfg.output_dir;
    let gan = cfg.architecture.gan_specs(source.feature_shape(), cfg.train.z_dim)?;
    let mut trainer = DfgTrainer::new(&cfg.train, train, source, gan)?;
    let resume_path = out.join("checkpoint.ckpt");
    let mut resumed_from = None;
    if resume {
        if !resume_path.is_file() {
            return Err(CliError::config(format!(
                "--resume: no checkpoint at {}",
                resume_path.display()
            )));
        }
        let ck = load_checkpoint::<f32>(&resume_path, Some(trainer.spec_hash()))?;
        if ck.seed != cfg.train.seed {
            return Err(CliError::config(format!(
                "--resume: checkpoint was written by seed {}, run uses seed {}",
                ck.seed, cfg.train.seed
            )));
        }
        trainer.restore(&ck)?;
        log::info!("resuming at iteration {}", trainer.iteration);
        resumed_from = Some(trainer.iteration);
    }
    let mut log = LogWriter::create(&out.join("training_log.csv"), resumed_from)?;
    let every = cfg.export.checkpoint_every;
    let mut last_good = trainer.checkpoint();
    while trainer.iteration < cfg.train.iterations {
        let row = match trainer.step() {
            Ok(row) => row,
            Err(e @ DfgError::NonFinite { .. }) => {
                let path = out.join("last_good.ckpt");
                save_checkpoint(&last_good, &path)?;
                log::error!(
                    "{e}; state after iteration {} saved to {}",
                    last_good.iteration,
                    path.display()
                );
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        };
        log.push(&row)?;
        last_good = trainer.checkpoint();
        let it = trainer.iteration;
        if every > 0 && it % every == 0 {
            save_checkpoint(&last_good, &resume_path)?;
        }
        if it % 100 == 0 {
            log::info!(
                "iteration {it}/{}: W_est {:.4} L_G {:.4}",
                cfg.train.iterations,
                row.wasserstein.unwrap_or(f64::NAN),
                row.generator.unwrap_or(f64::NAN)
            );
        }
    }
    save_checkpoint(&last_good, &out.join("model.ckpt"))?;
    if cfg.export.filter_weights {
        let mut buf = Vec::new();
        write_filter_weights(
            &mut buf,
            &trainer.source_weights,
            &trainer.masked,
            trainer.last_refresh.as_ref(),
        )?;
        write_file(&out.join("filter_weights.csv"), buf)?;
    }
    if cfg.export.features {
        let buf = features_csv(cfg, &mut trainer, test, cfg.export.n_fake)?;
        write_file(&out.join("features.csv"), buf)?;
    }
    Ok((trainer.model, resumed_from))
}

fn feature_subset(cfg: &RunConfig, data: &TensorDataset<f32>) -> Result<TensorDataset<f32>> {
    let idx = calibration_indices(
        &data.labels,
        data.n_classes,
        cfg.export.feature_samples,
        cfg.train.seed,
    );
    Ok(data.subset(&idx)?)
}

fn features_csv(
    cfg: &RunConfig,
    trainer: &mut DfgTrainer<'_, f32>,
    test: &TensorDataset<f32>,
    n_fake: usize,
) -> Result<Vec<u8>> {
    let subset = feature_subset(cfg, test)?;
    let mut buf = Vec::new();
    let masked = trainer.masked.clone();
    export_features(
        &mut buf,
        &mut trainer.model,
        Some((&mut trainer.generator, &masked)),
        &subset,
        n_fake,
        cfg.train.seed,
    )?;
    Ok(buf)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportKind {
    Features,
    FilterWeights,
}

/// Re-exports features or filter weights from a saved checkpoint. A DFG
/// checkpoint supports both; an extractor/classifier checkpoint only
/// supports features of real samples.
pub fn cmd_export(
    cfg: &RunConfig,
    checkpoint: &Path,
    what: ExportKind,
    out: &Path,
    n_fake: Option<usize>,
) -> Result<()> {
    cfg.validate()?;
    let n_fake = n_fake.unwrap_or(cfg.export.n_fake);
    let split_hash = cfg.architecture.split_hash()?;
    let ck = load_checkpoint::<f32>(checkpoint, None)?;
    let test = cfg.data.test.load("data.test")?;
    let bytes = if ck.spec_hash == split_hash {
        if what == ExportKind::FilterWeights {
            return Err(CliError::config(format!(
                "{} holds no filter weights; export them from a dfg model checkpoint",
                checkpoint.display()
            )));
        }
        if n_fake > 0 {
            return Err(CliError::config(format!(
                "{} has no generator; use --n-fake 0",
                checkpoint.display()
            )));
        }
        let mut model = cfg.architecture.build_split(0)?;
        ck.restore_network("extractor", &mut model.extractor)?;
        ck.restore_network("classifier", &mut model.classifier)?;
        let subset = feature_subset(cfg, &test)?;
        let mut buf = Vec::new();
        export_features(&mut buf, &mut model, None, &subset, 0, cfg.train.seed)?;
        buf
    } else {
        let train = cfg.data.train.load("data.train")?;
        let mut base = cfg.architecture.build_split(0)?;
        ck.restore_network("extractor", &mut base.extractor)
            .and_then(|_| ck.restore_network("classifier", &mut base.classifier))
            .map_err(|e| {
                DfgError::Checkpoint(format!(
                    "{} does not match the configured architecture: {e}",
                    checkpoint.display()
                ))
            })?;
        let gan = cfg.architecture.gan_specs(base.feature_shape(), cfg.train.z_dim)?;
        let mut trainer = DfgTrainer::new(&cfg.train, &train, &base, gan)?;
        trainer.restore(&ck)?;
        match what {
            ExportKind::FilterWeights => {
                let mut buf = Vec::new();
                write_filter_weights(
                    &mut buf,
                    &trainer.source_weights,
                    &trainer.masked,
                    trainer.last_refresh.as_ref(),
                )?;
                buf
            }
            ExportKind::Features => features_csv(cfg, &mut trainer, &test, n_fake)?,
        }
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_file(out, bytes)
}

/// Outcome of a blend-weight sweep.
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    /// One report per run, grid-major then seed order.
    pub reports: Vec<RunReport>,
}

/// DFG runs over `grid x seeds` on up to `jobs` threads. Writes `sweep.csv`
/// and a `report.csv` with every run.
pub fn cmd_sweep(cfg: &RunConfig, grid: &[f64], seeds: &[u64], jobs: usize) -> Result<SweepOutcome> {
    cfg.validate()?;
    let distinct = |v: &[u64]| v.iter().collect::<std::collections::BTreeSet<_>>().len() == v.len();
    if !distinct(&grid.iter().map(|r| r.to_bits()).collect::<Vec<_>>()) || !distinct(seeds) {
        return Err(CliError::config("--rho-grid and --seeds must not repeat values"));
    }
    let mut base = cfg.clone();
    base.train.mode = TrainMode::Dfg;
    let source = load_source(&base)?;
    let out = &base.output_dir;
    create_dir(out)?;
    write_effective_config(&base)?;
    let train = base.data.train.load("data.train")?;
    let test = base.data.test.load("data.test")?;
    check_classes(&base, &train, "data.train")?;
    check_classes(&base, &test, "data.test")?;
    let jobs = thread_cap().map_or(jobs, |cap| jobs.min(cap)).max(1);
    log::info!("sweep: {} runs on {jobs} threads", grid.len() * seeds.len());

    let reports: Mutex<BTreeMap<(usize, usize), RunReport>> = Mutex::new(BTreeMap::new());
    let rows = sweep_rho(grid, seeds, jobs, |rho, seed| {
        let mut cfg = base.clone();
        cfg.train.rho = rho;
        cfg.train.seed = seed;
        let hash = cfg.hash().map_err(|e| DfgError::Config(e.to_string()))?;
        let clock = Instant::now();
        let gan = cfg
            .architecture
            .gan_specs(source.feature_shape(), cfg.train.z_dim)
            .map_err(|e| DfgError::Config(e.to_string()))?;
        let mut trainer = DfgTrainer::new(&cfg.train, &train, &source, gan)?;
        trainer.run(|_, _| Ok(()))?;
        let mut report = evaluate(&mut trainer.model, &test, seed, &hash)?;
        report.wall_time_secs = clock.elapsed().as_secs_f64();
        log::info!("rho {rho} seed {seed}: accuracy {:.4}", report.overall_accuracy);
        let acc = report.overall_accuracy;
        let g = grid.iter().position(|&r| r == rho).expect("rho from grid");
        let s = seeds.iter().position(|&x| x == seed).expect("seed from list");
        reports.lock().expect("report table").insert((g, s), report);
        Ok(acc)
    })?;
    let reports: Vec<RunReport> = reports.into_inner().expect("report table").into_values().collect();
    let mut buf = Vec::new();
    write_sweep(&mut buf, &rows)?;
    write_file(&out.join("sweep.csv"), buf)?;
    write_report_file(&out.join("report.csv"), &reports)?;
    Ok(SweepOutcome { rows, reports })
}

/// Parses `"0,0.25,0.5"`.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| CliError::config(format!("--rho-grid: `{t}` is not a number")))
        })
        .collect()
}

/// Parses `"0,1,2"` or the half-open range `"0..3"`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = |t: &str| CliError::config(format!("--seeds: `{t}` is not a seed list or range"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad(s))?;
        let b: u64 = b.trim().parse().map_err(|_| bad(s))?;
        if a >= b {
            return Err(bad(s));
        }
        return Ok((a..b).collect());
    }
    s.split(',').map(|t| t.trim().parse().map_err(|_| bad(t))).collect()
}
