//! Subcommand bodies.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rrelu::accounting::{
    active_filters_per_unit, filter_path_distribution, savings_report, slope_histogram, slope_histogram_export,
};
use rrelu::checkpoint::{load_checkpoint, save_checkpoint};
use rrelu::init::{init_kaiming, init_type1, init_type2};
use rrelu::model::{spec_from_name, Model};
use rrelu::pruning::{apply_mask_zero, compact, select_gamma as search_gamma, verify_equivalence, PruneMask};
use rrelu::training::{accuracy, train_with_progress, OptimizerConfig, Schedule};
use serde::Serialize;
use serde_json::json;

use crate::config::{default_train, read_config, write_json, DataConfig, InitKind, RunConfig};
use crate::{
    AnalyzeArgs, CliError, DataArgs, ExportHistArgs, OptimizerKind, PruneArgs, ReportArgs, ScheduleKind,
    SelectGammaArgs, TrainArgs,
};

const LOCK_FILE: &str = ".rrelu.lock";
const EVAL_BATCH: usize = 500;

/// Exclusive claim on an output directory, released on drop.
struct OutLock(PathBuf);

impl OutLock {
    fn acquire(dir: &Path) -> Result<OutLock, CliError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(OutLock(path))
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(rrelu::Error::Io(io::Error::new(
                e.kind(),
                format!("{} is in use by another run (remove {} if stale)", dir.display(), path.display()),
            ))
            .into()),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn apply_data_args(d: &mut DataConfig, a: &DataArgs) {
    if let Some(v) = a.dataset {
        d.dataset = v;
    }
    if let Some(v) = &a.data_dir {
        d.root = Some(v.clone());
    }
    if a.train_limit.is_some() {
        d.train_limit = a.train_limit;
    }
    if a.test_limit.is_some() {
        d.test_limit = a.test_limit;
    }
    if let Some(v) = &a.blob_shape {
        d.blobs.shape = v.clone();
    }
    if let Some(v) = a.blob_classes {
        d.blobs.classes = v;
    }
    if let Some(v) = a.blob_separation {
        d.blobs.separation = v;
    }
    if let Some(v) = a.blob_train {
        d.blobs.train = v;
    }
    if let Some(v) = a.blob_test {
        d.blobs.test = v;
    }
    if let Some(v) = a.blob_seed {
        d.blobs.seed = v;
    }
    let blob_flags = a.blob_shape.is_some()
        || a.blob_classes.is_some()
        || a.blob_separation.is_some()
        || a.blob_train.is_some()
        || a.blob_test.is_some()
        || a.blob_seed.is_some();
    // stored constants were fitted on other data
    if blob_flags || a.dataset.is_some() || a.data_dir.is_some() || a.train_limit.is_some() {
        d.standardizer = None;
    }
}

/// Run config beside a checkpoint directory (`<run>/config.json` for `<run>/checkpoint`).
fn sibling_config(checkpoint: &Path) -> Option<PathBuf> {
    let parent = checkpoint.parent()?;
    let p = parent.join("config.json");
    p.exists().then_some(p)
}

fn resolve_data(a: &DataArgs, checkpoint: &Path) -> Result<(DataConfig, Option<RunConfig>), CliError> {
    let run = match a.config.clone().or_else(|| sibling_config(checkpoint)) {
        Some(p) => Some(read_config(&p)?),
        None => None,
    };
    let mut d = run.as_ref().map(|r| r.data.clone()).unwrap_or_default();
    apply_data_args(&mut d, a);
    Ok((d, run))
}

fn load(dir: &Path) -> Result<Model, CliError> {
    Ok(load_checkpoint(dir)?)
}

fn build_config(a: &TrainArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &a.data.config {
        Some(p) => read_config(p)?,
        None => {
            let model = a.model.clone().unwrap_or_else(|| RunConfig::default().model);
            let dataset = a.data.dataset.unwrap_or(DataConfig::default().dataset);
            RunConfig {
                train: default_train(&model, dataset),
                model,
                ..RunConfig::default()
            }
        }
    };
    apply_data_args(&mut cfg.data, &a.data);
    if let Some(v) = &a.model {
        cfg.model = v.clone();
    }
    if let Some(v) = a.activation {
        cfg.activation = v.into();
    }
    if let Some(v) = a.init {
        cfg.init = v;
    }
    if let Some(v) = &a.pretrained {
        cfg.pretrained = Some(v.clone());
    }
    if a.slopes_only {
        cfg.train.freeze_weights = true;
    }
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    match a.optimizer {
        Some(OptimizerKind::Sgd) => t.optimizer = OptimizerConfig::sgd(a.lr.unwrap_or(0.1)),
        Some(OptimizerKind::Adam) => t.optimizer = OptimizerConfig::adam(a.lr.unwrap_or(1e-3)),
        None => {
            if let Some(lr) = a.lr {
                match &mut t.optimizer {
                    OptimizerConfig::Sgd { lr: l, .. } | OptimizerConfig::Adam { lr: l, .. } => *l = lr,
                }
            }
        }
    }
    if let Some(m) = a.momentum {
        match &mut t.optimizer {
            OptimizerConfig::Sgd { momentum, .. } => *momentum = m,
            OptimizerConfig::Adam { .. } => return Err(usage("--momentum applies to sgd only")),
        }
    }
    match a.schedule {
        Some(ScheduleKind::Constant) => t.schedule = Schedule::Constant,
        Some(ScheduleKind::Cosine) => t.schedule = Schedule::Cosine { lr_min: 0.0 },
        Some(ScheduleKind::Multistep) => {
            t.schedule = Schedule::Multistep {
                milestones: vec![],
                decay: 0.1,
            }
        }
        None => {}
    }
    match &mut t.schedule {
        Schedule::Multistep { milestones, decay } => {
            if let Some(m) = &a.milestones {
                *milestones = m.clone();
            }
            if let Some(d) = a.decay {
                *decay = d;
            }
        }
        Schedule::Cosine { lr_min } => {
            if let Some(v) = a.lr_min {
                *lr_min = v;
            }
        }
        Schedule::Constant => {}
    }
    if !matches!(t.schedule, Schedule::Multistep { .. }) && (a.milestones.is_some() || a.decay.is_some()) {
        return Err(usage("--milestones and --decay need --schedule multistep"));
    }
    if let Some(v) = a.weight_decay {
        t.weight_decay = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.augment {
        t.augment = v.into();
    }
    if let Some(v) = &a.out {
        cfg.out = Some(v.clone());
    }
    cfg.train.validate().map_err(|e| usage(e.to_string()))?;
    if cfg.init == InitKind::Type2 && cfg.pretrained.is_none() {
        return Err(usage("--init type2 needs --pretrained <checkpoint>"));
    }
    if cfg.train.freeze_weights && cfg.activation == rrelu::model::ActivationKind::Relu {
        return Err(usage("--slopes-only needs --activation rrelu"));
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct Metrics {
    model: String,
    params: usize,
    slopes: usize,
    epochs: usize,
    initial_test_accuracy: Option<f64>,
    final_train_accuracy: Option<f64>,
    test_accuracy: f64,
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = build_config(&a)?;
    let out = cfg.out.clone().ok_or_else(|| usage("--out is required"))?;
    let _lock = OutLock::acquire(&out)?;

    let splits = cfg.data.load(true)?;
    cfg.data.standardizer = Some(splits.standardizer.clone());
    let train_set = splits.train.as_ref().expect("training split requested");
    let (shape, classes) = DataConfig::sample_shape_and_classes(&splits);
    let spec = spec_from_name(&cfg.model, &shape, classes, cfg.activation).map_err(|e| usage(e.to_string()))?;
    let mut model = Model::new(spec)?;
    match cfg.init {
        InitKind::Type1 => init_type1(&mut model, cfg.train.seed),
        InitKind::Kaiming => init_kaiming(&mut model, cfg.train.seed),
        InitKind::Type2 => {
            let path = cfg.pretrained.as_ref().expect("checked in build_config");
            init_type2(&mut model, &load(path)?)?;
        }
    }
    write_json(&out.join("config.json"), &cfg)?;

    eprintln!(
        "training {} ({} params) on {} samples for {} epochs",
        cfg.model,
        model.num_params(),
        train_set.len(),
        cfg.train.epochs
    );
    let log = train_with_progress(&mut model, train_set, Some(&splits.test), &cfg.train, &mut |r| {
        let val = r.val_acc.map_or(String::new(), |v| format!(" test {:.2}%", 100.0 * v));
        eprintln!(
            "epoch {:>4} lr {:.3e} loss {:.4} train {:.2}%{val}",
            r.epoch,
            r.lr,
            r.train_loss,
            100.0 * r.train_acc
        );
    })?;
    save_checkpoint(&model, &out.join("checkpoint"))?;
    log.write_csv(BufWriter::new(File::create(out.join("train_log.csv"))?))?;

    let test_accuracy = match log.records.last().and_then(|r| r.val_acc) {
        Some(v) => v,
        None => accuracy(&model, &splits.test, EVAL_BATCH)?,
    };
    let metrics = Metrics {
        model: cfg.model.clone(),
        params: model.num_params(),
        slopes: model.slope_bank().total(),
        epochs: log.records.len(),
        initial_test_accuracy: log.initial_val_acc,
        final_train_accuracy: log.records.last().map(|r| r.train_acc),
        test_accuracy,
    };
    write_json(&out.join("metrics.json"), &metrics)?;
    println!("test accuracy {:.2}%", 100.0 * test_accuracy);
    Ok(())
}

pub fn select_gamma(a: SelectGammaArgs) -> Result<(), CliError> {
    let (data, _) = resolve_data(&a.data, &a.checkpoint)?;
    let model = load(&a.checkpoint)?;
    let splits = data.load(false)?;
    let (even, odd) = splits.test.split_even_odd()?;
    let found = search_gamma(&model, &even, a.tolerance_pp)?;

    let mask = PruneMask::from_threshold(&model, found.gamma);
    let base = accuracy(&model, &odd, EVAL_BATCH)?;
    let pruned = accuracy(&apply_mask_zero(&model, &mask)?, &odd, EVAL_BATCH)?;
    let out = match &a.out {
        Some(p) => p.clone(),
        None => a.checkpoint.parent().unwrap_or(Path::new(".")).join("gamma.json"),
    };
    let body = json!({
        "gamma": found.gamma,
        "tolerance_pp": a.tolerance_pp,
        "selection_split": "test-even",
        "report_split": "test-odd",
        "pruned": found.pruned,
        "total": found.total,
        "selection": found,
        "report": {
            "base_accuracy": base,
            "pruned_accuracy": pruned,
            "drop_pp": 100.0 * (base - pruned),
        },
    });
    write_json(&out, &body)?;
    println!(
        "gamma {} prunes {}/{} slopes; odd-half accuracy {:.2}% -> {:.2}%",
        found.gamma,
        found.pruned,
        found.total,
        100.0 * base,
        100.0 * pruned
    );
    Ok(())
}

fn read_gamma(path: &Path) -> Result<f32, CliError> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    v.get("gamma")
        .and_then(|g| g.as_f64())
        .map(|g| g as f32)
        .ok_or_else(|| usage(format!("{}: no numeric `gamma` field", path.display())))
}

pub fn prune(a: PruneArgs) -> Result<(), CliError> {
    let gamma = match (&a.gamma_file, a.gamma) {
        (Some(p), _) => read_gamma(p)?,
        (None, Some(g)) => g,
        (None, None) => return Err(usage("--gamma or --gamma-file is required")),
    };
    if gamma.is_nan() || gamma < 0.0 {
        return Err(usage(format!("gamma {gamma} must be non-negative")));
    }
    let model = load(&a.checkpoint)?;
    let _lock = OutLock::acquire(&a.out)?;
    let mask = PruneMask::from_threshold(&model, gamma);
    let zeroed = apply_mask_zero(&model, &mask)?;
    let small = compact(&zeroed, &mask)?;
    let eq = verify_equivalence(&zeroed, &small, a.samples, a.tolerance, 0)?;
    write_json(&a.out.join("equivalence.json"), &eq)?;
    if !eq.passed {
        return Err(rrelu::Error::Contract(format!(
            "compacted model differs from the zeroed one by {:e} (tolerance {:e}); nothing written",
            eq.max_abs_diff, eq.tolerance
        ))
        .into());
    }
    save_checkpoint(&small, &a.out.join("checkpoint"))?;
    write_json(&a.out.join("mask.json"), &mask)?;
    let report = savings_report(&model, &small, gamma)?;
    fs::write(a.out.join("savings.txt"), report.to_text())?;
    report.write_csv(BufWriter::new(File::create(a.out.join("savings.csv"))?))?;

    let (data, run) = resolve_data(&a.data, &a.checkpoint)?;
    if let Some(run) = &run {
        write_json(&a.out.join("config.json"), run)?;
    }
    if a.with_accuracy {
        let splits = data.load(false)?;
        let before = accuracy(&model, &splits.test, EVAL_BATCH)?;
        let after = accuracy(&small, &splits.test, EVAL_BATCH)?;
        write_json(
            &a.out.join("accuracy.json"),
            &json!({ "split": "test", "before": before, "after": after }),
        )?;
        println!("test accuracy {:.2}% -> {:.2}%", 100.0 * before, 100.0 * after);
    }
    print!("{}", report.to_text());
    println!("equivalence max |diff| {:e} over {} samples", eq.max_abs_diff, eq.samples);
    Ok(())
}

pub fn report(a: ReportArgs) -> Result<(), CliError> {
    let before = load(&a.checkpoint)?;
    let after = match &a.pruned {
        Some(p) => load(p)?,
        None => before.clone(),
    };
    let report = savings_report(&before, &after, a.gamma)?;
    print!("{}", report.to_text());
    if let Some(p) = &a.csv {
        report.write_csv(BufWriter::new(File::create(p)?))?;
    }
    Ok(())
}

pub fn analyze(a: AnalyzeArgs) -> Result<(), CliError> {
    let model = load(&a.checkpoint)?;
    if a.filter_path {
        // channels with an exactly zero slope carry nothing
        let dead = PruneMask::from_threshold(&model, f32::MIN_POSITIVE);
        let per_unit = active_filters_per_unit(model.spec(), Some(&dead));
        if per_unit.is_empty() {
            return Err(usage(format!("{} has no residual units", model.spec().name)));
        }
        let dist = filter_path_distribution(&per_unit)?;
        println!("units {} active filters {:?}", dist.units(), per_unit);
        println!("max length {} paths {}", dist.max_length(), dist.total_paths());
        match &a.csv {
            Some(p) => dist.write_csv(BufWriter::new(File::create(p)?))?,
            None => dist.write_csv(io::stdout().lock())?,
        }
        return Ok(());
    }
    let bins = a.hist.expect("clap requires --hist without --filter-path");
    if bins == 0 {
        return Err(usage("--hist needs at least one bin"));
    }
    let rows = slope_histogram(&model, bins)?;
    for (group, lo, hi, count) in rows.iter().filter(|r| r.0 == "all") {
        println!("{group} [{lo:+.4}, {hi:+.4}) {count}");
    }
    if let Some(p) = &a.csv {
        slope_histogram_export(&model, bins, BufWriter::new(File::create(p)?))?;
    }
    Ok(())
}

pub fn export_hist(a: ExportHistArgs) -> Result<(), CliError> {
    if a.bins == 0 {
        return Err(usage("--bins must be positive"));
    }
    let model = load(&a.checkpoint)?;
    let mut w = BufWriter::new(File::create(&a.out)?);
    slope_histogram_export(&model, a.bins, &mut w)?;
    w.flush()?;
    Ok(())
}
