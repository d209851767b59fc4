//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1 and 9 run the `rrelu` binary on MNIST, found through
//! `RRELU_DATA_DIR` or a `data/` directory in or beside the workspace.
//! `RRELU_ACCEPTANCE=2,3` restricts the run to the listed criteria.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::Instant;

use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rrelu::accounting::{
    count_flops_oracle, count_flops_paper, count_params, filter_path_distribution, predict_savings, CostKind,
};
use rrelu::checkpoint::load_checkpoint;
use rrelu::data::{load_mnist, Dataset, Standardizer};
use rrelu::gradcheck::{check_op, Tolerance, OPS};
use rrelu::init::{gmm_high, gmm_low, init_type1, init_type2, sample_truncated_gmm};
use rrelu::model::{build_fcnn, build_residual, spec_from_name, ActivationKind, Model, ModelSpec, ParamKind};
use rrelu::pruning::{apply_mask_zero, compact, removable_layers, verify_equivalence, PruneMask};
use rrelu::training::{accuracy, train, OptimizerConfig, Schedule, TrainConfig};
use rrelu::Tensor;
use serde_json::Value;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mnist_root() -> Option<PathBuf> {
    if let Ok(d) = std::env::var("RRELU_DATA_DIR") {
        return Some(PathBuf::from(d));
    }
    let ws = workspace();
    [ws.join("data"), ws.join("../data")]
        .into_iter()
        .find(|d| d.join("mnist/train-images-idx3-ubyte").exists() || d.join("train-images-idx3-ubyte").exists())
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_rrelu"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.code() != Some(0) {
        return Err(format!(
            "`rrelu {}` exited with {:?}: {}",
            args.first().unwrap_or(&""),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn num(v: &Value, key: &str) -> Result<f64, String> {
    v[key].as_f64().ok_or_else(|| format!("missing `{key}`"))
}

/// Artifacts of the MNIST command-line pipeline.
struct MnistRun {
    dir: tempfile::TempDir,
    stages: Vec<&'static str>,
    report_text: String,
}

/// Train, select gamma, prune, report and analyze the 784-500-10 network;
/// shared by criteria 1 and 9.
fn mnist_pipeline() -> &'static Result<MnistRun, String> {
    static RUN: OnceLock<Result<MnistRun, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let root = mnist_root().ok_or("MNIST files not found; set RRELU_DATA_DIR")?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
        let root = root.to_string_lossy().into_owned();
        let mut stages = Vec::new();
        run_cli(&[
            "train",
            "--model",
            "fcnn-784-500-10",
            "--dataset",
            "mnist",
            "--data-dir",
            &root,
            "--init",
            "type1",
            "--optimizer",
            "adam",
            "--lr",
            "1e-3",
            "--epochs",
            "300",
            "--batch-size",
            "128",
            "--schedule",
            "cosine",
            "--seed",
            "0",
            "--out",
            &p("run"),
        ])?;
        stages.push("train");
        run_cli(&["select-gamma", "--checkpoint", &p("run/checkpoint"), "--tolerance-pp", "0.2"])?;
        stages.push("select-gamma");
        run_cli(&[
            "prune",
            "--checkpoint",
            &p("run/checkpoint"),
            "--gamma-file",
            &p("run/gamma.json"),
            "--out",
            &p("pruned"),
            "--with-accuracy",
        ])?;
        stages.push("prune");
        let report_text = run_cli(&[
            "report",
            "--checkpoint",
            &p("run/checkpoint"),
            "--pruned",
            &p("pruned/checkpoint"),
            "--csv",
            &p("report.csv"),
        ])?;
        stages.push("report");
        run_cli(&["analyze", "--checkpoint", &p("run/checkpoint"), "--hist", "50", "--csv", &p("hist.csv")])?;
        stages.push("analyze");
        Ok(MnistRun {
            dir,
            stages,
            report_text,
        })
    })
}

fn criterion_1() -> Outcome {
    let run = mnist_pipeline().as_ref().map_err(|e| e.clone())?;
    let d = run.dir.path();
    let metrics = read_json(&d.join("run/metrics.json"))?;
    let gamma = read_json(&d.join("run/gamma.json"))?;
    let acc = read_json(&d.join("pruned/accuracy.json"))?;
    let test = num(&metrics, "test_accuracy")?;
    let (pruned, total) = (num(&gamma, "pruned")?, num(&gamma, "total")?);
    let frac = pruned / total;
    let drop_pp = 100.0 * (num(&acc, "before")? - num(&acc, "after")?);
    let odd_drop_pp = num(&gamma["report"], "drop_pp")?;
    let detail = format!(
        "test accuracy {:.2}%, gamma {:.4} prunes {pruned}/{total} slopes ({:.1}%), drop {drop_pp:.2} pp on test, \
         {odd_drop_pp:.2} pp on the held-back odd half",
        100.0 * test,
        num(&gamma, "gamma")?,
        100.0 * frac
    );
    ensure!(test >= 0.978, "{detail}; accuracy below 97.8%");
    ensure!(frac >= 0.02, "{detail}; fewer than 2% of slopes pruned");
    ensure!(drop_pp <= 0.3, "{detail}; drop above 0.3 pp");
    Ok(detail)
}

fn criterion_2() -> Outcome {
    let mut worst32 = (0.0, "");
    let mut worst64 = (0.0, "");
    for (i, &op) in OPS.iter().enumerate() {
        let a = check_op::<f32>(op, 100, Tolerance::for_f32(), 1000 + i as u64).map_err(|e| e.to_string())?;
        let b = check_op::<f64>(op, 100, Tolerance::for_f64(), 2000 + i as u64).map_err(|e| e.to_string())?;
        ensure!(a.cases == 100 && b.cases == 100, "{op}: fewer than 100 cases");
        ensure!(a.max_rel_err < 1e-3, "{op}: f32 relative error {:.3e}", a.max_rel_err);
        ensure!(b.max_rel_err < 1e-6, "{op}: f64 relative error {:.3e}", b.max_rel_err);
        if a.max_rel_err > worst32.0 {
            worst32 = (a.max_rel_err, op);
        }
        if b.max_rel_err > worst64.0 {
            worst64 = (b.max_rel_err, op);
        }
    }
    Ok(format!(
        "{} ops x 100 cases; worst f32 {:.2e} ({}), worst f64 {:.2e} ({})",
        OPS.len(),
        worst32.0,
        worst32.1,
        worst64.0,
        worst64.1
    ))
}

fn random_model(rng: &mut ChaCha8Rng, residual: bool) -> Model {
    let classes = rng.random_range(2..5);
    let spec = if residual {
        let stem = rng.random_range(2..5);
        let mut widths = vec![stem + rng.random_range(0..3)];
        if rng.random_bool(0.5) {
            widths.push(widths[0] + rng.random_range(0..4));
        }
        let shape = [rng.random_range(1..4), rng.random_range(4..8), rng.random_range(4..8)];
        build_residual("toy".into(), shape, stem, &widths, rng.random_range(1..3), classes, ActivationKind::Rrelu)
            .unwrap()
    } else {
        let hidden: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(2..9)).collect();
        build_fcnn(rng.random_range(3..10), &hidden, classes, ActivationKind::Rrelu)
    };
    let mut m = Model::new(spec).unwrap();
    randomize(&mut m, rng);
    m
}

/// Every tensor, running statistics included, drawn at random.
fn randomize(m: &mut Model, rng: &mut ChaCha8Rng) {
    for p in m.params_mut() {
        let vals: Vec<f32> = (0..p.value.numel())
            .map(|_| {
                let z: f32 = rng.sample(StandardNormal);
                match p.kind {
                    ParamKind::RunningVar => rng.random_range(0.5..2.0),
                    ParamKind::RunningMean => 0.3 * z,
                    ParamKind::Weight => 0.5 * z,
                    _ => z,
                }
            })
            .collect();
        p.value = Tensor::new(p.value.shape().to_vec(), vals).unwrap();
    }
}

fn criterion_3() -> Outcome {
    let (mut worst, mut residual, mut full_units, mut join_feeds) = (0f64, 0, 0, 0);
    for case in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let is_residual = case % 5 != 0;
        let m = random_model(&mut rng, is_residual);
        let removable = removable_layers(m.spec());
        let mut mask = PruneMask::empty(&m);
        let p = rng.random_range(0.1..0.7);
        for l in &mut mask.layers {
            if removable.contains(&l.layer) && rng.random_bool(0.3) {
                l.pruned.iter_mut().for_each(|x| *x = true);
                full_units += 1;
                continue;
            }
            l.pruned.iter_mut().for_each(|x| *x = rng.random_bool(p));
            if l.pruned.iter().all(|&x| x) && !removable.contains(&l.layer) {
                let keep = rng.random_range(0..l.pruned.len());
                l.pruned[keep] = false;
            }
            if l.layer.ends_with(".act2") && l.pruned.iter().any(|&x| x) {
                join_feeds += 1;
            }
        }
        residual += is_residual as usize;
        let zeroed = apply_mask_zero(&m, &mask).map_err(|e| e.to_string())?;
        let small = compact(&zeroed, &mask).map_err(|e| format!("case {case}: {e}"))?;
        let r = verify_equivalence(&zeroed, &small, 100, 1e-5, case).map_err(|e| e.to_string())?;
        ensure!(r.passed, "case {case}: max |diff| {:.3e}", r.max_abs_diff);
        worst = worst.max(r.max_abs_diff);
    }
    ensure!(full_units > 0 && join_feeds > 0, "coverage: {full_units} fully pruned units, {join_feeds} join feeds");
    Ok(format!(
        "50 pairs ({residual} residual), {full_units} fully pruned units, {join_feeds} masked join feeds, \
         worst max |diff| {worst:.2e}"
    ))
}

fn oracle_vs_formula(spec: &ModelSpec) -> Result<usize, String> {
    let formula = count_flops_paper(spec).map_err(|e| e.to_string())?;
    let oracle = count_flops_oracle(&Model::new(spec.clone()).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    for row in &formula.rows {
        let o = oracle.get(&row.layer).ok_or_else(|| format!("{}: oracle lacks {}", spec.name, row.layer))?;
        ensure!(o.mults == row.mults, "{} {}: oracle {} vs formula {}", spec.name, row.layer, o.mults, row.mults);
        if row.kind == CostKind::Join {
            ensure!(o.adds == row.adds, "{} {}: join adds differ", spec.name, row.layer);
        }
    }
    Ok(formula.rows.len())
}

fn criterion_4() -> Outcome {
    let specs = [
        build_fcnn(784, &[500], 10, ActivationKind::Rrelu),
        spec_from_name("resnet-20", &[3, 32, 32], 10, ActivationKind::Rrelu).map_err(|e| e.to_string())?,
        spec_from_name("wrn-16-4", &[3, 32, 32], 10, ActivationKind::Rrelu).map_err(|e| e.to_string())?,
    ];
    let mut rows = 0;
    for s in &specs {
        rows += oracle_vs_formula(s)?;
    }

    // FCNN with 24 hidden slopes below threshold
    let mut m = Model::new(specs[0].clone()).unwrap();
    init_type1(&mut m, 4);
    let mut slopes = m.slope_bank().layers[0].slopes.clone();
    slopes.iter_mut().take(24).for_each(|s| *s = 0.01);
    m.set_slopes("act1", slopes).unwrap();
    let mask = PruneMask::from_threshold(&m, 0.5);
    let pred = predict_savings(m.spec(), &mask).map_err(|e| e.to_string())?;
    let weights: i64 = pred.params.iter().filter(|p| p.0 != "act1").map(|p| p.1).sum();
    ensure!(weights == 19_056, "FCNN n=24 removes {weights} parameters, expected 19,056");
    ensure!(pred.flops_removed() == 2 * 19_056, "FCNN n=24 saves {} FLOPs", pred.flops_removed());

    // closed forms against measured counts after compaction
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut checked = 0;
    for (i, spec) in specs[..2].iter().enumerate() {
        let mut m = Model::new(spec.clone()).unwrap();
        init_type1(&mut m, i as u64);
        let mut mask = PruneMask::empty(&m);
        for l in &mut mask.layers {
            let n = l.pruned.len();
            for j in 0..n {
                l.pruned[j] = j != 0 && rng.random_bool(0.3);
            }
        }
        let small = compact(&apply_mask_zero(&m, &mask).unwrap(), &mask).map_err(|e| e.to_string())?;
        let pred = predict_savings(m.spec(), &mask).map_err(|e| e.to_string())?;
        let measured = count_params(m.spec()).total() as i64 - count_params(small.spec()).total() as i64;
        ensure!(
            measured == pred.params_removed(),
            "{}: {measured} parameters removed, closed form {}",
            spec.name,
            pred.params_removed()
        );
        let before = count_flops_oracle(&m).map_err(|e| e.to_string())?;
        let after = count_flops_oracle(&small).map_err(|e| e.to_string())?;
        let formula = count_flops_paper(m.spec()).unwrap();
        for (layer, saved) in &pred.flops {
            let Some(row) = formula.get(layer) else { continue };
            if row.kind == CostKind::Join {
                continue;
            }
            let b = before.get(layer).map_or(0, |r| r.mults);
            let a = after.get(layer).map_or(0, |r| r.mults);
            ensure!(2 * (b - a) as i64 == *saved, "{} {layer}: oracle saves {}, closed form {saved}", spec.name, 2 * (b - a));
            checked += 1;
        }
    }
    Ok(format!(
        "{rows} layer rows equal across FCNN, ResNet-20, WRN-16-4; FCNN n=24 removes 19,056; \
         {checked} pruned-layer FLOP savings match the oracle"
    ))
}

fn criterion_5() -> Outcome {
    let mut worst = 0f64;
    for case in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + case);
        let source = random_model(&mut rng, case % 2 == 0);
        let relu_spec = source.spec().with_activation(ActivationKind::Relu);
        let mut relu = Model::new(relu_spec.clone()).unwrap();
        for p in relu.params_mut() {
            p.value = source.get(&p.name).unwrap().clone();
        }
        let mut rr = Model::new(relu_spec.with_activation(ActivationKind::Rrelu)).unwrap();
        randomize(&mut rr, &mut rng);
        init_type2(&mut rr, &relu).map_err(|e| e.to_string())?;
        let shape = &relu.spec().input_shape;
        let n = 64;
        let x: Vec<f32> = (0..n * shape.iter().product::<usize>()).map(|_| rng.sample(StandardNormal)).collect();
        let mut full = vec![n];
        full.extend_from_slice(shape);
        let x = Tensor::new(full, x).unwrap();
        let a = relu.predict(&x).map_err(|e| e.to_string())?;
        let b = rr.predict(&x).map_err(|e| e.to_string())?;
        let diff = a.max_abs_diff(&b).map_err(|e| e.to_string())? as f64;
        ensure!(diff < 1e-6, "model {case}: logit diff {diff:.3e}");
        worst = worst.max(diff);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..relu.spec().num_classes)).collect();
        let ds = Dataset::new(x, labels, relu.spec().num_classes, "probe").unwrap();
        let (acc_a, acc_b) = (accuracy(&relu, &ds, 16).unwrap(), accuracy(&rr, &ds, 16).unwrap());
        ensure!(acc_a == acc_b, "model {case}: accuracy {acc_a} vs {acc_b}");
    }
    Ok(format!("20 models, worst logit diff {worst:.2e}, accuracies identical"))
}

fn criterion_6() -> Outcome {
    let s = sample_truncated_gmm(100_000, 6);
    let (lo, hi) = (gmm_low() as f32, gmm_high() as f32);
    let outside = s.iter().filter(|v| !(lo..=hi).contains(&v.abs())).count();
    ensure!(outside == 0, "{outside} samples outside [tan 35, tan 55]");
    let pos = s.iter().filter(|&&v| v > 0.0).count() as f64 / s.len() as f64;
    ensure!((0.48..=0.52).contains(&pos), "positive fraction {pos:.4}");
    Ok(format!("100000 samples in [{lo:.4}, {hi:.4}], positive fraction {pos:.4}"))
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut trials = 0;
    for b in 0..=12usize {
        for _ in 0..5 {
            let counts: Vec<i64> = (0..b).map(|_| rng.random_range(0..64)).collect();
            let mut brute: BTreeMap<u64, BigUint> = BTreeMap::new();
            for bits in 0u32..(1 << b) {
                let len: i64 = (0..b).filter(|i| bits >> i & 1 == 1).map(|i| counts[i]).sum();
                *brute.entry(len as u64).or_default() += 1u32;
            }
            let dp: BTreeMap<u64, BigUint> =
                filter_path_distribution(&counts).map_err(|e| e.to_string())?.support().into_iter().collect();
            ensure!(dp == brute, "B = {b}, counts {counts:?}: distributions differ");
            trials += 1;
        }
    }
    let toy = filter_path_distribution(&[3, 5]).map_err(|e| e.to_string())?;
    let support: Vec<(u64, BigUint)> = toy.support();
    let want: Vec<(u64, BigUint)> = [0u64, 3, 5, 8].iter().map(|&l| (l, BigUint::from(1u32))).collect();
    ensure!(support == want, "toy [3, 5] gives {support:?}");
    Ok(format!("{trials} random cases with B <= 12 equal enumeration; [3, 5] gives lengths {{0, 3, 5, 8}}"))
}

/// Settings of the small over-parameterized residual network run.
struct SparsityRun {
    units: usize,
    width: usize,
    /// The two MNIST digits, relabelled 0 and 1.
    digits: [usize; 2],
    train: usize,
    test: usize,
    cfg: TrainConfig,
}

fn sparsity_run() -> SparsityRun {
    SparsityRun {
        units: 3,
        width: 64,
        digits: [4, 9],
        train: 1000,
        test: 1000,
        cfg: TrainConfig {
            epochs: 15,
            batch_size: 64,
            optimizer: OptimizerConfig::sgd(0.1),
            schedule: Schedule::Cosine { lr_min: 0.0 },
            seed: 8,
            weight_decay: 5e-4,
            freeze_weights: false,
            augment: rrelu::data::Augment::None,
        },
    }
}

/// The first `n` samples of two digits, relabelled 0 and 1.
fn digit_pair(ds: &Dataset, digits: [usize; 2], n: usize) -> Result<Dataset, String> {
    let idx: Vec<usize> = (0..ds.len()).filter(|&i| digits.contains(&ds.labels[i])).take(n).collect();
    let labels = idx.iter().map(|&i| (ds.labels[i] == digits[1]) as usize).collect();
    let images = ds.subset(&idx, &ds.split).map_err(|e| e.to_string())?.images;
    Dataset::new(images, labels, 2, &ds.split).map_err(|e| e.to_string())
}

fn criterion_8() -> Outcome {
    let r = sparsity_run();
    let root = mnist_root().ok_or("MNIST files not found; set RRELU_DATA_DIR")?;
    let load = |train| load_mnist(&root, train).map_err(|e| e.to_string());
    let mut train_set = digit_pair(&load(true)?, r.digits, r.train)?;
    let mut test_set = digit_pair(&load(false)?, r.digits, r.test)?;
    let st = Standardizer::fit(&train_set).unwrap();
    st.apply(&mut train_set).unwrap();
    st.apply(&mut test_set).unwrap();
    let name = format!("rescnn-{}-{}", r.units, r.width);
    let spec = spec_from_name(&name, train_set.sample_shape(), 2, ActivationKind::Rrelu).map_err(|e| e.to_string())?;
    let mut m = Model::new(spec).unwrap();
    init_type1(&mut m, r.cfg.seed);
    train(&mut m, &train_set, None, &r.cfg).map_err(|e| e.to_string())?;

    let bank = m.slope_bank();
    let small_slopes = bank.iter_abs().filter(|&s| s < 0.1).count();
    let smallest = bank.iter_abs().fold(f32::INFINITY, f32::min);
    let frac = small_slopes as f64 / bank.total() as f64;
    let mask = PruneMask::from_threshold(&m, 0.1);
    let pruned = compact(&apply_mask_zero(&m, &mask).unwrap(), &mask).map_err(|e| e.to_string())?;
    let before = accuracy(&m, &test_set, 500).unwrap();
    let after = accuracy(&pruned, &test_set, 500).unwrap();
    let drop_pp = 100.0 * (before - after);
    let detail = format!(
        "{name} on MNIST {} vs {}, {} epochs: {small_slopes}/{} slopes below 0.1 ({:.1}%, smallest |b| {smallest:.3}), \
         accuracy {:.2}% -> {:.2}% ({drop_pp:.2} pp)",
        r.digits[0],
        r.digits[1],
        r.cfg.epochs,
        bank.total(),
        100.0 * frac,
        100.0 * before,
        100.0 * after
    );
    ensure!(frac >= 0.05, "{detail}; fewer than 5% of slopes below 0.1");
    ensure!(drop_pp <= 0.5, "{detail}; drop above 0.5 pp");
    Ok(detail)
}

fn criterion_9() -> Outcome {
    let run = mnist_pipeline().as_ref().map_err(|e| e.clone())?;
    let d = run.dir.path();
    let csv = fs::read_to_string(d.join("report.csv")).map_err(|e| e.to_string())?;
    ensure!(!csv.contains('\r'), "CSV has CR line endings");
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().ok_or("empty report")?.split(',').collect();
    let mut sums = vec![0u64; header.len() - 1];
    let mut total = None;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let vals: Vec<u64> = f[1..].iter().map(|v| v.parse().unwrap_or(0)).collect();
        if f[0] == "total" {
            total = Some(vals);
        } else {
            for (s, v) in sums.iter_mut().zip(&vals) {
                *s += v;
            }
            for pair in vals.chunks(2) {
                ensure!(pair[1] <= pair[0], "{}: a count grew after pruning", f[0]);
            }
        }
    }
    let total = total.ok_or("no total row")?;
    ensure!(total == sums, "total row {total:?} differs from column sums {sums:?}");
    let pruned = load_checkpoint(&d.join("pruned/checkpoint")).map_err(|e| e.to_string())?;
    ensure!(pruned.num_params() as u64 == total[1], "pruned checkpoint has {} parameters", pruned.num_params());
    let ignored = run
        .report_text
        .lines()
        .find(|l| l.starts_with("Filters ignored"))
        .ok_or("report lacks `Filters ignored`")?;
    let n: u64 = ignored
        .split_whitespace()
        .nth(2)
        .and_then(|f| f.split('/').next())
        .and_then(|v| v.parse().ok())
        .ok_or("unreadable `Filters ignored` line")?;
    ensure!(n > 0, "no filters ignored");
    Ok(format!("{} exited 0; totals consistent; {}", run.stages.join(", "), ignored.trim()))
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("RRELU_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [Criterion; 9] = [
        (1, "MNIST FCNN reproduction", criterion_1),
        (2, "gradient suite", criterion_2),
        (3, "pruning equivalence", criterion_3),
        (4, "FLOP accounting", criterion_4),
        (5, "Type-II neutrality", criterion_5),
        (6, "truncated mixture init", criterion_6),
        (7, "filter-path distribution", criterion_7),
        (8, "implicit sparsification", criterion_8),
        (9, "end-to-end CLI pipeline", criterion_9),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut out = std::io::stdout();
    for (id, title, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        let line = match &outcome {
            Ok(d) => format!("criterion {id} PASS [{title}] ({secs:.1}s): {d}"),
            Err(d) => {
                failed += 1;
                format!("criterion {id} FAIL [{title}] ({secs:.1}s): {d}")
            }
        };
        let _ = writeln!(out, "{line}");
        let _ = out.flush();
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
