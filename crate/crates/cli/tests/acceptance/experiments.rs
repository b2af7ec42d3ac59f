//! Direction-of-effect experiments and the determinism check. Each run goes
//! through the same config and command path as the `dfg` binary; artifacts
//! stay under the cargo target tmpdir for inspection.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use dfg_cli::commands::thread_cap;
use dfg_cli::{cmd_pretrain, cmd_train, RunConfig};
use dfg_core::data::ImbalanceSpec;
use dfg_core::eval::{aggregate, RunReport};

use crate::Check;

const SYNTH_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const FASHION_SEEDS: [u64; 3] = [0, 1, 2];
const MAJORITY_CLASSES: usize = 2;

fn runs_dir(name: &str) -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name)
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn toml_path(p: &Path) -> String {
    format!("{:?}", p.display().to_string())
}

fn workers() -> usize {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    thread_cap().map_or(cores, |cap| cap.min(cores))
}

/// Runs every config on a small worker pool; results keep input order.
fn run_all(configs: Vec<RunConfig>) -> Result<Vec<RunReport>, Box<dyn std::error::Error + Send + Sync>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<dfg_cli::Result<RunReport>>>> =
        Mutex::new((0..configs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers().min(configs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cfg) = configs.get(i) else { break };
                let r = cmd_train(cfg, false, true);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    let mut reports = Vec::new();
    for (cfg, r) in configs.iter().zip(results.into_inner().unwrap()) {
        let r = r.expect("every job ran");
        reports.push(r.map_err(|e| format!("{}: {e}", cfg.output_dir.display()))?);
    }
    Ok(reports)
}

struct Arms {
    original: Vec<RunReport>,
    dfg: Vec<RunReport>,
    minority: Vec<Vec<usize>>,
}

impl Arms {
    fn summary(&self) -> Result<Summary, Box<dyn std::error::Error + Send + Sync>> {
        let minority = |reports: &[RunReport]| -> Vec<f64> {
            reports.iter().zip(&self.minority).map(|(r, m)| r.mean_recall(m)).collect()
        };
        let acc = |reports: &[RunReport]| -> Vec<f64> { reports.iter().map(|r| r.overall_accuracy).collect() };
        Ok(Summary {
            orig_acc: aggregate(&acc(&self.original))?.mean * 100.0,
            dfg_acc: aggregate(&acc(&self.dfg))?.mean * 100.0,
            orig_minority: aggregate(&minority(&self.original))?.mean * 100.0,
            dfg_minority: aggregate(&minority(&self.dfg))?.mean * 100.0,
        })
    }
}

/// Means in percentage points.
struct Summary {
    orig_acc: f64,
    dfg_acc: f64,
    orig_minority: f64,
    dfg_minority: f64,
}

/// Runs `dfg pretrain` once and both arms for every seed.
fn compare(
    name: &str,
    seeds: &[u64],
    config_for: impl Fn(u64, &str, &Path, &Path) -> String,
    minority_for: impl Fn(u64) -> Vec<usize>,
) -> Result<Arms, Box<dyn std::error::Error + Send + Sync>> {
    let root = runs_dir(name);
    let source_dir = root.join("source");
    let ckpt = source_dir.join("source.ckpt");
    let base = workspace_root();
    let pretrain = RunConfig::parse(&config_for(seeds[0], "dfg", &source_dir, &ckpt), &base)?;
    let src = cmd_pretrain(&pretrain, true)?;
    eprintln!("  {name}: source accuracy {:.4}", src.overall_accuracy);

    let mut configs = Vec::new();
    for mode in ["original", "dfg"] {
        for &seed in seeds {
            let out = root.join(format!("{mode}-seed{seed}"));
            configs.push(RunConfig::parse(&config_for(seed, mode, &out, &ckpt), &base)?);
        }
    }
    let mut reports = run_all(configs)?;
    let dfg = reports.split_off(seeds.len());
    for (mode, rs) in [("original", &reports), ("dfg", &dfg)] {
        for r in rs {
            eprintln!("  {name} {mode} seed {}: accuracy {:.4}", r.seed, r.overall_accuracy);
        }
    }
    Ok(Arms {
        original: reports,
        dfg,
        minority: seeds.iter().map(|&s| minority_for(s)).collect(),
    })
}

fn majority(seed: u64) -> Vec<usize> {
    ImbalanceSpec::random_majority(10, MAJORITY_CLASSES, seed)
}

fn minority(seed: u64) -> Vec<usize> {
    let maj = majority(seed);
    (0..10).filter(|c| !maj.contains(c)).collect()
}

/// Synthetic blobs, 500 per majority class and 50 per minority class; the
/// source is a rotated, shrunk version of the same generator.
fn synthetic_config(seed: u64, mode: &str, out: &Path, source_ckpt: &Path) -> String {
    format!(
        r#"output_dir = {out}

[data.train.synthetic]
per_class = 500
seed = {seed}

[data.train.imbalance]
majority = {majority:?}
ratio = 10.0
majority_count = 500
seed = {seed}

[data.test.synthetic]
per_class = 200
seed = {test_seed}

[source]
checkpoint = {ckpt}

[source.data.synthetic]
per_class = 300
seed = 77
angle_offset = 0.5
radius = 0.2

[source.pretrain]
epochs = 3
batch_size = 32
lr = 1e-3
seed = 5

[train]
mode = "{mode}"
iterations = 2000
batch_size = 8
seed = {seed}
n_w = 1000
lr_extractor = 1e-3
lr_classifier = 1e-3
lr_generator = 5e-4
lr_critic = 5e-4

[export]
checkpoint_every = 0
"#,
        out = toml_path(out),
        ckpt = toml_path(source_ckpt),
        majority = majority(seed),
        test_seed = 1000 + seed,
    )
}

pub fn synthetic() -> Check {
    let arms = compare("synthetic", &SYNTH_SEEDS, synthetic_config, minority)?;
    let s = arms.summary()?;
    let gain = s.dfg_minority - s.orig_minority;
    let drop = s.orig_acc - s.dfg_acc;
    let detail = format!(
        "minority recall {:.2} -> {:.2} ({gain:+.2} points, need >= +2), accuracy {:.2} -> {:.2} ({:+.2}, need >= -0.5)",
        s.orig_minority, s.dfg_minority, s.orig_acc, s.dfg_acc, -drop
    );
    if gain >= 2.0 && drop <= 0.5 {
        Ok(detail)
    } else {
        Err(detail.into())
    }
}

fn fashion_data() -> Option<(PathBuf, PathBuf)> {
    let data = workspace_root().join("data");
    let (fashion, mnist) = (data.join("fashion-mnist"), data.join("mnist"));
    let present = ["train-images.idx", "train-labels.idx", "test-images.idx", "test-labels.idx"]
        .iter()
        .all(|f| fashion.join(f).is_file() && mnist.join(f).is_file());
    present.then_some((fashion, mnist))
}

/// 10% of Fashion-MNIST at 40:1 (600 and 15 images per class), padded to
/// 32x32; the source is trained on MNIST digits.
fn fashion_config(fashion: &Path, mnist: &Path, seed: u64, mode: &str, out: &Path, source_ckpt: &Path) -> String {
    let file = |dir: &Path, f: &str| toml_path(&dir.join(f));
    format!(
        r#"output_dir = {out}

[data.train]
images = {train_images}
labels = {train_labels}
preprocess = [{{ op = "pad", height = 32, width = 32 }}, {{ op = "normalize" }}]

[data.train.imbalance]
majority = {majority:?}
ratio = 40.0
majority_count = 600
seed = {seed}

[data.test]
images = {test_images}
labels = {test_labels}
preprocess = [{{ op = "pad", height = 32, width = 32 }}, {{ op = "normalize" }}]

[source]
checkpoint = {ckpt}

[source.data]
images = {src_images}
labels = {src_labels}
preprocess = [{{ op = "pad", height = 32, width = 32 }}, {{ op = "normalize" }}]

[source.pretrain]
epochs = 3
batch_size = 32
lr = 1e-3
seed = 5

[train]
mode = "{mode}"
iterations = 6000
batch_size = 8
seed = {seed}
n_w = 1000
lr_extractor = 1e-3
lr_classifier = 1e-3
lr_generator = 5e-4
lr_critic = 5e-4

[export]
checkpoint_every = 0
"#,
        out = toml_path(out),
        ckpt = toml_path(source_ckpt),
        majority = majority(seed),
        train_images = file(fashion, "train-images.idx"),
        train_labels = file(fashion, "train-labels.idx"),
        test_images = file(fashion, "test-images.idx"),
        test_labels = file(fashion, "test-labels.idx"),
        src_images = file(mnist, "train-images.idx"),
        src_labels = file(mnist, "train-labels.idx"),
    )
}

pub fn fashion() -> Check {
    let Some((fashion, mnist)) = fashion_data() else {
        return Err("Fashion-MNIST/MNIST IDX files not found under data/; run `python3 scripts/fetch_datasets.py`".into());
    };
    let config = |seed: u64, mode: &str, out: &Path, ckpt: &Path| fashion_config(&fashion, &mnist, seed, mode, out, ckpt);
    let arms = compare("fashion", &FASHION_SEEDS, config, minority)?;
    let s = arms.summary()?;
    let gain = s.dfg_acc - s.orig_acc;
    let detail = format!(
        "accuracy {:.2} -> {:.2} ({gain:+.2} points, need >= +1), minority recall {:.2} -> {:.2}",
        s.orig_acc, s.dfg_acc, s.orig_minority, s.dfg_minority
    );
    if gain >= 1.0 {
        Ok(detail)
    } else {
        Err(detail.into())
    }
}

fn dfg_binary(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dfg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| format!("cannot start dfg: {e}"))?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "dfg {} exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

/// The seed-0 DFG run of the synthetic experiment, twice through the binary.
pub fn determinism() -> Check {
    let root = runs_dir("determinism");
    std::fs::create_dir_all(&root)?;
    let ckpt = root.join("source").join("source.ckpt");
    let config = root.join("run.toml");
    std::fs::write(&config, synthetic_config(0, "dfg", &root.join("unused"), &ckpt))?;
    let config = config.display().to_string();
    let source = root.join("source").display().to_string();
    dfg_binary(&["pretrain", "--config", &config, "--out", &source, "--deterministic"])?;

    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = root.join(run);
        let _ = std::fs::remove_dir_all(&out);
        dfg_binary(&["train", "--config", &config, "--out", &out.display().to_string(), "--deterministic"])?;
        outputs.push(out);
    }
    let mut compared = Vec::new();
    for file in ["training_log.csv", "report.csv"] {
        let a = std::fs::read(outputs[0].join(file))?;
        let b = std::fs::read(outputs[1].join(file))?;
        if a != b {
            return Err(format!("{file} differs between the two runs").into());
        }
        compared.push(format!("{file} ({} bytes)", a.len()));
    }
    Ok(format!("byte-identical {}", compared.join(" and ")))
}
