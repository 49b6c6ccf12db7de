use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sctfusion_core::{apply_affine, load_volume, AffineParams, DatasetManifest};

const CONFIG: &str = r#"
schema_version = 1
output_root = "out"

[dataset]
n_samples = 4
tiers = [32, 256]

[dataset.phantom]
dims = [16, 16, 16]

[splits]
n_splits = 1
train = 0.5
val = 0.25
test = 0.25

[misalignment]
alphas = [1.0, 0.0]

[train]
epochs = 1

[report]
slices = true
"#;

fn setup(text: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, text).unwrap();
    (dir, cfg)
}

fn sctfusion(cfg: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sctfusion"))
        .arg("--config")
        .arg(cfg)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn phantom_writes_every_tier_and_is_reproducible() {
    let (dir, cfg) = setup(CONFIG);
    ok(&sctfusion(&cfg, &["phantom"]));
    let data = dir.path().join("out/data");
    let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(data.join("dataset.json")).unwrap()).unwrap();
    assert_eq!(manifest.ids.len(), 4);
    assert_eq!(manifest.tiers, [32, 256]);
    assert_eq!(manifest.samples.len(), 4 * 2);
    assert!(data.join("phantom_000/ct.nii.gz").is_file());
    assert!(data.join("phantom_003/cbct_256.nii.gz").is_file());
    assert!(manifest.generator.is_some());
    let before = std::fs::read(data.join("phantom_002/cbct_32.nii.gz")).unwrap();
    ok(&sctfusion(&cfg, &["phantom"]));
    assert_eq!(before, std::fs::read(data.join("phantom_002/cbct_32.nii.gz")).unwrap());
}

#[test]
fn config_errors_exit_with_2() {
    let (_d, cfg) = setup("schema_version = 1\nunknown_key = true\n");
    assert_eq!(sctfusion(&cfg, &["phantom"]).status.code(), Some(2));
    let (_d, cfg) = setup("schema_version = 7\n");
    assert_eq!(sctfusion(&cfg, &["phantom"]).status.code(), Some(2));
    let (_d, cfg) = setup(CONFIG);
    assert_eq!(sctfusion(&cfg, &["--set", "train.epochs=0", "phantom"]).status.code(), Some(2));
    assert_eq!(sctfusion(&cfg, &["--set", "train.epochs", "phantom"]).status.code(), Some(2));
    assert_eq!(sctfusion(&cfg, &["train", "--cells", "no_such_cell"]).status.code(), Some(2));
    assert_eq!(sctfusion(Path::new("/nonexistent.toml"), &["phantom"]).status.code(), Some(2));
    assert_eq!(sctfusion(&cfg, &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn misalign_writes_replayable_volumes() {
    let (dir, cfg) = setup(CONFIG);
    ok(&sctfusion(&cfg, &["phantom"]));
    ok(&sctfusion(&cfg, &["misalign"]));
    let root = dir.path().join("out/misaligned");
    let data = dir.path().join("out/data");
    let params: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(root.join("misalign_params.json")).unwrap()).unwrap();
    for id in ["phantom_000", "phantom_001", "phantom_002", "phantom_003"] {
        let files: Vec<_> = std::fs::read_dir(root.join(id)).unwrap().collect();
        assert_eq!(files.len(), 2);
        let ct = load_volume(data.join(id).join("ct.nii.gz")).unwrap();
        let aligned = load_volume(root.join(id).join("ct_unaligned_0.nii.gz")).unwrap();
        assert!(ct.data().iter().zip(aligned.data()).all(|(a, b)| (a - b).abs() <= 1e-6));

        let p: AffineParams = serde_json::from_value(params["samples"][id]["1"].clone()).unwrap();
        let replay = apply_affine(&ct, &p).unwrap();
        let stored = load_volume(root.join(id).join("ct_unaligned_1.nii.gz")).unwrap();
        assert_eq!(replay.data(), stored.data());
        assert_ne!(stored.data(), ct.data());
    }
}

#[test]
fn train_eval_report_and_resume() {
    let (dir, cfg) = setup(CONFIG);
    let run = dir.path().join("out/run");

    // eval before anything is trained is a runtime error
    assert_eq!(sctfusion(&cfg, &["eval"]).status.code(), Some(3));

    let out = ok(&sctfusion(&cfg, &["train", "--cells", "multimodal_a1_q32_s0"]));
    assert!(out.contains("trained 1 cell"));
    let cell = run.join("cells/multimodal_a1_q32_s0");
    for f in ["checkpoint_best", "checkpoint_final", "history.csv", "metrics.csv", "misalign_params.json"] {
        assert!(cell.join(f).is_file(), "{f}");
    }
    let trained: Vec<_> = std::fs::read_dir(run.join("cells")).unwrap().collect();
    assert_eq!(trained.len(), 1);

    let plan = ok(&sctfusion(&cfg, &["sweep", "--dry-run"]));
    assert!(plan.contains("multimodal_a1_q32_s0\tdone"));
    assert!(plan.contains("unimodal_q256_s0\tpending"));
    assert_eq!(plan.lines().count(), 2 * (1 + 2 + 2));

    let out = ok(&sctfusion(&cfg, &["sweep"]));
    assert!(out.contains("skipped 1"), "{out}");
    let metrics = std::fs::read(run.join("metrics.csv")).unwrap();

    ok(&sctfusion(&cfg, &["eval"]));
    assert_eq!(metrics, std::fs::read(run.join("metrics.csv")).unwrap());

    let files = ok(&sctfusion(&cfg, &["report"]));
    for f in ["report.md", "aggregates.csv", "plot_mae.svg", "plot_one_minus_ssim.svg", "plot_perceptual.svg"] {
        assert!(files.contains(f), "{f}");
        assert!(std::fs::metadata(dir.path().join("out/report").join(f)).unwrap().len() > 0);
    }
    assert!(files.contains("_sct_multimodal_a1_q32_s0.png"));
    let md = std::fs::read_to_string(dir.path().join("out/report/report.md")).unwrap();
    assert_eq!(md.lines().filter(|l| l.starts_with("| 32 ") || l.starts_with("| 256 ")).count(), 2 * (2 + 1));

    // a changed configuration cannot reuse the run directory
    assert_eq!(sctfusion(&cfg, &["--set", "seeds.init=5", "train"]).status.code(), Some(2));
}

#[test]
fn parallel_workers_match_serial_run() {
    let (serial, cfg_a) = setup(CONFIG);
    let (parallel, cfg_b) = setup(CONFIG);
    ok(&sctfusion(&cfg_a, &["--set", "report.plots=false", "sweep"]));
    ok(&sctfusion(&cfg_b, &["--set", "report.plots=false", "sweep", "--parallel-cells", "3"]));
    assert_eq!(
        std::fs::read(serial.path().join("out/run/metrics.csv")).unwrap(),
        std::fs::read(parallel.path().join("out/run/metrics.csv")).unwrap()
    );
}
