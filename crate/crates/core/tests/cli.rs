use std::path::Path;
use std::process::{Command, Output};

use pvscreen::cli::{predict_header, RunConfig, EXIT_PARTIAL};
use pvscreen::dataset::{write_synthetic, SplitManifest, SyntheticConfig};
use pvscreen::severity::{fit_forest, ForestConfig};
use pvscreen::vit::{ViTConfig, ViTModel};
use pvscreen::{DefectClass, Rng};

const TINY: &str = r#"
[training]
epochs = 3
batch_size = 8
[vit]
image_size = 16
patch_size = 8
hidden_dim = 16
num_layers = 1
num_heads = 2
mlp_dim = 32
[augmentation]
output_size = 16
[forest]
n_trees = 5
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pvscreen"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn setup(dir: &Path) -> (String, String) {
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let data = dir.join("data");
    write_synthetic(
        &data,
        &SyntheticConfig {
            per_class: 3,
            size: 24,
            seed: 1,
        },
    )
    .unwrap();
    (s(&cfg).to_string(), s(&data).to_string())
}

#[test]
fn missing_class_directory_is_a_manifest_error() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    std::fs::remove_dir_all(dir.path().join("data").join("snow_cover")).unwrap();
    let out = run(&[
        "train-classifier",
        "--config",
        &cfg,
        "--dataset",
        &data,
        "--out",
        s(&dir.path().join("m.pvs")),
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("snow_cover"));
    assert!(!dir.path().join("m.pvs").exists());
}

#[test]
fn missing_dataset_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train-classifier",
        "--dataset",
        s(&dir.path().join("nope")),
        "--out",
        s(&dir.path().join("m")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(run(&["train-classifier"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[vit]\nimage_size = 32\n").unwrap();
    assert_eq!(run(&["print-config", "--config", s(&bad)]).status.code(), Some(2));
}

#[test]
fn print_config_round_trips() {
    let out = run(&["print-config", "--seed", "9"]);
    assert!(out.status.success());
    let cfg = RunConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg.training.seed, 9);
    assert_eq!(cfg.forest.seed, 9);
    assert_eq!(cfg.optimizer.learning_rate, 3e-5);
}

#[test]
fn classifier_training_is_logged_deterministic_and_split() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let (a, b) = (dir.path().join("a.pvs"), dir.path().join("b.pvs"));
    let first = run(&["train-classifier", "--config", &cfg, "--dataset", &data, "--out", s(&a)]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let log = String::from_utf8(first.stdout).unwrap();
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch ")).count(), 3);
    assert!(
        run(&["train-classifier", "--config", &cfg, "--dataset", &data, "--out", s(&b)])
            .status
            .success()
    );
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let split = SplitManifest::read(&dir.path().join("a.pvs.split")).unwrap();
    assert_eq!(split.entries.len(), 27);
    let test = split.ids(pvscreen::dataset::Partition::Test);
    assert!(!test.is_empty());
    assert!(test
        .iter()
        .all(|id| !split.ids(pvscreen::dataset::Partition::Train).contains(id)));
}

#[test]
fn severity_training_skips_missing_images_and_evaluate_uses_test_only() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let model = dir.path().join("m.pvs");
    let forest = dir.path().join("f.pvs");
    assert!(run(&[
        "train-classifier",
        "--config",
        &cfg,
        "--dataset",
        &data,
        "--out",
        s(&model)
    ])
    .status
    .success());
    let split = SplitManifest::read(&dir.path().join("m.pvs.split")).unwrap();
    let victim = split.ids(pvscreen::dataset::Partition::Train)[0].to_string();
    std::fs::remove_file(dir.path().join("data").join(&victim)).unwrap();

    let out = run(&[
        "train-severity",
        "--config",
        &cfg,
        "--dataset",
        &data,
        "--model",
        s(&model),
        "--out",
        s(&forest),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&victim));
    assert!(String::from_utf8_lossy(&out.stdout).contains("training MSE"));

    let prefix = dir.path().join("report");
    let out = run(&[
        "evaluate",
        "--config",
        &cfg,
        "--model",
        s(&model),
        "--forest",
        s(&forest),
        "--dataset",
        &data,
        "--out",
        s(&prefix),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(
        report["n_samples"].as_u64().unwrap() as usize,
        split.ids(pvscreen::dataset::Partition::Test).len()
    );
}

#[test]
fn severity_training_without_labels_is_a_manifest_error() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    std::fs::remove_file(dir.path().join("data").join("severity.csv")).unwrap();
    let model = dir.path().join("m.pvs");
    ViTModel::init(&RunConfig::from_toml(TINY).unwrap().vit, &mut Rng::new(0))
        .unwrap()
        .export(&model)
        .unwrap();
    let out = run(&[
        "train-severity",
        "--config",
        &cfg,
        "--dataset",
        &data,
        "--model",
        s(&model),
        "--out",
        s(&dir.path().join("f")),
    ]);
    assert_eq!(out.status.code(), Some(4));
}

fn small_models(dir: &Path) -> (String, String) {
    let vit = ViTConfig {
        image_size: 16,
        patch_size: 8,
        hidden_dim: 16,
        num_layers: 1,
        num_heads: 2,
        mlp_dim: 32,
        ..ViTConfig::toy()
    };
    let model = dir.join("m.pvs");
    ViTModel::init(&vit, &mut Rng::new(0)).unwrap().export(&model).unwrap();
    let x: Vec<[f64; 7]> = (0..10).map(|i| [i as f64 / 10.0; 7]).collect();
    let y: Vec<f64> = (0..10).map(|i| (i % 3) as f64).collect();
    let forest = dir.join("f.pvs");
    fit_forest(
        &x,
        &y,
        &ForestConfig {
            n_trees: 3,
            ..ForestConfig::default()
        },
    )
    .unwrap()
    .save(&forest)
    .unwrap();
    (s(&model).to_string(), s(&forest).to_string())
}

#[test]
fn predict_sorts_by_name_and_flags_corrupt_images() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = setup(dir.path());
    let (model, forest) = small_models(dir.path());
    let input = dir.path().join("input");
    std::fs::create_dir(&input).unwrap();
    for (name, class) in [("c.png", DefectClass::Dust), ("a.png", DefectClass::Clean)] {
        pvscreen::dataset::render_panel(class, 0.3, 24, &mut Rng::new(2))
            .save_png(&input.join(name))
            .unwrap();
    }
    std::fs::write(input.join("b.png"), b"definitely not a png").unwrap();
    let csv_path = dir.path().join("out.csv");
    let out = run(&[
        "predict",
        "--config",
        &cfg,
        "--model",
        &model,
        "--forest",
        &forest,
        "--out",
        s(&csv_path),
        s(&input),
    ]);
    assert_eq!(out.status.code(), Some(EXIT_PARTIAL));

    let mut reader = csv::Reader::from_path(&csv_path).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, predict_header());
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    let ids: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(ids, ["a.png", "b.png", "c.png"]);
    assert_eq!(&rows[1][1], "error");
    assert!(!rows[1][header.len() - 1].is_empty());
    for r in [&rows[0], &rows[2]] {
        assert_eq!(&r[1], "ok");
        let probs: f64 = (3..12).map(|i| r[i].parse::<f64>().unwrap()).sum();
        assert!((probs - 1.0).abs() < 1e-6);
        assert!(r[header.len() - 1].is_empty());
    }
}

#[test]
fn predict_single_image_gives_one_full_record() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let (model, forest) = small_models(dir.path());
    let out = run(&[
        "predict",
        "--config",
        &cfg,
        "--model",
        &model,
        "--forest",
        &forest,
        &format!("{data}/dust/000.png"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let fields: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(fields.len(), predict_header().len());
    assert!(fields[..fields.len() - 1].iter().all(|f| !f.is_empty()));
}

#[test]
fn extract_features_writes_one_row_per_image() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let (model, _) = small_models(dir.path());
    let csv_path = dir.path().join("features.csv");
    let out = run(&[
        "extract-features",
        "--config",
        &cfg,
        "--dataset",
        &data,
        "--model",
        &model,
        "--out",
        s(&csv_path),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(text.lines().count(), 28);
    assert!(text.starts_with("image_id,class_code,normalized_area"));
}
