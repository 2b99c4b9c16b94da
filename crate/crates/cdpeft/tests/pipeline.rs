//! Cross-module flows: training behavior, checkpoint round trips, run
//! determinism, and the command-line surface.

use cdpeft::data::{self, Split, SynthSpec};
use cdpeft::model::build_model;
use cdpeft::peft::PeftConfig;
use cdpeft::train::{evaluate, train, TrainConfig};
use cdpeft::vit::ViTConfig;
use std::path::PathBuf;

fn tmpdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("cdpeft-pipe-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn small_vit() -> ViTConfig {
    ViTConfig { image_size: 32, patch_size: 8, depth: 1, dim: 16, heads: 2, mlp_ratio: 2 }
}

fn small_cfg(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs,
        lr,
        weight_decay: 0.05,
        crop_size: 32,
        val_split: 0.25,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn small_sets(count: usize) -> (Vec<data::ChangeSample>, Vec<data::ChangeSample>) {
    let spec = SynthSpec { image_size: 32, count, ..SynthSpec::default() };
    let all: Vec<data::ChangeSample> = (0..count).map(|i| data::synth_sample(&spec, i)).collect();
    let (train_idx, val_idx) = data::split_indices(count, 0.25, 5).unwrap();
    (
        train_idx.iter().map(|&i| all[i].clone()).collect(),
        val_idx.iter().map(|&i| all[i].clone()).collect(),
    )
}

#[test]
fn zero_lr_freezes_validation_metrics() {
    let (train_set, val_set) = small_sets(12);
    let mut model = build_model(&small_vit(), &PeftConfig::default(), 2, 5).unwrap();
    let cfg = small_cfg(3, 0.0);
    let out = train(&mut model, &train_set, &val_set, &cfg, None).unwrap();
    let first = &out.records[0];
    for rec in &out.records {
        assert_eq!(rec.val_f1, first.val_f1);
        assert_eq!(rec.val_iou, first.val_iou);
        assert_eq!(rec.val_oa, first.val_oa);
    }
}

#[test]
fn loss_decreases_over_first_five_epochs() {
    let (train_set, val_set) = small_sets(16);
    let mut model = build_model(&small_vit(), &PeftConfig::default(), 2, 5).unwrap();
    let cfg = small_cfg(5, 2e-3);
    let out = train(&mut model, &train_set, &val_set, &cfg, None).unwrap();
    assert!(
        out.records[4].train_loss < out.records[0].train_loss,
        "epoch5 mean {} !< epoch1 mean {}",
        out.records[4].train_loss,
        out.records[0].train_loss
    );
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let dir = tmpdir("det");
        let (train_set, val_set) = small_sets(10);
        let mut model = build_model(&small_vit(), &PeftConfig::default(), 2, 5).unwrap();
        let cfg = small_cfg(2, 1e-3);
        let ckpt = dir.join("best.ckpt");
        let out = train(&mut model, &train_set, &val_set, &cfg, Some(&ckpt)).unwrap();
        let log = serde_json::to_string(&out.records).unwrap();
        (log, std::fs::read(&ckpt).unwrap())
    };
    let (log1, ckpt1) = run();
    let (log2, ckpt2) = run();
    assert_eq!(log1, log2);
    assert_eq!(ckpt1, ckpt2);
}

#[test]
fn checkpoint_round_trip_reproduces_metrics() {
    let dir = tmpdir("rt");
    let (train_set, val_set) = small_sets(10);
    let mut model = build_model(&small_vit(), &PeftConfig::default(), 2, 5).unwrap();
    let cfg = small_cfg(2, 1e-3);
    let ckpt = dir.join("best.ckpt");
    train(&mut model, &train_set, &val_set, &cfg, Some(&ckpt)).unwrap();

    let val_refs: Vec<&data::ChangeSample> = val_set.iter().collect();
    // rebuild: frozen backbone from the same seed + trainable checkpoint
    let mut rebuilt = build_model(&small_vit(), &PeftConfig::default(), 2, 5).unwrap();
    rebuilt.load_checkpoint(&ckpt).unwrap();
    let a = evaluate(&model, &val_refs).unwrap();
    let b = evaluate(&rebuilt, &val_refs).unwrap();
    assert_eq!(a, b, "rebuilt model evaluates differently");
}

fn run_cli(args: &[&str]) -> i32 {
    let argv: Vec<String> = std::iter::once("cdpeft".to_string())
        .chain(args.iter().map(|s| s.to_string()))
        .collect();
    cdpeft::cli::run(&argv)
}

#[test]
fn cli_full_flow_synth_train_eval() {
    let ds = tmpdir("cli-ds");
    let run = tmpdir("cli-run");
    let evo = tmpdir("cli-eval");
    assert_eq!(
        run_cli(&["synth", "--out", ds.to_str().unwrap(), "--synth.count", "12", "--synth.image_size", "32"]),
        0
    );
    assert!(ds.join("manifest.json").exists());
    assert!(ds.join("A").join("00000.ppm").exists());

    let common = [
        "--vit.image_size", "32", "--vit.patch_size", "8", "--vit.depth", "1",
        "--vit.dim", "16", "--vit.heads", "2", "--vit.mlp_ratio", "2",
        "--train.crop_size", "32", "--train.val_split", "0.25", "--seed", "5",
    ];
    let mut args = vec![
        "train", "--out", run.to_str().unwrap(), "--data.root", ds.to_str().unwrap(),
        "--train.epochs", "2", "--train.batch_size", "4", "--train.lr", "0.001",
    ];
    args.extend_from_slice(&common);
    assert_eq!(run_cli(&args), 0);
    for f in ["config.json", "log.ndjson", "best.ckpt", "metrics.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    // the recorded config replays: the run dir config names the same model
    let cfg_text = std::fs::read_to_string(run.join("config.json")).unwrap();
    let cfg: serde_json::Value = serde_json::from_str(&cfg_text).unwrap();
    assert_eq!(cfg["vit"]["dim"], 16);
    assert_eq!(cfg["train"]["epochs"], 2);

    // metrics.json equals the best epoch in the log exactly
    let log = std::fs::read_to_string(run.join("log.ndjson")).unwrap();
    let records: Vec<serde_json::Value> =
        log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 2);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    let best = records
        .iter()
        .max_by(|a, b| {
            a["val_f1"].as_f64().unwrap().partial_cmp(&b["val_f1"].as_f64().unwrap()).unwrap()
        })
        .unwrap();
    assert_eq!(metrics["f1"].as_f64().unwrap(), best["val_f1"].as_f64().unwrap());

    // eval on the saved checkpoint over the val split reproduces metrics.json
    let ckpt = run.join("best.ckpt");
    let mut args = vec![
        "eval", "--data.root", ds.to_str().unwrap(), "--data.split", "val",
        "--ckpt", ckpt.to_str().unwrap(), "--out", evo.to_str().unwrap(),
    ];
    args.extend_from_slice(&common);
    assert_eq!(run_cli(&args), 0);
    let eval_metrics = std::fs::read_to_string(evo.join("metrics.json")).unwrap();
    let train_metrics = std::fs::read_to_string(run.join("metrics.json")).unwrap();
    assert_eq!(eval_metrics, train_metrics);
}

#[test]
fn cli_params_reports_partition() {
    // counts come out through the JSON contract; checked here on a tiny model
    let dir = tmpdir("params");
    let cfg = serde_json::json!({
        "vit": {"image_size": 32, "patch_size": 8, "depth": 1, "dim": 16, "heads": 2, "mlp_ratio": 2},
    });
    let path = dir.join("cfg.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    assert_eq!(run_cli(&["params", "--config", path.to_str().unwrap(), "--method", "adapter", "--r", "6"]), 0);
}

#[test]
fn cli_rejects_unknown_subcommand_and_bad_values() {
    assert_eq!(run_cli(&["trian"]), 2);
    assert_eq!(run_cli(&["params", "--peft.method", "nonsense"]), 2);
    assert_eq!(run_cli(&["train", "--out", "/tmp/x"]), 2); // data.root missing
}

#[test]
fn cli_gradcheck_micro_config_passes() {
    let code = run_cli(&[
        "gradcheck", "--vit.image_size", "8", "--vit.patch_size", "4", "--vit.depth", "1",
        "--vit.dim", "8", "--vit.heads", "2", "--vit.mlp_ratio", "2",
    ]);
    assert_eq!(code, 0);
}

#[test]
fn nan_loss_aborts_with_diagnostic() {
    let (train_set, val_set) = small_sets(8);
    let mut model = build_model(&small_vit(), &PeftConfig::default(), 2, 5).unwrap();
    // poison one trainable parameter
    model.param_mut("fusion.z_m").unwrap().data[0] = f64::NAN;
    let cfg = small_cfg(1, 1e-3);
    let err = train(&mut model, &train_set, &val_set, &cfg, None).unwrap_err().to_string();
    assert!(err.contains("non-finite"), "{err}");
}

#[test]
fn dataset_splits_respected_by_loader() {
    let ds = tmpdir("splits");
    let spec = SynthSpec { image_size: 32, count: 10, train_fraction: 0.8, ..SynthSpec::default() };
    data::generate_synthetic(&spec, &ds).unwrap();
    let loaded = data::load_dataset(&ds).unwrap();
    assert_eq!(loaded.of_split(Split::Train).len(), 8);
    assert_eq!(loaded.of_split(Split::Test).len(), 2);
    assert_eq!(loaded.of_split(Split::Val).len(), 0);
}
