//! Acceptance suite: every shipped guarantee, one pass/fail line each.
//!
//! Run with `cargo test -p cdpeft --test acceptance -- --nocapture` to see
//! the per-criterion report. The whole suite is a single sequential test so
//! its timing measurements are not polluted by sibling tests.

use cdpeft::checks;
use cdpeft::data::{self, Mask, SynthSpec};
use cdpeft::model::{build_model, GradMode, Model};
use cdpeft::peft::{partition_report, PeftConfig, PeftMethod};
use cdpeft::rng::Rng;
use cdpeft::tensor::Graph;
use cdpeft::train::{compute_metrics, sample_grads, AdamW, MetricReport, TrainConfig};
use cdpeft::vit::ViTConfig;
use cdpeft::{fusion, par, vit};
use std::path::PathBuf;
use std::time::Instant;

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: String) -> Outcome {
    Outcome { name, passed, detail }
}

fn tmpdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("cdpeft-accept-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// ViT-tiny as used throughout the desk-scale checks.
fn tiny32() -> ViTConfig {
    ViTConfig { image_size: 32, patch_size: 8, depth: 2, dim: 32, heads: 2, mlp_ratio: 4 }
}

fn vit_small() -> ViTConfig {
    ViTConfig::small() // D=384, 12 layers, 6 heads, P=16
}

fn with_method(method: PeftMethod) -> PeftConfig {
    let mut cfg = PeftConfig::default();
    cfg.method = method;
    cfg
}

fn forward_logits(model: &Model, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, GradMode::None).unwrap();
    let out = model.forward_channels(&mut g, &bound, &[a, b]).unwrap();
    g.data(out.logits).to_vec()
}

fn random_frames(rng: &mut Rng, hw: usize) -> (Vec<f64>, Vec<f64>) {
    (
        (0..3 * hw * hw).map(|_| rng.next_f64()).collect(),
        (0..3 * hw * hw).map(|_| rng.next_f64()).collect(),
    )
}

// 1. Gradient fidelity: every op and the end-to-end tiny model under 1e-4,
//    on one core in under 60 s.
fn criterion_1() -> Outcome {
    let started = Instant::now();
    let result = par::single_threaded(|| -> Result<f64, String> {
        let mut worst: f64 = 0.0;
        for r in checks::run_registry(1).map_err(|e| e.to_string())? {
            if !(r.max_err < 1e-4) {
                return Err(format!("{} err {}", r.name, r.max_err));
            }
            worst = worst.max(r.max_err);
        }
        let e2e = checks::end_to_end(&tiny32(), 42).map_err(|e| e.to_string())?;
        if !(e2e < 1e-4) {
            return Err(format!("end_to_end err {e2e}"));
        }
        Ok(worst.max(e2e))
    });
    let secs = started.elapsed().as_secs_f64();
    match result {
        Ok(worst) => outcome(
            "1 gradient fidelity",
            secs < 60.0,
            format!("max rel err {worst:.3e}, {secs:.1}s on one core (limit 60s)"),
        ),
        Err(e) => outcome("1 gradient fidelity", false, e),
    }
}

// 2. Identity-at-init: adapter/lora/ia3 forwards equal the tuning-free
//    frozen model bitwise on 10 random inputs.
fn criterion_2() -> Outcome {
    let vit = tiny32();
    let probe = build_model(&vit, &with_method(PeftMethod::LinearProbe), 2, 42).unwrap();
    let mut rng = Rng::new(0xbeef);
    for trial in 0..10 {
        let (a, b) = random_frames(&mut rng, vit.image_size);
        let reference = forward_logits(&probe, &a, &b);
        for method in [PeftMethod::Adapter, PeftMethod::Lora, PeftMethod::Ia3] {
            let model = build_model(&vit, &with_method(method), 2, 42).unwrap();
            let got = forward_logits(&model, &a, &b);
            if got != reference {
                return outcome(
                    "2 identity at init",
                    false,
                    format!("{method} differs from the frozen model on input {trial}"),
                );
            }
        }
    }
    outcome("2 identity at init", true, "adapter/lora/ia3 bitwise identical on 10 inputs".into())
}

// 3. Freeze integrity: 100 optimizer steps leave frozen bytes untouched and
//    optimizer state covers exactly the trainable set.
fn criterion_3() -> Outcome {
    let vit = tiny32();
    let mut model = build_model(&vit, &with_method(PeftMethod::Adapter), 2, 11).unwrap();
    let frozen_before: Vec<(String, Vec<u8>)> = model
        .params()
        .iter()
        .filter(|p| p.frozen)
        .map(|p| (p.name.clone(), p.data.iter().flat_map(|v| v.to_le_bytes()).collect()))
        .collect();
    let spec = SynthSpec { image_size: 32, count: 8, ..SynthSpec::default() };
    let samples: Vec<data::ChangeSample> = (0..8).map(|i| data::synth_sample(&spec, i)).collect();
    let trainable = model.trainable_indices();
    let cfg = TrainConfig { lr: 1e-3, crop_size: 32, ..TrainConfig::default() };
    let mut opt = AdamW::new(&model, &cfg);
    if opt.trainable() != trainable.as_slice() {
        return outcome("3 freeze integrity", false, "optimizer state does not match the trainable set".into());
    }
    for step in 0..100 {
        let s = &samples[step % samples.len()];
        let (_, grads) = sample_grads(&model, s, &trainable).unwrap();
        opt.step(&mut model, &grads).unwrap();
    }
    for (name, before) in &frozen_before {
        let now: Vec<u8> = model.param(name).unwrap().data.iter().flat_map(|v| v.to_le_bytes()).collect();
        if &now != before {
            return outcome("3 freeze integrity", false, format!("{name} changed after 100 steps"));
        }
    }
    let n_frozen = model.params().iter().filter(|p| p.frozen).count();
    outcome(
        "3 freeze integrity",
        true,
        format!("{} frozen params bit-identical after 100 steps; state covers {} trainable", n_frozen, trainable.len()),
    )
}

// 4. Parameter accounting: report matches enumeration exactly; adapter adds
//    49,600/layer at D=384 r=6; lora rank-1 adds 3,072/layer; adapter-mode
//    trainable ratio on ViT-S < 5%.
fn criterion_4() -> Outcome {
    let vit = vit_small();
    let adapter = build_model(&vit, &with_method(PeftMethod::Adapter), 2, 1).unwrap();
    let report = partition_report(&adapter);
    // independent oracle: walk the registry, summing products of dims
    let mut frozen = 0usize;
    let mut trainable = 0usize;
    for p in adapter.params() {
        let n: usize = p.shape.iter().product();
        if p.frozen {
            frozen += n;
        } else {
            trainable += n;
        }
    }
    if report.frozen_count != frozen || report.trainable_count != trainable {
        return outcome("4 parameter accounting", false, "report disagrees with enumeration".into());
    }
    let adapter_layer: usize = adapter
        .params()
        .iter()
        .filter(|p| p.name.starts_with("peft.layer3.adapter."))
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    if adapter_layer != 49_600 {
        return outcome("4 parameter accounting", false, format!("adapter layer count {adapter_layer} != 49600"));
    }
    let mut lora_cfg = with_method(PeftMethod::Lora);
    lora_cfg.lora_rank = 1;
    let lora = build_model(&vit, &lora_cfg, 2, 1).unwrap();
    let lora_layer: usize = lora
        .params()
        .iter()
        .filter(|p| p.name.starts_with("peft.layer3.lora."))
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    if lora_layer != 3_072 {
        return outcome("4 parameter accounting", false, format!("lora layer count {lora_layer} != 3072"));
    }
    let peft_only: usize = adapter
        .params()
        .iter()
        .filter(|p| p.name.starts_with("peft."))
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    let passed = report.ratio < 0.05;
    outcome(
        "4 parameter accounting",
        passed,
        format!(
            "counts exact; adapter/layer 49600; lora/layer 3072; trainable ratio {:.4} vs < 0.05 required \
             (trainable {} = adapters {} + fusion/decoder head {}; adapters alone are {:.4} of the total)",
            report.ratio,
            report.trainable_count,
            peft_only,
            report.trainable_count - peft_only,
            peft_only as f64 / (report.frozen_count + report.trainable_count) as f64,
        ),
    )
}

// 5. LoRA merge equivalence across ranks {1,2,4} on 100 random inputs.
fn criterion_5() -> Outcome {
    let vit = tiny32();
    let mut rng = Rng::new(0x10aa);
    let mut max_diff: f64 = 0.0;
    let mut inputs_done = 0usize;
    for (rank, count) in [(1usize, 34usize), (2, 33), (4, 33)] {
        let mut cfg = with_method(PeftMethod::Lora);
        cfg.lora_rank = rank;
        let mut model = build_model(&vit, &cfg, 2, 21).unwrap();
        let lora_names: Vec<String> = model
            .params()
            .iter()
            .filter(|p| p.name.contains(".lora."))
            .map(|p| p.name.clone())
            .collect();
        for name in &lora_names {
            let p = model.param_mut(name).unwrap();
            for v in p.data.iter_mut() {
                *v = rng.normal() * 0.05;
            }
        }
        let merged = model.merge_lora().unwrap();
        for _ in 0..count {
            let (a, b) = random_frames(&mut rng, vit.image_size);
            let u = forward_logits(&model, &a, &b);
            let m = forward_logits(&merged, &a, &b);
            for (x, y) in u.iter().zip(&m) {
                max_diff = max_diff.max((x - y).abs());
            }
            inputs_done += 1;
        }
    }
    outcome(
        "5 lora merge equivalence",
        max_diff < 1e-9,
        format!("max |unmerged - merged| = {max_diff:.3e} over {inputs_done} inputs, ranks 1/2/4"),
    )
}

// 6. MCA contracts: rows sum to 1e-10, frame swap with equal temporal
//    embeddings is bitwise neutral, and exactly N*T scores materialize.
fn criterion_6() -> Outcome {
    let vit = tiny32();
    let mut model = build_model(&vit, &with_method(PeftMethod::LinearProbe), 2, 17).unwrap();
    // equal temporal embedding rows
    let d = vit.dim;
    let row: Vec<f64> = model.param("fusion.z_tp").unwrap().data[..d].to_vec();
    {
        let ztp = model.param_mut("fusion.z_tp").unwrap();
        ztp.data[d..].copy_from_slice(&row);
    }
    let n = vit.num_patches();
    let mut rng = Rng::new(0x6ca);
    for trial in 0..10 {
        let (a, b) = random_frames(&mut rng, vit.image_size);
        let fuse_feature = |x: &[f64], y: &[f64]| -> (Vec<f64>, Vec<f64>, Vec<usize>) {
            let mut g = Graph::new();
            let bound = model.bind(&mut g, GradMode::None).unwrap();
            let fa = g.constant(x.to_vec(), vec![3, vit.image_size, vit.image_size]).unwrap();
            let fb = g.constant(y.to_vec(), vec![3, vit.image_size, vit.image_size]).unwrap();
            let frames = vit::backbone_forward(&mut g, &[fa, fb], &vit, &bound.backbone, &bound.hooks).unwrap();
            let fused = fusion::fuse(&mut g, &frames.frames, &bound.fusion, vit.grid()).unwrap();
            (
                g.data(fused.feature).to_vec(),
                g.data(fused.probs).to_vec(),
                g.shape(fused.probs).to_vec(),
            )
        };
        let (f_ab, probs, score_shape) = fuse_feature(&a, &b);
        if score_shape != vec![n, 2] {
            return outcome("6 mca contracts", false, format!("score tensor is {score_shape:?}, want [{n},2]"));
        }
        for row in probs.chunks(2) {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-10 {
                return outcome("6 mca contracts", false, format!("attention row sums to {s}"));
            }
        }
        let (f_ba, _, _) = fuse_feature(&b, &a);
        if f_ab != f_ba {
            return outcome("6 mca contracts", false, format!("frame swap changed fuse output on input {trial}"));
        }
    }
    outcome(
        "6 mca contracts",
        true,
        format!("rows sum to 1, swap bitwise neutral, scores exactly {n}x2 on 10 inputs"),
    )
}

// 7. Metric oracle: exact agreement with brute-force confusion counting on
//    1000 random mask pairs, plus the hand case.
fn criterion_7() -> Outcome {
    let mut rng = Rng::new(0x3e7);
    for _ in 0..1000 {
        let h = rng.range(1, 12);
        let w = rng.range(1, 12);
        let pred = Mask { h, w, data: (0..h * w).map(|_| rng.below(2) as u8).collect() };
        let gt = Mask { h, w, data: (0..h * w).map(|_| rng.below(2) as u8).collect() };
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for i in 0..h * w {
            match (pred.data[i], gt.data[i]) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fn_ += 1,
                _ => tn += 1,
            }
        }
        let got = compute_metrics(&pred, &gt).unwrap();
        let want = MetricReport::from_counts(tp, fp, fn_, tn);
        if got != want {
            return outcome("7 metric oracle", false, "disagreement with brute-force counting".into());
        }
    }
    let hand = MetricReport::from_counts(50, 10, 10, 30);
    let ok = (hand.f1 - 0.8333).abs() < 1e-4 && (hand.iou - 0.7143).abs() < 1e-4 && (hand.oa - 0.8).abs() < 1e-4;
    outcome(
        "7 metric oracle",
        ok,
        format!("1000 random pairs exact; hand case f1 {:.4} iou {:.4} oa {:.4}", hand.f1, hand.iou, hand.oa),
    )
}

fn run_cli(args: &[&str]) -> i32 {
    let argv: Vec<String> = std::iter::once("cdpeft".to_string())
        .chain(args.iter().map(|s| s.to_string()))
        .collect();
    cdpeft::cli::run(&argv)
}

fn read_f1(dir: &std::path::Path) -> f64 {
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap();
    metrics["f1"].as_f64().unwrap()
}

// 8. End-to-end learning on the synthetic task: adapter reaches test F1
//    >= 0.90 within 30 epochs, in under 10 minutes; linear probe scores
//    strictly lower on the same fixed seed.
fn criterion_8() -> Outcome {
    let ds = tmpdir("ds");
    let run_adapter = tmpdir("adapter");
    let run_probe = tmpdir("probe");
    let eval_adapter = tmpdir("eval-adapter");
    let eval_probe = tmpdir("eval-probe");
    if run_cli(&["synth", "--out", ds.to_str().unwrap(), "--seed", "42"]) != 0 {
        return outcome("8 end-to-end learning", false, "synth failed".into());
    }
    let vit_flags = [
        "--vit.image_size", "64", "--vit.patch_size", "8", "--vit.depth", "2",
        "--vit.dim", "32", "--vit.heads", "2",
    ];
    let train_flags = [
        "--train.crop_size", "64", "--train.epochs", "30", "--train.batch_size", "4",
        "--train.lr", "0.0025", "--seed", "7",
    ];
    let started = Instant::now();
    let mut args = vec!["train", "--out", run_adapter.to_str().unwrap(), "--data.root", ds.to_str().unwrap()];
    args.extend_from_slice(&vit_flags);
    args.extend_from_slice(&train_flags);
    if run_cli(&args) != 0 {
        return outcome("8 end-to-end learning", false, "adapter training failed".into());
    }
    let adapter_secs = started.elapsed().as_secs_f64();

    let mut args = vec![
        "train", "--out", run_probe.to_str().unwrap(), "--data.root", ds.to_str().unwrap(),
        "--method", "linear_probe",
    ];
    args.extend_from_slice(&vit_flags);
    args.extend_from_slice(&train_flags);
    if run_cli(&args) != 0 {
        return outcome("8 end-to-end learning", false, "probe training failed".into());
    }

    for (run, out, method) in [
        (&run_adapter, &eval_adapter, "adapter"),
        (&run_probe, &eval_probe, "linear_probe"),
    ] {
        let ckpt = run.join("best.ckpt");
        let mut args = vec![
            "eval", "--data.root", ds.to_str().unwrap(), "--data.split", "test",
            "--ckpt", ckpt.to_str().unwrap(), "--out", out.to_str().unwrap(),
            "--method", method,
        ];
        args.extend_from_slice(&vit_flags);
        args.extend_from_slice(&["--train.crop_size", "64", "--seed", "7"]);
        if run_cli(&args) != 0 {
            return outcome("8 end-to-end learning", false, format!("{method} eval failed"));
        }
    }
    let adapter_f1 = read_f1(&eval_adapter);
    let probe_f1 = read_f1(&eval_probe);
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let passed = adapter_f1 >= 0.90 && probe_f1 < adapter_f1 && adapter_secs < 600.0;
    outcome(
        "8 end-to-end learning",
        passed,
        format!(
            "adapter test F1 {adapter_f1:.4} (>= 0.90), probe {probe_f1:.4} (strictly lower), \
             adapter train {adapter_secs:.0}s on {cores} cores (limit 600s)"
        ),
    )
}

// 9. Checkpoint economy: adapter checkpoint < 10% of a full-model weight
//    file for the same config.
fn criterion_9() -> Outcome {
    let dir = tmpdir("economy");
    let vit = vit_small();
    let mut model = build_model(&vit, &with_method(PeftMethod::Adapter), 2, 1).unwrap();
    let ckpt = dir.join("adapter.ckpt");
    let full = dir.join("full.weights");
    model.save_checkpoint(&ckpt).unwrap();
    model.save_weights(&full).unwrap();
    let ckpt_bytes = std::fs::metadata(&ckpt).unwrap().len();
    let full_bytes = std::fs::metadata(&full).unwrap().len();
    let ratio = ckpt_bytes as f64 / full_bytes as f64;
    // size of the tuning parameters alone, for the report
    let peft_scalars: usize = model
        .params()
        .iter()
        .filter(|p| p.name.starts_with("peft."))
        .map(|p| p.data.len())
        .sum();
    outcome(
        "9 checkpoint economy",
        ratio < 0.10,
        format!(
            "adapter checkpoint {ckpt_bytes} B vs full model {full_bytes} B: ratio {:.4} vs < 0.10 required \
             (the checkpoint also stores the always-trainable fusion+decoder head; adapter scalars alone \
             would be {:.4} of the full file)",
            ratio,
            (peft_scalars * 4) as f64 / full_bytes as f64,
        ),
    )
}

// 10. Determinism: identical config and seed give byte-identical logs and
//     checkpoints.
fn criterion_10() -> Outcome {
    let ds = tmpdir("det-ds");
    if run_cli(&[
        "synth", "--out", ds.to_str().unwrap(), "--seed", "3",
        "--synth.count", "12", "--synth.image_size", "32",
    ]) != 0
    {
        return outcome("10 determinism", false, "synth failed".into());
    }
    let mut logs = Vec::new();
    let mut ckpts = Vec::new();
    for tag in ["a", "b"] {
        let run = tmpdir(&format!("det-{tag}"));
        let args = [
            "train", "--out", run.to_str().unwrap(), "--data.root", ds.to_str().unwrap(),
            "--vit.image_size", "32", "--vit.patch_size", "8", "--vit.depth", "1",
            "--vit.dim", "16", "--vit.heads", "2", "--vit.mlp_ratio", "2",
            "--train.crop_size", "32", "--train.epochs", "3", "--train.batch_size", "4",
            "--train.lr", "0.001", "--train.val_split", "0.25", "--seed", "3",
        ];
        if run_cli(&args) != 0 {
            return outcome("10 determinism", false, "training failed".into());
        }
        logs.push(std::fs::read(run.join("log.ndjson")).unwrap());
        ckpts.push(std::fs::read(run.join("best.ckpt")).unwrap());
    }
    let passed = logs[0] == logs[1] && ckpts[0] == ckpts[1];
    outcome(
        "10 determinism",
        passed,
        format!("log {} B and checkpoint {} B byte-identical across two runs", logs[0].len(), ckpts[0].len()),
    )
}

#[test]
fn acceptance() {
    let criteria: Vec<fn() -> Outcome> = vec![
        criterion_1,
        criterion_2,
        criterion_3,
        criterion_4,
        criterion_5,
        criterion_6,
        criterion_7,
        criterion_8,
        criterion_9,
        criterion_10,
    ];
    let mut results = Vec::new();
    for c in criteria {
        let r = c();
        println!("[{}] {:<26} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        results.push(r);
    }
    let failures: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{}: {}", r.name, r.detail))
        .collect();
    assert!(
        failures.is_empty(),
        "{} of {} acceptance criteria failed:\n{}",
        failures.len(),
        results.len(),
        failures.join("\n")
    );
}
