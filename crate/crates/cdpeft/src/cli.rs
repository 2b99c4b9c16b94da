//! Command-line entry point: `synth`, `train`, `eval`, `gradcheck`, `params`.
//!
//! Configuration is a JSON file merged with dotted flag overrides
//! (`--peft.method lora`, `--train.lr 0.001`); flags win over the file,
//! which wins over defaults. Every training run serializes the exact merged
//! config into its output directory before it starts.

use crate::checks;
use crate::data::{self, Split};
use crate::error::{Error, Result};
use crate::model::{build_model, Model};
use crate::peft::{partition_report, PeftConfig};
use crate::train::{self, TrainConfig};
use crate::vit::ViTConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub root: Option<String>,
    pub split: Split,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { root: None, split: Split::Test }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub frames: usize,
    pub vit: ViTConfig,
    pub peft: PeftConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub synth: data::SynthSpec,
    /// Optional full-model weight file loaded before training/eval.
    pub weights: Option<String>,
    /// Checkpoint consumed by `eval`.
    pub ckpt: Option<String>,
}

impl RunConfig {
    fn base() -> Self {
        RunConfig { seed: 42, frames: 2, ..Default::default() }
    }
}

const USAGE: &str = "usage: cdpeft <synth|train|eval|gradcheck|params> [flags]

flags:
  --config PATH          JSON config file
  --out DIR              output directory (synth: dataset dir; train: run dir)
  --seed N               root seed (also applied to train.seed and synth.seed)
  --method M             shorthand for --peft.method
  --r N                  shorthand for --peft.adapter_r
  --rank N               shorthand for --peft.lora_rank
  --ckpt PATH            shorthand for checkpoint path (eval)
  --KEY VALUE            dotted config override, e.g. --train.lr 0.001
";

struct Parsed {
    sub: String,
    out: Option<PathBuf>,
    config: RunConfig,
    override_keys: Vec<String>,
    had_config_file: bool,
}

pub fn run(args: &[String]) -> i32 {
    match run_inner(args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Cli(_) | Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

fn run_inner(args: &[String]) -> Result<i32> {
    let Some(sub) = args.get(1) else {
        eprint!("{USAGE}");
        return Ok(2);
    };
    if !["synth", "train", "eval", "gradcheck", "params"].contains(&sub.as_str()) {
        eprint!("{USAGE}");
        return Err(Error::Cli(format!("unknown subcommand `{sub}`")));
    }
    let parsed = parse_flags(sub.clone(), &args[2..])?;
    match parsed.sub.as_str() {
        "synth" => cmd_synth(&parsed),
        "train" => cmd_train(&parsed),
        "eval" => cmd_eval(&parsed),
        "gradcheck" => cmd_gradcheck(&parsed),
        "params" => cmd_params(&parsed),
        _ => unreachable!(),
    }
}

fn parse_flags(sub: String, rest: &[String]) -> Result<Parsed> {
    let mut config_path: Option<PathBuf> = None;
    let mut out: Option<PathBuf> = None;
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut i = 0;
    while i < rest.len() {
        let arg = &rest[i];
        let Some(stripped) = arg.strip_prefix("--") else {
            return Err(Error::Cli(format!("unexpected argument `{arg}`")));
        };
        let (key, value) = match stripped.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = rest
                    .get(i + 1)
                    .ok_or_else(|| Error::Cli(format!("flag --{stripped} is missing a value")))?;
                i += 1;
                (stripped.to_string(), v.clone())
            }
        };
        match key.as_str() {
            "config" => config_path = Some(PathBuf::from(value)),
            "out" => out = Some(PathBuf::from(value)),
            "method" => overrides.push(("peft.method".into(), value)),
            "r" => overrides.push(("peft.adapter_r".into(), value)),
            "rank" => overrides.push(("peft.lora_rank".into(), value)),
            "ckpt" => overrides.push(("ckpt".into(), value)),
            "seed" => {
                overrides.push(("seed".into(), value.clone()));
                overrides.push(("train.seed".into(), value.clone()));
                overrides.push(("synth.seed".into(), value));
            }
            _ => overrides.push((key, value)),
        }
        i += 1;
    }

    let mut value = serde_json::to_value(RunConfig::base()).expect("default config serializes");
    if let Some(path) = &config_path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let file_value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad config JSON: {e}")))?;
        merge_value(&mut value, file_value);
    }
    let mut override_keys = Vec::new();
    for (key, raw) in &overrides {
        apply_override(&mut value, key, raw)?;
        override_keys.push(key.clone());
    }
    let config: RunConfig =
        serde_json::from_value(value).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
    config.vit.validate()?;
    config.peft.validate()?;
    config.train.validate()?;
    Ok(Parsed { sub, out, config, override_keys, had_config_file: config_path.is_some() })
}

fn merge_value(base: &mut serde_json::Value, incoming: serde_json::Value) {
    match (base, incoming) {
        (serde_json::Value::Object(b), serde_json::Value::Object(inc)) => {
            for (k, v) in inc {
                match b.get_mut(&k) {
                    Some(slot) => merge_value(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn apply_override(root: &mut serde_json::Value, dotted: &str, raw: &str) -> Result<()> {
    let mut cursor = root;
    let parts: Vec<&str> = dotted.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        cursor = cursor
            .as_object_mut()
            .ok_or_else(|| Error::Cli(format!("cannot override `{dotted}`")))?
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    let leaf = parts.last().unwrap().to_string();
    let value = serde_json::from_str::<serde_json::Value>(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    cursor
        .as_object_mut()
        .ok_or_else(|| Error::Cli(format!("cannot override `{dotted}`")))?
        .insert(leaf, value);
    Ok(())
}

fn require_out(parsed: &Parsed) -> Result<&Path> {
    parsed.out.as_deref().ok_or_else(|| Error::Cli("--out DIR is required".into()))
}

fn require_data_root(parsed: &Parsed) -> Result<PathBuf> {
    parsed
        .config
        .data
        .root
        .as_ref()
        .map(PathBuf::from)
        .ok_or_else(|| Error::Config("data.root is not set".into()))
}

fn build_from_config(cfg: &RunConfig) -> Result<Model> {
    let mut model = build_model(&cfg.vit, &cfg.peft, cfg.frames.max(1), cfg.seed)?;
    if let Some(weights) = &cfg.weights {
        for warning in model.load_weights(Path::new(weights))? {
            eprintln!("warning: {warning}");
        }
    }
    Ok(model)
}

fn cmd_synth(parsed: &Parsed) -> Result<i32> {
    let out = require_out(parsed)?;
    let manifest = data::generate_synthetic(&parsed.config.synth, out)?;
    println!(
        "{}",
        serde_json::json!({
            "root": out.display().to_string(),
            "count": manifest.samples.len(),
        })
    );
    Ok(0)
}

/// Validation side of the train split, derived the same way `train` does it.
fn derive_val<'a>(
    train_samples: &[&'a data::ChangeSample],
    cfg: &TrainConfig,
) -> Result<(Vec<&'a data::ChangeSample>, Vec<&'a data::ChangeSample>)> {
    let (train_idx, val_idx) = data::split_indices(train_samples.len(), cfg.val_split, cfg.seed)?;
    Ok((
        train_idx.iter().map(|&i| train_samples[i]).collect(),
        val_idx.iter().map(|&i| train_samples[i]).collect(),
    ))
}

fn cmd_train(parsed: &Parsed) -> Result<i32> {
    let out = require_out(parsed)?;
    let root = require_data_root(parsed)?;
    std::fs::create_dir_all(out)?;
    // provenance first: the exact merged config
    let config_json = serde_json::to_string_pretty(&parsed.config)
        .map_err(|e| Error::Config(format!("config encode: {e}")))?;
    std::fs::write(out.join("config.json"), config_json)?;

    let dataset = data::load_dataset(&root)?;
    let train_pool = dataset.of_split(Split::Train);
    if train_pool.is_empty() {
        return Err(Error::Data("dataset has no train samples".into()));
    }
    let manifest_val = dataset.of_split(Split::Val);
    let (train_refs, val_refs) = if manifest_val.is_empty() {
        derive_val(&train_pool, &parsed.config.train)?
    } else {
        (train_pool, manifest_val)
    };
    let train_set: Vec<data::ChangeSample> = train_refs.into_iter().cloned().collect();
    let val_set: Vec<data::ChangeSample> = val_refs.into_iter().cloned().collect();

    let mut model = build_from_config(&parsed.config)?;
    let ckpt_path = out.join("best.ckpt");
    let outcome = train::train(&mut model, &train_set, &val_set, &parsed.config.train, Some(&ckpt_path))?;

    let mut log = String::new();
    for rec in &outcome.records {
        log.push_str(&serde_json::to_string(rec).map_err(|e| Error::Train(format!("log encode: {e}")))?);
        log.push('\n');
    }
    std::fs::write(out.join("log.ndjson"), log)?;

    // metrics.json: the reloaded best checkpoint evaluated on the val split
    let mut best = build_from_config(&parsed.config)?;
    for warning in best.load_checkpoint(&ckpt_path)? {
        eprintln!("warning: {warning}");
    }
    let val_report = train::evaluate(&best, &val_set.iter().collect::<Vec<_>>())?;
    let metrics_json = serde_json::to_string_pretty(&val_report)
        .map_err(|e| Error::Train(format!("metrics encode: {e}")))?;
    std::fs::write(out.join("metrics.json"), metrics_json)?;

    println!(
        "{}",
        serde_json::json!({
            "epochs": outcome.records.len(),
            "best_epoch": outcome.best_epoch,
            "best_val_f1": outcome.best_val_f1,
        })
    );
    Ok(0)
}

fn cmd_eval(parsed: &Parsed) -> Result<i32> {
    let root = require_data_root(parsed)?;
    let ckpt = parsed
        .config
        .ckpt
        .as_ref()
        .ok_or_else(|| Error::Config("eval needs a checkpoint (--ckpt PATH)".into()))?;
    let dataset = data::load_dataset(&root)?;
    let samples: Vec<&data::ChangeSample> = match parsed.config.data.split {
        Split::Val => {
            let explicit = dataset.of_split(Split::Val);
            if explicit.is_empty() {
                derive_val(&dataset.of_split(Split::Train), &parsed.config.train)?.1
            } else {
                explicit
            }
        }
        split => dataset.of_split(split),
    };
    if samples.is_empty() {
        return Err(Error::Data(format!("no samples in split `{}`", parsed.config.data.split)));
    }
    let mut model = build_from_config(&parsed.config)?;
    for warning in model.load_checkpoint(Path::new(ckpt))? {
        eprintln!("warning: {warning}");
    }
    let report = train::evaluate(&model, &samples)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(|e| Error::Train(format!("encode: {e}")))?
    );
    if let Some(out) = &parsed.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(
            out.join("metrics.json"),
            serde_json::to_string_pretty(&report).map_err(|e| Error::Train(format!("encode: {e}")))?,
        )?;
    }
    Ok(0)
}

fn cmd_gradcheck(parsed: &Parsed) -> Result<i32> {
    // default to the small gradcheck encoder unless the user configured one
    let custom = parsed.had_config_file || parsed.override_keys.iter().any(|k| k.starts_with("vit."));
    let vit = if custom { parsed.config.vit.clone() } else { checks::gradcheck_vit() };
    let mut worst: f64 = 0.0;
    for result in checks::run_registry(2)? {
        println!("{:<24} {:.3e}", result.name, result.max_err);
        worst = worst.max(result.max_err);
    }
    let e2e = checks::end_to_end(&vit, parsed.config.seed)?;
    println!("{:<24} {:.3e}", "end_to_end", e2e);
    worst = worst.max(e2e);
    println!("max error {worst:.3e}");
    Ok(if worst < 1e-4 { 0 } else { 1 })
}

fn cmd_params(parsed: &Parsed) -> Result<i32> {
    let model = build_from_config(&parsed.config)?;
    let report = partition_report(&model);
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(|e| Error::Config(format!("encode: {e}")))?
    );
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: &[&str]) -> Vec<String> {
        std::iter::once("cdpeft".to_string())
            .chain(v.iter().map(|s| s.to_string()))
            .collect()
    }

    #[test]
    fn unknown_subcommand_exits_2() {
        assert_eq!(run(&args(&["trian"])), 2);
    }

    #[test]
    fn missing_subcommand_prints_usage() {
        assert_eq!(run(&args(&[])), 2);
    }

    #[test]
    fn dotted_override_applies() {
        let parsed = parse_flags("params".into(), &args(&["--peft.method", "lora", "--train.lr", "0.001"])[1..]).unwrap();
        assert_eq!(parsed.config.peft.method, crate::peft::PeftMethod::Lora);
        assert!((parsed.config.train.lr - 0.001).abs() < 1e-12);
    }

    #[test]
    fn alias_flags_map_to_peft() {
        let parsed = parse_flags("params".into(), &args(&["--method", "ia3", "--r", "8"])[1..]).unwrap();
        assert_eq!(parsed.config.peft.method, crate::peft::PeftMethod::Ia3);
        assert_eq!(parsed.config.peft.adapter_r, 8);
    }

    #[test]
    fn bad_config_value_exits_2() {
        assert_eq!(run(&args(&["params", "--peft.method", "turbo"])), 2);
    }

    #[test]
    fn seed_flag_propagates() {
        let parsed = parse_flags("synth".into(), &args(&["--seed", "7"])[1..]).unwrap();
        assert_eq!(parsed.config.seed, 7);
        assert_eq!(parsed.config.train.seed, 7);
        assert_eq!(parsed.config.synth.seed, 7);
    }
}
