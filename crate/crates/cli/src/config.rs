//! Run configuration: built-in defaults, then an optional `key=value` file,
//! then command-line flags.

use std::fs;
use std::path::Path;

use patlab_core::kv::{self, KvMap};
use patlab_core::patching::{FusionConfig, WeightSource};
use patlab_core::synthgen::SynthConfig;
use patlab_core::training::{TrainConfig, TrainMode};

use crate::CliError;

pub const SNAPSHOT_FILE: &str = "config.resolved";

const DATA_PREFIX: &str = "data.";

/// Keys that may be set but have no default value.
const OPTIONAL_KEYS: &[&str] = &["train.seed"];

pub fn defaults() -> KvMap {
    let mut map = KvMap::new();
    let mut put = |k: &str, v: &str| {
        map.insert(k.to_string(), v.to_string());
    };
    put("seed", "0");
    put("mode", "det");
    put("data.n_train", "2000");
    put("data.n_test", "2000");
    put("fusion.weight_source", "auto");
    put("infer.mode", "plain");
    put("eval.threshold", "0.5");
    put("eval.co_threshold", "0.2");
    put("causal.trials", "1000");
    put("causal.constructed", "1000");
    put("causal.mediators", "3");
    put("causal.classes", "2");

    let mut synth = KvMap::new();
    SynthConfig::default_benchmark().to_kv(&mut synth);
    for (k, v) in synth {
        map.insert(format!("{DATA_PREFIX}{k}"), v);
    }
    let mut train = KvMap::new();
    TrainConfig::default().to_kv(&mut train);
    train.remove("train.seed");
    map.extend(train);
    map
}

fn is_known(key: &str, defaults: &KvMap) -> bool {
    defaults.contains_key(key) || OPTIONAL_KEYS.contains(&key)
}

/// Merges defaults, the optional config file and flag overrides.
pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<KvMap, CliError> {
    let base = defaults();
    let mut map = base.clone();
    if let Some(path) = file {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let parsed = kv::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        for (k, v) in parsed {
            if !is_known(&k, &base) {
                return Err(CliError::Usage(format!("unknown config key '{k}' in {}", path.display())));
            }
            map.insert(k, v);
        }
    }
    for (k, v) in overrides {
        if !is_known(k, &base) {
            return Err(CliError::Usage(format!("unknown config key '{k}'")));
        }
        map.insert(k.clone(), v.clone());
    }
    if !map.contains_key("train.seed") {
        let seed = map["seed"].clone();
        map.insert("train.seed".into(), seed);
    }
    Ok(map)
}

/// Parses `key=value` from a `--set` flag.
pub fn parse_assignment(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got '{s}'"))
}

pub fn get<T: std::str::FromStr>(map: &KvMap, key: &str) -> Result<T, CliError> {
    let raw = map
        .get(key)
        .ok_or_else(|| CliError::Usage(format!("missing config key '{key}'")))?;
    raw.parse()
        .map_err(|_| CliError::Usage(format!("bad value for {key}: '{raw}'")))
}

pub fn synth_config(map: &KvMap) -> Result<SynthConfig, CliError> {
    let sub: KvMap = map
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(DATA_PREFIX).map(|s| (s.to_string(), v.clone())))
        .collect();
    Ok(SynthConfig::from_kv(&sub)?)
}

pub fn train_config(map: &KvMap) -> Result<TrainConfig, CliError> {
    Ok(TrainConfig::from_kv(map)?)
}

pub fn train_mode(map: &KvMap) -> Result<TrainMode, CliError> {
    map["mode"].parse::<TrainMode>().map_err(|e| CliError::Usage(e.to_string()))
}

/// Fusion settings for inference; `auto` picks the weight head for
/// `pat-t` models and shared logits otherwise.
pub fn fusion_config(map: &KvMap, model_mode: TrainMode) -> Result<FusionConfig, CliError> {
    let weight_source = match map["fusion.weight_source"].as_str() {
        "auto" if model_mode == TrainMode::PatT => WeightSource::ThetaHead,
        "auto" => WeightSource::Shared,
        other => other.parse()?,
    };
    let cfg = FusionConfig {
        tau: get(map, "fusion.tau")?,
        lambda: get(map, "fusion.lambda")?,
        weight_source,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Writes the resolved configuration next to a run's outputs.
pub fn write_snapshot(out: &Path, map: &KvMap, command: &str, paths: &[(&str, String)]) -> Result<(), CliError> {
    let mut text = format!("# patlab {command}\n");
    for (name, value) in paths {
        text.push_str(&format!("# {name}: {value}\n"));
    }
    text.push_str(&kv::format(map));
    fs::write(out.join(SNAPSHOT_FILE), text)?;
    Ok(())
}
