//! Flat `key = value` configuration files.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use gallat_core::training::TrainConfig;

use crate::error::{Error, Result};

/// The shipped defaults, identical to `TrainConfig::default()`.
pub const DEFAULT_CONF: &str = include_str!("../config/default.conf");

/// Parses `key = value` lines; `#` starts a comment. Later keys win.
pub fn parse(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::format(format!("config line {}: expected key = value", no + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::format(format!("config line {}: empty key", no + 1)));
        }
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::format(format!("config key {key}: cannot parse {v:?}")))
}

/// Applies every entry to `cfg`; unknown keys are an error.
pub fn apply(cfg: &mut TrainConfig, entries: &BTreeMap<String, String>) -> Result<()> {
    for (k, v) in entries {
        set(cfg, k, v)?;
    }
    Ok(())
}

pub fn set(cfg: &mut TrainConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "batch_size" => cfg.batch_size = value(key, v)?,
        "epochs" => cfg.epochs = value(key, v)?,
        "pretrain_epochs" => cfg.pretrain_epochs = value(key, v)?,
        "embed_dim" => cfg.embed_dim = value(key, v)?,
        "history" => cfg.history = value(key, v)?,
        "eta_d" => cfg.eta_d = value(key, v)?,
        "eta_o" => cfg.eta_o = value(key, v)?,
        "learning_rate" => cfg.adam.lr = value(key, v)?,
        "beta1" => cfg.adam.beta1 = value(key, v)?,
        "beta2" => cfg.adam.beta2 = value(key, v)?,
        "adam_eps" => cfg.adam.eps = value(key, v)?,
        "seed" => cfg.seed = value(key, v)?,
        "radius_km" => cfg.radius_km = Some(value(key, v)?),
        "epsilon" => cfg.epsilon = value(key, v)?,
        "leaky_slope" => cfg.leaky_slope = value(key, v)?,
        "temporal_mean" => cfg.temporal_mean = value(key, v)?,
        "node_embed_dim" => cfg.node_embed_dim = value(key, v)?,
        "slot_embed_dim" => cfg.slot_embed_dim = value(key, v)?,
        "dow_embed_dim" => cfg.dow_embed_dim = value(key, v)?,
        "test_days" => cfg.test_days = value(key, v)?,
        "val_fraction" => cfg.val_fraction = value(key, v)?,
        _ => return Err(Error::usage(format!("unknown config key {key:?}"))),
    }
    Ok(())
}
