//! Experiment configuration as flat dotted keys (`nir.omega = 0.005`).
//!
//! Sources are layered defaults < config file < command-line overrides.
//! Unknown keys are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{NirError, Result};
use crate::flow::ConditioningPlacement;
use crate::losses::ProxyLossKind;
use crate::nir::{Scaling, SelfRegMode};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub data_train: Option<PathBuf>,
    pub data_test: Option<PathBuf>,
    pub eval_ks: Vec<usize>,
    pub nmi_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data_train: None,
            data_test: None,
            eval_ks: vec![1, 2, 4, 8],
            nmi_seed: 0,
        }
    }
}

/// Every accepted key, in the order they are listed in resolved configs.
pub const KEYS: &[&str] = &[
    "seed",
    "data.train",
    "data.test",
    "train.epochs",
    "train.classes_per_batch",
    "train.samples_per_class",
    "train.warmup_epochs",
    "train.eval_every_epoch",
    "optim.lr",
    "optim.beta1",
    "optim.beta2",
    "optim.eps",
    "optim.weight_decay",
    "optim.decay_all",
    "optim.lr_mult_embedder",
    "optim.lr_mult_proxies",
    "optim.lr_mult_flow",
    "model.embed_dim",
    "model.hidden",
    "flow.depth",
    "flow.width",
    "flow.placement",
    "flow.clamp",
    "loss.kind",
    "loss.alpha",
    "loss.delta",
    "nir.enabled",
    "nir.omega",
    "nir.scaling",
    "nir.temperature",
    "nir.exponent_clamp",
    "nir.proxy_backprop",
    "nir.negative_pairs",
    "nir.grad_clip",
    "nir.self_reg",
    "eval.ks",
    "eval.nmi_seed",
];

/// Short command-line spellings of common keys.
pub const ALIASES: &[(&str, &str)] = &[
    ("loss", "loss.kind"),
    ("nir", "nir.enabled"),
    ("omega", "nir.omega"),
    ("scaling", "nir.scaling"),
    ("temperature", "nir.temperature"),
    ("placement", "flow.placement"),
    ("depth", "flow.depth"),
    ("width", "flow.width"),
    ("warmup", "train.warmup_epochs"),
    ("epochs", "train.epochs"),
    ("proxy-backprop", "nir.proxy_backprop"),
    ("negative-pairs", "nir.negative_pairs"),
    ("grad-clip", "nir.grad_clip"),
    ("self-reg", "nir.self_reg"),
    ("lr", "optim.lr"),
];

pub fn canonical_key(key: &str) -> Result<&'static str> {
    if let Some(k) = KEYS.iter().find(|k| **k == key) {
        return Ok(k);
    }
    ALIASES
        .iter()
        .find(|(a, _)| *a == key)
        .map(|(_, k)| *k)
        .ok_or_else(|| NirError::UnknownKey(key.to_string()))
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| NirError::InvalidConfig(format!("{key}: cannot parse '{value}': {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        other => Err(NirError::InvalidConfig(format!("{key}: expected on/off, got '{other}'"))),
    }
}

/// A weight of 0 (or `off`) disables an optional term.
fn parse_optional(key: &str, value: &str) -> Result<Option<f64>> {
    if value.trim() == "off" {
        return Ok(None);
    }
    let v: f64 = parse(key, value)?;
    Ok((v != 0.0).then_some(v))
}

fn with_key<T>(key: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        NirError::InvalidConfig(m) if !m.starts_with(key) => NirError::InvalidConfig(format!("{key}: {m}")),
        other => other,
    })
}

impl ExperimentConfig {
    /// Sets one key (canonical or alias) from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = canonical_key(key)?;
        let t = &mut self.train;
        match key {
            "seed" => t.seed = parse(key, value)?,
            "data.train" => self.data_train = Some(PathBuf::from(value)),
            "data.test" => self.data_test = Some(PathBuf::from(value)),
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.classes_per_batch" => t.classes_per_batch = parse(key, value)?,
            "train.samples_per_class" => t.samples_per_class = parse(key, value)?,
            "train.warmup_epochs" => t.warmup_epochs = parse(key, value)?,
            "train.eval_every_epoch" => t.eval_every_epoch = parse_bool(key, value)?,
            "optim.lr" => t.adam.lr = parse(key, value)?,
            "optim.beta1" => t.adam.beta1 = parse(key, value)?,
            "optim.beta2" => t.adam.beta2 = parse(key, value)?,
            "optim.eps" => t.adam.eps = parse(key, value)?,
            "optim.weight_decay" => t.adam.weight_decay = parse(key, value)?,
            "optim.decay_all" => t.adam.decay_all = parse_bool(key, value)?,
            "optim.lr_mult_embedder" => t.adam.multipliers[0] = parse(key, value)?,
            "optim.lr_mult_proxies" => t.adam.multipliers[1] = parse(key, value)?,
            "optim.lr_mult_flow" => t.adam.multipliers[2] = parse(key, value)?,
            "model.embed_dim" => t.model.embed_dim = parse(key, value)?,
            "model.hidden" => t.model.hidden = parse(key, value)?,
            "flow.depth" => t.model.flow_depth = parse(key, value)?,
            "flow.width" => t.model.flow_width = parse(key, value)?,
            "flow.placement" => t.model.placement = with_key(key, value.trim().parse::<ConditioningPlacement>())?,
            "flow.clamp" => t.model.clamp_scale = parse(key, value)?,
            "loss.kind" => t.loss.kind = with_key(key, value.trim().parse::<ProxyLossKind>())?,
            "loss.alpha" => t.loss.params.alpha = parse(key, value)?,
            "loss.delta" => t.loss.params.delta = parse(key, value)?,
            "nir.enabled" => t.nir_enabled = parse_bool(key, value)?,
            "nir.omega" => t.nir.omega = parse(key, value)?,
            "nir.scaling" => {
                t.nir.scaling = match value.trim() {
                    "exp" => Scaling::Exp,
                    "softplus" => Scaling::Softplus,
                    "exp_temperature" => Scaling::ExpTemperature(match t.nir.scaling {
                        Scaling::ExpTemperature(v) => v,
                        _ => 1.0,
                    }),
                    other => {
                        return Err(NirError::InvalidConfig(format!(
                            "{key}: expected exp, exp_temperature or softplus, got '{other}'"
                        )))
                    }
                }
            }
            "nir.temperature" => {
                let v: f64 = parse(key, value)?;
                if !(v > 0.0) {
                    return Err(NirError::InvalidConfig(format!("{key}: must be positive")));
                }
                t.nir.scaling = Scaling::ExpTemperature(v);
            }
            "nir.exponent_clamp" => t.nir.exponent_clamp = parse(key, value)?,
            "nir.proxy_backprop" => t.nir.proxy_backprop = parse_bool(key, value)?,
            "nir.negative_pairs" => t.nir.negative_pairs = parse_optional(key, value)?,
            "nir.grad_clip" => t.nir.grad_clip = parse_optional(key, value)?,
            "nir.self_reg" => t.self_reg = with_key(key, value.trim().parse::<SelfRegMode>())?,
            "eval.ks" => {
                self.eval_ks = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?;
                if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
                    return Err(NirError::InvalidConfig(format!("{key}: need positive K values")));
                }
            }
            "eval.nmi_seed" => self.nmi_seed = parse(key, value)?,
            _ => unreachable!("every canonical key is handled"),
        }
        Ok(())
    }

    /// Textual value of a canonical key.
    pub fn get(&self, key: &str) -> Result<String> {
        let key = canonical_key(key)?;
        let t = &self.train;
        let opt = |v: Option<f64>| v.map_or("off".to_string(), |v| v.to_string());
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        Ok(match key {
            "seed" => t.seed.to_string(),
            "data.train" => path(&self.data_train),
            "data.test" => path(&self.data_test),
            "train.epochs" => t.epochs.to_string(),
            "train.classes_per_batch" => t.classes_per_batch.to_string(),
            "train.samples_per_class" => t.samples_per_class.to_string(),
            "train.warmup_epochs" => t.warmup_epochs.to_string(),
            "train.eval_every_epoch" => t.eval_every_epoch.to_string(),
            "optim.lr" => t.adam.lr.to_string(),
            "optim.beta1" => t.adam.beta1.to_string(),
            "optim.beta2" => t.adam.beta2.to_string(),
            "optim.eps" => t.adam.eps.to_string(),
            "optim.weight_decay" => t.adam.weight_decay.to_string(),
            "optim.decay_all" => t.adam.decay_all.to_string(),
            "optim.lr_mult_embedder" => t.adam.multipliers[0].to_string(),
            "optim.lr_mult_proxies" => t.adam.multipliers[1].to_string(),
            "optim.lr_mult_flow" => t.adam.multipliers[2].to_string(),
            "model.embed_dim" => t.model.embed_dim.to_string(),
            "model.hidden" => t.model.hidden.to_string(),
            "flow.depth" => t.model.flow_depth.to_string(),
            "flow.width" => t.model.flow_width.to_string(),
            "flow.placement" => t.model.placement.to_string(),
            "flow.clamp" => t.model.clamp_scale.to_string(),
            "loss.kind" => t.loss.kind.to_string(),
            "loss.alpha" => t.loss.params.alpha.to_string(),
            "loss.delta" => t.loss.params.delta.to_string(),
            "nir.enabled" => t.nir_enabled.to_string(),
            "nir.omega" => t.nir.omega.to_string(),
            "nir.scaling" => t.nir.scaling.name().to_string(),
            "nir.temperature" => match t.nir.scaling {
                Scaling::ExpTemperature(v) => v.to_string(),
                _ => "1".to_string(),
            },
            "nir.exponent_clamp" => t.nir.exponent_clamp.to_string(),
            "nir.proxy_backprop" => t.nir.proxy_backprop.to_string(),
            "nir.negative_pairs" => opt(t.nir.negative_pairs),
            "nir.grad_clip" => opt(t.nir.grad_clip),
            "nir.self_reg" => t.self_reg.as_str().to_string(),
            "eval.ks" => self.eval_ks.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            "eval.nmi_seed" => self.nmi_seed.to_string(),
            _ => unreachable!("every canonical key is handled"),
        })
    }

    /// Fully resolved configuration, one entry per key.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        KEYS.iter()
            .map(|k| (k.to_string(), self.get(k).expect("canonical key")))
            .filter(|(k, v)| !(k.starts_with("data.") && v.is_empty()))
            .collect()
    }

    /// Applies entries in key order, except that `nir.scaling` goes before
    /// `nir.temperature` so a resolved map round-trips.
    pub fn apply_map<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let mut entries: Vec<(&str, &str)> = entries.into_iter().collect();
        entries.sort_by_key(|(k, _)| *k == "nir.temperature");
        let scaling = entries.iter().find(|(k, _)| *k == "nir.scaling").map(|(_, v)| *v);
        for (k, v) in entries {
            if k == "nir.temperature" && scaling.is_some_and(|s| s.trim() != "exp_temperature") {
                continue;
            }
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_map(map.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        Ok(cfg)
    }

    /// Parses TOML text; nested tables and dotted keys are flattened.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_map(flatten_toml(text)?.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        Ok(cfg)
    }

    /// Loads a config file; relative data paths resolve against its folder.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data_train, &mut cfg.data_test].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// `[--key value]...` pairs; keys may be canonical or aliases.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        let mut it = args.iter();
        while let Some(flag) = it.next() {
            let key = flag
                .strip_prefix("--")
                .ok_or_else(|| NirError::InvalidConfig(format!("expected --key, got '{flag}'")))?;
            let (key, value) = match key.split_once('=') {
                Some((k, v)) => (k, v.to_string()),
                None => {
                    let v = it.next().ok_or_else(|| NirError::InvalidConfig(format!("--{key} needs a value")))?;
                    (key, v.clone())
                }
            };
            self.set(key, &value)?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_map() {
            let quoted = toml::Value::String(v).to_string();
            out.push_str(&format!("{k} = {quoted}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()
    }
}

/// Flattens TOML into dotted key -> textual value. Arrays become
/// comma-separated lists.
pub fn flatten_toml(text: &str) -> Result<BTreeMap<String, String>> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| NirError::Format(e.to_string()))?;
    let mut out = BTreeMap::new();
    flatten_into("", &toml::Value::Table(table), &mut out)?;
    Ok(out)
}

pub(crate) fn scalar(key: &str, v: &toml::Value) -> Result<String> {
    Ok(match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        toml::Value::Array(items) => items.iter().map(|i| scalar(key, i)).collect::<Result<Vec<_>>>()?.join(","),
        other => {
            return Err(NirError::InvalidConfig(format!("{key}: unsupported value {other}")));
        }
    })
}

fn flatten_into(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, String>) -> Result<()> {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, v, out)?;
            }
        }
        other => {
            out.insert(prefix.to_string(), scalar(prefix, other)?);
        }
    }
    Ok(())
}
