//! Plain-text `key = value` configuration with dotted keys.
//!
//! Resolution order: dataset preset, then the config file, then command-line
//! overrides. `dataset` and `recon` select the preset and may come from either
//! source. Unknown keys are rejected. [`to_text`] renders every key, so the
//! snapshot it produces can be fed back in unchanged.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::Source;
use crate::error::{Error, Result};
use crate::model::{Activation, ModelConfig};
use crate::routing::RoutingMode;
use crate::train::{OptimizerKind, TrainConfig};

/// Ordered `(key, value)` pairs as written by the user.
pub type Pairs = Vec<(String, String)>;

pub fn parse_pairs(text: &str, origin: &str) -> Result<Pairs> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "{origin}:{}: expected key = value, got `{line}`",
                n + 1
            ))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("{origin}:{}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn read_pairs(path: &Path) -> Result<Pairs> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(&text, &path.display().to_string())
}

/// `--key=value` (or `key=value`) command-line overrides.
pub fn parse_overrides(args: &[String]) -> Result<Pairs> {
    args.iter()
        .map(|a| {
            let body = a.strip_prefix("--").unwrap_or(a);
            body.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("override `{a}` must look like --key=value")))
        })
        .collect()
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid value `{value}` for {key}; expected on/off"
        ))),
    }
}

fn parse_limit(key: &str, value: &str) -> Result<Option<usize>> {
    if value.eq_ignore_ascii_case("all") {
        return Ok(None);
    }
    parse(key, value).map(Some)
}

/// Defaults for a dataset, with or without the reconstruction decoder.
pub fn preset(dataset: Source, recon: bool) -> TrainConfig {
    let base = TrainConfig {
        dataset,
        model: ModelConfig {
            recon,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    match dataset {
        Source::Mnist if !recon => TrainConfig {
            batch_size: 32,
            lr_decay: 0.5,
            ..base
        },
        Source::Mnist | Source::Fashion => TrainConfig {
            batch_size: 128,
            ..base
        },
        Source::Cifar10 => TrainConfig {
            batch_size: 128,
            model: ModelConfig {
                in_channels: 3,
                height: 32,
                width: 32,
                primary_types: 64,
                activation: Activation::LeakyRelu,
                ..base.model
            },
            ..base
        },
        Source::MultiMnist => TrainConfig {
            batch_size: 128,
            lr_interval: 20_000,
            model: ModelConfig {
                height: 36,
                width: 36,
                ..base.model
            },
            ..base
        },
    }
}

fn lookup<'a>(pairs: &'a [(String, String)], key: &str) -> Option<&'a str> {
    pairs
        .iter()
        .rev()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
}

/// Builds a config from the preset selected by `dataset`/`recon`, then applies
/// every pair in order (later pairs win).
pub fn resolve(pairs: &[(String, String)]) -> Result<TrainConfig> {
    let dataset = match lookup(pairs, "dataset") {
        Some(v) => v.parse()?,
        None => Source::Mnist,
    };
    let recon = match lookup(pairs, "recon") {
        Some(v) => parse_bool("recon", v)?,
        None => true,
    };
    let mut cfg = preset(dataset, recon);
    for (k, v) in pairs {
        apply(&mut cfg, k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn apply(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    let v = value;
    match key {
        "dataset" => cfg.dataset = v.parse()?,
        "recon" => cfg.model.recon = parse_bool(key, v)?,
        "recon_weight" => cfg.recon_weight = parse(key, v)?,
        "seed" => cfg.seed = parse(key, v)?,
        "deterministic" => cfg.deterministic = parse_bool(key, v)?,

        "train.batch_size" => cfg.batch_size = parse(key, v)?,
        "train.w_steps" => cfg.w_steps = parse(key, v)?,
        "train.iterations" => cfg.iterations = parse(key, v)?,
        "train.lr" => cfg.lr = parse(key, v)?,
        "train.lr_decay" => cfg.lr_decay = parse(key, v)?,
        "train.lr_interval" => cfg.lr_interval = parse(key, v)?,
        "train.optimizer" => {
            cfg.optimizer = match v.to_ascii_lowercase().as_str() {
                "sgd" => OptimizerKind::Sgd,
                "adam" => OptimizerKind::Adam,
                _ => {
                    return Err(Error::Config(format!(
                        "invalid train.optimizer `{v}`; valid: sgd|adam"
                    )))
                }
            }
        }
        "train.eval_interval" => cfg.eval_interval = parse(key, v)?,
        "train.eval_batch" => cfg.eval_batch = parse(key, v)?,
        "train.checkpoint_interval" => cfg.checkpoint_interval = parse(key, v)?,

        "data.train_limit" => cfg.train_limit = parse_limit(key, v)?,
        "data.test_limit" => cfg.test_limit = parse_limit(key, v)?,
        "data.multi_train" => cfg.multi_train = parse(key, v)?,
        "data.multi_test" => cfg.multi_test = parse(key, v)?,

        "routing.mode" => cfg.routing.mode = v.parse::<RoutingMode>()?,
        "routing.lambda" => cfg.routing.lambda = parse(key, v)?,
        "routing.gamma" => cfg.routing.gamma = parse(key, v)?,
        "routing.steps" => cfg.routing.steps = parse(key, v)?,
        "routing.dynamic_iters" => cfg.routing.dynamic_iters = parse(key, v)?,

        "margin.m_plus" => cfg.margin.m_plus = parse(key, v)?,
        "margin.m_minus" => cfg.margin.m_minus = parse(key, v)?,
        "margin.lambda_prime" => cfg.margin.lambda_prime = parse(key, v)?,

        "model.conv1_channels" => cfg.model.conv1_channels = parse(key, v)?,
        "model.kernel" => cfg.model.kernel = parse(key, v)?,
        "model.primary_stride" => cfg.model.primary_stride = parse(key, v)?,
        "model.primary_types" => cfg.model.primary_types = parse(key, v)?,
        "model.primary_dim" => cfg.model.primary_dim = parse(key, v)?,
        "model.output_dim" => cfg.model.output_dim = parse(key, v)?,
        "model.activation" => {
            cfg.model.activation = match v.to_ascii_lowercase().as_str() {
                "relu" => Activation::Relu,
                "leaky_relu" | "leakyrelu" => Activation::LeakyRelu,
                _ => {
                    return Err(Error::Config(format!(
                        "invalid model.activation `{v}`; valid: relu|leaky_relu"
                    )))
                }
            }
        }
        "model.recon_hidden1" => cfg.model.recon_hidden[0] = parse(key, v)?,
        "model.recon_hidden2" => cfg.model.recon_hidden[1] = parse(key, v)?,
        _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
    }
    Ok(())
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn limit(l: Option<usize>) -> String {
    l.map_or_else(|| "all".to_string(), |n| n.to_string())
}

/// Every key with its resolved value, one per line.
pub fn to_text(cfg: &TrainConfig) -> String {
    let m = &cfg.model;
    let r = &cfg.routing;
    let lines = [
        ("dataset", cfg.dataset.to_string()),
        ("recon", on_off(m.recon).to_string()),
        ("recon_weight", cfg.recon_weight.to_string()),
        ("seed", cfg.seed.to_string()),
        ("deterministic", on_off(cfg.deterministic).to_string()),
        ("train.batch_size", cfg.batch_size.to_string()),
        ("train.w_steps", cfg.w_steps.to_string()),
        ("train.iterations", cfg.iterations.to_string()),
        ("train.lr", cfg.lr.to_string()),
        ("train.lr_decay", cfg.lr_decay.to_string()),
        ("train.lr_interval", cfg.lr_interval.to_string()),
        (
            "train.optimizer",
            match cfg.optimizer {
                OptimizerKind::Sgd => "sgd",
                OptimizerKind::Adam => "adam",
            }
            .to_string(),
        ),
        ("train.eval_interval", cfg.eval_interval.to_string()),
        ("train.eval_batch", cfg.eval_batch.to_string()),
        (
            "train.checkpoint_interval",
            cfg.checkpoint_interval.to_string(),
        ),
        ("data.train_limit", limit(cfg.train_limit)),
        ("data.test_limit", limit(cfg.test_limit)),
        ("data.multi_train", cfg.multi_train.to_string()),
        ("data.multi_test", cfg.multi_test.to_string()),
        ("routing.mode", r.mode.to_string()),
        ("routing.lambda", r.lambda.to_string()),
        ("routing.gamma", r.gamma.to_string()),
        ("routing.steps", r.steps.to_string()),
        ("routing.dynamic_iters", r.dynamic_iters.to_string()),
        ("margin.m_plus", cfg.margin.m_plus.to_string()),
        ("margin.m_minus", cfg.margin.m_minus.to_string()),
        ("margin.lambda_prime", cfg.margin.lambda_prime.to_string()),
        ("model.conv1_channels", m.conv1_channels.to_string()),
        ("model.kernel", m.kernel.to_string()),
        ("model.primary_stride", m.primary_stride.to_string()),
        ("model.primary_types", m.primary_types.to_string()),
        ("model.primary_dim", m.primary_dim.to_string()),
        ("model.output_dim", m.output_dim.to_string()),
        (
            "model.activation",
            match m.activation {
                Activation::Relu => "relu",
                Activation::LeakyRelu => "leaky_relu",
            }
            .to_string(),
        ),
        ("model.recon_hidden1", m.recon_hidden[0].to_string()),
        ("model.recon_hidden2", m.recon_hidden[1].to_string()),
    ];
    lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}
