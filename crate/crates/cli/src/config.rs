//! Flat `key = value` training configuration files.
//!
//! Keys are the [`TrainConfig`] field names; the ADAM constants are spelled
//! `adam_beta1`, `adam_beta2` and `adam_eps`. Blank lines and lines starting
//! with `#` are ignored.

use std::fmt::Write as _;

use anyhow::{bail, Context, Result};
use icfsr::parallel::Execution;
use icfsr::train::{Precision, TrainConfig};

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow::anyhow!("{key}: cannot parse {value:?}: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("{key}: expected true or false, got {value:?}"),
    }
}

pub fn parse_scales(value: &str) -> Result<Vec<u32>> {
    value
        .split(',')
        .map(|s| parse::<u32>("scale_set", s.trim()))
        .collect()
}

/// Applies one `key = value` assignment.
pub fn set(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "patch_size" => cfg.patch_size = parse(key, value)?,
        "batch_size" => cfg.batch_size = parse(key, value)?,
        "lambda_color" => cfg.lambda_color = parse(key, value)?,
        "lr_init" => cfg.lr_init = parse(key, value)?,
        "lr_decay_factor" => cfg.lr_decay_factor = parse(key, value)?,
        "lr_decay_every" => cfg.lr_decay_every = parse(key, value)?,
        "adam_beta1" => cfg.adam.beta1 = parse(key, value)?,
        "adam_beta2" => cfg.adam.beta2 = parse(key, value)?,
        "adam_eps" => cfg.adam.eps = parse(key, value)?,
        "epochs" => cfg.epochs = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        "scale_set" => cfg.scale_set = parse_scales(value)?,
        "multiscale" => cfg.multiscale = parse_bool(key, value)?,
        "steps_per_epoch" => {
            cfg.steps_per_epoch = match value {
                "auto" => None,
                v => Some(parse(key, v)?),
            }
        }
        "precision" => {
            cfg.precision = match value {
                "32" => Precision::F32,
                "64" => Precision::F64,
                _ => bail!("precision: expected 32 or 64, got {value:?}"),
            }
        }
        "n_resblocks" => cfg.n_resblocks = parse(key, value)?,
        "n_channels" => cfg.n_channels = parse(key, value)?,
        "residual_scaling" => cfg.residual_scaling = parse(key, value)?,
        "deterministic" => cfg.deterministic = parse_bool(key, value)?,
        "execution" => {
            cfg.execution = match value {
                "sequential" => Execution::Sequential,
                "parallel" => Execution::Parallel,
                _ => bail!("execution: expected sequential or parallel, got {value:?}"),
            }
        }
        _ => bail!("unknown configuration key {key:?}"),
    }
    Ok(())
}

/// Applies every assignment of a configuration file to `cfg`.
pub fn apply(cfg: &mut TrainConfig, text: &str) -> Result<()> {
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .with_context(|| format!("line {}: expected key = value", n + 1))?;
        set(cfg, key.trim(), value.trim()).with_context(|| format!("line {}", n + 1))?;
    }
    Ok(())
}

/// Renders `cfg` in the same format; `apply` on the output reproduces it.
pub fn render(cfg: &TrainConfig) -> String {
    let mut out = String::new();
    let scales: Vec<String> = cfg.scale_set.iter().map(u32::to_string).collect();
    let steps = cfg
        .steps_per_epoch
        .map_or_else(|| "auto".to_string(), |n| n.to_string());
    let precision = match cfg.precision {
        Precision::F32 => 32,
        Precision::F64 => 64,
    };
    let execution = match cfg.execution {
        Execution::Sequential => "sequential",
        Execution::Parallel => "parallel",
    };
    let rows: [(&str, String); 20] = [
        ("patch_size", cfg.patch_size.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("lambda_color", cfg.lambda_color.to_string()),
        ("lr_init", cfg.lr_init.to_string()),
        ("lr_decay_factor", cfg.lr_decay_factor.to_string()),
        ("lr_decay_every", cfg.lr_decay_every.to_string()),
        ("adam_beta1", cfg.adam.beta1.to_string()),
        ("adam_beta2", cfg.adam.beta2.to_string()),
        ("adam_eps", cfg.adam.eps.to_string()),
        ("epochs", cfg.epochs.to_string()),
        ("seed", cfg.seed.to_string()),
        ("scale_set", scales.join(",")),
        ("multiscale", cfg.multiscale.to_string()),
        ("steps_per_epoch", steps),
        ("precision", precision.to_string()),
        ("n_resblocks", cfg.n_resblocks.to_string()),
        ("n_channels", cfg.n_channels.to_string()),
        ("residual_scaling", cfg.residual_scaling.to_string()),
        ("deterministic", cfg.deterministic.to_string()),
        ("execution", execution.to_string()),
    ];
    for (k, v) in rows {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}
