//! Config files and run manifests for the `magnet-da` binary.
//!
//! Config files are line-oriented `key = value` UTF-8 text with `#` comments.
//! Keys are the flat field names of [`TrainConfig`] and [`NetworkConfig`];
//! command-line flags override file values. A run manifest is written in the
//! same format before training starts and rewritten with results when the
//! run completes, and contains everything needed to reproduce the run.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{MagnetError, Result};
use crate::losses::KernelSpec;
use crate::network::{NetworkConfig, TransitionType};
use crate::train::{RunResult, TapMode, TrainConfig};

/// Parse `key = value` lines; `#` starts a comment, blank lines are ignored.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut entries = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(MagnetError::Config(format!(
                "line {}: expected `key = value`, got {raw:?}",
                lineno + 1
            )));
        };
        entries.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(entries)
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| MagnetError::Config(format!("invalid value {value:?} for key {key:?}")))
}

fn parse_kernel(value: &str) -> Result<KernelSpec> {
    match value {
        "median" => Ok(KernelSpec::MedianHeuristic),
        "median-ladder" => Ok(KernelSpec::MedianLadder),
        other => {
            let sigmas: Result<Vec<f64>> = other
                .split(',')
                .map(|s| parse_num::<f64>("kernel", s.trim()))
                .collect();
            KernelSpec::explicit(sigmas?)
        }
    }
}

fn kernel_to_string(kernel: &KernelSpec) -> String {
    match kernel {
        KernelSpec::MedianHeuristic => "median".to_string(),
        KernelSpec::MedianLadder => "median-ladder".to_string(),
        KernelSpec::Explicit { bandwidths, .. } => bandwidths
            .iter()
            .map(|b| format!("{b:?}"))
            .collect::<Vec<_>>()
            .join(","),
    }
}

/// Apply config entries to a training and a network config in place.
/// Unknown keys are rejected.
pub fn apply_overrides(
    train: &mut TrainConfig,
    network: &mut NetworkConfig,
    entries: &[(String, String)],
) -> Result<()> {
    for (key, value) in entries {
        match key.as_str() {
            "base_lr" => train.base_lr = parse_num(key, value)?,
            "momentum" => train.momentum = parse_num(key, value)?,
            "anneal_alpha" => train.anneal_alpha = parse_num(key, value)?,
            "anneal_beta" => train.anneal_beta = parse_num(key, value)?,
            "iterations" => train.iterations = parse_num(key, value)?,
            "batch_size" => train.batch_size = parse_num(key, value)?,
            "lambda_mmd" => train.lambda_mmd = parse_num(key, value)?,
            "gamma_entropy" => train.gamma_entropy = parse_num(key, value)?,
            "seed" => train.seed = parse_num(key, value)?,
            "repetitions" => train.repetitions = parse_num(key, value)?,
            "weight_decay" => train.weight_decay = parse_num(key, value)?,
            "kernel" => train.kernel = parse_kernel(value)?,
            "tap_mode" => {
                train.tap_mode = match value.as_str() {
                    "all" => TapMode::All,
                    "final" => TapMode::FinalOnly,
                    other => {
                        return Err(MagnetError::Config(format!(
                            "invalid tap_mode {other:?} (expected all or final)"
                        )))
                    }
                }
            }
            "log_stride" => train.log_stride = parse_num(key, value)?,
            "eval_stride" => train.eval_stride = parse_num(key, value)?,
            "stat_refresh_batches" => train.stat_refresh_batches = parse_num(key, value)?,
            "adaptation_ramp" => {
                train.adaptation_ramp = match value.as_str() {
                    "true" | "1" | "on" => true,
                    "false" | "0" | "off" => false,
                    other => {
                        return Err(MagnetError::Config(format!(
                            "invalid adaptation_ramp {other:?} (expected true or false)"
                        )))
                    }
                }
            }
            "input_channels" => network.input_channels = parse_num(key, value)?,
            "input_size" => network.input_size = parse_num(key, value)?,
            "num_classes" => network.num_classes = parse_num(key, value)?,
            "num_blocks" => network.num_blocks = parse_num(key, value)?,
            "layers_per_block" => network.layers_per_block = parse_num(key, value)?,
            "growth_rate" => network.growth_rate = parse_num(key, value)?,
            "stem_channels" => network.stem_channels = parse_num(key, value)?,
            "transition_type" => {
                network.transition_type = match value.as_str() {
                    "A" | "a" => TransitionType::A,
                    "B" | "b" => TransitionType::B,
                    other => {
                        return Err(MagnetError::Config(format!(
                            "invalid transition_type {other:?} (expected A or B)"
                        )))
                    }
                }
            }
            "transition_compression" => network.transition_compression = parse_num(key, value)?,
            "tap_fc_dim" => network.tap_fc_dim = parse_num(key, value)?,
            "residual_hidden" => network.residual_hidden = parse_num(key, value)?,
            other => {
                return Err(MagnetError::Config(format!(
                    "unknown config key {other:?}"
                )))
            }
        }
    }
    Ok(())
}

/// Full `key = value` snapshot of both configs (manifest `config.*` section).
pub fn config_snapshot(train: &TrainConfig, network: &NetworkConfig) -> Vec<(String, String)> {
    let tt = match network.transition_type {
        TransitionType::A => "A",
        TransitionType::B => "B",
    };
    let tm = match train.tap_mode {
        TapMode::All => "all",
        TapMode::FinalOnly => "final",
    };
    vec![
        ("base_lr".into(), format!("{:?}", train.base_lr)),
        ("momentum".into(), format!("{:?}", train.momentum)),
        ("anneal_alpha".into(), format!("{:?}", train.anneal_alpha)),
        ("anneal_beta".into(), format!("{:?}", train.anneal_beta)),
        ("iterations".into(), train.iterations.to_string()),
        ("batch_size".into(), train.batch_size.to_string()),
        ("lambda_mmd".into(), format!("{:?}", train.lambda_mmd)),
        ("gamma_entropy".into(), format!("{:?}", train.gamma_entropy)),
        ("seed".into(), train.seed.to_string()),
        ("repetitions".into(), train.repetitions.to_string()),
        ("weight_decay".into(), format!("{:?}", train.weight_decay)),
        ("kernel".into(), kernel_to_string(&train.kernel)),
        ("tap_mode".into(), tm.into()),
        ("log_stride".into(), train.log_stride.to_string()),
        ("eval_stride".into(), train.eval_stride.to_string()),
        (
            "stat_refresh_batches".into(),
            train.stat_refresh_batches.to_string(),
        ),
        ("adaptation_ramp".into(), train.adaptation_ramp.to_string()),
        ("input_channels".into(), network.input_channels.to_string()),
        ("input_size".into(), network.input_size.to_string()),
        ("num_classes".into(), network.num_classes.to_string()),
        ("num_blocks".into(), network.num_blocks.to_string()),
        (
            "layers_per_block".into(),
            network.layers_per_block.to_string(),
        ),
        ("growth_rate".into(), network.growth_rate.to_string()),
        ("stem_channels".into(), network.stem_channels.to_string()),
        ("transition_type".into(), tt.into()),
        (
            "transition_compression".into(),
            format!("{:?}", network.transition_compression),
        ),
        ("tap_fc_dim".into(), network.tap_fc_dim.to_string()),
        (
            "residual_hidden".into(),
            network.residual_hidden.to_string(),
        ),
    ]
}

/// Reproducibility record for one run.
#[derive(Clone, Debug, Default)]
pub struct RunManifest {
    pub entries: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(
        command_line: &str,
        train: &TrainConfig,
        network: &NetworkConfig,
        inputs: &[(&str, &str)],
        out_dir: &str,
    ) -> Self {
        let mut entries = BTreeMap::new();
        entries.insert("command".into(), command_line.to_string());
        entries.insert("version".into(), env!("CARGO_PKG_VERSION").to_string());
        entries.insert("status".into(), "running".into());
        entries.insert("out".into(), out_dir.to_string());
        entries.insert("seed".into(), train.seed.to_string());
        entries.insert("started_unix".into(), unix_now().to_string());
        for (k, v) in inputs {
            entries.insert(format!("input.{k}"), v.to_string());
        }
        for (k, v) in config_snapshot(train, network) {
            entries.insert(format!("config.{k}"), v);
        }
        RunManifest { entries }
    }

    /// Record results; accuracies keep full `f64` precision so later
    /// evaluations can be compared exactly.
    pub fn complete(&mut self, result: &RunResult) {
        self.entries.insert("status".into(), "complete".into());
        self.entries
            .insert("finished_unix".into(), unix_now().to_string());
        self.entries
            .insert("source_acc".into(), format!("{:?}", result.source_acc));
        self.entries.insert(
            "target_acc".into(),
            format!("{:?}", result.final_target_acc),
        );
        self.entries.insert(
            "best_target_acc".into(),
            format!("{:?}", result.best_target_acc),
        );
        self.entries
            .insert("wall_s".into(), format!("{:?}", result.wall_s));
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (k, v) in parse_config_text(text)? {
            entries.insert(k, v);
        }
        Ok(RunManifest { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
