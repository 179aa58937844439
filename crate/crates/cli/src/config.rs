//! Flat experiment configuration: defaults, then a TOML file, then flags.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cce_core::cascade::StageSetup;
use cce_core::masking::{MaskStrategy, RandomBlocks};
use cce_core::metric::EvalProtocol;
use cce_core::nn::TrainConfig;
use serde::{Deserialize, Serialize};

/// Default output root when neither `--out` nor `out_dir` is given.
pub const OUTPUT_ROOT_ENV: &str = "CCE_OUTPUT_ROOT";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

/// A configuration problem; reported with exit status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Output directory; empty means `$CCE_OUTPUT_ROOT/<command>`.
    pub out_dir: String,
    /// Dataset directory written by `gen-data`; empty means generate the
    /// synthetic dataset in memory.
    pub data_dir: String,
    pub synth_train: usize,
    pub synth_val: usize,
    /// Full (stage-2) resolution; stage 1 runs at half.
    pub image_size: usize,
    pub data_seed: u64,

    /// Training masks: `central` or `random_blocks`.
    pub mask: String,
    pub mask_fraction: f64,
    pub block_coverage: f64,
    /// Block side limits; 0 picks `size/8` and `3·size/8`.
    pub block_min_side: usize,
    pub block_max_side: usize,
    pub block_max_count: usize,

    pub channels: Vec<usize>,
    pub disc_channels: Vec<usize>,

    pub lambda_rec: f64,
    pub lambda_adv: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub train_seed: u64,
    pub adversarial: bool,

    /// `n`, masks per image.
    pub eval_masks: usize,
    /// `k`, images.
    pub eval_images: usize,
    pub eval_seed: u64,
    /// Evaluation masks: `central` or `random_blocks`.
    pub eval_mask: String,
    pub standardize: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            out_dir: String::new(),
            data_dir: String::new(),
            synth_train: 512,
            synth_val: 64,
            image_size: 32,
            data_seed: 1,
            mask: "central".into(),
            mask_fraction: 0.25,
            block_coverage: 0.25,
            block_min_side: 0,
            block_max_side: 0,
            block_max_count: 16,
            channels: vec![8, 16, 32],
            disc_channels: vec![8, 16],
            lambda_rec: train.lambda_rec,
            lambda_adv: train.lambda_adv,
            learning_rate: train.learning_rate,
            batch_size: train.batch_size,
            epochs: train.epochs,
            train_seed: train.seed,
            adversarial: train.adversarial_enabled,
            eval_masks: cce_core::metric::DEFAULT_MASKS_PER_IMAGE,
            eval_images: cce_core::metric::DEFAULT_IMAGES,
            eval_seed: 7,
            eval_mask: "random_blocks".into(),
            standardize: false,
        }
    }
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

impl ExperimentConfig {
    /// Defaults, overlaid by `file`, overlaid by `key=value` overrides.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match file {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                text.parse::<toml::Table>()
                    .map_err(|e| usage(format!("config {}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            table.insert(k.clone(), parse_value(v));
        }
        let mut cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e| usage(format!("invalid configuration: {e}")))?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self) {
        let auto = RandomBlocks::for_size(self.image_size, self.image_size);
        if self.block_min_side == 0 {
            self.block_min_side = auto.min_side;
        }
        if self.block_max_side == 0 {
            self.block_max_side = auto.max_side;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 4 || !self.image_size.is_multiple_of(2) {
            return Err(usage(format!(
                "image_size must be even and at least 4, got {}",
                self.image_size
            )));
        }
        let depth = self.channels.len() as u32;
        if self.channels.is_empty() || !(self.image_size / 2).is_multiple_of(2usize.pow(depth)) {
            return Err(usage(format!(
                "image_size/2 = {} must be divisible by 2^{} (one halving per entry of channels)",
                self.image_size / 2,
                depth
            )));
        }
        if self.eval_masks < 2 {
            return Err(usage("eval_masks (n) must be at least 2"));
        }
        if self.eval_images < 1 {
            return Err(usage("eval_images (k) must be at least 1"));
        }
        self.masks()?;
        self.eval_masks()?;
        self.train_config()
            .validate()
            .map_err(|e| usage(e.to_string()))?;
        Ok(())
    }

    /// The strategy `name` with this configuration's mask parameters.
    pub fn strategy_named(&self, name: &str) -> Result<MaskStrategy> {
        self.strategy(name, "mask")
    }

    fn strategy(&self, name: &str, key: &str) -> Result<MaskStrategy> {
        match name {
            "central" => Ok(MaskStrategy::Central {
                fraction: self.mask_fraction,
            }),
            "random_blocks" => Ok(MaskStrategy::RandomBlocks(RandomBlocks {
                max_coverage: self.block_coverage,
                min_side: self.block_min_side,
                max_side: self.block_max_side,
                max_blocks: self.block_max_count,
            })),
            other => Err(usage(format!(
                "{key} must be \"central\" or \"random_blocks\", got {other:?}"
            ))),
        }
    }

    pub fn masks(&self) -> Result<MaskStrategy> {
        self.strategy(&self.mask, "mask")
    }

    pub fn eval_masks(&self) -> Result<MaskStrategy> {
        self.strategy(&self.eval_mask, "eval_mask")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lambda_rec: self.lambda_rec,
            lambda_adv: if self.adversarial && self.lambda_adv == 0.0 {
                TrainConfig::DEFAULT_LAMBDA_ADV
            } else {
                self.lambda_adv
            },
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.train_seed,
            adversarial_enabled: self.adversarial,
        }
    }

    pub fn stage_setup(&self, fill: Vec<f64>) -> Result<StageSetup> {
        Ok(StageSetup {
            masks: self.masks()?,
            fill,
            channels: self.channels.clone(),
            disc_channels: self.disc_channels.clone(),
        })
    }

    pub fn protocol(&self) -> Result<EvalProtocol> {
        Ok(EvalProtocol {
            masks_per_image: self.eval_masks,
            images: self.eval_images,
            seed: self.eval_seed,
            masks: self.eval_masks()?,
            standardize: self.standardize,
        })
    }

    /// `out_dir`, or `$CCE_OUTPUT_ROOT/<command>`, or `runs/<command>`.
    pub fn output_dir(&self, command: &str) -> PathBuf {
        if !self.out_dir.is_empty() {
            return PathBuf::from(&self.out_dir);
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join(command)
    }

    /// Writes the configuration, with the invoking command as a comment.
    pub fn write_resolved(&self, dir: &Path, command_line: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        let body = toml::to_string(self).context("serializing configuration")?;
        fs::write(&path, format!("# {command_line}\n{body}"))
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
