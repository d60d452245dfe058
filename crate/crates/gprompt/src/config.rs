//! Run configuration: defaults, then a config file, then flags.
//!
//! A config file is either a flat JSON object (such as an echoed
//! `config.json`) or flat `key = value` lines with `#` comments:
//!
//! ```text
//! # prompt tuning on the synthetic task
//! mode = prompt_tune
//! shots = 50
//! tau = 1.0
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use gprompt_core::backbone::{BackboneConfig, PretrainConfig};
use gprompt_core::graph::SynthSpec;
use gprompt_core::prompt::{Ablation, PromptConfig};
use gprompt_core::trainer::{HeadConfig, Mode, TrainConfig};
use gprompt_core::vq::{CodebookConfig, InitStrategy};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, Result};

/// Every knob of every command, fully materialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,

    /// Input dataset (JSON Lines).
    pub data: Option<PathBuf>,
    /// Output file for `synth`, `eval` and `export-codebook`.
    pub out: Option<PathBuf>,
    /// Run directory for `pretrain` and `tune`.
    pub out_dir: Option<PathBuf>,
    /// Pretrained backbone checkpoint.
    pub backbone: Option<PathBuf>,
    /// Task model checkpoint.
    pub checkpoint: Option<PathBuf>,
    /// Split file; when absent `tune` draws a k-shot split.
    pub split: Option<PathBuf>,
    /// Which part of the split `eval` scores: train, val, test or all.
    pub subset: String,

    pub classes: usize,
    pub per_class: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub feature_dim: usize,
    pub noise: f64,
    pub mixing: f64,
    pub extra_edge_prob: f64,
    pub homophily: f64,

    pub hidden_dim: usize,
    pub layers: usize,
    pub neg_ratio: usize,

    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,

    pub mode: Mode,
    pub lambda: f64,
    /// Early-stopping patience in epochs; 0 disables it.
    pub patience: usize,
    pub ema_every: usize,
    pub shots: usize,
    pub val_fraction: f64,
    pub head_depth: usize,
    pub head_hidden: usize,
    /// Projector bottleneck width; 0 means a quarter of the hidden width.
    pub bottleneck: usize,
    pub phm_factor: usize,
    pub beta: f64,
    pub codebook_size: usize,
    pub alpha: f64,
    pub tau: f64,
    pub samples: usize,
    /// `gaussian` or `first_batch`.
    pub codebook_init: String,
    pub no_vq: bool,
    pub mlp_projector: bool,
    pub straight_through: bool,
}

impl RunConfig {
    pub fn defaults(command: &str) -> Self {
        let synth = SynthSpec::default();
        let bb = BackboneConfig::default();
        let pre = PretrainConfig::default();
        let train = TrainConfig::default();
        let cb = CodebookConfig::default();
        let pretraining = command == "pretrain";
        RunConfig {
            command: command.into(),
            seed: 0,
            data: None,
            out: None,
            out_dir: None,
            backbone: None,
            checkpoint: None,
            split: None,
            subset: "test".into(),
            classes: synth.classes,
            per_class: synth.graphs_per_class,
            min_nodes: synth.min_nodes,
            max_nodes: synth.max_nodes,
            feature_dim: synth.feature_dim,
            noise: synth.noise,
            mixing: synth.mixing,
            extra_edge_prob: synth.extra_edge_prob,
            homophily: synth.homophily,
            hidden_dim: bb.hidden,
            layers: bb.layers,
            neg_ratio: pre.neg_ratio,
            epochs: if pretraining { pre.epochs } else { train.epochs },
            lr: if pretraining { pre.lr } else { train.lr },
            batch_size: if pretraining { pre.batch_size } else { train.batch_size },
            mode: train.mode,
            lambda: train.lambda,
            patience: train.patience.unwrap_or(0),
            ema_every: train.ema_every,
            shots: 50,
            val_fraction: 0.5,
            head_depth: train.head.depth,
            head_hidden: train.head.hidden,
            bottleneck: train.prompt.hidden.unwrap_or(0),
            phm_factor: train.prompt.phm_factor,
            beta: train.prompt.beta,
            codebook_size: cb.size,
            alpha: cb.alpha,
            tau: cb.tau,
            samples: cb.samples,
            codebook_init: "gaussian".into(),
            no_vq: false,
            mlp_projector: false,
            straight_through: true,
        }
    }

    /// Defaults for `command`, overlaid by `file` and then by `flags`.
    pub fn resolve(command: &str, file: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let Value::Object(mut merged) = serde_json::to_value(Self::defaults(command))? else {
            unreachable!("config serializes to an object");
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            for (k, v) in parse_file(path, &text, &merged)? {
                merged.insert(k, v);
            }
        }
        let Value::Object(flags) = serde_json::to_value(flags)? else {
            unreachable!("flags serialize to an object");
        };
        merged.extend(flags);
        merged.insert("command".into(), Value::String(command.into()));
        let cfg: RunConfig = serde_json::from_value(Value::Object(merged))
            .map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))?;
        cfg.init_strategy()?;
        Ok(cfg)
    }

    fn init_strategy(&self) -> Result<InitStrategy> {
        match self.codebook_init.as_str() {
            "gaussian" => Ok(InitStrategy::Gaussian),
            "first_batch" => Ok(InitStrategy::FirstBatch),
            other => Err(CliError::Usage(format!(
                "codebook_init must be gaussian or first_batch, got {other:?}"
            ))),
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            classes: self.classes,
            graphs_per_class: self.per_class,
            min_nodes: self.min_nodes,
            max_nodes: self.max_nodes,
            feature_dim: self.feature_dim,
            noise: self.noise,
            mixing: self.mixing,
            extra_edge_prob: self.extra_edge_prob,
            homophily: self.homophily,
            seed: self.seed,
        }
    }

    pub fn backbone_config(&self, input_dim: usize) -> BackboneConfig {
        BackboneConfig {
            input_dim,
            hidden: self.hidden_dim,
            layers: self.layers,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.epochs,
            neg_ratio: self.neg_ratio,
            lr: self.lr,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            mode: self.mode,
            lr: self.lr,
            lambda: self.lambda,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            patience: (self.patience > 0).then_some(self.patience),
            ema_every: self.ema_every,
            head: HeadConfig {
                depth: self.head_depth,
                hidden: self.head_hidden,
            },
            prompt: PromptConfig {
                hidden: (self.bottleneck > 0).then_some(self.bottleneck),
                phm_factor: self.phm_factor,
                beta: self.beta,
                codebook: CodebookConfig {
                    size: self.codebook_size,
                    alpha: self.alpha,
                    tau: self.tau,
                    samples: self.samples,
                },
                codebook_init: self.init_strategy()?,
                ablation: Ablation {
                    no_vq: self.no_vq,
                    mlp_projector: self.mlp_projector,
                    straight_through: self.straight_through,
                },
            },
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }
}

/// Reads `key = value` lines, typing each value after its default.
fn parse_file(path: &Path, text: &str, defaults: &Map<String, Value>) -> Result<Map<String, Value>> {
    let err = |line: usize, message: String| CliError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    if text.trim_start().starts_with('{') {
        let obj: Map<String, Value> =
            serde_json::from_str(text).map_err(|e| err(e.line(), e.to_string()))?;
        if let Some(k) = obj.keys().find(|k| !defaults.contains_key(*k)) {
            return Err(err(0, format!("unknown key {k:?}")));
        }
        return Ok(obj);
    }
    let mut out = Map::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(err(i + 1, format!("expected key = value, got {line:?}")));
        };
        let (key, value) = (key.trim(), value.trim());
        let Some(default) = defaults.get(key) else {
            return Err(err(i + 1, format!("unknown key {key:?}")));
        };
        let typed = match default {
            Value::Bool(_) => bool::from_str(value).map(Value::Bool).map_err(|e| e.to_string()),
            Value::Number(n) if n.is_u64() => u64::from_str(value)
                .map(Value::from)
                .map_err(|e| e.to_string()),
            Value::Number(_) => f64::from_str(value)
                .map(Value::from)
                .map_err(|e| e.to_string()),
            _ => Ok(Value::String(value.into())),
        };
        out.insert(key.into(), typed.map_err(|e| err(i + 1, format!("{key}: {e}")))?);
    }
    Ok(out)
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// Command-line overrides; each flag sets the config key of the same name.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct Overrides {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subset: Option<String>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_class: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_nodes: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_nodes: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mixing: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extra_edge_prob: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub homophily: Option<f64>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub neg_ratio: Option<usize>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,

    /// prompt_tune, linear_probe, fine_tune or universal_prompt.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ema_every: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shots: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_depth: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_hidden: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bottleneck: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phm_factor: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub codebook_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub codebook_init: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub no_vq: bool,
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub mlp_projector: bool,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub straight_through: Option<bool>,
}
