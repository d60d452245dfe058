//! Versioned, checksummed JSON checkpoint container.
//!
//! ```json
//! {"format": "gprompt-checkpoint", "version": 1, "kind": "backbone",
//!  "checksum": "<sha256 of the compact payload>", "payload": {...}}
//! ```

use std::path::Path;

use gprompt_core::backbone::{Backbone, Linear};
use gprompt_core::graph::TaskKind;
use gprompt_core::phm::{BottleneckProjector, PhmLayer, ProjectionLayer};
use gprompt_core::prompt::{Ablation, PromptModel};
use gprompt_core::trainer::{ProjectionHead, TaskModel, TrainConfig};
use gprompt_core::vq::{Codebook, CodebookConfig};
use gprompt_core::Tensor;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const FORMAT: &str = "gprompt-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Backbone,
    TaskModel,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Container {
    format: String,
    version: u32,
    kind: Kind,
    checksum: String,
    payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearState {
    pub input: usize,
    pub output: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearState {
    fn of(l: &Linear) -> Self {
        LinearState {
            input: l.input_dim(),
            output: l.output_dim(),
            weight: l.weight.values().to_vec(),
            bias: l.bias.values().to_vec(),
        }
    }

    fn restore(self) -> gprompt_core::Result<Linear> {
        Linear::from_values(self.input, self.output, self.weight, self.bias)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneState {
    pub input: LinearState,
    pub layers: Vec<LinearState>,
}

impl BackboneState {
    pub fn of(bb: &Backbone) -> Self {
        BackboneState {
            input: LinearState::of(&bb.input),
            layers: bb.layers.iter().map(|l| LinearState::of(&l.linear)).collect(),
        }
    }

    pub fn restore(self) -> gprompt_core::Result<Backbone> {
        let layers = self
            .layers
            .into_iter()
            .map(LinearState::restore)
            .collect::<gprompt_core::Result<_>>()?;
        Backbone::from_parts(self.input.restore()?, layers)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum ProjectionState {
    Phm {
        n: usize,
        input: usize,
        output: usize,
        a: Vec<Vec<f64>>,
        s: Vec<Vec<f64>>,
        bias: Vec<f64>,
    },
    Dense(LinearState),
}

fn values(ts: &[Tensor]) -> Vec<Vec<f64>> {
    ts.iter().map(|t| t.values().to_vec()).collect()
}

impl ProjectionState {
    fn of(l: &ProjectionLayer) -> Self {
        match l {
            ProjectionLayer::Phm(p) => ProjectionState::Phm {
                n: p.factor(),
                input: p.input_dim(),
                output: p.output_dim(),
                a: values(&p.a),
                s: values(&p.s),
                bias: p.bias.values().to_vec(),
            },
            ProjectionLayer::Dense(l) => ProjectionState::Dense(LinearState::of(l)),
        }
    }

    fn restore(self) -> gprompt_core::Result<ProjectionLayer> {
        Ok(match self {
            ProjectionState::Phm {
                n,
                input,
                output,
                a,
                s,
                bias,
            } => ProjectionLayer::Phm(PhmLayer::from_factors(n, input, output, a, s, bias)?),
            ProjectionState::Dense(l) => ProjectionLayer::Dense(l.restore()?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookState {
    pub config: CodebookConfig,
    pub dim: usize,
    /// `size × dim`, row-major.
    pub vectors: Vec<f64>,
    pub counts: Vec<f64>,
    /// Share of samples each code received in the last training window.
    pub hit_rates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptState {
    down: ProjectionState,
    up: ProjectionState,
    codebook: CodebookState,
    static_prompt: Vec<f64>,
    beta: f64,
    ablation: Ablation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskModelState {
    backbone: BackboneState,
    head: Vec<LinearState>,
    prompt: PromptState,
    universal: Vec<f64>,
    train: TrainConfig,
    task: TaskKind,
}

/// A restored task model with the configuration it was trained under.
#[derive(Debug, Clone)]
pub struct TaskCheckpoint {
    pub model: TaskModel,
    pub train: TrainConfig,
    pub task: TaskKind,
    pub codebook: CodebookState,
}

fn checksum(payload: &Value) -> Result<String> {
    let bytes = serde_json::to_vec(payload)?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn write(path: &Path, kind: Kind, payload: &impl Serialize) -> Result<()> {
    let payload = serde_json::to_value(payload)?;
    let container = Container {
        format: FORMAT.into(),
        version: VERSION,
        kind,
        checksum: checksum(&payload)?,
        payload,
    };
    let text = serde_json::to_string(&container)?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn read<T: DeserializeOwned>(path: &Path, kind: Kind) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let c: Container = serde_json::from_str(&text)
        .map_err(|e| CliError::checkpoint(path, format!("not a checkpoint: {e}")))?;
    if c.format != FORMAT {
        return Err(CliError::checkpoint(path, format!("unknown format {:?}", c.format)));
    }
    if c.version != VERSION {
        return Err(CliError::checkpoint(
            path,
            format!("version {} is not supported (expected {VERSION})", c.version),
        ));
    }
    if c.kind != kind {
        return Err(CliError::checkpoint(
            path,
            format!("holds a {:?} checkpoint, expected {kind:?}", c.kind),
        ));
    }
    if checksum(&c.payload)? != c.checksum {
        return Err(CliError::checkpoint(path, "checksum mismatch"));
    }
    serde_json::from_value(c.payload)
        .map_err(|e| CliError::checkpoint(path, format!("malformed payload: {e}")))
}

pub fn save_backbone(path: &Path, bb: &Backbone) -> Result<()> {
    write(path, Kind::Backbone, &BackboneState::of(bb))
}

/// Loads a backbone; `input_dim` rejects one built for other features.
pub fn load_backbone(path: &Path, input_dim: Option<usize>) -> Result<Backbone> {
    let state: BackboneState = read(path, Kind::Backbone)?;
    let bb = state
        .restore()
        .map_err(|e| CliError::checkpoint(path, e.to_string()))?;
    if let Some(d) = input_dim {
        if bb.input_dim() != d {
            return Err(CliError::checkpoint(
                path,
                format!("backbone expects {}-dim features, data has {d}", bb.input_dim()),
            ));
        }
    }
    Ok(bb)
}

pub fn save_task_model(
    path: &Path,
    model: &TaskModel,
    train: &TrainConfig,
    task: TaskKind,
    hit_rates: Vec<f64>,
) -> Result<()> {
    let cb = &model.prompt.codebook;
    let state = TaskModelState {
        backbone: BackboneState::of(&model.backbone),
        head: model.head.layers().iter().map(LinearState::of).collect(),
        prompt: PromptState {
            down: ProjectionState::of(&model.prompt.projector.down),
            up: ProjectionState::of(&model.prompt.projector.up),
            codebook: CodebookState {
                config: cb.config(),
                dim: cb.dim(),
                vectors: cb.vectors().to_vec(),
                counts: cb.counts().to_vec(),
                hit_rates,
            },
            static_prompt: model.prompt.static_prompt.values().to_vec(),
            beta: model.prompt.beta,
            ablation: model.prompt.ablation,
        },
        universal: model.universal.values().to_vec(),
        train: *train,
        task,
    };
    write(path, Kind::TaskModel, &state)
}

pub fn load_task_model(path: &Path) -> Result<TaskCheckpoint> {
    let state: TaskModelState = read(path, Kind::TaskModel)?;
    let bad = |e: gprompt_core::Error| CliError::checkpoint(path, e.to_string());
    let backbone = state.backbone.restore().map_err(bad)?;
    let head = ProjectionHead::from_layers(
        state
            .head
            .into_iter()
            .map(LinearState::restore)
            .collect::<gprompt_core::Result<_>>()
            .map_err(bad)?,
    )
    .map_err(bad)?;
    let p = state.prompt;
    let projector = BottleneckProjector::from_layers(
        p.down.restore().map_err(bad)?,
        p.up.restore().map_err(bad)?,
    )
    .map_err(bad)?;
    let cb = p.codebook.clone();
    let codebook = Codebook::from_state(cb.config, cb.dim, cb.vectors, cb.counts, state.train.seed)
        .map_err(bad)?;
    let prompt = PromptModel::from_parts(projector, codebook, p.static_prompt, p.beta, p.ablation)
        .map_err(bad)?;
    let d = backbone.hidden();
    if prompt.dim() != d || head.input_dim() != d || state.universal.len() != d {
        return Err(CliError::checkpoint(path, "component widths disagree with the backbone"));
    }
    if head.outputs() != state.task.outputs() {
        return Err(CliError::checkpoint(path, "head arity disagrees with the task"));
    }
    let universal = Tensor::new(&[d], state.universal)
        .map_err(bad)?
        .with_name("prompt.universal");
    let mut model = TaskModel {
        backbone,
        prompt,
        universal,
        head,
    };
    model.configure(state.train.mode);
    Ok(TaskCheckpoint {
        model,
        train: state.train,
        task: state.task,
        codebook: p.codebook,
    })
}
