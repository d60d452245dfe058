//! Downstream training regimes on top of a pretrained backbone.
//!
//! Four modes share one model container and differ only in which tensors
//! the optimizer sees:
//!
//! | mode               | optimizer updates                     |
//! |--------------------|---------------------------------------|
//! | `PromptTune`       | projector, static prompt, head        |
//! | `LinearProbe`      | head                                  |
//! | `FineTune`         | backbone, head                        |
//! | `UniversalPrompt`  | one shared prompt vector, head        |
//!
//! Under `PromptTune` the codebook additionally moves by EMA once per batch,
//! after the optimizer step.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::{readout_mean, Backbone, BoundBackbone, BoundLinear, Linear};
use crate::error::{Error, Result};
use crate::graph::{Dataset, GraphInstance, Label, TaskKind};
use crate::metrics::{accuracy, roc_auc};
use crate::optim::Adam;
use crate::prompt::{
    apply_prompts, prompts_from_embeddings, BoundPromptModel, PromptConfig, PromptModel,
    PromptedBatch,
};
use crate::rng::{self, Rng, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::{Parameters, Tensor};
use crate::vq::{prompt_variance, softmax, UtilizationStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    PromptTune,
    LinearProbe,
    FineTune,
    UniversalPrompt,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::PromptTune,
        Mode::LinearProbe,
        Mode::FineTune,
        Mode::UniversalPrompt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::PromptTune => "prompt_tune",
            Mode::LinearProbe => "linear_probe",
            Mode::FineTune => "fine_tune",
            Mode::UniversalPrompt => "universal_prompt",
        }
    }

    fn freezes_backbone(self) -> bool {
        self != Mode::FineTune
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Number of affine layers, 2 to 4.
    pub depth: usize,
    pub hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            depth: 2,
            hidden: 32,
        }
    }
}

pub const HEAD_DEPTH: core::ops::RangeInclusive<usize> = 2..=4;

/// MLP classifier on graph embeddings; ReLU between layers, raw logits out.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    layers: Vec<Linear>,
}

impl ProjectionHead {
    pub fn new(input: usize, outputs: usize, cfg: &HeadConfig, rng: &mut Rng) -> Result<Self> {
        if !HEAD_DEPTH.contains(&cfg.depth) {
            return Err(Error::Config(format!(
                "head depth {} outside {HEAD_DEPTH:?}",
                cfg.depth
            )));
        }
        if cfg.hidden == 0 || outputs == 0 || input == 0 {
            return Err(Error::Config("head widths must be positive".into()));
        }
        let mut layers = Vec::with_capacity(cfg.depth);
        let mut width = input;
        for i in 0..cfg.depth {
            let out = if i + 1 == cfg.depth { outputs } else { cfg.hidden };
            layers.push(Linear::new(width, out, &format!("head.{i}"), rng));
            width = out;
        }
        Ok(ProjectionHead { layers })
    }

    pub fn from_layers(mut layers: Vec<Linear>) -> Result<Self> {
        if !HEAD_DEPTH.contains(&layers.len()) {
            return Err(Error::Config(format!(
                "head depth {} outside {HEAD_DEPTH:?}",
                layers.len()
            )));
        }
        for w in layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::dim(
                    "head",
                    &[w[0].output_dim()],
                    &[w[1].input_dim()],
                ));
            }
        }
        for (i, l) in layers.iter_mut().enumerate() {
            l.weight.set_name(format!("head.{i}.weight"));
            l.bias.set_name(format!("head.{i}.bias"));
        }
        Ok(ProjectionHead { layers })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn outputs(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundHead {
        BoundHead {
            layers: self.layers.iter().map(|l| l.bind(tape)).collect(),
        }
    }
}

impl Parameters for ProjectionHead {
    fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.parameters()).collect()
    }
    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.parameters_mut()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct BoundHead {
    pub layers: Vec<BoundLinear>,
}

impl BoundHead {
    pub fn forward(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let mut x = z;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(tape, x)?;
            if i + 1 < self.layers.len() {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lr: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: Option<usize>,
    /// Run the codebook EMA on every `ema_every`-th batch.
    pub ema_every: usize,
    pub head: HeadConfig,
    pub prompt: PromptConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::PromptTune,
            lr: 1e-3,
            lambda: 0.01,
            epochs: 200,
            batch_size: 16,
            seed: 0,
            patience: Some(30),
            ema_every: 1,
            head: HeadConfig::default(),
            prompt: PromptConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("λ must be non-negative, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.ema_every == 0 {
            return Err(Error::Config("EMA cadence must be positive".into()));
        }
        Ok(())
    }
}

/// Backbone, prompt model, universal prompt and head in one container.
#[derive(Debug, Clone)]
pub struct TaskModel {
    pub backbone: Backbone,
    pub prompt: PromptModel,
    pub universal: Tensor,
    pub head: ProjectionHead,
}

/// Per-component parameter hashes, for checking which parts moved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentHashes {
    pub backbone: u64,
    pub projector: u64,
    pub static_prompt: u64,
    pub codebook: u64,
    pub universal: u64,
    pub head: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterAccounting {
    pub trainable: usize,
    pub fine_tune: usize,
    pub ratio: f64,
}

struct BoundModel {
    backbone: BoundBackbone,
    prompt: BoundPromptModel,
    universal: Var,
    head: BoundHead,
}

impl TaskModel {
    pub fn new(backbone: Backbone, task: TaskKind, cfg: &TrainConfig) -> Result<Self> {
        let d = backbone.hidden();
        let mut init = rng::stream(cfg.seed, Stream::Init);
        let head = ProjectionHead::new(d, task.outputs(), &cfg.head, &mut init)?;
        let prompt = PromptModel::new(d, &cfg.prompt, cfg.seed)?;
        let mut model = TaskModel {
            backbone,
            prompt,
            universal: Tensor::zeros(&[d]).with_name("prompt.universal"),
            head,
        };
        model.configure(cfg.mode);
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.backbone.hidden()
    }

    /// Sets gradient flags so that exactly the mode's tensors are trainable.
    pub fn configure(&mut self, mode: Mode) {
        if mode.freezes_backbone() {
            self.backbone.freeze();
        } else {
            self.backbone.unfreeze();
        }
        self.prompt.set_trainable(mode == Mode::PromptTune);
        self.universal.set_requires_grad(mode == Mode::UniversalPrompt);
        self.head.set_trainable(true);
    }

    /// The tensors the optimizer updates in `mode`, in a fixed order.
    pub fn trainable_mut(&mut self, mode: Mode) -> Vec<&mut Tensor> {
        let mut out = match mode {
            Mode::PromptTune => self.prompt.parameters_mut(),
            Mode::LinearProbe => Vec::new(),
            Mode::FineTune => self.backbone.parameters_mut(),
            Mode::UniversalPrompt => vec![&mut self.universal],
        };
        out.extend(self.head.parameters_mut());
        out
    }

    pub fn trainable_count(&self, mode: Mode) -> usize {
        let extra = match mode {
            Mode::PromptTune => self.prompt.parameter_count(),
            Mode::LinearProbe => 0,
            Mode::FineTune => self.backbone.parameter_count(),
            Mode::UniversalPrompt => self.universal.numel(),
        };
        extra + self.head.parameter_count()
    }

    pub fn accounting(&self, mode: Mode) -> ParameterAccounting {
        let trainable = self.trainable_count(mode);
        let fine_tune = self.trainable_count(Mode::FineTune);
        ParameterAccounting {
            trainable,
            fine_tune,
            ratio: trainable as f64 / fine_tune as f64,
        }
    }

    pub fn component_hashes(&self) -> ComponentHashes {
        let cb = &self.prompt.codebook;
        ComponentHashes {
            backbone: self.backbone.parameter_hash(),
            projector: self.prompt.projector.parameter_hash(),
            static_prompt: fnv_hash(self.prompt.static_prompt.values()),
            codebook: fnv_hash(cb.vectors().iter().chain(cb.counts())),
            universal: fnv_hash(self.universal.values()),
            head: self.head.parameter_hash(),
        }
    }

    fn bind(&self, tape: &mut Tape) -> Result<BoundModel> {
        Ok(BoundModel {
            backbone: self.backbone.bind(tape),
            prompt: self.prompt.bind(tape)?,
            universal: tape.param(&self.universal),
            head: self.head.bind(tape),
        })
    }
}

fn fnv_hash<'a>(values: impl IntoIterator<Item = &'a f64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Supervision for a batch laid out like the logits.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    MultiTask { values: Vec<f64>, mask: Vec<bool> },
}

impl Targets {
    pub fn gather<'a>(graphs: impl IntoIterator<Item = &'a GraphInstance>) -> Result<Self> {
        let mut classes = Vec::new();
        let mut values = Vec::new();
        let mut mask = Vec::new();
        for g in graphs {
            match &g.label {
                Label::Class(c) => classes.push(*c),
                Label::MultiTask(ts) => {
                    for t in ts {
                        values.push(if *t == Some(true) { 1.0 } else { 0.0 });
                        mask.push(t.is_some());
                    }
                }
            }
        }
        match (classes.is_empty(), mask.is_empty()) {
            (false, true) => Ok(Targets::Classes(classes)),
            (true, false) => Ok(Targets::MultiTask { values, mask }),
            (true, true) => Err(Error::Degenerate("no targets".into())),
            (false, false) => Err(Error::Schema("mixed label kinds in one batch".into())),
        }
    }
}

/// Supervised term alone: mean cross-entropy for classes, masked mean BCE
/// for multi-task targets.
pub fn supervised_loss(tape: &mut Tape, logits: Var, targets: &Targets) -> Result<Var> {
    match targets {
        Targets::Classes(labels) => tape.softmax_cross_entropy(logits, labels),
        Targets::MultiTask { values, mask } => tape.masked_bce_with_logits(logits, values, mask),
    }
}

/// Mean over graphs of `Σ_nodes ‖p_q - p_c‖²` with `p_q` held constant.
pub fn consistency_loss(tape: &mut Tape, prompts: &[PromptedBatch]) -> Result<Var> {
    let mut terms = Vec::with_capacity(prompts.len());
    for pb in prompts {
        if !pb.vq_active {
            continue;
        }
        if pb.indices.len() != pb.num_nodes || pb.quantized.len() != pb.num_nodes * pb.dim {
            return Err(Error::Contract("quantization bookkeeping is incomplete".into()));
        }
        let shape = tape.shape(pb.intermediate).to_vec();
        let target = tape.constant(&shape, pb.quantized.clone())?;
        terms.push(tape.sum_sq_diff(pb.intermediate, target)?);
    }
    let mut total = tape.constant(&[], vec![0.0])?;
    for t in terms {
        total = tape.add(total, t)?;
    }
    Ok(tape.scale(total, 1.0 / prompts.len().max(1) as f64))
}

/// `CE + λ·consistency`. `prompts` is `None` for modes without generated
/// prompts; otherwise it must hold one entry per logits row.
pub fn loss_total(
    tape: &mut Tape,
    logits: Var,
    targets: &Targets,
    prompts: Option<&[PromptedBatch]>,
    lambda: f64,
) -> Result<Var> {
    let ce = supervised_loss(tape, logits, targets)?;
    let Some(prompts) = prompts else {
        return Ok(ce);
    };
    let rows = tape.shape(logits)[0];
    if prompts.len() != rows {
        return Err(Error::Contract(format!(
            "{} prompt records for {rows} graphs",
            prompts.len()
        )));
    }
    let cons = consistency_loss(tape, prompts)?;
    let weighted = tape.scale(cons, lambda);
    tape.add(ce, weighted)
}

/// Graph embedding fed to the head, plus the prompt record in prompt mode.
/// `frozen_h` holds precomputed backbone node embeddings when available.
fn graph_embedding(
    tape: &mut Tape,
    mode: Mode,
    bound: &BoundModel,
    backbone: &Backbone,
    prompt: &mut PromptModel,
    g: &GraphInstance,
    frozen_h: Option<&[f64]>,
) -> Result<(Var, Option<PromptedBatch>)> {
    let d = backbone.hidden();
    let h_values = || -> Result<Vec<f64>> {
        match frozen_h {
            Some(h) => Ok(h.to_vec()),
            None => backbone.embed(g),
        }
    };
    match mode {
        Mode::FineTune => {
            let h = bound.backbone.forward(tape, g)?;
            Ok((readout_mean(tape, h)?, None))
        }
        Mode::LinearProbe => {
            let h = h_values()?;
            let hv = tape.constant(&[g.num_nodes(), d], h)?;
            Ok((readout_mean(tape, hv)?, None))
        }
        Mode::UniversalPrompt => {
            let zeros = tape.constant(&[g.num_nodes(), d], vec![0.0; g.num_nodes() * d])?;
            let pf = tape.add_row(zeros, bound.universal)?;
            Ok((apply_prompts(tape, g, &bound.backbone, pf)?, None))
        }
        Mode::PromptTune => {
            let h = h_values()?;
            let pb = prompts_from_embeddings(tape, prompt, &bound.prompt, &h)?;
            let z = apply_prompts(tape, g, &bound.backbone, pb.final_prompts)?;
            Ok((z, Some(pb)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// Mean total loss over batches.
    pub loss: f64,
    /// Mean consistency term (before λ) over batches.
    pub consistency: f64,
    pub batches: usize,
}

/// Optimizer, shuffling stream and frozen-embedding cache for one run.
pub struct Trainer<'d> {
    cfg: TrainConfig,
    train: &'d Dataset,
    cache: Vec<Vec<f64>>,
    opt: Adam,
    shuffle: Rng,
    epoch: usize,
}

impl<'d> Trainer<'d> {
    /// Configures `model` for `cfg.mode`. With a frozen backbone the node
    /// embeddings of `train` are computed once here.
    pub fn new(model: &mut TaskModel, train: &'d Dataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Degenerate("empty training set".into()));
        }
        if train.feature_dim()? != model.backbone.input_dim() {
            return Err(Error::Schema(format!(
                "dataset features are {}-dimensional, backbone expects {}",
                train.feature_dim()?,
                model.backbone.input_dim()
            )));
        }
        if train.task().outputs() != model.head.outputs() {
            return Err(Error::dim(
                "head outputs",
                &[model.head.outputs()],
                &[train.task().outputs()],
            ));
        }
        model.configure(cfg.mode);
        let cache = if cfg.mode.freezes_backbone() {
            train
                .graphs()
                .iter()
                .map(|g| model.backbone.embed(g))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Trainer {
            cfg: *cfg,
            train,
            cache,
            opt: Adam::new(cfg.lr)?,
            shuffle: rng::stream(cfg.seed, Stream::Shuffle),
            epoch: 0,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// One shuffled pass: per batch forward, loss, backward, Adam step, then
    /// the codebook EMA with that batch's draws.
    pub fn train_epoch(&mut self, model: &mut TaskModel) -> Result<EpochStats> {
        let cfg = self.cfg;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.shuffle);
        model.prompt.codebook.reset_window();

        let mut total = 0.0;
        let mut total_cons = 0.0;
        let batches = order.len().div_ceil(cfg.batch_size);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape)?;
            let mut zs = Vec::with_capacity(batch.len());
            let mut prompts = Vec::new();
            for &i in batch {
                let g = &self.train.graphs()[i];
                let cached = self.cache.get(i).map(|h| h.as_slice());
                let (z, pb) = graph_embedding(
                    &mut tape,
                    cfg.mode,
                    &bound,
                    &model.backbone,
                    &mut model.prompt,
                    g,
                    cached,
                )?;
                zs.push(z);
                prompts.extend(pb);
            }
            let z = tape.concat_rows(&zs)?;
            let logits = bound.head.forward(&mut tape, z)?;
            let targets = Targets::gather(batch.iter().map(|&i| &self.train.graphs()[i]))?;
            let with_prompts = cfg.mode == Mode::PromptTune;
            let loss = loss_total(
                &mut tape,
                logits,
                &targets,
                with_prompts.then_some(prompts.as_slice()),
                cfg.lambda,
            )?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(self.abort(&tape, loss, model, b, value));
            }
            if with_prompts {
                let cons = consistency_loss(&mut tape, &prompts)?;
                total_cons += tape.scalar(cons);
            }
            total += value;

            let grads = tape.backward(loss)?;
            let mut params = model.trainable_mut(cfg.mode);
            params.iter_mut().for_each(|p| p.zero_grad());
            grads.accumulate(params.iter_mut().map(|p| &mut **p));
            let finite = params
                .iter()
                .all(|p| p.grad().is_none_or(|g| g.iter().all(|x| x.is_finite())));
            if !finite {
                drop(params);
                return Err(self.abort(&tape, loss, model, b, value));
            }
            self.opt.step(&mut params)?;

            if with_prompts && !model.prompt.ablation.no_vq && b % cfg.ema_every == 0 {
                let mut rows = Vec::new();
                for pb in &prompts {
                    for v in 0..pb.num_nodes {
                        rows.push((pb.intermediate_row(&tape, v), pb.indices[v].as_slice()));
                    }
                }
                model.prompt.codebook.ema_update(&rows)?;
            }
        }
        self.epoch += 1;
        Ok(EpochStats {
            loss: total / batches as f64,
            consistency: total_cons / batches as f64,
            batches,
        })
    }

    fn abort(&self, tape: &Tape, loss: Var, model: &mut TaskModel, batch: usize, value: f64) -> Error {
        let mut grad_norms = Vec::new();
        if let Ok(grads) = tape.backward(loss) {
            for (i, p) in model.trainable_mut(self.cfg.mode).into_iter().enumerate() {
                let norm = grads
                    .of(p)
                    .map(|g| libm::sqrt(g.iter().map(|x| x * x).sum::<f64>()))
                    .unwrap_or(0.0);
                let name = if p.name().is_empty() {
                    format!("#{i}")
                } else {
                    String::from(p.name())
                };
                grad_norms.push((name, norm));
            }
        }
        Error::NumericalAbort {
            lr: self.cfg.lr,
            epoch: self.epoch,
            batch,
            loss: value,
            grad_norms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub graphs: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// Absent when the split lacks one of the classes.
    pub roc_auc: Option<f64>,
    /// Variance of quantized prompts across all nodes (prompt mode only).
    pub prompt_variance: Option<f64>,
    #[serde(skip)]
    pub quantized_rows: Vec<f64>,
}

fn eval_seed(seed: u64) -> u64 {
    rng::stream(seed, Stream::Eval).random()
}

/// Accuracy, ROC-AUC and loss on `ds`. The model is untouched: sampling
/// runs on a reseeded copy of the codebook.
pub fn evaluate(model: &TaskModel, ds: &Dataset, cfg: &TrainConfig) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::Degenerate("cannot evaluate an empty split".into()));
    }
    let mode = cfg.mode;
    let mut prompt = model.prompt.clone();
    prompt.codebook.reseed(eval_seed(cfg.seed));
    let outputs = model.head.outputs();

    let mut logits_all = Vec::with_capacity(ds.len() * outputs);
    let mut loss_sum = 0.0;
    let mut quantized_rows = Vec::new();
    for chunk in ds.graphs().chunks(cfg.batch_size.max(1)) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape)?;
        let mut zs = Vec::with_capacity(chunk.len());
        for g in chunk {
            let (z, pb) =
                graph_embedding(&mut tape, mode, &bound, &model.backbone, &mut prompt, g, None)?;
            zs.push(z);
            if let Some(pb) = pb {
                quantized_rows.extend_from_slice(&pb.quantized);
            }
        }
        let z = tape.concat_rows(&zs)?;
        let logits = bound.head.forward(&mut tape, z)?;
        let targets = Targets::gather(chunk)?;
        let loss = supervised_loss(&mut tape, logits, &targets)?;
        loss_sum += tape.scalar(loss) * chunk.len() as f64;
        logits_all.extend_from_slice(tape.value(logits));
    }

    let (acc, auc) = score(ds, &logits_all, outputs)?;
    Ok(EvalReport {
        graphs: ds.len(),
        loss: loss_sum / ds.len() as f64,
        accuracy: acc,
        roc_auc: auc,
        prompt_variance: (mode == Mode::PromptTune)
            .then(|| prompt_variance(&quantized_rows, model.dim())),
        quantized_rows,
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// Accuracy and ROC-AUC from raw logits. Binary tasks score `P(class 1)`;
/// more classes and multi-task labels average one-vs-rest AUCs over the
/// columns where both outcomes occur.
fn score(ds: &Dataset, logits: &[f64], outputs: usize) -> Result<(f64, Option<f64>)> {
    match ds.task() {
        TaskKind::MultiClass { classes } => {
            let labels: Vec<usize> = ds
                .graphs()
                .iter()
                .map(|g| match g.label {
                    Label::Class(c) => c,
                    Label::MultiTask(_) => unreachable!("dataset validated label kinds"),
                })
                .collect();
            let probs: Vec<Vec<f64>> = logits.chunks(outputs).map(softmax).collect();
            let predicted: Vec<usize> = probs
                .iter()
                .map(|p| {
                    p.iter()
                        .enumerate()
                        .max_by(|a, b| a.1.total_cmp(b.1))
                        .map(|(i, _)| i)
                        .unwrap_or(0)
                })
                .collect();
            let acc = accuracy(&predicted, &labels)?;
            let columns: Vec<usize> = if classes == 2 { vec![1] } else { (0..classes).collect() };
            let aucs: Vec<f64> = columns
                .iter()
                .filter_map(|&c| {
                    let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
                    let l: Vec<bool> = labels.iter().map(|&y| y == c).collect();
                    roc_auc(&s, &l).ok()
                })
                .collect();
            Ok((acc, mean(&aucs)))
        }
        TaskKind::MultiTask { tasks } => {
            let mut hits = 0usize;
            let mut valid = 0usize;
            let mut aucs = Vec::new();
            for t in 0..tasks {
                let mut s = Vec::new();
                let mut l = Vec::new();
                for (g, row) in ds.graphs().iter().zip(logits.chunks(outputs)) {
                    if let Label::MultiTask(ts) = &g.label {
                        if let Some(y) = ts[t] {
                            let p = sigmoid(row[t]);
                            hits += usize::from((p > 0.5) == y);
                            valid += 1;
                            s.push(p);
                            l.push(y);
                        }
                    }
                }
                if let Ok(a) = roc_auc(&s, &l) {
                    aucs.push(a);
                }
            }
            if valid == 0 {
                return Err(Error::Undefined("every target is missing".into()));
            }
            Ok((hits as f64 / valid as f64, mean(&aucs)))
        }
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Quantized prompts (`p_q`, row-major) for every node of `g`, drawn with
/// the evaluation stream. Empty outside prompt mode.
pub fn node_prompts(model: &TaskModel, g: &GraphInstance, cfg: &TrainConfig) -> Result<Vec<f64>> {
    if cfg.mode != Mode::PromptTune {
        return Ok(Vec::new());
    }
    let mut prompt = model.prompt.clone();
    prompt.codebook.reseed(eval_seed(cfg.seed));
    let mut tape = Tape::new();
    let bound = prompt.bind(&mut tape)?;
    let h = model.backbone.embed(g)?;
    Ok(prompts_from_embeddings(&mut tape, &mut prompt, &bound, &h)?.quantized)
}

pub const COLLAPSE_VARIANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CollapseStatus {
    Healthy { variance: f64 },
    Collapsed { variance: f64 },
    /// A single code makes identical prompts the expected outcome.
    Suppressed,
}

impl CollapseStatus {
    pub fn is_collapsed(self) -> bool {
        matches!(self, CollapseStatus::Collapsed { .. })
    }
}

/// Flags collapse when the quantized prompts of a validation batch have
/// variance below [`COLLAPSE_VARIANCE`] although the codebook has more than
/// one code.
pub fn collapse_diagnostic(quantized_rows: &[f64], dim: usize, codebook_size: usize) -> CollapseStatus {
    if codebook_size <= 1 {
        return CollapseStatus::Suppressed;
    }
    let variance = prompt_variance(quantized_rows, dim);
    if variance < COLLAPSE_VARIANCE {
        CollapseStatus::Collapsed { variance }
    } else {
        CollapseStatus::Healthy { variance }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub consistency: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub val_auc: Option<f64>,
    pub prompt_variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: Mode,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (early stopping), 1-based.
    pub best_epoch: Option<usize>,
    pub test: EvalReport,
    pub codebook: Option<UtilizationStats>,
    pub collapse: CollapseStatus,
    pub parameters: ParameterAccounting,
}

/// Trains with early stopping on validation ROC-AUC (accuracy when AUC is
/// undefined, ties broken by lower loss), restores the best epoch and
/// evaluates on `test`.
pub fn fit(
    model: &mut TaskModel,
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<MetricsReport> {
    let mut trainer = Trainer::new(model, train, cfg)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<((f64, f64), usize, TaskModel)> = None;
    let mut last_val_rows = Vec::new();

    for epoch in 1..=cfg.epochs {
        let stats = trainer.train_epoch(model)?;
        let mut record = EpochRecord {
            epoch,
            train_loss: stats.loss,
            consistency: stats.consistency,
            val_loss: None,
            val_accuracy: None,
            val_auc: None,
            prompt_variance: None,
        };
        if !val.is_empty() {
            let ev = evaluate(model, val, cfg)?;
            record.val_loss = Some(ev.loss);
            record.val_accuracy = Some(ev.accuracy);
            record.val_auc = ev.roc_auc;
            record.prompt_variance = ev.prompt_variance;
            let score = (ev.roc_auc.unwrap_or(ev.accuracy), -ev.loss);
            let improved = best.as_ref().is_none_or(|(s, _, _)| score > *s);
            if improved {
                best = Some((score, epoch, model.clone()));
                last_val_rows = ev.quantized_rows;
            }
        }
        epochs.push(record);
        if let (Some(p), Some((_, at, _))) = (cfg.patience, &best) {
            if epoch - at >= p {
                break;
            }
        }
    }

    let best_epoch = match best {
        Some((_, epoch, snapshot)) => {
            *model = snapshot;
            Some(epoch)
        }
        None => None,
    };
    model.configure(cfg.mode);
    let test_report = evaluate(model, test, cfg)?;
    let prompt_mode = cfg.mode == Mode::PromptTune;
    let diag_rows = if last_val_rows.is_empty() {
        &test_report.quantized_rows
    } else {
        &last_val_rows
    };
    let vq = prompt_mode && !model.prompt.ablation.no_vq;
    let collapse = if vq {
        collapse_diagnostic(diag_rows, model.dim(), model.prompt.codebook.size())
    } else {
        CollapseStatus::Suppressed
    };
    Ok(MetricsReport {
        mode: cfg.mode,
        epochs,
        best_epoch,
        codebook: vq.then(|| model.prompt.codebook.utilization_stats(diag_rows)),
        collapse,
        parameters: model.accounting(cfg.mode),
        test: test_report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::graph::{generate_synthetic, SynthSpec};

    fn small() -> (TaskModel, Dataset, TrainConfig) {
        let ds = generate_synthetic(&SynthSpec {
            graphs_per_class: 8,
            min_nodes: 4,
            max_nodes: 6,
            ..SynthSpec::default()
        })
        .unwrap();
        let bb = Backbone::new(
            &BackboneConfig {
                input_dim: 8,
                hidden: 16,
                layers: 2,
            },
            &mut rng::stream(1, Stream::Init),
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            head: HeadConfig { depth: 2, hidden: 8 },
            prompt: PromptConfig {
                hidden: Some(8),
                ..PromptConfig::default()
            },
            ..TrainConfig::default()
        };
        let model = TaskModel::new(bb, ds.task(), &cfg).unwrap();
        (model, ds, cfg)
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("prompt".parse::<Mode>().is_err());
    }

    #[test]
    fn head_depth_is_bounded() {
        let mut rng = rng::stream(0, Stream::Init);
        for depth in [1, 5] {
            let cfg = HeadConfig { depth, hidden: 4 };
            assert!(ProjectionHead::new(4, 2, &cfg, &mut rng).is_err());
        }
        let head = ProjectionHead::new(4, 3, &HeadConfig { depth: 3, hidden: 5 }, &mut rng).unwrap();
        assert_eq!(head.parameter_count(), 4 * 5 + 5 + 5 * 5 + 5 + 5 * 3 + 3);
    }

    #[test]
    fn zero_lambda_is_pure_cross_entropy() {
        let (mut model, ds, cfg) = small();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape).unwrap();
        let g = &ds.graphs()[0];
        let (z, pb) = graph_embedding(
            &mut tape,
            Mode::PromptTune,
            &bound,
            &model.backbone,
            &mut model.prompt,
            g,
            None,
        )
        .unwrap();
        let logits = bound.head.forward(&mut tape, z).unwrap();
        let targets = Targets::gather([g]).unwrap();
        let pbs = vec![pb.unwrap()];
        let total = loss_total(&mut tape, logits, &targets, Some(&pbs), 0.0).unwrap();
        let ce = supervised_loss(&mut tape, logits, &targets).unwrap();
        assert_eq!(tape.scalar(total), tape.scalar(ce));
        let _ = cfg;
    }

    #[test]
    fn missing_bookkeeping_is_a_contract_error() {
        let (mut model, ds, _) = small();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape).unwrap();
        let g = &ds.graphs()[0];
        let (z, pb) = graph_embedding(
            &mut tape,
            Mode::PromptTune,
            &bound,
            &model.backbone,
            &mut model.prompt,
            g,
            None,
        )
        .unwrap();
        let logits = bound.head.forward(&mut tape, z).unwrap();
        let targets = Targets::gather([g]).unwrap();
        assert!(matches!(
            loss_total(&mut tape, logits, &targets, Some(&[]), 0.01),
            Err(Error::Contract(_))
        ));
        let mut pb = pb.unwrap();
        pb.indices.clear();
        assert!(matches!(
            loss_total(&mut tape, logits, &targets, Some(&[pb]), 0.01),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn evaluation_is_pure() {
        let (mut model, ds, cfg) = small();
        let mut trainer = Trainer::new(&mut model, &ds, &cfg).unwrap();
        trainer.train_epoch(&mut model).unwrap();
        let before = model.component_hashes();
        let a = evaluate(&model, &ds, &cfg).unwrap();
        let b = evaluate(&model, &ds, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(before, model.component_hashes());
    }

    #[test]
    fn collapse_flags() {
        let rows = vec![0.5; 40];
        assert!(collapse_diagnostic(&rows, 4, 20).is_collapsed());
        assert_eq!(collapse_diagnostic(&rows, 4, 1), CollapseStatus::Suppressed);
        let rows: Vec<f64> = (0..40).map(|i| i as f64).collect();
        assert!(!collapse_diagnostic(&rows, 4, 20).is_collapsed());
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let (mut model, ds, cfg) = small();
        model.head.layers[0].weight.values_mut()[0] = f64::NAN;
        let mut trainer = Trainer::new(&mut model, &ds, &cfg).unwrap();
        match trainer.train_epoch(&mut model) {
            Err(Error::NumericalAbort { grad_norms, batch, .. }) => {
                assert_eq!(batch, 0);
                assert!(grad_norms.iter().any(|(n, _)| n == "head.0.weight"));
            }
            other => panic!("expected abort, got {other:?}"),
        }
    }
}
