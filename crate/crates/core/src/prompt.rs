//! Instance-aware prompt generation and injection.
//!
//! Pass 1 runs the frozen backbone to get node embeddings `H`, projects
//! them through the bottleneck into intermediate prompts `P_c`, quantizes
//! each row against the codebook and adds the shared static prompt:
//! `p_f = p_q + β·p_s`. Pass 2 adds `P_f` to the embedded node features and
//! re-runs the frozen message-passing layers; the mean readout of that is
//! what the classification head sees.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::{readout_mean, Backbone, BoundBackbone};
use crate::error::{Error, Result};
use crate::graph::GraphInstance;
use crate::phm::{BottleneckProjector, BoundProjector};
use crate::rng::{self, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::{Parameters, Tensor};
use crate::vq::{Codebook, CodebookConfig, InitStrategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Use `p_c` directly as the prompt; the codebook is never consulted.
    pub no_vq: bool,
    /// Dense bottleneck of width `hidden / factor` instead of PHM layers.
    pub mlp_projector: bool,
    /// Copy the cross-entropy gradient from `p_q` back to `p_c`.
    pub straight_through: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            no_vq: false,
            mlp_projector: false,
            straight_through: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Bottleneck width `d'`; `None` means `d / 4`.
    pub hidden: Option<usize>,
    pub phm_factor: usize,
    pub beta: f64,
    pub codebook: CodebookConfig,
    pub codebook_init: InitStrategy,
    pub ablation: Ablation,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            hidden: None,
            phm_factor: 4,
            beta: 1.0,
            codebook: CodebookConfig::default(),
            codebook_init: InitStrategy::Gaussian,
            ablation: Ablation::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PromptModel {
    pub projector: BottleneckProjector,
    pub codebook: Codebook,
    pub static_prompt: Tensor,
    pub beta: f64,
    pub ablation: Ablation,
}

impl PromptModel {
    pub fn new(dim: usize, cfg: &PromptConfig, seed: u64) -> Result<Self> {
        if !(cfg.beta >= 0.0) {
            return Err(Error::Config("β must be non-negative".into()));
        }
        let mut init = rng::stream(seed ^ 0x9e37_79b9_7f4a_7c15, Stream::Init);
        let hidden = cfg.hidden.unwrap_or(dim / 4);
        let projector = if cfg.ablation.mlp_projector {
            BottleneckProjector::mlp(dim, (hidden / cfg.phm_factor).max(1), &mut init)?
        } else {
            BottleneckProjector::phm(dim, hidden, cfg.phm_factor, &mut init)?
        };
        let codebook = Codebook::new(cfg.codebook, dim, cfg.codebook_init, seed)?;
        Ok(PromptModel {
            projector,
            codebook,
            static_prompt: Tensor::zeros(&[dim])
                .with_name("prompt.static")
                .trainable(),
            beta: cfg.beta,
            ablation: cfg.ablation,
        })
    }

    pub fn from_parts(
        projector: BottleneckProjector,
        codebook: Codebook,
        static_prompt: Vec<f64>,
        beta: f64,
        ablation: Ablation,
    ) -> Result<Self> {
        let dim = projector.dim();
        if codebook.dim() != dim || static_prompt.len() != dim {
            return Err(Error::dim(
                "prompt model",
                &[dim],
                &[codebook.dim(), static_prompt.len()],
            ));
        }
        if !(beta >= 0.0) {
            return Err(Error::Config("β must be non-negative".into()));
        }
        Ok(PromptModel {
            projector,
            codebook,
            static_prompt: Tensor::new(&[dim], static_prompt)?
                .with_name("prompt.static")
                .trainable(),
            beta,
            ablation,
        })
    }

    pub fn dim(&self) -> usize {
        self.projector.dim()
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundPromptModel> {
        Ok(BoundPromptModel {
            projector: self.projector.bind(tape)?,
            static_prompt: tape.param(&self.static_prompt),
        })
    }
}

/// Trainable by backpropagation: projector and static prompt. The codebook
/// is excluded; it only moves by EMA.
impl Parameters for PromptModel {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut out = self.projector.parameters();
        out.push(&self.static_prompt);
        out
    }
    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.projector.parameters_mut();
        out.push(&mut self.static_prompt);
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundPromptModel {
    pub projector: BoundProjector,
    pub static_prompt: Var,
}

/// Everything pass 1 produced for one graph.
#[derive(Debug, Clone)]
pub struct PromptedBatch {
    pub num_nodes: usize,
    pub dim: usize,
    /// `P_f`, `num_nodes × dim`.
    pub final_prompts: Var,
    /// `P_c` on the tape.
    pub intermediate: Var,
    /// `P_q` values (equal to `P_c` when VQ is off).
    pub quantized: Vec<f64>,
    /// Codebook draws per node; empty when VQ is off.
    pub indices: Vec<Vec<usize>>,
    pub vq_active: bool,
}

impl PromptedBatch {
    pub fn intermediate_row<'t>(&self, tape: &'t Tape, v: usize) -> &'t [f64] {
        &tape.value(self.intermediate)[v * self.dim..(v + 1) * self.dim]
    }

    pub fn quantized_row(&self, v: usize) -> &[f64] {
        &self.quantized[v * self.dim..(v + 1) * self.dim]
    }
}

/// Forward value `p_q`; with `enabled` the gradient arriving at the output
/// is passed to `p_c` unchanged, otherwise `p_q` is a constant.
pub fn straight_through_compose(
    tape: &mut Tape,
    intermediate: Var,
    quantized: &[f64],
    enabled: bool,
) -> Result<Var> {
    if enabled {
        tape.straight_through(intermediate, quantized.to_vec())
    } else {
        let shape = tape.shape(intermediate).to_vec();
        if quantized.len() != shape.iter().product::<usize>() {
            return Err(Error::dim("straight_through", &shape, &[quantized.len()]));
        }
        tape.constant(&shape, quantized.to_vec())
    }
}

/// Pass 1 from precomputed frozen node embeddings `h` (`n × d`, row-major).
pub fn prompts_from_embeddings(
    tape: &mut Tape,
    pm: &mut PromptModel,
    bound: &BoundPromptModel,
    h: &[f64],
) -> Result<PromptedBatch> {
    let d = pm.dim();
    if h.len() % d != 0 {
        return Err(Error::dim("generate_prompts", &[d], &[h.len()]));
    }
    let n = h.len() / d;
    let hv = tape.constant(&[n, d], h.to_vec())?;
    let pc = bound.projector.forward(tape, hv)?;

    let (composed, quantized, indices) = if pm.ablation.no_vq {
        (pc, tape.value(pc).to_vec(), Vec::new())
    } else {
        let pc_values = tape.value(pc).to_vec();
        if pm.codebook.awaiting_rows() {
            pm.codebook.init_from_rows(&pc_values)?;
        }
        let mut quantized = Vec::with_capacity(n * d);
        let mut indices = Vec::with_capacity(n);
        for row in pc_values.chunks(d) {
            let (q, idx) = pm.codebook.quantize(row)?;
            quantized.extend_from_slice(&q);
            indices.push(idx);
        }
        let composed =
            straight_through_compose(tape, pc, &quantized, pm.ablation.straight_through)?;
        (composed, quantized, indices)
    };

    let scaled = tape.scale(bound.static_prompt, pm.beta);
    let final_prompts = tape.add_row(composed, scaled)?;
    Ok(PromptedBatch {
        num_nodes: n,
        dim: d,
        final_prompts,
        intermediate: pc,
        quantized,
        indices,
        vq_active: !pm.ablation.no_vq,
    })
}

/// Pass 1 for a graph: requires a frozen backbone.
pub fn generate_prompts(
    tape: &mut Tape,
    g: &GraphInstance,
    bb: &Backbone,
    pm: &mut PromptModel,
    bound: &BoundPromptModel,
) -> Result<PromptedBatch> {
    if !bb.is_frozen() {
        return Err(Error::Contract("prompt generation needs a frozen backbone".into()));
    }
    if bb.hidden() != pm.dim() {
        return Err(Error::dim("generate_prompts", &[bb.hidden()], &[pm.dim()]));
    }
    let h = bb.embed(g)?;
    prompts_from_embeddings(tape, pm, bound, &h)
}

/// Pass 2: `X_p = encode(X) + P_f`, message passing, mean readout.
pub fn apply_prompts(
    tape: &mut Tape,
    g: &GraphInstance,
    bb: &BoundBackbone,
    final_prompts: Var,
) -> Result<Var> {
    let x = bb.encode_inputs(tape, g)?;
    let xp = tape.add(x, final_prompts)?;
    let agg = bb.aggregation(tape, g)?;
    let h = bb.propagate(tape, xp, agg)?;
    readout_mean(tape, h)
}
