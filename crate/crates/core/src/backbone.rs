//! Message-passing encoder, mean readout and edge-prediction pretraining.
//!
//! Each layer aggregates by the mean over the closed neighborhood
//! `N(v) ∪ {v}` and combines with an affine map followed by ReLU; the last
//! layer stays linear. Raw features are first lifted to the hidden width
//! by `relu(X·W_in + b_in)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Dataset, GraphInstance};
use crate::metrics::roc_auc;
use crate::optim::Adam;
use crate::rng::{self, Rng, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::{Parameters, Tensor};

/// Dense affine map `x·W + b` with `W: in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Glorot-normal weights, zero bias.
    pub fn new(input: usize, output: usize, name: &str, rng: &mut Rng) -> Self {
        let std = libm::sqrt(2.0 / (input + output) as f64);
        Linear {
            weight: Tensor::randn(&[input, output], std, rng)
                .with_name(format!("{name}.weight"))
                .trainable(),
            bias: Tensor::zeros(&[output])
                .with_name(format!("{name}.bias"))
                .trainable(),
        }
    }

    pub fn from_values(input: usize, output: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        Ok(Linear {
            weight: Tensor::new(&[input, output], weight)?.trainable(),
            bias: Tensor::new(&[output], bias)?.trainable(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLinear {
        BoundLinear {
            weight: tape.param(&self.weight),
            bias: tape.param(&self.bias),
        }
    }
}

impl Parameters for Linear {
    fn parameters(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }
    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// A [`Linear`] whose tensors are already on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add_row(y, self.bias)
    }
}

/// One message-passing layer with a square `d × d` weight.
#[derive(Debug, Clone)]
pub struct GcnLayer {
    pub linear: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_dim: 8,
            hidden: 64,
            layers: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub input: Linear,
    pub layers: Vec<GcnLayer>,
    frozen: bool,
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.layers == 0 || cfg.hidden == 0 || cfg.input_dim == 0 {
            return Err(Error::Config(format!("invalid backbone shape {cfg:?}")));
        }
        let input = Linear::new(cfg.input_dim, cfg.hidden, "backbone.input", rng);
        let layers = (0..cfg.layers)
            .map(|l| GcnLayer {
                linear: Linear::new(cfg.hidden, cfg.hidden, &format!("backbone.gcn{l}"), rng),
            })
            .collect();
        Ok(Backbone {
            input,
            layers,
            frozen: false,
        })
    }

    /// Reassembles a backbone from stored layers (e.g. a checkpoint).
    pub fn from_parts(input: Linear, layers: Vec<Linear>) -> Result<Self> {
        let d = input.output_dim();
        if layers.is_empty() {
            return Err(Error::Config("backbone needs at least one layer".into()));
        }
        for l in &layers {
            if l.input_dim() != d || l.output_dim() != d || l.bias.numel() != d {
                return Err(Error::dim("backbone layer", &[d, d], l.weight.shape()));
            }
        }
        let mut bb = Backbone {
            input,
            layers: layers.into_iter().map(|linear| GcnLayer { linear }).collect(),
            frozen: false,
        };
        bb.name_parameters();
        Ok(bb)
    }

    fn name_parameters(&mut self) {
        self.input.weight.set_name("backbone.input.weight");
        self.input.bias.set_name("backbone.input.bias");
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.linear.weight.set_name(format!("backbone.gcn{l}.weight"));
            layer.linear.bias.set_name(format!("backbone.gcn{l}.bias"));
        }
    }

    pub fn config(&self) -> BackboneConfig {
        BackboneConfig {
            input_dim: self.input.input_dim(),
            hidden: self.hidden(),
            layers: self.layers.len(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input.input_dim()
    }

    pub fn hidden(&self) -> usize {
        self.input.output_dim()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// After this no backbone tensor requires or holds a gradient.
    pub fn freeze(&mut self) {
        self.set_trainable(false);
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.set_trainable(true);
        self.frozen = false;
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundBackbone {
        BoundBackbone {
            input: self.input.bind(tape),
            layers: self.layers.iter().map(|l| l.linear.bind(tape)).collect(),
            input_dim: self.input_dim(),
        }
    }

    /// Node embeddings computed on a throwaway tape.
    pub fn embed(&self, g: &GraphInstance) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let h = bound.forward(&mut tape, g)?;
        Ok(tape.value(h).to_vec())
    }
}

impl Parameters for Backbone {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut out = self.input.parameters();
        for l in &self.layers {
            out.extend(l.linear.parameters());
        }
        out
    }
    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.input.parameters_mut();
        for l in &mut self.layers {
            out.extend(l.linear.parameters_mut());
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct BoundBackbone {
    pub input: BoundLinear,
    pub layers: Vec<BoundLinear>,
    input_dim: usize,
}

impl BoundBackbone {
    /// `h⁰ = relu(X·W_in + b_in)`.
    pub fn encode_inputs(&self, tape: &mut Tape, g: &GraphInstance) -> Result<Var> {
        if g.feature_dim() != self.input_dim {
            return Err(Error::Schema(format!(
                "graph features have dim {}, backbone expects {}",
                g.feature_dim(),
                self.input_dim
            )));
        }
        let x = tape.constant(&[g.num_nodes(), g.feature_dim()], g.features().to_vec())?;
        let y = self.input.forward(tape, x)?;
        Ok(tape.relu(y))
    }

    /// Constant aggregation operator for `g`.
    pub fn aggregation(&self, tape: &mut Tape, g: &GraphInstance) -> Result<Var> {
        let n = g.num_nodes();
        tape.constant(&[n, n], g.mean_aggregation_matrix())
    }

    /// All message-passing layers starting from embedded features `h`.
    pub fn propagate(&self, tape: &mut Tape, h: Var, agg: Var) -> Result<Var> {
        let mut h = h;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            h = gcn_forward(tape, h, agg, layer, l != last)?;
        }
        Ok(h)
    }

    /// `H = f(G)`: input encoding followed by every layer.
    pub fn forward(&self, tape: &mut Tape, g: &GraphInstance) -> Result<Var> {
        let h0 = self.encode_inputs(tape, g)?;
        let agg = self.aggregation(tape, g)?;
        self.propagate(tape, h0, agg)
    }
}

/// `m_v = mean(h_u : u ∈ N(v) ∪ {v})`, `h'_v = m_v·W + b`, then ReLU when
/// `activate`.
pub fn gcn_forward(
    tape: &mut Tape,
    h: Var,
    agg: Var,
    layer: &BoundLinear,
    activate: bool,
) -> Result<Var> {
    let m = tape.matmul(agg, h)?;
    let out = layer.forward(tape, m)?;
    Ok(if activate { tape.relu(out) } else { out })
}

/// Column-wise mean of node embeddings.
pub fn readout_mean(tape: &mut Tape, h: Var) -> Result<Var> {
    tape.mean_rows(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Sampled non-edges per existing edge.
    pub neg_ratio: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            neg_ratio: 1,
            lr: 0.005,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean per-graph loss of the untouched backbone.
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub graphs_used: usize,
    pub graphs_skipped: usize,
}

/// Positive pairs (the edges) and `neg_ratio` uniformly drawn non-edges per
/// edge. Returns `(us, vs, targets)`.
fn edge_pairs(
    g: &GraphInstance,
    neg_ratio: usize,
    rng: &mut Rng,
) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
    let n = g.num_nodes();
    let mut us = Vec::new();
    let mut vs = Vec::new();
    let mut targets = Vec::new();
    for &(u, v) in g.edges() {
        us.push(u);
        vs.push(v);
        targets.push(1.0);
    }
    let max_pairs = n * (n - 1) / 2;
    if g.edges().len() < max_pairs {
        let adj = g.neighbors();
        for _ in 0..g.edges().len() * neg_ratio {
            loop {
                let u = rng.random_range(0..n);
                let v = rng.random_range(0..n);
                if u != v && adj[u].binary_search(&v).is_err() {
                    us.push(u);
                    vs.push(v);
                    targets.push(0.0);
                    break;
                }
            }
        }
    }
    (us, vs, targets)
}

fn edge_logits(tape: &mut Tape, h: Var, us: &[usize], vs: &[usize]) -> Result<Var> {
    let hu = tape.select_rows(h, us)?;
    let hv = tape.select_rows(h, vs)?;
    let prod = tape.mul(hu, hv)?;
    tape.sum_cols(prod)
}

fn usable(g: &GraphInstance) -> bool {
    g.num_nodes() >= 2 && !g.edges().is_empty()
}

/// Trains the backbone so that `σ(H_u·H_v)` predicts edges against sampled
/// non-edges. Graphs with fewer than two nodes or no edges are skipped.
pub fn pretrain_edge_prediction(
    ds: &Dataset,
    bb: &mut Backbone,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if bb.is_frozen() {
        return Err(Error::Pretrain("backbone is frozen".into()));
    }
    if cfg.neg_ratio == 0 {
        return Err(Error::Pretrain("neg_ratio 0 leaves only positive targets".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).filter(|&i| usable(&ds.graphs()[i])).collect();
    if order.is_empty() {
        return Err(Error::Pretrain("dataset has no edges".into()));
    }
    let skipped = ds.len() - order.len();
    let mut neg_rng = rng::stream(cfg.seed, Stream::Negatives);
    let mut shuffle_rng = rng::stream(cfg.seed, Stream::Shuffle);
    let mut opt = Adam::new(cfg.lr)?;

    let mut initial = 0.0;
    for &i in &order {
        let g = &ds.graphs()[i];
        let mut tape = Tape::new();
        let bound = bb.bind(&mut tape);
        let loss = graph_edge_loss(&mut tape, &bound, g, cfg.neg_ratio, &mut neg_rng)?;
        initial += tape.scalar(loss);
    }
    initial /= order.len() as f64;

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let bound = bb.bind(&mut tape);
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let l =
                    graph_edge_loss(&mut tape, &bound, &ds.graphs()[i], cfg.neg_ratio, &mut neg_rng)?;
                losses.push(l);
            }
            let mut sum = losses[0];
            for &l in &losses[1..] {
                sum = tape.add(sum, l)?;
            }
            let loss = tape.scale(sum, 1.0 / batch.len() as f64);
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NumericalAbort {
                    lr: cfg.lr,
                    epoch,
                    batch: b,
                    loss: value,
                    grad_norms: Vec::new(),
                });
            }
            total += tape.scalar(sum);
            let grads = tape.backward(loss)?;
            let mut params = bb.parameters_mut();
            params.iter_mut().for_each(|p| p.zero_grad());
            grads.accumulate(params.iter_mut().map(|p| &mut **p));
            opt.step(&mut params)?;
        }
        epoch_losses.push(total / order.len() as f64);
    }
    Ok(PretrainReport {
        initial_loss: initial,
        epoch_losses,
        graphs_used: order.len(),
        graphs_skipped: skipped,
    })
}

fn graph_edge_loss(
    tape: &mut Tape,
    bound: &BoundBackbone,
    g: &GraphInstance,
    neg_ratio: usize,
    rng: &mut Rng,
) -> Result<Var> {
    let h = bound.forward(tape, g)?;
    let (us, vs, targets) = edge_pairs(g, neg_ratio, rng);
    let logits = edge_logits(tape, h, &us, &vs)?;
    let mask = vec![true; targets.len()];
    tape.masked_bce_with_logits(logits, &targets, &mask)
}

/// ROC-AUC of `H_u·H_v` scores for existing edges against sampled
/// non-edges, pooled over `graphs`.
pub fn edge_prediction_auc(
    bb: &Backbone,
    graphs: &[GraphInstance],
    neg_ratio: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = rng::stream(seed, Stream::Eval);
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for g in graphs.iter().filter(|g| usable(g)) {
        let mut tape = Tape::new();
        let bound = bb.bind(&mut tape);
        let h = bound.forward(&mut tape, g)?;
        let (us, vs, targets) = edge_pairs(g, neg_ratio.max(1), &mut rng);
        let logits = edge_logits(&mut tape, h, &us, &vs)?;
        scores.extend_from_slice(tape.value(logits));
        labels.extend(targets.iter().map(|t| *t > 0.5));
    }
    roc_auc(&scores, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Label;

    fn backbone(input: usize, hidden: usize, layers: usize, seed: u64) -> Backbone {
        let mut rng = rng::stream(seed, Stream::Init);
        Backbone::new(
            &BackboneConfig {
                input_dim: input,
                hidden,
                layers,
            },
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn zero_features_and_bias_give_zero_embedding() {
        let mut bb = backbone(3, 4, 1, 0);
        bb.input.bias.values_mut().fill(0.0);
        let g = GraphInstance::new(2, 3, vec![0.0; 6], vec![(0, 1)], Label::Class(0)).unwrap();
        let mut tape = Tape::new();
        let bound = bb.bind(&mut tape);
        let h0 = bound.encode_inputs(&mut tape, &g).unwrap();
        assert!(tape.value(h0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn isolated_node_aggregates_to_itself() {
        let bb = backbone(2, 3, 1, 1);
        let g = GraphInstance::new(1, 2, vec![0.3, -0.7], vec![], Label::Class(0)).unwrap();
        let mut tape = Tape::new();
        let bound = bb.bind(&mut tape);
        let h0 = bound.encode_inputs(&mut tape, &g).unwrap();
        let agg = bound.aggregation(&mut tape, &g).unwrap();
        let m = tape.matmul(agg, h0).unwrap();
        assert_eq!(tape.value(m), tape.value(h0));
    }

    #[test]
    fn feature_dim_mismatch_is_schema_error() {
        let bb = backbone(2, 3, 1, 1);
        let g = GraphInstance::new(1, 3, vec![0.0; 3], vec![], Label::Class(0)).unwrap();
        assert!(matches!(bb.embed(&g), Err(Error::Schema(_))));
    }

    #[test]
    fn readout_of_opposite_rows_is_zero() {
        let mut tape = Tape::new();
        let h = tape
            .constant(&[2, 3], vec![1.0, -2.0, 0.5, -1.0, 2.0, -0.5])
            .unwrap();
        let z = readout_mean(&mut tape, h).unwrap();
        assert_eq!(tape.value(z), &[0.0, 0.0, 0.0]);
        let empty = tape.constant(&[0, 3], vec![]).unwrap();
        assert!(matches!(readout_mean(&mut tape, empty), Err(Error::Degenerate(_))));
    }

    #[test]
    fn pretraining_guards() {
        let g = GraphInstance::new(3, 2, vec![0.0; 6], vec![], Label::Class(0)).unwrap();
        let ds = Dataset::new(vec![g], None).unwrap();
        let mut bb = backbone(2, 4, 1, 0);
        let cfg = PretrainConfig::default();
        assert!(matches!(
            pretrain_edge_prediction(&ds, &mut bb, &cfg),
            Err(Error::Pretrain(_))
        ));
        let cfg0 = PretrainConfig {
            neg_ratio: 0,
            ..cfg
        };
        assert!(pretrain_edge_prediction(&ds, &mut bb, &cfg0).is_err());
        bb.freeze();
        assert!(pretrain_edge_prediction(&ds, &mut bb, &cfg).is_err());
    }

    #[test]
    fn freeze_is_total() {
        let mut bb = backbone(2, 4, 2, 0);
        bb.freeze();
        assert!(bb.parameters().iter().all(|p| !p.requires_grad()));
        bb.unfreeze();
        assert!(bb.parameters().iter().all(|p| p.requires_grad()));
    }
}
