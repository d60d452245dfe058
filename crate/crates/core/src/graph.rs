//! Graph instances, datasets, the synthetic cluster-mixture generator,
//! k-shot splitting and ego-subgraph extraction.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Target of one graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Label {
    /// Single-label multiclass.
    Class(usize),
    /// One binary target per task; `None` marks a missing label.
    MultiTask(Vec<Option<bool>>),
}

/// One undirected, unweighted graph with node features.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInstance {
    num_nodes: usize,
    feature_dim: usize,
    features: Vec<f64>,
    edges: Vec<(usize, usize)>,
    pub label: Label,
    /// Optional per-node labels (cluster ids for synthetic data, node classes
    /// for node-level datasets).
    pub node_labels: Option<Vec<usize>>,
}

impl GraphInstance {
    /// Validates feature shape and edges. Self-loops and repeated undirected
    /// pairs are rejected; stored edge order is preserved.
    pub fn new(
        num_nodes: usize,
        feature_dim: usize,
        features: Vec<f64>,
        edges: Vec<(usize, usize)>,
        label: Label,
    ) -> Result<Self> {
        if features.len() != num_nodes * feature_dim {
            return Err(Error::Schema(format!(
                "{} feature values for {num_nodes} nodes of dim {feature_dim}",
                features.len()
            )));
        }
        let mut seen = alloc::collections::BTreeSet::new();
        for &(u, v) in &edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::Schema(format!(
                    "edge ({u}, {v}) has an endpoint outside {num_nodes} nodes"
                )));
            }
            if u == v {
                return Err(Error::Schema(format!("self-loop on node {u}")));
            }
            if !seen.insert((u.min(v), u.max(v))) {
                return Err(Error::Schema(format!("edge ({u}, {v}) stored twice")));
            }
        }
        Ok(GraphInstance {
            num_nodes,
            feature_dim,
            features,
            edges,
            label,
            node_labels: None,
        })
    }

    pub fn with_node_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.num_nodes {
            return Err(Error::Schema(format!(
                "{} node labels for {} nodes",
                labels.len(),
                self.num_nodes
            )));
        }
        self.node_labels = Some(labels);
        Ok(self)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Row-major `num_nodes × feature_dim` matrix.
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn node_features(&self, v: usize) -> &[f64] {
        &self.features[v * self.feature_dim..(v + 1) * self.feature_dim]
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Symmetrized adjacency lists, neighbors in ascending order.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        adj.iter_mut().for_each(|n| n.sort_unstable());
        adj
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.edges
            .iter()
            .any(|&(a, b)| (a == u && b == v) || (a == v && b == u))
    }

    /// Row-normalized adjacency with self-loops: row `v` averages over
    /// `N(v) ∪ {v}`.
    pub fn mean_aggregation_matrix(&self) -> Vec<f64> {
        let n = self.num_nodes;
        let mut m = vec![0.0; n * n];
        for (v, nbrs) in self.neighbors().iter().enumerate() {
            let w = 1.0 / (nbrs.len() + 1) as f64;
            m[v * n + v] = w;
            for &u in nbrs {
                m[v * n + u] = w;
            }
        }
        m
    }

    /// Applies a node relabeling: node `v` becomes `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_nodes;
        if perm.len() != n {
            return Err(Error::dim("permuted", &[n], &[perm.len()]));
        }
        let d = self.feature_dim;
        let mut features = vec![0.0; n * d];
        for v in 0..n {
            features[perm[v] * d..(perm[v] + 1) * d].copy_from_slice(self.node_features(v));
        }
        let edges = self.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        let mut g = GraphInstance::new(n, d, features, edges, self.label.clone())?;
        if let Some(labels) = &self.node_labels {
            let mut out = vec![0; n];
            for v in 0..n {
                out[perm[v]] = labels[v];
            }
            g.node_labels = Some(out);
        }
        Ok(g)
    }
}

/// Arity of a dataset's targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    MultiClass { classes: usize },
    MultiTask { tasks: usize },
}

impl TaskKind {
    /// Width of the classifier output.
    pub fn outputs(&self) -> usize {
        match *self {
            TaskKind::MultiClass { classes } => classes,
            TaskKind::MultiTask { tasks } => tasks,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    graphs: Vec<GraphInstance>,
    task: TaskKind,
    feature_dim: Option<usize>,
}

impl Dataset {
    /// Checks that every graph shares the feature dimension and label arity.
    /// Multiclass class count is `max label + 1` unless given.
    pub fn new(graphs: Vec<GraphInstance>, classes: Option<usize>) -> Result<Self> {
        let feature_dim = graphs.first().map(|g| g.feature_dim);
        let mut task = None;
        for (i, g) in graphs.iter().enumerate() {
            if Some(g.feature_dim) != feature_dim {
                return Err(Error::Schema(format!(
                    "graph {i} has feature dim {}, expected {}",
                    g.feature_dim,
                    feature_dim.unwrap_or(0)
                )));
            }
            let this = match &g.label {
                Label::Class(_) => TaskKind::MultiClass { classes: 0 },
                Label::MultiTask(t) => TaskKind::MultiTask { tasks: t.len() },
            };
            match task {
                None => task = Some(this),
                Some(prev) if prev == this => {}
                Some(_) => {
                    return Err(Error::Schema(format!(
                        "graph {i} has a different label kind or task count"
                    )))
                }
            }
        }
        let task = match task {
            Some(TaskKind::MultiClass { .. }) | None => {
                let max = graphs
                    .iter()
                    .filter_map(|g| match g.label {
                        Label::Class(c) => Some(c + 1),
                        _ => None,
                    })
                    .max()
                    .unwrap_or(0);
                let classes = classes.unwrap_or(max);
                if classes < max {
                    return Err(Error::Schema(format!(
                        "label {} exceeds declared {classes} classes",
                        max - 1
                    )));
                }
                TaskKind::MultiClass { classes }
            }
            Some(t) => t,
        };
        Ok(Dataset {
            graphs,
            task,
            feature_dim,
        })
    }

    pub fn graphs(&self) -> &[GraphInstance] {
        &self.graphs
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    /// Undefined for an empty dataset.
    pub fn feature_dim(&self) -> Result<usize> {
        self.feature_dim
            .ok_or_else(|| Error::Schema("empty dataset has no feature dimension".into()))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.task.outputs()];
        if let TaskKind::MultiClass { .. } = self.task {
            for g in &self.graphs {
                if let Label::Class(c) = g.label {
                    counts[c] += 1;
                }
            }
        }
        counts
    }

    /// Dataset made of the graphs at `indices`, keeping the task arity.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut graphs = Vec::with_capacity(indices.len());
        for &i in indices {
            graphs.push(
                self.graphs
                    .get(i)
                    .ok_or(Error::Index {
                        index: i,
                        len: self.graphs.len(),
                    })?
                    .clone(),
            );
        }
        Ok(Dataset {
            graphs,
            task: self.task,
            feature_dim: self.feature_dim,
        })
    }
}

/// Parameters of the cluster-mixture generator.
///
/// There are `2 * classes` Gaussian clusters with pairwise centroid
/// distance 1. Class `c` owns clusters `2c` and `2c + 1`; a node of a
/// class-`c` graph is drawn from one of its own clusters with probability
/// `1 - mixing`, otherwise from a uniformly chosen cluster of any class.
/// Edges form a random spanning tree plus extra pairs; in both, same-cluster
/// pairs are `homophily` times likelier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub graphs_per_class: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub feature_dim: usize,
    pub noise: f64,
    pub mixing: f64,
    pub extra_edge_prob: f64,
    pub homophily: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 2,
            graphs_per_class: 100,
            min_nodes: 8,
            max_nodes: 16,
            feature_dim: 8,
            noise: 0.1,
            mixing: 0.3,
            extra_edge_prob: 0.1,
            homophily: 10.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn clusters(&self) -> usize {
        2 * self.classes
    }

    /// Cluster centroids `e_i / √2`: pairwise distance exactly 1.
    pub fn centroids(&self) -> Vec<Vec<f64>> {
        let s = core::f64::consts::FRAC_1_SQRT_2;
        (0..self.clusters())
            .map(|i| {
                let mut c = vec![0.0; self.feature_dim];
                c[i] = s;
                c
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.graphs_per_class == 0 {
            return Err(Error::Config("need at least one class and one graph per class".into()));
        }
        if self.min_nodes == 0 || self.min_nodes > self.max_nodes {
            return Err(Error::Config(format!(
                "node range {}..={} is empty",
                self.min_nodes, self.max_nodes
            )));
        }
        if self.feature_dim < self.clusters() {
            return Err(Error::Config(format!(
                "feature dim {} cannot hold {} orthogonal centroids",
                self.feature_dim,
                self.clusters()
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.mixing) || !(0.0..=1.0).contains(&self.extra_edge_prob) {
            return Err(Error::Config("mixing and edge probability must lie in [0, 1]".into()));
        }
        if !(self.homophily > 0.0) {
            return Err(Error::Config("homophily must be positive".into()));
        }
        Ok(())
    }
}

/// Deterministic under `spec.seed`. Graphs are ordered class by class.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, Stream::Data);
    let centroids = spec.centroids();
    let clusters = spec.clusters();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let d = spec.feature_dim;
    let mut graphs = Vec::with_capacity(spec.classes * spec.graphs_per_class);

    for class in 0..spec.classes {
        for _ in 0..spec.graphs_per_class {
            let n = rng.random_range(spec.min_nodes..=spec.max_nodes);
            let mut assign = Vec::with_capacity(n);
            for _ in 0..n {
                let c = if rng.random::<f64>() < spec.mixing {
                    rng.random_range(0..clusters)
                } else {
                    2 * class + rng.random_range(0..2)
                };
                assign.push(c);
            }
            let mut features = Vec::with_capacity(n * d);
            for &c in &assign {
                for j in 0..d {
                    let eps: f64 = normal.sample(&mut rng);
                    features.push(centroids[c][j] + spec.noise * eps);
                }
            }
            let mut edges = Vec::new();
            for v in 1..n {
                let w = |u: usize| if assign[u] == assign[v] { spec.homophily } else { 1.0 };
                let total: f64 = (0..v).map(w).sum();
                let mut r = rng.random::<f64>() * total;
                let mut parent = v - 1;
                for u in 0..v {
                    r -= w(u);
                    if r < 0.0 {
                        parent = u;
                        break;
                    }
                }
                edges.push((parent, v));
            }
            let base = spec.extra_edge_prob;
            for u in 0..n {
                for v in (u + 1)..n {
                    if edges.contains(&(u, v)) {
                        continue;
                    }
                    let p = if assign[u] == assign[v] {
                        (base * spec.homophily).min(1.0)
                    } else {
                        base
                    };
                    if rng.random::<f64>() < p {
                        edges.push((u, v));
                    }
                }
            }
            let g = GraphInstance::new(n, d, features, edges, Label::Class(class))?
                .with_node_labels(assign)?;
            graphs.push(g);
        }
    }
    Dataset::new(graphs, Some(spec.classes))
}

/// How to partition a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SplitSpec {
    /// Exactly `shots` training graphs per class; the remainder is divided
    /// into validation (`val_fraction` of it) and test.
    Shots {
        shots: usize,
        val_fraction: f64,
        seed: u64,
    },
    Fractions {
        train: f64,
        val: f64,
        test: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn kshot_split(ds: &Dataset, spec: &SplitSpec) -> Result<Split> {
    match *spec {
        SplitSpec::Shots {
            shots,
            val_fraction,
            seed,
        } => {
            if shots == 0 {
                return Err(Error::Config("shots must be at least 1".into()));
            }
            if !(0.0..=1.0).contains(&val_fraction) {
                return Err(Error::Config("val fraction must lie in [0, 1]".into()));
            }
            let TaskKind::MultiClass { classes } = ds.task() else {
                return Err(Error::Config(
                    "k-shot splits need single-label classes; use fractions".into(),
                ));
            };
            let mut rng = rng::stream(seed, Stream::Split);
            let mut by_class = vec![Vec::new(); classes];
            for (i, g) in ds.graphs().iter().enumerate() {
                if let Label::Class(c) = g.label {
                    by_class[c].push(i);
                }
            }
            let mut train = Vec::new();
            let mut rest = Vec::new();
            for (class, mut members) in by_class.into_iter().enumerate() {
                if members.len() < shots {
                    return Err(Error::InsufficientData {
                        class,
                        have: members.len(),
                        need: shots,
                    });
                }
                members.shuffle(&mut rng);
                train.extend_from_slice(&members[..shots]);
                rest.extend_from_slice(&members[shots..]);
            }
            rest.shuffle(&mut rng);
            let n_val = libm::round(rest.len() as f64 * val_fraction) as usize;
            let test = rest.split_off(n_val);
            train.sort_unstable();
            rest.sort_unstable();
            let mut test = test;
            test.sort_unstable();
            Ok(Split {
                train,
                val: rest,
                test,
            })
        }
        SplitSpec::Fractions {
            train,
            val,
            test,
            seed,
        } => {
            if [train, val, test].iter().any(|f| !(0.0..=1.0).contains(f))
                || (train + val + test - 1.0).abs() > 1e-9
            {
                return Err(Error::Config(format!(
                    "fractions {train} + {val} + {test} must sum to 1"
                )));
            }
            let mut rng = rng::stream(seed, Stream::Split);
            let mut idx: Vec<usize> = (0..ds.len()).collect();
            idx.shuffle(&mut rng);
            let n_train = libm::round(ds.len() as f64 * train) as usize;
            let n_val = (libm::round(ds.len() as f64 * val) as usize).min(ds.len() - n_train);
            let mut tr = idx[..n_train].to_vec();
            let mut va = idx[n_train..n_train + n_val].to_vec();
            let mut te = idx[n_train + n_val..].to_vec();
            tr.sort_unstable();
            va.sort_unstable();
            te.sort_unstable();
            Ok(Split {
                train: tr,
                val: va,
                test: te,
            })
        }
    }
}

/// Induced subgraph on every node within `hops` of `center`, with `center`
/// as node 0 and the rest in BFS discovery order. The label becomes the
/// center's node label.
pub fn ego_subgraph(g: &GraphInstance, center: usize, hops: usize) -> Result<GraphInstance> {
    if center >= g.num_nodes() {
        return Err(Error::Index {
            index: center,
            len: g.num_nodes(),
        });
    }
    let node_labels = g
        .node_labels
        .as_ref()
        .ok_or_else(|| Error::Schema("ego subgraphs need node labels".into()))?;
    let adj = g.neighbors();
    let mut depth = vec![usize::MAX; g.num_nodes()];
    let mut order = vec![center];
    let mut queue = VecDeque::from([center]);
    depth[center] = 0;
    while let Some(v) = queue.pop_front() {
        if depth[v] == hops {
            continue;
        }
        for &u in &adj[v] {
            if depth[u] == usize::MAX {
                depth[u] = depth[v] + 1;
                order.push(u);
                queue.push_back(u);
            }
        }
    }
    let mut remap = vec![usize::MAX; g.num_nodes()];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new;
    }
    let d = g.feature_dim();
    let features = order
        .iter()
        .flat_map(|&v| g.node_features(v).iter().copied())
        .collect();
    let edges = g
        .edges()
        .iter()
        .filter(|&&(u, v)| remap[u] != usize::MAX && remap[v] != usize::MAX)
        .map(|&(u, v)| (remap[u], remap[v]))
        .collect();
    let labels = order.iter().map(|&v| node_labels[v]).collect();
    GraphInstance::new(
        order.len(),
        d,
        features,
        edges,
        Label::Class(node_labels[center]),
    )?
    .with_node_labels(labels)
}

/// Turns a node-labeled graph into one ego-subgraph instance per node.
pub fn ego_dataset(g: &GraphInstance, hops: usize, classes: Option<usize>) -> Result<Dataset> {
    let graphs = (0..g.num_nodes())
        .map(|v| ego_subgraph(g, v, hops))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(graphs, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> GraphInstance {
        GraphInstance::new(
            3,
            1,
            vec![1.0, 2.0, 3.0],
            vec![(0, 1), (1, 2)],
            Label::Class(0),
        )
        .unwrap()
        .with_node_labels(vec![0, 1, 0])
        .unwrap()
    }

    #[test]
    fn rejects_bad_edges() {
        let e = GraphInstance::new(5, 1, vec![0.0; 5], vec![(0, 7)], Label::Class(0));
        assert!(matches!(e, Err(Error::Schema(_))));
        let dup = GraphInstance::new(3, 1, vec![0.0; 3], vec![(0, 1), (1, 0)], Label::Class(0));
        assert!(dup.is_err());
        let lp = GraphInstance::new(3, 1, vec![0.0; 3], vec![(1, 1)], Label::Class(0));
        assert!(lp.is_err());
    }

    #[test]
    fn mixed_feature_dims_are_a_schema_error() {
        let a = GraphInstance::new(1, 2, vec![0.0; 2], vec![], Label::Class(0)).unwrap();
        let b = GraphInstance::new(1, 3, vec![0.0; 3], vec![], Label::Class(0)).unwrap();
        assert!(matches!(Dataset::new(vec![a, b], None), Err(Error::Schema(_))));
        assert!(Dataset::new(vec![], None).unwrap().feature_dim().is_err());
    }

    #[test]
    fn zero_noise_puts_nodes_on_centroids() {
        let spec = SynthSpec {
            noise: 0.0,
            graphs_per_class: 5,
            ..SynthSpec::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let centroids = spec.centroids();
        for g in ds.graphs() {
            let labels = g.node_labels.as_ref().unwrap();
            for v in 0..g.num_nodes() {
                assert_eq!(g.node_features(v), centroids[labels[v]].as_slice());
            }
        }
    }

    #[test]
    fn generator_is_deterministic_and_guards_spec() {
        let spec = SynthSpec::default();
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let bad = SynthSpec {
            classes: 0,
            ..SynthSpec::default()
        };
        assert!(matches!(generate_synthetic(&bad), Err(Error::Config(_))));
        let bad = SynthSpec {
            graphs_per_class: 0,
            ..SynthSpec::default()
        };
        assert!(generate_synthetic(&bad).is_err());
    }

    #[test]
    fn one_shot_two_classes() {
        let ds = generate_synthetic(&SynthSpec {
            graphs_per_class: 10,
            ..SynthSpec::default()
        })
        .unwrap();
        let split = kshot_split(
            &ds,
            &SplitSpec::Shots {
                shots: 1,
                val_fraction: 0.5,
                seed: 3,
            },
        )
        .unwrap();
        assert_eq!(split.train.len(), 2);
        assert_eq!(split.val.len() + split.test.len(), 18);
    }

    #[test]
    fn too_few_instances_names_class() {
        let ds = generate_synthetic(&SynthSpec {
            graphs_per_class: 3,
            ..SynthSpec::default()
        })
        .unwrap();
        let err = kshot_split(
            &ds,
            &SplitSpec::Shots {
                shots: 4,
                val_fraction: 0.5,
                seed: 0,
            },
        )
        .unwrap_err();
        assert_eq!(
            err,
            Error::InsufficientData {
                class: 0,
                have: 3,
                need: 4
            }
        );
    }

    #[test]
    fn ego_zero_hops_and_isolated() {
        let g = path3();
        let e = ego_subgraph(&g, 1, 0).unwrap();
        assert_eq!(e.num_nodes(), 1);
        assert_eq!(e.features(), &[2.0]);
        assert_eq!(e.label, Label::Class(1));

        let iso = GraphInstance::new(2, 1, vec![5.0, 6.0], vec![], Label::Class(0))
            .unwrap()
            .with_node_labels(vec![1, 0])
            .unwrap();
        let e = ego_subgraph(&iso, 0, 3).unwrap();
        assert_eq!(e.num_nodes(), 1);
        assert_eq!(e.features(), &[5.0]);

        assert!(matches!(ego_subgraph(&g, 3, 1), Err(Error::Index { .. })));
    }

    #[test]
    fn ego_path_center() {
        let e = ego_subgraph(&path3(), 1, 1).unwrap();
        assert_eq!(e.num_nodes(), 3);
        assert_eq!(e.edges().len(), 2);
        assert_eq!(e.node_features(0), &[2.0]);
    }

    #[test]
    fn aggregation_rows_sum_to_one() {
        let m = path3().mean_aggregation_matrix();
        assert_eq!(&m[0..3], &[0.5, 0.5, 0.0]);
        let third = 1.0 / 3.0;
        assert_eq!(&m[3..6], &[third, third, third]);
    }
}
