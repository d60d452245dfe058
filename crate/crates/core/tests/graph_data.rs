use std::collections::BTreeSet;

use gprompt_core::backbone::{
    edge_prediction_auc, pretrain_edge_prediction, readout_mean, Backbone, BackboneConfig,
    PretrainConfig,
};
use gprompt_core::graph::{
    ego_subgraph, generate_synthetic, kshot_split, Dataset, GraphInstance, Label, SplitSpec,
    SynthSpec,
};
use gprompt_core::rng::{self, Stream};
use gprompt_core::tape::Tape;
use gprompt_core::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng as _;

fn random_graph(n: usize, d: usize, p: f64, seed: u64) -> GraphInstance {
    let mut rng = rng::stream(seed, Stream::Data);
    let features = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let labels = (0..n).map(|_| rng.random_range(0..3)).collect();
    GraphInstance::new(n, d, features, edges, Label::Class(0))
        .unwrap()
        .with_node_labels(labels)
        .unwrap()
}

#[test]
fn nearest_centroid_separates_classes() {
    let spec = SynthSpec::default();
    let ds = generate_synthetic(&spec).unwrap();
    let centroids = spec.centroids();
    let d = spec.feature_dim;
    let overall: Vec<f64> = (0..d)
        .map(|j| centroids.iter().map(|c| c[j]).sum::<f64>() / centroids.len() as f64)
        .collect();
    // Expected mean node feature of each class under its mixture recipe.
    let prototypes: Vec<Vec<f64>> = (0..spec.classes)
        .map(|c| {
            (0..d)
                .map(|j| {
                    let own = (centroids[2 * c][j] + centroids[2 * c + 1][j]) / 2.0;
                    (1.0 - spec.mixing) * own + spec.mixing * overall[j]
                })
                .collect()
        })
        .collect();
    let mut correct = 0;
    for g in ds.graphs() {
        let n = g.num_nodes() as f64;
        let mean: Vec<f64> = (0..d)
            .map(|j| (0..g.num_nodes()).map(|v| g.node_features(v)[j]).sum::<f64>() / n)
            .collect();
        let dist = |p: &Vec<f64>| mean.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let guess = (0..spec.classes)
            .min_by(|&a, &b| dist(&prototypes[a]).total_cmp(&dist(&prototypes[b])))
            .unwrap();
        correct += usize::from(g.label == Label::Class(guess));
    }
    let acc = correct as f64 / ds.len() as f64;
    assert!(acc >= 0.95, "nearest-centroid accuracy {acc}");
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
        let clusters = g.node_labels.as_ref().unwrap();
        for v in 0..g.num_nodes() {
            assert_eq!(g.node_features(v), centroids[clusters[v]].as_slice());
        }
    }
}

#[test]
fn generator_is_deterministic_and_guarded() {
    let spec = SynthSpec {
        seed: 9,
        ..SynthSpec::default()
    };
    assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
    for bad in [
        SynthSpec {
            classes: 0,
            ..SynthSpec::default()
        },
        SynthSpec {
            graphs_per_class: 0,
            ..SynthSpec::default()
        },
    ] {
        assert!(generate_synthetic(&bad).is_err());
    }
}

#[test]
fn kshot_split_draws_exact_shots() {
    let ds = generate_synthetic(&SynthSpec::default()).unwrap();
    let spec = SplitSpec::Shots {
        shots: 50,
        val_fraction: 0.5,
        seed: 3,
    };
    let split = kshot_split(&ds, &spec).unwrap();
    for class in 0..2 {
        let n = split
            .train
            .iter()
            .filter(|&&i| ds.graphs()[i].label == Label::Class(class))
            .count();
        assert_eq!(n, 50);
    }
    let all: BTreeSet<usize> = split.train.iter().chain(&split.val).chain(&split.test).copied().collect();
    assert_eq!(all.len(), ds.len());
    assert_eq!(split.val.len(), 50);
    assert_eq!(split, kshot_split(&ds, &spec).unwrap());
}

#[test]
fn insufficient_class_is_named() {
    let ds = generate_synthetic(&SynthSpec {
        graphs_per_class: 4,
        ..SynthSpec::default()
    })
    .unwrap();
    let err = kshot_split(
        &ds,
        &SplitSpec::Shots {
            shots: 5,
            val_fraction: 0.5,
            seed: 0,
        },
    )
    .unwrap_err();
    assert!(matches!(err, Error::InsufficientData { class: 0, have: 4, need: 5 }));
}

#[test]
fn path_ego_network() {
    let g = GraphInstance::new(3, 1, vec![0.0, 1.0, 2.0], vec![(0, 1), (1, 2)], Label::Class(0))
        .unwrap()
        .with_node_labels(vec![4, 5, 6])
        .unwrap();
    let ego = ego_subgraph(&g, 1, 1).unwrap();
    assert_eq!(ego.num_nodes(), 3);
    assert_eq!(ego.edges().len(), 2);
    assert_eq!(ego.label, Label::Class(5));
    assert_eq!(ego.node_features(0), &[1.0]);
}

/// All-pairs hop distances by Floyd–Warshall.
fn hop_distances(g: &GraphInstance) -> Vec<Vec<usize>> {
    let n = g.num_nodes();
    let inf = usize::MAX / 2;
    let mut d = vec![vec![inf; n]; n];
    for (v, row) in d.iter_mut().enumerate() {
        row[v] = 0;
    }
    for &(u, v) in g.edges() {
        d[u][v] = 1;
        d[v][u] = 1;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d
}

#[test]
fn ego_subgraphs_match_distance_oracle() {
    let mut rng = rng::stream(11, Stream::Data);
    for t in 0..1000u64 {
        let n = rng.random_range(1..12);
        let g = random_graph(n, 2, rng.random_range(0.05..0.5), t);
        let center = rng.random_range(0..n);
        let hops = rng.random_range(0..4);
        let ego = ego_subgraph(&g, center, hops).unwrap();
        let dist = hop_distances(&g);
        let kept: Vec<usize> = (0..n).filter(|&v| dist[center][v] <= hops).collect();
        assert_eq!(ego.num_nodes(), kept.len(), "triple {t}");
        let want_edges = g
            .edges()
            .iter()
            .filter(|(u, v)| kept.contains(u) && kept.contains(v))
            .count();
        assert_eq!(ego.edges().len(), want_edges, "triple {t}");
        let got: BTreeSet<Vec<u64>> = (0..ego.num_nodes())
            .map(|v| ego.node_features(v).iter().map(|x| x.to_bits()).collect())
            .collect();
        let want: BTreeSet<Vec<u64>> = kept
            .iter()
            .map(|&v| g.node_features(v).iter().map(|x| x.to_bits()).collect())
            .collect();
        assert_eq!(got, want, "triple {t}");
    }
}

#[test]
fn triangle_aggregation_is_full_mean() {
    let g = GraphInstance::new(3, 1, vec![1.0, 2.0, 6.0], vec![(0, 1), (1, 2), (0, 2)], Label::Class(0)).unwrap();
    let m = g.mean_aggregation_matrix();
    for v in 0..3 {
        let mixed: f64 = (0..3).map(|u| m[v * 3 + u] * g.node_features(u)[0]).sum();
        assert!((mixed - 3.0).abs() < 1e-15);
    }
}

fn backbone(seed: u64, input: usize) -> Backbone {
    Backbone::new(
        &BackboneConfig {
            input_dim: input,
            hidden: 8,
            layers: 2,
        },
        &mut rng::stream(seed, Stream::Init),
    )
    .unwrap()
}

#[test]
fn untrained_edge_loss_is_near_ln2() {
    let ds = generate_synthetic(&SynthSpec::default()).unwrap();
    let mut bb = Backbone::new(&BackboneConfig::default(), &mut rng::stream(0, Stream::Init)).unwrap();
    let report = pretrain_edge_prediction(
        &ds,
        &mut bb,
        &PretrainConfig {
            epochs: 0,
            ..PretrainConfig::default()
        },
    )
    .unwrap();
    assert!((report.initial_loss - std::f64::consts::LN_2).abs() <= 0.15, "{}", report.initial_loss);
}

#[test]
fn pretraining_generalizes_to_held_out_graphs() {
    let ds = generate_synthetic(&SynthSpec::default()).unwrap();
    let train: Vec<usize> = (0..ds.len()).filter(|i| i % 4 != 0).collect();
    let held: Vec<usize> = (0..ds.len()).filter(|i| i % 4 == 0).collect();
    let mut bb = Backbone::new(&BackboneConfig::default(), &mut rng::stream(0, Stream::Init)).unwrap();
    let cfg = PretrainConfig::default();
    let report = pretrain_edge_prediction(&ds.subset(&train).unwrap(), &mut bb, &cfg).unwrap();
    assert!(report.epoch_losses.last().unwrap() < &report.initial_loss);
    let auc = edge_prediction_auc(&bb, ds.subset(&held).unwrap().graphs(), 1, 0).unwrap();
    assert!(auc >= 0.75, "held-out edge AUC {auc}");
}

#[test]
fn pretraining_guards() {
    let ds = generate_synthetic(&SynthSpec {
        graphs_per_class: 2,
        ..SynthSpec::default()
    })
    .unwrap();
    let mut bb = backbone(0, 8);
    let zero_neg = PretrainConfig {
        neg_ratio: 0,
        ..PretrainConfig::default()
    };
    assert!(pretrain_edge_prediction(&ds, &mut bb, &zero_neg).is_err());
    bb.freeze();
    assert!(pretrain_edge_prediction(&ds, &mut bb, &PretrainConfig::default()).is_err());
    let edgeless = Dataset::new(
        vec![GraphInstance::new(2, 8, vec![0.0; 16], vec![], Label::Class(0)).unwrap()],
        None,
    )
    .unwrap();
    let mut bb = backbone(0, 8);
    assert!(matches!(
        pretrain_edge_prediction(&edgeless, &mut bb, &PretrainConfig::default()),
        Err(Error::Pretrain(_))
    ));
}

#[test]
fn zero_epochs_leave_backbone_untouched() {
    let ds = generate_synthetic(&SynthSpec {
        graphs_per_class: 3,
        ..SynthSpec::default()
    })
    .unwrap();
    let mut bb = backbone(1, 8);
    let before = bb.clone();
    pretrain_edge_prediction(
        &ds,
        &mut bb,
        &PretrainConfig {
            epochs: 0,
            ..PretrainConfig::default()
        },
    )
    .unwrap();
    use gprompt_core::Parameters;
    assert_eq!(bb.parameter_hash(), before.parameter_hash());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn node_permutation_permutes_embeddings(n in 2usize..10, seed in 0u64..1000) {
        let g = random_graph(n, 3, 0.4, seed);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng::stream(seed, Stream::Shuffle));
        let pg = g.permuted(&perm).unwrap();
        let bb = backbone(seed, 3);
        let h = bb.embed(&g).unwrap();
        let ph = bb.embed(&pg).unwrap();
        for v in 0..n {
            for j in 0..8 {
                prop_assert!((h[v * 8 + j] - ph[perm[v] * 8 + j]).abs() < 1e-12);
            }
        }
        let readout = |g: &GraphInstance| {
            let mut tape = Tape::new();
            let b = bb.bind(&mut tape);
            let h = b.forward(&mut tape, g).unwrap();
            let z = readout_mean(&mut tape, h).unwrap();
            tape.value(z).to_vec()
        };
        for (a, b) in readout(&g).iter().zip(readout(&pg)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn split_partitions_are_disjoint(shots in 1usize..20, frac in 0.0f64..=1.0, seed in 0u64..50) {
        let ds = generate_synthetic(&SynthSpec { graphs_per_class: 20, seed, ..SynthSpec::default() }).unwrap();
        let s = kshot_split(&ds, &SplitSpec::Shots { shots, val_fraction: frac, seed }).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
        prop_assert_eq!(s.train.len(), 2 * shots);
    }
}
