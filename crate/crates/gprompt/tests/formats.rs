use std::path::Path;

use gprompt::checkpoint::{load_backbone, load_task_model, save_backbone, save_task_model};
use gprompt::codebook_csv::{read_codebook, write_codebook, CodebookTable};
use gprompt::dataset::{load_dataset, load_split, save_dataset, save_split};
use gprompt::{CliError, Overrides, RunConfig};
use gprompt_core::backbone::{Backbone, BackboneConfig};
use gprompt_core::graph::{generate_synthetic, kshot_split, Dataset, SplitSpec, SynthSpec};
use gprompt_core::rng::{self, Stream};
use gprompt_core::trainer::{evaluate, Mode, TaskModel, TrainConfig, Trainer};
use rand::Rng as _;

fn dataset() -> Dataset {
    generate_synthetic(&SynthSpec {
        graphs_per_class: 6,
        min_nodes: 4,
        max_nodes: 7,
        seed: 3,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn backbone(input_dim: usize) -> Backbone {
    Backbone::new(
        &BackboneConfig {
            input_dim,
            hidden: 16,
            layers: 2,
        },
        &mut rng::stream(3, Stream::Init),
    )
    .unwrap()
}

fn trained_model(ds: &Dataset) -> (TaskModel, TrainConfig) {
    let cfg = TrainConfig {
        batch_size: 4,
        ..TrainConfig::default()
    };
    let mut model = TaskModel::new(backbone(8), ds.task(), &cfg).unwrap();
    let mut trainer = Trainer::new(&mut model, ds, &cfg).unwrap();
    trainer.train_epoch(&mut model).unwrap();
    (model, cfg)
}

fn tamper(path: &Path, from: &str, to: &str) {
    let text = std::fs::read_to_string(path).unwrap();
    assert!(text.contains(from), "{from:?} not found");
    std::fs::write(path, text.replacen(from, to, 1)).unwrap();
}

#[test]
fn dataset_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let ds = dataset();
    save_dataset(&path, &ds).unwrap();
    let back = load_dataset(&path, None).unwrap();
    assert_eq!(back.graphs(), ds.graphs());
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), ds.len());
}

#[test]
fn dataset_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    std::fs::write(
        &path,
        "{\"features\": [[0.0, 1.0]], \"edges\": [], \"label\": 0}\n\n{\"features\": [[0.0]], \"edges\": [[0, 3]], \"label\": 1}\n",
    )
    .unwrap();
    match load_dataset(&path, None) {
        Err(CliError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    std::fs::write(
        &path,
        "{\"features\": [[0.0, 1.0]], \"edges\": [], \"label\": 0}\n{\"features\": [[0.0], [1.0]], \"edges\": [[0, 1]], \"label\": 1}\n",
    )
    .unwrap();
    let err = load_dataset(&path, None).unwrap_err();
    assert!(err.to_string().contains(":2:"), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn multitask_labels_survive_io() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    std::fs::write(
        &path,
        "{\"features\": [[0.5]], \"edges\": [], \"label\": [1, null, 0]}\n",
    )
    .unwrap();
    let ds = load_dataset(&path, None).unwrap();
    let out = dir.path().join("m2.jsonl");
    save_dataset(&out, &ds).unwrap();
    assert_eq!(
        std::fs::read_to_string(&out).unwrap().trim(),
        "{\"features\":[[0.5]],\"edges\":[],\"label\":[1,null,0]}"
    );
}

#[test]
fn split_round_trips_and_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset();
    let split = kshot_split(
        &ds,
        &SplitSpec::Shots {
            shots: 2,
            val_fraction: 0.5,
            seed: 1,
        },
    )
    .unwrap();
    let path = dir.path().join("split.json");
    save_split(&path, &split).unwrap();
    assert_eq!(load_split(&path, ds.len()).unwrap(), split);
    assert!(matches!(load_split(&path, 3), Err(CliError::Usage(_))));
    std::fs::write(&path, "{\"train\": [0, 1], \"val\": [1], \"test\": []}").unwrap();
    assert!(matches!(load_split(&path, 10), Err(CliError::Usage(_))));
}

#[test]
fn backbone_checkpoint_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bb.ckpt");
    let bb = backbone(8);
    save_backbone(&path, &bb).unwrap();
    let back = load_backbone(&path, Some(8)).unwrap();
    let ds = dataset();
    let g = &ds.graphs()[0];
    assert_eq!(back.embed(g).unwrap(), bb.embed(g).unwrap());
    assert!(matches!(load_backbone(&path, Some(5)), Err(CliError::Checkpoint { .. })));
    // A task-model loader refuses a backbone container.
    assert!(load_task_model(&path).is_err());
}

#[test]
fn checkpoint_detects_tampering_and_version() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bb.ckpt");
    save_backbone(&path, &backbone(8)).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();

    let weight_start = text.find("\"weight\":[").unwrap() + 10;
    let mut bad = text.clone();
    bad.insert(weight_start, '1');
    std::fs::write(&path, &bad).unwrap();
    let err = load_backbone(&path, None).unwrap_err();
    assert!(err.to_string().contains("checksum"), "{err}");
    assert_eq!(err.exit_code(), 2);

    std::fs::write(&path, &text).unwrap();
    tamper(&path, "\"version\":1", "\"version\":2");
    let err = load_backbone(&path, None).unwrap_err();
    assert!(err.to_string().contains("version 2"), "{err}");
}

#[test]
fn task_model_checkpoint_reproduces_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let ds = dataset();
    for mlp in [false, true] {
        let (mut model, mut cfg) = trained_model(&ds);
        if mlp {
            cfg.prompt.ablation.mlp_projector = true;
            cfg.mode = Mode::LinearProbe;
            model = TaskModel::new(backbone(8), ds.task(), &cfg).unwrap();
        }
        let hits = model.prompt.codebook.utilization_stats(&[]).hit_rates;
        save_task_model(&path, &model, &cfg, ds.task(), hits.clone()).unwrap();
        let ckpt = load_task_model(&path).unwrap();
        assert_eq!(ckpt.train, cfg);
        assert_eq!(ckpt.codebook.hit_rates, hits);
        assert_eq!(ckpt.model.component_hashes(), model.component_hashes());
        assert_eq!(
            evaluate(&ckpt.model, &ds, &ckpt.train).unwrap(),
            evaluate(&model, &ds, &cfg).unwrap()
        );
    }
}

#[test]
fn codebook_csv_reloads_to_the_same_distances() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("codebook.csv");
    let ds = dataset();
    let (model, _) = trained_model(&ds);
    let cb = &model.prompt.codebook;
    let table = CodebookTable {
        dim: cb.dim(),
        hit_rates: cb.utilization_stats(&[]).hit_rates,
        vectors: cb.vectors().to_vec(),
    };
    write_codebook(&path, &table).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), cb.size() + 1);
    assert!(text.starts_with("code_id,hit_rate,v0,v1,"));
    let back = read_codebook(&path).unwrap();
    assert_eq!(back, table);

    let mut rng = rng::stream(9, Stream::Eval);
    for _ in 0..20 {
        let p: Vec<f64> = (0..cb.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (want, _) = cb.distances_and_logits(&p).unwrap();
        for (j, w) in want.iter().enumerate() {
            let got: f64 = back.row(j).iter().zip(&p).map(|(e, x)| (x - e).powi(2)).sum();
            assert!((got - w).abs() <= 1e-12);
        }
    }
}

#[test]
fn codebook_csv_rejects_malformed_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.csv");
    std::fs::write(&path, "code_id,hit_rate,v0\n0,0.5,1.0\n2,0.5,1.0\n").unwrap();
    assert!(matches!(read_codebook(&path), Err(CliError::Parse { line: 3, .. })));
    std::fs::write(&path, "id,rate\n").unwrap();
    assert!(matches!(read_codebook(&path), Err(CliError::Parse { line: 1, .. })));
}

#[test]
fn config_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, "# comment\nmode = linear_probe\nshots = 7\ntau = 0.5\n").unwrap();
    let flags = Overrides {
        shots: Some(9),
        ..Overrides::default()
    };
    let rc = RunConfig::resolve("tune", Some(&path), &flags).unwrap();
    assert_eq!(rc.mode, Mode::LinearProbe);
    assert_eq!(rc.shots, 9);
    assert_eq!(rc.tau, 0.5);

    let echo = dir.path().join("config.json");
    rc.write(&echo).unwrap();
    assert_eq!(RunConfig::resolve("tune", Some(&echo), &Overrides::default()).unwrap(), rc);

    std::fs::write(&path, "shots = many\n").unwrap();
    assert!(matches!(
        RunConfig::resolve("tune", Some(&path), &Overrides::default()),
        Err(CliError::Parse { line: 1, .. })
    ));
    std::fs::write(&path, "colour = blue\n").unwrap();
    assert!(RunConfig::resolve("tune", Some(&path), &Overrides::default()).is_err());
}
