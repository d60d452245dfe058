use std::path::{Path, PathBuf};

use gprompt_core::backbone::{edge_prediction_auc, pretrain_edge_prediction, Backbone};
use gprompt_core::graph::{generate_synthetic, kshot_split, Dataset, SplitSpec};
use gprompt_core::rng::{self, Stream};
use gprompt_core::trainer::{evaluate, fit, Mode, TaskModel};
use serde_json::json;

use crate::checkpoint::{self, load_task_model};
use crate::codebook_csv::{write_codebook, CodebookTable};
use crate::config::RunConfig;
use crate::dataset::{load_dataset, load_split, save_dataset, save_split};
use crate::error::{CliError, Result};
use crate::report::{trace_csv, write_json, write_text, to_json};

pub const BACKBONE_FILE: &str = "backbone.ckpt";
pub const MODEL_FILE: &str = "model.ckpt";

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}

fn make_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Writes `diagnostic.json` next to the run outputs when training blew up.
fn with_diagnostic<T>(dir: &Path, result: gprompt_core::Result<T>) -> Result<T> {
    if let Err(gprompt_core::Error::NumericalAbort {
        lr,
        epoch,
        batch,
        loss,
        grad_norms,
    }) = &result
    {
        let dump = json!({
            "error": "non-finite loss or gradient",
            "lr": lr,
            "epoch": epoch,
            "batch": batch,
            "loss": loss.to_string(),
            "grad_norms": grad_norms
                .iter()
                .map(|(name, norm)| json!({"tensor": name, "norm": norm.to_string()}))
                .collect::<Vec<_>>(),
        });
        write_json(&dir.join("diagnostic.json"), &dump)?;
    }
    Ok(result?)
}

pub fn synth(rc: &RunConfig) -> Result<()> {
    let out = required(&rc.out, "out")?;
    let ds = generate_synthetic(&rc.synth_spec())?;
    save_dataset(out, &ds)?;
    println!("wrote {} graphs to {}", ds.len(), out.display());
    for (c, n) in ds.class_counts().iter().enumerate() {
        println!(
            "class {c}: {n} ({:.1}%)",
            100.0 * *n as f64 / ds.len() as f64
        );
    }
    Ok(())
}

pub fn pretrain(rc: &RunConfig) -> Result<()> {
    let data = required(&rc.data, "data")?;
    let dir = required(&rc.out_dir, "out-dir")?;
    let ds = load_dataset(data, None)?;
    let d = ds.feature_dim()?;
    let mut bb = Backbone::new(&rc.backbone_config(d), &mut rng::stream(rc.seed, Stream::Init))?;
    make_dir(dir)?;
    rc.write(&dir.join("config.json"))?;

    let report = with_diagnostic(dir, pretrain_edge_prediction(&ds, &mut bb, &rc.pretrain_config()))?;
    let auc = edge_prediction_auc(&bb, ds.graphs(), rc.neg_ratio, rc.seed).ok();
    checkpoint::save_backbone(&dir.join(BACKBONE_FILE), &bb)?;
    write_json(
        &dir.join("metrics.json"),
        &json!({"pretrain": report, "edge_auc": auc}),
    )?;
    println!(
        "edge-prediction loss {:.4} -> {:.4}",
        report.initial_loss,
        report.epoch_losses.last().copied().unwrap_or(report.initial_loss)
    );
    if let Some(auc) = auc {
        println!("edge-prediction AUC {auc:.4}");
    }
    Ok(())
}

pub fn tune(rc: &RunConfig) -> Result<()> {
    let data = required(&rc.data, "data")?;
    let bb_path = required(&rc.backbone, "backbone")?;
    let dir = required(&rc.out_dir, "out-dir")?;
    let ds = load_dataset(data, None)?;
    let backbone = checkpoint::load_backbone(bb_path, Some(ds.feature_dim()?))?;
    let split = match &rc.split {
        Some(p) => load_split(p, ds.len())?,
        None => kshot_split(
            &ds,
            &SplitSpec::Shots {
                shots: rc.shots,
                val_fraction: rc.val_fraction,
                seed: rc.seed,
            },
        )?,
    };
    let cfg = rc.train_config()?;
    make_dir(dir)?;
    rc.write(&dir.join("config.json"))?;
    save_split(&dir.join("split.json"), &split)?;

    let (train, val, test) = (
        ds.subset(&split.train)?,
        ds.subset(&split.val)?,
        ds.subset(&split.test)?,
    );
    let mut model = TaskModel::new(backbone, ds.task(), &cfg)?;
    let report = with_diagnostic(dir, fit(&mut model, &train, &val, &test, &cfg))?;

    let hit_rates = match &report.codebook {
        Some(stats) => stats.hit_rates.clone(),
        None => model.prompt.codebook.utilization_stats(&[]).hit_rates,
    };
    checkpoint::save_task_model(&dir.join(MODEL_FILE), &model, &cfg, ds.task(), hit_rates.clone())?;
    write_json(&dir.join("metrics.json"), &report)?;
    write_text(&dir.join("trace.csv"), &trace_csv(&report.epochs))?;
    if cfg.mode == Mode::PromptTune && !rc.no_vq {
        let cb = &model.prompt.codebook;
        write_codebook(
            &dir.join("codebook.csv"),
            &CodebookTable {
                dim: cb.dim(),
                hit_rates,
                vectors: cb.vectors().to_vec(),
            },
        )?;
    }

    let p = report.parameters;
    println!(
        "{}: test accuracy {:.4}, ROC-AUC {}",
        cfg.mode,
        report.test.accuracy,
        report
            .test
            .roc_auc
            .map_or_else(|| "undefined".into(), |a| format!("{a:.4}"))
    );
    println!(
        "trainable parameters: {} of {} under fine-tuning ({:.2}%)",
        p.trainable,
        p.fine_tune,
        100.0 * p.ratio
    );
    if report.collapse.is_collapsed() {
        println!("warning: prompts collapsed ({:?})", report.collapse);
    }
    Ok(())
}

fn eval_subset(rc: &RunConfig, ckpt: &Path, ds: &Dataset) -> Result<Dataset> {
    if rc.subset == "all" {
        return Ok(ds.clone());
    }
    let split_path = match &rc.split {
        Some(p) => p.clone(),
        None => ckpt
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("split.json"),
    };
    let split = load_split(&split_path, ds.len())?;
    let idx = match rc.subset.as_str() {
        "train" => &split.train,
        "val" => &split.val,
        "test" => &split.test,
        other => {
            return Err(CliError::Usage(format!(
                "subset must be train, val, test or all, got {other:?}"
            )))
        }
    };
    Ok(ds.subset(idx)?)
}

pub fn eval(rc: &RunConfig) -> Result<()> {
    let ckpt_path = required(&rc.checkpoint, "checkpoint")?;
    let data = required(&rc.data, "data")?;
    let ckpt = load_task_model(ckpt_path)?;
    let ds = load_dataset(data, None)?;
    if ds.feature_dim()? != ckpt.model.backbone.input_dim() {
        return Err(CliError::checkpoint(
            ckpt_path,
            format!(
                "model expects {}-dim features, data has {}",
                ckpt.model.backbone.input_dim(),
                ds.feature_dim()?
            ),
        ));
    }
    let subset = eval_subset(rc, ckpt_path, &ds)?;
    let report = evaluate(&ckpt.model, &subset, &ckpt.train)?;
    let text = to_json(&report)?;
    print!("{text}");
    if let Some(out) = &rc.out {
        write_text(out, &text)?;
    }
    Ok(())
}

pub fn export_codebook(rc: &RunConfig) -> Result<()> {
    let ckpt_path = required(&rc.checkpoint, "checkpoint")?;
    let out = required(&rc.out, "out")?;
    let ckpt = load_task_model(ckpt_path)?;
    let cb = ckpt.codebook;
    let table = CodebookTable {
        dim: cb.dim,
        hit_rates: cb.hit_rates,
        vectors: cb.vectors,
    };
    write_codebook(out, &table)?;
    println!("wrote {} codes of width {} to {}", table.size(), table.dim, out.display());
    Ok(())
}

pub fn run(rc: &RunConfig) -> Result<()> {
    match rc.command.as_str() {
        "synth" => synth(rc),
        "pretrain" => pretrain(rc),
        "tune" => tune(rc),
        "eval" => eval(rc),
        "export-codebook" => export_codebook(rc),
        other => Err(CliError::Usage(format!("unknown command {other:?}"))),
    }
}
