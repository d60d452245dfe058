use std::fmt::Write as _;
use std::path::Path;

use gprompt_core::trainer::EpochRecord;
use serde::Serialize;

use crate::error::{CliError, Result};

pub const TRACE_HEADER: &str =
    "epoch,train_loss,consistency,val_loss,val_accuracy,val_auc,prompt_variance";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.17e}")).unwrap_or_default()
}

/// Per-epoch trace; absent values are empty fields.
pub fn trace_csv(epochs: &[EpochRecord]) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    for r in epochs {
        let _ = writeln!(
            out,
            "{},{:.17e},{:.17e},{},{},{},{}",
            r.epoch,
            r.train_loss,
            r.consistency,
            opt(r.val_loss),
            opt(r.val_accuracy),
            opt(r.val_auc),
            opt(r.prompt_variance)
        );
    }
    out
}

pub fn to_json(value: &impl Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, to_json(value)?).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}
