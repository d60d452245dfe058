//! Codebook export: `code_id,hit_rate,v0,...,v{d-1}`, one row per code.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CodebookTable {
    pub dim: usize,
    pub hit_rates: Vec<f64>,
    /// `K × dim`, row-major.
    pub vectors: Vec<f64>,
}

impl CodebookTable {
    pub fn size(&self) -> usize {
        self.hit_rates.len()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.vectors[j * self.dim..(j + 1) * self.dim]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("code_id,hit_rate");
        for i in 0..self.dim {
            let _ = write!(out, ",v{i}");
        }
        out.push('\n');
        for j in 0..self.size() {
            let _ = write!(out, "{j},{:.16e}", self.hit_rates[j]);
            for v in self.row(j) {
                let _ = write!(out, ",{v:.16e}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn write_codebook(path: &Path, table: &CodebookTable) -> Result<()> {
    std::fs::write(path, table.to_csv()).map_err(|e| CliError::io(path, e))
}

pub fn read_codebook(path: &Path) -> Result<CodebookTable> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let err = |line: usize, message: String| CliError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, h)| h).unwrap_or_default();
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 2 || cols[0] != "code_id" || cols[1] != "hit_rate" {
        return Err(err(1, "expected header code_id,hit_rate,v0,...".into()));
    }
    let dim = cols.len() - 2;
    let mut table = CodebookTable {
        dim,
        hit_rates: Vec::new(),
        vectors: Vec::new(),
    };
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(err(i + 1, format!("{} fields, expected {}", fields.len(), dim + 2)));
        }
        if fields[0].parse::<usize>() != Ok(table.size()) {
            return Err(err(i + 1, format!("code ids must count up from 0, got {}", fields[0])));
        }
        let mut nums = fields[1..].iter().map(|f| {
            f.parse::<f64>()
                .map_err(|e| err(i + 1, format!("{f:?}: {e}")))
        });
        table.hit_rates.push(nums.next().unwrap()?);
        for v in nums {
            table.vectors.push(v?);
        }
    }
    Ok(table)
}
