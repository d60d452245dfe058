//! Stochastic vector quantization against an EMA-trained codebook.
//!
//! For an intermediate prompt `p_c` the codebook scores every code by
//! `l_i = -‖p_c - e_i‖² / τ`, draws `M` indices with replacement from
//! `softmax(l)`, and returns the mean of the drawn codes. Codes are never
//! touched by the optimizer; [`Codebook::ema_update`] moves them once per
//! batch toward the prompts that sampled them.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution as _;
use rand::seq::index::sample as sample_without_replacement;
use rand::Rng as _;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};

/// Lower bound on the EMA hit counts.
pub const COUNT_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodebookConfig {
    pub size: usize,
    pub alpha: f64,
    pub tau: f64,
    pub samples: usize,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        CodebookConfig {
            size: 20,
            alpha: 0.99,
            tau: 1.0,
            samples: 10,
        }
    }
}

impl CodebookConfig {
    fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Config("codebook needs at least one code".into()));
        }
        if self.samples == 0 {
            return Err(Error::Config("at least one sample per prompt".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("EMA decay {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitStrategy {
    /// Entries from N(0, 0.1²).
    Gaussian,
    /// Codes copied from rows of the first batch of intermediate prompts.
    FirstBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmaStatus {
    Updated,
    /// Nothing to average; codebook untouched.
    EmptyBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationStats {
    pub hit_rates: Vec<f64>,
    pub dead_codes: Vec<usize>,
    pub prompt_variance: f64,
}

#[derive(Debug, Clone)]
pub struct Codebook {
    cfg: CodebookConfig,
    dim: usize,
    vectors: Vec<f64>,
    counts: Vec<f64>,
    window_hits: Vec<u64>,
    awaiting_rows: bool,
    rng: Rng,
}

impl Codebook {
    /// Counts start at 1. With [`InitStrategy::FirstBatch`] the codes are
    /// Gaussian placeholders until [`Codebook::init_from_rows`] is called.
    pub fn new(cfg: CodebookConfig, dim: usize, strategy: InitStrategy, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if dim == 0 {
            return Err(Error::Config("codebook dimension must be positive".into()));
        }
        let mut init = rng::stream(seed, Stream::Init);
        let normal = Normal::new(0.0, 0.1).expect("finite std");
        let vectors = (0..cfg.size * dim).map(|_| init.sample(normal)).collect();
        Ok(Codebook {
            cfg,
            dim,
            vectors,
            counts: vec![1.0; cfg.size],
            window_hits: vec![0; cfg.size],
            awaiting_rows: strategy == InitStrategy::FirstBatch,
            rng: rng::stream(seed, Stream::Sampling),
        })
    }

    /// Restores stored state (e.g. from a checkpoint).
    pub fn from_state(
        cfg: CodebookConfig,
        dim: usize,
        vectors: Vec<f64>,
        counts: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if vectors.len() != cfg.size * dim || counts.len() != cfg.size {
            return Err(Error::dim(
                "codebook",
                &[cfg.size, dim],
                &[vectors.len(), counts.len()],
            ));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("codebook vectors must be finite".into()));
        }
        let counts = counts.into_iter().map(|c| c.max(COUNT_FLOOR)).collect();
        Ok(Codebook {
            cfg,
            dim,
            vectors,
            counts,
            window_hits: vec![0; cfg.size],
            awaiting_rows: false,
            rng: rng::stream(seed, Stream::Sampling),
        })
    }

    /// True until a first-batch codebook has seen its first batch.
    pub fn awaiting_rows(&self) -> bool {
        self.awaiting_rows
    }

    /// Replaces every code with a row of `rows` (row-major, `dim` wide),
    /// drawn without replacement when there are enough rows.
    pub fn init_from_rows(&mut self, rows: &[f64]) -> Result<()> {
        if rows.is_empty() || rows.len() % self.dim != 0 {
            return Err(Error::dim("init_from_rows", &[self.dim], &[rows.len()]));
        }
        let n = rows.len() / self.dim;
        let k = self.cfg.size;
        let picks: Vec<usize> = if n >= k {
            sample_without_replacement(&mut self.rng, n, k).into_vec()
        } else {
            (0..k).map(|_| self.rng.random_range(0..n)).collect()
        };
        for (j, &r) in picks.iter().enumerate() {
            self.vectors[j * self.dim..(j + 1) * self.dim]
                .copy_from_slice(&rows[r * self.dim..(r + 1) * self.dim]);
        }
        self.awaiting_rows = false;
        Ok(())
    }

    pub fn config(&self) -> CodebookConfig {
        self.cfg
    }

    pub fn size(&self) -> usize {
        self.cfg.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    pub fn vector(&self, j: usize) -> &[f64] {
        &self.vectors[j * self.dim..(j + 1) * self.dim]
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn set_vectors(&mut self, vectors: &[f64]) -> Result<()> {
        if vectors.len() != self.vectors.len() {
            return Err(Error::dim("set_vectors", &[self.cfg.size, self.dim], &[vectors.len()]));
        }
        self.vectors.copy_from_slice(vectors);
        Ok(())
    }

    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        let cfg = CodebookConfig { tau, ..self.cfg };
        cfg.validate()?;
        self.cfg = cfg;
        Ok(())
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = rng::stream(seed, Stream::Sampling);
    }

    /// Squared distances `d_i = ‖p - e_i‖²` and logits `-d_i / τ`.
    pub fn distances_and_logits(&self, p: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if p.len() != self.dim {
            return Err(Error::dim("distances", &[self.dim], &[p.len()]));
        }
        if !(self.cfg.tau > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        let d: Vec<f64> = self
            .vectors
            .chunks(self.dim)
            .map(|e| e.iter().zip(p).map(|(a, b)| (b - a) * (b - a)).sum())
            .collect();
        let l = d.iter().map(|d| -d / self.cfg.tau).collect();
        Ok((d, l))
    }

    /// `M` draws with replacement from `softmax(logits)`.
    pub fn sample_indices(&mut self, logits: &[f64]) -> Result<Vec<usize>> {
        if logits.len() != self.cfg.size {
            return Err(Error::dim("sample_indices", &[self.cfg.size], &[logits.len()]));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Config("sampling logits must be finite".into()));
        }
        let probs = softmax(logits);
        let dist = WeightedIndex::new(&probs)
            .map_err(|e| Error::Config(format!("sampling weights: {e}")))?;
        Ok((0..self.cfg.samples)
            .map(|_| dist.sample(&mut self.rng))
            .collect())
    }

    /// Quantized prompt `p_q` (mean of the drawn codes) and the draws.
    pub fn quantize(&mut self, p: &[f64]) -> Result<(Vec<f64>, Vec<usize>)> {
        let (_, logits) = self.distances_and_logits(p)?;
        let idx = self.sample_indices(&logits)?;
        // Σ_j (n_j / M)·e_j: exact when every draw lands on one code.
        let mut tally = vec![0usize; self.cfg.size];
        for &j in &idx {
            tally[j] += 1;
            self.window_hits[j] += 1;
        }
        let m = idx.len() as f64;
        let mut q = vec![0.0; self.dim];
        for (j, &n) in tally.iter().enumerate().filter(|(_, n)| **n > 0) {
            let w = n as f64 / m;
            q.iter_mut().zip(self.vector(j)).for_each(|(a, b)| *a += w * b);
        }
        Ok((q, idx))
    }

    /// One EMA step over a batch of `(p_c, drawn indices)` pairs.
    ///
    /// Counts move first, `c_j ← α c_j + (1-α) hits_j`, then are floored
    /// at [`COUNT_FLOOR`]; codes follow with the new counts,
    /// `e_j ← α e_j + (1-α) Σ_{draws of j} p_c / c_j`.
    pub fn ema_update(&mut self, batch: &[(&[f64], &[usize])]) -> Result<EmaStatus> {
        if batch.iter().all(|(_, idx)| idx.is_empty()) {
            return Ok(EmaStatus::EmptyBatch);
        }
        let k = self.cfg.size;
        let mut hits = vec![0.0; k];
        let mut sums = vec![0.0; k * self.dim];
        for (p, idx) in batch {
            if p.len() != self.dim {
                return Err(Error::dim("ema_update", &[self.dim], &[p.len()]));
            }
            for &j in *idx {
                if j >= k {
                    return Err(Error::Index { index: j, len: k });
                }
                hits[j] += 1.0;
                sums[j * self.dim..(j + 1) * self.dim]
                    .iter_mut()
                    .zip(*p)
                    .for_each(|(s, v)| *s += v);
            }
        }
        let alpha = self.cfg.alpha;
        for j in 0..k {
            let c = alpha * self.counts[j] + (1.0 - alpha) * hits[j];
            self.counts[j] = c.max(COUNT_FLOOR);
        }
        if alpha == 1.0 {
            return Ok(EmaStatus::Updated);
        }
        for j in 0..k {
            let c = self.counts[j];
            let e = &mut self.vectors[j * self.dim..(j + 1) * self.dim];
            let s = &sums[j * self.dim..(j + 1) * self.dim];
            for (e, s) in e.iter_mut().zip(s) {
                *e = alpha * *e + (1.0 - alpha) * s / c;
            }
        }
        Ok(EmaStatus::Updated)
    }

    pub fn window_hits(&self) -> &[u64] {
        &self.window_hits
    }

    pub fn reset_window(&mut self) {
        self.window_hits.iter_mut().for_each(|h| *h = 0);
    }

    /// Hit rates and dead codes over the current window, plus the variance
    /// of the given quantized prompts (row-major, `dim` wide).
    pub fn utilization_stats(&self, quantized: &[f64]) -> UtilizationStats {
        let total: u64 = self.window_hits.iter().sum();
        let hit_rates = self
            .window_hits
            .iter()
            .map(|&h| if total == 0 { 0.0 } else { h as f64 / total as f64 })
            .collect();
        let dead_codes = self
            .window_hits
            .iter()
            .enumerate()
            .filter(|(_, h)| **h == 0)
            .map(|(j, _)| j)
            .collect();
        UtilizationStats {
            hit_rates,
            dead_codes,
            prompt_variance: prompt_variance(quantized, self.dim),
        }
    }
}

/// Mean per-coordinate variance across rows: `Σ‖p - p̄‖² / (N·d)`.
pub fn prompt_variance(rows: &[f64], dim: usize) -> f64 {
    if dim == 0 || rows.len() < dim {
        return 0.0;
    }
    let n = rows.len() / dim;
    let mut mean = vec![0.0; dim];
    for r in rows.chunks(dim) {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let ss: f64 = rows
        .chunks(dim)
        .map(|r| r.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum::<f64>())
        .sum();
    ss / (n * dim) as f64
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| libm::exp(l - max)).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn book(size: usize, dim: usize, tau: f64, samples: usize) -> Codebook {
        Codebook::new(
            CodebookConfig {
                size,
                alpha: 0.99,
                tau,
                samples,
            },
            dim,
            InitStrategy::Gaussian,
            11,
        )
        .unwrap()
    }

    #[test]
    fn zero_distance_to_own_code() {
        let cb = book(5, 3, 1.0, 4);
        let (d, l) = cb.distances_and_logits(cb.vector(1)).unwrap();
        assert_eq!(d[1], 0.0);
        assert_eq!(l[1], 0.0);
        assert!(l.iter().enumerate().all(|(i, v)| i == 1 || *v < 0.0));
    }

    #[test]
    fn doubling_tau_halves_logits() {
        let mut cb = book(5, 3, 1.0, 4);
        let p = [0.3, -0.1, 0.2];
        let (_, l1) = cb.distances_and_logits(&p).unwrap();
        cb.set_tau(2.0).unwrap();
        let (_, l2) = cb.distances_and_logits(&p).unwrap();
        for (a, b) in l1.iter().zip(&l2) {
            assert_eq!(a / 2.0, *b);
        }
        assert!(cb.set_tau(0.0).is_err());
    }

    #[test]
    fn single_code() {
        let mut cb = book(1, 4, 1.0, 7);
        let (q, idx) = cb.quantize(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(idx, vec![0; 7]);
        assert_eq!(q, cb.vector(0));
        let stats = cb.utilization_stats(&[q.clone(), q].concat());
        assert_eq!(stats.hit_rates, vec![1.0]);
        assert_eq!(stats.prompt_variance, 0.0);
    }

    #[test]
    fn config_guards() {
        let bad = |cfg: CodebookConfig| Codebook::new(cfg, 3, InitStrategy::Gaussian, 0).is_err();
        let ok = CodebookConfig::default();
        assert!(bad(CodebookConfig { size: 0, ..ok }));
        assert!(bad(CodebookConfig { samples: 0, ..ok }));
        assert!(bad(CodebookConfig { tau: -1.0, ..ok }));
        assert!(bad(CodebookConfig { alpha: 1.5, ..ok }));
    }

    #[test]
    fn empty_batch_is_a_noop() {
        let mut cb = book(3, 2, 1.0, 2);
        let before = cb.vectors().to_vec();
        assert_eq!(cb.ema_update(&[]).unwrap(), EmaStatus::EmptyBatch);
        assert_eq!(cb.vectors(), before.as_slice());
    }

    #[test]
    fn first_batch_init_copies_rows() {
        let mut cb = book(3, 2, 1.0, 2);
        let rows = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        cb.init_from_rows(&rows).unwrap();
        for j in 0..3 {
            assert!(rows.chunks(2).any(|r| r == cb.vector(j)));
        }
    }

    #[test]
    fn out_of_range_index_rejected() {
        let mut cb = book(3, 2, 1.0, 2);
        let p = [0.0, 0.0];
        assert!(matches!(
            cb.ema_update(&[(&p, &[5])]),
            Err(Error::Index { .. })
        ));
    }
}
