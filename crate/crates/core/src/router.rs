//! Memory-based routing.
//!
//! Each expert keeps a bank of embeddings it reconstructed well. A node's
//! logit for expert `i` is the negative manifold distance to the nearest
//! entry of bank `i`; temperature softmax and top-k selection turn logits into
//! mixture weights. Banks are refreshed after every training batch once the
//! cold-start period ends.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::experts::{expert_forward, ExpertModel, ExpertVars};
use crate::geometry::Family;
use crate::tape::{Mat, Tape, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub capacity: usize,
    pub tau_min: f64,
    pub tau_max: f64,
    pub e_cold: usize,
    pub e_total: usize,
    pub hysteresis: f64,
    pub per_update_cap: usize,
    pub fallback_percentile: f64,
    pub epsilon: f64,
    pub squared_routing: bool,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            top_k: 2,
            capacity: 64,
            tau_min: 0.5,
            tau_max: 0.9,
            e_cold: 5,
            e_total: 40,
            hysteresis: 0.05,
            per_update_cap: 8,
            fallback_percentile: 90.0,
            epsilon: 1e-8,
            squared_routing: false,
        }
    }
}

impl RouterConfig {
    pub fn validate(&self, num_experts: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.top_k == 0 || self.top_k > num_experts {
            return bad(format!("top_k = {} must lie in [1, {num_experts}]", self.top_k));
        }
        if self.capacity == 0 || self.per_update_cap == 0 {
            return bad("capacity and per_update_cap must be positive".into());
        }
        if !(0.0 < self.tau_min && self.tau_min <= self.tau_max && self.tau_max <= 1.0) {
            return bad(format!(
                "need 0 < tau_min ≤ tau_max ≤ 1, got {} / {}",
                self.tau_min, self.tau_max
            ));
        }
        if self.e_cold >= self.e_total {
            return bad(format!("e_cold ({}) must be below e_total ({})", self.e_cold, self.e_total));
        }
        if !(0.0..=100.0).contains(&self.fallback_percentile) {
            return bad(format!("fallback_percentile {} outside [0, 100]", self.fallback_percentile));
        }
        if !(self.hysteresis >= 0.0 && self.epsilon > 0.0) {
            return bad("hysteresis must be ≥ 0 and epsilon > 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub embedding: Vec<f64>,
    pub quality: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BankStats {
    pub inserted: usize,
    pub replaced: usize,
    pub rejected: usize,
    pub updates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    pub expert: usize,
    pub capacity: usize,
    pub entries: Vec<BankEntry>,
    pub stats: BankStats,
}

impl MemoryBank {
    pub fn new(expert: usize, capacity: usize) -> Self {
        Self {
            expert,
            capacity,
            entries: Vec::new(),
            stats: BankStats::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    /// Stored embeddings as rows.
    pub fn matrix(&self, dim: usize) -> Mat {
        let flat: Vec<f64> = self.entries.iter().flat_map(|e| e.embedding.iter().copied()).collect();
        Mat::from_shape_vec((self.entries.len(), dim), flat).expect("entries share the embedding width")
    }

    /// Index of the lowest-quality entry (ties → first).
    fn weakest(&self) -> Option<usize> {
        self.entries
            .iter()
            .enumerate()
            .fold(None, |best: Option<(usize, f64)>, (i, e)| match best {
                Some((_, q)) if q <= e.quality => best,
                _ => Some((i, e.quality)),
            })
            .map(|(i, _)| i)
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.entries.len() > self.capacity {
            return Err(Error::Data(format!("bank {} exceeds its capacity", self.expert)));
        }
        for e in &self.entries {
            if e.embedding.len() != dim {
                return Err(Error::Dimension(format!(
                    "bank {} entry has width {}, expected {dim}",
                    self.expert,
                    e.embedding.len()
                )));
            }
            if !(0.0..=1.0).contains(&e.quality) || e.embedding.iter().any(|x| !x.is_finite()) {
                return Err(Error::Data(format!("bank {} holds an invalid entry", self.expert)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
    /// Top-k experts, best first.
    pub active: Vec<usize>,
    /// Renormalized weights aligned with `active`.
    pub active_weights: Vec<f64>,
}

/// Distance from `h` to the nearest entry of each bank on that expert's
/// manifold, negated. Empty banks give 0.
pub fn routing_logits(
    h: &[f64],
    banks: &[MemoryBank],
    experts: &[ExpertModel],
    squared: bool,
) -> Result<Vec<f64>> {
    if banks.len() != experts.len() {
        return Err(Error::Dimension(format!(
            "{} banks for {} experts",
            banks.len(),
            experts.len()
        )));
    }
    banks
        .iter()
        .zip(experts)
        .map(|(bank, e)| {
            if bank.is_empty() {
                return Ok(0.0);
            }
            let m = e.manifold()?;
            let p = m.exp_origin(h)?;
            let mut best = f64::INFINITY;
            for entry in &bank.entries {
                let q = m.exp_origin(&entry.embedding)?;
                best = best.min(m.dist(&p, &q)?);
            }
            Ok(if squared { -best * best } else { -best })
        })
        .collect()
}

/// Indices of the `k` largest values, larger first, ties → lower index.
pub fn top_k(s: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn softmax(xs: &[f64], tau: f64) -> Vec<f64> {
    let m = xs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / tau));
    let e: Vec<f64> = xs.iter().map(|&x| (x / tau - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn gate(s: &[f64], cfg: &RouterConfig) -> GateDecision {
    let active = top_k(s, cfg.top_k);
    let picked: Vec<f64> = active.iter().map(|&i| s[i]).collect();
    GateDecision {
        logits: s.to_vec(),
        weights: softmax(s, cfg.temperature),
        active_weights: softmax(&picked, cfg.temperature),
        active,
    }
}

pub fn moe_reconstruct(h: &[f64], decision: &GateDecision, experts: &[ExpertModel]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; h.len()];
    for (&i, &w) in decision.active.iter().zip(&decision.active_weights) {
        let e = experts
            .get(i)
            .ok_or_else(|| Error::Dimension(format!("gate selected missing expert {i}")))?;
        for (o, r) in out.iter_mut().zip(expert_forward(e, h)?) {
            *o += w * r;
        }
    }
    Ok(out)
}

/// Min-max normalized reconstruction quality within a batch.
pub fn quality_scores(errors: &[f64], eps: f64) -> Vec<f64> {
    let lo = errors.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    errors.iter().map(|&l| 1.0 - (l - lo) / (hi - lo + eps)).collect()
}

/// Quality gate threshold for a (possibly fractional) epoch at or past the
/// cold start.
pub fn quality_threshold(epoch: f64, cfg: &RouterConfig) -> f64 {
    let span = (cfg.e_total - cfg.e_cold) as f64;
    let frac = ((epoch - cfg.e_cold as f64) / span).clamp(0.0, 1.0);
    cfg.tau_min + (cfg.tau_max - cfg.tau_min) * frac
}

/// Linear-interpolation percentile of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankUpdate {
    pub expert: usize,
    pub candidates: usize,
    pub survivors: usize,
    pub fallback: bool,
    pub inserted: usize,
    pub replaced: usize,
    pub rejected: usize,
    pub size: usize,
}

/// Refreshes every bank from one batch.
///
/// `embeddings` holds the batch embeddings, `active[v]` the top-k set of node
/// `v`, and `errors[[v, i]]` the squared reconstruction error of expert `i`.
pub fn update_banks(
    banks: &mut [MemoryBank],
    embeddings: &Mat,
    active: &[Vec<usize>],
    errors: &Array2<f64>,
    epoch: usize,
    cfg: &RouterConfig,
) -> Vec<BankUpdate> {
    if epoch < cfg.e_cold {
        return Vec::new();
    }
    let threshold = quality_threshold(epoch as f64, cfg);
    banks
        .iter_mut()
        .enumerate()
        .map(|(i, bank)| {
            let q = quality_scores(&errors.column(i).to_vec(), cfg.epsilon);
            let candidates: Vec<usize> = (0..active.len()).filter(|&v| active[v].contains(&i)).collect();
            let mut survivors: Vec<usize> = candidates.iter().copied().filter(|&v| q[v] >= threshold).collect();
            let fallback = survivors.is_empty() && !candidates.is_empty();
            if fallback {
                let cq: Vec<f64> = candidates.iter().map(|&v| q[v]).collect();
                let cut = percentile(&cq, cfg.fallback_percentile);
                survivors = candidates.iter().copied().filter(|&v| q[v] >= cut).collect();
            }
            survivors.sort_by(|&a, &b| q[b].total_cmp(&q[a]).then(a.cmp(&b)));
            survivors.truncate(cfg.per_update_cap);
            let mut log = BankUpdate {
                expert: i,
                candidates: candidates.len(),
                survivors: survivors.len(),
                fallback,
                inserted: 0,
                replaced: 0,
                rejected: 0,
                size: 0,
            };
            for v in survivors {
                let entry = BankEntry {
                    embedding: embeddings.row(v).to_vec(),
                    quality: q[v].clamp(0.0, 1.0),
                };
                if !bank.is_full() {
                    bank.entries.push(entry);
                    log.inserted += 1;
                    continue;
                }
                let w = bank.weakest().expect("a full bank is non-empty");
                if entry.quality >= bank.entries[w].quality + cfg.hysteresis {
                    bank.entries[w] = entry;
                    log.replaced += 1;
                } else {
                    log.rejected += 1;
                }
            }
            bank.stats.inserted += log.inserted;
            bank.stats.replaced += log.replaced;
            bank.stats.rejected += log.rejected;
            bank.stats.updates += 1;
            log.size = bank.len();
            log
        })
        .collect()
}

/// Recorded routing logits for a batch (`B × K`). Bank entries are constants.
pub(crate) fn routing_logits_tape(
    tape: &mut Tape,
    h: Var,
    banks: &[MemoryBank],
    experts: &[ExpertVars],
    scales: &[Option<Var>],
    squared: bool,
) -> Var {
    let (rows, dim) = tape.value(h).dim();
    let columns: Vec<Var> = banks
        .iter()
        .zip(experts.iter().zip(scales))
        .map(|(bank, (ev, &s))| {
            if bank.is_empty() {
                return tape.leaf(Mat::zeros((rows, 1)));
            }
            let m = tape.leaf(bank.matrix(dim));
            let (p, q, family) = match s {
                Some(s) => (ev.to_unit_points(tape, h, s), ev.to_unit_points(tape, m, s), ev.family()),
                None => (h, m, Family::Euclidean),
            };
            let d = tape.pair_dist(p, q, family);
            let mut d = tape.row_min(d);
            if let Some(s) = s {
                d = tape.div_by(d, s);
            }
            if squared {
                d = tape.mul(d, d);
            }
            tape.scale(d, -1.0)
        })
        .collect();
    tape.concat_cols(&columns)
}

/// Row-wise top-k membership mask of a logit matrix.
pub(crate) fn top_k_mask(logits: &Mat, k: usize) -> Array2<bool> {
    let mut mask = Array2::from_elem(logits.dim(), false);
    for (i, row) in logits.rows().into_iter().enumerate() {
        for j in top_k(&row.to_vec(), k) {
            mask[[i, j]] = true;
        }
    }
    mask
}
