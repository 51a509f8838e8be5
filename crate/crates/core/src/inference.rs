//! Zero-shot scoring and evaluation metrics.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::encode_hops;
use crate::graph::Graph;
use crate::model::ModelState;
use crate::training::GraphData;
use crate::{Error, Result};

/// Reconstruction residual norm of every node of an unseen graph.
///
/// Alignment is refit on `g`; banks and parameters stay frozen.
pub fn score_nodes(g: &Graph, state: &ModelState) -> Result<Vec<f64>> {
    state.validate()?;
    let data = GraphData::prepare(g, state)?;
    let h = encode_hops(&data.hops, &state.backbone)?;
    let h_hat = state.reconstruct_rows(&h)?;
    let scores: Vec<f64> = (&h - &h_hat)
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .collect();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite anomaly score".into()));
    }
    Ok(scores)
}

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    (pos, labels.len() - pos)
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Data("scores must be finite".into()));
    }
    Ok(())
}

/// Mann–Whitney AUROC; tied positive/negative pairs count one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::Data("AUROC needs both positive and negative labels".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of midranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision over the list ranked by descending score; equal scores
/// keep their original index order.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, _) = class_counts(labels);
    if pos == 0 {
        return Err(Error::Data("AUPRC needs at least one positive label".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank, &k) in idx.iter().enumerate() {
        if labels[k] == 1 {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(ap / pos as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auroc: f64,
    pub auprc: f64,
    pub n: usize,
    pub n_pos: usize,
}

pub fn metrics(scores: &[f64], labels: &[u8]) -> Result<Metrics> {
    Ok(Metrics {
        auroc: auroc(scores, labels)?,
        auprc: auprc(scores, labels)?,
        n: labels.len(),
        n_pos: class_counts(labels).0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_low: f64,
    pub bin_high: f64,
    pub count_normal: usize,
    pub count_anomalous: usize,
}

/// Equal-width bins over `[min, max]`; unlabeled nodes count as normal.
pub fn histogram(scores: &[f64], labels: Option<&[u8]>, bins: usize) -> Vec<HistogramBin> {
    if scores.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            bin_low: lo + width * b as f64,
            bin_high: if b + 1 == bins { hi } else { lo + width * (b + 1) as f64 },
            count_normal: 0,
            count_anomalous: 0,
        })
        .collect();
    for (i, &s) in scores.iter().enumerate() {
        let b = if width > 0.0 {
            (((s - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        if labels.is_some_and(|l| l[i] == 1) {
            out[b].count_anomalous += 1;
        } else {
            out[b].count_normal += 1;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub scores: Vec<f64>,
    pub metrics: Option<Metrics>,
    pub histogram: Vec<HistogramBin>,
}

pub fn score_report(g: &Graph, state: &ModelState, bins: usize) -> Result<ScoreReport> {
    let scores = score_nodes(g, state)?;
    report_from_scores(scores, g.labels(), bins)
}

/// Metrics are attached when labels contain both classes.
pub fn report_from_scores(scores: Vec<f64>, labels: Option<&[u8]>, bins: usize) -> Result<ScoreReport> {
    let metrics = match labels {
        Some(l) if class_counts(l).0 > 0 && class_counts(l).1 > 0 => Some(metrics(&scores, l)?),
        _ => None,
    };
    Ok(ScoreReport {
        histogram: histogram(&scores, labels, bins),
        scores,
        metrics,
    })
}

pub fn scores_to_tsv(scores: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in scores.iter().enumerate() {
        writeln!(s, "{i}\t{v}").expect("writing to a String cannot fail");
    }
    s
}

pub fn histogram_to_csv(bins: &[HistogramBin]) -> String {
    let mut s = String::from("bin_low,bin_high,count_normal,count_anomalous\n");
    for b in bins {
        writeln!(s, "{},{},{},{}", b.bin_low, b.bin_high, b.count_normal, b.count_anomalous)
            .expect("writing to a String cannot fail");
    }
    s
}

/// Reads `node_id<TAB>score` lines; node ids must be `0..n` in order.
pub fn read_scores_tsv(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut scores = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: ln + 1,
            msg,
        };
        let (id, val) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected `node_id<TAB>score`".into()))?;
        let id: usize = id.trim().parse().map_err(|e| parse_err(format!("node id: {e}")))?;
        if id != scores.len() {
            return Err(parse_err(format!("expected node id {}, found {id}", scores.len())));
        }
        let v: f64 = val.trim().parse().map_err(|e| parse_err(format!("score: {e}")))?;
        scores.push(v);
    }
    Ok(scores)
}
