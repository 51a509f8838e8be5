//! Single-curvature k-NN detector used to probe curvature sensitivity.

use ndarray::{concatenate, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{align_features, AlignConfig};
use crate::geometry::ManifoldSpec;
use crate::graph::{propagate_hops, sym_norm_adjacency, Graph};
use crate::inference::{auprc, auroc};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub curvatures: Vec<f64>,
    pub knn: usize,
    pub dim: usize,
    pub k_hops: usize,
    /// Largest tangent norm of an embedded node before the exponential map.
    pub radius: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            curvatures: vec![-1.0, -0.5, 0.0, 0.5, 1.0],
            knn: 10,
            dim: 16,
            k_hops: 2,
            radius: 2.5,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.curvatures.is_empty() || self.curvatures.iter().any(|k| !k.is_finite()) {
            return Err(Error::Config("sweep needs finite curvatures".into()));
        }
        if self.knn == 0 || self.knn >= n {
            return Err(Error::Config(format!("knn must lie in [1, {}), got {}", n, self.knn)));
        }
        if self.dim == 0 || self.k_hops == 0 || !(self.radius > 0.0) {
            return Err(Error::Config("dim, k_hops and radius must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kappa: f64,
    pub auroc: f64,
    pub auprc: f64,
}

/// Hop residuals `[ÃX − X, Ã²X − X, …]` of the single-space alignment at `kappa`,
/// rescaled so the longest row has norm `radius`.
pub fn residual_embedding(g: &Graph, kappa: f64, cfg: &SweepConfig) -> Result<Array2<f64>> {
    let align = AlignConfig {
        curvatures: vec![kappa],
        total_dim: cfg.dim,
        ..AlignConfig::default()
    };
    let x = align_features(g, &align)?.matrix;
    let hops = propagate_hops(&sym_norm_adjacency(g), &x, cfg.k_hops)?;
    let parts: Vec<Array2<f64>> = hops[1..].iter().map(|h| h - &hops[0]).collect();
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let mut r = concatenate(Axis(1), &views).map_err(|e| Error::Dimension(e.to_string()))?;
    let max = r.rows().into_iter().map(|row| row.dot(&row).sqrt()).fold(0.0, f64::max);
    let mut radius = cfg.radius;
    if kappa > 0.0 {
        radius = radius.min(0.9 * std::f64::consts::PI / kappa.sqrt());
    }
    if max > 0.0 {
        r.mapv_inplace(|v| v * radius / max);
    }
    Ok(r)
}

/// Mean geodesic distance from each point to its `k` nearest other points.
pub fn knn_scores(points: &[Vec<f64>], spec: &ManifoldSpec, k: usize) -> Result<Vec<f64>> {
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d = points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| spec.dist(p, q))
                .collect::<Result<Vec<f64>>>()?;
            let k = k.min(d.len());
            d.select_nth_unstable_by(k - 1, f64::total_cmp);
            Ok(d[..k].iter().sum::<f64>() / k as f64)
        })
        .collect()
}

pub fn sweep_scores(g: &Graph, kappa: f64, cfg: &SweepConfig) -> Result<Vec<f64>> {
    cfg.validate(g.num_nodes())?;
    let r = residual_embedding(g, kappa, cfg)?;
    let spec = ManifoldSpec::new(kappa, r.ncols())?;
    let points = r
        .rows()
        .into_iter()
        .map(|row| spec.exp_origin(&row.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    knn_scores(&points, &spec, cfg.knn)
}

pub fn sweep(g: &Graph, cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    let labels = g
        .labels()
        .ok_or_else(|| Error::Data("sweep needs a labeled graph".into()))?;
    cfg.curvatures
        .iter()
        .map(|&kappa| {
            let scores = sweep_scores(g, kappa, cfg)?;
            Ok(SweepRow {
                kappa,
                auroc: auroc(&scores, labels)?,
                auprc: auprc(&scores, labels)?,
            })
        })
        .collect()
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("kappa,auroc,auprc\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.kappa, r.auroc, r.auprc));
    }
    s
}
