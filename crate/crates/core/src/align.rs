//! Multi-curvature feature alignment.
//!
//! Each configured curvature gets its own slice of the output width. For every
//! space the raw features are bounded and log-mapped into the tangent space at
//! the origin, reduced by PCA to a candidate pool, and the smoothest candidates
//! (lowest Laplacian score) are kept. The per-space blocks are concatenated in
//! configuration order.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Family, ManifoldSpec};
use crate::graph::{laplacian_score, matrix_to_csv, sym_norm_adjacency, Graph, SparseMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub curvatures: Vec<f64>,
    pub total_dim: usize,
    pub pca_factor: usize,
    pub scale_margin: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            curvatures: vec![0.0, -0.5, -1.0, 0.5, 1.0],
            total_dim: 32,
            pca_factor: 4,
            scale_margin: 0.9,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.curvatures.is_empty() {
            return Err(Error::Config("at least one curvature space is required".into()));
        }
        if let Some(k) = self.curvatures.iter().find(|k| !k.is_finite()) {
            return Err(Error::Config(format!("curvature {k} is not finite")));
        }
        if self.total_dim < self.curvatures.len() {
            return Err(Error::Config(format!(
                "total_dim {} is smaller than the number of spaces {}",
                self.total_dim,
                self.curvatures.len()
            )));
        }
        if self.pca_factor == 0 {
            return Err(Error::Config("pca_factor must be at least 1".into()));
        }
        if !(self.scale_margin > 0.0 && self.scale_margin < 1.0) {
            return Err(Error::Config(format!(
                "scale_margin must lie in (0, 1), got {}",
                self.scale_margin
            )));
        }
        Ok(())
    }
}

/// Selection metadata for one curvature space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceMeta {
    pub kappa: f64,
    pub dim: usize,
    pub pca_width: usize,
    pub mean: Vec<f64>,
    /// `d0 × pca_width`, row-major.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    pub zero_filled: Vec<bool>,
    pub selected: Vec<usize>,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignedFeatures {
    pub matrix: Array2<f64>,
    pub spaces: Vec<SpaceMeta>,
}

impl AlignedFeatures {
    pub fn partition(&self) -> Vec<(f64, usize)> {
        self.spaces.iter().map(|s| (s.kappa, s.dim)).collect()
    }

    /// Writes `features.csv` and `alignment.json` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("features.csv"), matrix_to_csv(&self.matrix))?;
        let meta = serde_json::json!({
            "rows": self.matrix.nrows(),
            "cols": self.matrix.ncols(),
            "partition": self.partition(),
            "spaces": self.spaces,
        });
        std::fs::write(dir.join("alignment.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }
}

/// Equal split of `total` over `parts`, remainder to the leading parts.
pub fn partition_dims(total: usize, parts: usize) -> Result<Vec<usize>> {
    if parts == 0 || total < parts {
        return Err(Error::Config(format!(
            "cannot split {total} dimensions over {parts} spaces"
        )));
    }
    let (q, r) = (total / parts, total % parts);
    Ok((0..parts).map(|c| q + usize::from(c < r)).collect())
}

/// Bounds the rows of `x0` inside the valid radius of `M_κ` and log-maps them.
pub fn to_tangent(x0: &Array2<f64>, kappa: f64, scale_margin: f64) -> Result<Array2<f64>> {
    if x0.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("raw features have non-finite entries".into()));
    }
    let d0 = x0.ncols();
    if kappa == 0.0 || d0 == 0 {
        return Ok(x0.clone());
    }
    let spec = ManifoldSpec::new(kappa, d0)?;
    let max_norm = x0
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .fold(0.0, f64::max);
    let scale = scale_margin * spec.valid_radius() / max_norm.max(1e-12);
    let mut out = Array2::zeros(x0.dim());
    for (i, row) in x0.rows().into_iter().enumerate() {
        let v: Vec<f64> = row.iter().map(|x| x * scale).collect();
        let point = match spec.family() {
            Family::Spherical => spec.exp_origin(&v)?,
            _ => spec.project(&v),
        };
        let t = spec.log_origin(&point)?;
        out.row_mut(i).assign(&Array1::from(t));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Array1<f64>,
    /// `d × d_out`, orthonormal over the non-zero-filled columns.
    pub components: Array2<f64>,
    pub explained_variance: Vec<f64>,
    pub zero_filled: Vec<bool>,
    pub projected: Array2<f64>,
}

/// PCA on column-centered `x`. Directions beyond the numerical rank (or beyond
/// `d`) are zero-filled and flagged. Each component is signed so that its
/// largest-magnitude entry is positive.
pub fn pca_reduce(x: &Array2<f64>, d_out: usize) -> Result<Pca> {
    let (n, d) = x.dim();
    if n == 0 {
        return Err(Error::Dimension("PCA needs at least one row".into()));
    }
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let centered = x - &mean;
    let denom = (n.max(2) - 1) as f64;
    let cov = centered.t().dot(&centered) / denom;
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let lambda_max = order.first().map_or(0.0, |&i| eig.eigenvalues[i].max(0.0));
    let tol = 1e-10 * lambda_max;

    let mut components = Array2::zeros((d, d_out));
    let mut explained = vec![0.0; d_out];
    let mut zero_filled = vec![true; d_out];
    for (c, &idx) in order.iter().take(d_out).enumerate() {
        let lambda = eig.eigenvalues[idx];
        if lambda_max <= 0.0 || lambda <= tol {
            continue;
        }
        let mut col: Vec<f64> = (0..d).map(|r| eig.eigenvectors[(r, idx)]).collect();
        let pivot = col
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, v)| if v.abs() > best.1 { (i, v.abs()) } else { best })
            .0;
        if col[pivot] < 0.0 {
            col.iter_mut().for_each(|v| *v = -*v);
        }
        components.column_mut(c).assign(&Array1::from(col));
        explained[c] = lambda;
        zero_filled[c] = false;
    }
    let projected = centered.dot(&components);
    Ok(Pca {
        mean,
        components,
        explained_variance: explained,
        zero_filled,
        projected,
    })
}

/// Keeps the `dc` columns with the lowest Laplacian score (ties → lower
/// index), returned in their original order alongside their indices.
pub fn select_by_laplacian(
    xc: &Array2<f64>,
    adj_norm: &SparseMatrix,
    dc: usize,
) -> Result<(Array2<f64>, Vec<usize>)> {
    let candidates: Vec<usize> = (0..xc.ncols()).collect();
    let (idx, _) = select_among(xc, adj_norm, &candidates, dc)?;
    Ok((xc.select(Axis(1), &idx), idx))
}

fn select_among(
    xc: &Array2<f64>,
    adj_norm: &SparseMatrix,
    candidates: &[usize],
    dc: usize,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if dc > candidates.len() {
        return Err(Error::Dimension(format!(
            "cannot select {dc} columns from {} candidates",
            candidates.len()
        )));
    }
    let mut scored = candidates
        .iter()
        .map(|&j| Ok((j, laplacian_score(xc.column(j), adj_norm)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    scored.truncate(dc);
    scored.sort_by_key(|&(j, _)| j);
    Ok(scored.into_iter().unzip())
}

pub fn align_features(g: &Graph, cfg: &AlignConfig) -> Result<AlignedFeatures> {
    cfg.validate()?;
    let adj = sym_norm_adjacency(g);
    align_with_adjacency(g.raw_features(), &adj, cfg)
}

pub fn align_with_adjacency(
    x0: &Array2<f64>,
    adj: &SparseMatrix,
    cfg: &AlignConfig,
) -> Result<AlignedFeatures> {
    cfg.validate()?;
    let (n, d0) = x0.dim();
    let dims = partition_dims(cfg.total_dim, cfg.curvatures.len())?;
    let spaces = cfg
        .curvatures
        .par_iter()
        .zip(dims.par_iter())
        .map(|(&kappa, &dc)| {
            let tangent = to_tangent(x0, kappa, cfg.scale_margin)?;
            let width = dc.max((cfg.pca_factor * dc).min(n).min(d0));
            let pca = pca_reduce(&tangent, width)?;
            // zero-filled directions are placeholders, only used when the pool is short
            let real: Vec<usize> = (0..width).filter(|&j| !pca.zero_filled[j]).collect();
            let (selected, scores) = if real.len() >= dc {
                select_among(&pca.projected, adj, &real, dc)?
            } else {
                let fill: Vec<usize> = (0..width)
                    .filter(|&j| pca.zero_filled[j])
                    .take(dc - real.len())
                    .collect();
                let mut all: Vec<usize> = real.iter().chain(&fill).copied().collect();
                all.sort_unstable();
                let scores = all
                    .iter()
                    .map(|&j| laplacian_score(pca.projected.column(j), adj))
                    .collect::<Result<Vec<_>>>()?;
                (all, scores)
            };
            let block = pca.projected.select(Axis(1), &selected);
            Ok((
                block,
                SpaceMeta {
                    kappa,
                    dim: dc,
                    pca_width: width,
                    mean: pca.mean.to_vec(),
                    components: pca.components.rows().into_iter().map(|r| r.to_vec()).collect(),
                    explained_variance: pca.explained_variance,
                    zero_filled: pca.zero_filled,
                    selected,
                    scores,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut matrix = Array2::zeros((n, cfg.total_dim));
    let mut offset = 0;
    let mut metas = Vec::with_capacity(spaces.len());
    for (block, meta) in spaces {
        matrix
            .slice_mut(s![.., offset..offset + meta.dim])
            .assign(&block);
        offset += meta.dim;
        metas.push(meta);
    }
    if matrix.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("aligned features are not finite".into()));
    }
    Ok(AlignedFeatures {
        matrix,
        spaces: metas,
    })
}
