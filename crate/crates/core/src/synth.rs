//! Seeded synthetic graphs with planted anomalies.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::graph::{sym_norm_adjacency, Graph};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    TreeBridges,
    SbmContextual,
    CliqueInjection,
}

impl SynthKind {
    pub const ALL: [SynthKind; 3] = [Self::TreeBridges, Self::SbmContextual, Self::CliqueInjection];

    pub fn name(self) -> &'static str {
        match self {
            Self::TreeBridges => "tree_bridges",
            Self::SbmContextual => "sbm_contextual",
            Self::CliqueInjection => "clique_injection",
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown synthetic kind `{s}`")))
    }
}

/// Generator constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub clique_size: usize,
    pub bridge_edges: usize,
    pub blocks: usize,
    pub p_in: f64,
    pub p_out: f64,
    /// Expected degree of the Erdős–Rényi base graph.
    pub er_degree: f64,
    /// Scale of the per-group feature means.
    pub mean_scale: f64,
    pub noise: f64,
    /// Std of the per-edge drift inherited down the tree, so distant branches differ.
    pub branch_step: f64,
    /// Rounds of neighbourhood averaging applied to the random-graph features.
    pub smoothing_rounds: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            clique_size: 8,
            bridge_edges: 3,
            blocks: 4,
            p_in: 0.1,
            p_out: 0.01,
            er_degree: 4.0,
            mean_scale: 1.0,
            noise: 0.5,
            branch_step: 0.5,
            smoothing_rounds: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub n: usize,
    pub d0: usize,
    pub anomaly_fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub params: SynthParams,
}

impl SynthSpec {
    pub fn new(kind: SynthKind, n: usize, seed: u64) -> Self {
        Self {
            kind,
            n,
            d0: 8,
            anomaly_fraction: 0.05,
            seed,
            params: SynthParams::default(),
        }
    }

    /// `⌈fraction·n⌉`, robust to representation error in the product.
    pub fn anomaly_count(&self) -> usize {
        (self.anomaly_fraction * self.n as f64 - 1e-9).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 20 {
            return Err(Error::Config(format!("n must be at least 20, got {}", self.n)));
        }
        if !(self.anomaly_fraction > 0.0 && self.anomaly_fraction < 0.5) {
            return Err(Error::Config(format!(
                "anomaly_fraction must lie in (0, 0.5), got {}",
                self.anomaly_fraction
            )));
        }
        if self.d0 == 0 {
            return Err(Error::Config("d0 must be positive".into()));
        }
        let p = &self.params;
        let probs_ok = [p.p_in, p.p_out].iter().all(|x| (0.0..=1.0).contains(x));
        if !probs_ok || p.blocks == 0 || p.clique_size < 2 || p.er_degree <= 0.0 {
            return Err(Error::Config("invalid generator constants".into()));
        }
        match self.kind {
            SynthKind::CliqueInjection if self.anomaly_count() < p.clique_size => Err(Error::Config(format!(
                "{} anomalies cannot form a clique of size {}",
                self.anomaly_count(),
                p.clique_size
            ))),
            SynthKind::SbmContextual if p.blocks < 2 => {
                Err(Error::Config("contextual anomalies need at least two blocks".into()))
            }
            SynthKind::TreeBridges if self.anomaly_count() > self.n - 1 => {
                Err(Error::Config("too many anomalies for the tree".into()))
            }
            _ => Ok(()),
        }
    }
}

fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

fn labels_for(n: usize, anomalies: &[usize]) -> Vec<u8> {
    let mut l = vec![0u8; n];
    for &a in anomalies {
        l[a] = 1;
    }
    l
}

pub fn gen_synth(spec: &SynthSpec) -> Result<Graph> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.kind {
        SynthKind::TreeBridges => tree_bridges(spec, &mut rng),
        SynthKind::SbmContextual => sbm_contextual(spec, &mut rng),
        SynthKind::CliqueInjection => clique_injection(spec, &mut rng),
    }
}

fn depth(i: usize) -> usize {
    (usize::BITS - (i + 1).leading_zeros() - 1) as usize
}

/// Which child of the root `i` descends from (the root itself gives `None`).
fn branch(mut i: usize) -> Option<usize> {
    if i == 0 {
        return None;
    }
    while i > 2 {
        i = (i - 1) / 2;
    }
    Some(i)
}

fn tree_bridges<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Result<Graph> {
    let n = spec.n;
    let p = &spec.params;
    let mut edges: BTreeSet<(usize, usize)> = (1..n).map(|i| ((i - 1) / 2, i)).collect();
    let max_depth = depth(n - 1);
    let means = gaussian(rng, max_depth + 1, spec.d0, p.mean_scale);
    let mut drift = gaussian(rng, n, spec.d0, p.branch_step);
    drift.row_mut(0).fill(0.0);
    for i in 1..n {
        let parent = drift.row((i - 1) / 2).to_owned();
        let mut row = drift.row_mut(i);
        row += &parent;
    }
    let mut x = gaussian(rng, n, spec.d0, p.noise) + drift;
    for i in 0..n {
        let mut row = x.row_mut(i);
        row += &means.row(depth(i));
    }

    let m = spec.anomaly_count();
    let mut anomalies: Vec<usize> = sample(rng, n - 1, m).into_iter().map(|i| i + 1).collect();
    anomalies.sort_unstable();
    let has = |e: &BTreeSet<(usize, usize)>, a: usize, b: usize| e.contains(&(a.min(b), a.max(b)));
    for &a in &anomalies {
        let own = branch(a);
        let pool: Vec<usize> = (1..n)
            .filter(|&v| branch(v) != own && !has(&edges, a, v))
            .collect();
        if pool.len() < p.bridge_edges {
            return Err(Error::Config(format!("tree of {n} nodes is too small for bridges")));
        }
        for k in sample(rng, pool.len(), p.bridge_edges) {
            let v = pool[k];
            edges.insert((a.min(v), a.max(v)));
        }
    }
    Graph::new(x, edges, Some(labels_for(n, &anomalies)))
}

fn sbm_contextual<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Result<Graph> {
    let n = spec.n;
    let p = &spec.params;
    let block_of = |i: usize| i * p.blocks / n;
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let prob = if block_of(u) == block_of(v) { p.p_in } else { p.p_out };
            if rng.random::<f64>() < prob {
                edges.push((u, v));
            }
        }
    }
    let means = gaussian(rng, p.blocks, spec.d0, p.mean_scale);
    let mut x = gaussian(rng, n, spec.d0, p.noise);
    for i in 0..n {
        let mut row = x.row_mut(i);
        row += &means.row(block_of(i));
    }
    let farthest: Vec<usize> = (0..p.blocks)
        .map(|b| {
            (0..p.blocks)
                .map(|c| {
                    let d = &means.row(b) - &means.row(c);
                    (c, d.dot(&d))
                })
                .fold((b, 0.0), |best, cur| if cur.1 > best.1 { cur } else { best })
                .0
        })
        .collect();

    let m = spec.anomaly_count();
    let mut anomalies: Vec<usize> = sample(rng, n, m).into_vec();
    anomalies.sort_unstable();
    let original = x.clone();
    for &a in &anomalies {
        let target = farthest[block_of(a)];
        let members: Vec<usize> = (0..n).filter(|&v| block_of(v) == target).collect();
        let donor = members[rng.random_range(0..members.len())];
        x.row_mut(a).assign(&original.row(donor));
    }
    Graph::new(x, edges, Some(labels_for(n, &anomalies)))
}

fn clique_injection<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Result<Graph> {
    let n = spec.n;
    let p = &spec.params;
    let prob = (p.er_degree / n as f64).min(1.0);
    let mut edges = BTreeSet::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < prob {
                edges.insert((u, v));
            }
        }
    }
    // features vary smoothly over the base graph, so an injected clique joins
    // nodes whose features disagree
    let base = Graph::new(Array2::zeros((n, 1)), edges.iter().copied(), None)?;
    let adj = sym_norm_adjacency(&base);
    let mut x = gaussian(rng, n, spec.d0, p.mean_scale);
    for _ in 0..p.smoothing_rounds {
        x = &x + &adj.mul_dense(&x)?;
    }
    let norm = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt().max(1e-12);
    x.mapv_inplace(|v| v / norm * p.mean_scale);
    x = x + gaussian(rng, n, spec.d0, p.noise * 0.2);

    let m = spec.anomaly_count();
    let mut anomalies: Vec<usize> = sample(rng, n, m).into_vec();
    let cliques = m.div_ceil(p.clique_size);
    let (small, extra) = (m / cliques, m % cliques);
    let mut offset = 0;
    for c in 0..cliques {
        let size = small + usize::from(c < extra);
        let members = &anomalies[offset..offset + size];
        for (i, &u) in members.iter().enumerate() {
            for &v in &members[i + 1..] {
                edges.insert((u.min(v), u.max(v)));
            }
        }
        offset += size;
    }
    anomalies.sort_unstable();
    Graph::new(x, edges, Some(labels_for(n, &anomalies)))
}

/// Sizes of the planted cliques for `m` anomalies.
pub fn clique_sizes(m: usize, clique_size: usize) -> Vec<usize> {
    let cliques = m.div_ceil(clique_size);
    (0..cliques)
        .map(|c| m / cliques + usize::from(c < m % cliques))
        .collect()
}
