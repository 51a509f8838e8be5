//! Attributed undirected graphs, their text formats, and the parameter-free
//! operators built from the symmetrically normalized adjacency.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};

pub const EDGE_FILE: &str = "edges.tsv";
pub const FEATURE_FILE: &str = "features.csv";
pub const LABEL_FILE: &str = "labels.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    /// Undirected edges stored once as `(u, v)` with `u < v`, sorted.
    edges: Vec<(usize, usize)>,
    raw_features: Array2<f64>,
    labels: Option<Vec<u8>>,
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds a graph, symmetrizing and deduplicating `edges` and dropping
    /// self-loops.
    pub fn new(
        raw_features: Array2<f64>,
        edges: impl IntoIterator<Item = (usize, usize)>,
        labels: Option<Vec<u8>>,
    ) -> Result<Self> {
        let num_nodes = raw_features.nrows();
        if num_nodes == 0 {
            return Err(Error::Data("graph must have at least one node".into()));
        }
        if raw_features.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data("feature matrix has non-finite entries".into()));
        }
        let mut set = BTreeSet::new();
        for (u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::Data(format!(
                    "edge ({u}, {v}) endpoint out of range for {num_nodes} nodes"
                )));
            }
            if u != v {
                set.insert((u.min(v), u.max(v)));
            }
        }
        if let Some(l) = &labels {
            if l.len() != num_nodes {
                return Err(Error::Data(format!(
                    "label length {} does not match {num_nodes} nodes",
                    l.len()
                )));
            }
            if let Some(bad) = l.iter().find(|&&x| x > 1) {
                return Err(Error::Data(format!("label {bad} is not 0 or 1")));
            }
        }
        let edges: Vec<_> = set.into_iter().collect();
        let mut neighbors = vec![Vec::new(); num_nodes];
        for &(u, v) in &edges {
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        Ok(Self {
            num_nodes,
            edges,
            raw_features,
            labels,
            neighbors,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn raw_features(&self) -> &Array2<f64> {
        &self.raw_features
    }

    pub fn feature_dim(&self) -> usize {
        self.raw_features.ncols()
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.neighbors[v].len()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors[u].binary_search(&v).is_ok()
    }

    /// Relabels node `v` as `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_nodes;
        let mut features = Array2::zeros(self.raw_features.dim());
        for (v, &p) in perm.iter().enumerate() {
            features.row_mut(p).assign(&self.raw_features.row(v));
        }
        let labels = self.labels.as_ref().map(|l| {
            let mut out = vec![0; n];
            for v in 0..n {
                out[perm[v]] = l[v];
            }
            out
        });
        let edges = self.edges.iter().map(|&(u, v)| (perm[u], perm[v]));
        Graph::new(features, edges, labels)
    }
}

/// Compressed sparse rows, used for the normalized adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseMatrix {
    pub fn identity(n: usize) -> Self {
        Self {
            n,
            row_ptr: (0..=n).collect(),
            cols: (0..n).collect(),
            vals: vec![1.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n, self.n));
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                out[[i, j]] = v;
            }
        }
        out
    }

    pub fn mul_dense(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.nrows() != self.n {
            return Err(Error::Dimension(format!(
                "sparse operator is {n}x{n} but operand has {} rows",
                x.nrows(),
                n = self.n
            )));
        }
        let mut out = Array2::zeros((self.n, x.ncols()));
        for i in 0..self.n {
            let mut row = out.row_mut(i);
            for (j, v) in self.row(i) {
                row.scaled_add(v, &x.row(j));
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, f: ArrayView1<f64>) -> Result<Array1<f64>> {
        if f.len() != self.n {
            return Err(Error::Dimension(format!(
                "sparse operator is {n}x{n} but vector has length {}",
                f.len(),
                n = self.n
            )));
        }
        Ok((0..self.n)
            .map(|i| self.row(i).map(|(j, v)| v * f[j]).sum())
            .collect())
    }
}

/// `D^{-1/2} A D^{-1/2}` with isolated nodes left as zero rows and columns.
pub fn sym_norm_adjacency(g: &Graph) -> SparseMatrix {
    let n = g.num_nodes();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|v| match g.degree(v) {
            0 => 0.0,
            d => 1.0 / (d as f64).sqrt(),
        })
        .collect();
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut cols = Vec::with_capacity(2 * g.num_edges());
    let mut vals = Vec::with_capacity(2 * g.num_edges());
    row_ptr.push(0);
    for u in 0..n {
        for &v in g.neighbors(u) {
            cols.push(v);
            vals.push(inv_sqrt[u] * inv_sqrt[v]);
        }
        row_ptr.push(cols.len());
    }
    SparseMatrix {
        n,
        row_ptr,
        cols,
        vals,
    }
}

/// `[X, ÃX, Ã²X, …]` up to `k_hops`.
pub fn propagate_hops(
    adj_norm: &SparseMatrix,
    x: &Array2<f64>,
    k_hops: usize,
) -> Result<Vec<Array2<f64>>> {
    let mut hops = Vec::with_capacity(k_hops + 1);
    hops.push(x.clone());
    for k in 0..k_hops {
        let next = adj_norm.mul_dense(&hops[k])?;
        hops.push(next);
    }
    Ok(hops)
}

/// Smoothness `fᵀ(I − Ã)f` without the usual degree denominator.
pub fn laplacian_score(f: ArrayView1<f64>, adj_norm: &SparseMatrix) -> Result<f64> {
    let af = adj_norm.mul_vec(f)?;
    Ok(f.dot(&f) - f.dot(&af))
}

pub fn load_graph(
    edge_path: &Path,
    feature_path: &Path,
    label_path: Option<&Path>,
) -> Result<Graph> {
    let features = read_features(feature_path)?;
    let n = features.nrows();
    let edges = read_edges(edge_path, n)?;
    let labels = label_path.map(|p| read_labels(p, n)).transpose()?;
    Graph::new(features, edges, labels)
}

/// Loads `edges.tsv`, `features.csv` and, if present, `labels.txt` from `dir`.
pub fn load_graph_dir(dir: &Path) -> Result<Graph> {
    let labels = dir.join(LABEL_FILE);
    load_graph(
        &dir.join(EDGE_FILE),
        &dir.join(FEATURE_FILE),
        labels.exists().then_some(labels.as_path()),
    )
}

pub fn write_graph_dir(g: &Graph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut edges = String::new();
    for &(u, v) in g.edges() {
        writeln!(edges, "{u}\t{v}").unwrap();
    }
    fs::write(dir.join(EDGE_FILE), edges)?;
    fs::write(dir.join(FEATURE_FILE), matrix_to_csv(g.raw_features()))?;
    if let Some(labels) = g.labels() {
        let mut s = String::new();
        for l in labels {
            writeln!(s, "{l}").unwrap();
        }
        fs::write(dir.join(LABEL_FILE), s)?;
    }
    Ok(())
}

pub fn matrix_to_csv(m: &Array2<f64>) -> String {
    let mut s = String::new();
    for row in m.rows() {
        let mut first = true;
        for x in row {
            if !first {
                s.push(',');
            }
            first = false;
            write!(s, "{x}").unwrap();
        }
        s.push('\n');
    }
    s
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: PathBuf::from(path),
        line,
        msg: msg.into(),
    }
}

fn read_edges(path: &Path, n: usize) -> Result<Vec<(usize, usize)>> {
    let text = read_text(path)?;
    let mut edges = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(parse_err(path, lineno, "expected two tab-separated node ids"));
        };
        let parse = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| parse_err(path, lineno, format!("invalid node id {s:?}")))
        };
        let (u, v) = (parse(a)?, parse(b)?);
        if u >= n || v >= n {
            return Err(parse_err(
                path,
                lineno,
                format!("endpoint out of range: ({u}, {v}) with {n} nodes"),
            ));
        }
        edges.push((u, v));
    }
    Ok(edges)
}

fn read_features(path: &Path) -> Result<Array2<f64>> {
    let text = read_text(path)?;
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut count = 0;
        for field in line.split(',') {
            let x: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("non-numeric feature {field:?}")))?;
            if !x.is_finite() {
                return Err(parse_err(path, lineno, "non-finite feature"));
            }
            data.push(x);
            count += 1;
        }
        match width {
            None => width = Some(count),
            Some(w) if w != count => {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("row has {count} features, expected {w}"),
                ))
            }
            _ => {}
        }
        rows += 1;
    }
    let width = width.ok_or_else(|| Error::Data(format!("{}: no feature rows", path.display())))?;
    Ok(Array2::from_shape_vec((rows, width), data).expect("row widths checked"))
}

pub fn read_labels(path: &Path, n: usize) -> Result<Vec<u8>> {
    let text = read_text(path)?;
    let mut labels = Vec::with_capacity(n);
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        match t {
            "0" => labels.push(0),
            "1" => labels.push(1),
            _ => return Err(parse_err(path, i + 1, format!("label {t:?} is not 0 or 1"))),
        }
    }
    if labels.len() != n {
        return Err(Error::Data(format!(
            "{}: label length mismatch, {} labels for {n} nodes",
            path.display(),
            labels.len()
        )));
    }
    Ok(labels)
}
