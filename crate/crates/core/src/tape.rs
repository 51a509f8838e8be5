//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays it in reverse and returns the gradient of a scalar (1×1) root with
//! respect to every recorded value. Scalars are 1×1 matrices. The manifold
//! operations work at unit curvature; curvature enters through
//! [`Tape::scale_by`] / [`Tape::div_by`] with the learnable `√|κ|`.

use ndarray::{Array2, Axis, Zip};

use crate::geometry::{unit, Family};

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-anchor index sets for the structure-contrastive objective. Row indices
/// refer to the embedding matrix handed to [`Tape::info_nce`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContrastPlan {
    pub anchors: Vec<ContrastAnchor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastAnchor {
    pub node: usize,
    pub positives: Vec<usize>,
    /// Denominator set; contains every positive.
    pub denominator: Vec<usize>,
}

/// Weighted binary cross-entropy terms on `⟨h_i, h_j⟩` logits.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairTerms {
    pub pairs: Vec<(usize, usize)>,
    pub targets: Vec<f64>,
    pub weights: Vec<f64>,
    pub normalizer: f64,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Tanh(Var),
    ScaleConst(Var, f64),
    ScaleBy(Var, Var),
    DivBy(Var, Var),
    ConcatCols(Vec<Var>),
    RowScale(Var, Var, usize),
    SumAll(Var),
    ExpUnit(Var, Family),
    LogUnit(Var, Family),
    ProjectUnit(Var, Family, f64),
    PairDist(Var, Var, Family),
    RowMin(Var, Vec<usize>),
    Softmax(Var, f64),
    NegEntropyMean(Var),
    MseRows(Var, Var),
    BceLogitsMean(Var, Mat),
    PairBce(Var, PairTerms),
    NormalizeRows(Var),
    InfoNce(Var, ContrastPlan, f64),
    CurvScale {
        theta: Var,
        lo: f64,
        hi: f64,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, zeros if the root does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape))
    }
}

fn scalar(x: f64) -> Mat {
    Mat::from_elem((1, 1), x)
}

fn rows_of(m: &Mat, i: usize) -> &[f64] {
    m.row(i).to_slice().expect("standard layout")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Numerically stable `ln(1 + e^{-|x|})`-based BCE with logits.
fn bce_logit(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, x: f64) -> Var {
        self.leaf(scalar(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds the 1×m row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::AddRow(a, b))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::ScaleConst(a, c))
    }

    /// Multiplies `a` by the 1×1 value `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let v = self.value(a) * self.scalar_value(s);
        self.push(v, Op::ScaleBy(a, s))
    }

    pub fn div_by(&mut self, a: Var, s: Var) -> Var {
        let v = self.value(a) / self.scalar_value(s);
        self.push(v, Op::DivBy(a, s))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Row `i` of `a` times `w[i, col]`.
    pub fn row_scale(&mut self, a: Var, w: Var, col: usize) -> Var {
        let weights = self.value(w).column(col).to_owned();
        let mut v = self.value(a).clone();
        for (mut row, wi) in v.rows_mut().into_iter().zip(weights.iter()) {
            row *= *wi;
        }
        self.push(v, Op::RowScale(a, w, col))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    /// Row-wise exponential map at the origin of the unit-curvature manifold.
    /// Spherical rows gain one ambient coordinate.
    pub fn exp_unit(&mut self, a: Var, family: Family) -> Var {
        let x = self.value(a);
        let v = match family {
            Family::Euclidean => x.clone(),
            Family::Hyperbolic => map_rows(x, x.ncols(), |_, r, out| {
                out.copy_from_slice(&unit::hyperbolic_exp(r))
            }),
            Family::Spherical => map_rows(x, x.ncols() + 1, |_, r, out| {
                out.copy_from_slice(&unit::spherical_exp(r))
            }),
        };
        self.push(v, Op::ExpUnit(a, family))
    }

    pub fn log_unit(&mut self, a: Var, family: Family) -> Var {
        let x = self.value(a);
        let v = match family {
            Family::Euclidean => x.clone(),
            Family::Hyperbolic => map_rows(x, x.ncols(), |_, r, out| {
                out.copy_from_slice(&unit::hyperbolic_log(r))
            }),
            Family::Spherical => map_rows(x, x.ncols() - 1, |_, r, out| {
                out.copy_from_slice(&unit::spherical_log(r))
            }),
        };
        self.push(v, Op::LogUnit(a, family))
    }

    pub fn project_unit(&mut self, a: Var, family: Family, eps: f64) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let r = row.as_slice_mut().expect("standard layout");
            match family {
                Family::Euclidean => {}
                Family::Hyperbolic => unit::hyperbolic_project(r, eps),
                Family::Spherical => unit::spherical_project(r),
            }
        }
        self.push(v, Op::ProjectUnit(a, family, eps))
    }

    /// Pairwise unit-curvature distances between the rows of `p` and `q`.
    pub fn pair_dist(&mut self, p: Var, q: Var, family: Family) -> Var {
        let (pv, qv) = (self.value(p), self.value(q));
        let mut v = Mat::zeros((pv.nrows(), qv.nrows()));
        for i in 0..pv.nrows() {
            for j in 0..qv.nrows() {
                let (a, b) = (rows_of(pv, i), rows_of(qv, j));
                v[[i, j]] = match family {
                    Family::Euclidean => unit::euclidean_dist(a, b),
                    Family::Hyperbolic => unit::hyperbolic_dist(a, b),
                    Family::Spherical => unit::spherical_dist(a, b),
                };
            }
        }
        self.push(v, Op::PairDist(p, q, family))
    }

    /// Column vector of row minima (ties → lowest column).
    pub fn row_min(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut arg = Vec::with_capacity(x.nrows());
        let mut v = Mat::zeros((x.nrows(), 1));
        for (i, row) in x.rows().into_iter().enumerate() {
            let (j, m) = row
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |best, (j, &val)| if val < best.1 { (j, val) } else { best });
            arg.push(j);
            v[[i, 0]] = m;
        }
        self.push(v, Op::RowMin(a, arg))
    }

    /// Row-wise `softmax(a/τ)`, optionally restricted to `mask` (zeros
    /// elsewhere). Every masked row must keep at least one entry.
    pub fn softmax_rows(&mut self, a: Var, tau: f64, mask: Option<Array2<bool>>) -> Var {
        let x = self.value(a);
        let mut v = Mat::zeros(x.dim());
        for i in 0..x.nrows() {
            let keep = |j: usize| mask.as_ref().is_none_or(|m| m[[i, j]]);
            let m = (0..x.ncols())
                .filter(|&j| keep(j))
                .map(|j| x[[i, j]] / tau)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in (0..x.ncols()).filter(|&j| keep(j)) {
                let e = (x[[i, j]] / tau - m).exp();
                v[[i, j]] = e;
                total += e;
            }
            v.row_mut(i).mapv_inplace(|e| e / total);
        }
        self.push(v, Op::Softmax(a, tau))
    }

    /// `mean_rows Σ_j g_ij ln g_ij`
    pub fn neg_entropy_mean(&mut self, g: Var) -> Var {
        let x = self.value(g);
        let total: f64 = x.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum();
        let v = scalar(total / x.nrows() as f64);
        self.push(v, Op::NegEntropyMean(g))
    }

    /// `mean_rows ‖a_i − b_i‖²`
    pub fn mse_rows(&mut self, a: Var, b: Var) -> Var {
        let d = self.value(a) - self.value(b);
        let v = scalar(d.iter().map(|x| x * x).sum::<f64>() / d.nrows() as f64);
        self.push(v, Op::MseRows(a, b))
    }

    /// Mean binary cross-entropy of `σ(logits)` against `target`.
    pub fn bce_logits_mean(&mut self, logits: Var, target: Mat) -> Var {
        let x = self.value(logits);
        let total: f64 = x.iter().zip(target.iter()).map(|(&l, &t)| bce_logit(l, t)).sum();
        let v = scalar(total / x.len() as f64);
        self.push(v, Op::BceLogitsMean(logits, target))
    }

    pub fn pair_bce(&mut self, h: Var, terms: PairTerms) -> Var {
        let x = self.value(h);
        let mut total = 0.0;
        for (k, &(i, j)) in terms.pairs.iter().enumerate() {
            let l = dot(rows_of(x, i), rows_of(x, j));
            total += terms.weights[k] * bce_logit(l, terms.targets[k]);
        }
        let v = scalar(total / terms.normalizer);
        self.push(v, Op::PairBce(h, terms))
    }

    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt().max(NORM_FLOOR);
            row /= n;
        }
        self.push(v, Op::NormalizeRows(a))
    }

    /// Mean over anchors of `−ln Σ_P e^{⟨z_v,z_u⟩/τ} + ln Σ_Den e^{⟨z_v,z_j⟩/τ}`;
    /// zero when the plan has no anchors.
    pub fn info_nce(&mut self, z: Var, plan: ContrastPlan, tau: f64) -> Var {
        let x = self.value(z);
        let mut total = 0.0;
        for a in &plan.anchors {
            let zv = rows_of(x, a.node);
            let sim = |u: &usize| dot(zv, rows_of(x, *u)) / tau;
            total += -log_sum_exp(a.positives.iter().map(sim))
                + log_sum_exp(a.denominator.iter().map(sim));
        }
        let count = plan.anchors.len().max(1) as f64;
        let v = scalar(total / count);
        self.push(v, Op::InfoNce(z, plan, tau))
    }

    /// `√|κ₀|·exp(clamp(θ, lo, hi)/2)`, i.e. `√|κ|` for the multiplicative
    /// curvature parametrization `κ = κ₀·e^θ`.
    pub fn curv_scale(&mut self, theta: Var, abs_kappa0: f64, lo: f64, hi: f64) -> Var {
        let t = self.scalar_value(theta).clamp(lo, hi);
        let v = scalar(abs_kappa0.sqrt() * (0.5 * t).exp());
        self.push(v, Op::CurvScale { theta, lo, hi })
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut v = Mat::zeros(self.value(terms[0].0).dim());
        for &(t, w) in terms {
            v.scaled_add(w, self.value(t));
        }
        self.push(v, Op::WeightedSum(terms.to_vec()))
    }

    /// Gradients of the 1×1 `root` with respect to every recorded value.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let out = &self.nodes[idx].value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, d: Mat| match &mut grads[v.0] {
            Some(existing) => *existing += &d,
            slot => *slot = Some(d),
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.dot(&val(*b).t()));
                acc(*b, val(*a).t().dot(g));
            }
            Op::MatMulT(a, b) => {
                acc(*a, g.dot(val(*b)));
                acc(*b, g.t().dot(val(*a)));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                acc(*a, g * val(*b));
                acc(*b, g * val(*a));
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(out).for_each(|d, &y| *d *= 1.0 - y * y);
                acc(*a, d);
            }
            Op::ScaleConst(a, c) => acc(*a, g * *c),
            Op::ScaleBy(a, s) => {
                let sv = val(*s)[[0, 0]];
                acc(*a, g * sv);
                acc(*s, scalar((g * val(*a)).sum()));
            }
            Op::DivBy(a, s) => {
                let sv = val(*s)[[0, 0]];
                acc(*a, g / sv);
                acc(*s, scalar(-(g * val(*a)).sum() / (sv * sv)));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).ncols();
                    acc(p, g.slice(ndarray::s![.., offset..offset + w]).to_owned());
                    offset += w;
                }
            }
            Op::RowScale(a, w, col) => {
                let (av, wv) = (val(*a), val(*w));
                let mut da = g.clone();
                let mut dw = Mat::zeros(wv.dim());
                for i in 0..av.nrows() {
                    let wi = wv[[i, *col]];
                    da.row_mut(i).mapv_inplace(|x| x * wi);
                    dw[[i, *col]] = g.row(i).dot(&av.row(i));
                }
                acc(*a, da);
                acc(*w, dw);
            }
            Op::SumAll(a) => acc(*a, Mat::from_elem(val(*a).dim(), g[[0, 0]])),
            Op::ExpUnit(a, family) => acc(*a, exp_unit_vjp(val(*a), g, *family)),
            Op::LogUnit(a, family) => acc(*a, log_unit_vjp(val(*a), g, *family)),
            Op::ProjectUnit(a, family, eps) => acc(*a, project_unit_vjp(val(*a), g, *family, *eps)),
            Op::PairDist(p, q, family) => {
                let (dp, dq) = pair_dist_vjp(val(*p), val(*q), out, g, *family);
                acc(*p, dp);
                acc(*q, dq);
            }
            Op::RowMin(a, arg) => {
                let mut d = Mat::zeros(val(*a).dim());
                for (i, &j) in arg.iter().enumerate() {
                    d[[i, j]] = g[[i, 0]];
                }
                acc(*a, d);
            }
            Op::Softmax(a, tau) => {
                let mut d = Mat::zeros(out.dim());
                for i in 0..out.nrows() {
                    let inner = out.row(i).dot(&g.row(i));
                    for j in 0..out.ncols() {
                        d[[i, j]] = out[[i, j]] * (g[[i, j]] - inner) / tau;
                    }
                }
                acc(*a, d);
            }
            Op::NegEntropyMean(p) => {
                let pv = val(*p);
                let n = pv.nrows() as f64;
                let gs = g[[0, 0]];
                acc(*p, pv.mapv(|x| if x > 0.0 { gs * (x.ln() + 1.0) / n } else { 0.0 }));
            }
            Op::MseRows(a, b) => {
                let diff = val(*a) - val(*b);
                let d = diff * (2.0 * g[[0, 0]] / val(*a).nrows() as f64);
                acc(*b, -&d);
                acc(*a, d);
            }
            Op::BceLogitsMean(l, target) => {
                let lv = val(*l);
                let scale = g[[0, 0]] / lv.len() as f64;
                let mut d = lv.mapv(sigmoid);
                d -= target;
                acc(*l, d * scale);
            }
            Op::PairBce(h, terms) => {
                let hv = val(*h);
                let mut d = Mat::zeros(hv.dim());
                let scale = g[[0, 0]] / terms.normalizer;
                for (k, &(i, j)) in terms.pairs.iter().enumerate() {
                    let l = dot(rows_of(hv, i), rows_of(hv, j));
                    let c = scale * terms.weights[k] * (sigmoid(l) - terms.targets[k]);
                    let hj = hv.row(j).to_owned();
                    let hi = hv.row(i).to_owned();
                    d.row_mut(i).scaled_add(c, &hj);
                    d.row_mut(j).scaled_add(c, &hi);
                }
                acc(*h, d);
            }
            Op::NormalizeRows(a) => {
                let av = val(*a);
                let mut d = Mat::zeros(av.dim());
                for i in 0..av.nrows() {
                    let n = av.row(i).dot(&av.row(i)).sqrt();
                    let gi = g.row(i);
                    if n > NORM_FLOOR {
                        let z = out.row(i);
                        let proj = z.dot(&gi);
                        for j in 0..av.ncols() {
                            d[[i, j]] = (gi[j] - proj * z[j]) / n;
                        }
                    } else {
                        d.row_mut(i).assign(&(&gi / NORM_FLOOR));
                    }
                }
                acc(*a, d);
            }
            Op::InfoNce(z, plan, tau) => {
                let zv = val(*z);
                let mut d = Mat::zeros(zv.dim());
                let scale = g[[0, 0]] / plan.anchors.len().max(1) as f64 / tau;
                for a in &plan.anchors {
                    let anchor = rows_of(zv, a.node).to_vec();
                    let sim = |u: &usize| dot(&anchor, rows_of(zv, *u)) / tau;
                    let lse_p = log_sum_exp(a.positives.iter().map(sim));
                    let lse_d = log_sum_exp(a.denominator.iter().map(sim));
                    let mut d_anchor = vec![0.0; anchor.len()];
                    for (set, lse, sign) in [(&a.positives, lse_p, -1.0), (&a.denominator, lse_d, 1.0)] {
                        for &u in set.iter() {
                            let w = sign * scale * (sim(&u) - lse).exp();
                            for (k, da) in d_anchor.iter_mut().enumerate() {
                                *da += w * zv[[u, k]];
                                d[[u, k]] += w * anchor[k];
                            }
                        }
                    }
                    for (k, da) in d_anchor.into_iter().enumerate() {
                        d[[a.node, k]] += da;
                    }
                }
                acc(*z, d);
            }
            Op::CurvScale { theta, lo, hi } => {
                let t = val(*theta)[[0, 0]];
                let ds = if t > *lo && t < *hi { 0.5 * out[[0, 0]] } else { 0.0 };
                acc(*theta, scalar(g[[0, 0]] * ds));
            }
            Op::WeightedSum(terms) => {
                for &(t, w) in terms {
                    acc(t, g * w);
                }
            }
        }
    }
}

const NORM_FLOOR: f64 = 1e-12;

fn map_rows(x: &Mat, width: usize, f: impl Fn(usize, &[f64], &mut [f64])) -> Mat {
    let mut out = Mat::zeros((x.nrows(), width));
    for i in 0..x.nrows() {
        let mut row = out.row_mut(i);
        f(i, rows_of(x, i), row.as_slice_mut().expect("standard layout"));
    }
    out
}

/// VJP of `y = φ(r)·v` given `(φ, φ'(r)/r)`.
fn radial_vjp(v: &[f64], g: &[f64], phi: f64, dphi_over_r: f64, out: &mut [f64]) {
    let vg = dot(v, g);
    for k in 0..v.len() {
        out[k] = phi * g[k] + dphi_over_r * vg * v[k];
    }
}

fn exp_unit_vjp(x: &Mat, g: &Mat, family: Family) -> Mat {
    match family {
        Family::Euclidean => g.clone(),
        Family::Hyperbolic => map_rows(x, x.ncols(), |i, v, out| {
            let (phi, dphi) = unit::hyperbolic_exp_factor(crate::geometry::norm(v));
            radial_vjp(v, rows_of(g, i), phi, dphi, out);
        }),
        Family::Spherical => map_rows(x, x.ncols(), |i, v, out| {
            let gr = rows_of(g, i);
            let (gy, gz) = gr.split_at(v.len());
            let (phi, dphi) = unit::sinc_factor(crate::geometry::norm(v));
            radial_vjp(v, gy, phi, dphi, out);
            // d cos(r)/dv = −sin(r)/r · v = −φ·v
            for k in 0..v.len() {
                out[k] -= gz[0] * phi * v[k];
            }
        }),
    }
}

fn log_unit_vjp(x: &Mat, g: &Mat, family: Family) -> Mat {
    match family {
        Family::Euclidean => g.clone(),
        Family::Hyperbolic => map_rows(x, x.ncols(), |i, p, out| {
            let (phi, dphi) = unit::hyperbolic_log_factor(crate::geometry::norm(p));
            radial_vjp(p, rows_of(g, i), phi, dphi, out);
        }),
        Family::Spherical => map_rows(x, x.ncols(), |i, p, out| {
            let gr = rows_of(g, i);
            let (y, z) = p.split_at(p.len() - 1);
            let (a, z) = (crate::geometry::norm(y), z[0]);
            let (psi, dpsi_a, dpsi_z) = unit::spherical_log_factor(a, z);
            let yg = dot(y, gr);
            for k in 0..y.len() {
                out[k] = psi * gr[k] + dpsi_a * yg * y[k];
            }
            out[y.len()] = dpsi_z * yg;
        }),
    }
}

fn project_unit_vjp(x: &Mat, g: &Mat, family: Family, eps: f64) -> Mat {
    match family {
        Family::Euclidean => g.clone(),
        Family::Hyperbolic => map_rows(x, x.ncols(), |i, p, out| {
            let gr = rows_of(g, i);
            let r = crate::geometry::norm(p);
            let limit = unit::ball_limit(eps);
            if r >= limit {
                radial_vjp(p, gr, limit / r, -limit / (r * r * r), out);
            } else {
                out.copy_from_slice(gr);
            }
        }),
        Family::Spherical => map_rows(x, x.ncols(), |i, p, out| {
            let gr = rows_of(g, i);
            let r = crate::geometry::norm(p);
            if r == 0.0 {
                out.fill(0.0);
            } else {
                radial_vjp(p, gr, 1.0 / r, -1.0 / (r * r * r), out);
            }
        }),
    }
}

fn pair_dist_vjp(p: &Mat, q: &Mat, dist: &Mat, g: &Mat, family: Family) -> (Mat, Mat) {
    let mut dp = Mat::zeros(p.dim());
    let mut dq = Mat::zeros(q.dim());
    let width = p.ncols();
    for i in 0..p.nrows() {
        let a = rows_of(p, i);
        for j in 0..q.nrows() {
            let gij = g[[i, j]];
            if gij == 0.0 || dist[[i, j]] == 0.0 {
                continue;
            }
            let b = rows_of(q, j);
            match family {
                Family::Euclidean => {
                    let c = gij / dist[[i, j]];
                    for k in 0..width {
                        let t = c * (a[k] - b[k]);
                        dp[[i, k]] += t;
                        dq[[j, k]] -= t;
                    }
                }
                Family::Hyperbolic => {
                    let x = unit::hyperbolic_dist_arg(a, b);
                    let dd_dx = 1.0 / (x * (x + 2.0)).sqrt();
                    let delta: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
                    let alpha = 1.0 - dot(a, a);
                    let beta = 1.0 - dot(b, b);
                    let c = gij * dd_dx;
                    let common = 4.0 / (alpha * beta);
                    let cp = 4.0 * delta / (alpha * alpha * beta);
                    let cq = 4.0 * delta / (alpha * beta * beta);
                    for k in 0..width {
                        let diff = a[k] - b[k];
                        dp[[i, k]] += c * (common * diff + cp * a[k]);
                        dq[[j, k]] += c * (-common * diff + cq * b[k]);
                    }
                }
                Family::Spherical => {
                    let (na, nb) = (crate::geometry::norm(a), crate::geometry::norm(b));
                    let ah: Vec<f64> = a.iter().map(|x| x / na).collect();
                    let bh: Vec<f64> = b.iter().map(|x| x / nb).collect();
                    let u: Vec<f64> = ah.iter().zip(&bh).map(|(x, y)| x - y).collect();
                    let w = crate::geometry::norm(&u);
                    if w == 0.0 || w >= 2.0 {
                        continue;
                    }
                    let dd_dw = 1.0 / (1.0 - 0.25 * w * w).sqrt();
                    let c = gij * dd_dw / w;
                    // gradient w.r.t. the normalized points is ±c·u, then
                    // through the normalization (I − x̂x̂ᵀ)/‖x‖
                    let ua = dot(&u, &ah);
                    let ub = dot(&u, &bh);
                    for k in 0..width {
                        dp[[i, k]] += c * (u[k] - ua * ah[k]) / na;
                        dq[[j, k]] -= c * (u[k] - ub * bh[k]) / nb;
                    }
                }
            }
        }
    }
    (dp, dq)
}
