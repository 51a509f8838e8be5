//! Constant-curvature reconstruction experts.
//!
//! An expert maps an embedding onto its manifold, runs tangent-space affine
//! layers sandwiched between log and exp maps at the origin, and maps the
//! result back. The curvature is `κ = κ₀·e^θ` with `θ` learnable and clamped so
//! that `|κ| ∈ [1e-3, 10]`; `κ₀ = 0` gives a fixed Euclidean expert.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Family, ManifoldSpec, DEFAULT_EPS_BOUNDARY};
use crate::nn::{check_chain, Linear, LinearVars};
use crate::tape::{Mat, Tape, Var};
use crate::{Error, Result};

pub const KAPPA_MIN: f64 = 1e-3;
pub const KAPPA_MAX: f64 = 10.0;
pub const DEFAULT_KAPPAS: [f64; 5] = [0.0, -0.5, -1.0, 0.5, 1.0];
pub const DEFAULT_EXPERT_LAYERS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertModel {
    pub index: usize,
    pub kappa_init: f64,
    pub theta: f64,
    pub layers: Vec<Linear>,
    pub dim: usize,
    #[serde(default = "default_eps")]
    pub eps_boundary: f64,
}

fn default_eps() -> f64 {
    DEFAULT_EPS_BOUNDARY
}

impl ExpertModel {
    pub fn init<R: Rng>(index: usize, kappa_init: f64, dim: usize, depth: usize, rng: &mut R) -> Self {
        Self {
            index,
            kappa_init,
            theta: 0.0,
            layers: (0..depth).map(|_| Linear::xavier(dim, dim, rng)).collect(),
            dim,
            eps_boundary: DEFAULT_EPS_BOUNDARY,
        }
    }

    pub fn family(&self) -> Family {
        Family::of(self.kappa_init)
    }

    /// Admissible range of `θ`; empty for Euclidean experts.
    pub fn theta_bounds(&self) -> (f64, f64) {
        let k0 = self.kappa_init.abs();
        if k0 == 0.0 {
            return (0.0, 0.0);
        }
        ((KAPPA_MIN / k0).ln(), (KAPPA_MAX / k0).ln())
    }

    pub fn manifold(&self) -> Result<ManifoldSpec> {
        ManifoldSpec::with_eps(curvature_of(self), self.dim, self.eps_boundary)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.kappa_init.is_finite() || !self.theta.is_finite() {
            return Err(Error::Numeric(format!("expert {}: non-finite curvature", self.index)));
        }
        if self.kappa_init != 0.0 {
            let k = self.kappa_init.abs();
            if !(KAPPA_MIN..=KAPPA_MAX).contains(&k) {
                return Err(Error::Config(format!(
                    "expert {}: |κ₀| = {k} outside [{KAPPA_MIN}, {KAPPA_MAX}]",
                    self.index
                )));
            }
        }
        if self.layers.is_empty() {
            return Err(Error::Config(format!("expert {} has no layers", self.index)));
        }
        check_chain(&self.layers, self.dim, self.dim, &format!("expert {}", self.index))
    }
}

pub fn curvature_of(e: &ExpertModel) -> f64 {
    if e.kappa_init == 0.0 {
        return 0.0;
    }
    let (lo, hi) = e.theta_bounds();
    e.kappa_init * e.theta.clamp(lo, hi).exp()
}

/// Reconstructs one embedding.
pub fn expert_forward(e: &ExpertModel, h: &[f64]) -> Result<Vec<f64>> {
    if h.len() != e.dim {
        return Err(Error::Dimension(format!(
            "expert {} expects width {}, got {}",
            e.index,
            e.dim,
            h.len()
        )));
    }
    let m = e.manifold()?;
    let last = e.layers.len() - 1;
    let mut x = m.exp_origin(h)?;
    for (i, layer) in e.layers.iter().enumerate() {
        let t = m.log_origin(&x)?;
        let mut u = layer.apply_vec(&t);
        if i < last {
            u.iter_mut().for_each(|v| *v = v.tanh());
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "expert {} layer {i} produced a non-finite activation",
                e.index
            )));
        }
        x = m.exp_origin(&u)?;
    }
    let out = m.log_origin(&x)?;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("expert {} output is non-finite", e.index)));
    }
    Ok(out)
}

/// Row-wise [`expert_forward`].
pub fn expert_forward_rows(e: &ExpertModel, h: &Mat) -> Result<Mat> {
    let mut out = Mat::zeros((h.nrows(), e.dim));
    for (i, row) in h.rows().into_iter().enumerate() {
        let r = expert_forward(e, &row.to_vec())?;
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&r));
    }
    Ok(out)
}

pub(crate) struct ExpertVars {
    pub layers: Vec<LinearVars>,
    pub theta: Var,
    family: Family,
    abs_kappa0: f64,
    bounds: (f64, f64),
    eps: f64,
}

impl ExpertVars {
    pub fn new(e: &ExpertModel, tape: &mut Tape) -> Self {
        Self {
            layers: e.layers.iter().map(|l| l.leaves(tape)).collect(),
            theta: tape.scalar_leaf(e.theta),
            family: e.family(),
            abs_kappa0: e.kappa_init.abs(),
            bounds: e.theta_bounds(),
            eps: e.eps_boundary,
        }
    }

    pub fn family(&self) -> Family {
        self.family
    }

    /// `√|κ|` as a recorded scalar; `None` for Euclidean experts.
    pub fn scale(&self, tape: &mut Tape) -> Option<Var> {
        (self.family != Family::Euclidean)
            .then(|| tape.curv_scale(self.theta, self.abs_kappa0, self.bounds.0, self.bounds.1))
    }

    /// Tangent vectors at curvature scale `s` → projected unit-curvature points.
    pub fn to_unit_points(&self, tape: &mut Tape, v: Var, s: Var) -> Var {
        let sv = tape.scale_by(v, s);
        let y = tape.exp_unit(sv, self.family);
        tape.project_unit(y, self.family, self.eps)
    }

    /// Unit-curvature points → tangent vectors at curvature scale `s`.
    pub fn to_tangent(&self, tape: &mut Tape, y: Var, s: Var) -> Var {
        let t = tape.log_unit(y, self.family);
        tape.div_by(t, s)
    }

    /// Recorded counterpart of [`expert_forward_rows`].
    pub fn forward(&self, tape: &mut Tape, h: Var, s: Option<Var>) -> Var {
        let last = self.layers.len() - 1;
        match s {
            None => {
                let mut x = h;
                for (i, l) in self.layers.iter().enumerate() {
                    x = l.apply(tape, x);
                    if i < last {
                        x = tape.tanh(x);
                    }
                }
                x
            }
            Some(s) => {
                let mut y = self.to_unit_points(tape, h, s);
                for (i, l) in self.layers.iter().enumerate() {
                    let t = self.to_tangent(tape, y, s);
                    let mut u = l.apply(tape, t);
                    if i < last {
                        u = tape.tanh(u);
                    }
                    y = self.to_unit_points(tape, u, s);
                }
                self.to_tangent(tape, y, s)
            }
        }
    }
}
