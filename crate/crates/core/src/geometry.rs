//! Constant-curvature manifolds: Euclidean space (κ = 0), the Poincaré ball
//! (κ < 0) and the sphere embedded in one extra ambient dimension (κ > 0).
//!
//! Tangent vectors at the origin are expressed in orthonormal coordinates for
//! every family, so `dist(origin, exp_origin(v)) == ‖v‖` regardless of κ and
//! all three families agree with the Euclidean metric as κ → 0.
//!
//! Every curved operation is evaluated at unit curvature after rescaling by
//! `s = √|κ|`:
//!
//! ```text
//! exp_κ(v)    = exp_1(s·v) / s
//! log_κ(p)    = log_1(s·p) / s
//! dist_κ(p,q) = dist_1(s·p, s·q) / s
//! ```
//!
//! The unit-curvature kernels live in [`unit`]; the autodiff tape reuses them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default clamp margin for the ball boundary and sphere tolerance.
pub const DEFAULT_EPS_BOUNDARY: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    Euclidean,
    Hyperbolic,
    Spherical,
}

impl Family {
    pub fn of(kappa: f64) -> Self {
        if kappa < 0.0 {
            Family::Hyperbolic
        } else if kappa > 0.0 {
            Family::Spherical
        } else {
            Family::Euclidean
        }
    }

    /// Ambient width of a point whose tangent space has width `dim`.
    pub fn point_dim(self, dim: usize) -> usize {
        match self {
            Family::Spherical => dim + 1,
            _ => dim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSpec {
    kappa: f64,
    eps_boundary: f64,
    dim: usize,
}

impl ManifoldSpec {
    pub fn new(kappa: f64, dim: usize) -> Result<Self> {
        Self::with_eps(kappa, dim, DEFAULT_EPS_BOUNDARY)
    }

    pub fn with_eps(kappa: f64, dim: usize, eps_boundary: f64) -> Result<Self> {
        if !kappa.is_finite() {
            return Err(Error::Config(format!("curvature must be finite, got {kappa}")));
        }
        if !(eps_boundary > 0.0 && eps_boundary <= 1e-2) {
            return Err(Error::Config(format!(
                "eps_boundary must lie in (0, 1e-2], got {eps_boundary}"
            )));
        }
        if dim == 0 {
            return Err(Error::Config("manifold dimension must be positive".into()));
        }
        Ok(Self {
            kappa,
            eps_boundary,
            dim,
        })
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn eps_boundary(&self) -> f64 {
        self.eps_boundary
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn family(&self) -> Family {
        Family::of(self.kappa)
    }

    pub fn point_dim(&self) -> usize {
        self.family().point_dim(self.dim)
    }

    /// √|κ|, the factor mapping this manifold onto its unit-curvature twin.
    pub fn scale(&self) -> f64 {
        self.kappa.abs().sqrt()
    }

    /// The base point `o` at which exp/log are taken.
    pub fn origin(&self) -> Vec<f64> {
        let mut o = vec![0.0; self.point_dim()];
        if self.family() == Family::Spherical {
            o[self.dim] = 1.0 / self.scale();
        }
        o
    }

    fn check_len(&self, what: &str, v: &[f64], expected: usize) -> Result<()> {
        if v.len() != expected {
            return Err(Error::Dimension(format!(
                "{what} has length {}, expected {expected}",
                v.len()
            )));
        }
        Ok(())
    }

    fn check_finite(what: &str, v: &[f64]) -> Result<()> {
        if v.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{what} has non-finite entries")))
        }
    }

    /// Validates that `p` lies on the manifold within `eps_boundary`.
    pub fn check_point(&self, p: &[f64]) -> Result<()> {
        self.check_len("point", p, self.point_dim())?;
        Self::check_finite("point", p)?;
        let s = self.scale();
        match self.family() {
            Family::Euclidean => Ok(()),
            Family::Hyperbolic => {
                let r = s * norm(p);
                if r < 1.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidPoint(format!(
                        "point has scaled norm {r} outside the open Poincaré ball"
                    )))
                }
            }
            Family::Spherical => {
                let r = s * norm(p);
                if (r - 1.0).abs() <= self.eps_boundary {
                    Ok(())
                } else {
                    Err(Error::InvalidPoint(format!(
                        "point has scaled norm {r}, expected 1 on the sphere"
                    )))
                }
            }
        }
    }

    /// Geodesic distance between two valid points.
    pub fn dist(&self, p: &[f64], q: &[f64]) -> Result<f64> {
        self.check_point(p)?;
        self.check_point(q)?;
        let s = self.scale();
        Ok(match self.family() {
            Family::Euclidean => unit::euclidean_dist(p, q),
            Family::Hyperbolic => {
                let (ps, qs) = (scaled(p, s), scaled(q, s));
                unit::hyperbolic_dist(&ps, &qs) / s
            }
            Family::Spherical => unit::spherical_dist(p, q) / s,
        })
    }

    /// Exponential map at the origin; the result is projected onto the manifold.
    pub fn exp_origin(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_len("tangent vector", v, self.dim)?;
        Self::check_finite("tangent vector", v)?;
        let s = self.scale();
        Ok(match self.family() {
            Family::Euclidean => v.to_vec(),
            Family::Hyperbolic => {
                let mut y = unit::hyperbolic_exp(&scaled(v, s));
                unit::hyperbolic_project(&mut y, self.eps_boundary);
                scaled(&y, 1.0 / s)
            }
            Family::Spherical => {
                let mut y = unit::spherical_exp(&scaled(v, s));
                unit::spherical_project(&mut y);
                scaled(&y, 1.0 / s)
            }
        })
    }

    /// Logarithmic map at the origin.
    pub fn log_origin(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.check_point(p)?;
        let s = self.scale();
        Ok(match self.family() {
            Family::Euclidean => p.to_vec(),
            Family::Hyperbolic => scaled(&unit::hyperbolic_log(&scaled(p, s)), 1.0 / s),
            Family::Spherical => {
                let y = scaled(p, s);
                let (a, z) = unit::split_sphere(&y);
                let theta = a.atan2(z);
                if std::f64::consts::PI - theta < self.eps_boundary {
                    return Err(Error::InvalidPoint(
                        "log map is undefined at the antipode of the origin".into(),
                    ));
                }
                scaled(&unit::spherical_log(&y), 1.0 / s)
            }
        })
    }

    /// Pulls an arbitrary finite vector onto the valid region.
    pub fn project(&self, p: &[f64]) -> Vec<f64> {
        let s = self.scale();
        match self.family() {
            Family::Euclidean => p.to_vec(),
            Family::Hyperbolic => {
                let mut y = scaled(p, s);
                unit::hyperbolic_project(&mut y, self.eps_boundary);
                scaled(&y, 1.0 / s)
            }
            Family::Spherical => {
                let mut y = scaled(p, s);
                unit::spherical_project(&mut y);
                scaled(&y, 1.0 / s)
            }
        }
    }

    /// Radius inside which raw vectors can be safely treated as points or
    /// tangent vectors: the ball radius for κ < 0, a quarter great circle for
    /// κ > 0 and infinity for κ = 0.
    pub fn valid_radius(&self) -> f64 {
        match self.family() {
            Family::Euclidean => f64::INFINITY,
            Family::Hyperbolic => 1.0 / self.scale(),
            Family::Spherical => std::f64::consts::FRAC_PI_2 / self.scale(),
        }
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn scaled(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x * s).collect()
}

/// Unit-curvature kernels shared by the scalar API and the autodiff tape.
///
/// Radial maps are written as `y = φ(r)·v`; their vector-Jacobian product is
/// `φ(r)·g + (φ'(r)/r)·⟨v, g⟩·v`, so each map exposes `φ` and `φ'(r)/r`,
/// switching to Taylor series below `SERIES_CUTOFF` to avoid 0/0.
pub mod unit {
    use super::norm;

    const SERIES_CUTOFF: f64 = 1e-3;

    /// `tanh(r/2)/r` and its `φ'(r)/r`.
    pub fn hyperbolic_exp_factor(r: f64) -> (f64, f64) {
        if r < SERIES_CUTOFF {
            let r2 = r * r;
            (
                0.5 - r2 / 24.0 + r2 * r2 / 240.0,
                -1.0 / 12.0 + r2 / 60.0 - 17.0 * r2 * r2 / 6720.0,
            )
        } else {
            let t = (0.5 * r).tanh();
            let sech2 = 1.0 - t * t;
            let phi = t / r;
            let dphi = (0.5 * r * sech2 - t) / (r * r);
            (phi, dphi / r)
        }
    }

    /// `2·artanh(ρ)/ρ` and its `φ'(ρ)/ρ`, for ρ < 1.
    pub fn hyperbolic_log_factor(rho: f64) -> (f64, f64) {
        if rho < SERIES_CUTOFF {
            let r2 = rho * rho;
            (
                2.0 + 2.0 * r2 / 3.0 + 2.0 * r2 * r2 / 5.0,
                4.0 / 3.0 + 8.0 * r2 / 5.0,
            )
        } else {
            let at = rho.atanh();
            let phi = 2.0 * at / rho;
            let dphi = 2.0 * (rho / (1.0 - rho * rho) - at) / (rho * rho);
            (phi, dphi / rho)
        }
    }

    /// `sin(r)/r` and its `φ'(r)/r`.
    pub fn sinc_factor(r: f64) -> (f64, f64) {
        if r < SERIES_CUTOFF {
            let r2 = r * r;
            (
                1.0 - r2 / 6.0 + r2 * r2 / 120.0,
                -1.0 / 3.0 + r2 / 30.0 - r2 * r2 / 840.0,
            )
        } else {
            let (sn, cs) = r.sin_cos();
            (sn / r, (r * cs - sn) / (r * r * r))
        }
    }

    pub fn hyperbolic_exp(v: &[f64]) -> Vec<f64> {
        let (phi, _) = hyperbolic_exp_factor(norm(v));
        v.iter().map(|x| phi * x).collect()
    }

    pub fn hyperbolic_log(p: &[f64]) -> Vec<f64> {
        let (phi, _) = hyperbolic_log_factor(norm(p));
        p.iter().map(|x| phi * x).collect()
    }

    /// Largest admissible norm in the unit ball.
    pub fn ball_limit(eps: f64) -> f64 {
        1.0 - eps
    }

    pub fn hyperbolic_project(p: &mut [f64], eps: f64) {
        let limit = ball_limit(eps);
        let r = norm(p);
        if r >= limit {
            let f = limit / r;
            p.iter_mut().for_each(|x| *x *= f);
        }
    }

    pub fn spherical_exp(v: &[f64]) -> Vec<f64> {
        let r = norm(v);
        let (phi, _) = sinc_factor(r);
        let mut out: Vec<f64> = v.iter().map(|x| phi * x).collect();
        out.push(r.cos());
        out
    }

    /// Splits a sphere point into (‖spatial part‖, last coordinate).
    pub fn split_sphere(p: &[f64]) -> (f64, f64) {
        let (last, head) = p.split_last().expect("sphere point has at least one coordinate");
        (norm(head), *last)
    }

    /// `atan2(a, z)/a` together with `(∂ψ/∂a)/a` and `∂ψ/∂z`.
    pub fn spherical_log_factor(a: f64, z: f64) -> (f64, f64, f64) {
        let rr = a * a + z * z;
        if z > 0.0 && a < SERIES_CUTOFF * z {
            let z2 = z * z;
            let z3 = z2 * z;
            let z5 = z3 * z2;
            let a2 = a * a;
            (
                1.0 / z - a2 / (3.0 * z3) + a2 * a2 / (5.0 * z5),
                -2.0 / (3.0 * z3) + 4.0 * a2 / (5.0 * z5),
                -1.0 / rr,
            )
        } else {
            let theta = a.atan2(z);
            let psi = theta / a;
            let dpsi_da = (z / rr * a - theta) / (a * a);
            (psi, dpsi_da / a, -1.0 / rr)
        }
    }

    /// Principal log on the unit sphere; scale-invariant in `p`.
    pub fn spherical_log(p: &[f64]) -> Vec<f64> {
        let (a, z) = split_sphere(p);
        let (psi, _, _) = spherical_log_factor(a, z);
        p[..p.len() - 1].iter().map(|x| psi * x).collect()
    }

    /// Normalizes onto the unit sphere; the zero vector becomes the origin.
    pub fn spherical_project(p: &mut [f64]) {
        let r = norm(p);
        if r == 0.0 {
            let n = p.len();
            p[n - 1] = 1.0;
        } else {
            p.iter_mut().for_each(|x| *x /= r);
        }
    }

    pub fn euclidean_dist(p: &[f64], q: &[f64]) -> f64 {
        p.iter()
            .zip(q)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// `arccosh(1 + x)` evaluated without cancellation near `x = 0`.
    pub fn acosh1p(x: f64) -> f64 {
        let x = x.max(0.0);
        (x + (x * (x + 2.0)).sqrt()).ln_1p()
    }

    /// Argument `x` of `arccosh(1 + x)` for the unit Poincaré ball.
    pub fn hyperbolic_dist_arg(p: &[f64], q: &[f64]) -> f64 {
        let diff2: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
        let pp: f64 = p.iter().map(|x| x * x).sum();
        let qq: f64 = q.iter().map(|x| x * x).sum();
        2.0 * diff2 / ((1.0 - pp) * (1.0 - qq))
    }

    pub fn hyperbolic_dist(p: &[f64], q: &[f64]) -> f64 {
        acosh1p(hyperbolic_dist_arg(p, q))
    }

    /// Great-circle angle via the chord length of the normalized points.
    pub fn spherical_dist(p: &[f64], q: &[f64]) -> f64 {
        let np = norm(p);
        let nq = norm(q);
        let chord: f64 = p
            .iter()
            .zip(q)
            .map(|(a, b)| {
                let d = a / np - b / nq;
                d * d
            })
            .sum::<f64>()
            .sqrt();
        2.0 * (0.5 * chord).min(1.0).asin()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn euclidean_distance_is_pythagorean() {
        let m = ManifoldSpec::new(0.0, 2).unwrap();
        assert_eq!(m.dist(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
    }

    #[test]
    fn poincare_distance_closed_form() {
        let m = ManifoldSpec::new(-1.0, 2).unwrap();
        let d = m.dist(&[0.0, 0.0], &[0.5, 0.0]).unwrap();
        assert!((d - 3f64.ln()).abs() < 1e-12);
        assert!((d - 2.0 * 0.5f64.atanh()).abs() < 1e-12);
        assert!((d - (5.0f64 / 3.0).acosh()).abs() < 1e-12);
    }

    #[test]
    fn sphere_pole_to_equator() {
        let m = ManifoldSpec::new(1.0, 2).unwrap();
        let d = m.dist(&[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0]).unwrap();
        assert!((d - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn sphere_distance_scales_with_radius() {
        // radius 2, quarter circle → π
        let m = ManifoldSpec::new(0.25, 1).unwrap();
        let d = m.dist(&[0.0, 2.0], &[2.0, 0.0]).unwrap();
        assert!((d - std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn distance_to_self_is_exactly_zero() {
        for kappa in [-1.0, -0.5, 0.5, 1.0] {
            let m = ManifoldSpec::new(kappa, 3).unwrap();
            let p = m.exp_origin(&[0.3, -0.2, 0.1]).unwrap();
            assert_eq!(m.dist(&p, &p).unwrap(), 0.0);
        }
    }

    #[test]
    fn exp_examples() {
        let e = ManifoldSpec::new(0.0, 2).unwrap();
        assert_eq!(e.exp_origin(&[1.5, -2.0]).unwrap(), vec![1.5, -2.0]);

        let h = ManifoldSpec::new(-1.0, 2).unwrap();
        let p = h.exp_origin(&[3f64.ln(), 0.0]).unwrap();
        assert!(close(&p, &[0.5, 0.0], 1e-12));

        let s = ManifoldSpec::new(1.0, 2).unwrap();
        assert_eq!(s.exp_origin(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn log_examples() {
        let e = ManifoldSpec::new(0.0, 2).unwrap();
        assert_eq!(e.log_origin(&[1.5, -2.0]).unwrap(), vec![1.5, -2.0]);

        let h = ManifoldSpec::new(-1.0, 2).unwrap();
        let v = h.log_origin(&[0.5, 0.0]).unwrap();
        assert!(close(&v, &[3f64.ln(), 0.0], 1e-12));

        let s = ManifoldSpec::new(1.0, 2).unwrap();
        assert_eq!(s.log_origin(&[0.0, 0.0, 1.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn project_examples() {
        let h = ManifoldSpec::with_eps(-1.0, 2, 1e-5).unwrap();
        assert!(close(&h.project(&[2.0, 0.0]), &[1.0 - 1e-5, 0.0], 1e-15));
        let e = ManifoldSpec::new(0.0, 2).unwrap();
        assert_eq!(e.project(&[7.0, -7.0]), vec![7.0, -7.0]);
        let s = ManifoldSpec::new(1.0, 2).unwrap();
        assert_eq!(s.project(&[0.0, 0.0, 2.0]), vec![0.0, 0.0, 1.0]);
        assert_eq!(s.project(&[0.0, 0.0, 0.0]), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn exp_stays_inside_ball_for_huge_vectors() {
        let h = ManifoldSpec::new(-1.0, 2).unwrap();
        let p = h.exp_origin(&[1e3, 0.0]).unwrap();
        h.check_point(&p).unwrap();
        assert!(h.dist(&[0.0, 0.0], &p).unwrap().is_finite());
    }

    #[test]
    fn rejects_bad_inputs() {
        let h = ManifoldSpec::new(-1.0, 2).unwrap();
        assert!(matches!(h.dist(&[0.0], &[0.0, 0.0]), Err(Error::Dimension(_))));
        assert!(matches!(
            h.dist(&[1.5, 0.0], &[0.0, 0.0]),
            Err(Error::InvalidPoint(_))
        ));
        assert!(matches!(h.exp_origin(&[f64::NAN, 0.0]), Err(Error::Numeric(_))));

        let s = ManifoldSpec::new(1.0, 2).unwrap();
        assert!(matches!(
            s.log_origin(&[0.0, 0.0, -1.0]),
            Err(Error::InvalidPoint(_))
        ));
        assert!(matches!(
            s.dist(&[0.0, 0.0, 2.0], &[0.0, 0.0, 1.0]),
            Err(Error::InvalidPoint(_))
        ));

        assert!(ManifoldSpec::new(f64::INFINITY, 2).is_err());
        assert!(ManifoldSpec::with_eps(-1.0, 2, 0.5).is_err());
    }

    #[test]
    fn series_branches_match_closed_forms_at_cutoff() {
        let r = 1.0001e-3;
        let (a, da) = unit::hyperbolic_exp_factor(r);
        let (b, db) = unit::hyperbolic_exp_factor(0.9999e-3);
        assert!((a - b).abs() < 1e-9 && (da - db).abs() < 1e-6);
        let (a, da) = unit::hyperbolic_log_factor(r);
        let (b, db) = unit::hyperbolic_log_factor(0.9999e-3);
        assert!((a - b).abs() < 1e-9 && (da - db).abs() < 1e-6);
        let (a, da) = unit::sinc_factor(r);
        let (b, db) = unit::sinc_factor(0.9999e-3);
        assert!((a - b).abs() < 1e-9 && (da - db).abs() < 1e-6);
    }
}
