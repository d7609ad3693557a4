//! Stiefel and generalized (B-)Stiefel manifolds with the Euclidean metric.
//!
//! | kind | constraint | projection | tangent projection |
//! |------|------------|------------|--------------------|
//! | Stiefel | `xᵀx = I` | polar factor `U Vᵀ` | `u − x·sym(xᵀu)` |
//! | generalized | `xᵀBx = I` | `y (yᵀBy)^{-1/2}` | `u − Bx·S`, `xᵀB²x S + S xᵀB²x = 2 sym(xᵀBu)` |
//!
//! The Stiefel projection is the exact nearest point in Frobenius norm. The
//! generalized one is the B-polar map, which is feasible and first-order
//! accurate but is not the Euclidean nearest point.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{
    ensure_finite, gaussian_matrix, lyapunov_solve, spd_inverse_sqrt, sym, sym_eig, thin_svd,
    Matrix, SPD_TOL,
};

/// Points whose constraint residual exceeds this are re-projected.
pub const FEASIBILITY_TOL: f64 = 1e-8;

/// Inputs this close to feasible are returned unchanged by the projection.
const EXACT_TOL: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManifoldKind {
    Stiefel,
    GeneralizedStiefel,
}

#[derive(Debug, Clone)]
pub struct ManifoldSpec {
    kind: ManifoldKind,
    d: usize,
    r: usize,
    b: Option<Matrix>,
    gamma: f64,
}

/// A matrix satisfying the manifold constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct Point(Matrix);

impl Point {
    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// A matrix in the tangent space at some point.
#[derive(Debug, Clone, PartialEq)]
pub struct Tangent(Matrix);

impl Tangent {
    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

impl ManifoldSpec {
    /// `St(d, r)` with proximal-smoothness parameter `γ = 1/2`.
    pub fn stiefel(d: usize, r: usize) -> Result<Self> {
        if r == 0 || r > d {
            return Err(Error::invalid(format!("stiefel needs 1 <= r <= d, got d={d} r={r}")));
        }
        Ok(Self {
            kind: ManifoldKind::Stiefel,
            d,
            r,
            b: None,
            gamma: 0.5,
        })
    }

    /// `St_B(d, r)`; `γ` defaults to `0.5 / λ_max(B)` and carries no guarantee.
    pub fn generalized_stiefel(b: Matrix, r: usize) -> Result<Self> {
        let d = b.nrows();
        if r == 0 || r > d {
            return Err(Error::invalid(format!(
                "generalized stiefel needs 1 <= r <= d, got d={d} r={r}"
            )));
        }
        let eig = sym_eig(&b)?;
        let (lo, hi) = (eig.values[0], eig.values[d - 1]);
        if !(hi > 0.0) || lo <= SPD_TOL * hi {
            return Err(Error::singular("B is not positive definite"));
        }
        Ok(Self {
            kind: ManifoldKind::GeneralizedStiefel,
            d,
            r,
            b: Some(sym(&b)),
            gamma: 0.5 / hi,
        })
    }

    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
        }
        self.gamma = gamma;
        Ok(self)
    }

    pub fn kind(&self) -> ManifoldKind {
        self.kind
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn b(&self) -> Option<&Matrix> {
        self.b.as_ref()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Upper bound on `max ‖x − y‖` over the manifold.
    ///
    /// Exact for Stiefel (`‖x‖ = √r` for every point); for `St_B` it uses
    /// `‖x‖² ≤ r / λ_min(B)`.
    pub fn diameter_bound(&self) -> f64 {
        match &self.b {
            None => 2.0 * (self.r as f64).sqrt(),
            Some(b) => {
                let lo = sym_eig(b).map(|e| e.values[0]).unwrap_or(f64::NAN);
                2.0 * (self.r as f64 / lo).sqrt()
            }
        }
    }

    fn check_shape(&self, y: &Matrix) -> Result<()> {
        if y.shape() != (self.d, self.r) {
            return Err(Error::invalid(format!(
                "expected a {}x{} matrix, got {}x{}",
                self.d,
                self.r,
                y.nrows(),
                y.ncols()
            )));
        }
        Ok(())
    }

    /// `B y`, or `y` itself on the plain Stiefel manifold.
    fn metric_apply(&self, y: &Matrix) -> Matrix {
        match &self.b {
            Some(b) => b * y,
            None => y.clone(),
        }
    }

    /// `‖xᵀx − I‖` or `‖xᵀBx − I‖`.
    pub fn feasibility_residual(&self, y: &Matrix) -> f64 {
        let gram = y.transpose() * self.metric_apply(y);
        (gram - Matrix::identity(y.ncols(), y.ncols())).norm()
    }

    /// `‖sym(xᵀu)‖` or `‖sym(xᵀBu)‖`.
    pub fn tangency_residual(&self, x: &Point, u: &Matrix) -> f64 {
        sym(&(self.metric_apply(&x.0).transpose() * u)).norm()
    }

    /// Wraps an already-feasible matrix.
    pub fn point(&self, value: Matrix) -> Result<Point> {
        self.check_shape(&value)?;
        ensure_finite(&value, "point")?;
        let res = self.feasibility_residual(&value);
        if res > FEASIBILITY_TOL {
            return Err(Error::invalid(format!("point is infeasible (residual {res:e})")));
        }
        Ok(Point(value))
    }

    /// Projection onto the manifold.
    ///
    /// Fails with [`Error::Singular`] when `y` is (numerically) column-rank
    /// deficient, where the projection is not unique.
    pub fn project(&self, y: &Matrix) -> Result<Point> {
        self.check_shape(y)?;
        ensure_finite(y, "project")?;
        if self.feasibility_residual(y) <= EXACT_TOL {
            return Ok(Point(y.clone()));
        }
        match &self.b {
            None => {
                let svd = thin_svd(y)?;
                let (hi, lo) = (svd.s[0], svd.s[self.r - 1]);
                if !(hi > 0.0) || lo * lo <= SPD_TOL * hi * hi {
                    return Err(Error::singular("projection of a rank-deficient matrix"));
                }
                Ok(Point(&svd.u * svd.v.transpose()))
            }
            Some(b) => {
                let gram = sym(&(y.transpose() * b * y));
                Ok(Point(y * spd_inverse_sqrt(&gram)?))
            }
        }
    }

    /// Projects and re-projects only if drift left the point infeasible.
    pub(crate) fn project_tight(&self, y: &Matrix) -> Result<Point> {
        let p = self.project(y)?;
        if self.feasibility_residual(&p.0) > FEASIBILITY_TOL {
            return self.project(&p.0);
        }
        Ok(p)
    }

    /// Orthogonal (Euclidean-metric) projection onto `T_x M`.
    pub fn project_tangent(&self, x: &Point, u: &Matrix) -> Tangent {
        let x = &x.0;
        match &self.b {
            None => Tangent(u - x * sym(&(x.transpose() * u))),
            Some(b) => {
                let bx = b * x;
                let m = bx.transpose() * &bx;
                let c = sym(&(bx.transpose() * u));
                // xᵀB²x is SPD whenever x is feasible, so this cannot fail
                // for a genuine point.
                let s = lyapunov_solve(&m, &c).expect("xᵀB²x is SPD on St_B");
                Tangent(u - bx * s)
            }
        }
    }

    /// Riemannian gradient under the Euclidean metric.
    pub fn riemannian_gradient(&self, x: &Point, egrad: &Matrix) -> Tangent {
        self.project_tangent(x, egrad)
    }

    pub fn random_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        loop {
            let g = gaussian_matrix(self.d, self.r, rng);
            if let Ok(p) = self.project(&g) {
                return p;
            }
        }
    }

    /// Unit-norm random tangent vector at `x`.
    pub fn random_tangent<R: Rng + ?Sized>(&self, x: &Point, rng: &mut R) -> Tangent {
        loop {
            let t = self.project_tangent(x, &gaussian_matrix(self.d, self.r, rng));
            let norm = t.0.norm();
            if norm > 1e-12 {
                return Tangent(t.0 / norm);
            }
        }
    }

    /// Random unit-norm vector in the normal space at `x`.
    pub fn random_normal<R: Rng + ?Sized>(&self, x: &Point, rng: &mut R) -> Matrix {
        let s = sym(&gaussian_matrix(self.r, self.r, rng));
        let v = self.metric_apply(&x.0) * s;
        let norm = v.norm();
        v / norm
    }
}

/// Outcome of [`check_projection_lipschitz`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionReport {
    /// `max ‖P(x+u) − P(x+u′)‖ / ‖u − u′‖`.
    pub max_ratio_lip: f64,
    /// `max ‖P(x+u) − x − P_T(u)‖ / ‖u‖²`.
    pub max_ratio_quad: f64,
    pub trials: usize,
    /// Samples dropped because a projection was singular.
    pub skipped: usize,
}

fn random_perturbation<R: Rng + ?Sized>(d: usize, r: usize, scale: f64, rng: &mut R) -> Matrix {
    let g = gaussian_matrix(d, r, rng);
    let radius = scale * rng.random::<f64>();
    let norm = g.norm();
    g * (radius / norm)
}

/// Samples points and perturbations of norm at most `noise_scale` and records
/// the worst Lipschitz ratio of the projection and the worst second-order
/// ratio of the projection against its tangent linearization.
pub fn check_projection_lipschitz<R: Rng + ?Sized>(
    spec: &ManifoldSpec,
    trials: usize,
    noise_scale: f64,
    rng: &mut R,
) -> Result<ProjectionReport> {
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    if !(noise_scale >= 0.0) {
        return Err(Error::invalid("noise_scale must be non-negative"));
    }
    let mut report = ProjectionReport {
        max_ratio_lip: 0.0,
        max_ratio_quad: 0.0,
        trials,
        skipped: 0,
    };
    for _ in 0..trials {
        let x = spec.random_point(rng);
        let u = random_perturbation(spec.d, spec.r, noise_scale, rng);
        let u2 = random_perturbation(spec.d, spec.r, noise_scale, rng);
        let (pu, pu2) = match (spec.project(&(&x.0 + &u)), spec.project(&(&x.0 + &u2))) {
            (Ok(a), Ok(b)) => (a, b),
            _ => {
                report.skipped += 1;
                continue;
            }
        };
        let du = (&u - &u2).norm();
        if du > 0.0 {
            report.max_ratio_lip = report.max_ratio_lip.max((&pu.0 - &pu2.0).norm() / du);
        }
        let nu = u.norm();
        if nu > 0.0 {
            let lin = spec.project_tangent(&x, &u);
            let defect = (&pu.0 - &x.0 - lin.0).norm();
            report.max_ratio_quad = report.max_ratio_quad.max(defect / (nu * nu));
        }
    }
    Ok(report)
}

/// `‖P(x + ξ) − x − ξ‖ / ‖ξ‖²` for a tangent `ξ`: the second-order defect of
/// the projection used as a retraction.
pub fn retraction_defect_ratio(spec: &ManifoldSpec, x: &Point, xi: &Tangent) -> Result<f64> {
    let n = xi.0.norm();
    if n == 0.0 {
        return Ok(0.0);
    }
    let p = spec.project(&(&x.0 + &xi.0))?;
    Ok((p.0 - &x.0 - &xi.0).norm() / (n * n))
}
