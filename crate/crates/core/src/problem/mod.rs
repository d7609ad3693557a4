//! Decentralized objectives `f(x) = (1/n) Σ_i f_i(x)` and their generators.
//!
//! Every problem exposes per-agent values and Euclidean gradients on the
//! ambient space `R^{d×r}`; Riemannian quantities are formed by the caller
//! through [`ManifoldSpec::riemannian_gradient`].

mod data;
mod gevp;
mod lrmc;
mod pca;

pub use data::{
    block_sizes, load_matrix, read_bundle, save_matrix, split_rows, write_bundle, BundleMeta,
    MatrixFormat,
};
pub use gevp::{default_lambda_exponents, gen_gevp_data, GevpProblem};
pub use lrmc::{gen_lrmc_data, observation_rate, LrmcAgent, LrmcProblem};
pub use pca::{gen_pca_data, PcaProblem};

use rand::Rng;

use crate::error::{Error, Result};
use crate::manifold::{ManifoldSpec, Point};
use crate::numerics::Matrix;

/// Per-agent objective and gradient oracle.
pub trait Problem: Send + Sync {
    fn manifold(&self) -> &ManifoldSpec;

    fn n_agents(&self) -> usize;

    /// `Σ_i m_i`, the sample count used by sample-scaled step sizes.
    fn total_samples(&self) -> usize;

    fn local_objective(&self, agent: usize, x: &Matrix) -> Result<f64>;

    fn local_grad(&self, agent: usize, x: &Matrix) -> Result<Matrix>;

    fn objective(&self, x: &Matrix) -> Result<f64> {
        let n = self.n_agents();
        let mut total = 0.0;
        for i in 0..n {
            total += self.local_objective(i, x)?;
        }
        Ok(total / n as f64)
    }

    /// `(1/n) Σ_i ∇f_i(x)`, summed in agent order.
    fn euclidean_grad(&self, x: &Matrix) -> Result<Matrix> {
        let n = self.n_agents();
        let mut acc = Matrix::zeros(x.nrows(), x.ncols());
        for i in 0..n {
            acc += self.local_grad(i, x)?;
        }
        Ok(acc / n as f64)
    }
}

pub(crate) fn check_agent(agent: usize, n: usize) -> Result<()> {
    if agent >= n {
        return Err(Error::invalid(format!("agent index {agent} out of range for {n} agents")));
    }
    Ok(())
}

/// Known optimum of a generated instance.
#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    pub x_star: Option<Point>,
    pub f_star: Option<f64>,
}

/// Any of the built-in problems, for code that picks the kind at runtime.
#[derive(Debug, Clone)]
pub enum AnyProblem {
    Pca(PcaProblem),
    Gevp(GevpProblem),
    Lrmc(LrmcProblem),
}

impl AnyProblem {
    pub fn kind(&self) -> &'static str {
        match self {
            AnyProblem::Pca(_) => "pca",
            AnyProblem::Gevp(_) => "gevp",
            AnyProblem::Lrmc(_) => "lrmc",
        }
    }

    fn inner(&self) -> &dyn Problem {
        match self {
            AnyProblem::Pca(p) => p,
            AnyProblem::Gevp(p) => p,
            AnyProblem::Lrmc(p) => p,
        }
    }
}

impl Problem for AnyProblem {
    fn manifold(&self) -> &ManifoldSpec {
        self.inner().manifold()
    }

    fn n_agents(&self) -> usize {
        self.inner().n_agents()
    }

    fn total_samples(&self) -> usize {
        self.inner().total_samples()
    }

    fn local_objective(&self, agent: usize, x: &Matrix) -> Result<f64> {
        self.inner().local_objective(agent, x)
    }

    fn local_grad(&self, agent: usize, x: &Matrix) -> Result<Matrix> {
        self.inner().local_grad(agent, x)
    }
}

/// Largest local Euclidean gradient norm over random feasible points: an
/// empirical stand-in for the gradient bound `L_G`.
pub fn estimate_gradient_bound<P: Problem + ?Sized, R: Rng + ?Sized>(
    problem: &P,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    let spec = problem.manifold();
    let mut best: f64 = 0.0;
    for _ in 0..samples {
        let x = spec.random_point(rng);
        for i in 0..problem.n_agents() {
            best = best.max(problem.local_grad(i, x.as_matrix())?.norm());
        }
    }
    Ok(best)
}

/// Largest ratio `‖grad f_i(x) − grad f_i(y)‖ / ‖x − y‖` (Riemannian
/// gradients) over random nearby pairs of feasible points.
pub fn estimate_lipschitz<P: Problem + ?Sized, R: Rng + ?Sized>(
    problem: &P,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    let spec = problem.manifold();
    let mut best: f64 = 0.0;
    for _ in 0..samples {
        let x = spec.random_point(rng);
        let dir = spec.random_tangent(&x, rng);
        let y = spec.project(&(x.as_matrix() + dir.as_matrix() * 0.1))?;
        let dist = (y.as_matrix() - x.as_matrix()).norm();
        if dist == 0.0 {
            continue;
        }
        for i in 0..problem.n_agents() {
            let gx = spec.riemannian_gradient(&x, &problem.local_grad(i, x.as_matrix())?);
            let gy = spec.riemannian_gradient(&y, &problem.local_grad(i, y.as_matrix())?);
            best = best.max((gx.as_matrix() - gy.as_matrix()).norm() / dist);
        }
    }
    Ok(best)
}
