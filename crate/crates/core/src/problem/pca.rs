use rand::seq::SliceRandom;

use super::{check_agent, data::split_rows, GroundTruth, Problem};
use crate::error::{Error, Result};
use crate::manifold::ManifoldSpec;
use crate::numerics::{gaussian_matrix, rng_from_seed, thin_svd, Matrix, SimRng, Vector};

/// `min −(1/2n) Σ_i tr(xᵀ A_iᵀ A_i x)` over `St(d, r)`.
#[derive(Debug, Clone)]
pub struct PcaProblem {
    spec: ManifoldSpec,
    agents: Vec<Matrix>,
    grams: Vec<Matrix>,
}

impl PcaProblem {
    pub fn new(agents: Vec<Matrix>, r: usize) -> Result<Self> {
        let d = agents
            .first()
            .ok_or_else(|| Error::invalid("pca needs at least one agent"))?
            .ncols();
        if agents.iter().any(|a| a.ncols() != d) {
            return Err(Error::invalid("pca: agent matrices differ in column count"));
        }
        let spec = ManifoldSpec::stiefel(d, r)?;
        let grams = agents.iter().map(|a| a.transpose() * a).collect();
        Ok(Self { spec, agents, grams })
    }

    pub fn agents(&self) -> &[Matrix] {
        &self.agents
    }

    /// The stacked data matrix `A`.
    pub fn stacked(&self) -> Matrix {
        stack_rows(&self.agents)
    }
}

pub(crate) fn stack_rows(blocks: &[Matrix]) -> Matrix {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks[0].ncols();
    let mut out = Matrix::zeros(rows, cols);
    let mut at = 0;
    for b in blocks {
        out.rows_mut(at, b.nrows()).copy_from(b);
        at += b.nrows();
    }
    out
}

impl Problem for PcaProblem {
    fn manifold(&self) -> &ManifoldSpec {
        &self.spec
    }

    fn n_agents(&self) -> usize {
        self.agents.len()
    }

    fn total_samples(&self) -> usize {
        self.agents.iter().map(|a| a.nrows()).sum()
    }

    fn local_objective(&self, agent: usize, x: &Matrix) -> Result<f64> {
        check_agent(agent, self.agents.len())?;
        let ax = &self.agents[agent] * x;
        Ok(-0.5 * ax.norm_squared())
    }

    /// `−A_iᵀ A_i x`, evaluated through the cached Gram matrix.
    fn local_grad(&self, agent: usize, x: &Matrix) -> Result<Matrix> {
        check_agent(agent, self.agents.len())?;
        Ok(-(&self.grams[agent] * x))
    }
}

/// Shared synthetic generator for PCA and GEVP data.
///
/// Draws a Gaussian `N×d` matrix (`N = n·m_i`), takes its thin SVD
/// `U Σ Vᵀ` and replaces the spectrum: `A = √N · U diag(ξ¹, …, ξᵈ) Vᵀ`, so the
/// sample covariance `AᵀA / N` has eigenvalues `ξ^{2j}`. Rows are shuffled and
/// cut into `n` contiguous blocks. Returns the blocks and `V`.
pub(crate) fn synth_rows(
    n: usize,
    m_i: usize,
    d: usize,
    xi: f64,
    rng: &mut SimRng,
) -> Result<(Vec<Matrix>, Matrix)> {
    if n == 0 || m_i == 0 || d == 0 {
        return Err(Error::invalid("n, m_i and d must be positive"));
    }
    let total = n * m_i;
    if total < d {
        return Err(Error::invalid(format!("n·m_i = {total} must be at least d = {d}")));
    }
    if !(xi > 0.0 && xi <= 1.0) {
        return Err(Error::invalid(format!("xi must be in (0, 1], got {xi}")));
    }
    let b = gaussian_matrix(total, d, rng);
    let svd = thin_svd(&b)?;
    let spectrum = Vector::from_fn(d, |j, _| (total as f64).sqrt() * xi.powi(j as i32 + 1));
    let a = svd.u.clone() * Matrix::from_diagonal(&spectrum) * svd.v.transpose();
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(rng);
    let shuffled = a.select_rows(order.iter());
    let blocks = split_rows(&shuffled, n)?;
    Ok((blocks, svd.v))
}

/// Synthetic PCA instance; the optimum is the top-`r` right singular subspace.
pub fn gen_pca_data(
    n: usize,
    m_i: usize,
    d: usize,
    r: usize,
    xi: f64,
    seed: u64,
) -> Result<(PcaProblem, GroundTruth)> {
    let mut rng = rng_from_seed(seed);
    let (blocks, v) = synth_rows(n, m_i, d, xi, &mut rng)?;
    let problem = PcaProblem::new(blocks, r)?;
    let x_star = problem.spec.project(&v.columns(0, r).into_owned())?;
    let total = (n * m_i) as f64;
    let top: f64 = (1..=r).map(|j| xi.powi(2 * j as i32)).sum();
    let f_star = -total * top / (2.0 * n as f64);
    Ok((
        problem,
        GroundTruth {
            x_star: Some(x_star),
            f_star: Some(f_star),
        },
    ))
}
