use super::pca::{stack_rows, synth_rows};
use super::{check_agent, GroundTruth, Problem};
use crate::error::{Error, Result};
use crate::manifold::ManifoldSpec;
use crate::numerics::{gaussian_matrix, rng_from_seed, sym, sym_eig, Matrix, Vector};

/// `min (1/2n) Σ_i tr(xᵀ A_iᵀ A_i x)` subject to `xᵀ B x = I_r`.
#[derive(Debug, Clone)]
pub struct GevpProblem {
    spec: ManifoldSpec,
    agents: Vec<Matrix>,
    grams: Vec<Matrix>,
}

impl GevpProblem {
    pub fn new(agents: Vec<Matrix>, b: Matrix, r: usize) -> Result<Self> {
        let d = b.nrows();
        if agents.is_empty() {
            return Err(Error::invalid("gevp needs at least one agent"));
        }
        if agents.iter().any(|a| a.ncols() != d) {
            return Err(Error::invalid("gevp: agent matrices must have d columns"));
        }
        let spec = ManifoldSpec::generalized_stiefel(b, r)?;
        let grams = agents.iter().map(|a| a.transpose() * a).collect();
        Ok(Self { spec, agents, grams })
    }

    pub fn agents(&self) -> &[Matrix] {
        &self.agents
    }

    pub fn b(&self) -> &Matrix {
        self.spec.b().expect("gevp manifold carries B")
    }

    pub fn stacked(&self) -> Matrix {
        stack_rows(&self.agents)
    }

    /// Smallest-`r` generalized eigenvectors of `(AᵀA, B)`, B-orthonormal,
    /// together with the optimal value `(1/2n) Σ_{j≤r} λ_j`.
    pub fn solve_dense(&self) -> Result<GroundTruth> {
        let a = self.stacked();
        let gram = a.transpose() * &a;
        let chol = self
            .b()
            .clone()
            .cholesky()
            .ok_or_else(|| Error::singular("B is not positive definite"))?;
        let l = chol.l();
        let l_inv = l
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::singular("Cholesky factor is singular"))?;
        let reduced = sym(&(&l_inv * gram * l_inv.transpose()));
        let eig = sym_eig(&reduced)?;
        let r = self.spec.r();
        let y = l_inv.transpose() * eig.vectors.columns(0, r);
        let x_star = self.spec.point(y.clone()).or_else(|_| self.spec.project(&y))?;
        let f_star = eig.values.rows(0, r).sum() / (2.0 * self.agents.len() as f64);
        Ok(GroundTruth {
            x_star: Some(x_star),
            f_star: Some(f_star),
        })
    }
}

impl Problem for GevpProblem {
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
        Ok(0.5 * (&self.agents[agent] * x).norm_squared())
    }

    fn local_grad(&self, agent: usize, x: &Matrix) -> Result<Matrix> {
        check_agent(agent, self.agents.len())?;
        Ok(&self.grams[agent] * x)
    }
}

/// Exponents `e_j` of `Λ_jj = 1.1^{e_j}`: `1, 0.5, 1.0, 1.5, …, d/2 − 0.5`.
pub fn default_lambda_exponents(d: usize) -> Vec<f64> {
    (1..=d)
        .map(|j| if j == 1 { 1.0 } else { j as f64 / 2.0 - 0.5 })
        .collect()
}

/// Synthetic generalized eigenvalue instance.
///
/// The `A_i` come from the PCA generator with the same seed; then
/// `B = Q Λ Qᵀ` with `Q` the orthogonal factor of a Gaussian matrix and
/// `Λ_jj = 1.1^{e_j}` (`exponents` overrides [`default_lambda_exponents`]).
pub fn gen_gevp_data(
    n: usize,
    m_i: usize,
    d: usize,
    r: usize,
    xi: f64,
    seed: u64,
    exponents: Option<&[f64]>,
) -> Result<(GevpProblem, GroundTruth)> {
    let mut rng = rng_from_seed(seed);
    let (blocks, _) = synth_rows(n, m_i, d, xi, &mut rng)?;
    let exps = match exponents {
        Some(e) if e.len() != d => {
            return Err(Error::invalid(format!(
                "expected {d} lambda exponents, got {}",
                e.len()
            )))
        }
        Some(e) => e.to_vec(),
        None => default_lambda_exponents(d),
    };
    let lambda = Vector::from_iterator(d, exps.iter().map(|e| 1.1f64.powf(*e)));
    let qr = gaussian_matrix(d, d, &mut rng).qr();
    let q = qr.q();
    let b = sym(&(&q * Matrix::from_diagonal(&lambda) * q.transpose()));
    let problem = GevpProblem::new(blocks, b, r)?;
    let truth = problem.solve_dense()?;
    Ok((problem, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::subspace_distance;
    use crate::problem::testing::fd_gradient_error;
    use crate::problem::PcaProblem;

    #[test]
    fn lambda_prefix() {
        assert_eq!(default_lambda_exponents(2), vec![1.0, 0.5]);
        let e = default_lambda_exponents(10);
        assert_eq!(e[9], 4.5);
        assert_eq!(e[2], 1.0);
    }

    #[test]
    fn zero_data_and_identity_metric() {
        let mut rng = rng_from_seed(1);
        let zero = GevpProblem::new(vec![Matrix::zeros(3, 4)], Matrix::identity(4, 4), 2).unwrap();
        let x = zero.manifold().random_point(&mut rng);
        assert_eq!(zero.local_grad(0, x.as_matrix()).unwrap().norm(), 0.0);

        let a = gaussian_matrix(9, 4, &mut rng);
        let g = GevpProblem::new(vec![a.clone()], Matrix::identity(4, 4), 2).unwrap();
        let p = PcaProblem::new(vec![a], 2).unwrap();
        let gg = g.local_grad(0, x.as_matrix()).unwrap();
        let pg = p.local_grad(0, x.as_matrix()).unwrap();
        assert!((gg + pg).norm() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (p, _) = gen_gevp_data(3, 20, 6, 2, 0.8, 7, None).unwrap();
        let mut rng = rng_from_seed(8);
        let x = p.manifold().random_point(&mut rng);
        for i in 0..3 {
            assert!(fd_gradient_error(&p, i, x.as_matrix(), 10, 1e-6, &mut rng) < 1e-5);
        }
    }

    #[test]
    fn ground_truth_matches_generalized_eigen_oracle() {
        let (p, truth) = gen_gevp_data(8, 100, 10, 5, 0.8, 3, None).unwrap();
        let x_star = truth.x_star.unwrap();
        assert!(p.manifold().feasibility_residual(x_star.as_matrix()) < 1e-10);
        // oracle: B^{-1/2} AᵀA B^{-1/2} eigenvectors mapped back, independent of the
        // Cholesky route used in the generator
        let a = p.stacked();
        let gram = a.transpose() * &a;
        let b_inv_sqrt = crate::numerics::spd_inverse_sqrt(p.b()).unwrap();
        let eig = sym_eig(&sym(&(&b_inv_sqrt * gram * &b_inv_sqrt))).unwrap();
        let y = &b_inv_sqrt * eig.vectors.columns(0, 5);
        let oracle = p.manifold().point(y).unwrap();
        assert!(subspace_distance(&oracle, &x_star).unwrap() < 1e-8);
        // first-order optimality of the reported solution
        let g = p.euclidean_grad(x_star.as_matrix()).unwrap();
        let rg = p.manifold().riemannian_gradient(&x_star, &g);
        assert!(rg.as_matrix().norm() < 1e-8 * g.norm());
    }
}
