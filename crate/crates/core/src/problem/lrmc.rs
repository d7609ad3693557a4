use rand::Rng;

use super::data::block_sizes;
use super::{check_agent, GroundTruth, Problem};
use crate::error::{Error, Result};
use crate::manifold::ManifoldSpec;
use crate::numerics::{gaussian_matrix, least_squares, rng_from_seed, Matrix, Vector};

/// One agent's block of columns of `P_Ω(A)`.
#[derive(Debug, Clone)]
pub struct LrmcAgent {
    /// `m × T_i`, zero outside the mask.
    a: Matrix,
    /// Observed row indices of each local column, ascending.
    observed: Vec<Vec<usize>>,
}

impl LrmcAgent {
    /// `mask` lists observed `(row, local column)` pairs.
    pub fn new(a: Matrix, mask: &[(usize, usize)]) -> Result<Self> {
        let (m, t) = a.shape();
        let mut observed = vec![Vec::new(); t];
        for &(row, col) in mask {
            if row >= m || col >= t {
                return Err(Error::invalid(format!(
                    "mask entry ({row}, {col}) out of bounds for {m}x{t}"
                )));
            }
            observed[col].push(row);
        }
        for rows in &mut observed {
            rows.sort_unstable();
            rows.dedup();
        }
        let mut a = a;
        // entries outside the mask are treated as zero
        for (col, rows) in observed.iter().enumerate() {
            let mut keep = rows.iter().peekable();
            for row in 0..m {
                if keep.peek() == Some(&&row) {
                    keep.next();
                } else {
                    a[(row, col)] = 0.0;
                }
            }
        }
        Ok(Self { a, observed })
    }

    pub fn data(&self) -> &Matrix {
        &self.a
    }

    pub fn mask(&self) -> Vec<(usize, usize)> {
        self.observed
            .iter()
            .enumerate()
            .flat_map(|(c, rows)| rows.iter().map(move |&r| (r, c)))
            .collect()
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().map(Vec::len).sum()
    }

    fn column_fit(&self, x: &Matrix, col: usize) -> Result<Option<Vector>> {
        let rows = &self.observed[col];
        if rows.is_empty() {
            return Ok(None);
        }
        let sub = x.select_rows(rows.iter());
        let rhs = Vector::from_iterator(rows.len(), rows.iter().map(|&r| self.a[(r, col)]));
        least_squares(&sub, &rhs).map(Some)
    }
}

/// Low-rank matrix completion with the column factor eliminated:
/// `f_i(X) = ½ ‖P_{Ω_i}(X V_i(X) − A_i)‖²`, `V_i(X) = argmin_V ‖P_{Ω_i}(XV − A_i)‖`.
#[derive(Debug, Clone)]
pub struct LrmcProblem {
    spec: ManifoldSpec,
    agents: Vec<LrmcAgent>,
}

impl LrmcProblem {
    pub fn new(agents: Vec<LrmcAgent>, r: usize) -> Result<Self> {
        let m = agents
            .first()
            .ok_or_else(|| Error::invalid("lrmc needs at least one agent"))?
            .a
            .nrows();
        if agents.iter().any(|a| a.a.nrows() != m) {
            return Err(Error::invalid("lrmc: agent blocks differ in row count"));
        }
        Ok(Self {
            spec: ManifoldSpec::stiefel(m, r)?,
            agents,
        })
    }

    pub fn agents(&self) -> &[LrmcAgent] {
        &self.agents
    }

    /// `V_i(X)`: column-wise minimum-norm least squares on the observed rows.
    /// Columns without observations get a zero column.
    pub fn inner_solve(&self, agent: usize, x: &Matrix) -> Result<Matrix> {
        check_agent(agent, self.agents.len())?;
        let ag = &self.agents[agent];
        let mut v = Matrix::zeros(x.ncols(), ag.a.ncols());
        for col in 0..ag.a.ncols() {
            if let Some(fit) = ag.column_fit(x, col)? {
                v.set_column(col, &fit);
            }
        }
        Ok(v)
    }

    /// Residual `P_{Ω_i}(X V_i − A_i)` together with `V_i`.
    fn residual(&self, agent: usize, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let v = self.inner_solve(agent, x)?;
        let ag = &self.agents[agent];
        let mut res = Matrix::zeros(ag.a.nrows(), ag.a.ncols());
        for (col, rows) in ag.observed.iter().enumerate() {
            let vc = v.column(col);
            for &row in rows {
                res[(row, col)] = x.row(row).dot(&vc.transpose()) - ag.a[(row, col)];
            }
        }
        Ok((res, v))
    }
}

impl Problem for LrmcProblem {
    fn manifold(&self) -> &ManifoldSpec {
        &self.spec
    }

    fn n_agents(&self) -> usize {
        self.agents.len()
    }

    /// Observed entries across all agents.
    fn total_samples(&self) -> usize {
        self.agents.iter().map(LrmcAgent::observed_count).sum()
    }

    fn local_objective(&self, agent: usize, x: &Matrix) -> Result<f64> {
        check_agent(agent, self.agents.len())?;
        let (res, _) = self.residual(agent, x)?;
        Ok(0.5 * res.norm_squared())
    }

    /// `P_{Ω_i}(X V_i − A_i) V_iᵀ`; the inner minimizer contributes nothing
    /// to first order.
    fn local_grad(&self, agent: usize, x: &Matrix) -> Result<Matrix> {
        check_agent(agent, self.agents.len())?;
        let (res, v) = self.residual(agent, x)?;
        Ok(res * v.transpose())
    }
}

/// Observation probability `ν = r(m + T − r) / (mT)`.
pub fn observation_rate(m: usize, t: usize, r: usize) -> f64 {
    (r * (m + t - r)) as f64 / (m * t) as f64
}

/// Synthetic instance `A = L R` with Gaussian factors, entries observed
/// independently with probability `ν`, columns split into `n` contiguous
/// blocks (sizes differ by at most one when `n ∤ T`).
pub fn gen_lrmc_data(
    n: usize,
    m: usize,
    t: usize,
    r: usize,
    seed: u64,
) -> Result<(LrmcProblem, GroundTruth)> {
    if r == 0 || r > m || t == 0 || n == 0 || n > t {
        return Err(Error::invalid(format!(
            "lrmc needs 1 <= r <= m and 1 <= n <= T (m={m}, T={t}, r={r}, n={n})"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let l = gaussian_matrix(m, r, &mut rng);
    let rf = gaussian_matrix(r, t, &mut rng);
    let full = &l * rf;
    let nu = observation_rate(m, t, r);
    let mut mask = vec![false; m * t];
    for col in 0..t {
        for row in 0..m {
            mask[col * m + row] = rng.random::<f64>() <= nu;
        }
    }
    let mut agents = Vec::with_capacity(n);
    let mut start = 0;
    for width in block_sizes(t, n) {
        let a = full.columns(start, width).into_owned();
        let local: Vec<(usize, usize)> = (0..width)
            .flat_map(|c| (0..m).map(move |row| (row, c)))
            .filter(|&(row, c)| mask[(start + c) * m + row])
            .collect();
        agents.push(LrmcAgent::new(a, &local)?);
        start += width;
    }
    let problem = LrmcProblem::new(agents, r)?;
    let x_star = problem.spec.project(&l)?;
    Ok((
        problem,
        GroundTruth {
            x_star: Some(x_star),
            f_star: Some(0.0),
        },
    ))
}
