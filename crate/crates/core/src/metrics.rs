//! Induced mean, stationarity measures, subspace distance and trace records.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{ManifoldSpec, Point};
use crate::numerics::{inner, thin_svd, Matrix};
use crate::problem::Problem;

/// One row of a run trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub step_size: f64,
    pub consensus_error: f64,
    pub objective_at_mean: f64,
    pub grad_norm_sq: f64,
    pub dist_to_truth: Option<f64>,
    pub wall_ns: u64,
}

pub const TRACE_HEADER: [&str; 7] = [
    "iter",
    "step_size",
    "consensus_error",
    "objective_at_mean",
    "grad_norm_sq",
    "dist_to_truth",
    "wall_ns",
];

/// Euclidean average `x̂` and its projection `x̄`.
#[derive(Debug, Clone)]
pub struct InducedMean {
    pub x_hat: Matrix,
    pub x_bar: Point,
}

/// Fails with [`Error::Singular`] when `x̂` cannot be projected.
pub fn induced_mean(spec: &ManifoldSpec, points: &[Point]) -> Result<InducedMean> {
    let first = points
        .first()
        .ok_or_else(|| Error::invalid("induced mean of an empty system"))?;
    // x₁ + mean of offsets: exact when all agents agree
    let base = first.as_matrix();
    let mut offset = Matrix::zeros(base.nrows(), base.ncols());
    for p in &points[1..] {
        offset += p.as_matrix() - base;
    }
    let x_hat = base + offset / points.len() as f64;
    let x_bar = spec.project_tight(&x_hat)?;
    Ok(InducedMean { x_hat, x_bar })
}

/// `(1/n) Σ_i ‖x_i − c‖²`.
pub fn consensus_error(points: &[Point], center: &Matrix) -> f64 {
    let total: f64 = points
        .iter()
        .map(|p| (p.as_matrix() - center).norm_squared())
        .sum();
    total / points.len() as f64
}

/// The ε-stationarity pair at the induced mean.
#[derive(Debug, Clone)]
pub struct Stationarity {
    pub consensus_error: f64,
    pub grad_norm_sq: f64,
    pub x_bar: Point,
}

impl Stationarity {
    pub fn within(&self, eps: f64) -> bool {
        self.consensus_error <= eps && self.grad_norm_sq <= eps
    }
}

/// Consensus error and `‖P_T((1/n) Σ_i ∇f_i(x̄))‖²`.
pub fn stationarity<P: Problem + ?Sized>(problem: &P, points: &[Point]) -> Result<Stationarity> {
    let spec = problem.manifold();
    let mean = induced_mean(spec, points)?;
    let g = problem.euclidean_grad(mean.x_bar.as_matrix())?;
    let rg = spec.riemannian_gradient(&mean.x_bar, &g);
    Ok(Stationarity {
        consensus_error: consensus_error(points, mean.x_bar.as_matrix()),
        grad_norm_sq: rg.as_matrix().norm_squared(),
        x_bar: mean.x_bar,
    })
}

/// `min_{Q ∈ O(r)} ‖x Q − x*‖`, solved in closed form by orthogonal Procrustes.
pub fn subspace_distance(x: &Point, x_star: &Point) -> Result<f64> {
    let (a, b) = (x.as_matrix(), x_star.as_matrix());
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "subspace distance between {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let svd = thin_svd(&(a.transpose() * b))?;
    let q = &svd.u * svd.v.transpose();
    Ok((a * q - b).norm())
}

/// Ratio `‖x̄ − x̂‖ / ((1/n) Σ ‖x_i − x̄‖²)`; bounded as the cluster shrinks.
pub fn mean_gap_ratio(spec: &ManifoldSpec, points: &[Point]) -> Result<f64> {
    let mean = induced_mean(spec, points)?;
    let gap = (mean.x_bar.as_matrix() - &mean.x_hat).norm();
    Ok(gap / consensus_error(points, mean.x_bar.as_matrix()))
}

/// Empirical smoothness constants of the local objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothnessProbe {
    /// Smallest `L` with `f_i(y) − f_i(x) − ⟨grad f_i(x), y − x⟩ ≤ (L/2)‖y − x‖²`
    /// over all sampled pairs (never negative).
    pub l_g: f64,
    /// Largest `‖grad f_i(x) − grad f_i(y)‖ / ‖x − y‖`.
    pub max_grad_ratio: f64,
    pub trials: usize,
}

/// Samples `trials` random pairs `x, y ∈ M` and fits the quadratic upper bound
/// of every local objective.
pub fn quadratic_upper_bound_probe<P: Problem + ?Sized, R: Rng + ?Sized>(
    problem: &P,
    trials: usize,
    rng: &mut R,
) -> Result<SmoothnessProbe> {
    if trials == 0 {
        return Err(Error::invalid("probe needs at least one trial"));
    }
    let spec = problem.manifold();
    let mut l_g: f64 = 0.0;
    let mut ratio: f64 = 0.0;
    for _ in 0..trials {
        let x = spec.random_point(rng);
        let y = spec.random_point(rng);
        let diff = y.as_matrix() - x.as_matrix();
        let dist_sq = diff.norm_squared();
        if dist_sq == 0.0 {
            continue;
        }
        for i in 0..problem.n_agents() {
            let gx = problem.local_grad(i, x.as_matrix())?;
            let gy = problem.local_grad(i, y.as_matrix())?;
            let rx = spec.riemannian_gradient(&x, &gx);
            let ry = spec.riemannian_gradient(&y, &gy);
            let gap = problem.local_objective(i, y.as_matrix())?
                - problem.local_objective(i, x.as_matrix())?
                - inner(rx.as_matrix(), &diff);
            l_g = l_g.max(2.0 * gap / dist_sq);
            ratio = ratio.max((rx.as_matrix() - ry.as_matrix()).norm() / dist_sq.sqrt());
        }
    }
    if !(l_g.is_finite() && ratio.is_finite()) {
        return Err(Error::invalid("smoothness probe produced a non-finite constant"));
    }
    Ok(SmoothnessProbe {
        l_g,
        max_grad_ratio: ratio,
        trials,
    })
}

pub fn write_trace(path: &Path, records: &[TraceRecord]) -> Result<()> {
    let text = trace_to_string(records);
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn trace_to_string(records: &[TraceRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    if records.is_empty() {
        w.write_record(TRACE_HEADER).expect("in-memory write");
    }
    for r in records {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("{other:?}"),
        },
    })?;
    let header = reader.headers().map_err(|e| Error::Format {
        path: path.to_path_buf(),
        line: 1,
        msg: e.to_string(),
    })?;
    if header.iter().ne(TRACE_HEADER) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("unexpected trace header `{}`", header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    reader
        .deserialize()
        .map(|row| {
            row.map_err(|e| Error::Format {
                path: path.to_path_buf(),
                line: e.position().map_or(0, |p| p.line()),
                msg: e.to_string(),
            })
        })
        .collect()
}
