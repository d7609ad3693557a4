//! Dense linear-algebra kernels.
//!
//! Thin wrappers over `nalgebra` factorizations that fix ordering conventions
//! (descending singular values, ascending eigenvalues), reject non-finite input
//! and apply the rank/definiteness tolerances used throughout the crate.
//! Signs of singular and eigenvectors are left free; every consumer in this
//! crate only uses sign-invariant products such as `U Vᵀ`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative rank cutoff for least squares.
pub const RANK_TOL: f64 = 1e-10;
/// Relative definiteness cutoff for SPD inputs.
pub const SPD_TOL: f64 = 1e-12;
/// Relative asymmetry accepted by [`sym_eig`].
pub const SYMMETRY_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: Matrix,
    pub s: Vector,
    pub v: Matrix,
}

#[derive(Debug, Clone)]
pub struct SymEig {
    /// Ascending.
    pub values: Vector,
    /// Column `j` pairs with `values[j]`.
    pub vectors: Matrix,
}

/// Seeded generator used for every random draw in the crate.
pub type SimRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream of the generator for `seed`, so that consumers sharing
/// one seed (data, graph, initial point) never see the same draws.
pub fn rng_stream(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) const GRAPH_STREAM: u64 = 1;
pub(crate) const INIT_STREAM: u64 = 2;

/// Matrix with i.i.d. standard normal entries, drawn in column-major order.
pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub(crate) fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what}: non-finite entry")))
    }
}

/// Symmetric part `(A + Aᵀ)/2`.
pub fn sym(a: &Matrix) -> Matrix {
    (a + a.transpose()) * 0.5
}

/// Frobenius inner product.
pub fn inner(a: &Matrix, b: &Matrix) -> f64 {
    a.dot(b)
}

/// Thin SVD of a `p×q` matrix with `p ≥ q`: `m = U diag(s) Vᵀ`, `s` descending.
pub fn thin_svd(m: &Matrix) -> Result<ThinSvd> {
    let (p, q) = m.shape();
    if p < q {
        return Err(Error::invalid(format!("thin_svd needs rows >= cols, got {p}x{q}")));
    }
    ensure_finite(m, "thin_svd")?;
    let svd = m.clone().svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::singular("svd did not converge")),
    };
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut out_u = Matrix::zeros(p, q);
    let mut out_v = Matrix::zeros(q, q);
    let mut s = Vector::zeros(q);
    for (dst, &src) in order.iter().enumerate() {
        s[dst] = svd.singular_values[src];
        out_u.set_column(dst, &u.column(src));
        out_v.set_column(dst, &vt.row(src).transpose());
    }
    Ok(ThinSvd { u: out_u, s, v: out_v })
}

/// Eigendecomposition of a (numerically) symmetric matrix.
pub fn sym_eig(m: &Matrix) -> Result<SymEig> {
    if !m.is_square() {
        return Err(Error::invalid("sym_eig needs a square matrix"));
    }
    ensure_finite(m, "sym_eig")?;
    let scale = m.norm().max(f64::MIN_POSITIVE);
    if (m - m.transpose()).norm() > SYMMETRY_TOL * scale {
        return Err(Error::invalid("sym_eig: matrix is not symmetric"));
    }
    let eig = sym(m).symmetric_eigen();
    let q = m.nrows();
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut values = Vector::zeros(q);
    let mut vectors = Matrix::zeros(q, q);
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = eig.eigenvalues[src];
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(SymEig { values, vectors })
}

fn spd_eig(m: &Matrix, what: &str) -> Result<SymEig> {
    let eig = sym_eig(m)?;
    let q = eig.values.len();
    let (lo, hi) = (eig.values[0], eig.values[q - 1]);
    if !(hi > 0.0) || lo <= SPD_TOL * hi {
        return Err(Error::singular(format!(
            "{what}: not positive definite (eigenvalues in [{lo:e}, {hi:e}])"
        )));
    }
    Ok(eig)
}

/// `m^{-1/2}` for symmetric positive definite `m`.
pub fn spd_inverse_sqrt(m: &Matrix) -> Result<Matrix> {
    let eig = spd_eig(m, "spd_inverse_sqrt")?;
    let scaled = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        eig.vectors[(i, j)] / eig.values[j].sqrt()
    });
    Ok(sym(&(&scaled * eig.vectors.transpose())))
}

/// Minimum-norm least-squares solution of `A x ≈ b`.
///
/// Singular values below `RANK_TOL · s_max` are treated as zero, so
/// rank-deficient and underdetermined systems are handled.
pub fn least_squares(a: &Matrix, b: &Vector) -> Result<Vector> {
    let (p, q) = a.shape();
    if p == 0 || q == 0 {
        return Err(Error::invalid("least_squares: empty system"));
    }
    if b.len() != p {
        return Err(Error::invalid(format!(
            "least_squares: rhs has length {}, expected {p}",
            b.len()
        )));
    }
    ensure_finite(a, "least_squares")?;
    if !b.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("least_squares: non-finite rhs"));
    }
    let svd = a.clone().svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::singular("svd did not converge")),
    };
    let smax = svd.singular_values.max();
    let cutoff = RANK_TOL * smax;
    let utb = u.transpose() * b;
    let mut x = Vector::zeros(q);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            x.axpy(utb[k] / s, &vt.row(k).transpose(), 1.0);
        }
    }
    Ok(x)
}

/// Solves `M S + S M = 2 C` for symmetric `S`, given SPD `M` and symmetric `C`.
pub fn lyapunov_solve(m: &Matrix, c: &Matrix) -> Result<Matrix> {
    if c.shape() != m.shape() {
        return Err(Error::invalid("lyapunov_solve: shape mismatch"));
    }
    ensure_finite(c, "lyapunov_solve")?;
    let eig = spd_eig(m, "lyapunov_solve")?;
    let q = &eig.vectors;
    let ct = q.transpose() * c * q;
    let st = DMatrix::from_fn(ct.nrows(), ct.ncols(), |i, j| {
        2.0 * ct[(i, j)] / (eig.values[i] + eig.values[j])
    });
    Ok(sym(&(q * st * q.transpose())))
}
