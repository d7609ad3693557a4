//! Projected-gradient consensus, DPRGD and DPRGT, and the run loop.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::manifold::{ManifoldSpec, Point};
use crate::metrics::{stationarity, subspace_distance, TraceRecord};
use crate::network::MixingMatrix;
use crate::numerics::{rng_stream, Matrix, INIT_STREAM};
use crate::problem::{estimate_gradient_bound, estimate_lipschitz, Problem};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlgorithmKind {
    /// Mixing and projection only; the objective is ignored.
    Consensus,
    Dprgd,
    Dprgt,
}

impl AlgorithmKind {
    pub fn name(self) -> &'static str {
        match self {
            AlgorithmKind::Consensus => "consensus",
            AlgorithmKind::Dprgd => "dprgd",
            AlgorithmKind::Dprgt => "dprgt",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "consensus" => Some(AlgorithmKind::Consensus),
            "dprgd" => Some(AlgorithmKind::Dprgd),
            "dprgt" => Some(AlgorithmKind::Dprgt),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSchedule {
    Constant(f64),
    /// `α_k = β / √(k + 1)`.
    Diminishing { beta: f64 },
}

impl StepSchedule {
    pub fn step(&self, k: usize) -> f64 {
        match *self {
            StepSchedule::Constant(a) => a,
            StepSchedule::Diminishing { beta } => beta / ((k + 1) as f64).sqrt(),
        }
    }

    fn validate(&self) -> Result<()> {
        let v = match *self {
            StepSchedule::Constant(a) => a,
            StepSchedule::Diminishing { beta } => beta,
        };
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::invalid(format!("step size must be positive, got {v}")));
        }
        Ok(())
    }
}

/// Empirical version of the diminishing schedule `min{γ/(24L), 1}/√(k+1)`,
/// with `L` the largest of the sampled gradient bound and gradient Lipschitz
/// ratio.
pub fn theoretical_schedule<P: Problem + ?Sized, R: Rng + ?Sized>(
    problem: &P,
    samples: usize,
    rng: &mut R,
) -> Result<StepSchedule> {
    let l = estimate_gradient_bound(problem, samples, rng)?
        .max(estimate_lipschitz(problem, samples, rng)?);
    let gamma = problem.manifold().gamma();
    let beta = if l > 0.0 { (gamma / (24.0 * l)).min(1.0) } else { 1.0 };
    Ok(StepSchedule::Diminishing { beta })
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub algorithm: AlgorithmKind,
    /// Gossip rounds per iteration.
    pub t: usize,
    pub schedule: StepSchedule,
    pub max_iters: usize,
    /// Stop once both consensus error and `‖grad f(x̄)‖²` are at most this.
    pub stop: Option<f64>,
    pub trace_every: usize,
    /// Fill `wall_ns`; off by default so traces are byte-reproducible.
    pub record_time: bool,
}

impl RunConfig {
    pub fn new(algorithm: AlgorithmKind, schedule: StepSchedule, max_iters: usize) -> Self {
        Self {
            algorithm,
            t: 1,
            schedule,
            max_iters,
            stop: None,
            trace_every: 1,
            record_time: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.t == 0 {
            return Err(Error::config("algo.t", "must be at least 1"));
        }
        if self.trace_every == 0 {
            return Err(Error::config("run.trace_every", "must be at least 1"));
        }
        if self.algorithm != AlgorithmKind::Consensus {
            self.schedule.validate()?;
        }
        Ok(())
    }
}

/// Stacked agent state.
#[derive(Debug, Clone)]
pub struct AgentSystem {
    pub points: Vec<Point>,
    /// Gradient trackers `s_i` (DPRGT only).
    pub tracker: Option<Vec<Matrix>>,
    /// Riemannian gradients at the current points, reused by the next DPRGT step.
    pub last_grads: Option<Vec<Matrix>>,
}

impl AgentSystem {
    pub fn new(points: Vec<Point>) -> Self {
        Self {
            points,
            tracker: None,
            last_grads: None,
        }
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    /// Sets `s_i = grad f_i(x_i)`.
    pub fn with_tracking<P: Problem + ?Sized>(mut self, problem: &P) -> Result<Self> {
        let grads = riemannian_grads(problem, &self.points)?;
        self.tracker = Some(grads.clone());
        self.last_grads = Some(grads);
        Ok(self)
    }

    fn matrices(&self) -> Vec<Matrix> {
        self.points.iter().map(|p| p.as_matrix().clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitMode {
    Identical,
    /// Each agent moves by `δ` along its own random unit tangent direction.
    Perturbed(f64),
}

/// Seeded initial system inside the neighbourhood `max_i ‖x_i − x̄‖ ≤ γ/2`.
///
/// With `Perturbed(δ)`, `δ` is halved until the neighbourhood condition holds.
pub fn init_system<P: Problem + ?Sized>(problem: &P, mode: InitMode, seed: u64) -> Result<AgentSystem> {
    let spec = problem.manifold();
    let n = problem.n_agents();
    let mut rng = rng_stream(seed, INIT_STREAM);
    let base = spec.random_point(&mut rng);
    let mut delta = match mode {
        InitMode::Identical => 0.0,
        InitMode::Perturbed(d) if d >= 0.0 && d.is_finite() => d,
        InitMode::Perturbed(d) => return Err(Error::invalid(format!("perturbation must be non-negative, got {d}"))),
    };
    if delta == 0.0 {
        return Ok(AgentSystem::new(vec![base; n]));
    }
    let dirs: Vec<Matrix> = (0..n)
        .map(|_| spec.random_tangent(&base, &mut rng).into_matrix())
        .collect();
    loop {
        let points = dirs
            .iter()
            .map(|u| spec.project_tight(&(base.as_matrix() + u * delta)))
            .collect::<Result<Vec<_>>>()?;
        if max_deviation(spec, &points)? <= spec.gamma() / 2.0 {
            return Ok(AgentSystem::new(points));
        }
        delta /= 2.0;
    }
}

/// `max_i ‖x_i − x̄‖`.
pub fn max_deviation(spec: &ManifoldSpec, points: &[Point]) -> Result<f64> {
    let mean = crate::metrics::induced_mean(spec, points)?;
    Ok(points
        .iter()
        .map(|p| (p.as_matrix() - mean.x_bar.as_matrix()).norm())
        .fold(0.0, f64::max))
}

fn riemannian_grads<P: Problem + ?Sized>(problem: &P, points: &[Point]) -> Result<Vec<Matrix>> {
    let spec = problem.manifold();
    points
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let g = problem.local_grad(i, x.as_matrix())?;
            Ok(spec.riemannian_gradient(x, &g).into_matrix())
        })
        .collect()
}

fn tube(iter: usize, agent: Option<usize>) -> Error {
    Error::TubeViolation { iter, agent }
}

/// Projects every agent; an argument at distance `2γ` or more from the
/// manifold, or a singular one, is a tube violation.
fn project_all(spec: &ManifoldSpec, ys: Vec<Matrix>) -> Result<Vec<Point>> {
    ys.into_par_iter()
        .enumerate()
        .map(|(i, y)| {
            let p = spec.project_tight(&y).map_err(|e| match e {
                Error::Singular(_) => tube(0, Some(i)),
                other => other,
            })?;
            if !((p.as_matrix() - &y).norm() < 2.0 * spec.gamma()) {
                return Err(tube(0, Some(i)));
            }
            Ok(p)
        })
        .collect()
}

fn check_sizes(sys: &AgentSystem, m: &MixingMatrix) -> Result<()> {
    if sys.n() != m.n() {
        return Err(Error::invalid(format!(
            "system has {} agents but the mixing matrix {}",
            sys.n(),
            m.n()
        )));
    }
    Ok(())
}

/// `x_i ← P(Σ_j (Wᵗ)_ij x_j)`.
///
/// A projection failure is reported as a tube violation at iteration 0;
/// [`run`] rewrites the index.
pub fn consensus_step(spec: &ManifoldSpec, sys: &AgentSystem, m: &MixingMatrix, t: usize) -> Result<AgentSystem> {
    check_sizes(sys, m)?;
    let mixed = m.mix(&sys.matrices(), t)?;
    Ok(AgentSystem {
        points: project_all(spec, mixed)?,
        tracker: sys.tracker.clone(),
        last_grads: sys.last_grads.clone(),
    })
}

/// `x_i ← P(Σ_j (Wᵗ)_ij x_j − α grad f_i(x_i))`.
pub fn dprgd_step<P: Problem + ?Sized>(
    sys: &AgentSystem,
    m: &MixingMatrix,
    t: usize,
    problem: &P,
    alpha: f64,
) -> Result<AgentSystem> {
    check_sizes(sys, m)?;
    let spec = problem.manifold();
    let grads = riemannian_grads(problem, &sys.points)?;
    let mut mixed = m.mix(&sys.matrices(), t)?;
    for (y, g) in mixed.iter_mut().zip(&grads) {
        y.zip_apply(g, |a, b| *a -= alpha * b);
    }
    Ok(AgentSystem::new(project_all(spec, mixed)?))
}

/// One gradient-tracking step:
///
/// ```text
/// v_i = P_T(s_i)
/// x_i' = P(Σ_j (Wᵗ)_ij x_j − α v_i)
/// s_i' = Σ_j (Wᵗ)_ij s_j + grad f_i(x_i') − grad f_i(x_i)
/// ```
pub fn dprgt_step<P: Problem + ?Sized>(
    sys: &AgentSystem,
    m: &MixingMatrix,
    t: usize,
    problem: &P,
    alpha: f64,
) -> Result<AgentSystem> {
    check_sizes(sys, m)?;
    let spec = problem.manifold();
    let (Some(s), Some(old)) = (&sys.tracker, &sys.last_grads) else {
        return Err(Error::invalid("gradient tracking state is not initialized"));
    };
    let v: Vec<Matrix> = sys
        .points
        .par_iter()
        .zip(s.par_iter())
        .map(|(x, si)| spec.project_tangent(x, si).into_matrix())
        .collect();
    let mut mixed = m.mix(&sys.matrices(), t)?;
    for (y, vi) in mixed.iter_mut().zip(&v) {
        y.zip_apply(vi, |a, b| *a -= alpha * b);
    }
    let points = project_all(spec, mixed)?;
    let grads = riemannian_grads(problem, &points)?;
    let mut tracker = m.mix(s, t)?;
    for ((si, new), prev) in tracker.iter_mut().zip(&grads).zip(old) {
        *si += new;
        *si -= prev;
    }
    Ok(AgentSystem {
        points,
        tracker: Some(tracker),
        last_grads: Some(grads),
    })
}

/// Output of [`run`].
#[derive(Debug)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    /// Set when an iterate left the projection tube; the run stopped there.
    pub abort: Option<Error>,
    /// Last iteration completed.
    pub last_iter: usize,
    pub stopped_early: bool,
    pub final_system: AgentSystem,
    /// `‖(1/n) Σ_i s_{i,k}‖²` for every `k` (DPRGT only).
    pub tracker_mean_sq: Vec<f64>,
    /// `max_k ‖(1/n) Σ_i s_{i,k} − (1/n) Σ_i grad f_i(x_{i,k})‖` (DPRGT only).
    pub max_tracking_gap: f64,
    /// `max_{i,k} ‖s_{i,k}‖` (DPRGT only).
    pub max_tracker_norm: f64,
}

fn mean_of(ms: &[Matrix]) -> Matrix {
    let mut acc = Matrix::zeros(ms[0].nrows(), ms[0].ncols());
    for m in ms {
        acc += m;
    }
    acc / ms.len() as f64
}

/// Runs `cfg.max_iters` iterations from `init`, recording every
/// `cfg.trace_every` iterations. `truth` fills `dist_to_truth`.
pub fn run<P: Problem + ?Sized>(
    cfg: &RunConfig,
    problem: &P,
    m: &MixingMatrix,
    init: AgentSystem,
    truth: Option<&Point>,
) -> Result<Trace> {
    cfg.validate()?;
    check_sizes(&init, m)?;
    if init.n() != problem.n_agents() {
        return Err(Error::invalid(format!(
            "system has {} agents but the problem {}",
            init.n(),
            problem.n_agents()
        )));
    }
    let spec = problem.manifold();
    for (i, p) in init.points.iter().enumerate() {
        if spec.feasibility_residual(p.as_matrix()) > crate::manifold::FEASIBILITY_TOL {
            return Err(Error::invalid(format!("initial point of agent {i} is infeasible")));
        }
    }
    let tracking = cfg.algorithm == AlgorithmKind::Dprgt;
    let mut sys = match (tracking, init.tracker.is_some()) {
        (true, false) => init.with_tracking(problem)?,
        (false, _) => AgentSystem::new(init.points),
        (true, true) => init,
    };
    let start = Instant::now();
    let mut trace = Trace {
        records: Vec::new(),
        abort: None,
        last_iter: 0,
        stopped_early: false,
        final_system: sys.clone(),
        tracker_mean_sq: Vec::new(),
        max_tracking_gap: 0.0,
        max_tracker_norm: 0.0,
    };
    let mut k = 0;
    loop {
        let alpha = match cfg.algorithm {
            AlgorithmKind::Consensus => 0.0,
            _ => cfg.schedule.step(k),
        };
        if let (Some(s), Some(g)) = (&sys.tracker, &sys.last_grads) {
            let s_mean = mean_of(s);
            trace.tracker_mean_sq.push(s_mean.norm_squared());
            trace.max_tracking_gap = trace.max_tracking_gap.max((s_mean - mean_of(g)).norm());
            let norm = s.iter().map(|si| si.norm()).fold(0.0, f64::max);
            trace.max_tracker_norm = trace.max_tracker_norm.max(norm);
        }
        if k % cfg.trace_every == 0 {
            let st = match stationarity(problem, &sys.points) {
                Ok(st) => st,
                Err(Error::Singular(_)) => {
                    trace.abort = Some(tube(k, None));
                    break;
                }
                Err(e) => return Err(e),
            };
            let dist_to_truth = match truth {
                Some(x_star) => Some(subspace_distance(&st.x_bar, x_star)?),
                None => None,
            };
            trace.records.push(TraceRecord {
                iter: k,
                step_size: alpha,
                consensus_error: st.consensus_error,
                objective_at_mean: problem.objective(st.x_bar.as_matrix())?,
                grad_norm_sq: st.grad_norm_sq,
                dist_to_truth,
                wall_ns: if cfg.record_time {
                    start.elapsed().as_nanos() as u64
                } else {
                    0
                },
            });
            if cfg.stop.is_some_and(|eps| st.within(eps)) {
                trace.stopped_early = true;
                break;
            }
        }
        if k == cfg.max_iters {
            break;
        }
        let next = match cfg.algorithm {
            AlgorithmKind::Consensus => consensus_step(spec, &sys, m, cfg.t),
            AlgorithmKind::Dprgd => dprgd_step(&sys, m, cfg.t, problem, alpha),
            AlgorithmKind::Dprgt => dprgt_step(&sys, m, cfg.t, problem, alpha),
        };
        match next {
            Ok(s) => sys = s,
            Err(Error::TubeViolation { agent, .. }) => {
                trace.abort = Some(tube(k + 1, agent));
                break;
            }
            Err(e) => return Err(e),
        }
        k += 1;
    }
    trace.last_iter = k;
    trace.final_system = sys;
    Ok(trace)
}
