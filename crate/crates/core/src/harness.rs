//! Experiment orchestration: flat `key = value` configs, runs, sweeps and
//! consensus rate studies, with traces and manifests written to `out.dir`.
//!
//! Config files hold one `key = value` per line; `#` starts a comment.
//! Keys under `result.` are ignored so a manifest can be fed back as a config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::algorithm::{init_system, run, AlgorithmKind, InitMode, RunConfig, StepSchedule, Trace};
use crate::error::{Error, Result};
use crate::manifold::ManifoldSpec;
use crate::metrics::{subspace_distance, write_trace, TraceRecord};
use crate::network::{consensus_radius_t, Graph, MixingMatrix, Topology};
use crate::numerics::Matrix;
use crate::problem::{
    gen_gevp_data, gen_lrmc_data, gen_pca_data, read_bundle, save_matrix, write_bundle,
    AnyProblem, GroundTruth, MatrixFormat, PcaProblem, Problem,
};

/// Every recognised key with its default value and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("problem.kind", "pca", "pca | gevp | lrmc"),
    ("problem.data", "", "dataset bundle directory (overrides the generator)"),
    ("problem.n", "8", "number of agents"),
    ("problem.m_i", "1000", "samples per agent (pca, gevp)"),
    ("problem.d", "10", "ambient rows of the iterate (data rows m for lrmc)"),
    ("problem.r", "5", "columns of the iterate"),
    ("problem.xi", "0.8", "spectral decay of the synthetic data (pca, gevp)"),
    ("problem.cols", "1000", "total data columns T (lrmc)"),
    ("problem.seed", "", "data seed (defaults to run.seed)"),
    ("graph.topology", "ring", "ring | complete | er"),
    ("graph.p", "0.6", "edge probability for er"),
    ("graph.seed", "", "graph seed (defaults to run.seed)"),
    ("graph.edges", "", "edge-list file (overrides graph.topology)"),
    ("algo.kind", "dprgt", "consensus | dprgd | dprgt"),
    ("algo.t", "1", "gossip rounds per iteration, or `auto`"),
    ("algo.schedule", "constant", "constant | samples | sqrtk | diminishing"),
    ("algo.beta", "1", "step-size scale"),
    ("init.mode", "identical", "identical | perturbed"),
    ("init.delta", "0.1", "perturbation size for init.mode = perturbed"),
    ("init.seed", "", "initialization seed (defaults to run.seed)"),
    ("run.K", "1000", "iterations"),
    ("run.seed", "0", "default for every other seed"),
    ("run.trace_every", "1", "record every this many iterations"),
    ("run.stop", "", "stop when both stationarity measures are at most this"),
    ("run.time", "false", "fill the wall_ns trace column"),
    ("sweep.candidates", "0.1,0.3,1,3", "comma-separated algo.beta values"),
    ("sweep.metric", "grad_norm_sq", "grad_norm_sq | objective"),
    ("out.dir", "out", "output directory"),
    ("out.points", "false", "write the final per-agent points"),
    ("out.agent_distance", "false", "report the mean per-agent distance to the truth"),
    ("out.no_clobber", "false", "refuse to overwrite an existing trace"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    Pca,
    Gevp,
    Lrmc,
}

/// How `algo.beta` becomes a step size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// `α = β`.
    Constant,
    /// `α = β n / Σ m_i`.
    Samples,
    /// `α = β / √K`.
    SqrtK,
    /// `α_k = β / √(k + 1)`.
    Diminishing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepMetric {
    GradNormSq,
    Objective,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepsSetting {
    Fixed(usize),
    /// Smallest `t` covered by the linear-rate theory for the graph.
    Auto,
}

/// A fully typed experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub problem_kind: ProblemKind,
    pub data: Option<PathBuf>,
    pub n: usize,
    pub m_i: usize,
    pub d: usize,
    pub r: usize,
    pub xi: f64,
    pub cols: usize,
    pub problem_seed: Option<u64>,
    pub topology: String,
    pub p: f64,
    pub graph_seed: Option<u64>,
    pub edges: Option<PathBuf>,
    pub algorithm: AlgorithmKind,
    pub t: StepsSetting,
    pub schedule: ScheduleKind,
    pub beta: f64,
    pub init: String,
    pub delta: f64,
    pub init_seed: Option<u64>,
    pub max_iters: usize,
    pub seed: u64,
    pub trace_every: usize,
    pub stop: Option<f64>,
    pub record_time: bool,
    pub candidates: Vec<f64>,
    pub metric: SweepMetric,
    pub out_dir: PathBuf,
    pub write_points: bool,
    pub agent_distance: bool,
    pub no_clobber: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = Self {
            problem_kind: ProblemKind::Pca,
            data: None,
            n: 0,
            m_i: 0,
            d: 0,
            r: 0,
            xi: 0.0,
            cols: 0,
            problem_seed: None,
            topology: String::new(),
            p: 0.0,
            graph_seed: None,
            edges: None,
            algorithm: AlgorithmKind::Dprgt,
            t: StepsSetting::Fixed(1),
            schedule: ScheduleKind::Constant,
            beta: 0.0,
            init: String::new(),
            delta: 0.0,
            init_seed: None,
            max_iters: 0,
            seed: 0,
            trace_every: 1,
            stop: None,
            record_time: false,
            candidates: Vec::new(),
            metric: SweepMetric::GradNormSq,
            out_dir: PathBuf::new(),
            write_points: false,
            agent_distance: false,
            no_clobber: false,
        };
        for (key, value, _) in KEYS {
            cfg.set(key, value).expect("defaults parse");
        }
        cfg
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::config(key, format!("expected true or false, got `{other}`"))),
    }
}

fn optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.trim().is_empty() {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

fn positive(key: &str, v: usize) -> Result<usize> {
    if v == 0 {
        return Err(Error::config(key, "must be at least 1"));
    }
    Ok(v)
}

impl ExperimentConfig {
    /// Assigns one key; unknown keys and unparsable values are config errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "problem.kind" => {
                self.problem_kind = match v {
                    "pca" => ProblemKind::Pca,
                    "gevp" => ProblemKind::Gevp,
                    "lrmc" => ProblemKind::Lrmc,
                    _ => return Err(Error::config(key, format!("unknown problem `{v}`"))),
                }
            }
            "problem.data" => self.data = optional(key, v)?,
            "problem.n" => self.n = positive(key, parse(key, v)?)?,
            "problem.m_i" => self.m_i = positive(key, parse(key, v)?)?,
            "problem.d" => self.d = positive(key, parse(key, v)?)?,
            "problem.r" => self.r = positive(key, parse(key, v)?)?,
            "problem.xi" => self.xi = parse(key, v)?,
            "problem.cols" => self.cols = positive(key, parse(key, v)?)?,
            "problem.seed" => self.problem_seed = optional(key, v)?,
            "graph.topology" => {
                if !matches!(v, "ring" | "complete" | "er") {
                    return Err(Error::config(key, format!("unknown topology `{v}`")));
                }
                self.topology = v.to_string();
            }
            "graph.p" => self.p = parse(key, v)?,
            "graph.seed" => self.graph_seed = optional(key, v)?,
            "graph.edges" => self.edges = optional(key, v)?,
            "algo.kind" => {
                self.algorithm = AlgorithmKind::parse(v)
                    .ok_or_else(|| Error::config(key, format!("unknown algorithm `{v}`")))?
            }
            "algo.t" => {
                self.t = match v {
                    "auto" => StepsSetting::Auto,
                    _ => StepsSetting::Fixed(positive(key, parse(key, v)?)?),
                }
            }
            "algo.schedule" => {
                self.schedule = match v {
                    "constant" => ScheduleKind::Constant,
                    "samples" => ScheduleKind::Samples,
                    "sqrtk" => ScheduleKind::SqrtK,
                    "diminishing" => ScheduleKind::Diminishing,
                    _ => return Err(Error::config(key, format!("unknown schedule `{v}`"))),
                }
            }
            "algo.beta" => self.beta = parse(key, v)?,
            "init.mode" => {
                if !matches!(v, "identical" | "perturbed") {
                    return Err(Error::config(key, format!("unknown init mode `{v}`")));
                }
                self.init = v.to_string();
            }
            "init.delta" => self.delta = parse(key, v)?,
            "init.seed" => self.init_seed = optional(key, v)?,
            "run.K" => self.max_iters = parse(key, v)?,
            "run.seed" => self.seed = parse(key, v)?,
            "run.trace_every" => self.trace_every = positive(key, parse(key, v)?)?,
            "run.stop" => self.stop = optional(key, v)?,
            "run.time" => self.record_time = parse_bool(key, v)?,
            "sweep.candidates" => {
                let list = v
                    .split(',')
                    .map(|c| parse::<f64>(key, c))
                    .collect::<Result<Vec<_>>>()?;
                if list.is_empty() {
                    return Err(Error::config(key, "needs at least one candidate"));
                }
                self.candidates = list;
            }
            "sweep.metric" => {
                self.metric = match v {
                    "grad_norm_sq" => SweepMetric::GradNormSq,
                    "objective" => SweepMetric::Objective,
                    _ => return Err(Error::config(key, format!("unknown metric `{v}`"))),
                }
            }
            "out.dir" => self.out_dir = PathBuf::from(v),
            "out.points" => self.write_points = parse_bool(key, v)?,
            "out.agent_distance" => self.agent_distance = parse_bool(key, v)?,
            "out.no_clobber" => self.no_clobber = parse_bool(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Current value of a key, with unset seeds resolved to `run.seed`.
    pub fn get(&self, key: &str) -> Option<String> {
        let value = match key {
            "problem.kind" => self.kind_name().to_string(),
            "problem.data" => self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "problem.n" => self.n.to_string(),
            "problem.m_i" => self.m_i.to_string(),
            "problem.d" => self.d.to_string(),
            "problem.r" => self.r.to_string(),
            "problem.xi" => self.xi.to_string(),
            "problem.cols" => self.cols.to_string(),
            "problem.seed" => self.problem_seed().to_string(),
            "graph.topology" => self.topology.clone(),
            "graph.p" => self.p.to_string(),
            "graph.seed" => self.graph_seed().to_string(),
            "graph.edges" => self.edges.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "algo.kind" => self.algorithm.name().to_string(),
            "algo.t" => match self.t {
                StepsSetting::Auto => "auto".to_string(),
                StepsSetting::Fixed(t) => t.to_string(),
            },
            "algo.schedule" => match self.schedule {
                ScheduleKind::Constant => "constant",
                ScheduleKind::Samples => "samples",
                ScheduleKind::SqrtK => "sqrtk",
                ScheduleKind::Diminishing => "diminishing",
            }
            .to_string(),
            "algo.beta" => self.beta.to_string(),
            "init.mode" => self.init.clone(),
            "init.delta" => self.delta.to_string(),
            "init.seed" => self.init_seed().to_string(),
            "run.K" => self.max_iters.to_string(),
            "run.seed" => self.seed.to_string(),
            "run.trace_every" => self.trace_every.to_string(),
            "run.stop" => show(&self.stop),
            "run.time" => self.record_time.to_string(),
            "sweep.candidates" => self
                .candidates
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "sweep.metric" => match self.metric {
                SweepMetric::GradNormSq => "grad_norm_sq",
                SweepMetric::Objective => "objective",
            }
            .to_string(),
            "out.dir" => self.out_dir.display().to_string(),
            "out.points" => self.write_points.to_string(),
            "out.agent_distance" => self.agent_distance.to_string(),
            "out.no_clobber" => self.no_clobber.to_string(),
            _ => return None,
        };
        Some(value)
    }

    /// Parses config text on top of the defaults.
    pub fn parse_str(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text, origin)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text, path)
    }

    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (k, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Format {
                path: origin.to_path_buf(),
                line: k as u64 + 1,
                msg: "expected `key = value`".into(),
            })?;
            let key = key.trim();
            if key.starts_with("result.") {
                continue;
            }
            self.set(key, value)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
        self.set(key.trim(), value)
    }

    /// `key=value` lines for every key, in [`KEYS`] order.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (key, _, _) in KEYS {
            let _ = writeln!(out, "{key}={}", self.get(key).expect("known key"));
        }
        out
    }

    pub fn kind_name(&self) -> &'static str {
        match self.problem_kind {
            ProblemKind::Pca => "pca",
            ProblemKind::Gevp => "gevp",
            ProblemKind::Lrmc => "lrmc",
        }
    }

    pub fn problem_seed(&self) -> u64 {
        self.problem_seed.unwrap_or(self.seed)
    }

    pub fn graph_seed(&self) -> u64 {
        self.graph_seed.unwrap_or(self.seed)
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed.unwrap_or(self.seed)
    }

    pub fn trace_path(&self) -> PathBuf {
        self.out_dir.join("trace.csv")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.out_dir.join("manifest.txt")
    }

    /// Loads the bundle or runs the generator.
    pub fn build_problem(&self) -> Result<(AnyProblem, GroundTruth)> {
        if let Some(dir) = &self.data {
            let (problem, truth, meta) = read_bundle(dir)?;
            if meta.n != self.n {
                return Err(Error::config(
                    "problem.n",
                    format!("bundle has {} agents, config says {}", meta.n, self.n),
                ));
            }
            return Ok((problem, truth));
        }
        let seed = self.problem_seed();
        Ok(match self.problem_kind {
            ProblemKind::Pca => {
                let (p, t) = gen_pca_data(self.n, self.m_i, self.d, self.r, self.xi, seed)?;
                (AnyProblem::Pca(p), t)
            }
            ProblemKind::Gevp => {
                let (p, t) = gen_gevp_data(self.n, self.m_i, self.d, self.r, self.xi, seed, None)?;
                (AnyProblem::Gevp(p), t)
            }
            ProblemKind::Lrmc => {
                let (p, t) = gen_lrmc_data(self.n, self.d, self.cols, self.r, seed)?;
                (AnyProblem::Lrmc(p), t)
            }
        })
    }

    pub fn build_graph(&self) -> Result<Graph> {
        let g = match &self.edges {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                Graph::parse_edge_list(&text)?
            }
            None => {
                let topology = match self.topology.as_str() {
                    "ring" => Topology::Ring,
                    "complete" => Topology::Complete,
                    _ => Topology::ErdosRenyi(self.p),
                };
                Graph::build(topology, self.n, self.graph_seed())?
            }
        };
        if g.n() != self.n {
            return Err(Error::config(
                "graph.edges",
                format!("graph has {} nodes, problem.n is {}", g.n(), self.n),
            ));
        }
        Ok(g)
    }

    /// Resolves `algo.t`; `auto` uses the diameter bound of the manifold for
    /// the mean-distance constant.
    pub fn resolve_t(&self, spec: &ManifoldSpec, w: &MixingMatrix) -> usize {
        match self.t {
            StepsSetting::Fixed(t) => t,
            StepsSetting::Auto => consensus_radius_t(w.sigma2(), spec.gamma(), spec.diameter_bound(), w.n()),
        }
    }

    pub fn step_schedule<P: Problem + ?Sized>(&self, problem: &P) -> StepSchedule {
        let b = self.beta;
        match self.schedule {
            ScheduleKind::Constant => StepSchedule::Constant(b),
            ScheduleKind::Samples => {
                StepSchedule::Constant(b * problem.n_agents() as f64 / problem.total_samples() as f64)
            }
            ScheduleKind::SqrtK => StepSchedule::Constant(b / (self.max_iters.max(1) as f64).sqrt()),
            ScheduleKind::Diminishing => StepSchedule::Diminishing { beta: b },
        }
    }

    pub fn init_mode(&self) -> InitMode {
        match self.init.as_str() {
            "perturbed" => InitMode::Perturbed(self.delta),
            _ => InitMode::Identical,
        }
    }
}

/// Everything a run needs, built once from a config.
pub struct Prepared {
    pub problem: AnyProblem,
    pub truth: GroundTruth,
    pub mixing: MixingMatrix,
    pub run: RunConfig,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (problem, truth) = cfg.build_problem()?;
    if problem.n_agents() != cfg.n {
        return Err(Error::config("problem.n", "does not match the problem"));
    }
    let graph = cfg.build_graph()?;
    let w = MixingMatrix::metropolis(&graph)?;
    let t = cfg.resolve_t(problem.manifold(), &w);
    let mixing = w.with_steps(t)?;
    let mut run = RunConfig::new(cfg.algorithm, cfg.step_schedule(&problem), cfg.max_iters);
    run.t = t;
    run.stop = cfg.stop;
    run.trace_every = cfg.trace_every;
    run.record_time = cfg.record_time;
    Ok(Prepared {
        problem,
        truth,
        mixing,
        run,
    })
}

fn execute(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Trace> {
    let init = init_system(&prep.problem, cfg.init_mode(), cfg.init_seed())?;
    run(&prep.run, &prep.problem, &prep.mixing, init, prep.truth.x_star.as_ref())
}

/// Result of [`run_experiment`].
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub trace_path: PathBuf,
    pub manifest_path: PathBuf,
    pub trace: Trace,
    pub sigma2: f64,
    pub t: usize,
    pub step_size: f64,
}

impl ExperimentOutcome {
    pub fn final_record(&self) -> Option<&TraceRecord> {
        self.trace.records.last()
    }

    pub fn aborted(&self) -> bool {
        self.trace.abort.is_some()
    }
}

fn prepare_out(cfg: &ExperimentConfig, file: &Path) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    if cfg.no_clobber && file.exists() {
        return Err(Error::config(
            "out.no_clobber",
            format!("{} already exists", file.display()),
        ));
    }
    Ok(())
}

/// Builds everything from `cfg`, runs it, and writes `trace.csv` and
/// `manifest.txt` into `out.dir`. A projection-tube abort still writes both
/// files; check [`ExperimentOutcome::aborted`].
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let trace_path = cfg.trace_path();
    prepare_out(cfg, &trace_path)?;
    let started = Instant::now();
    let prep = prepare(cfg)?;
    let trace = execute(cfg, &prep)?;
    let wall = started.elapsed().as_nanos();
    write_trace(&trace_path, &trace.records)?;
    let outcome = ExperimentOutcome {
        trace_path,
        manifest_path: cfg.manifest_path(),
        sigma2: prep.mixing.sigma2(),
        t: prep.run.t,
        step_size: prep.run.schedule.step(0),
        trace,
    };
    let mut manifest = cfg.echo();
    let mut result = |k: &str, v: String| {
        let _ = writeln!(manifest, "result.{k}={v}");
    };
    let tr = &outcome.trace;
    result("status", if tr.abort.is_some() { "aborted" } else { "ok" }.into());
    if let Some(e) = &tr.abort {
        result("abort", e.to_string());
        if let Error::TubeViolation { iter, .. } = e {
            result("abort_iter", iter.to_string());
        }
    }
    result("sigma2", outcome.sigma2.to_string());
    result("t", outcome.t.to_string());
    result("step_size", outcome.step_size.to_string());
    result("iters", tr.last_iter.to_string());
    result("stopped_early", tr.stopped_early.to_string());
    if let Some(last) = outcome.final_record() {
        result("final_consensus_error", last.consensus_error.to_string());
        result("final_objective", last.objective_at_mean.to_string());
        result("final_grad_norm_sq", last.grad_norm_sq.to_string());
        result("final_dist_to_truth", show(&last.dist_to_truth));
    }
    if let Some(f) = prep.truth.f_star {
        result("f_star", f.to_string());
    }
    if cfg.algorithm == AlgorithmKind::Dprgt {
        result("max_tracking_gap", tr.max_tracking_gap.to_string());
        result("max_tracker_norm", tr.max_tracker_norm.to_string());
    }
    if cfg.agent_distance {
        if let Some(x_star) = &prep.truth.x_star {
            let mut total = 0.0;
            for x in &tr.final_system.points {
                total += subspace_distance(x, x_star)?;
            }
            result("mean_agent_dist", (total / tr.final_system.n() as f64).to_string());
        }
    }
    result("wall_ns", wall.to_string());
    let path = &outcome.manifest_path;
    fs::write(path, manifest).map_err(|e| Error::io(path, e))?;
    if cfg.write_points {
        for (i, x) in tr.final_system.points.iter().enumerate() {
            let p = cfg.out_dir.join(format!("point_{i:03}.csv"));
            save_matrix(&p, x.as_matrix(), MatrixFormat::Csv)?;
        }
    }
    Ok(outcome)
}

/// One candidate of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepEntry {
    pub beta: f64,
    /// Selection metric at the final record; `+∞` for aborted runs.
    pub score: f64,
    pub final_record: Option<TraceRecord>,
    pub aborted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub best_beta: f64,
    pub best_index: usize,
    pub entries: Vec<SweepEntry>,
}

/// Runs every `sweep.candidates` value of `algo.beta` with identical seeds and
/// picks the smallest final metric; ties go to the earlier candidate. Writes
/// `sweep.csv` into `out.dir`.
pub fn sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let summary = cfg.out_dir.join("sweep.csv");
    prepare_out(cfg, &summary)?;
    let prep = prepare(cfg)?;
    let entries = cfg
        .candidates
        .par_iter()
        .map(|&beta| {
            let mut c = cfg.clone();
            c.beta = beta;
            let mut run_cfg = prep.run.clone();
            run_cfg.schedule = c.step_schedule(&prep.problem);
            let init = init_system(&prep.problem, c.init_mode(), c.init_seed())?;
            let trace = run(&run_cfg, &prep.problem, &prep.mixing, init, prep.truth.x_star.as_ref())?;
            let last = trace.records.last().cloned();
            let aborted = trace.abort.is_some();
            let score = match (&last, aborted) {
                (Some(r), false) => match cfg.metric {
                    SweepMetric::GradNormSq => r.grad_norm_sq,
                    SweepMetric::Objective => r.objective_at_mean,
                },
                _ => f64::INFINITY,
            };
            Ok(SweepEntry {
                beta,
                score: if score.is_nan() { f64::INFINITY } else { score },
                final_record: last,
                aborted,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best_index = 0;
    for (i, e) in entries.iter().enumerate() {
        if e.score < entries[best_index].score {
            best_index = i;
        }
    }
    let mut text = String::from("beta,score,aborted\n");
    for e in &entries {
        let _ = writeln!(text, "{},{},{}", e.beta, e.score, e.aborted);
    }
    fs::write(&summary, text).map_err(|e| Error::io(&summary, e))?;
    Ok(SweepResult {
        best_beta: entries[best_index].beta,
        best_index,
        entries,
    })
}

/// Contraction measurements of a consensus-only run.
#[derive(Debug, Clone, PartialEq)]
pub struct RateStudy {
    pub sigma2: f64,
    pub t: usize,
    /// `e_k = ‖x_k − x̄_k‖` over the stacked system, while it stays at or above
    /// [`RATE_FLOOR`].
    pub errors: Vec<f64>,
    /// `e_{k+1} / e_k`.
    pub ratios: Vec<f64>,
    /// Geometric mean of the ratios over the second half of the window.
    pub tail_rate: f64,
    /// Ratios exceeding `2σ₂ᵗ + 1e-6`.
    pub violations: usize,
}

impl RateStudy {
    pub fn sigma2_t(&self) -> f64 {
        self.sigma2.powi(self.t as i32)
    }

    pub fn max_ratio(&self) -> f64 {
        self.ratios.iter().cloned().fold(0.0, f64::max)
    }
}

/// Consensus floor below which ratios are dominated by rounding.
pub const RATE_FLOOR: f64 = 1e-13;

/// Per-step ratios and tail rate from a consensus-error trace (`n` agents).
pub fn contraction_ratios(records: &[TraceRecord], n: usize, sigma2: f64, t: usize) -> RateStudy {
    let errors: Vec<f64> = records
        .iter()
        .map(|r| (n as f64 * r.consensus_error).sqrt())
        .take_while(|&e| e >= RATE_FLOOR)
        .collect();
    let ratios: Vec<f64> = errors.windows(2).map(|w| w[1] / w[0]).collect();
    let tail = &ratios[ratios.len() / 2..];
    let tail_rate = if tail.is_empty() {
        0.0
    } else {
        (tail.iter().map(|r| r.max(f64::MIN_POSITIVE).ln()).sum::<f64>() / tail.len() as f64).exp()
    };
    let bound = 2.0 * sigma2.powi(t as i32) + 1e-6;
    RateStudy {
        sigma2,
        t,
        violations: ratios.iter().filter(|&&r| r > bound).count(),
        errors,
        ratios,
        tail_rate,
    }
}

/// Consensus-only run on the configured manifold and graph (the objective is
/// replaced by zero data). Writes `trace.csv`, `manifest.txt` and `rates.csv`.
pub fn rate_study(cfg: &ExperimentConfig) -> Result<RateStudy> {
    let rates_path = cfg.out_dir.join("rates.csv");
    prepare_out(cfg, &rates_path)?;
    let mut c = cfg.clone();
    c.algorithm = AlgorithmKind::Consensus;
    c.trace_every = 1;
    c.data = None;
    let problem = AnyProblem::Pca(PcaProblem::new(vec![Matrix::zeros(1, c.d); c.n], c.r)?);
    let graph = c.build_graph()?;
    let w = MixingMatrix::metropolis(&graph)?;
    let t = c.resolve_t(problem.manifold(), &w);
    let mixing = w.with_steps(t)?;
    let mut run_cfg = RunConfig::new(AlgorithmKind::Consensus, StepSchedule::Constant(1.0), c.max_iters);
    run_cfg.t = t;
    run_cfg.record_time = c.record_time;
    let init = init_system(&problem, c.init_mode(), c.init_seed())?;
    let trace = run(&run_cfg, &problem, &mixing, init, None)?;
    if let Some(e) = trace.abort {
        return Err(e);
    }
    write_trace(&c.trace_path(), &trace.records)?;
    let study = contraction_ratios(&trace.records, c.n, mixing.sigma2(), t);
    let mut text = String::from("k,ratio\n");
    for (k, r) in study.ratios.iter().enumerate() {
        let _ = writeln!(text, "{k},{r}");
    }
    fs::write(&rates_path, text).map_err(|e| Error::io(&rates_path, e))?;
    let mut manifest = c.echo();
    let _ = writeln!(manifest, "result.sigma2={}", study.sigma2);
    let _ = writeln!(manifest, "result.t={t}");
    let _ = writeln!(manifest, "result.sigma2_t={}", study.sigma2_t());
    let _ = writeln!(manifest, "result.max_ratio={}", study.max_ratio());
    let _ = writeln!(manifest, "result.tail_rate={}", study.tail_rate);
    let _ = writeln!(manifest, "result.violations={}", study.violations);
    let path = c.manifest_path();
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(study)
}

/// Generates the configured dataset and writes it as a bundle into `out.dir`.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let meta_path = cfg.out_dir.join("meta.json");
    prepare_out(cfg, &meta_path)?;
    let mut c = cfg.clone();
    c.data = None;
    let (problem, truth) = c.build_problem()?;
    let (xi, nu) = match c.problem_kind {
        ProblemKind::Lrmc => (None, Some(crate::problem::observation_rate(c.d, c.cols, c.r))),
        _ => (Some(c.xi), None),
    };
    write_bundle(&c.out_dir, &problem, &truth, Some(c.problem_seed()), xi, nu)?;
    Ok(c.out_dir.clone())
}

/// Parses a rayon worker count from `--workers` or the `MC_WORKERS` variable.
pub fn resolve_workers(flag: Option<usize>, env: Option<&str>) -> Result<Option<usize>> {
    if let Some(n) = flag {
        return positive("--workers", n).map(Some);
    }
    match env.map(str::trim).filter(|s| !s.is_empty()) {
        None => Ok(None),
        Some(s) => positive("MC_WORKERS", parse("MC_WORKERS", s)?).map(Some),
    }
}

/// Runs `f` on a dedicated pool of `workers` threads (default: rayon's choice).
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::config("--workers", e.to_string()))?;
    Ok(pool.install(f))
}

/// Per-key map of a config file, for callers that only need raw values.
pub fn raw_pairs(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split('#').next())
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}
