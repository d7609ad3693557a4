use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use mcopt::harness::{
    gen_data, rate_study, resolve_workers, run_experiment, sweep, with_workers, ExperimentConfig, KEYS,
};
use mcopt::manifold::{check_projection_lipschitz, ManifoldSpec};
use mcopt::numerics::{gaussian_matrix, rng_from_seed, Matrix};
use mcopt::Error;

const CONFIG_COMMANDS: [(&str, &str); 4] = [
    ("gen-data", "Generate a synthetic dataset bundle into out.dir"),
    ("run", "Run one experiment and write trace.csv and manifest.txt"),
    ("sweep", "Run every sweep.candidates value of algo.beta and report the best"),
    ("rate-study", "Measure consensus contraction ratios"),
];

fn key_args() -> Vec<Arg> {
    let mut args = vec![
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .value_parser(clap::value_parser!(PathBuf))
            .help("config file of key = value lines"),
        Arg::new("set")
            .long("set")
            .value_name("KEY=VALUE")
            .action(ArgAction::Append)
            .help("override any config key; repeatable, applied last"),
        Arg::new("no-clobber")
            .long("no-clobber")
            .action(ArgAction::SetTrue)
            .help("refuse to overwrite existing outputs (same as --out.no_clobber true)"),
    ];
    for (key, default, doc) in KEYS {
        let help = if default.is_empty() {
            doc.to_string()
        } else {
            format!("{doc} [default: {default}]")
        };
        args.push(Arg::new(*key).long(*key).value_name("VALUE").help(help));
    }
    args
}

fn workers_arg() -> Arg {
    Arg::new("workers")
        .long("workers")
        .global(true)
        .value_name("N")
        .value_parser(clap::value_parser!(usize))
        .help("worker threads (falls back to MC_WORKERS, then all cores)")
}

fn cli() -> Command {
    let mut cmd = Command::new("mcopt")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Decentralized optimization over compact matrix submanifolds")
        .arg(workers_arg());
    for (name, about) in CONFIG_COMMANDS {
        cmd = cmd.subcommand(Command::new(name).about(about).args(key_args()));
    }
    cmd.subcommand(
        Command::new("check")
            .about("Probe the projection inequalities on random points")
            .arg(
                Arg::new("manifold")
                    .long("manifold")
                    .value_parser(["stiefel", "gstiefel"])
                    .default_value("stiefel"),
            )
            .arg(num_arg("d", "10", "ambient rows"))
            .arg(num_arg("r", "5", "columns"))
            .arg(num_arg("trials", "1000", "random samples"))
            .arg(num_arg("seed", "0", "sampling seed"))
            .arg(
                Arg::new("scale")
                    .long("scale")
                    .value_parser(clap::value_parser!(f64))
                    .help("perturbation radius for the quadratic probe [default: 1e-2]"),
            ),
    )
}

fn num_arg(name: &'static str, default: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_parser(clap::value_parser!(u64))
        .default_value(default)
        .help(help)
}

fn build_config(m: &ArgMatches) -> mcopt::Result<ExperimentConfig> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    for (key, _, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    if m.get_flag("no-clobber") {
        cfg.no_clobber = true;
    }
    for kv in m.get_many::<String>("set").into_iter().flatten() {
        cfg.apply_override(kv)?;
    }
    Ok(cfg)
}

fn dispatch(name: &str, m: &ArgMatches) -> Result<(), Failure> {
    if name == "check" {
        return check(m).map_err(Failure::Config);
    }
    let cfg = build_config(m).map_err(Failure::Config)?;
    match name {
        "gen-data" => {
            let dir = gen_data(&cfg)?;
            eprintln!("wrote dataset bundle to {}", dir.display());
        }
        "run" => {
            let out = run_experiment(&cfg)?;
            eprintln!("wrote {} and {}", out.trace_path.display(), out.manifest_path.display());
            if let Some(last) = out.final_record() {
                eprintln!(
                    "iter {} consensus_error {:e} grad_norm_sq {:e} objective {:e}",
                    last.iter, last.consensus_error, last.grad_norm_sq, last.objective_at_mean
                );
            }
            if let Some(e) = out.trace.abort {
                return Err(Failure::Abort(e));
            }
        }
        "sweep" => {
            let res = sweep(&cfg)?;
            for e in &res.entries {
                eprintln!("beta {} score {:e}{}", e.beta, e.score, if e.aborted { " (aborted)" } else { "" });
            }
            eprintln!("best beta {}", res.best_beta);
        }
        "rate-study" => {
            let s = rate_study(&cfg)?;
            eprintln!(
                "sigma2 {} t {} sigma2^t {:e} max_ratio {:e} tail_rate {:e} violations {}",
                s.sigma2,
                s.t,
                s.sigma2_t(),
                s.max_ratio(),
                s.tail_rate,
                s.violations
            );
        }
        _ => unreachable!("unknown subcommand {name}"),
    }
    Ok(())
}

fn check(m: &ArgMatches) -> mcopt::Result<()> {
    let get = |k: &str| *m.get_one::<u64>(k).expect("defaulted") as usize;
    let (d, r, trials) = (get("d"), get("r"), get("trials"));
    let mut rng = rng_from_seed(get("seed") as u64);
    let spec = match m.get_one::<String>("manifold").map(String::as_str) {
        Some("gstiefel") => {
            let g = gaussian_matrix(d, d, &mut rng);
            let b = Matrix::identity(d, d) + g.transpose() * &g / (2 * d) as f64;
            ManifoldSpec::generalized_stiefel(b, r)?
        }
        _ => ManifoldSpec::stiefel(d, r)?,
    };
    let lip = check_projection_lipschitz(&spec, trials, spec.gamma(), &mut rng)?;
    let scale = m.get_one::<f64>("scale").copied().unwrap_or(1e-2);
    let quad = check_projection_lipschitz(&spec, trials, scale, &mut rng)?;
    println!("max_ratio_lip={}", lip.max_ratio_lip);
    println!("max_ratio_quad={}", quad.max_ratio_quad);
    println!("skipped={}", lip.skipped + quad.skipped);
    Ok(())
}

enum Failure {
    Config(Error),
    /// Exit status 2.
    Abort(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_runtime_abort() {
            Failure::Abort(e)
        } else {
            Failure::Config(e)
        }
    }
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let Some((name, sub)) = matches.subcommand() else {
        eprintln!("{}", cli().render_usage());
        eprintln!("run `mcopt --help` for the list of subcommands");
        return ExitCode::from(1);
    };
    let env = std::env::var("MC_WORKERS").ok();
    let workers = match resolve_workers(sub.get_one::<usize>("workers").copied(), env.as_deref()) {
        Ok(w) => w,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let result = with_workers(workers, || dispatch(name, sub)).unwrap_or_else(|e| Err(Failure::Config(e)));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Abort(e)) => {
            eprintln!("aborted: {e}");
            ExitCode::from(2)
        }
    }
}
