//! Command-line front end: config ingestion, subcommand dispatch, CSV/JSON
//! emission.
//!
//! Conventions: output goes to stdout unless `--out` is given; floats are
//! printed with 12 significant digits so diffs across runs are meaningful;
//! JSON documents carry a `schema_version` field; station indices are
//! 1-based in all emitted artifacts (the library is 0-based). Exit codes:
//! 0 success, 2 validation error, 3 assertion failure, 4 iteration limit.
//! `RSC_THREADS` caps worker parallelism.

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use serde_json::json;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use tandemq::dp::{self, DpError, DpOptions};
use tandemq::hamiltonian::{self, ControlStatus};
use tandemq::model::{mask_indices, NetworkParams};
use tandemq::roots;
use tandemq::sim::{self, CustomPolicy, Policy, Tilt};
use tandemq::value::{self, SingleServerParams, ValueFn};
use tandemq::viscosity;

const EXIT_VALIDATION: i32 = 2;
const EXIT_ASSERTION: i32 = 3;
const EXIT_ITERATION_LIMIT: i32 = 4;

struct CliError {
    code: i32,
    err: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(err: E) -> Self {
        Self {
            code: EXIT_VALIDATION,
            err: err.into(),
        }
    }
}

fn assertion_failure(msg: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_ASSERTION,
        err: anyhow!(msg.into()),
    }
}

type CliResult = Result<(), CliError>;

#[derive(Parser)]
#[command(
    name = "tandemq",
    version,
    about = "Risk-sensitive overflow control for tandem queues: closed-form value \
             function, PDE verification, lattice dynamic programming, and rare-event \
             simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Characteristic exponents per station (CSV: i, mu_i, beta_i, residual)
    Roots {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Value breakdown at one state (JSON)
    Value {
        #[arg(long)]
        config: PathBuf,
        /// State coordinates x1,...,xJ
        #[arg(long, value_delimiter = ',', num_args = 1.., allow_hyphen_values = true)]
        at: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bottleneck regions over a uniform grid of G (CSV)
    BottleneckMap {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 41)]
        resolution: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Hamiltonian, optimal perturbed rates, forced controls, identities (JSON)
    Hamiltonian {
        #[arg(long)]
        config: PathBuf,
        /// Gradient candidate p1,...,pJ
        #[arg(long, value_delimiter = ',', num_args = 1.., allow_hyphen_values = true)]
        p: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Whole-grid viscosity verification (JSON; exit 3 on failure)
    CheckPde {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 21)]
        resolution: usize,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Randomized draws per grid point and check
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve the lattice dynamic program at scale n (JSON + optional table)
    SolveDp {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        n: u32,
        /// Seed value iteration with exp(-n V) instead of 1
        #[arg(long)]
        warm: bool,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        /// Report V^n at this state (default: the origin; snapped to the lattice)
        #[arg(long, value_delimiter = ',', num_args = 1.., allow_hyphen_values = true)]
        at: Option<Vec<f64>>,
        /// Also write the full table (CSV: x1..xJ, W, Vn, u1..uJ)
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// V^n versus the limit value across scales (CSV: n, vn, v_limit, gap)
    Convergence {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "n-list", value_delimiter = ',', num_args = 1..)]
        n_list: Vec<u32>,
        #[arg(long, value_delimiter = ',', num_args = 1.., allow_hyphen_values = true)]
        at: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo estimate of E exp(-n c sigma) (JSON)
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        n: u32,
        /// serve-all | bottleneck | custom@<policy.json>
        #[arg(long, default_value = "serve-all")]
        policy: String,
        #[arg(long)]
        paths: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Importance-sample under the bottleneck tilt
        #[arg(long = "is")]
        importance: bool,
        #[arg(long, value_delimiter = ',', num_args = 1.., allow_hyphen_values = true)]
        at: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare serve-all, bottleneck-only and idling variants (JSON)
    ComparePolicies {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        n: u32,
        #[arg(long)]
        paths: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',', num_args = 1.., allow_hyphen_values = true)]
        at: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Priority regions of the single-server multiclass variant (CSV)
    RegionsSingleServer {
        /// JSON config {"lambda": [...], "mu": [...], "z": [...], "c": ...}
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 41)]
        resolution: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// 12 significant digits, for diff-stable CSV cells.
fn f12(v: f64) -> String {
    format!("{v:.11e}")
}

/// Rounds to 12 significant digits before JSON serialization.
fn j12(v: f64) -> f64 {
    format!("{v:.11e}").parse().unwrap_or(v)
}

fn mask_to_stations(mask: u32) -> Vec<u64> {
    mask_indices(mask).map(|i| i as u64 + 1).collect()
}

fn mask_join(mask: u32) -> String {
    let ids: Vec<String> = mask_indices(mask).map(|i| (i + 1).to_string()).collect();
    ids.join(";")
}

fn emit(out: &Option<PathBuf>, content: &str) -> CliResult {
    match out {
        Some(path) => fs::write(path, content)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(CliError::from),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn load_params(path: &PathBuf) -> Result<NetworkParams, CliError> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    Ok(NetworkParams::from_json(&text)?)
}

fn load_value_fn(path: &PathBuf) -> Result<ValueFn, CliError> {
    Ok(ValueFn::new(load_params(path)?)?)
}

fn origin_or(at: Option<Vec<f64>>, j: usize) -> Vec<f64> {
    at.unwrap_or_else(|| vec![0.0; j])
}

fn dp_error(err: DpError) -> CliError {
    let code = match err {
        DpError::IterationLimit { .. } => EXIT_ITERATION_LIMIT,
        _ => EXIT_VALIDATION,
    };
    CliError {
        code,
        err: err.into(),
    }
}

fn parse_policy(spec: &str, params: &NetworkParams, n: u32) -> Result<Policy, CliError> {
    match spec {
        "serve-all" => Ok(Policy::ServeAll),
        "bottleneck" | "bottleneck-only" => Ok(Policy::BottleneckOnly),
        other => {
            if let Some(path) = other.strip_prefix("custom@") {
                let text =
                    fs::read_to_string(path).with_context(|| format!("reading policy {path}"))?;
                Ok(Policy::Custom(CustomPolicy::from_json(&text, params, n)?))
            } else {
                Err(anyhow!(
                    "unknown policy `{other}` (expected serve-all, bottleneck, or custom@<file>)"
                )
                .into())
            }
        }
    }
}

fn cmd_roots(config: PathBuf, out: Option<PathBuf>) -> CliResult {
    let params = load_params(&config)?;
    let mut csv = String::from("i,mu_i,beta_i,residual\n");
    for i in 0..params.j() {
        let mu = params.mu()[i];
        let r = roots::beta_root(params.lambda(), mu, params.c())?;
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            i + 1,
            f12(mu),
            f12(r.root),
            f12(r.residual)
        );
    }
    emit(&out, &csv)
}

fn cmd_value(config: PathBuf, at: Vec<f64>, out: Option<PathBuf>) -> CliResult {
    let vf = load_value_fn(&config)?;
    let breakdown = vf.breakdown(&at)?;
    let a_of_x = if at[0] < vf.params().z()[0] {
        Some(mask_to_stations(vf.a_of_x(&at)?))
    } else {
        None
    };
    let doc = json!({
        "schema_version": "tandemq.value.v1",
        "x": at,
        "terms": breakdown.terms.iter().map(|&t| j12(t)).collect::<Vec<_>>(),
        "value": j12(breakdown.value),
        "argmin": mask_to_stations(breakdown.argmin),
        "a_of_x": a_of_x,
        "bottleneck": breakdown.bottleneck as u64 + 1,
    });
    emit(&out, &format!("{}\n", serde_json::to_string_pretty(&doc)?))
}

fn cmd_bottleneck_map(config: PathBuf, resolution: usize, out: Option<PathBuf>) -> CliResult {
    let vf = load_value_fn(&config)?;
    let rows = vf.region_map(resolution)?;
    let j = vf.params().j();
    let mut csv = String::new();
    for axis in 0..j {
        let _ = write!(csv, "x{},", axis + 1);
    }
    csv.push_str("V,argmin,A_of_x\n");
    for row in rows {
        for v in &row.x {
            let _ = write!(csv, "{},", f12(*v));
        }
        let _ = writeln!(
            csv,
            "{},{},{}",
            f12(row.value),
            mask_join(row.argmin),
            mask_join(row.a_of_x)
        );
    }
    emit(&out, &csv)
}

fn cmd_hamiltonian(config: PathBuf, p: Vec<f64>, out: Option<PathBuf>) -> CliResult {
    let params = load_params(&config)?;
    params.check_dim(&p)?;
    let h = hamiltonian::hamiltonian(&p, &params);
    let m = hamiltonian::optimal_rates(&p, &params);
    let controls = hamiltonian::optimal_controls(&p, &params);
    let forced: Vec<&str> = controls
        .iter()
        .map(|c| match c {
            ControlStatus::ForcedOn => "on",
            ControlStatus::ForcedOff => "off",
            ControlStatus::Free => "free",
        })
        .collect();
    // the sum identity needs a control with H(p, u) = 0; the forced-on
    // pattern is the natural candidate
    let u: Vec<f64> = controls
        .iter()
        .map(|c| {
            if *c == ControlStatus::ForcedOn {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let (sum_residual, sum_note) = match hamiltonian::sum_relation(&u, &p, &params) {
        Ok(r) => (Some(j12(r)), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let doc = json!({
        "schema_version": "tandemq.hamiltonian.v1",
        "p": p,
        "H": j12(h),
        "optimal_m": {
            "lambda": j12(m.lambda),
            "mu": m.mu.iter().map(|&v| j12(v)).collect::<Vec<_>>(),
        },
        "forced_controls": forced,
        "product_relation_residual": j12(hamiltonian::product_relation(&p, &params)),
        "sum_relation_residual": sum_residual,
        "sum_relation_note": sum_note,
    });
    emit(&out, &format!("{}\n", serde_json::to_string_pretty(&doc)?))
}

fn cmd_check_pde(
    config: PathBuf,
    resolution: usize,
    tol: f64,
    seed: u64,
    samples: usize,
    out: Option<PathBuf>,
) -> CliResult {
    let vf = load_value_fn(&config)?;
    let summary = viscosity::pde_scan(&vf, resolution, tol, samples, seed)?;
    let doc = json!({
        "schema_version": "tandemq.check-pde.v1",
        "resolution": summary.resolution,
        "points": summary.points,
        "samples_per_point": samples,
        "tol": tol,
        "seed": seed,
        "max_residual_interior": j12(summary.max_residual_interior),
        "max_h_violation": j12(summary.max_h_violation),
        "boundary_o_max_abs_V": j12(summary.boundary_o_max_abs_v),
        "subdiff_skipped": summary.subdiff_skipped,
        "pass": summary.pass,
    });
    emit(&out, &format!("{}\n", serde_json::to_string_pretty(&doc)?))?;
    if summary.pass {
        Ok(())
    } else {
        Err(assertion_failure("viscosity verification failed"))
    }
}

fn cmd_solve_dp(
    config: PathBuf,
    n: u32,
    warm: bool,
    tol: f64,
    at: Option<Vec<f64>>,
    table: Option<PathBuf>,
    out: Option<PathBuf>,
) -> CliResult {
    let vf = load_value_fn(&config)?;
    let opts = DpOptions {
        tol,
        warm_start: warm,
        ..DpOptions::default()
    };
    let result = dp::solve(&vf, n, &opts).map_err(dp_error)?;
    let j = vf.params().j();
    let query = origin_or(at, j);
    let flat = result.lattice().nearest(&query);
    let snapped = result.lattice().coords(flat);

    if let Some(path) = &table {
        let mut csv = String::new();
        for axis in 0..j {
            let _ = write!(csv, "x{},", axis + 1);
        }
        csv.push_str("W,Vn,");
        let header: Vec<String> = (1..=j).map(|i| format!("u{i}")).collect();
        csv.push_str(&header.join(","));
        csv.push('\n');
        for s in 0..result.lattice().len() {
            let x = result.lattice().coords(s);
            for v in &x {
                let _ = write!(csv, "{},", f12(*v));
            }
            let _ = write!(csv, "{},{}", f12(result.w[s]), f12(result.v[s]));
            for i in 0..j {
                let _ = write!(csv, ",{}", result.policy[s] >> i & 1);
            }
            csv.push('\n');
        }
        fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
    }

    let doc = json!({
        "schema_version": "tandemq.solve-dp.v1",
        "n": n,
        "warm_start": warm,
        "states": result.lattice().len(),
        "iterations": result.iterations,
        "final_delta": j12(result.final_delta),
        "vn_at": {
            "x": snapped,
            "w": j12(result.w[flat]),
            "vn": j12(result.v[flat]),
        },
    });
    emit(&out, &format!("{}\n", serde_json::to_string_pretty(&doc)?))
}

fn cmd_convergence(
    config: PathBuf,
    n_list: Vec<u32>,
    at: Option<Vec<f64>>,
    out: Option<PathBuf>,
) -> CliResult {
    let vf = load_value_fn(&config)?;
    let x0 = origin_or(at, vf.params().j());
    let rows = dp::convergence_study(&vf, &n_list, &x0).map_err(dp_error)?;
    let mut csv = String::from("n,vn,v_limit,gap\n");
    for row in rows {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            row.n,
            f12(row.vn),
            f12(row.v_limit),
            f12(row.gap)
        );
    }
    emit(&out, &csv)
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    config: PathBuf,
    n: u32,
    policy_spec: String,
    paths: u64,
    seed: u64,
    importance: bool,
    at: Option<Vec<f64>>,
    out: Option<PathBuf>,
) -> CliResult {
    let vf = load_value_fn(&config)?;
    let policy = parse_policy(&policy_spec, vf.params(), n)?;
    let x0 = origin_or(at, vf.params().j());
    let tilt = if importance {
        Tilt::Bottleneck
    } else {
        Tilt::Nominal
    };
    let est = sim::estimate_with_tilt(&vf, n, &policy, tilt, &x0, paths, seed)?;
    let doc = json!({
        "schema_version": "tandemq.simulate.v1",
        "n": n,
        "policy": policy_spec,
        "importance_sampling": importance,
        "paths": est.n_traj,
        "seed": seed,
        "x0": x0,
        "mean": j12(est.mean),
        "stderr": j12(est.stderr),
        "v_hat": j12(est.v_hat),
        "exit_face_counts": {
            "boundary_o": est.exits_boundary_o,
            "boundary_c": est.exits_boundary_c,
        },
    });
    emit(&out, &format!("{}\n", serde_json::to_string_pretty(&doc)?))
}

fn cmd_compare_policies(
    config: PathBuf,
    n: u32,
    paths: u64,
    seed: u64,
    at: Option<Vec<f64>>,
    out: Option<PathBuf>,
) -> CliResult {
    let vf = load_value_fn(&config)?;
    let x0 = origin_or(at, vf.params().j());
    let cmp = sim::policy_comparison(&vf, n, &x0, paths, seed)?;
    let nf = f64::from(n);
    let rows: Vec<serde_json::Value> = cmp
        .rows
        .iter()
        .map(|row| {
            let e = &row.estimate;
            // 3-standard-error band, mapped through -(1/n) log(.)
            let hi_mean = e.mean + 3.0 * e.stderr;
            let lo_mean = e.mean - 3.0 * e.stderr;
            let v_lo = j12(-hi_mean.ln() / nf);
            let v_hi = (lo_mean > 0.0).then(|| j12(-lo_mean.ln() / nf));
            json!({
                "policy": row.name,
                "mean": j12(e.mean),
                "stderr": j12(e.stderr),
                "v_hat": j12(e.v_hat),
                "v_hat_lo": v_lo,
                "v_hat_hi": v_hi,
                "exit_face_counts": {
                    "boundary_o": e.exits_boundary_o,
                    "boundary_c": e.exits_boundary_c,
                },
            })
        })
        .collect();
    let doc = json!({
        "schema_version": "tandemq.compare-policies.v1",
        "n": n,
        "paths": paths,
        "seed": seed,
        "x0": x0,
        "bottleneck_station": cmp.bottleneck_station as u64 + 1,
        "gap_serve_all_vs_bottleneck_only": j12(cmp.gap_serve_all_vs_bottleneck_only),
        "gap_serve_all_vs_idle_bottleneck": j12(cmp.gap_serve_all_vs_idle_bottleneck),
        "rows": rows,
    });
    emit(&out, &format!("{}\n", serde_json::to_string_pretty(&doc)?))
}

fn cmd_regions_single_server(
    config: PathBuf,
    resolution: usize,
    out: Option<PathBuf>,
) -> CliResult {
    let text = fs::read_to_string(&config)
        .with_context(|| format!("reading config {}", config.display()))?;
    let params = SingleServerParams::from_json(&text)?;
    eprintln!(
        "warning: the single-server closed form is valid for sufficiently large c \
         (threshold unquantified); treat this map as valid-for-large-c"
    );
    let rows = value::single_server_region_map(&params, resolution)?;
    let j = params.j();
    let mut csv = String::new();
    for axis in 0..j {
        let _ = write!(csv, "x{},", axis + 1);
    }
    csv.push_str("V,serve\n");
    for row in rows {
        for v in &row.x {
            let _ = write!(csv, "{},", f12(*v));
        }
        let _ = writeln!(csv, "{},{}", f12(row.value), mask_join(row.serve));
    }
    emit(&out, &csv)
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Roots { config, out } => cmd_roots(config, out),
        Command::Value { config, at, out } => cmd_value(config, at, out),
        Command::BottleneckMap {
            config,
            resolution,
            out,
        } => cmd_bottleneck_map(config, resolution, out),
        Command::Hamiltonian { config, p, out } => cmd_hamiltonian(config, p, out),
        Command::CheckPde {
            config,
            resolution,
            tol,
            seed,
            samples,
            out,
        } => cmd_check_pde(config, resolution, tol, seed, samples, out),
        Command::SolveDp {
            config,
            n,
            warm,
            tol,
            at,
            table,
            out,
        } => cmd_solve_dp(config, n, warm, tol, at, table, out),
        Command::Convergence {
            config,
            n_list,
            at,
            out,
        } => cmd_convergence(config, n_list, at, out),
        Command::Simulate {
            config,
            n,
            policy,
            paths,
            seed,
            importance,
            at,
            out,
        } => cmd_simulate(config, n, policy, paths, seed, importance, at, out),
        Command::ComparePolicies {
            config,
            n,
            paths,
            seed,
            at,
            out,
        } => cmd_compare_policies(config, n, paths, seed, at, out),
        Command::RegionsSingleServer {
            config,
            resolution,
            out,
        } => cmd_regions_single_server(config, resolution, out),
    }
}

fn main() {
    if let Ok(threads) = std::env::var("RSC_THREADS") {
        if let Ok(k) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(k.max(1))
                .build_global();
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(CliError { code, err }) => {
            eprintln!("error: {err:#}");
            std::process::exit(code);
        }
    }
}
