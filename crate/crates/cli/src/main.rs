use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lipchord::admm::verify_solution;
use lipchord::chordal::oracle_edge_set;
use lipchord::network::random_network;
use lipchord::verify::{lower_bound_sampling, SamplingOptions, DEFAULT_LOCAL, DEFAULT_PAIRS, DEFAULT_RADIUS};
use lipchord::{
    estimate, maximal_cliques, predicted_edge_set, ActivationKind, DimsProfile, EstimateOptions, Method, Network,
    SdpProblem, SolveOptions,
};
use serde_json::json;

mod bench;

#[derive(Parser)]
#[command(name = "lipchord", version, about = "Lipschitz upper bounds for feedforward networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute a Lipschitz bound and write the report as JSON.
    Estimate(EstimateArgs),
    /// Print the maximal cliques of the constraint's sparsity graph.
    Cliques(PatternArgs),
    /// Write the predicted sparsity pattern of the constraint matrix.
    Sparsity(SparsityArgs),
    /// Generate a random relu network.
    RandomNet(RandomNetArgs),
    /// Solve, check the solution, and compare against sampled lower bounds.
    Verify(VerifyArgs),
    /// Time bounds over a grid of random networks.
    Bench(BenchArgs),
}

#[derive(Args, Clone)]
struct SolverArgs {
    #[arg(long, default_value_t = 10.0)]
    rho: f64,
    #[arg(long, default_value_t = 1e-8)]
    eps_abs: f64,
    #[arg(long, default_value_t = 1e-6)]
    eps_rel: f64,
    #[arg(long, default_value_t = 200_000)]
    max_iters: usize,
    /// Normalize every layer to unit spectral norm before solving (relu, zero
    /// biases only); the bound is scaled back.
    #[arg(long)]
    scale_weights: bool,
}

impl SolverArgs {
    fn options(&self) -> EstimateOptions {
        EstimateOptions {
            solve: SolveOptions {
                rho0: self.rho,
                eps_abs: self.eps_abs,
                eps_rel: self.eps_rel,
                max_iters: self.max_iters,
                ..SolveOptions::default()
            },
            scale_weights: self.scale_weights,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Chordal,
    Dense,
    Naive,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Chordal => Method::Chordal,
            MethodArg::Dense => Method::Dense,
            MethodArg::Naive => Method::Naive,
        }
    }
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long, default_value_t = 0)]
    tau: usize,
    #[arg(long, value_enum, default_value = "chordal")]
    method: MethodArg,
    #[command(flatten)]
    solver: SolverArgs,
    /// Report path; the JSON goes to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliqueFormat {
    Text,
    Json,
}

#[derive(Args)]
struct PatternArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long, default_value_t = 0)]
    tau: usize,
    #[arg(long, value_enum, default_value = "text")]
    format: CliqueFormat,
}

#[derive(Clone, Copy, ValueEnum)]
enum PatternFormat {
    Pbm,
    Csv,
}

#[derive(Args)]
struct SparsityArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long, default_value_t = 0)]
    tau: usize,
    #[arg(long, value_enum, default_value = "pbm")]
    format: PatternFormat,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also build the constraint numerically and fail if its support differs
    /// from the prediction.
    #[arg(long)]
    oracle: bool,
}

#[derive(Args)]
struct RandomNetArgs {
    #[arg(long)]
    width: usize,
    #[arg(long)]
    depth: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long, default_value_t = 0)]
    tau: usize,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long, default_value_t = DEFAULT_PAIRS)]
    pairs: usize,
    #[arg(long, default_value_t = DEFAULT_LOCAL)]
    local: usize,
    #[arg(long, default_value_t = DEFAULT_RADIUS)]
    radius: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the bound, lower bound and checks as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma list; `a..b` and `a..b:step` ranges are inclusive.
    #[arg(long)]
    widths: String,
    #[arg(long)]
    depths: String,
    #[arg(long, default_value = "0")]
    taus: String,
    #[arg(long, default_value = "chordal,dense,naive")]
    methods: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-cell budget in seconds; cells that run out are recorded as timeouts.
    #[arg(long)]
    time_budget_s: Option<f64>,
    #[command(flatten)]
    solver: SolverArgs,
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_net(path: &Path) -> Result<Network> {
    Network::load(path).with_context(|| format!("loading network {}", path.display()))
}

fn cmd_estimate(args: EstimateArgs) -> Result<ExitCode> {
    let net = load_net(&args.net)?;
    let method = Method::from(args.method);
    let e = estimate(&net, method, args.tau, &args.solver.options())?;
    let r = &e.report;
    let json = serde_json::to_string_pretty(r)? + "\n";
    let status = match (method, r.converged, r.certified) {
        (Method::Naive, _, _) => "naive".to_string(),
        (_, false, _) => format!("not converged after {} iterations", r.iters),
        (_, true, true) => "certified".to_string(),
        (_, true, false) => format!("estimate, tau = {}", r.tau),
    };
    let summary = format!("lipschitz_bound {} ({status})", r.lipschitz_bound);
    match &args.out {
        Some(path) => {
            write_output(Some(path), &json)?;
            println!("{summary}");
        }
        None => {
            print!("{json}");
            eprintln!("{summary}");
        }
    }
    Ok(if r.converged { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn cmd_cliques(args: PatternArgs) -> Result<ExitCode> {
    let net = load_net(&args.net)?;
    let dims = DimsProfile::from_network(&net);
    let cliques = maximal_cliques(&dims, args.tau);
    match args.format {
        CliqueFormat::Text => {
            println!("p = {}", cliques.len());
            for c in cliques.cliques() {
                println!("{c} size {}", c.len());
            }
        }
        CliqueFormat::Json => {
            let list: Vec<_> = cliques
                .cliques()
                .iter()
                .map(|c| {
                    let (a, b) = c.one_based();
                    json!({"start": a, "end": b, "size": c.len()})
                })
                .collect();
            let v = json!({"n": dims.total(), "tau": args.tau, "p": cliques.len(), "cliques": list});
            println!("{}", serde_json::to_string_pretty(&v)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_sparsity(args: SparsityArgs) -> Result<ExitCode> {
    let net = load_net(&args.net)?;
    let dims = DimsProfile::from_network(&net);
    let predicted = predicted_edge_set(&dims, args.tau);
    let text = match args.format {
        PatternFormat::Pbm => predicted.to_pbm(),
        PatternFormat::Csv => predicted.to_csv(),
    };
    write_output(args.out.as_deref(), &text)?;
    if args.oracle {
        let oracle = oracle_edge_set(&SdpProblem::build(&net, args.tau)?);
        if oracle != predicted {
            let extra = oracle.pairs().filter(|&(i, j)| !predicted.contains(i, j)).count();
            let missing = predicted.pairs().filter(|&(i, j)| !oracle.contains(i, j)).count();
            eprintln!("numeric support differs from prediction: {extra} extra, {missing} missing entries");
            return Ok(ExitCode::from(2));
        }
        eprintln!("numeric support matches prediction");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_random_net(args: RandomNetArgs) -> Result<ExitCode> {
    let net = random_network(args.width, args.depth, args.seed)?;
    write_output(args.out.as_deref(), &(net.to_json() + "\n"))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode> {
    let net = load_net(&args.net)?;
    let e = estimate(&net, Method::Chordal, args.tau, &args.solver.options())?;
    let (problem, cliques, output) = match (&e.problem, &e.cliques, &e.output) {
        (Some(p), Some(c), Some(o)) => (p, c, o),
        _ => bail!("solver produced no solution to check"),
    };
    let mut lines: Vec<(String, bool, String)> = Vec::new();
    lines.push(("converged".into(), e.report.converged, format!("{} iterations", e.report.iters)));
    let checks = verify_solution(problem, cliques, &output.gamma, &output.z_blocks)?;
    for c in &checks.checks {
        lines.push((c.name.clone(), c.passed, format!("{:.3e} <= {:.3e}", c.value, c.threshold)));
    }
    let lower = if net.activation().kind == ActivationKind::Sector {
        println!("skip  sampled_lower_bound (sector activation has no formula to evaluate)");
        None
    } else {
        let opts = SamplingOptions { n_pairs: args.pairs, n_local: args.local, radius: args.radius, seed: args.seed };
        let lb = lower_bound_sampling(&net, &opts)?;
        lines.push((
            "sampled_lower_bound".into(),
            lb.best_quotient < e.report.lipschitz_bound,
            format!("{} < {}", lb.best_quotient, e.report.lipschitz_bound),
        ));
        Some(lb)
    };
    for (name, ok, detail) in &lines {
        println!("{}  {name} ({detail})", if *ok { "pass" } else { "FAIL" });
    }
    let all = lines.iter().all(|l| l.1);
    if let Some(path) = &args.out {
        let v = json!({
            "bound": e.report,
            "lower_bound": lower,
            "checks": checks.checks,
            "passed": all,
        });
        write_output(Some(path), &(serde_json::to_string_pretty(&v)? + "\n"))?;
    }
    Ok(if all { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn bench_threads() -> Result<usize> {
    match std::env::var("LIPCHORD_THREADS") {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("LIPCHORD_THREADS=`{v}` is not a count"))?;
            Ok(n.max(1))
        }
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

fn cmd_bench(args: BenchArgs) -> Result<ExitCode> {
    let time_budget = match args.time_budget_s {
        Some(s) if !(s > 0.0 && s.is_finite()) => bail!("--time-budget-s must be positive, got {s}"),
        Some(s) => Some(Duration::from_secs_f64(s)),
        None => None,
    };
    let grid = bench::Grid {
        widths: bench::parse_usize_list(&args.widths)?,
        depths: bench::parse_usize_list(&args.depths)?,
        taus: bench::parse_usize_list(&args.taus)?,
        methods: bench::parse_methods(&args.methods)?,
        seed: args.seed,
        time_budget,
    };
    grid.validate()?;
    let rows = bench::run(&grid, &args.solver.options(), bench_threads()?)?;
    write_output(args.out.as_deref(), &bench::to_csv(&rows)?)?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage_error = e.use_stderr();
            let _ = e.print();
            return if usage_error { ExitCode::FAILURE } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Estimate(a) => cmd_estimate(a),
        Command::Cliques(a) => cmd_cliques(a),
        Command::Sparsity(a) => cmd_sparsity(a),
        Command::RandomNet(a) => cmd_random_net(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
