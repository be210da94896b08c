//! `cadis` command-line front end.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cadis::data::ShardManifest;
use cadis::engine::{self, metrics, ExperimentConfig, Precision, RoundMetrics, Simulation};
use cadis::gradcheck::{run_gradcheck, Fault, GradCheckConfig};
use cadis::theory::{
    convergence_report, expected_rounds_bound, expected_rounds_exact, expected_rounds_mc, quadratic_trajectory,
    QuadraticClient, Scheme,
};
use cadis::{Rational, Scalar};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "cadis", version, about = "Cluster-aware federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a federated training experiment.
    Run(RunArgs),
    /// Evaluate the coverage-time and quadratic convergence formulas.
    #[command(subcommand)]
    Theory(TheoryCommand),
    /// Compare analytic and finite-difference gradients on random networks.
    Gradcheck(GradcheckArgs),
    /// Print the client partition a configuration would produce.
    Partition(PartitionArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file; omitted keys take their defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set training.rounds=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed (overrides the configuration).
    #[arg(long, env = "CADIS_SEED")]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        config::load_config(self.config.as_deref(), &self.overrides, self.seed)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory under which the run directory is created.
    #[arg(long, env = "CADIS_OUT", default_value = "runs")]
    out: PathBuf,
    /// Name of the run directory (default: `<config>-<algorithm>-s<seed>`).
    #[arg(long)]
    run_id: Option<String>,
    /// Suppress the per-round progress lines.
    #[arg(short, long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum TheoryCommand {
    /// Expected rounds until every client has participated.
    Rounds(RoundsArgs),
    /// Fixed points and loss gap of FedAvg vs cluster-balanced weighting on quadratics.
    Convergence(ConvergenceArgs),
}

#[derive(Args)]
struct RoundsArgs {
    /// Number of clients.
    #[arg(short)]
    n: usize,
    /// Participants per round.
    #[arg(short)]
    k: usize,
    /// Monte Carlo trials (0 skips simulation).
    #[arg(long, default_value_t = 0)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also print the exact value as a reduced fraction.
    #[arg(long)]
    fraction: bool,
}

#[derive(Args)]
struct ConvergenceArgs {
    /// Curvatures, comma separated.
    #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
    a: Vec<f64>,
    /// Linear coefficients, comma separated.
    #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
    b: Vec<f64>,
    /// Cluster id of each client (default: all singletons).
    #[arg(long, value_delimiter = ',')]
    clusters: Vec<usize>,
    /// Local learning rate.
    #[arg(long, default_value_t = 0.1)]
    eta: f64,
    /// Local steps per round.
    #[arg(long, default_value_t = 1)]
    steps: usize,
    /// Also print this many rounds of both trajectories.
    #[arg(long, default_value_t = 0)]
    rounds: usize,
    /// Starting point of the printed trajectories.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    z0: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    KdSign,
    ClassifierSign,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random networks to check.
    #[arg(long, default_value_t = 24)]
    trials: usize,
    /// Distillation weight; 0 checks cross entropy alone.
    #[arg(long, default_value_t = 0.7)]
    lambda: f64,
    /// Largest batch drawn.
    #[arg(long, default_value_t = 8)]
    max_batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Deliberately corrupt the analytic gradient (checker self-test).
    #[arg(long, value_enum)]
    inject_fault: Option<FaultArg>,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PartitionArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Include every client's sample indices.
    #[arg(long)]
    indices: bool,
    /// Write the manifest here instead of stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run(args) => cmd_run(&args).map(|_| ExitCode::SUCCESS),
        Command::Theory(TheoryCommand::Rounds(args)) => cmd_rounds(&args).map(|_| ExitCode::SUCCESS),
        Command::Theory(TheoryCommand::Convergence(args)) => cmd_convergence(&args).map(|_| ExitCode::SUCCESS),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
        Command::Partition(args) => cmd_partition(&args).map(|_| ExitCode::SUCCESS),
    }
}

fn default_run_id(args: &RunArgs, config: &ExperimentConfig) -> String {
    let stem = args
        .config
        .config
        .as_deref()
        .and_then(Path::file_stem)
        .map_or_else(|| "default".to_string(), |s| s.to_string_lossy().into_owned());
    let algorithm = serde_json::to_value(config.algorithm)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default();
    format!("{stem}-{algorithm}-s{}", config.seed)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let config = args.config.load()?;
    let run_id = args.run_id.clone().unwrap_or_else(|| default_run_id(args, &config));
    let dir = args.out.join(&run_id);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write(&dir.join("config.toml"), config::render_config(&config)?)?;
    match config.precision {
        Precision::F64 => run_in::<f64>(config, &dir, args.quiet),
        Precision::F32 => run_in::<f32>(config, &dir, args.quiet),
    }?;
    println!("outputs written to {}", dir.display());
    Ok(())
}

fn run_in<T: Scalar>(config: ExperimentConfig, dir: &Path, quiet: bool) -> Result<()> {
    let every = config.snapshot_every;
    let on_round = |sim: &Simulation<T>, m: &RoundMetrics| -> cadis::Result<()> {
        if !quiet {
            let clusters = m.clusters.map_or(String::new(), |c| format!(" clusters={c}"));
            let recovery = m
                .cluster_recovery
                .map_or(String::new(), |r| format!(" recovery={r:.3}"));
            eprintln!("round {:>4} top1={:.2}{clusters}{recovery}", m.round + 1, m.top1);
        }
        if every > 0 && (m.round + 1).is_multiple_of(every) && sim.config().algorithm.clusters() {
            let path = dir.join(format!("similarity_t{}.json", m.round + 1));
            let io_error = |source: std::io::Error| cadis::Error::Io {
                context: path.display().to_string(),
                source,
            };
            let json = serde_json::to_string(&sim.similarity().snapshot()).map_err(|e| io_error(e.into()))?;
            fs::write(&path, json).map_err(io_error)?;
        }
        Ok(())
    };
    let out = engine::run_experiment_with::<T>(config, on_round)?;
    write(&dir.join("metrics.csv"), out.metrics_csv())?;
    write(&dir.join("weights.csv"), metrics::weights_csv(&out.series))?;
    write(
        &dir.join("summary.json"),
        serde_json::to_string_pretty(&out.summary)? + "\n",
    )?;
    if let Some(best) = out.summary.best_top1 {
        println!(
            "initial top1 {:.2}  best {:.2}  final {:.2}",
            out.summary.initial_top1,
            best,
            out.summary.final_top1.unwrap_or(best)
        );
    }
    Ok(())
}

fn cmd_rounds(args: &RoundsArgs) -> Result<()> {
    let exact: Rational = expected_rounds_exact(args.n, args.k)?;
    let exact_f = cadis::Exact::to_f64_lossy(&exact);
    let bound: f64 = expected_rounds_bound(args.n, args.k)?;
    let mut line = format!("n={} k={} exact={exact_f:.3} bound={bound:.3}", args.n, args.k);
    if args.fraction {
        line.push_str(&format!(" exact_fraction={exact}"));
    }
    if args.trials > 0 {
        let mc = expected_rounds_mc(args.n, args.k, args.trials, args.seed)?;
        line.push_str(&format!(
            " mc={:.3} mc_ci99=[{:.3},{:.3}] mc_contains_exact={}",
            mc.mean,
            mc.mean - mc.half_width,
            mc.mean + mc.half_width,
            mc.contains(exact_f)
        ));
    }
    println!("{line}");
    Ok(())
}

fn cmd_convergence(args: &ConvergenceArgs) -> Result<()> {
    if args.a.len() != args.b.len() {
        bail!("--a has {} entries but --b has {}", args.a.len(), args.b.len());
    }
    let clusters: Vec<usize> = if args.clusters.is_empty() {
        (0..args.a.len()).collect()
    } else if args.clusters.len() == args.a.len() {
        args.clusters.clone()
    } else {
        bail!("--clusters needs one entry per client");
    };
    let clients = args
        .a
        .iter()
        .zip(&args.b)
        .zip(&clusters)
        .map(|((&a, &b), &c)| QuadraticClient::new(a, b, c))
        .collect::<cadis::Result<Vec<_>>>()?;
    let r = convergence_report(&clients, args.eta, args.steps)?;
    println!(
        "z_cadis={:.6} z_fedavg={:.6} loss_cadis={:.6} loss_fedavg={:.6} gap={:.6}",
        r.z_cadis, r.z_fedavg, r.loss_cadis, r.loss_fedavg, r.gap
    );
    if args.rounds > 0 {
        let cadis = quadratic_trajectory(&clients, args.eta, args.steps, args.rounds, Scheme::Cadis, args.z0)?;
        let fedavg = quadratic_trajectory(&clients, args.eta, args.steps, args.rounds, Scheme::FedAvg, args.z0)?;
        println!("round,z_cadis,z_fedavg");
        for (t, (c, f)) in cadis.iter().zip(&fedavg).enumerate() {
            println!("{t},{c:.9},{f:.9}");
        }
    }
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<ExitCode> {
    let cfg = GradCheckConfig {
        trials: args.trials,
        lambda: args.lambda,
        max_batch: args.max_batch,
        tolerance: args.tolerance,
        fault: args.inject_fault.map(|f| match f {
            FaultArg::KdSign => Fault::KdSign,
            FaultArg::ClassifierSign => Fault::ClassifierSign,
        }),
        ..GradCheckConfig::default()
    };
    let report = run_gradcheck(args.seed, &cfg)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for (i, c) in report.cases.iter().enumerate() {
            println!(
                "case {i:>3} layers={:?} batch={} params={} max_rel_error={:.3e} {}",
                c.layer_sizes,
                c.batch,
                c.parameters,
                c.max_rel_error,
                if c.passed { "PASS" } else { "FAIL" }
            );
        }
        let failed = report.cases.iter().filter(|c| !c.passed).count();
        println!(
            "{} of {} cases within {:.0e} (worst {:.3e})",
            report.cases.len() - failed,
            report.cases.len(),
            report.tolerance,
            report.max_rel_error()
        );
    }
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

#[derive(Serialize)]
struct ClientSummary {
    id: usize,
    cluster: usize,
    samples: usize,
    /// Sample count per label present on the client.
    labels: BTreeMap<usize, usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    indices: Option<Vec<usize>>,
}

#[derive(Serialize)]
struct PartitionReport {
    #[serde(flatten)]
    manifest: ShardManifestHeader,
    clients: Vec<ClientSummary>,
}

#[derive(Serialize)]
struct ShardManifestHeader {
    spec: cadis::data::PartitionSpec,
    train_samples: usize,
    classes: usize,
}

fn cmd_partition(args: &PartitionArgs) -> Result<()> {
    let config = args.config.load()?;
    let (train, _) = engine::load_data::<f32>(&config.data)?;
    let shards = cadis::data::partition(&train, &config.partition)?;
    let manifest = ShardManifest {
        spec: config.partition.clone(),
        clients: shards,
    };
    let clients = manifest
        .clients
        .iter()
        .map(|s| {
            let mut labels = BTreeMap::new();
            for &i in &s.indices {
                *labels.entry(train.labels()[i]).or_insert(0) += 1;
            }
            ClientSummary {
                id: s.id,
                cluster: s.cluster,
                samples: s.len(),
                labels,
                indices: args.indices.then(|| s.indices.clone()),
            }
        })
        .collect();
    let report = PartitionReport {
        manifest: ShardManifestHeader {
            spec: manifest.spec,
            train_samples: train.len(),
            classes: train.classes(),
        },
        clients,
    };
    let json = serde_json::to_string_pretty(&report)? + "\n";
    match &args.output {
        Some(path) => write(path, json),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}
