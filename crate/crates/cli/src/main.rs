use std::fs;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dopf_core::admm::write_history_csv;
use dopf_core::harness::{
    emit_report, run_sweep, Backend, SweepGrid, SweepResult, SweepSpec, DEFAULT_ALPHA_D,
    DEFAULT_ALPHA_PV, DEFAULT_TOLERANCES,
};
use dopf_core::runtime::{
    agent_run, aggregator_serve, AgentConfig, AggregatorConfig, Latency, LinkModel,
};
use dopf_core::{build_case, scale_mix, AdmmConfig, Case, Horizon, Template};

#[derive(Parser)]
#[command(
    name = "dopf",
    version,
    about = "Distributed OPF for prosumer coordination with consensus ADMM"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a case from a template and write it as JSON.
    Case {
        /// A, B or minimal-<k>.
        #[arg(long, default_value = "A")]
        template: Template,
        /// T1, T2 or a step count.
        #[arg(long, default_value = "T1")]
        horizon: Horizon,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        alpha_d: f64,
        #[arg(long, default_value_t = 1.0)]
        alpha_pv: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a sweep and write CSV and SVG results.
    Sweep {
        kind: SweepArg,
        #[command(flatten)]
        opts: SweepOpts,
    },
    /// Serve one ADMM run to remote agents.
    Aggregator {
        #[arg(long)]
        case: PathBuf,
        #[arg(long, default_value = "0.0.0.0:7401")]
        bind: SocketAddr,
        #[arg(long, default_value_t = 1e-4)]
        eps_abs: f64,
        #[arg(long, default_value_t = 500)]
        k_max: usize,
        /// Write the iteration history here.
        #[arg(long)]
        history: Option<PathBuf>,
        #[command(flatten)]
        link: LinkOpts,
    },
    /// Solve one prosumer's subproblems for an aggregator.
    Agent {
        /// Aggregator address, HOST:PORT.
        #[arg(long)]
        server: String,
        #[arg(long)]
        prosumer_id: u16,
        #[arg(long)]
        case: PathBuf,
        #[command(flatten)]
        link: LinkOpts,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    Tolerance,
    Mix,
    Size,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    InProcess,
    Loopback,
}

#[derive(Args)]
struct SweepOpts {
    /// Template: A, B or minimal-<k>. Size sweeps build minimal-k feeders.
    #[arg(long, default_value = "A")]
    case: Template,
    #[arg(long, default_value = "T1")]
    horizon: Horizon,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Tolerances, descending.
    #[arg(long, value_delimiter = ',')]
    eps: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    alpha_d: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    alpha_pv: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
    sizes: Vec<usize>,
    /// Give every prosumer of a size sweep the first prosumer's data.
    #[arg(long)]
    identical: bool,
    /// Tolerance of size sweep points.
    #[arg(long, default_value_t = 1e-4)]
    eps_abs: f64,
    #[arg(long, value_enum, default_value = "in-process")]
    backend: BackendArg,
    /// Prosumer threads for the in-process backend, 0 for all cores.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    #[command(flatten)]
    link: LinkOpts,
}

#[derive(Args)]
struct LinkOpts {
    /// Delay every outgoing frame by this many ms.
    #[arg(long)]
    latency_ms: Option<f64>,
    /// Upper end of a uniform delay; `--latency-ms` is the lower end.
    #[arg(long, requires = "latency_ms")]
    latency_hi_ms: Option<f64>,
    /// Drop outgoing frames with this probability.
    #[arg(long, default_value_t = 0.0)]
    loss: f64,
    #[arg(long, default_value_t = 0)]
    link_seed: u64,
}

impl LinkOpts {
    fn model(&self) -> Option<LinkModel> {
        if self.latency_ms.is_none() && self.loss == 0.0 {
            return None;
        }
        let lo = self.latency_ms.unwrap_or(0.0);
        let latency = match self.latency_hi_ms {
            Some(hi) => Latency::Uniform {
                lo_ms: lo,
                hi_ms: hi,
            },
            None => Latency::Fixed { ms: lo },
        };
        Some(LinkModel {
            latency,
            loss: self.loss,
            seed: self.link_seed,
        })
    }
}

fn read_case(path: &PathBuf) -> Result<Case> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Case::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn sweep(kind: SweepArg, o: SweepOpts) -> Result<bool> {
    let grid = match kind {
        SweepArg::Tolerance => {
            SweepGrid::Tolerance(o.eps.clone().unwrap_or_else(|| DEFAULT_TOLERANCES.to_vec()))
        }
        SweepArg::Mix => {
            let ds = o
                .alpha_d
                .clone()
                .unwrap_or_else(|| DEFAULT_ALPHA_D.to_vec());
            let pvs = o
                .alpha_pv
                .clone()
                .unwrap_or_else(|| DEFAULT_ALPHA_PV.to_vec());
            SweepGrid::Mix(
                ds.iter()
                    .flat_map(|&d| pvs.iter().map(move |&pv| (d, pv)))
                    .collect(),
            )
        }
        SweepArg::Size => SweepGrid::Size {
            counts: o.sizes.clone(),
            identical: o.identical,
        },
    };
    let mut spec = SweepSpec::new(o.case, o.horizon, grid);
    spec.seed = o.seed;
    spec.admm = AdmmConfig::new(o.eps_abs);
    spec.backend = match o.backend {
        BackendArg::InProcess => Backend::InProcess { workers: o.workers },
        BackendArg::Loopback => Backend::Loopback {
            link: o.link.model(),
        },
    };
    let (result, failure) = match run_sweep(&spec) {
        Ok(r) => (r, None),
        Err(f) => (f.partial, Some(f.error)),
    };
    let written = emit_report(&result, &o.out)?;
    print_summary(&result);
    log::info!("wrote {} files to {}", written.len(), o.out.display());
    if let Some(e) = failure {
        log::error!("{e}");
        return Ok(false);
    }
    Ok(result
        .rows
        .iter()
        .all(|r| !r.status.starts_with("transport_failure")))
}

fn print_summary(result: &SweepResult) {
    println!(
        "{:<16} {:>5} {:>10} {:>10} {:>9} {:>10} {:>9} {:>9} {:>7} flags",
        "point", "k", "r_max_kW", "r_mean_kW", "gap_%", "objective", "t_9a_ms", "t_9b_ms", "lat_%"
    );
    for r in &result.rows {
        let flags: String = [
            (r.undervoltage, 'U'),
            (r.overvoltage, 'O'),
            (r.feeder_limit, 'F'),
        ]
        .iter()
        .map(|&(on, c)| if on { c } else { '-' })
        .collect();
        let gap = r.gap_pct.map_or("-".into(), |g| format!("{g:.3}"));
        println!(
            "{:<16} {:>5} {:>10.2e} {:>10.2e} {:>9} {:>10.4} {:>9.2} {:>9.2} {:>7.2} {} {}",
            r.label,
            r.iterations,
            r.r_max_kw,
            r.r_mean_kw,
            gap,
            r.objective,
            r.t_9a_ms,
            r.t_9b_ms,
            100.0 * r.latency_share,
            flags,
            r.status
        );
    }
    if let Some(fit) = result.t_9a_fit {
        println!(
            "t_9a ~ {:.3} ms per prosumer + {:.3} ms",
            fit.slope, fit.intercept
        );
    }
}

fn run() -> Result<bool> {
    match Cli::parse().command {
        Command::Case {
            template,
            horizon,
            seed,
            alpha_d,
            alpha_pv,
            out,
        } => {
            let case = scale_mix(&build_case(template, horizon, seed)?, alpha_d, alpha_pv)?;
            fs::write(&out, case.to_json())
                .with_context(|| format!("writing {}", out.display()))?;
            println!(
                "{} buses, {} prosumers, {} steps",
                case.n_buses(),
                case.n_prosumers(),
                case.n_steps()
            );
            Ok(true)
        }
        Command::Sweep { kind, opts } => sweep(kind, opts),
        Command::Aggregator {
            case,
            bind,
            eps_abs,
            k_max,
            history,
            link,
        } => {
            let case = read_case(&case)?;
            let mut admm = AdmmConfig::new(eps_abs);
            admm.k_max = k_max;
            let mut cfg = AggregatorConfig::new(admm);
            cfg.link = link.model();
            let server = aggregator_serve(bind, &case, cfg)?;
            log::info!(
                "waiting for {} agents on {}",
                case.n_prosumers(),
                server.local_addr()
            );
            let result = server.join()?;
            println!(
                "{:?} after {} iterations, objective {:.6}, max |p_hat - p| {:.3e} kW",
                result.status,
                result.iterations(),
                result.objective,
                result.state.max_violation()
            );
            if let Some(path) = history {
                let f = fs::File::create(&path)
                    .with_context(|| format!("creating {}", path.display()))?;
                write_history_csv(&result.history, f)?;
            }
            Ok(result.converged())
        }
        Command::Agent {
            server,
            prosumer_id,
            case,
            link,
        } => {
            let case = read_case(&case)?;
            let Some(addr) = server.to_socket_addrs()?.next() else {
                bail!("{server} does not resolve");
            };
            let cfg = AgentConfig {
                link: link.model(),
                ..AgentConfig::default()
            };
            let report = agent_run(addr, prosumer_id, &case, &cfg)?;
            println!(
                "agent {prosumer_id}: {:?}, {} solves, {} failed",
                report.exit, report.solves, report.failed_solves
            );
            Ok(report.failed_solves == 0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(2)
        }
    }
}
