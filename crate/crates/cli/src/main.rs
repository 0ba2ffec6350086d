use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use ilab_core::lab::output::{self, Series};
use ilab_core::lab::{self, ExperimentConfig, SweepResult};
use ilab_core::IlabError;

#[derive(Parser)]
#[command(name = "ilab", version, about = "Stochastic-interpolant ODE sampler laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form velocity against the Monte-Carlo oracle, derivatives
    /// against finite differences, and the transport-equation residual.
    VelocityCheck(Opts),
    /// Terminal TV against h for each integrator, with slope fits.
    Convergence(Opts),
    /// Terminal TV against dimension at fixed h.
    DimSweep(Opts),
    /// Pushed ensemble and exact target samples.
    Sample(Opts),
    /// Print a time grid and its statistics.
    Schedule(Opts),
}

#[derive(clap::Args)]
struct Opts {
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Directory for CSV/SVG files; CSV goes to stdout when omitted.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Also write log-log SVG plots (needs --out).
    #[arg(long)]
    svg: bool,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; falls back to ILAB_THREADS.
    #[arg(long)]
    threads: Option<usize>,
}

const EXIT_TOLERANCE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<IlabError>() {
        Some(e) => e.exit_code() as u8,
        None => EXIT_NUMERICAL,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(opts: &Opts) -> anyhow::Result<ExperimentConfig> {
    let text = fs::read_to_string(&opts.config)
        .map_err(|e| IlabError::Config(format!("cannot read {}: {e}", opts.config.display())))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn thread_count(opts: &Opts) -> anyhow::Result<Option<usize>> {
    if let Some(n) = opts.threads {
        return Ok(Some(n));
    }
    match std::env::var("ILAB_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| IlabError::Config(format!("ILAB_THREADS must be a positive integer, got '{v}'")).into()),
        Err(_) => Ok(None),
    }
}

struct Sink {
    dir: Option<PathBuf>,
}

impl Sink {
    fn new(opts: &Opts) -> anyhow::Result<Self> {
        let dir = opts.out.clone();
        if let Some(d) = &dir {
            fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
        }
        Ok(Sink { dir })
    }

    /// Writes `name` under the output directory, or `text` to stdout.
    fn emit(&self, name: &str, text: &str) -> anyhow::Result<()> {
        match &self.dir {
            Some(d) => write_file(&d.join(name), text),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }

    fn plot(&self, name: &str, text: &str) -> anyhow::Result<()> {
        match &self.dir {
            Some(d) => write_file(&d.join(name), text),
            None => {
                log::warn!("--svg needs --out; skipping {name}");
                Ok(())
            }
        }
    }
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).map_err(IlabError::Io)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn run(command: Command) -> anyhow::Result<u8> {
    let opts = match &command {
        Command::VelocityCheck(o)
        | Command::Convergence(o)
        | Command::DimSweep(o)
        | Command::Sample(o)
        | Command::Schedule(o) => o,
    };
    let cfg = match load_config(opts) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return Ok(EXIT_CONFIG);
        }
    };
    if let Some(n) = thread_count(opts)? {
        if n == 0 {
            return Err(IlabError::Config("thread count must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let sink = Sink::new(opts)?;
    let stamp = output::timestamp_line();
    let ts = Some(stamp.as_str());
    let hash = cfg.config_hash();
    eprintln!("config {hash} ({})", cfg.task_name());

    match command {
        Command::VelocityCheck(_) => {
            let report = lab::velocity_check(&cfg)?;
            for panel in [
                lab::Panel::Oracle,
                lab::Panel::Jacobian,
                lab::Panel::Score,
                lab::Panel::Divergence,
                lab::Panel::Continuity,
            ] {
                let rows: Vec<_> = report.rows.iter().filter(|r| r.panel == panel).collect();
                let failed = rows.iter().filter(|r| !r.pass).count();
                eprintln!("{:<11} {:>4} probes  {:>3} failed", panel.as_str(), rows.len(), failed);
            }
            eprintln!("max |b| over oracle probes: {:e}", report.max_abs_velocity);
            sink.emit(
                "velocity_check.csv",
                &output::check_csv(&report, &hash, cfg.task_name(), ts),
            )?;
            if report.passed() {
                Ok(0)
            } else {
                for r in report.failures() {
                    eprintln!(
                        "FAIL {} probe {} t={} x={:?}: value {} reference {} tolerance {}",
                        r.panel.as_str(),
                        r.probe,
                        r.t,
                        r.x,
                        r.value,
                        r.reference,
                        r.tolerance
                    );
                }
                Ok(EXIT_TOLERANCE)
            }
        }
        Command::Convergence(_) => {
            let res = lab::convergence(&cfg)?;
            report_sweep(&res, "h");
            sink.emit("convergence.csv", &output::sweep_csv(&res.rows, ts))?;
            if opts.svg {
                sink.plot(
                    "convergence.svg",
                    &sweep_svg(&res, "Terminal TV against step scale", "h", |r| r.h),
                )?;
            }
            Ok(0)
        }
        Command::DimSweep(_) => {
            let res = lab::dim_sweep(&cfg)?;
            report_sweep(&res, "d");
            sink.emit("dim_sweep.csv", &output::sweep_csv(&res.rows, ts))?;
            if opts.svg {
                sink.plot(
                    "dim_sweep.svg",
                    &sweep_svg(&res, "Terminal TV against dimension", "d", |r| r.d as f64),
                )?;
            }
            Ok(0)
        }
        Command::Sample(_) => {
            let out = lab::sample(&cfg)?;
            eprintln!(
                "pushed {} points through {} steps ({} dropped)",
                out.ensemble.len(),
                out.schedule.n_steps(),
                out.ensemble.dropped
            );
            sink.emit("ensemble.csv", &output::ensemble_csv(&out.ensemble, ts))?;
            if sink.dir.is_some() {
                sink.emit("target.csv", &output::points_csv(&out.target, out.ensemble.dim, ts))?;
            }
            Ok(0)
        }
        Command::Schedule(_) => {
            let rep = lab::schedule_report(&cfg)?;
            let s = &rep.schedule;
            eprintln!("kind {}  h {}  N {}", s.kind(), rep.h, s.n_steps());
            eprintln!("t_0 {}  t_N {}", s.start(), s.end());
            eprintln!("max h_k {:e}", rep.max_step);
            eprintln!("max h_k / gamma_bar_k^2 {:e}", rep.max_step_to_variance);
            eprintln!(
                "h_k <= d^-1 gamma_bar_k^2: {}  h_k <= E|x0-x1|^6^(-1/3) ({:.3e}): {}",
                rep.variance_condition,
                rep.sixth_moment.powf(-1.0 / 3.0),
                rep.moment_condition
            );
            eprintln!(
                "N / (h^-1 log(1/delta)) {:.3}",
                s.n_steps() as f64 / rep.predicted_steps
            );
            sink.emit("schedule.csv", &output::schedule_csv(&rep, ts))?;
            Ok(0)
        }
    }
}

fn report_sweep(res: &SweepResult, axis: &str) {
    for r in &res.rows {
        eprintln!(
            "{:<6} {axis}={:<8} N={:<5} tv={:.4e} +- {:.1e}",
            r.integrator,
            if axis == "h" { r.h.to_string() } else { r.d.to_string() },
            r.n_steps,
            r.tv,
            r.tv_stderr
        );
    }
    for f in &res.fits {
        match f.fit {
            Some(fit) => eprintln!(
                "{:<6} slope {:.3} +- {:.3} (95%)  R^2 {:.4}{}",
                f.integrator,
                fit.slope,
                f.ci95,
                fit.r_squared,
                if f.floor { "  [floor]" } else { "" }
            ),
            None => eprintln!("{:<6} no fit{}", f.integrator, if f.floor { "  [floor]" } else { "" }),
        }
    }
}

fn sweep_svg(res: &SweepResult, title: &str, axis: &str, x: impl Fn(&lab::SweepRow) -> f64) -> String {
    let series: Vec<Series> = res
        .fits
        .iter()
        .map(|f| Series {
            name: &f.integrator,
            points: res.rows_for(&f.integrator).map(|r| (x(r), r.tv)).collect(),
            fit: f.fit,
        })
        .collect();
    output::loglog_svg(title, axis, "TV", &series)
}
