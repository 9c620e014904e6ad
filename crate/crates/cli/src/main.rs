use std::fs;
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use dpca::estimator::CovarianceOptions;
use dpca::models::Partition;
use dpca::runtime::{worker_serve_files, worker_serve_tcp, ClusterConfig, TransportKind, Worker};
use dpca_cli::config::{ExperimentConfig, Innovation, Method, ModelKind, Overrides, Preset};
use dpca_cli::error::{CliError, CliResult, EXIT_CONFIG, EXIT_OK, EXIT_VERIFY};
use dpca_cli::experiment::{read_records, sweep, Manifest, SweepOptions, MANIFEST_FILE, RECORDS_FILE};
use dpca_cli::report::write_report;
use dpca_cli::run::{run_once, write_run, DataSource};
use dpca_cli::verify::{run_suite, write_verdict, Suite, VerifyOptions};

#[derive(Parser)]
#[command(name = "dpca", version, about = "One-shot distributed PCA: experiments, sweeps and verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write one binary partition per machine plus a manifest.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Run one estimator on one cell and print the result as JSON.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Partition directory written by `gen`; data are generated on the fly otherwise.
        #[arg(long, conflicts_with = "endpoints")]
        data: Option<PathBuf>,
        /// Already-running workers: host:port per machine (tcp) or the shared directory (files).
        #[arg(long, value_delimiter = ',', requires = "transport")]
        endpoints: Option<Vec<String>>,
        /// Also write run.json and records.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every cell of a grid, resuming from checkpoints, then report.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Ignore any checkpoint in --out.
        #[arg(long)]
        fresh: bool,
        /// Write exact power-law records instead of running estimators (pipeline test mode).
        #[arg(long)]
        synthetic: bool,
        #[arg(long)]
        no_plots: bool,
    },
    /// Run verification suites; exits with 2 if any property fails.
    Verify {
        /// dk, sdp, center, unbiased, adversarial, transport, oracle or all.
        #[arg(default_value = "all", value_delimiter = ',')]
        suites: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Reduced case counts for smoke testing.
        #[arg(long)]
        quick: bool,
        /// Write <suite>.json verdicts and failing cases here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summaries, fits and plots from an existing records.csv.
    Report {
        /// A sweep directory or a records CSV file.
        input: PathBuf,
        /// Defaults to the input directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        no_plots: bool,
    },
    /// Serve one partition to a coordinator until stopped.
    Worker {
        /// Partition file written by `gen`.
        #[arg(long)]
        partition: PathBuf,
        #[arg(long, value_parser = parse_transport)]
        transport: TransportKind,
        /// Listen address for tcp.
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
        /// Shared directory for files.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn parse_transport(s: &str) -> Result<TransportKind, String> {
    s.parse().map_err(|e: dpca::Error| e.to_string())
}

#[derive(Args, Clone, Debug, Default)]
struct ConfigArgs {
    /// JSON experiment config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// scaling, splitting, comparison or adversarial.
    #[arg(long)]
    preset: Option<Preset>,
    /// Use the full-size grids of the chosen preset.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long, value_delimiter = ',')]
    d: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    m: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    lambda: Option<Vec<f64>>,
    #[arg(long)]
    k: Option<usize>,
    /// DP, FP or DP<x>; comma-separated for sweeps.
    #[arg(long, value_delimiter = ',')]
    method: Option<Vec<Method>>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// inmemory, files or tcp: run DP through spawned workers.
    #[arg(long, value_parser = parse_transport)]
    transport: Option<TransportKind>,
    /// Aggregate over responding machines when some fail (not the plain estimator).
    #[arg(long)]
    allow_partial: bool,
    /// spiked or adversarial.
    #[arg(long)]
    model: Option<ModelKind>,
    /// gaussian, rademacher or uniform.
    #[arg(long)]
    innovation: Option<Innovation>,
    /// Also collect averaged Rayleigh quotients in sweeps.
    #[arg(long)]
    eigenvalue_round: bool,
}

impl ConfigArgs {
    fn build(&self, default: Preset) -> CliResult<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => {
                let preset = self.preset.unwrap_or(default);
                let mut c = ExperimentConfig::preset(preset, self.paper_scale);
                if self.preset.is_none() && preset == Preset::Comparison {
                    c.methods = vec![Method::DP];
                }
                c
            }
        };
        config.apply_overrides(&Overrides {
            d: self.d.clone(),
            m: self.m.clone(),
            n: self.n.clone(),
            lambda: self.lambda.clone(),
            k: self.k,
            methods: self.method.clone(),
            reps: self.reps,
            seed: self.seed,
            transport: self.transport,
            allow_partial: self.allow_partial,
            model: self.model,
            innovation: self.innovation,
        });
        if self.eigenvalue_round {
            config.eigenvalue_round = true;
        }
        config.validate()?;
        Ok(config)
    }
}

fn timeout() -> CliResult<Duration> {
    Ok(ClusterConfig::new(1, TransportKind::InMemory).with_env_timeout()?.timeout)
}

fn print_json(value: &impl serde::Serialize) {
    let text = serde_json::to_string_pretty(value).expect("output serializes");
    // A closed pipe (`dpca run | head`) is not an error worth a panic.
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn cmd_verify(suites: &[String], seed: u64, quick: bool, out: Option<&Path>) -> CliResult<i32> {
    let selected: Vec<Suite> = if suites.iter().any(|s| s == "all") {
        Suite::ALL.to_vec()
    } else {
        suites.iter().map(|s| s.parse()).collect::<CliResult<_>>()?
    };
    let opts = VerifyOptions {
        seed,
        quick,
        timeout: timeout()?,
    };
    let mut verdicts = Vec::new();
    for suite in selected {
        log::info!("running suite {suite}");
        let v = run_suite(suite, &opts)?;
        if let Some(dir) = out {
            write_verdict(&v, dir)?;
        }
        eprintln!("{}: {} ({:.1}s)", v.suite, if v.passed { "PASS" } else { "FAIL" }, v.seconds);
        verdicts.push(v);
    }
    let passed = verdicts.iter().all(|v| v.passed);
    print_json(&serde_json::json!({ "passed": passed, "suites": verdicts }));
    Ok(if passed { EXIT_OK } else { EXIT_VERIFY })
}

fn cmd_report(input: &Path, out: Option<&Path>, plots: bool) -> CliResult<i32> {
    let (csv, dir) = if input.is_dir() {
        (input.join(RECORDS_FILE), input.to_path_buf())
    } else {
        (input.to_path_buf(), input.parent().unwrap_or(Path::new(".")).to_path_buf())
    };
    let records = read_records(&csv)?;
    let manifest_path = dir.join(MANIFEST_FILE);
    // Reference bounds need the config, which a sweep directory carries.
    let config = match fs::read_to_string(&manifest_path) {
        Ok(text) => serde_json::from_str::<Manifest>(&text).ok().map(|m| m.config),
        Err(_) => None,
    };
    let out = out.map(Path::to_path_buf).unwrap_or(dir);
    fs::create_dir_all(&out).map_err(|e| CliError::Io { path: out.clone(), source: e })?;
    let summary = write_report(&records, config.as_ref(), &out, plots)?;
    print_json(&summary);
    Ok(EXIT_OK)
}

fn cmd_worker(partition: &Path, transport: TransportKind, listen: &str, dir: Option<&Path>) -> CliResult<i32> {
    let p = Partition::read_binary(partition)?;
    let machine = p.machine();
    let mut worker = Worker::new(p, CovarianceOptions::default())?;
    let stop = AtomicBool::new(false);
    match transport {
        TransportKind::Tcp => {
            let listener = TcpListener::bind(listen).map_err(|e| CliError::Config(format!("cannot listen on {listen}: {e}")))?;
            let addr = listener.local_addr().map_err(|e| CliError::Config(e.to_string()))?;
            // The bound address goes to stdout so scripts can collect endpoints.
            let _ = writeln!(std::io::stdout().lock(), "{addr}");
            log::info!("machine {machine} listening on {addr}");
            worker_serve_tcp(listener, &mut worker, &stop)?;
        }
        TransportKind::Files => {
            let dir = dir.ok_or_else(|| CliError::Config("files transport needs --dir".into()))?;
            fs::create_dir_all(dir).map_err(|e| CliError::Io { path: dir.into(), source: e })?;
            log::info!("machine {machine} serving {}", dir.display());
            worker_serve_files(dir, &mut worker, &stop)?;
        }
        TransportKind::InMemory => return Err(CliError::Config("a standalone worker needs tcp or files".into())),
    }
    Ok(EXIT_OK)
}

fn dispatch(cli: Cli) -> CliResult<i32> {
    match cli.command {
        Command::Gen { config, out } => {
            let config = config.build(Preset::Comparison)?;
            let manifest = dpca_cli::gen::generate(&config, &out)?;
            print_json(&manifest);
            Ok(EXIT_OK)
        }
        Command::Run {
            config,
            data,
            endpoints,
            out,
        } => {
            let transport = config.transport;
            let config = config.build(Preset::Comparison)?;
            let source = match (data, endpoints) {
                (Some(dir), _) => DataSource::Directory(dir),
                (None, Some(endpoints)) => DataSource::Remote {
                    transport: transport.expect("clap requires --transport"),
                    endpoints,
                },
                (None, None) => DataSource::Generated,
            };
            let output = run_once(&config, &source, timeout()?)?;
            if let Some(dir) = out {
                write_run(&output, &dir)?;
            }
            print_json(&output);
            Ok(EXIT_OK)
        }
        Command::Sweep {
            config,
            out,
            fresh,
            synthetic,
            no_plots,
        } => {
            let config = config.build(Preset::Scaling)?;
            let mut opts = SweepOptions::new(out);
            opts.fresh = fresh;
            opts.synthetic = synthetic;
            opts.plots = !no_plots;
            opts.timeout = timeout()?;
            let outcome = sweep(&config, &opts)?;
            log::info!("{} cells computed, {} reused", outcome.computed_cells, outcome.reused_cells);
            print_json(&serde_json::json!({
                "out": opts.out,
                "records": outcome.records.len(),
                "computed_cells": outcome.computed_cells,
                "reused_cells": outcome.reused_cells,
                "fits": outcome.summary.fits,
                "plots": outcome.summary.plots,
            }));
            Ok(EXIT_OK)
        }
        Command::Verify { suites, seed, quick, out } => cmd_verify(&suites, seed, quick, out.as_deref()),
        Command::Report { input, out, no_plots } => cmd_report(&input, out.as_deref(), !no_plots),
        Command::Worker {
            partition,
            transport,
            listen,
            dir,
        } => cmd_worker(&partition, transport, &listen, dir.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let code = match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
