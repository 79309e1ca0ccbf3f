//! `sade`: run, sweep, compare and check from the command line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 run failure,
//! 4 acceptance failure.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sade_core::adversary::JamScheduleWriter;
use sade_core::check::{run_acceptance, AcceptanceOptions};
use sade_core::config::{load_config, Config, ExperimentKind};
use sade_core::engine::{run_with, RoundObserver, RoundRecord, RunSummary, Trace, TraceRecorder};
use sade_core::experiment::{compare_protocols, run_experiment, worker_count};
use sade_core::metrics::{write_frames_csv, write_round_aggregates_csv, RoundAggregates, ThroughputAccumulator};
use sade_core::trace_io::{encode_trace, write_trace_csv};
use sade_core::Error;

#[derive(Parser)]
#[command(name = "sade", version, about = "SINR medium access simulator with adversarial jamming")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and print its summary.
    Run(RunArgs),
    /// Run the configured experiment grid over all seeds.
    Sweep(SweepArgs),
    /// Pair SADE against the backoff baseline on identical jam schedules.
    Compare(Overrides),
    /// Run the acceptance criteria.
    Check(CheckArgs),
    /// Print the effective configuration.
    Config(Overrides),
}

#[derive(Clone, Copy, ValueEnum)]
enum JammerArg {
    None,
    Reg,
    Bur,
    Const,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Sade,
    Backoff,
}

#[derive(Args, Clone)]
struct Overrides {
    /// TOML configuration file; omitted keys take their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<u64>,
    #[arg(long, value_enum)]
    jammer: Option<JammerArg>,
    #[arg(long, value_enum)]
    protocol: Option<ProtocolArg>,
    /// Override any key, e.g. `--set nodes=1000` or
    /// `--set experiment.nodes=[250,500]`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Per-round trace as CSV.
    #[arg(long)]
    trace_csv: Option<PathBuf>,
    /// Per-round trace in the binary framing.
    #[arg(long)]
    trace_bin: Option<PathBuf>,
    /// Jam schedule as `round,node,noise` CSV.
    #[arg(long)]
    jam_csv: Option<PathBuf>,
    /// Aggregate probability series as CSV.
    #[arg(long)]
    series_csv: Option<PathBuf>,
    /// Per-frame counts as CSV; frame length from the `frame` key or the
    /// whole run.
    #[arg(long)]
    frames_csv: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Experiment kind, overriding `experiment.kind`.
    #[arg(long)]
    kind: Option<String>,
    /// Output root, overriding `experiment.out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    /// Number of seeds per configuration, starting at 1.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Run only these criteria (comma separated).
    #[arg(long, value_delimiter = ',')]
    only: Vec<u8>,
}

enum Failure {
    Config(String),
    Run(String),
    Acceptance,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Topology(_) => Failure::Config(e.to_string()),
            other => Failure::Run(other.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Failure::Run(format!("{}: {e}", path.display()))
}

fn resolve(o: &Overrides) -> Result<Config, Failure> {
    let mut cfg = match &o.config {
        Some(path) => load_config(path).map_err(|e| match e {
            Error::Io { .. } => Failure::Config(e.to_string()),
            other => Failure::from(other),
        })?,
        None => Config::default(),
    };
    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            pairs.push((k.to_string(), v));
        }
    };
    push("alpha", o.alpha.map(|x| format!("{x:?}")));
    push("epsilon", o.epsilon.map(|x| format!("{x:?}")));
    push("seed", o.seed.map(|x| x.to_string()));
    push("rounds", o.rounds.map(|x| x.to_string()));
    push(
        "jammer",
        o.jammer.map(|j| {
            match j {
                JammerArg::None => "none",
                JammerArg::Reg => "reg",
                JammerArg::Bur => "bur",
                JammerArg::Const => "const",
            }
            .to_string()
        }),
    );
    push(
        "protocol",
        o.protocol.map(|p| {
            match p {
                ProtocolArg::Sade => "sade",
                ProtocolArg::Backoff => "backoff",
            }
            .to_string()
        }),
    );
    for kv in &o.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::Config(format!("--set {kv}: expected KEY=VALUE")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    for (k, v) in pairs {
        cfg.apply_override(&k, &v).map_err(|e| Failure::Config(e.to_string()))?;
    }
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| io_failure(path, e))
}

/// Streams the jam schedule, keeping the first write error.
struct JamObserver {
    writer: Option<JamScheduleWriter<BufWriter<File>>>,
    error: Option<io::Error>,
}

impl RoundObserver for JamObserver {
    fn on_round(&mut self, r: &RoundRecord<'_>) {
        if let (Some(w), None) = (self.writer.as_mut(), self.error.as_ref()) {
            if let Err(e) = w.write_round(r.round, r.noise) {
                self.error = Some(e);
            }
        }
    }
}

fn print_summary(s: &RunSummary) {
    let opt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.6}"));
    println!("seed                   {}", s.seed);
    println!("nodes                  {}", s.nodes);
    println!("rounds                 {}", s.rounds);
    println!("simulation_throughput  {}", opt(s.simulation_throughput));
    println!("excluded_nodes         {}", s.excluded_nodes);
    println!("competitive_throughput {:.6}{}", s.competitive_throughput, if s.vacuous { " (vacuous)" } else { "" });
    println!("receptions             {}", s.receptions);
    println!("aggregate_p            {:.6} -> {:.6}", s.aggregate_p_initial, s.aggregate_p_final);
    println!("trace_hash             {}", s.trace_hash);
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let cfg = resolve(&args.overrides)?;
    let sim = cfg.to_sim()?;
    let mut aggregates = RoundAggregates::default();
    let mut acc = ThroughputAccumulator::new(0, &sim.physical).with_frames(cfg.frame.unwrap_or(sim.rounds));
    let mut jam = JamObserver { writer: None, error: None };
    if let Some(path) = &args.jam_csv {
        jam.writer = Some(JamScheduleWriter::new(create(path)?).map_err(|e| io_failure(path, e))?);
    }
    let mut recorder = TraceRecorder::default();
    let want_trace = args.trace_csv.is_some() || args.trace_bin.is_some();
    let out = {
        let mut observers: Vec<&mut dyn RoundObserver> = Vec::new();
        if args.series_csv.is_some() {
            observers.push(&mut aggregates);
        }
        if args.frames_csv.is_some() {
            observers.push(&mut acc);
        }
        if args.jam_csv.is_some() {
            observers.push(&mut jam);
        }
        if want_trace {
            observers.push(&mut recorder);
        }
        run_with(&sim, &mut observers)?
    };
    let summary = out.summary.clone();
    if want_trace {
        let trace = Trace {
            config: sim,
            scenario: out.scenario,
            records: recorder.records,
            initial_states: out.initial_states,
            final_states: out.final_states,
            summary: out.summary,
        };
        if let Some(path) = &args.trace_csv {
            write_trace_csv(&trace, create(path)?).map_err(|e| io_failure(path, e))?;
        }
        if let Some(path) = &args.trace_bin {
            std::fs::write(path, encode_trace(&trace)).map_err(|e| io_failure(path, e))?;
        }
    }
    if let Some(path) = &args.jam_csv {
        if let Some(e) = jam.error.take() {
            return Err(io_failure(path, e));
        }
        if let Some(w) = jam.writer.take() {
            w.finish().map_err(|e| io_failure(path, e))?;
        }
    }
    if let Some(path) = &args.series_csv {
        write_round_aggregates_csv(&aggregates.rows, create(path)?).map_err(|e| io_failure(path, e))?;
    }
    if let Some(path) = &args.frames_csv {
        write_frames_csv(acc.frames(), create(path)?).map_err(|e| io_failure(path, e))?;
    }
    print_summary(&summary);
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), Failure> {
    let mut cfg = resolve(&args.overrides)?;
    if let Some(kind) = &args.kind {
        cfg.apply_override("experiment.kind", kind).map_err(|e| Failure::Config(e.to_string()))?;
    }
    if let Some(out) = &args.out {
        cfg.experiment.out = out.clone();
    }
    eprintln!(
        "{}: {} seeds on {} workers",
        cfg.experiment.kind.name(),
        cfg.seeds,
        worker_count()
    );
    let report = run_experiment(&cfg)?;
    println!("{:<24} {:>5} {:>12} {:>10}", "cell", "runs", "throughput", "stddev");
    for c in &report.manifest.cells {
        if c.throughput.count == 0 {
            println!("{:<24} {:>5} {:>12} {:>10}", c.name, c.runs.len(), "n/a", "n/a");
        } else {
            println!("{:<24} {:>5} {:>12.6} {:>10.6}", c.name, c.runs.len(), c.throughput.mean, c.throughput.stddev);
        }
    }
    if cfg.experiment.kind == ExperimentKind::BaselineCompare {
        print_pairs(&report.pairs);
    }
    println!("results in {}", report.dir.display());
    if report.succeeded() {
        Ok(())
    } else {
        for f in &report.manifest.failures {
            eprintln!("failed: cell {} seed {}: {}", f.cell, f.seed, f.error);
        }
        Err(Failure::Run(format!("{} runs failed", report.manifest.failures.len())))
    }
}

fn print_pairs(pairs: &[sade_core::experiment::PairedRun]) {
    let mut eps: Vec<f64> = pairs.iter().map(|p| p.epsilon).collect();
    eps.dedup();
    println!("{:>10} {:>12} {:>12} {:>6}", "epsilon", "sade", "backoff", "pairs");
    for e in eps {
        let rows: Vec<_> = pairs.iter().filter(|p| p.epsilon == e).collect();
        let mean = |f: &dyn Fn(&&sade_core::experiment::PairedRun) -> Option<f64>| {
            let v: Vec<f64> = rows.iter().filter_map(f).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        };
        println!("{e:>10.4} {:>12.6} {:>12.6} {:>6}", mean(&|p| p.sade), mean(&|p| p.backoff), rows.len());
    }
}

fn cmd_compare(o: &Overrides) -> Result<(), Failure> {
    let cfg = resolve(o)?;
    let pairs = compare_protocols(&cfg)?;
    print_pairs(&pairs);
    let mismatched = pairs.iter().filter(|p| !p.same_noise).count();
    if mismatched > 0 {
        return Err(Failure::Run(format!("{mismatched} pairs saw different jam schedules")));
    }
    Ok(())
}

fn cmd_check(args: &CheckArgs) -> Result<(), Failure> {
    if args.seeds < 1 {
        return Err(Failure::Config("--seeds must be >= 1".into()));
    }
    let opts = AcceptanceOptions { seeds: (1..=args.seeds).collect(), only: args.only.clone(), workers: worker_count() };
    let results = run_acceptance(&opts)?;
    let mut all = true;
    for r in &results {
        println!("{}", r.line());
        all &= r.passed;
    }
    if all {
        Ok(())
    } else {
        Err(Failure::Acceptance)
    }
}

fn cmd_config(o: &Overrides) -> Result<(), Failure> {
    let cfg = resolve(o)?;
    let mut out = io::stdout().lock();
    out.write_all(cfg.to_toml_string().as_bytes()).map_err(|e| Failure::Run(e.to_string()))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Compare(o) => cmd_compare(o),
        Command::Check(a) => cmd_check(a),
        Command::Config(o) => cmd_config(o),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("configuration error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Run(m)) => {
            eprintln!("run failed: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Acceptance) => {
            eprintln!("acceptance check failed");
            ExitCode::from(4)
        }
    }
}
