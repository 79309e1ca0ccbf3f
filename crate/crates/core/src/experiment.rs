//! Parameter sweeps over seeds, with CSV output and a reproduction manifest.
//!
//! Layout under `<out>/<experiment>/`:
//!
//! ```text
//! <cell>/config.toml        effective configuration of the cell
//! <cell>/<seed>.csv         round,aggregate_p,receptions,idle_count
//! <cell>/<seed>.frames.csv  frame,node,f_v,s_v,unjammed   (when `frame` is set)
//! <cell>/<seed>.cells.csv   sub-square breakdown          (het_density)
//! <cell>/<seed>.trace.csv   full trace                    (when `write_traces`)
//! summary.csv               one row per cell, mean and stddev over seeds
//! compare.csv               paired protocol results       (baseline_compare)
//! manifest.json             configuration echo, run hashes, artifact hashes
//! ```
//!
//! Runs execute on a bounded pool (`SADE_WORKERS` threads); files are
//! written afterwards by one collector.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{Config, ExperimentKind, JammerChoice, ProtocolChoice, ScenarioChoice};
use crate::engine::{run_with, RoundObserver, RunOutput, RunSummary, Stats, StoredRound, Trace, TraceRecorder};
use crate::error::{ConfigError, Error};
use crate::metrics::{write_frames_csv, write_round_aggregates_csv, RoundAggregates, ThroughputAccumulator};
use crate::topology::{zone_radii, Position, Topology};
use crate::trace_io::{hex, write_trace_csv};

pub const WORKERS_ENV: &str = "SADE_WORKERS";

/// Worker count from `SADE_WORKERS`, or all cores.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// One grid point of an experiment.
#[derive(Debug, Clone)]
pub struct Cell {
    pub name: String,
    pub config: Config,
    /// Fixed placement overriding the scenario keys.
    pub topology: Option<Topology>,
}

fn short(x: f64) -> String {
    let s = format!("{x:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

/// Two nodes exactly one transmission range apart, jammed at `1.1 * theta`
/// everywhere.
pub fn impossibility_cell(base: &Config) -> Result<Cell, Error> {
    let mut config = base.clone();
    let (r1, _) = zone_radii(&config.physical())?;
    config.jammer = JammerChoice::Const;
    config.budget = Some(1.1 * config.theta);
    config.scenario = ScenarioChoice::File;
    config.topology_file = Some(PathBuf::from("topology.txt"));
    let topology = Topology::new(config.width, config.height, vec![Position::new(0.0, 0.0), Position::new(r1, 0.0)])?;
    Ok(Cell { name: "pair".into(), config, topology: Some(topology) })
}

/// Expands the `[experiment]` grid into cells.
pub fn cells(cfg: &Config) -> Result<Vec<Cell>, Error> {
    cfg.validate()?;
    let ex = &cfg.experiment;
    let plain = |name: String, config: Config| Cell { name, config, topology: None };
    let cells = match ex.kind {
        ExperimentKind::Single | ExperimentKind::Convergence => vec![plain("base".into(), cfg.clone())],
        ExperimentKind::ScaleSweep => {
            let mut out = Vec::new();
            for &alpha in &ex.alphas {
                for &n in &ex.nodes {
                    let side = (n as f64).sqrt();
                    let c = Config { alpha, nodes: n, width: side, height: side, scenario: ScenarioChoice::Uni, ..cfg.clone() };
                    out.push(plain(format!("a{}_n{n}", short(alpha)), c));
                }
            }
            out
        }
        ExperimentKind::DensitySweep => ex
            .nodes
            .iter()
            .map(|&n| plain(format!("n{n}"), Config { nodes: n, scenario: ScenarioChoice::Uni, ..cfg.clone() }))
            .collect(),
        ExperimentKind::HetDensity => {
            vec![plain("het".into(), Config { scenario: ScenarioChoice::Het, ..cfg.clone() })]
        }
        ExperimentKind::PowerSweep => {
            ex.powers.iter().map(|&power| plain(format!("p{}", short(power)), Config { power, ..cfg.clone() })).collect()
        }
        ExperimentKind::EpsilonSweep => ex
            .epsilons
            .iter()
            .map(|&epsilon| plain(format!("eps{}", short(epsilon)), Config { epsilon, ..cfg.clone() }))
            .collect(),
        ExperimentKind::BaselineCompare => {
            let mut out = Vec::new();
            for &epsilon in &ex.epsilons {
                for (label, protocol) in [("sade", ProtocolChoice::Sade), ("backoff", ProtocolChoice::Backoff)] {
                    out.push(plain(format!("{label}_eps{}", short(epsilon)), Config { epsilon, protocol, ..cfg.clone() }));
                }
            }
            out
        }
        ExperimentKind::Impossibility => vec![impossibility_cell(cfg)?],
    };
    for c in &cells {
        c.config.validate().map_err(|e| ConfigError::invalid(e.key, format!("cell {}: {}", c.name, e.message)))?;
    }
    Ok(cells)
}

struct JobOutput {
    summary: RunSummary,
    files: Vec<(String, Vec<u8>)>,
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<buffer>", e)
}

/// Per-sub-square throughput of a heterogeneous run.
fn subsquare_csv(out: &RunOutput, acc: &ThroughputAccumulator) -> Result<Vec<u8>, Error> {
    let mut buf = Vec::new();
    writeln!(buf, "sub_square,nodes,density,throughput").map_err(io_err)?;
    if let Some(het) = &out.scenario.het {
        let whole = acc.whole_run();
        let area = het.sub_size * het.sub_size;
        for (cell, &count) in het.counts.iter().enumerate() {
            let (mut sum, mut counted) = (0.0, 0usize);
            for (v, &c) in het.cell_of.iter().enumerate() {
                if c == cell && whole.unjammed[v] > 0 {
                    sum += whole.s[v] as f64 / whole.unjammed[v] as f64;
                    counted += 1;
                }
            }
            let thr = if counted > 0 { (sum / counted as f64).to_string() } else { String::new() };
            writeln!(buf, "{cell},{count},{},{thr}", count as f64 / area).map_err(io_err)?;
        }
    }
    Ok(buf)
}

fn run_job(cell: &Cell, seed: u64) -> Result<JobOutput, Error> {
    let config = Config { seed, ..cell.config.clone() };
    let sim = match &cell.topology {
        Some(t) => config.to_sim_on(t.clone())?,
        None => config.to_sim()?,
    };
    let mut aggregates = RoundAggregates::default();
    let mut acc = ThroughputAccumulator::new(0, &sim.physical);
    if let Some(f) = config.frame {
        acc = acc.with_frames(f);
    }
    let mut recorder = TraceRecorder::default();
    let want_frames = config.frame.is_some();
    let want_het = config.experiment.kind == ExperimentKind::HetDensity;
    let want_trace = config.experiment.write_traces;

    let out = {
        let mut observers: Vec<&mut dyn RoundObserver> = vec![&mut aggregates];
        if want_frames || want_het {
            observers.push(&mut acc);
        }
        if want_trace {
            observers.push(&mut recorder);
        }
        run_with(&sim, &mut observers)?
    };

    let dir = &cell.name;
    let mut files = Vec::new();
    let mut buf = Vec::new();
    write_round_aggregates_csv(&aggregates.rows, &mut buf).map_err(io_err)?;
    files.push((format!("{dir}/{seed}.csv"), buf));
    if want_frames {
        let mut buf = Vec::new();
        write_frames_csv(acc.frames(), &mut buf).map_err(io_err)?;
        files.push((format!("{dir}/{seed}.frames.csv"), buf));
    }
    if want_het {
        files.push((format!("{dir}/{seed}.cells.csv"), subsquare_csv(&out, &acc)?));
    }
    if want_trace {
        let records: Vec<StoredRound> = std::mem::take(&mut recorder.records);
        let summary = out.summary.clone();
        let trace = Trace {
            config: sim,
            scenario: out.scenario,
            records,
            initial_states: out.initial_states,
            final_states: out.final_states,
            summary,
        };
        let mut buf = Vec::new();
        write_trace_csv(&trace, &mut buf).map_err(io_err)?;
        files.push((format!("{dir}/{seed}.trace.csv"), buf));
    }
    Ok(JobOutput { summary: out.summary, files })
}

#[derive(Debug, Clone, Serialize)]
pub struct Failure {
    pub cell: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub name: String,
    pub config: String,
    pub runs: Vec<RunSummary>,
    pub throughput: Stats,
    pub competitive: Stats,
}

/// Paired result of both protocols on one seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedRun {
    pub epsilon: f64,
    pub seed: u64,
    pub sade: Option<f64>,
    pub backoff: Option<f64>,
    /// Both runs saw the same jam schedule.
    pub same_noise: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub experiment: String,
    pub seeds: Vec<u64>,
    pub config: String,
    pub cells: Vec<CellResult>,
    pub failures: Vec<Failure>,
    /// SHA-256 of every file written, keyed by path relative to the
    /// experiment directory.
    pub artifacts: Vec<(String, String)>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub pairs: Vec<PairedRun>,
}

impl ExperimentReport {
    pub fn succeeded(&self) -> bool {
        self.manifest.failures.is_empty()
    }
}

fn cell_config_text(cell: &Cell) -> String {
    cell.config.to_toml_string()
}

fn summary_csv(cells: &[CellResult], configs: &[&Config]) -> String {
    let mut s = String::from(
        "cell,protocol,nodes,alpha,power,epsilon,budget,runs,throughput_mean,throughput_stddev,competitive_mean,competitive_stddev,receptions_mean\n",
    );
    for (c, cfg) in cells.iter().zip(configs) {
        let nodes = Stats::of(&c.runs.iter().map(|r| r.nodes as f64).collect::<Vec<_>>()).mean;
        let rec = Stats::of(&c.runs.iter().map(|r| r.receptions as f64).collect::<Vec<_>>()).mean;
        let protocol = match cfg.protocol {
            ProtocolChoice::Sade => "sade",
            ProtocolChoice::Backoff => "backoff",
        };
        let stat = |st: &Stats| if st.count == 0 { (String::new(), String::new()) } else { (st.mean.to_string(), st.stddev.to_string()) };
        let (tm, ts) = stat(&c.throughput);
        let (cm, cs) = stat(&c.competitive);
        s.push_str(&format!(
            "{},{protocol},{nodes},{},{},{},{},{},{tm},{ts},{cm},{cs},{rec}\n",
            c.name,
            cfg.alpha,
            cfg.power,
            cfg.epsilon,
            cfg.budget(),
            c.runs.len(),
        ));
    }
    s
}

/// Matches SADE and backoff runs by `(epsilon, seed)`.
fn pair_runs(cells: &[Cell], results: &[CellResult]) -> Vec<PairedRun> {
    let mut pairs = Vec::new();
    for (i, (cell, res)) in cells.iter().zip(results).enumerate() {
        if cell.config.protocol != ProtocolChoice::Sade {
            continue;
        }
        let partner = cells.iter().zip(results).enumerate().find(|(j, (c, _))| {
            *j != i && c.config.protocol == ProtocolChoice::Backoff && c.config.epsilon == cell.config.epsilon
        });
        let Some((_, (_, other))) = partner else { continue };
        for run in &res.runs {
            if let Some(b) = other.runs.iter().find(|b| b.seed == run.seed) {
                pairs.push(PairedRun {
                    epsilon: cell.config.epsilon,
                    seed: run.seed,
                    sade: run.simulation_throughput,
                    backoff: b.simulation_throughput,
                    same_noise: run.noise_hash == b.noise_hash,
                });
            }
        }
    }
    pairs
}

fn pairs_csv(pairs: &[PairedRun]) -> String {
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
    let mut s = String::from("epsilon,seed,sade_throughput,backoff_throughput,same_noise\n");
    for p in pairs {
        s.push_str(&format!("{},{},{},{},{}\n", p.epsilon, p.seed, opt(p.sade), opt(p.backoff), p.same_noise));
    }
    s
}

fn run_cells(cells: &[Cell], seeds: &[u64], workers: usize) -> Vec<(usize, u64, Result<JobOutput, Error>)> {
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let work = || jobs.par_iter().map(|&(c, s)| (c, s, run_job(&cells[c], s))).collect::<Vec<_>>();
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(work),
        Err(_) => work(),
    }
}

fn write_file(dir: &Path, rel: &str, bytes: &[u8], artifacts: &mut Vec<(String, String)>) -> Result<(), Error> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    artifacts.push((rel.to_string(), hex(&Sha256::digest(bytes))));
    Ok(())
}

/// Runs every cell of `cfg.experiment` over `cfg.seed_list()` and writes
/// results below `cfg.experiment.out`. Failed runs are listed in the
/// manifest rather than aborting the sweep.
pub fn run_experiment(cfg: &Config) -> Result<ExperimentReport, Error> {
    let cells = cells(cfg)?;
    let seeds = cfg.seed_list();
    let outcomes = run_cells(&cells, &seeds, worker_count());

    let dir = cfg.experiment.out.join(cfg.experiment.kind.name());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut artifacts = Vec::new();
    let mut failures = Vec::new();
    let mut runs: Vec<Vec<RunSummary>> = vec![Vec::new(); cells.len()];

    for cell in &cells {
        write_file(&dir, &format!("{}/config.toml", cell.name), cell_config_text(cell).as_bytes(), &mut artifacts)?;
        if let Some(t) = &cell.topology {
            write_file(&dir, &format!("{}/topology.txt", cell.name), t.to_text().as_bytes(), &mut artifacts)?;
        }
    }
    for (c, seed, outcome) in outcomes {
        match outcome {
            Ok(job) => {
                for (rel, bytes) in &job.files {
                    write_file(&dir, rel, bytes, &mut artifacts)?;
                }
                runs[c].push(job.summary);
            }
            Err(e) => failures.push(Failure { cell: cells[c].name.clone(), seed, error: e.to_string() }),
        }
    }

    let results: Vec<CellResult> = cells
        .iter()
        .zip(runs)
        .map(|(cell, runs)| {
            let thr: Vec<f64> = runs.iter().filter_map(|r| r.simulation_throughput).collect();
            let comp: Vec<f64> = runs.iter().map(|r| r.competitive_throughput).collect();
            CellResult {
                name: cell.name.clone(),
                config: cell_config_text(cell),
                throughput: Stats::of(&thr),
                competitive: Stats::of(&comp),
                runs,
            }
        })
        .collect();

    let configs: Vec<&Config> = cells.iter().map(|c| &c.config).collect();
    write_file(&dir, "summary.csv", summary_csv(&results, &configs).as_bytes(), &mut artifacts)?;

    let pairs = if cfg.experiment.kind == ExperimentKind::BaselineCompare {
        let pairs = pair_runs(&cells, &results);
        for p in pairs.iter().filter(|p| !p.same_noise) {
            failures.push(Failure {
                cell: format!("eps{}", short(p.epsilon)),
                seed: p.seed,
                error: "paired runs saw different jam schedules".into(),
            });
        }
        write_file(&dir, "compare.csv", pairs_csv(&pairs).as_bytes(), &mut artifacts)?;
        pairs
    } else {
        Vec::new()
    };

    let manifest = Manifest {
        experiment: cfg.experiment.kind.name().to_string(),
        seeds,
        config: cfg.to_toml_string(),
        cells: results,
        failures,
        artifacts,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    let path = dir.join("manifest.json");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(ExperimentReport { dir, manifest, pairs })
}

/// Runs SADE and the backoff baseline on identical placements and jam
/// schedules for each `epsilon` in the grid and each seed.
pub fn compare_protocols(cfg: &Config) -> Result<Vec<PairedRun>, Error> {
    let base = Config { experiment: crate::config::ExperimentConfig { kind: ExperimentKind::BaselineCompare, ..cfg.experiment.clone() }, ..cfg.clone() };
    let cells = cells(&base)?;
    let seeds = cfg.seed_list();
    let mut runs: Vec<Vec<RunSummary>> = vec![Vec::new(); cells.len()];
    for (c, _, outcome) in run_cells(&cells, &seeds, worker_count()) {
        runs[c].push(outcome?.summary);
    }
    let results: Vec<CellResult> = cells
        .iter()
        .zip(runs)
        .map(|(cell, runs)| CellResult {
            name: cell.name.clone(),
            config: String::new(),
            throughput: Stats::of(&[]),
            competitive: Stats::of(&[]),
            runs,
        })
        .collect();
    Ok(pair_runs(&cells, &results))
}
