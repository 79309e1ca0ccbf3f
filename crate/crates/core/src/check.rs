//! Runtime invariant checking and the acceptance criteria.
//!
//! [`InvariantChecker`] is an observer that audits a run as it happens:
//! budget windows, reception uniqueness, observation soundness against a
//! brute-force recomputation, and SADE state transitions. The acceptance
//! criteria attach it to every run they make.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adversary::{AdversaryConfig, LEDGER_TOLERANCE};
use crate::config::{Config, ScenarioChoice};
use crate::engine::{run_with, JammerKind, RoundObserver, RoundRecord, RunContext, RunSummary, Stats};
use crate::error::Error;
use crate::experiment::{impossibility_cell, worker_count};
use crate::metrics::RoundAggregates;
use crate::protocol::{Action, NodeState, Protocol, SadeParams, P_FLOOR};
use crate::sinr::{interference_at, Channel, NoiseVector, Observation, PhysicalConfig, RoundActivity};
use crate::topology::{GridIndex, Position, Topology};
use crate::NodeId;

/// Relative margin within which an offline recomputation may disagree with
/// the engine on a threshold comparison.
const AMBIGUITY: f64 = 1e-9;
const MAX_MESSAGES: usize = 8;

/// Counts of everything [`InvariantChecker`] audited.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InvariantReport {
    pub rounds: u64,
    pub windows: u64,
    /// Windows whose spend exceeded `B * T` at some node.
    pub ledger_over: u64,
    /// Full windows of a budget-exact jammer that missed `B * T`.
    pub ledger_inexact: u64,
    /// Node-rounds whose trailing `T` rounds exceeded `B * T`; counted only
    /// with [`InvariantChecker::with_sliding_windows`].
    pub sliding_over: u64,
    /// Listener-rounds in which two senders both met the SINR threshold.
    pub multi_decodable: u64,
    /// Observations contradicting the offline recomputation.
    pub unsound: u64,
    /// Disagreements within [`AMBIGUITY`] of a threshold.
    pub ambiguous: u64,
    /// SADE transitions with an illegal `p` or `T_est`.
    pub bad_transitions: u64,
    pub p_changes: u64,
    pub messages: Vec<String>,
}

impl InvariantReport {
    pub fn merge(&mut self, other: &InvariantReport) {
        self.rounds += other.rounds;
        self.windows += other.windows;
        self.ledger_over += other.ledger_over;
        self.ledger_inexact += other.ledger_inexact;
        self.sliding_over += other.sliding_over;
        self.multi_decodable += other.multi_decodable;
        self.unsound += other.unsound;
        self.ambiguous += other.ambiguous;
        self.bad_transitions += other.bad_transitions;
        self.p_changes += other.p_changes;
        for m in &other.messages {
            if self.messages.len() < MAX_MESSAGES {
                self.messages.push(m.clone());
            }
        }
    }

    pub fn ledger_ok(&self) -> bool {
        self.ledger_over == 0 && self.ledger_inexact == 0
    }

    pub fn uniqueness_ok(&self) -> bool {
        self.multi_decodable == 0 && self.unsound == 0
    }

    pub fn transitions_ok(&self) -> bool {
        self.bad_transitions == 0
    }
}

struct Setup {
    phys: PhysicalConfig,
    adversary: AdversaryConfig,
    exact_budget: bool,
    sade: Option<SadeParams>,
    topology: Topology,
}

/// Audits every round of a run. See the module docs.
#[derive(Default)]
pub struct InvariantChecker {
    setup: Option<Setup>,
    spend: Vec<f64>,
    tx: Vec<usize>,
    power: Vec<f64>,
    rounds_total: u64,
    sliding: Option<Sliding>,
    pub report: InvariantReport,
}

/// Trailing-window spend per node; `history` is round-major, `T` rounds.
struct Sliding {
    history: Vec<f64>,
    sums: Vec<f64>,
}

impl InvariantChecker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Also checks every window of `T` consecutive rounds, not only the
    /// aligned ones. Reg and Bur may legitimately fail this.
    pub fn with_sliding_windows(mut self) -> Self {
        self.sliding = Some(Sliding { history: Vec::new(), sums: Vec::new() });
        self
    }

    fn check_sliding(&mut self, r: &RoundRecord<'_>) {
        let Some(sl) = self.sliding.as_mut() else { return };
        let adv = &self.setup.as_ref().expect("on_start not called").adversary;
        let (window, cap) = (adv.window as usize, adv.window_cap());
        let n = r.noise.len();
        let slot = (r.round as usize % window) * n;
        let mut over = None;
        for (v, &x) in r.noise.iter().enumerate() {
            sl.sums[v] += x - sl.history[slot + v];
            sl.history[slot + v] = x;
            if r.round as usize + 1 >= window && sl.sums[v] > cap + LEDGER_TOLERANCE {
                self.report.sliding_over += 1;
                over.get_or_insert((v, sl.sums[v]));
            }
        }
        if let Some((v, s)) = over {
            self.note(format!("window ending at {}: node {v} spent {s} > {cap}", r.round));
        }
    }

    fn note(&mut self, message: String) {
        if self.report.messages.len() < MAX_MESSAGES {
            self.report.messages.push(message);
        }
    }

    fn check_ledger(&mut self, r: &RoundRecord<'_>, last_round: bool) {
        let setup = self.setup.as_ref().expect("on_start not called");
        let window = setup.adversary.window;
        for (s, &x) in self.spend.iter_mut().zip(r.noise) {
            *s += x;
        }
        let full = (r.round + 1) % window == 0;
        if !full && !last_round {
            return;
        }
        let cap = setup.adversary.window_cap();
        let exact = full && setup.exact_budget;
        let (mut over, mut inexact) = (None, None);
        for (v, &s) in self.spend.iter().enumerate() {
            if s > cap + LEDGER_TOLERANCE {
                over.get_or_insert((v, s));
            }
            if exact && (s - cap).abs() > LEDGER_TOLERANCE {
                inexact.get_or_insert((v, s));
            }
        }
        self.report.windows += 1;
        let start = r.round + 1 - (r.round % window + 1);
        if let Some((v, s)) = over {
            self.report.ledger_over += 1;
            self.note(format!("window at {start}: node {v} spent {s} > {cap}"));
        }
        if let Some((v, s)) = inexact {
            self.report.ledger_inexact += 1;
            self.note(format!("window at {start}: node {v} spent {s} != {cap}"));
        }
        self.spend.iter_mut().for_each(|s| *s = 0.0);
    }

    fn check_observations(&mut self, r: &RoundRecord<'_>) {
        let setup = self.setup.as_ref().expect("on_start not called");
        let phys = setup.phys;
        let topo = &setup.topology;
        self.tx.clear();
        self.tx.extend(r.actions.iter().enumerate().filter(|(_, a)| **a == Action::Transmit).map(|(v, _)| v));
        let (w, h) = (topo.width(), topo.height());
        let positions = topo.positions();
        let mut findings: Vec<(String, bool)> = Vec::new();
        let mut multi = 0u64;
        for (v, (&action, &obs)) in r.actions.iter().zip(r.observations).enumerate() {
            if action == Action::Transmit {
                if obs != Observation::Sent {
                    findings.push((format!("round {}: node {v} transmitted but observed {obs:?}", r.round), false));
                }
                continue;
            }
            if obs == Observation::Sent {
                findings.push((format!("round {}: node {v} listened but observed Sent", r.round), false));
                continue;
            }
            let here = positions[v];
            self.power.clear();
            let (mut total, mut first, mut second) = (r.noise[v], None::<usize>, None::<usize>);
            for (i, &u) in self.tx.iter().enumerate() {
                let p = oracle_power(&phys, here, positions[u], w, h);
                self.power.push(p);
                total += p;
                if first.map_or(true, |f| p > self.power[f]) {
                    second = first;
                    first = Some(i);
                } else if second.map_or(true, |s| p > self.power[s]) {
                    second = Some(i);
                }
            }
            let margin = |p: f64| {
                let denom = total - p;
                if denom <= 0.0 {
                    f64::INFINITY
                } else {
                    p / denom / phys.beta - 1.0
                }
            };
            // Margin grows with p, so only the two strongest senders can be decodable.
            let decodable = |i: &usize| margin(self.power[*i]) >= 0.0;
            if first.filter(decodable).is_some() && second.filter(decodable).is_some() {
                multi += 1;
            }
            let expected = match first.filter(decodable) {
                Some(i) => Observation::Received(NodeId::from(self.tx[i])),
                None if total >= phys.theta => Observation::Busy,
                None => Observation::Idle,
            };
            if expected == obs {
                continue;
            }
            let near_sinr = |u: NodeId| {
                self.tx.iter().position(|&t| t == u.index()).map_or(false, |i| margin(self.power[i]).abs() < AMBIGUITY)
            };
            let near_sense = ((total - phys.theta) / phys.theta).abs() < AMBIGUITY;
            let ambiguous = match (expected, obs) {
                (Observation::Received(u), Observation::Received(x)) => near_sinr(u) && near_sinr(x),
                (Observation::Received(u), _) => near_sinr(u) && (obs == Observation::Busy || near_sense),
                (_, Observation::Received(x)) => near_sinr(x),
                _ => near_sense,
            };
            findings.push((format!("round {}: node {v} observed {obs:?}, recomputed {expected:?}", r.round), ambiguous));
        }
        self.report.multi_decodable += multi;
        for (message, ambiguous) in findings {
            if ambiguous {
                self.report.ambiguous += 1;
            } else {
                self.report.unsound += 1;
                self.note(message);
            }
        }
    }

    fn check_transitions(&mut self, r: &RoundRecord<'_>) {
        let Some(params) = self.setup.as_ref().and_then(|s| s.sade) else { return };
        let g = 1.0 + params.gamma;
        let mut bad = Vec::new();
        let mut changes = 0;
        for (v, (before, after)) in r.states_before.iter().zip(r.states_after).enumerate() {
            let (NodeState::Sade(b), NodeState::Sade(a)) = (before, after) else {
                bad.push(format!("round {}: node {v} is not running SADE", r.round));
                continue;
            };
            for s in [b, a] {
                if !(s.p > 0.0 && s.p <= params.p_hat) || s.t_est < 1 {
                    bad.push(format!("round {}: node {v} has p = {}, T = {}", r.round, s.p, s.t_est));
                }
            }
            if a.p != b.p {
                changes += 1;
                // Receive and window wrap may both divide in one round.
                let legal = [b.p / g, b.p / g / g, b.p * g, params.p_hat, P_FLOOR];
                if !legal.contains(&a.p) {
                    bad.push(format!("round {}: node {v} p {} -> {} is not a (1+gamma) step", r.round, b.p, a.p));
                }
            }
            if a.t_est.abs_diff(b.t_est) > 2 {
                bad.push(format!("round {}: node {v} T {} -> {}", r.round, b.t_est, a.t_est));
            }
        }
        self.report.p_changes += changes;
        self.report.bad_transitions += bad.len() as u64;
        for m in bad {
            self.note(m);
        }
    }
}

/// Received power recomputed from coordinates as P·d^(−α), with `powi`
/// for integral α.
fn oracle_power(phys: &PhysicalConfig, a: Position, b: Position, w: f64, h: f64) -> f64 {
    let dx = (a.x - b.x).abs();
    let dy = (a.y - b.y).abs();
    let (dx, dy) = (dx.min(w - dx), dy.min(h - dy));
    let d = (dx * dx + dy * dy).sqrt();
    if phys.alpha.fract() == 0.0 && phys.alpha.abs() <= 64.0 {
        phys.power / d.powi(phys.alpha as i32)
    } else {
        phys.power * d.powf(-phys.alpha)
    }
}

impl RoundObserver for InvariantChecker {
    fn on_start(&mut self, ctx: &RunContext<'_>) {
        let n = ctx.scenario.topology.len();
        self.setup = Some(Setup {
            phys: ctx.config.physical,
            adversary: ctx.config.adversary,
            exact_budget: matches!(ctx.config.jammer, JammerKind::Reg(_) | JammerKind::Bur),
            sade: match ctx.scenario.protocol {
                Protocol::Sade(p) => Some(p),
                Protocol::Backoff(_) => None,
            },
            topology: ctx.scenario.topology.clone(),
        });
        self.spend = vec![0.0; n];
        if let Some(sl) = self.sliding.as_mut() {
            sl.history = vec![0.0; n * ctx.config.adversary.window as usize];
            sl.sums = vec![0.0; n];
        }
        self.rounds_total = ctx.config.rounds;
        self.report = InvariantReport::default();
    }

    fn on_round(&mut self, r: &RoundRecord<'_>) {
        self.report.rounds += 1;
        let last = r.round + 1 == self.rounds_total;
        self.check_ledger(r, last);
        self.check_sliding(r);
        self.check_observations(r);
        self.check_transitions(r);
    }
}

/// Outcome of one acceptance criterion.
#[derive(Debug, Clone, PartialEq)]
pub struct CriterionResult {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!("criterion {:>2} {:<28} {}  {}", self.id, self.name, if self.passed { "PASS" } else { "FAIL" }, self.detail)
    }
}

#[derive(Debug, Clone)]
pub struct AcceptanceOptions {
    pub seeds: Vec<u64>,
    /// Criteria to run; all when empty. Criteria 7 to 10 audit whatever
    /// runs the selected criteria made.
    pub only: Vec<u8>,
    pub workers: usize,
}

impl Default for AcceptanceOptions {
    fn default() -> Self {
        Self { seeds: (1..=10).collect(), only: Vec::new(), workers: worker_count() }
    }
}

/// Result of one audited run.
#[derive(Debug, Clone)]
pub struct CheckedRun {
    pub summary: RunSummary,
    pub report: InvariantReport,
    pub aggregates: Option<RoundAggregates>,
}

/// Runs `sim` with an [`InvariantChecker`] attached.
pub fn checked_run(sim: &crate::engine::SimConfig, keep_aggregates: bool) -> Result<CheckedRun, Error> {
    let mut checker = InvariantChecker::new();
    let mut aggregates = RoundAggregates::default();
    let summary = if keep_aggregates {
        run_with(sim, &mut [&mut checker, &mut aggregates])?.summary
    } else {
        run_with(sim, &mut [&mut checker])?.summary
    };
    Ok(CheckedRun { summary, report: checker.report, aggregates: keep_aggregates.then_some(aggregates) })
}

/// Audited runs of every acceptance configuration, plus determinism
/// re-runs.
#[derive(Debug, Default)]
pub struct Audit {
    pub report: InvariantReport,
    pub runs: u64,
    pub reruns: u64,
    pub hash_mismatches: Vec<String>,
}

impl Audit {
    fn absorb(&mut self, runs: &[CheckedRun]) {
        for r in runs {
            self.report.merge(&r.report);
            self.runs += 1;
        }
    }
}

fn pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().expect("thread pool")
}

fn batch(
    configs: &[crate::engine::SimConfig],
    keep_aggregates: bool,
    workers: usize,
) -> Result<Vec<CheckedRun>, Error> {
    pool(workers).install(|| configs.par_iter().map(|c| checked_run(c, keep_aggregates)).collect())
}

/// Re-runs the first configuration of a family and compares trace hashes.
fn rerun(audit: &mut Audit, label: &str, config: &crate::engine::SimConfig, first: &CheckedRun) -> Result<(), Error> {
    let again = run_with(config, &mut [])?.summary;
    audit.reruns += 1;
    if again.trace_hash != first.summary.trace_hash {
        audit.hash_mismatches.push(format!("{label} seed {}", config.seed));
    }
    Ok(())
}

fn with_seeds(base: &Config, seeds: &[u64]) -> Result<Vec<crate::engine::SimConfig>, Error> {
    seeds.iter().map(|&seed| Config { seed, ..base.clone() }.to_sim()).collect()
}

fn mean_throughput(runs: &[CheckedRun]) -> f64 {
    Stats::of(&runs.iter().map(|r| r.summary.throughput_or_zero()).collect::<Vec<_>>()).mean
}

fn criterion(id: u8, name: &'static str, passed: bool, detail: String) -> CriterionResult {
    CriterionResult { id, name, passed, detail }
}

/// Criteria 1 and 4 share the default runs.
fn defaults(opts: &AcceptanceOptions, audit: &mut Audit, want: impl Fn(u8) -> bool) -> Result<Vec<CriterionResult>, Error> {
    let base = Config::default();
    let configs = with_seeds(&base, &opts.seeds)?;
    let runs = batch(&configs, true, opts.workers)?;
    audit.absorb(&runs);
    rerun(audit, "defaults", &configs[0], &runs[0])?;
    let mut out = Vec::new();
    if want(1) {
        let thr = mean_throughput(&runs);
        out.push(criterion(
            1,
            "throughput reproduction",
            (0.30..=0.50).contains(&thr),
            format!("mean simulation throughput {thr:.4} over {} seeds, band [0.30, 0.50]", runs.len()),
        ));
    }
    if want(4) {
        let start = base.nodes as f64 * base.p_hat;
        let mut exact_start = true;
        let mut hits = 0;
        let mut crossings = Vec::new();
        for r in &runs {
            let rows = &r.aggregates.as_ref().expect("aggregates kept").rows;
            exact_start &= ((rows[0].aggregate_p - start) / start).abs() <= 1e-12;
            let limit = 0.25 * start;
            // rows[k] holds the aggregate after k rounds.
            let crossing = rows.iter().skip(1).position(|row| row.aggregate_p < limit).map(|k| k + 1);
            if crossing.is_some_and(|k| k <= 500) {
                hits += 1;
            }
            crossings.push(crossing.map_or("never".to_string(), |k| k.to_string()));
        }
        let need = (opts.seeds.len() * 9).div_ceil(10);
        out.push(criterion(
            4,
            "convergence",
            exact_start && hits >= need,
            format!(
                "start = n*p_hat {}; below 0.25*n*p_hat within 500 rounds on {hits}/{} seeds (need {need}); first crossings [{}]",
                if exact_start { "holds" } else { "FAILS" },
                runs.len(),
                crossings.join(", ")
            ),
        ));
    }
    Ok(out)
}

fn scale(opts: &AcceptanceOptions, audit: &mut Audit) -> Result<CriterionResult, Error> {
    let sizes = [250usize, 500, 1000, 2000];
    let means = |alpha: f64, audit: &mut Audit| -> Result<Vec<f64>, Error> {
        let mut out = Vec::new();
        for &n in &sizes {
            let side = (n as f64).sqrt();
            let base = Config { alpha, nodes: n, width: side, height: side, ..Config::default() };
            let configs = with_seeds(&base, &opts.seeds)?;
            let runs = batch(&configs, false, opts.workers)?;
            audit.absorb(&runs);
            rerun(audit, &format!("scale alpha {alpha} n {n}"), &configs[0], &runs[0])?;
            out.push(mean_throughput(&runs));
        }
        Ok(out)
    };
    let four = means(4.0, audit)?;
    let three = means(3.0, audit)?;
    let spread = four.iter().cloned().fold(f64::MIN, f64::max) - four.iter().cloned().fold(f64::MAX, f64::min);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    let decrease = three[3] <= three[0];
    Ok(criterion(
        2,
        "scale insensitivity",
        spread < 0.10 && decrease,
        format!(
            "alpha 4 [{}] spread {:.2} points (< 10); alpha 3 [{}] thr(2000) <= thr(250): {decrease}",
            fmt(&four),
            spread * 100.0,
            fmt(&three)
        ),
    ))
}

fn heterogeneity(opts: &AcceptanceOptions, audit: &mut Audit) -> Result<CriterionResult, Error> {
    let het = Config { scenario: ScenarioChoice::Het, ..Config::default() };
    let het_configs = with_seeds(&het, &opts.seeds)?;
    let het_runs = batch(&het_configs, false, opts.workers)?;
    audit.absorb(&het_runs);
    rerun(audit, "het", &het_configs[0], &het_runs[0])?;
    let uni_configs: Vec<_> = het_runs
        .iter()
        .map(|r| Config { seed: r.summary.seed, nodes: r.summary.nodes, ..Config::default() }.to_sim())
        .collect::<Result<_, _>>()?;
    let uni_runs = batch(&uni_configs, false, opts.workers)?;
    audit.absorb(&uni_runs);
    rerun(audit, "uni matched", &uni_configs[0], &uni_runs[0])?;
    let (h, u) = (mean_throughput(&het_runs), mean_throughput(&uni_runs));
    let lower = het_runs
        .iter()
        .zip(&uni_runs)
        .filter(|(a, b)| a.summary.throughput_or_zero() < b.summary.throughput_or_zero())
        .count();
    Ok(criterion(
        3,
        "heterogeneity penalty",
        h < u,
        format!("het mean {h:.4} vs uniform mean {u:.4} at matched counts; het lower on {lower}/{} seeds", het_runs.len()),
    ))
}

fn impossibility(opts: &AcceptanceOptions, audit: &mut Audit) -> Result<CriterionResult, Error> {
    let cell = impossibility_cell(&Config::default())?;
    let topology = cell.topology.clone().expect("fixed placement");
    let configs: Vec<_> = opts
        .seeds
        .iter()
        .map(|&seed| Config { seed, ..cell.config.clone() }.to_sim_on(topology.clone()))
        .collect::<Result<_, _>>()?;
    let runs = batch(&configs, false, opts.workers)?;
    audit.absorb(&runs);
    rerun(audit, "impossibility", &configs[0], &runs[0])?;
    let receptions: Vec<u64> = runs.iter().map(|r| r.summary.receptions).collect();
    Ok(criterion(
        5,
        "impossibility regression",
        receptions.iter().all(|&k| k == 0),
        format!("receptions per seed {receptions:?} at distance R1 under constant 1.1*theta"),
    ))
}

/// Largest relative deviation of the library interference sums from a
/// brute-force oracle over one random instance.
fn oracle_instance(rng: &mut ChaCha8Rng) -> Result<f64, Error> {
    let n = rng.gen_range(1..=200usize);
    let width = rng.gen_range(3.0..40.0);
    let height = rng.gen_range(3.0..40.0);
    let alpha = [3.0, 4.0, rng.gen_range(2.1..6.0)][rng.gen_range(0..3)];
    let phys = PhysicalConfig { alpha, power: rng.gen_range(0.5..20.0), ..PhysicalConfig::default() };
    let mut positions: Vec<Position> = Vec::with_capacity(n);
    while positions.len() < n {
        let p = Position::new(rng.gen_range(0.0..width), rng.gen_range(0.0..height));
        if !positions.contains(&p) {
            positions.push(p);
        }
    }
    let topo = Topology::new(width, height, positions)?;
    let index = GridIndex::build(&topo, rng.gen_range(0.5..5.0));
    let q = rng.gen_range(0.0..1.0);
    let tx: Vec<NodeId> = (0..n).filter(|_| rng.gen_bool(q)).map(NodeId::from).collect();
    let noise: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { rng.gen_range(0.0..3.0) } else { 0.0 }).collect();
    let activity = RoundActivity::new(tx.clone(), NoiseVector::from_vec(noise.clone())?)?;

    // A cutoff below the weakest possible contribution keeps sums exact
    // while routing them through the grid buckets.
    let half_diag = (width * width + height * height).sqrt() / 2.0;
    let floor = phys.power * (2.0 * half_diag).powf(-phys.alpha) / 2.0;
    let bucketed = Channel::new(&topo, &index, &phys, &tx).with_cutoff(floor);

    let mut worst: f64 = 0.0;
    for v in 0..n {
        let vid = NodeId::from(v);
        let here = topo.positions()[v];
        let exclude = tx.get(rng.gen_range(0..tx.len().max(1))).copied().filter(|_| rng.gen_bool(0.3));
        let mut expect = noise[v];
        for &u in &tx {
            if u != vid && Some(u) != exclude {
                expect += oracle_power(&phys, here, topo.positions()[u.index()], width, height);
            }
        }
        for got in [
            interference_at(vid, &activity, &topo, &index, &phys, exclude),
            bucketed.interference(vid, noise[v], exclude),
        ] {
            let rel = if expect == 0.0 { got.abs() } else { ((got - expect) / expect).abs() };
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn interference_oracle(seed: u64) -> Result<CriterionResult, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f72_6163_6c65);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        worst = worst.max(oracle_instance(&mut rng)?);
    }
    Ok(criterion(
        6,
        "interference oracle",
        worst <= 1e-12,
        format!("100 instances, worst relative deviation {worst:.3e} (<= 1e-12)"),
    ))
}

/// Runs the selected acceptance criteria. Criteria 7 to 10 audit every run
/// made by the others.
pub fn run_acceptance(opts: &AcceptanceOptions) -> Result<Vec<CriterionResult>, Error> {
    assert!(!opts.seeds.is_empty(), "acceptance needs at least one seed");
    let want = |id: u8| opts.only.is_empty() || opts.only.contains(&id);
    let mut audit = Audit::default();
    let mut results = Vec::new();
    if want(1) || want(4) || (7..=10).any(want) {
        results.extend(defaults(opts, &mut audit, want)?);
    }
    if want(2) {
        results.push(scale(opts, &mut audit)?);
    }
    if want(3) {
        results.push(heterogeneity(opts, &mut audit)?);
    }
    if want(5) || (7..=10).any(want) {
        let r = impossibility(opts, &mut audit)?;
        if want(5) {
            results.push(r);
        }
    }
    if want(6) {
        results.push(interference_oracle(opts.seeds[0])?);
    }
    let rep = &audit.report;
    let first = |cond: bool| if cond || rep.messages.is_empty() { String::new() } else { format!("; first: {}", rep.messages[0]) };
    if want(7) {
        results.push(criterion(
            7,
            "budget ledger",
            rep.ledger_ok(),
            format!(
                "{} windows over {} runs; {} over cap, {} inexact for Reg/Bur{}",
                rep.windows,
                audit.runs,
                rep.ledger_over,
                rep.ledger_inexact,
                first(rep.ledger_ok())
            ),
        ));
    }
    if want(8) {
        results.push(criterion(
            8,
            "reception uniqueness",
            rep.uniqueness_ok(),
            format!(
                "{} rounds; {} listener-rounds with two decodable senders, {} unsound observations, {} within {AMBIGUITY:e} of a threshold{}",
                rep.rounds,
                rep.multi_decodable,
                rep.unsound,
                rep.ambiguous,
                first(rep.uniqueness_ok())
            ),
        ));
    }
    if want(9) {
        results.push(criterion(
            9,
            "determinism",
            audit.hash_mismatches.is_empty(),
            format!("{} re-runs, mismatches {:?}", audit.reruns, audit.hash_mismatches),
        ));
    }
    if want(10) {
        results.push(criterion(
            10,
            "protocol-state invariants",
            rep.transitions_ok(),
            format!("{} probability changes checked, {} illegal{}", rep.p_changes, rep.bad_transitions, first(rep.transitions_ok())),
        ));
    }
    results.sort_by_key(|r| r.id);
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{SimConfig, TopologySpec};

    fn small(jammer: JammerKind) -> SimConfig {
        SimConfig {
            topology: TopologySpec::Uniform { n: 40, width: 6.0, height: 6.0 },
            jammer,
            rounds: 240,
            ..SimConfig::default()
        }
    }

    #[test]
    fn clean_runs_pass_every_audit() {
        for jammer in [JammerKind::None, JammerKind::Bur, JammerKind::Reg(crate::adversary::RegMode::Random), JammerKind::Constant] {
            let r = checked_run(&small(jammer), false).unwrap().report;
            assert!(r.ledger_ok() && r.uniqueness_ok() && r.transitions_ok(), "{jammer:?}: {r:?}");
            assert_eq!(r.rounds, 240);
            assert_eq!(r.windows, 4);
            assert!(r.p_changes > 0);
        }
    }

    #[test]
    fn partial_window_is_only_capped() {
        let cfg = SimConfig { rounds: 250, ..small(JammerKind::Bur) };
        let r = checked_run(&cfg, false).unwrap().report;
        assert_eq!(r.windows, 5);
        assert!(r.ledger_ok());
    }

    #[test]
    fn sliding_windows() {
        let cfg = small(JammerKind::Constant);
        let mut checker = InvariantChecker::new().with_sliding_windows();
        run_with(&cfg, &mut [&mut checker]).unwrap();
        assert_eq!(checker.report.sliding_over, 0);
        assert!(checker.report.ledger_ok());

        // A periodic burst puts one full period in every window of length T.
        let mut checker = InvariantChecker::new().with_sliding_windows();
        run_with(&small(JammerKind::Bur), &mut [&mut checker]).unwrap();
        assert_eq!(checker.report.sliding_over, 0);

        // Random jamming topped up at the end of one window and jammed early
        // in the next overspends the straddling window.
        let mut checker = InvariantChecker::new().with_sliding_windows();
        run_with(&small(JammerKind::Reg(crate::adversary::RegMode::Random)), &mut [&mut checker]).unwrap();
        assert!(checker.report.ledger_ok());
        assert!(checker.report.sliding_over > 0);
    }

    #[test]
    fn oracle_instances_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            assert!(oracle_instance(&mut rng).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn checker_flags_forged_rounds() {
        let cfg = small(JammerKind::None);
        let scenario = crate::engine::Scenario::build(&cfg).unwrap();
        let states = vec![NodeState::Sade(crate::protocol::sade_init(&SadeParams::new(0.1, 1.0 / 24.0).unwrap())); 40];
        let ctx = RunContext { config: &cfg, scenario: &scenario, initial_states: &states };
        let mut checker = InvariantChecker::new();
        checker.on_start(&ctx);
        let mut actions = vec![Action::Listen; 40];
        actions[0] = Action::Transmit;
        // Node 1 claims to decode a node that was silent.
        let mut observations = vec![Observation::Idle; 40];
        observations[0] = Observation::Sent;
        observations[1] = Observation::Received(NodeId(5));
        let mut after = states.clone();
        if let NodeState::Sade(s) = &mut after[2] {
            s.p *= 0.5;
        }
        let noise = vec![0.0; 40];
        let pb = vec![false; 40];
        checker.on_round(&RoundRecord {
            round: 0,
            actions: &actions,
            observations: &observations,
            noise: &noise,
            potentially_busy: &pb,
            states_before: &states,
            states_after: &after,
        });
        assert!(checker.report.unsound >= 1);
        assert_eq!(checker.report.bad_transitions, 1);
    }

    #[test]
    fn subset_of_criteria() {
        let opts = AcceptanceOptions { seeds: vec![1], only: vec![6], workers: 1 };
        let res = run_acceptance(&opts).unwrap();
        assert_eq!(res.len(), 1);
        assert!(res[0].passed, "{}", res[0].line());
    }
}
