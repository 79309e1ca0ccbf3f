//! The round loop.
//!
//! Each round runs strictly in this order: the adversary sees a snapshot of
//! all node states and emits noise; every node draws its action; each
//! listener first checks for a decodable message and otherwise senses the
//! channel; states update; observers see the finished round.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{
    bur_jammer, constant_jammer, reg_jammer, Adversary, AdversaryConfig, AdversaryView, JammingStrategy, RegMode,
};
use crate::error::{ConfigError, Error};
use crate::metrics::ThroughputAccumulator;
use crate::protocol::{
    backoff_decide, backoff_init, backoff_update, default_gamma, sade_decide, sade_init, sade_update, Action,
    BackoffParams, NodeState, Protocol, SadeParams,
};
use crate::sinr::{potentially_busy, Channel, Observation, PhysicalConfig};
use crate::topology::{gen_het, gen_uniform, zone_radii, GridIndex, HetLayout, Topology};
use crate::trace_io::{hex, NoiseHasher, TraceHasher};
use crate::NodeId;

/// Independent random streams, one per purpose and per node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Placement,
    Decision,
    Backoff,
    Jamming,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Placement => 0x706c_6163,
            Purpose::Decision => 0x6465_6369,
            Purpose::Backoff => 0x6261_636b,
            Purpose::Jamming => 0x6a61_6d6d,
        }
    }
}

/// A ChaCha stream keyed by `(seed, purpose, node)`. Streams never share
/// state, so draw counts in one cannot shift another.
pub fn rng_substream(seed: u64, node: Option<NodeId>, purpose: Purpose) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&purpose.tag().to_le_bytes());
    let node = node.map_or(u64::MAX, |v| v.0 as u64);
    key[16..24].copy_from_slice(&node.to_le_bytes());
    key[24..].copy_from_slice(b"sadesim\0");
    ChaCha8Rng::from_seed(key)
}

#[derive(Debug, Clone, PartialEq)]
pub enum TopologySpec {
    Uniform { n: usize, width: f64, height: f64 },
    Het { grid_side: usize, sub_size: f64, lambda_min: usize, lambda_max: usize },
    Explicit(Topology),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JammerKind {
    None,
    Reg(RegMode),
    Bur,
    /// Noise equal to the budget at every node in every round.
    Constant,
}

/// Protocol choice before per-instance parameters are resolved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProtocolSpec {
    Sade { gamma: Option<f64>, p_hat: f64 },
    Backoff(BackoffParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub topology: TopologySpec,
    pub physical: PhysicalConfig,
    pub adversary: AdversaryConfig,
    pub jammer: JammerKind,
    pub protocol: ProtocolSpec,
    pub rounds: u64,
    pub seed: u64,
    /// Grid cell size; defaults to the transmission range.
    pub cell_size: Option<f64>,
    /// Far-field truncation threshold; exact sums when `None`.
    pub cutoff: Option<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        let physical = PhysicalConfig::default();
        Self {
            topology: TopologySpec::Uniform { n: 500, width: 25.0, height: 25.0 },
            adversary: AdversaryConfig {
                budget: physical.busy_floor(),
                window: 60,
                epsilon: physical.epsilon,
                uniform: false,
            },
            physical,
            jammer: JammerKind::Reg(RegMode::Random),
            protocol: ProtocolSpec::Sade { gamma: None, p_hat: 1.0 / 24.0 },
            rounds: 3000,
            seed: 1,
            cell_size: None,
            cutoff: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.physical.validate()?;
        self.adversary.validate()?;
        if self.rounds < 1 {
            return Err(ConfigError::invalid("rounds", "must be >= 1"));
        }
        if matches!(self.jammer, JammerKind::Reg(_) | JammerKind::Bur) && self.adversary.epsilon != self.physical.epsilon {
            return Err(ConfigError::invalid("epsilon", "adversary and physical epsilon disagree"));
        }
        match self.protocol {
            ProtocolSpec::Sade { gamma, p_hat } => {
                SadeParams { gamma: gamma.unwrap_or(0.1), p_hat }.validate()?;
            }
            ProtocolSpec::Backoff(b) => b.validate()?,
        }
        if let Some(c) = self.cell_size {
            if !(c.is_finite() && c > 0.0) {
                return Err(ConfigError::invalid("cell_size", "must be > 0"));
            }
        }
        if let Some(c) = self.cutoff {
            if !(c.is_finite() && c > 0.0) {
                return Err(ConfigError::invalid("cutoff", "must be > 0"));
            }
        }
        Ok(())
    }
}

/// A placed instance: topology, index and resolved protocol.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub topology: Topology,
    pub index: GridIndex,
    pub het: Option<HetLayout>,
    pub protocol: Protocol,
    pub r1: f64,
}

impl Scenario {
    pub fn build(config: &SimConfig) -> Result<Self, Error> {
        config.validate()?;
        let mut rng = rng_substream(config.seed, None, Purpose::Placement);
        let (topology, het) = match &config.topology {
            TopologySpec::Uniform { n, width, height } => (gen_uniform(*n, *width, *height, &mut rng)?, None),
            TopologySpec::Het { grid_side, sub_size, lambda_min, lambda_max } => {
                let layout = gen_het(*grid_side, *sub_size, *lambda_min, *lambda_max, &mut rng)?;
                (layout.topology.clone(), Some(layout))
            }
            TopologySpec::Explicit(t) => (t.clone(), None),
        };
        let (r1, _) = zone_radii(&config.physical)?;
        let index = GridIndex::build(&topology, config.cell_size.unwrap_or(r1));
        let protocol = match config.protocol {
            ProtocolSpec::Sade { gamma, p_hat } => {
                let gamma = gamma.unwrap_or_else(|| default_gamma(config.adversary.window, topology.len()));
                Protocol::Sade(SadeParams::new(gamma, p_hat)?)
            }
            ProtocolSpec::Backoff(b) => Protocol::Backoff(b),
        };
        Ok(Self { topology, index, het, protocol, r1 })
    }
}

fn build_strategy(config: &SimConfig, n: usize) -> Result<Box<dyn JammingStrategy>, ConfigError> {
    let adv = &config.adversary;
    match config.jammer {
        JammerKind::None => constant_jammer(0.0),
        JammerKind::Reg(mode) => reg_jammer(adv, mode, config.seed, n),
        JammerKind::Bur => bur_jammer(adv),
        JammerKind::Constant => constant_jammer(adv.budget),
    }
}

/// One finished round, borrowed from the engine.
#[derive(Debug, Clone, Copy)]
pub struct RoundRecord<'a> {
    pub round: u64,
    pub actions: &'a [Action],
    pub observations: &'a [Observation],
    pub noise: &'a [f64],
    pub potentially_busy: &'a [bool],
    pub states_before: &'a [NodeState],
    pub states_after: &'a [NodeState],
}

/// Static facts about a run, handed to observers before round 0.
#[derive(Debug, Clone, Copy)]
pub struct RunContext<'a> {
    pub config: &'a SimConfig,
    pub scenario: &'a Scenario,
    pub initial_states: &'a [NodeState],
}

pub trait RoundObserver {
    fn on_start(&mut self, _ctx: &RunContext<'_>) {}
    fn on_round(&mut self, record: &RoundRecord<'_>);
}

/// Headline numbers of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub nodes: usize,
    pub rounds: u64,
    /// Mean per-node reception rate over unjammed rounds; `None` if every
    /// node was jammed throughout.
    pub simulation_throughput: Option<f64>,
    /// Nodes left out of the mean for having no unjammed round.
    pub excluded_nodes: usize,
    pub competitive_throughput: f64,
    pub vacuous: bool,
    pub receptions: u64,
    pub aggregate_p_initial: f64,
    pub aggregate_p_final: f64,
    pub trace_hash: String,
    pub noise_hash: String,
}

impl RunSummary {
    pub fn throughput_or_zero(&self) -> f64 {
        self.simulation_throughput.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub scenario: Scenario,
    pub initial_states: Vec<NodeState>,
    pub final_states: Vec<NodeState>,
    pub summary: RunSummary,
}

/// Runs `config`, feeding every round to `observers`.
pub fn run_with(config: &SimConfig, observers: &mut [&mut dyn RoundObserver]) -> Result<RunOutput, Error> {
    let scenario = Scenario::build(config)?;
    let topo = &scenario.topology;
    let phys = &config.physical;
    let n = topo.len();

    let mut decision_rngs: Vec<ChaCha8Rng> =
        (0..n).map(|v| rng_substream(config.seed, Some(NodeId::from(v)), Purpose::Decision)).collect();
    let mut backoff_rngs: Vec<ChaCha8Rng> = match scenario.protocol {
        Protocol::Backoff(_) => (0..n).map(|v| rng_substream(config.seed, Some(NodeId::from(v)), Purpose::Backoff)).collect(),
        Protocol::Sade(_) => Vec::new(),
    };
    let mut states: Vec<NodeState> = match &scenario.protocol {
        Protocol::Sade(p) => vec![NodeState::Sade(sade_init(p)); n],
        Protocol::Backoff(b) => backoff_rngs.iter_mut().map(|rng| NodeState::Backoff(backoff_init(b, rng))).collect(),
    };
    let initial_states = states.clone();
    let mut adversary = Adversary::new(build_strategy(config, n)?, &config.adversary, n);

    let mut hasher = TraceHasher::new(n, config.rounds);
    let mut noise_hasher = NoiseHasher::new();
    let mut throughput = ThroughputAccumulator::new(n, phys);
    {
        let ctx = RunContext { config, scenario: &scenario, initial_states: &initial_states };
        for obs in observers.iter_mut() {
            obs.on_start(&ctx);
        }
    }

    let mut last_actions: Vec<Action> = Vec::new();
    let mut actions = vec![Action::Listen; n];
    let mut observations = vec![Observation::Idle; n];
    let mut pb = vec![false; n];
    let mut delivered = vec![false; n];
    let mut transmitters: Vec<NodeId> = Vec::new();
    let mut scratch = Vec::new();

    for round in 0..config.rounds {
        let view = AdversaryView { round, states: &states, last_actions: &last_actions };
        let noise = adversary.noise_for_round(&view)?;
        let noise = noise.as_slice();

        transmitters.clear();
        for (v, ((action, state), rng)) in actions.iter_mut().zip(&states).zip(&mut decision_rngs).enumerate() {
            *action = match state {
                NodeState::Sade(s) => sade_decide(s, rng),
                NodeState::Backoff(b) => backoff_decide(b),
            };
            if *action == Action::Transmit {
                transmitters.push(NodeId::from(v));
            }
        }

        let mut channel = Channel::new(topo, &scenario.index, phys, &transmitters);
        if let Some(threshold) = config.cutoff {
            channel = channel.with_cutoff(threshold);
        }
        delivered.iter_mut().for_each(|d| *d = false);
        for v in 0..n {
            observations[v] = match actions[v] {
                Action::Transmit => Observation::Sent,
                Action::Listen => {
                    let obs = channel.resolve(NodeId::from(v), noise[v], &mut scratch).observation(phys);
                    if let Observation::Received(u) = obs {
                        delivered[u.index()] = true;
                    }
                    obs
                }
            };
            pb[v] = potentially_busy(noise[v], phys);
        }

        let before = states.clone();
        match &scenario.protocol {
            Protocol::Sade(params) => {
                for (s, &obs) in states.iter_mut().zip(&observations) {
                    if let NodeState::Sade(st) = s {
                        *st = sade_update(st, obs, params);
                    }
                }
            }
            Protocol::Backoff(params) => {
                for (v, (s, &obs)) in states.iter_mut().zip(&observations).enumerate() {
                    if let NodeState::Backoff(st) = s {
                        *st = backoff_update(st, obs, delivered[v], params, &mut backoff_rngs[v]);
                    }
                }
            }
        }

        let record = RoundRecord {
            round,
            actions: &actions,
            observations: &observations,
            noise,
            potentially_busy: &pb,
            states_before: &before,
            states_after: &states,
        };
        hasher.on_round(&record);
        noise_hasher.on_round(&record);
        throughput.on_round(&record);
        for obs in observers.iter_mut() {
            obs.on_round(&record);
        }
        last_actions.clone_from(&actions);
    }

    let sim = throughput.simulation_throughput();
    let comp = throughput.whole_run().competitive_throughput();
    let summary = RunSummary {
        seed: config.seed,
        nodes: n,
        rounds: config.rounds,
        simulation_throughput: sim.value,
        excluded_nodes: sim.excluded_nodes,
        competitive_throughput: comp.ratio,
        vacuous: comp.vacuous,
        receptions: throughput.whole_run().s.iter().sum(),
        aggregate_p_initial: initial_states.iter().map(NodeState::send_probability).sum(),
        aggregate_p_final: states.iter().map(NodeState::send_probability).sum(),
        trace_hash: hex(&hasher.finish()),
        noise_hash: hex(&noise_hasher.finish()),
    };
    Ok(RunOutput { scenario, initial_states, final_states: states, summary })
}

/// Everything that happened in one round, owned.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredRound {
    pub actions: Vec<Action>,
    pub observations: Vec<Observation>,
    pub noise: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub config: SimConfig,
    pub scenario: Scenario,
    pub records: Vec<StoredRound>,
    pub initial_states: Vec<NodeState>,
    pub final_states: Vec<NodeState>,
    pub summary: RunSummary,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn nodes(&self) -> usize {
        self.scenario.topology.len()
    }

    pub fn potentially_busy(&self, round: usize, v: NodeId) -> bool {
        potentially_busy(self.records[round].noise[v.index()], &self.config.physical)
    }
}

/// Keeps every round in memory.
#[derive(Debug, Default)]
pub struct TraceRecorder {
    pub records: Vec<StoredRound>,
}

impl RoundObserver for TraceRecorder {
    fn on_start(&mut self, ctx: &RunContext<'_>) {
        self.records = Vec::with_capacity(ctx.config.rounds.min(1 << 20) as usize);
    }

    fn on_round(&mut self, r: &RoundRecord<'_>) {
        self.records.push(StoredRound {
            actions: r.actions.to_vec(),
            observations: r.observations.to_vec(),
            noise: r.noise.to_vec(),
        });
    }
}

pub fn run(config: &SimConfig) -> Result<Trace, Error> {
    let mut recorder = TraceRecorder::default();
    let out = run_with(config, &mut [&mut recorder])?;
    Ok(Trace {
        config: config.clone(),
        scenario: out.scenario,
        records: recorder.records,
        initial_states: out.initial_states,
        final_states: out.final_states,
        summary: out.summary,
    })
}

/// Runs `config` once per seed, in parallel. Output order follows `seeds`.
pub fn run_batch(config: &SimConfig, seeds: &[u64]) -> Result<Vec<RunSummary>, Error> {
    assert!(!seeds.is_empty(), "run_batch needs at least one seed");
    seeds
        .par_iter()
        .map(|&seed| {
            let cfg = SimConfig { seed, ..config.clone() };
            run_with(&cfg, &mut []).map(|o| o.summary)
        })
        .collect()
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub stddev: f64,
    pub count: usize,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        let count = values.len();
        if count == 0 {
            return Self { mean: f64::NAN, stddev: f64::NAN, count };
        }
        let mean = values.iter().sum::<f64>() / count as f64;
        let stddev = if count > 1 {
            (values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, stddev, count }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub throughput: Stats,
    pub competitive: Stats,
}

impl BatchStats {
    pub fn of(runs: &[RunSummary]) -> Self {
        let thr: Vec<f64> = runs.iter().filter_map(|r| r.simulation_throughput).collect();
        let comp: Vec<f64> = runs.iter().map(|r| r.competitive_throughput).collect();
        Self { throughput: Stats::of(&thr), competitive: Stats::of(&comp) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::Position;
    use rand::Rng;

    fn pair(distance: f64) -> Topology {
        Topology::new(25.0, 25.0, vec![Position::new(0.0, 0.0), Position::new(distance, 0.0)]).unwrap()
    }

    fn quiet(topology: TopologySpec, rounds: u64) -> SimConfig {
        SimConfig { topology, jammer: JammerKind::None, rounds, ..SimConfig::default() }
    }

    #[test]
    fn singleton_never_receives() {
        let cfg = quiet(TopologySpec::Uniform { n: 1, width: 25.0, height: 25.0 }, 100);
        let trace = run(&cfg).unwrap();
        assert_eq!(trace.summary.receptions, 0);
        let s = trace.final_states[0].as_sade().unwrap();
        assert_eq!(s.p, 1.0 / 24.0);
        assert_eq!(s.t_est, 1);
        assert!(trace.records.iter().all(|r| r.observations[0] != Observation::Busy));
    }

    #[test]
    fn close_pair_communicates() {
        let cfg = quiet(TopologySpec::Explicit(pair(1.0)), 3000);
        let trace = run(&cfg).unwrap();
        let got = |v: usize| trace.records.iter().filter(|r| matches!(r.observations[v], Observation::Received(_))).count();
        assert!(got(0) > 0 && got(1) > 0);
    }

    #[test]
    fn same_seed_same_hash() {
        let cfg = SimConfig { topology: TopologySpec::Uniform { n: 60, width: 8.0, height: 8.0 }, rounds: 300, ..SimConfig::default() };
        let a = run_with(&cfg, &mut []).unwrap().summary;
        let b = run_with(&cfg, &mut []).unwrap().summary;
        assert_eq!(a, b);
        let c = run_with(&SimConfig { seed: 2, ..cfg }, &mut []).unwrap().summary;
        assert_ne!(a.trace_hash, c.trace_hash);
    }

    #[test]
    fn batch_matches_single_and_is_order_free() {
        let cfg = SimConfig { topology: TopologySpec::Uniform { n: 40, width: 6.0, height: 6.0 }, rounds: 200, ..SimConfig::default() };
        let one = run_batch(&cfg, &[5]).unwrap();
        assert_eq!(one[0], run_with(&SimConfig { seed: 5, ..cfg.clone() }, &mut []).unwrap().summary);
        let fwd = run_batch(&cfg, &[1, 2, 3]).unwrap();
        let mut rev = run_batch(&cfg, &[3, 2, 1]).unwrap();
        rev.reverse();
        assert_eq!(fwd, rev);
        let stats = BatchStats::of(&fwd);
        assert_eq!(stats.throughput.count, 3);
    }

    #[test]
    fn substreams_are_reproducible_and_isolated() {
        let draw = |node: u32, purpose| {
            let mut r = rng_substream(9, Some(NodeId(node)), purpose);
            (0..8).map(|_| r.gen::<u64>()).collect::<Vec<_>>()
        };
        assert_eq!(draw(1, Purpose::Decision), draw(1, Purpose::Decision));
        assert_ne!(draw(1, Purpose::Decision), draw(2, Purpose::Decision));
        assert_ne!(draw(1, Purpose::Decision), draw(1, Purpose::Jamming));
        let mut a = rng_substream(9, None, Purpose::Placement);
        let _burn: Vec<u64> = {
            let mut d = rng_substream(9, Some(NodeId(0)), Purpose::Decision);
            (0..1000).map(|_| d.gen()).collect()
        };
        let mut b = rng_substream(9, None, Purpose::Placement);
        assert_eq!(a.gen::<u64>(), b.gen::<u64>());
    }

    #[test]
    fn substreams_uncorrelated() {
        let mut a = rng_substream(3, Some(NodeId(0)), Purpose::Decision);
        let mut b = rng_substream(3, Some(NodeId(1)), Purpose::Decision);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| a.gen()).collect();
        let ys: Vec<f64> = (0..n).map(|_| b.gen()).collect();
        let mx = xs.iter().sum::<f64>() / n as f64;
        let my = ys.iter().sum::<f64>() / n as f64;
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        assert!((cov / (vx * vy).sqrt()).abs() < 0.01);
    }

    #[test]
    fn rejects_bad_config() {
        let bad = SimConfig { rounds: 0, ..SimConfig::default() };
        assert!(matches!(run(&bad), Err(Error::Config(_))));
        let mut bad = SimConfig::default();
        bad.physical.alpha = 2.0;
        assert!(run(&bad).is_err());
    }

    #[test]
    fn backoff_protocol_runs() {
        let cfg = SimConfig {
            topology: TopologySpec::Uniform { n: 50, width: 7.0, height: 7.0 },
            protocol: ProtocolSpec::Backoff(BackoffParams::default()),
            rounds: 300,
            ..SimConfig::default()
        };
        let trace = run(&cfg).unwrap();
        assert!(trace.summary.receptions > 0);
        for (r, rec) in trace.records.iter().enumerate() {
            for (v, (&a, &o)) in rec.actions.iter().zip(&rec.observations).enumerate() {
                assert_eq!(a == Action::Transmit, o == Observation::Sent, "round {r} node {v}");
            }
        }
    }
}
