//! Throughput accounting and analysis-side diagnostics over traces.
//!
//! Throughout, a step is *unjammed* (not potentially busy) at `v` iff
//! `ADV(v) < (1 - eps) * theta`.

use std::f64::consts::{E, PI};
use std::io::{self, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::engine::{RoundObserver, RoundRecord, RunContext, Trace};
use crate::protocol::{sade_update, NodeState, Protocol};
use crate::sinr::{potentially_busy, Observation, PhysicalConfig};
use crate::topology::{nodes_within, GridIndex, Topology};
use crate::NodeId;

/// Per-node counts over a frame `[start, end)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub start: u64,
    pub end: u64,
    /// Steps that are not potentially busy.
    pub f: Vec<u64>,
    /// Successful receptions.
    pub s: Vec<u64>,
    /// Unjammed steps; the same predicate as `f`.
    pub unjammed: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Competitiveness {
    pub ratio: f64,
    /// No node had an unjammed step; `ratio` is 1 by convention.
    pub vacuous: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimThroughput {
    pub value: Option<f64>,
    pub excluded_nodes: usize,
}

impl FrameMetrics {
    pub fn empty(start: u64, n: usize) -> Self {
        Self { start, end: start, f: vec![0; n], s: vec![0; n], unjammed: vec![0; n] }
    }

    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    fn add(&mut self, observations: &[Observation], pb: &[bool]) {
        for (v, (o, &busy)) in observations.iter().zip(pb).enumerate() {
            if !busy {
                self.f[v] += 1;
                self.unjammed[v] += 1;
            }
            if matches!(o, Observation::Received(_)) {
                self.s[v] += 1;
            }
        }
        self.end += 1;
    }

    /// `sum s_v / sum f_v`.
    pub fn competitive_throughput(&self) -> Competitiveness {
        let s: u64 = self.s.iter().sum();
        let f: u64 = self.f.iter().sum();
        if f == 0 {
            Competitiveness { ratio: 1.0, vacuous: true }
        } else {
            Competitiveness { ratio: s as f64 / f as f64, vacuous: false }
        }
    }

    /// Mean over nodes of `s_v / unjammed_v`, skipping nodes that were
    /// never unjammed.
    pub fn simulation_throughput(&self) -> SimThroughput {
        let mut sum = 0.0;
        let mut counted = 0usize;
        for (&s, &u) in self.s.iter().zip(&self.unjammed) {
            if u > 0 {
                sum += s as f64 / u as f64;
                counted += 1;
            }
        }
        SimThroughput {
            value: (counted > 0).then(|| sum / counted as f64),
            excluded_nodes: self.s.len() - counted,
        }
    }
}

/// Streaming frame counts; optionally also split into fixed-length frames.
#[derive(Debug, Clone)]
pub struct ThroughputAccumulator {
    busy_floor: f64,
    whole: FrameMetrics,
    frame_len: Option<u64>,
    frames: Vec<FrameMetrics>,
    pb: Vec<bool>,
}

impl ThroughputAccumulator {
    pub fn new(n: usize, phys: &PhysicalConfig) -> Self {
        Self { busy_floor: phys.busy_floor(), whole: FrameMetrics::empty(0, n), frame_len: None, frames: Vec::new(), pb: vec![false; n] }
    }

    pub fn with_frames(mut self, frame_len: u64) -> Self {
        assert!(frame_len > 0);
        self.frame_len = Some(frame_len);
        self
    }

    pub fn whole_run(&self) -> &FrameMetrics {
        &self.whole
    }

    pub fn frames(&self) -> &[FrameMetrics] {
        &self.frames
    }

    pub fn simulation_throughput(&self) -> SimThroughput {
        self.whole.simulation_throughput()
    }

    fn push(&mut self, round: u64, observations: &[Observation], noise: &[f64]) {
        for (b, &x) in self.pb.iter_mut().zip(noise) {
            *b = x >= self.busy_floor;
        }
        self.whole.add(observations, &self.pb);
        if let Some(len) = self.frame_len {
            if round % len == 0 {
                self.frames.push(FrameMetrics::empty(round, observations.len()));
            }
            if let Some(frame) = self.frames.last_mut() {
                frame.add(observations, &self.pb);
            }
        }
    }
}

impl RoundObserver for ThroughputAccumulator {
    /// Resizes to the placed node count if it differs from construction.
    fn on_start(&mut self, ctx: &RunContext<'_>) {
        let n = ctx.scenario.topology.len();
        if self.whole.f.len() != n {
            self.whole = FrameMetrics::empty(0, n);
            self.frames.clear();
            self.pb = vec![false; n];
        }
    }

    fn on_round(&mut self, r: &RoundRecord<'_>) {
        self.push(r.round, r.observations, r.noise);
    }
}

pub fn frame_metrics(trace: &Trace, frame: Range<usize>) -> FrameMetrics {
    let n = trace.nodes();
    let mut acc = ThroughputAccumulator::new(n, &trace.config.physical);
    acc.whole.start = frame.start as u64;
    acc.whole.end = frame.start as u64;
    for (round, r) in trace.records[frame.clone()].iter().enumerate() {
        acc.push((frame.start + round) as u64, &r.observations, &r.noise);
    }
    acc.whole
}

pub fn competitive_throughput(trace: &Trace, frame: Range<usize>) -> Competitiveness {
    frame_metrics(trace, frame).competitive_throughput()
}

pub fn simulation_throughput(trace: &Trace) -> SimThroughput {
    frame_metrics(trace, 0..trace.len()).simulation_throughput()
}

/// Sum of send probabilities over `subset`.
pub fn aggregate_probability(states: &[NodeState], subset: &[NodeId]) -> f64 {
    subset.iter().map(|v| states[v.index()].send_probability()).sum()
}

/// Replays SADE updates from the recorded observations to recover the
/// state vector after `round` rounds. `None` for protocols whose updates
/// draw randomness.
pub fn states_at(trace: &Trace, rounds: usize) -> Option<Vec<NodeState>> {
    let Protocol::Sade(params) = trace.scenario.protocol else {
        return None;
    };
    let mut states = trace.initial_states.clone();
    for r in &trace.records[..rounds] {
        for (s, &o) in states.iter_mut().zip(&r.observations) {
            if let NodeState::Sade(st) = s {
                *st = sade_update(st, o, &params);
            }
        }
    }
    Some(states)
}

pub const RHO_GREEN: f64 = 5.0;
pub const RHO_YELLOW: f64 = 5.0 * E;
pub const RHO_RED: f64 = 5.0 * E * E;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SectorClass {
    Green,
    Yellow,
    Red,
    AboveRed,
}

impl SectorClass {
    /// `p <= rho_green` is green, `p <= rho_yellow` yellow, `p <= rho_red`
    /// red. The comparison absorbs summation rounding so that exactly 120
    /// nodes at `1/24` land on 5.
    pub fn classify(p: f64) -> Self {
        let le = |rho: f64| p <= rho * (1.0 + 1e-12);
        if le(RHO_GREEN) {
            SectorClass::Green
        } else if le(RHO_YELLOW) {
            SectorClass::Yellow
        } else if le(RHO_RED) {
            SectorClass::Red
        } else {
            SectorClass::AboveRed
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sector {
    pub aggregate: f64,
    pub members: usize,
    pub class: SectorClass,
}

/// Six equal-angle sectors of the transmission disk around a node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorDiagnostics {
    pub node: NodeId,
    pub sectors: [Sector; 6],
}

/// Sector of a displacement. Sector 0 starts at angle 0 measured from the
/// positive x-axis; a point on a boundary goes to the lower index.
pub fn sector_of(dx: f64, dy: f64) -> usize {
    let mut angle = dy.atan2(dx);
    if angle < 0.0 {
        angle += 2.0 * PI;
    }
    if angle == 0.0 {
        return 0;
    }
    let k = (angle / (PI / 3.0)).ceil() as usize;
    k.clamp(1, 6) - 1
}

pub fn sector_diagnostics_for(
    topo: &Topology,
    index: &GridIndex,
    states: &[NodeState],
    v: NodeId,
    r1: f64,
) -> SectorDiagnostics {
    let here = topo.position(v);
    let mut agg = [0.0f64; 6];
    let mut members = [0usize; 6];
    for u in nodes_within(topo, index, v, r1) {
        let there = topo.position(u);
        let dx = signed_wrap(there.x - here.x, topo.width());
        let dy = signed_wrap(there.y - here.y, topo.height());
        let k = sector_of(dx, dy);
        agg[k] += states[u.index()].send_probability();
        members[k] += 1;
    }
    let sectors = std::array::from_fn(|k| Sector { aggregate: agg[k], members: members[k], class: SectorClass::classify(agg[k]) });
    SectorDiagnostics { node: v, sectors }
}

/// Sector diagnostics for `v` with the node states in effect at the start
/// of `round`. `None` when states cannot be replayed.
pub fn sector_diagnostics(trace: &Trace, v: NodeId, round: usize) -> Option<SectorDiagnostics> {
    let states = states_at(trace, round)?;
    let sc = &trace.scenario;
    Some(sector_diagnostics_for(&sc.topology, &sc.index, &states, v, sc.r1))
}

fn signed_wrap(d: f64, extent: f64) -> f64 {
    let mut d = d % extent;
    if d > extent / 2.0 {
        d -= extent;
    } else if d < -extent / 2.0 {
        d += extent;
    }
    d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenRoundStats {
    pub open: Vec<u64>,
    /// Unjammed count per node, for comparison.
    pub f: Vec<u64>,
}

/// Rounds where `v` and at least one node within its transmission range
/// are both unjammed.
pub fn open_rounds(trace: &Trace) -> OpenRoundStats {
    let sc = &trace.scenario;
    let phys = &trace.config.physical;
    let n = trace.nodes();
    let neighbors: Vec<Vec<NodeId>> = sc.topology.node_ids().map(|v| nodes_within(&sc.topology, &sc.index, v, sc.r1)).collect();
    let mut open = vec![0u64; n];
    let mut f = vec![0u64; n];
    for r in &trace.records {
        let free: Vec<bool> = r.noise.iter().map(|&x| !potentially_busy(x, phys)).collect();
        for v in 0..n {
            if free[v] {
                f[v] += 1;
                if neighbors[v].iter().any(|w| free[w.index()]) {
                    open[v] += 1;
                }
            }
        }
    }
    OpenRoundStats { open, f }
}

/// One row of the per-round aggregate series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundAggregate {
    pub round: u64,
    /// Sum of send probabilities in effect during `round`.
    pub aggregate_p: f64,
    pub receptions: u64,
    pub idle_count: u64,
}

/// Collects [`RoundAggregate`] rows.
#[derive(Debug, Default, Clone)]
pub struct RoundAggregates {
    pub rows: Vec<RoundAggregate>,
    /// Aggregate probability after the final round.
    pub final_aggregate: f64,
}

impl RoundObserver for RoundAggregates {
    fn on_start(&mut self, ctx: &RunContext<'_>) {
        self.rows = Vec::with_capacity(ctx.config.rounds.min(1 << 20) as usize);
    }

    fn on_round(&mut self, r: &RoundRecord<'_>) {
        let aggregate_p = r.states_before.iter().map(NodeState::send_probability).sum();
        let receptions = r.observations.iter().filter(|o| matches!(o, Observation::Received(_))).count() as u64;
        let idle_count = r.observations.iter().filter(|o| **o == Observation::Idle).count() as u64;
        self.rows.push(RoundAggregate { round: r.round, aggregate_p, receptions, idle_count });
        self.final_aggregate = r.states_after.iter().map(NodeState::send_probability).sum();
    }
}

pub fn write_round_aggregates_csv<W: Write>(rows: &[RoundAggregate], mut out: W) -> io::Result<()> {
    writeln!(out, "round,aggregate_p,receptions,idle_count")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.round, r.aggregate_p, r.receptions, r.idle_count)?;
    }
    out.flush()
}

pub fn write_frames_csv<W: Write>(frames: &[FrameMetrics], mut out: W) -> io::Result<()> {
    writeln!(out, "frame,node,f_v,s_v,unjammed")?;
    for (k, fr) in frames.iter().enumerate() {
        for v in 0..fr.f.len() {
            writeln!(out, "{k},{v},{},{},{}", fr.f[v], fr.s[v], fr.unjammed[v])?;
        }
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::RegMode;
    use crate::engine::{run, run_with, JammerKind, SimConfig, TopologySpec};
    use crate::protocol::{sade_init, SadeParams};
    use crate::topology::Position;

    fn cfg(n: usize, side: f64, jammer: JammerKind, rounds: u64) -> SimConfig {
        SimConfig { topology: TopologySpec::Uniform { n, width: side, height: side }, jammer, rounds, ..SimConfig::default() }
    }

    #[test]
    fn no_jamming_unrolls_definition() {
        let trace = run(&cfg(30, 5.0, JammerKind::None, 200)).unwrap();
        let fm = frame_metrics(&trace, 0..200);
        assert!(fm.f.iter().all(|&f| f == 200));
        let s: u64 = fm.s.iter().sum();
        let comp = competitive_throughput(&trace, 0..200);
        assert!(!comp.vacuous);
        assert!((comp.ratio - s as f64 / (30.0 * 200.0)).abs() < 1e-15);
        let sim = simulation_throughput(&trace).value.unwrap();
        let expect = fm.s.iter().map(|&s| s as f64 / 200.0).sum::<f64>() / 30.0;
        assert!((sim - expect).abs() < 1e-15);
    }

    #[test]
    fn receptions_match_trace() {
        let trace = run(&cfg(25, 5.0, JammerKind::Reg(RegMode::Random), 300)).unwrap();
        let fm = frame_metrics(&trace, 0..300);
        for v in 0..25 {
            let direct = trace.records.iter().filter(|r| matches!(r.observations[v], Observation::Received(_))).count() as u64;
            assert_eq!(fm.s[v], direct);
            assert!(fm.s[v] <= fm.len() && fm.f[v] <= fm.len());
        }
        let c = fm.competitive_throughput();
        assert!((0.0..=1.0).contains(&c.ratio));
    }

    #[test]
    fn constant_jammer_is_vacuous() {
        let mut c = cfg(10, 5.0, JammerKind::Constant, 100);
        c.adversary.budget = 1.1;
        c.adversary.uniform = true;
        let trace = run(&c).unwrap();
        let comp = competitive_throughput(&trace, 0..100);
        assert!(comp.vacuous && comp.ratio == 1.0);
        let sim = simulation_throughput(&trace);
        assert_eq!(sim.value, None);
        assert_eq!(sim.excluded_nodes, 10);
        assert!(open_rounds(&trace).open.iter().all(|&o| o == 0));
    }

    #[test]
    fn bur_unjammed_fraction_is_exact() {
        let trace = run(&cfg(10, 5.0, JammerKind::Bur, 600)).unwrap();
        let fm = frame_metrics(&trace, 0..600);
        assert!(fm.unjammed.iter().all(|&u| u == 400));
        // Bur is uniform, so f_v agrees across nodes.
        assert!(fm.f.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn windowed_frames_sum_to_whole() {
        let c = cfg(20, 5.0, JammerKind::Reg(RegMode::Random), 250);
        let mut acc = ThroughputAccumulator::new(20, &c.physical).with_frames(60);
        run_with(&c, &mut [&mut acc]).unwrap();
        assert_eq!(acc.frames().len(), 5);
        assert_eq!(acc.frames().last().unwrap().len(), 10);
        for v in 0..20 {
            let s: u64 = acc.frames().iter().map(|f| f.s[v]).sum();
            assert_eq!(s, acc.whole_run().s[v]);
        }
        let mut out = Vec::new();
        write_frames_csv(acc.frames(), &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 1 + 5 * 20);
    }

    #[test]
    fn aggregate_initial_value() {
        let p = SadeParams::new(0.1, 1.0 / 24.0).unwrap();
        let states = vec![NodeState::Sade(sade_init(&p)); 500];
        let all: Vec<NodeId> = (0..500).map(NodeId::from).collect();
        let agg = aggregate_probability(&states, &all);
        assert!((agg - 500.0 / 24.0).abs() < 1e-9);
        assert!((agg - 20.83).abs() < 0.01);
    }

    #[test]
    fn sector_geometry() {
        assert_eq!(sector_of(1.0, 0.0), 0);
        assert_eq!(sector_of(1.0, 0.1), 0);
        let on_boundary = (PI / 3.0).sin_cos();
        assert_eq!(sector_of(on_boundary.1, on_boundary.0), 0);
        assert_eq!(sector_of(0.0, 1.0), 1);
        assert_eq!(sector_of(-1.0, 0.0), 2);
        assert_eq!(sector_of(0.5, -1.0), 4);
        assert_eq!(sector_of(1.0, -0.01), 5);
    }

    #[test]
    fn sector_classes() {
        assert_eq!(SectorClass::classify(0.0), SectorClass::Green);
        assert_eq!(SectorClass::classify((0..120).map(|_| 1.0 / 24.0).sum()), SectorClass::Green);
        assert_eq!(SectorClass::classify(5.01), SectorClass::Yellow);
        assert_eq!(SectorClass::classify(RHO_YELLOW), SectorClass::Yellow);
        assert_eq!(SectorClass::classify(RHO_RED), SectorClass::Red);
        assert_eq!(SectorClass::classify(RHO_RED + 0.1), SectorClass::AboveRed);
    }

    #[test]
    fn sectors_partition_the_disk() {
        let trace = run(&cfg(200, 10.0, JammerKind::None, 50)).unwrap();
        let sc = &trace.scenario;
        for v in [NodeId(0), NodeId(17), NodeId(123)] {
            let diag = sector_diagnostics(&trace, v, 0).unwrap();
            let members: usize = diag.sectors.iter().map(|s| s.members).sum();
            assert_eq!(members, nodes_within(&sc.topology, &sc.index, v, sc.r1).len());
            // At start every node is at p_hat.
            for s in &diag.sectors {
                assert!((s.aggregate - s.members as f64 / 24.0).abs() < 1e-12);
                if s.members <= 120 {
                    assert_eq!(s.class, SectorClass::Green);
                }
            }
            assert!(sector_diagnostics(&trace, v, 50).is_some());
        }
    }

    #[test]
    fn empty_sector_is_green() {
        let topo = Topology::new(10.0, 10.0, vec![Position::new(1.0, 1.0), Position::new(1.5, 1.0)]).unwrap();
        let index = GridIndex::build(&topo, 1.5);
        let p = SadeParams::new(0.1, 1.0 / 24.0).unwrap();
        let states = vec![NodeState::Sade(sade_init(&p)); 2];
        let d = sector_diagnostics_for(&topo, &index, &states, NodeId(0), 1.6);
        assert_eq!(d.sectors[0].members, 1);
        for s in &d.sectors[1..] {
            assert_eq!((s.aggregate, s.class), (0.0, SectorClass::Green));
        }
    }

    #[test]
    fn open_rounds_uniform_adversary() {
        let mut c = cfg(80, 5.0, JammerKind::Reg(RegMode::Random), 300);
        c.adversary.uniform = true;
        let trace = run(&c).unwrap();
        let stats = open_rounds(&trace);
        let sc = &trace.scenario;
        for v in sc.topology.node_ids() {
            if !nodes_within(&sc.topology, &sc.index, v, sc.r1).is_empty() {
                assert_eq!(stats.open[v.index()], stats.f[v.index()]);
            }
            assert!(stats.open[v.index()] <= stats.f[v.index()]);
        }
        let single = run(&cfg(1, 5.0, JammerKind::None, 20)).unwrap();
        assert_eq!(open_rounds(&single).open, vec![0]);
    }

    #[test]
    fn aggregates_series() {
        let c = cfg(48, 5.0, JammerKind::None, 30);
        let mut agg = RoundAggregates::default();
        run_with(&c, &mut [&mut agg]).unwrap();
        assert_eq!(agg.rows.len(), 30);
        assert!((agg.rows[0].aggregate_p - 2.0).abs() < 1e-12);
        let mut out = Vec::new();
        write_round_aggregates_csv(&agg.rows, &mut out).unwrap();
        assert!(String::from_utf8(out).unwrap().starts_with("round,aggregate_p,receptions,idle_count\n0,"));
    }
}
