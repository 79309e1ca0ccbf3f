//! Physical layer: path loss, interference sums, carrier sensing and the
//! SINR reception rule.
//!
//! A listener `v` receives the message of transmitter `u` iff
//!
//! ```text
//! P/d(u,v)^alpha  /  (ADV(v) + sum_{w in S, w != u} P/d(w,v)^alpha)  >=  beta
//! ```
//!
//! Because `beta > 1`, only the strongest transmitter can ever satisfy it.
//! Sums run over transmitters in ascending id order so every result is
//! bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, SinrError};
use crate::topology::{torus_distance_sq, GridIndex, Position, Topology};
use crate::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConfig {
    /// Path-loss exponent.
    pub alpha: f64,
    /// SINR threshold.
    pub beta: f64,
    /// Carrier-sense threshold.
    pub theta: f64,
    /// Transmit power, identical for all nodes.
    pub power: f64,
    /// Jamming slack.
    pub epsilon: f64,
}

impl Default for PhysicalConfig {
    fn default() -> Self {
        Self { alpha: 3.0, beta: 2.0, theta: 1.0, power: 8.0, epsilon: 1.0 / 3.0 }
    }
}

impl PhysicalConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let check = |ok: bool, key: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::invalid(key, msg))
            }
        };
        check(self.alpha.is_finite() && self.alpha > 2.0, "alpha", "must be > 2")?;
        check(self.beta.is_finite() && self.beta > 1.0, "beta", "must be > 1")?;
        check(self.theta.is_finite() && self.theta > 0.0, "theta", "must be > 0")?;
        check(self.power.is_finite() && self.power > 0.0, "power", "must be > 0")?;
        check(self.epsilon > 0.0 && self.epsilon < 1.0, "epsilon", "must lie in (0, 1)")
    }

    pub(crate) fn law(&self) -> PathLaw {
        PathLaw::new(self.alpha)
    }

    /// Noise level from which a step counts as potentially busy.
    pub fn busy_floor(&self) -> f64 {
        (1.0 - self.epsilon) * self.theta
    }
}

/// `d^alpha` evaluated from a squared distance, with exact fast paths for
/// the common integer exponents.
#[derive(Debug, Clone, Copy)]
pub(crate) enum PathLaw {
    Cubic,
    Quartic,
    General(f64),
}

impl PathLaw {
    fn new(alpha: f64) -> Self {
        if alpha == 3.0 {
            PathLaw::Cubic
        } else if alpha == 4.0 {
            PathLaw::Quartic
        } else {
            PathLaw::General(alpha / 2.0)
        }
    }

    #[inline]
    pub(crate) fn attenuation(self, d_sq: f64) -> f64 {
        match self {
            PathLaw::Cubic => d_sq * d_sq.sqrt(),
            PathLaw::Quartic => d_sq * d_sq,
            PathLaw::General(half) => d_sq.powf(half),
        }
    }
}

/// `P / d^alpha`.
pub fn received_power(phys: &PhysicalConfig, d: f64) -> Result<f64, SinrError> {
    if !(d > 0.0) {
        return Err(SinrError::ZeroDistance);
    }
    Ok(phys.power / phys.law().attenuation(d * d))
}

pub fn potentially_busy(adv_v: f64, phys: &PhysicalConfig) -> bool {
    adv_v >= phys.busy_floor()
}

/// Per-node adversarial noise for one round.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NoiseVector(Vec<f64>);

impl NoiseVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn from_vec(levels: Vec<f64>) -> Result<Self, SinrError> {
        if let Some(i) = levels.iter().position(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(SinrError::BadNoise { node: i, level: levels[i] });
        }
        Ok(Self(levels))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, v: NodeId) -> f64 {
        self.0[v.index()]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn is_uniform(&self) -> bool {
        self.0.windows(2).all(|w| w[0] == w[1])
    }
}

/// Who transmits and how much noise each node sees, for one round.
#[derive(Debug, Clone)]
pub struct RoundActivity {
    transmitters: Vec<NodeId>,
    transmitting: Vec<bool>,
    noise: NoiseVector,
}

impl RoundActivity {
    pub fn new(mut transmitters: Vec<NodeId>, noise: NoiseVector) -> Result<Self, SinrError> {
        let n = noise.len();
        transmitters.sort_unstable();
        transmitters.dedup();
        if let Some(&bad) = transmitters.iter().find(|t| t.index() >= n) {
            return Err(SinrError::UnknownNode(bad));
        }
        let mut transmitting = vec![false; n];
        for t in &transmitters {
            transmitting[t.index()] = true;
        }
        Ok(Self { transmitters, transmitting, noise })
    }

    pub fn transmitters(&self) -> &[NodeId] {
        &self.transmitters
    }

    pub fn is_transmitting(&self, v: NodeId) -> bool {
        self.transmitting[v.index()]
    }

    pub fn noise(&self) -> &NoiseVector {
        &self.noise
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Observation {
    Received(NodeId),
    Busy,
    Idle,
    Sent,
}

/// What one listener measured in a round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resolution {
    /// `ADV(v)` plus every transmitter's received power.
    pub total: f64,
    /// The strongest transmitter and its received power.
    pub strongest: Option<(NodeId, f64)>,
    pub received: Option<NodeId>,
}

impl Resolution {
    /// Reception is checked before idleness.
    pub fn observation(&self, phys: &PhysicalConfig) -> Observation {
        match self.received {
            Some(u) => Observation::Received(u),
            None if self.total >= phys.theta => Observation::Busy,
            None => Observation::Idle,
        }
    }
}

/// `signal / (noise + others) >= beta`, with an empty denominator counting
/// as success.
#[inline]
pub fn sinr_satisfied(signal: f64, noise: f64, others: f64, beta: f64) -> bool {
    let denom = noise + others;
    denom == 0.0 || signal / denom >= beta
}

/// Optional far-field truncation: contributions below `threshold` are
/// dropped, so each sum is low by at most `n * threshold`.
#[derive(Debug, Clone)]
struct Cutoff {
    threshold: f64,
    radius: f64,
    /// Indices into `Channel::tx`, bucketed by grid cell.
    buckets: Vec<Vec<u32>>,
    cols: usize,
}

/// The transmitter field of one round, ready for per-listener queries.
#[derive(Debug, Clone)]
pub struct Channel<'a> {
    topo: &'a Topology,
    index: &'a GridIndex,
    phys: PhysicalConfig,
    law: PathLaw,
    tx: Vec<(NodeId, Position)>,
    cutoff: Option<Cutoff>,
}

impl<'a> Channel<'a> {
    /// `transmitters` must be ascending.
    pub fn new(topo: &'a Topology, index: &'a GridIndex, phys: &PhysicalConfig, transmitters: &[NodeId]) -> Self {
        debug_assert!(transmitters.windows(2).all(|w| w[0] < w[1]));
        Self {
            topo,
            index,
            phys: *phys,
            law: phys.law(),
            tx: transmitters.iter().map(|&t| (t, topo.position(t))).collect(),
            cutoff: None,
        }
    }

    /// Enables far-field truncation at `threshold` power per contribution.
    pub fn with_cutoff(mut self, threshold: f64) -> Self {
        assert!(threshold > 0.0, "cutoff threshold must be positive");
        let radius = (self.phys.power / threshold).powf(1.0 / self.phys.alpha);
        let (cols, rows) = self.index.dims();
        let mut buckets = vec![Vec::new(); cols * rows];
        for (i, &(_, p)) in self.tx.iter().enumerate() {
            let (cx, cy) = self.index.cell_of(p);
            buckets[cy * cols + cx].push(i as u32);
        }
        self.cutoff = Some(Cutoff { threshold, radius, buckets, cols });
        self
    }

    /// Worst-case absolute error of any interference sum under the cutoff.
    pub fn cutoff_error_bound(&self) -> f64 {
        self.cutoff.as_ref().map_or(0.0, |c| self.topo.len() as f64 * c.threshold)
    }

    pub fn transmitters(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.tx.iter().map(|&(t, _)| t)
    }

    /// Received powers at `v`, ascending by transmitter id, skipping `v`.
    fn powers_at(&self, v: NodeId, out: &mut Vec<(NodeId, f64)>) {
        out.clear();
        let here = self.topo.position(v);
        let (w, h) = (self.topo.width(), self.topo.height());
        match &self.cutoff {
            None => {
                for &(t, p) in &self.tx {
                    if t != v {
                        let d_sq = torus_distance_sq(here, p, w, h);
                        out.push((t, self.phys.power / self.law.attenuation(d_sq)));
                    }
                }
            }
            Some(cut) => {
                let mut picked: Vec<u32> = Vec::new();
                self.index.for_each_cell_near(here, cut.radius, |cx, cy| {
                    picked.extend_from_slice(&cut.buckets[cy * cut.cols + cx]);
                });
                picked.sort_unstable();
                for i in picked {
                    let (t, p) = self.tx[i as usize];
                    if t != v {
                        let d_sq = torus_distance_sq(here, p, w, h);
                        let pw = self.phys.power / self.law.attenuation(d_sq);
                        if pw >= cut.threshold {
                            out.push((t, pw));
                        }
                    }
                }
            }
        }
    }

    /// `ADV(v)` plus received power of every transmitter other than `v` and
    /// `exclude`.
    pub fn interference(&self, v: NodeId, noise_v: f64, exclude: Option<NodeId>) -> f64 {
        let mut scratch = Vec::new();
        self.powers_at(v, &mut scratch);
        let sum: f64 = scratch.iter().filter(|(t, _)| Some(*t) != exclude).map(|&(_, p)| p).sum();
        noise_v + sum
    }

    /// Reception and sensing outcome for listener `v`. `scratch` is reused
    /// between calls to avoid allocation in the round loop.
    pub fn resolve(&self, v: NodeId, noise_v: f64, scratch: &mut Vec<(NodeId, f64)>) -> Resolution {
        self.powers_at(v, scratch);
        let mut sum = 0.0;
        let mut strongest: Option<(usize, f64)> = None;
        for (i, &(_, p)) in scratch.iter().enumerate() {
            sum += p;
            if strongest.map_or(true, |(_, best)| p > best) {
                strongest = Some((i, p));
            }
        }
        let total = noise_v + sum;
        let Some((best_i, signal)) = strongest else {
            return Resolution { total, strongest: None, received: None };
        };
        let others: f64 = scratch
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != best_i)
            .map(|(_, &(_, p))| p)
            .sum();
        let sender = scratch[best_i].0;
        let received = sinr_satisfied(signal, noise_v, others, self.phys.beta).then_some(sender);
        Resolution { total, strongest: Some((sender, signal)), received }
    }
}

/// `ADV(v)` plus the exact sum over every transmitter other than `v` and
/// `exclude`.
pub fn interference_at(
    v: NodeId,
    activity: &RoundActivity,
    topo: &Topology,
    index: &GridIndex,
    phys: &PhysicalConfig,
    exclude: Option<NodeId>,
) -> f64 {
    Channel::new(topo, index, phys, activity.transmitters()).interference(v, activity.noise.get(v), exclude)
}

/// `Busy` iff total measured power reaches `theta`.
pub fn carrier_sense(
    v: NodeId,
    activity: &RoundActivity,
    topo: &Topology,
    index: &GridIndex,
    phys: &PhysicalConfig,
) -> Result<Observation, SinrError> {
    if activity.is_transmitting(v) {
        return Err(SinrError::SensingWhileSending(v));
    }
    let total = interference_at(v, activity, topo, index, phys, None);
    Ok(if total >= phys.theta { Observation::Busy } else { Observation::Idle })
}

/// The unique transmitter whose message `v` decodes, if any. A transmitting
/// node never receives.
pub fn try_receive(
    v: NodeId,
    activity: &RoundActivity,
    topo: &Topology,
    index: &GridIndex,
    phys: &PhysicalConfig,
) -> Option<NodeId> {
    if activity.is_transmitting(v) {
        return None;
    }
    let channel = Channel::new(topo, index, phys, activity.transmitters());
    channel.resolve(v, activity.noise.get(v), &mut Vec::new()).received
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(side: f64, xs: &[f64]) -> (Topology, GridIndex) {
        let topo = Topology::new(side, side, xs.iter().map(|&x| Position::new(x, 0.0)).collect()).unwrap();
        let index = GridIndex::build(&topo, 1.5);
        (topo, index)
    }

    fn activity(tx: &[u32], noise: Vec<f64>) -> RoundActivity {
        RoundActivity::new(tx.iter().map(|&t| NodeId(t)).collect(), NoiseVector::from_vec(noise).unwrap()).unwrap()
    }

    #[test]
    fn received_power_examples() {
        let phys = PhysicalConfig::default();
        assert_eq!(received_power(&phys, 1.0).unwrap(), 8.0);
        assert_eq!(received_power(&phys, 2.0).unwrap(), 1.0);
        let edge = received_power(&phys, 4f64.powf(1.0 / 3.0)).unwrap();
        assert!((edge - phys.beta * phys.theta).abs() < 1e-12);
        assert!(matches!(received_power(&phys, 0.0), Err(SinrError::ZeroDistance)));
    }

    #[test]
    fn general_exponent_matches_powf() {
        let phys = PhysicalConfig { alpha: 3.7, ..Default::default() };
        let p = received_power(&phys, 1.9).unwrap();
        assert!((p - 8.0 / 1.9f64.powf(3.7)).abs() < 1e-12);
    }

    #[test]
    fn interference_examples() {
        let phys = PhysicalConfig::default();
        let (topo, index) = line(25.0, &[0.0, 2.0]);
        let quiet = activity(&[], vec![0.5, 0.0]);
        assert_eq!(interference_at(NodeId(0), &quiet, &topo, &index, &phys, None), 0.5);
        let one = activity(&[1], vec![0.0, 0.0]);
        assert_eq!(interference_at(NodeId(0), &one, &topo, &index, &phys, None), 1.0);
        assert_eq!(interference_at(NodeId(0), &one, &topo, &index, &phys, Some(NodeId(1))), 0.0);
    }

    #[test]
    fn sensing_tie_is_busy() {
        let phys = PhysicalConfig::default();
        let (topo, index) = line(25.0, &[0.0, 1.0]);
        let silent = activity(&[], vec![0.0, 0.0]);
        assert_eq!(carrier_sense(NodeId(0), &silent, &topo, &index, &phys).unwrap(), Observation::Idle);
        let tie = activity(&[], vec![1.0, 0.0]);
        assert_eq!(carrier_sense(NodeId(0), &tie, &topo, &index, &phys).unwrap(), Observation::Busy);
        let near = activity(&[1], vec![0.0, 0.0]);
        assert_eq!(carrier_sense(NodeId(0), &near, &topo, &index, &phys).unwrap(), Observation::Busy);
        assert!(carrier_sense(NodeId(1), &near, &topo, &index, &phys).is_err());
    }

    #[test]
    fn reception_examples() {
        let phys = PhysicalConfig::default();
        let (topo, index) = line(25.0, &[0.0, 1.0, 24.0, 12.0]);
        // SINR = 8 / 1.
        let a = activity(&[1], vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(try_receive(NodeId(0), &a, &topo, &index, &phys), Some(NodeId(1)));
        // Both at distance 1: SINR = 1 each.
        let b = activity(&[1, 2], vec![0.0; 4]);
        assert_eq!(try_receive(NodeId(0), &b, &topo, &index, &phys), None);
        // Lone far sender, no noise: empty denominator.
        let c = activity(&[3], vec![0.0; 4]);
        assert_eq!(try_receive(NodeId(0), &c, &topo, &index, &phys), Some(NodeId(3)));
        assert_eq!(try_receive(NodeId(3), &c, &topo, &index, &phys), None);
    }

    #[test]
    fn potentially_busy_boundary() {
        let phys = PhysicalConfig::default();
        assert!(!potentially_busy(0.0, &phys));
        assert!(potentially_busy(phys.busy_floor(), &phys));
        assert!(!potentially_busy(0.5, &phys));
    }

    #[test]
    fn cutoff_error_is_bounded() {
        let phys = PhysicalConfig::default();
        let xs: Vec<f64> = (0..40).map(|i| i as f64 * 0.6).collect();
        let (topo, index) = line(25.0, &xs);
        let tx: Vec<NodeId> = (1..40).step_by(3).map(NodeId).collect();
        let exact = Channel::new(&topo, &index, &phys, &tx);
        let cut = Channel::new(&topo, &index, &phys, &tx).with_cutoff(0.05);
        let bound = cut.cutoff_error_bound();
        for v in topo.node_ids() {
            let e = exact.interference(v, 0.0, None);
            let c = cut.interference(v, 0.0, None);
            assert!(c <= e + 1e-12 && e - c <= bound, "node {v}: {e} vs {c}");
        }
    }

    #[test]
    fn noise_vector_rejects_negative() {
        assert!(NoiseVector::from_vec(vec![0.0, -1.0]).is_err());
        assert!(NoiseVector::from_vec(vec![f64::NAN]).is_err());
        assert!(NoiseVector::from_vec(vec![1.0, 1.0]).unwrap().is_uniform());
    }
}
