//! Budget-bounded jamming.
//!
//! A `(B, T)`-bounded adversary may spend at most `B * T` noise energy per
//! node within every aligned window of `T` rounds. Strategies implement
//! [`JammingStrategy`]; [`Adversary`] wraps one together with a
//! [`BudgetLedger`] that aborts the run on any overspend.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{rng_substream, Purpose};
use crate::error::{BudgetViolation, ConfigError};
use crate::protocol::{Action, NodeState};
use crate::sinr::NoiseVector;
use crate::NodeId;

/// Absolute slack granted to floating-point accounting.
pub const LEDGER_TOLERANCE: f64 = 1e-9;

/// Spend below this is treated as nothing left to spend.
const DUST: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdversaryConfig {
    /// Average noise power per round, `B`.
    pub budget: f64,
    /// Window length `T` in rounds.
    pub window: u64,
    pub epsilon: f64,
    /// Identical noise at every node in every round.
    pub uniform: bool,
}

impl AdversaryConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.budget.is_finite() && self.budget >= 0.0) {
            return Err(ConfigError::invalid("budget", "must be finite and >= 0"));
        }
        if self.window < 1 {
            return Err(ConfigError::invalid("window", "must be >= 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(ConfigError::invalid("epsilon", "must lie in (0, 1]"));
        }
        if !(self.budget / self.epsilon).is_finite() {
            return Err(ConfigError::invalid("epsilon", "jam level budget/epsilon is not finite"));
        }
        Ok(())
    }

    pub fn window_cap(&self) -> f64 {
        self.budget * self.window as f64
    }

    /// Noise level of a single jammed round, `B / eps`.
    pub fn jam_level(&self) -> f64 {
        self.budget / self.epsilon
    }
}

/// Read-only state snapshot taken before nodes act in `round`.
#[derive(Debug, Clone, Copy)]
pub struct AdversaryView<'a> {
    pub round: u64,
    pub states: &'a [NodeState],
    /// Actions of the previous round; empty in round 0.
    pub last_actions: &'a [Action],
}

pub trait JammingStrategy: Send {
    fn name(&self) -> &'static str;

    /// Writes `ADV(v)` for every node into `noise`.
    fn fill_noise(&mut self, view: &AdversaryView<'_>, noise: &mut [f64]);
}

/// Per-node spend inside the current aligned window.
#[derive(Debug, Clone)]
pub struct BudgetLedger {
    cap: f64,
    window: u64,
    window_start: u64,
    spent: Vec<f64>,
    uniform: bool,
}

impl BudgetLedger {
    pub fn new(cfg: &AdversaryConfig, n: usize) -> Self {
        Self { cap: cfg.window_cap(), window: cfg.window, window_start: 0, spent: vec![0.0; n], uniform: cfg.uniform }
    }

    pub fn spent(&self, v: NodeId) -> f64 {
        self.spent[v.index()]
    }

    pub fn record(&mut self, round: u64, noise: &[f64]) -> Result<(), BudgetViolation> {
        if noise.len() != self.spent.len() {
            return Err(BudgetViolation::WrongLength { round, got: noise.len(), expected: self.spent.len() });
        }
        let start = round - round % self.window;
        if start != self.window_start {
            self.window_start = start;
            self.spent.iter_mut().for_each(|s| *s = 0.0);
        }
        if self.uniform && !noise.windows(2).all(|w| w[0] == w[1]) {
            return Err(BudgetViolation::NotUniform { round });
        }
        for (i, (&level, spent)) in noise.iter().zip(self.spent.iter_mut()).enumerate() {
            if !(level.is_finite() && level >= 0.0) {
                return Err(BudgetViolation::BadLevel { round, node: NodeId::from(i), level });
            }
            *spent += level;
            if *spent > self.cap + LEDGER_TOLERANCE {
                return Err(BudgetViolation::Overspend {
                    round,
                    node: NodeId::from(i),
                    spent: *spent,
                    cap: self.cap,
                    window_start: start,
                });
            }
        }
        Ok(())
    }
}

/// A strategy plus the ledger that polices it.
pub struct Adversary {
    strategy: Box<dyn JammingStrategy>,
    ledger: BudgetLedger,
}

impl Adversary {
    pub fn new(strategy: Box<dyn JammingStrategy>, cfg: &AdversaryConfig, n: usize) -> Self {
        Self { strategy, ledger: BudgetLedger::new(cfg, n) }
    }

    pub fn name(&self) -> &'static str {
        self.strategy.name()
    }

    pub fn ledger(&self) -> &BudgetLedger {
        &self.ledger
    }

    pub fn noise_for_round(&mut self, view: &AdversaryView<'_>) -> Result<NoiseVector, BudgetViolation> {
        let mut noise = NoiseVector::zeros(view.states.len());
        self.strategy.fill_noise(view, noise.as_mut_slice());
        self.ledger.record(view.round, noise.as_slice())?;
        Ok(noise)
    }
}

/// How a regular jammer picks its rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegMode {
    /// Each round independently with probability `eps`.
    #[default]
    Random,
    /// Every `ceil(1/eps)`-th round of the window.
    Strided,
}

/// Jams at `B/eps` on a random (or strided) selection of rounds, then tops
/// up at the end of each window so the window spend is exactly `B*T`.
pub struct RegJammer {
    cfg: AdversaryConfig,
    mode: RegMode,
    level: f64,
    stride: u64,
    remaining: Vec<f64>,
    /// One stream per node, or a single shared stream when uniform.
    rngs: Vec<ChaCha8Rng>,
    draws: Vec<bool>,
}

impl RegJammer {
    pub fn new(cfg: &AdversaryConfig, mode: RegMode, seed: u64, n: usize) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let rngs = if cfg.uniform {
            vec![rng_substream(seed, None, Purpose::Jamming)]
        } else {
            (0..n).map(|v| rng_substream(seed, Some(NodeId::from(v)), Purpose::Jamming)).collect()
        };
        Ok(Self {
            cfg: *cfg,
            mode,
            level: cfg.jam_level(),
            stride: ((1.0 / cfg.epsilon) - 1e-9).ceil().max(1.0) as u64,
            remaining: vec![0.0; n],
            rngs,
            draws: vec![false; n],
        })
    }
}

impl JammingStrategy for RegJammer {
    fn name(&self) -> &'static str {
        "reg"
    }

    fn fill_noise(&mut self, view: &AdversaryView<'_>, noise: &mut [f64]) {
        let t = self.cfg.window;
        let k = view.round % t;
        let left = (t - k) as f64;
        if k == 0 {
            self.remaining.iter_mut().for_each(|r| *r = self.cfg.window_cap());
        }
        match self.mode {
            RegMode::Random => {
                let eps = self.cfg.epsilon;
                if self.cfg.uniform {
                    let jam = self.rngs[0].gen::<f64>() < eps;
                    self.draws.iter_mut().for_each(|d| *d = jam);
                } else {
                    for (d, rng) in self.draws.iter_mut().zip(&mut self.rngs) {
                        *d = rng.gen::<f64>() < eps;
                    }
                }
            }
            RegMode::Strided => {
                let jam = (k + 1) % self.stride == 0;
                self.draws.iter_mut().for_each(|d| *d = jam);
            }
        }
        for ((out, rem), &jam) in noise.iter_mut().zip(&mut self.remaining).zip(&self.draws) {
            let chosen = if jam { self.level.min(*rem) } else { 0.0 };
            // Whatever cannot fit into the remaining rounds at full level
            // must be spent now.
            let forced = *rem - self.level * (left - 1.0);
            let mut amount = if forced > DUST { chosen.max(forced) } else { chosen };
            if left == 1.0 && *rem > DUST {
                amount = *rem;
            }
            amount = amount.min(*rem);
            if amount <= DUST {
                amount = 0.0;
            }
            *out = amount;
            *rem = (*rem - amount).max(0.0);
        }
    }
}

/// Jams the first `floor(eps*T)` rounds of each window at `B/eps`; any
/// fractional remainder goes into the next round.
pub struct BurJammer {
    level: f64,
    window: u64,
    burst: u64,
    remainder: f64,
}

impl BurJammer {
    pub fn new(cfg: &AdversaryConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let level = cfg.jam_level();
        let burst = ((cfg.epsilon * cfg.window as f64) + 1e-9).floor() as u64;
        let burst = burst.min(cfg.window);
        let remainder = cfg.window_cap() - burst as f64 * level;
        Ok(Self { level, window: cfg.window, burst, remainder: if remainder > DUST { remainder } else { 0.0 } })
    }
}

impl JammingStrategy for BurJammer {
    fn name(&self) -> &'static str {
        "bur"
    }

    fn fill_noise(&mut self, view: &AdversaryView<'_>, noise: &mut [f64]) {
        let k = view.round % self.window;
        let level = if k < self.burst {
            self.level
        } else if k == self.burst {
            self.remainder
        } else {
            0.0
        };
        noise.iter_mut().for_each(|x| *x = level);
    }
}

/// The same level at every node in every round.
pub struct ConstantJammer {
    level: f64,
}

impl ConstantJammer {
    pub fn new(level: f64) -> Result<Self, ConfigError> {
        if !(level.is_finite() && level >= 0.0) {
            return Err(ConfigError::invalid("budget", "constant jam level must be finite and >= 0"));
        }
        Ok(Self { level })
    }
}

impl JammingStrategy for ConstantJammer {
    fn name(&self) -> &'static str {
        "const"
    }

    fn fill_noise(&mut self, _view: &AdversaryView<'_>, noise: &mut [f64]) {
        noise.iter_mut().for_each(|x| *x = self.level);
    }
}

pub fn reg_jammer(cfg: &AdversaryConfig, mode: RegMode, seed: u64, n: usize) -> Result<Box<dyn JammingStrategy>, ConfigError> {
    Ok(Box::new(RegJammer::new(cfg, mode, seed, n)?))
}

pub fn bur_jammer(cfg: &AdversaryConfig) -> Result<Box<dyn JammingStrategy>, ConfigError> {
    Ok(Box::new(BurJammer::new(cfg)?))
}

pub fn constant_jammer(level: f64) -> Result<Box<dyn JammingStrategy>, ConfigError> {
    Ok(Box::new(ConstantJammer::new(level)?))
}

/// Writes a jam schedule as `round,node,noise` rows.
pub struct JamScheduleWriter<W: Write> {
    out: W,
}

impl<W: Write> JamScheduleWriter<W> {
    pub fn new(mut out: W) -> std::io::Result<Self> {
        writeln!(out, "round,node,noise")?;
        Ok(Self { out })
    }

    pub fn write_round(&mut self, round: u64, noise: &[f64]) -> std::io::Result<()> {
        for (v, level) in noise.iter().enumerate() {
            writeln!(self.out, "{round},{v},{level}")?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> std::io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{sade_init, SadeParams};

    fn defaults() -> AdversaryConfig {
        AdversaryConfig { budget: 2.0 / 3.0, window: 60, epsilon: 1.0 / 3.0, uniform: false }
    }

    fn states(n: usize) -> Vec<NodeState> {
        let p = SadeParams::new(0.1, 1.0 / 24.0).unwrap();
        vec![NodeState::Sade(sade_init(&p)); n]
    }

    fn drive(adv: &mut Adversary, n: usize, rounds: u64) -> Vec<Vec<f64>> {
        let st = states(n);
        (0..rounds)
            .map(|round| {
                let view = AdversaryView { round, states: &st, last_actions: &[] };
                adv.noise_for_round(&view).unwrap().as_slice().to_vec()
            })
            .collect()
    }

    fn window_totals(schedule: &[Vec<f64>], t: usize, v: usize) -> Vec<f64> {
        schedule.chunks(t).map(|w| w.iter().map(|r| r[v]).sum()).collect()
    }

    #[test]
    fn reg_accounting_identity() {
        let cfg = defaults();
        assert!((cfg.jam_level() - 2.0).abs() < 1e-12);
        assert!((cfg.window_cap() - 40.0).abs() < 1e-12);
        let mut adv = Adversary::new(reg_jammer(&cfg, RegMode::Random, 7, 20).unwrap(), &cfg, 20);
        let sched = drive(&mut adv, 20, 600);
        for v in 0..20 {
            for total in window_totals(&sched, 60, v) {
                assert!((total - 40.0).abs() < 1e-9, "node {v}: {total}");
            }
        }
    }

    #[test]
    fn reg_levels_are_full_or_correction() {
        let cfg = defaults();
        let mut adv = Adversary::new(reg_jammer(&cfg, RegMode::Random, 3, 10).unwrap(), &cfg, 10);
        let sched = drive(&mut adv, 10, 600);
        let level = cfg.jam_level();
        let partial = sched.iter().flatten().filter(|&&x| x != 0.0 && (x - level).abs() > 1e-12).count();
        // At most one partial round per node per window.
        assert!(partial <= 10 * 10, "{partial}");
    }

    #[test]
    fn reg_zero_budget_is_silent() {
        let cfg = AdversaryConfig { budget: 0.0, ..defaults() };
        let mut adv = Adversary::new(reg_jammer(&cfg, RegMode::Random, 1, 5).unwrap(), &cfg, 5);
        assert!(drive(&mut adv, 5, 200).iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn reg_is_deterministic() {
        let cfg = defaults();
        let mut a = Adversary::new(reg_jammer(&cfg, RegMode::Random, 9, 8).unwrap(), &cfg, 8);
        let mut b = Adversary::new(reg_jammer(&cfg, RegMode::Random, 9, 8).unwrap(), &cfg, 8);
        assert_eq!(drive(&mut a, 8, 300), drive(&mut b, 8, 300));
    }

    #[test]
    fn reg_jam_frequency() {
        let cfg = defaults();
        let mut adv = Adversary::new(reg_jammer(&cfg, RegMode::Random, 21, 4).unwrap(), &cfg, 4);
        let rounds = 6000;
        let sched = drive(&mut adv, 4, rounds);
        for v in 0..4 {
            let jammed = sched.iter().filter(|r| r[v] > 0.0).count() as f64;
            let q = cfg.epsilon;
            let sigma = (rounds as f64 * q * (1.0 - q)).sqrt();
            assert!((jammed - rounds as f64 * q).abs() < 3.0 * sigma, "node {v}: {jammed}");
        }
    }

    #[test]
    fn reg_uniform_and_strided() {
        let cfg = AdversaryConfig { uniform: true, ..defaults() };
        let mut adv = Adversary::new(reg_jammer(&cfg, RegMode::Random, 4, 6).unwrap(), &cfg, 6);
        assert!(drive(&mut adv, 6, 300).iter().all(|r| r.windows(2).all(|w| w[0] == w[1])));

        let mut adv = Adversary::new(reg_jammer(&defaults(), RegMode::Strided, 4, 3).unwrap(), &defaults(), 3);
        let sched = drive(&mut adv, 3, 60);
        let jammed: Vec<usize> = (0..60).filter(|&k| sched[k][0] > 0.0).collect();
        assert_eq!(jammed, (0..20).map(|i| 3 * i + 2).collect::<Vec<_>>());
    }

    #[test]
    fn bur_schedule() {
        let cfg = AdversaryConfig { uniform: true, ..defaults() };
        let mut adv = Adversary::new(bur_jammer(&cfg).unwrap(), &cfg, 3);
        let sched = drive(&mut adv, 3, 120);
        for (r, row) in sched.iter().enumerate() {
            let expect = if r % 60 < 20 { 2.0 } else { 0.0 };
            assert!(row.iter().all(|&x| (x - expect).abs() < 1e-12), "round {r}");
        }
        for total in window_totals(&sched, 60, 0) {
            assert!((total - 40.0).abs() < 1e-9);
        }
    }

    #[test]
    fn bur_full_epsilon_and_fractional_burst() {
        let cfg = AdversaryConfig { budget: 0.5, window: 10, epsilon: 1.0, uniform: true };
        let mut adv = Adversary::new(bur_jammer(&cfg).unwrap(), &cfg, 2);
        assert!(drive(&mut adv, 2, 30).iter().flatten().all(|&x| x == 0.5));

        // eps*T = 2.5: two full rounds, then half a round.
        let cfg = AdversaryConfig { budget: 1.0, window: 10, epsilon: 0.25, uniform: true };
        let mut adv = Adversary::new(bur_jammer(&cfg).unwrap(), &cfg, 1);
        let sched: Vec<f64> = drive(&mut adv, 1, 10).into_iter().map(|r| r[0]).collect();
        assert_eq!(&sched[..4], &[4.0, 4.0, 2.0, 0.0]);
        assert!((sched.iter().sum::<f64>() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn constant_levels() {
        let cfg = AdversaryConfig { budget: 1.1, window: 60, epsilon: 1.0 / 3.0, uniform: true };
        let mut adv = Adversary::new(constant_jammer(1.1).unwrap(), &cfg, 2);
        let sched = drive(&mut adv, 2, 120);
        assert!(sched.iter().flatten().all(|&x| x == 1.1));
        for total in window_totals(&sched, 60, 1) {
            assert!((total - 1.1 * 60.0).abs() < 1e-9);
        }
        let mut adv = Adversary::new(constant_jammer(0.0).unwrap(), &cfg, 2);
        assert!(drive(&mut adv, 2, 5).iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn ledger_catches_overspend() {
        let cfg = AdversaryConfig { budget: 1.0, window: 10, epsilon: 0.5, uniform: false };
        let mut adv = Adversary::new(constant_jammer(1.5).unwrap(), &cfg, 2);
        let st = states(2);
        let mut failed = None;
        for round in 0..10 {
            let view = AdversaryView { round, states: &st, last_actions: &[] };
            if adv.noise_for_round(&view).is_err() {
                failed = Some(round);
                break;
            }
        }
        // 1.5 * 7 = 10.5 > 10.
        assert_eq!(failed, Some(6));
    }

    #[test]
    fn ledger_window_reset() {
        let cfg = AdversaryConfig { budget: 1.0, window: 2, epsilon: 0.5, uniform: false };
        let mut ledger = BudgetLedger::new(&cfg, 1);
        ledger.record(0, &[2.0]).unwrap();
        assert!(ledger.record(1, &[0.1]).is_err());
        let mut ledger = BudgetLedger::new(&cfg, 1);
        ledger.record(0, &[2.0]).unwrap();
        ledger.record(2, &[2.0]).unwrap();
        assert_eq!(ledger.spent(NodeId(0)), 2.0);
        assert!(ledger.record(3, &[-1.0]).is_err());
    }

    #[test]
    fn schedule_csv() {
        let mut w = JamScheduleWriter::new(Vec::new()).unwrap();
        w.write_round(0, &[0.0, 2.0]).unwrap();
        let out = String::from_utf8(w.finish().unwrap()).unwrap();
        assert_eq!(out, "round,node,noise\n0,0,0\n0,1,2\n");
    }
}
