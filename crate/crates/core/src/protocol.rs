//! Per-node MAC state machines.
//!
//! [`SadeState`] is the multiplicative-update protocol: each node sends with
//! probability `p`, lowers `p` on every successful reception, raises it on
//! idle steps, and keeps a window estimate `T_est` that grows while the
//! channel never goes idle. [`BackoffState`] is a slotted binary exponential
//! backoff used as a comparison baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::sinr::Observation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Transmit,
    Listen,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SadeParams {
    pub gamma: f64,
    pub p_hat: f64,
}

impl SadeParams {
    pub fn new(gamma: f64, p_hat: f64) -> Result<Self, ConfigError> {
        let params = Self { gamma, p_hat };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(ConfigError::invalid("gamma", "must lie in (0, 1]"));
        }
        if !(self.p_hat > 0.0 && self.p_hat < 1.0) {
            return Err(ConfigError::invalid("p_hat", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// `1 / (ln T + ln ln n)`, clamped to `[0.01, 0.5]`.
pub fn default_gamma(window: u64, n: usize) -> f64 {
    let log_t = (window.max(1) as f64).ln();
    let log_log_n = (n.max(3) as f64).ln().max(1.0).ln();
    let denom = log_t + log_log_n;
    if denom <= 0.0 {
        return 0.5;
    }
    (1.0 / denom).clamp(0.01, 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SadeState {
    pub p: f64,
    pub t_est: u32,
    pub c: u32,
    /// Whether an idle step occurred since the counter last wrapped.
    pub idle_in_window: bool,
}

/// Smallest probability a decrease can reach; keeps `p > 0` on very long runs.
pub const P_FLOOR: f64 = f64::MIN_POSITIVE;

#[inline]
fn decrease(p: f64, gamma: f64) -> f64 {
    (p / (1.0 + gamma)).max(P_FLOOR)
}

pub fn sade_init(params: &SadeParams) -> SadeState {
    SadeState { p: params.p_hat, t_est: 1, c: 1, idle_in_window: false }
}

/// Transmit with probability exactly `state.p`; consumes one draw.
pub fn sade_decide<R: Rng + ?Sized>(state: &SadeState, rng: &mut R) -> Action {
    if rng.gen::<f64>() < state.p {
        Action::Transmit
    } else {
        Action::Listen
    }
}

pub fn sade_update(state: &SadeState, obs: Observation, params: &SadeParams) -> SadeState {
    let mut s = *state;
    let gamma = params.gamma;
    match obs {
        Observation::Received(_) => s.p = decrease(s.p, gamma),
        Observation::Idle => {
            s.p = ((1.0 + gamma) * s.p).min(params.p_hat);
            s.t_est = s.t_est.saturating_sub(1).max(1);
            s.idle_in_window = true;
        }
        Observation::Busy | Observation::Sent => {}
    }
    s.c += 1;
    if s.c > s.t_est {
        s.c = 1;
        if !s.idle_in_window {
            s.p = decrease(s.p, gamma);
            s.t_est = s.t_est.saturating_add(2);
        }
        s.idle_in_window = false;
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackoffParams {
    pub cw_min: u32,
    pub cw_max: u32,
}

impl Default for BackoffParams {
    fn default() -> Self {
        Self { cw_min: 2, cw_max: 1024 }
    }
}

impl BackoffParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.cw_min < 1 {
            return Err(ConfigError::invalid("cw_min", "must be >= 1"));
        }
        if self.cw_max < self.cw_min {
            return Err(ConfigError::invalid("cw_max", "must be >= cw_min"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackoffState {
    pub contention_window: u32,
    pub timer: u32,
}

pub fn backoff_init<R: Rng + ?Sized>(params: &BackoffParams, rng: &mut R) -> BackoffState {
    BackoffState { contention_window: params.cw_min, timer: rng.gen_range(0..params.cw_min) }
}

/// Transmit when the timer has run out.
pub fn backoff_decide(state: &BackoffState) -> Action {
    if state.timer == 0 {
        Action::Transmit
    } else {
        Action::Listen
    }
}

/// `delivered` is the acknowledgement surrogate: whether any node decoded
/// this node's transmission. It is ignored unless `obs` is `Sent`.
pub fn backoff_update<R: Rng + ?Sized>(
    state: &BackoffState,
    obs: Observation,
    delivered: bool,
    params: &BackoffParams,
    rng: &mut R,
) -> BackoffState {
    let mut s = *state;
    match obs {
        Observation::Sent => {
            s.contention_window = if delivered {
                params.cw_min
            } else {
                s.contention_window.saturating_mul(2).min(params.cw_max)
            };
            s.timer = rng.gen_range(0..s.contention_window);
        }
        Observation::Idle => s.timer = s.timer.saturating_sub(1),
        // Frozen while the medium is busy.
        Observation::Busy | Observation::Received(_) => {}
    }
    s
}

/// Protocol with all parameters resolved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Protocol {
    Sade(SadeParams),
    Backoff(BackoffParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NodeState {
    Sade(SadeState),
    Backoff(BackoffState),
}

impl NodeState {
    /// Per-round access probability. For backoff this is the renewal rate
    /// `2 / (cw + 1)` of a uniform timer draw.
    pub fn send_probability(&self) -> f64 {
        match self {
            NodeState::Sade(s) => s.p,
            NodeState::Backoff(b) => 2.0 / (b.contention_window as f64 + 1.0),
        }
    }

    pub fn as_sade(&self) -> Option<&SadeState> {
        match self {
            NodeState::Sade(s) => Some(s),
            NodeState::Backoff(_) => None,
        }
    }
}
