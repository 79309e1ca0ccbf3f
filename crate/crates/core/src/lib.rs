//! Round-based medium access simulation under the SINR interference model
//! with energy-budget-bounded jamming.
//!
//! The physical layer lives in [`sinr`], node placement in [`topology`],
//! jammers in [`adversary`], the MAC state machines in [`protocol`], and
//! the round loop in [`engine`]. [`metrics`] post-processes traces and
//! [`experiment`] drives parameter sweeps.

pub mod adversary;
pub mod check;
pub mod config;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod protocol;
pub mod sinr;
pub mod topology;
pub mod trace_io;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use error::{ConfigError, Error};

/// Dense node identifier, assigned in generation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for NodeId {
    fn from(i: usize) -> Self {
        NodeId(u32::try_from(i).expect("node id overflows u32"))
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
