//! Human-editable TOML configuration.
//!
//! Every key is optional; omitted keys take the reference defaults
//! (`alpha = 3`, `epsilon = 1/3`, `beta = 2`, `power = 8`, `window = 60`,
//! `p_hat = 1/24`, `rounds = 3000`, 500 nodes on a 25 x 25 torus,
//! `jammer = "reg"`, 10 seeds). Unknown keys are errors. Experiment grids
//! live in an `[experiment]` table.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversary::{AdversaryConfig, RegMode};
use crate::engine::{JammerKind, ProtocolSpec, SimConfig, TopologySpec};
use crate::error::{ConfigError, Error};
use crate::protocol::BackoffParams;
use crate::sinr::PhysicalConfig;
use crate::topology::Topology;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JammerChoice {
    None,
    Reg,
    Bur,
    Const,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolChoice {
    Sade,
    Backoff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioChoice {
    Uni,
    Het,
    File,
}

/// Which constant multiplies `1 - epsilon` when `budget` is omitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetReading {
    Theta,
    Beta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Single,
    ScaleSweep,
    DensitySweep,
    HetDensity,
    PowerSweep,
    Convergence,
    Impossibility,
    EpsilonSweep,
    BaselineCompare,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Single => "single",
            ExperimentKind::ScaleSweep => "scale_sweep",
            ExperimentKind::DensitySweep => "density_sweep",
            ExperimentKind::HetDensity => "het_density",
            ExperimentKind::PowerSweep => "power_sweep",
            ExperimentKind::Convergence => "convergence",
            ExperimentKind::Impossibility => "impossibility",
            ExperimentKind::EpsilonSweep => "epsilon_sweep",
            ExperimentKind::BaselineCompare => "baseline_compare",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub out: PathBuf,
    /// Node counts for `scale_sweep` (on a sqrt(n) x sqrt(n) plane) and
    /// `density_sweep` (on the configured plane).
    pub nodes: Vec<usize>,
    /// Path-loss exponents for `scale_sweep`.
    pub alphas: Vec<f64>,
    /// Transmit powers for `power_sweep`.
    pub powers: Vec<f64>,
    /// Jamming slack values for `epsilon_sweep` and `baseline_compare`.
    pub epsilons: Vec<f64>,
    /// Also write the full per-round trace CSV of every run.
    pub write_traces: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::Single,
            out: PathBuf::from("out"),
            nodes: vec![250, 500, 1000, 2000],
            alphas: vec![3.0, 4.0],
            powers: vec![4.0, 8.0, 16.0, 32.0],
            epsilons: vec![0.05, 0.1, 0.2, 1.0 / 3.0, 0.5],
            write_traces: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub alpha: f64,
    pub beta: f64,
    pub theta: f64,
    pub power: f64,
    pub epsilon: f64,
    /// Average jamming power per round; for `jammer = "const"` the level.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<f64>,
    pub budget_reading: BudgetReading,
    pub window: u64,
    pub jammer: JammerChoice,
    pub reg_mode: RegMode,
    pub jam_uniform: bool,
    pub protocol: ProtocolChoice,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub p_hat: f64,
    pub cw_min: u32,
    pub cw_max: u32,
    pub rounds: u64,
    /// First seed; a batch uses `seed .. seed + seeds`.
    pub seed: u64,
    pub seeds: u64,
    pub scenario: ScenarioChoice,
    pub nodes: usize,
    pub width: f64,
    pub height: f64,
    pub het_grid_side: usize,
    pub het_sub_size: f64,
    pub het_lambda_min: usize,
    pub het_lambda_max: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub topology_file: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cell_size: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cutoff: Option<f64>,
    /// Frame length for per-frame CSV output.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frame: Option<u64>,
    pub experiment: ExperimentConfig,
}

impl Default for Config {
    fn default() -> Self {
        let phys = PhysicalConfig::default();
        let backoff = BackoffParams::default();
        Self {
            alpha: phys.alpha,
            beta: phys.beta,
            theta: phys.theta,
            power: phys.power,
            epsilon: phys.epsilon,
            budget: None,
            budget_reading: BudgetReading::Theta,
            window: 60,
            jammer: JammerChoice::Reg,
            reg_mode: RegMode::Random,
            jam_uniform: false,
            protocol: ProtocolChoice::Sade,
            gamma: None,
            p_hat: 1.0 / 24.0,
            cw_min: backoff.cw_min,
            cw_max: backoff.cw_max,
            rounds: 3000,
            seed: 1,
            seeds: 10,
            scenario: ScenarioChoice::Uni,
            nodes: 500,
            width: 25.0,
            height: 25.0,
            het_grid_side: 5,
            het_sub_size: 5.0,
            het_lambda_min: 20,
            het_lambda_max: 1000,
            topology_file: None,
            cell_size: None,
            cutoff: None,
            frame: None,
            experiment: ExperimentConfig::default(),
        }
    }
}

/// Name of the key on the line containing byte `offset`, qualified by the
/// enclosing table header.
fn key_at(text: &str, offset: usize) -> String {
    let mut table = String::new();
    let mut start = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if trimmed.starts_with('[') && !trimmed.starts_with("[[") {
            table = trimmed.trim_matches(|c| c == '[' || c == ']').trim().to_string();
        }
        if offset < start + line.len() {
            let key = trimmed.split('=').next().unwrap_or("").trim().trim_matches('"');
            return match (table.is_empty(), key.is_empty() || trimmed.starts_with('[')) {
                (true, _) => key.to_string(),
                (false, true) => table,
                (false, false) => format!("{table}.{key}"),
            };
        }
        start += line.len();
    }
    table
}

fn from_toml_error(text: &str, e: &toml::de::Error) -> ConfigError {
    let key = match e.span() {
        Some(span) => key_at(text, span.start),
        None => String::new(),
    };
    let key = if key.is_empty() { "<document>".to_string() } else { key };
    ConfigError::invalid(key, e.message().to_string())
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text).map_err(|e| from_toml_error(text, &e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Effective configuration with every defaulted key spelled out, so that
    /// reloading it reproduces the same runs.
    pub fn to_toml_string(&self) -> String {
        let mut resolved = self.clone();
        resolved.budget = Some(self.budget());
        toml::to_string(&resolved).expect("configuration always serializes")
    }

    /// Sets one key, possibly dotted (`experiment.kind`), from its TOML
    /// spelling. Bare words are taken as strings.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let mut root = toml::Table::try_from(&*self).expect("configuration always serializes");
        let mut parts: Vec<&str> = key.split('.').collect();
        let leaf = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| ConfigError::invalid(key, "empty key"))?;
        let mut table = &mut root;
        for part in parts {
            table = match table.get_mut(part) {
                Some(toml::Value::Table(t)) => t,
                _ => return Err(ConfigError::invalid(key, "no such table")),
            };
        }
        table.insert(leaf.to_string(), parsed);
        let updated: Config = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::invalid(key, e.message().to_string()))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn physical(&self) -> PhysicalConfig {
        PhysicalConfig { alpha: self.alpha, beta: self.beta, theta: self.theta, power: self.power, epsilon: self.epsilon }
    }

    pub fn budget(&self) -> f64 {
        self.budget.unwrap_or_else(|| {
            let base = match self.budget_reading {
                BudgetReading::Theta => self.theta,
                BudgetReading::Beta => self.beta,
            };
            (1.0 - self.epsilon) * base
        })
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds).map(|k| self.seed.wrapping_add(k)).collect()
    }

    fn topology_spec(&self) -> Result<TopologySpec, Error> {
        Ok(match self.scenario {
            ScenarioChoice::Uni => TopologySpec::Uniform { n: self.nodes, width: self.width, height: self.height },
            ScenarioChoice::Het => TopologySpec::Het {
                grid_side: self.het_grid_side,
                sub_size: self.het_sub_size,
                lambda_min: self.het_lambda_min,
                lambda_max: self.het_lambda_max,
            },
            ScenarioChoice::File => {
                let path = self
                    .topology_file
                    .as_ref()
                    .ok_or_else(|| ConfigError::invalid("topology_file", "required when scenario = \"file\""))?;
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                TopologySpec::Explicit(Topology::from_text(&text)?)
            }
        })
    }

    /// Resolves into an engine configuration. Reads the topology file for
    /// `scenario = "file"`.
    pub fn to_sim(&self) -> Result<SimConfig, Error> {
        let sim = SimConfig { topology: self.topology_spec()?, ..self.to_sim_unchecked() };
        sim.validate()?;
        Ok(sim)
    }

    /// Resolves into an engine configuration placed on `topology`,
    /// ignoring the scenario keys.
    pub fn to_sim_on(&self, topology: Topology) -> Result<SimConfig, Error> {
        let sim = SimConfig { topology: TopologySpec::Explicit(topology), ..self.to_sim_unchecked() };
        sim.validate()?;
        Ok(sim)
    }

    /// Checks everything that does not need the file system.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.physical().validate()?;
        self.to_sim_unchecked().validate()?;
        if self.seeds < 1 {
            return Err(ConfigError::invalid("seeds", "must be >= 1"));
        }
        if self.frame == Some(0) {
            return Err(ConfigError::invalid("frame", "must be >= 1"));
        }
        for (key, v) in [("width", self.width), ("height", self.height), ("het_sub_size", self.het_sub_size)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ConfigError::invalid(key, "must be positive and finite"));
            }
        }
        if self.het_grid_side < 1 {
            return Err(ConfigError::invalid("het_grid_side", "must be >= 1"));
        }
        if self.het_lambda_min > self.het_lambda_max {
            return Err(ConfigError::invalid("het_lambda_min", "exceeds het_lambda_max"));
        }
        if self.scenario == ScenarioChoice::Uni && self.nodes < 1 {
            return Err(ConfigError::invalid("nodes", "must be >= 1"));
        }
        let ex = &self.experiment;
        let check_grid = |key: &str, empty: bool| {
            if empty {
                Err(ConfigError::invalid(format!("experiment.{key}"), "grid must not be empty"))
            } else {
                Ok(())
            }
        };
        match ex.kind {
            ExperimentKind::ScaleSweep => {
                check_grid("nodes", ex.nodes.is_empty())?;
                check_grid("alphas", ex.alphas.is_empty())?;
            }
            ExperimentKind::DensitySweep => check_grid("nodes", ex.nodes.is_empty())?,
            ExperimentKind::PowerSweep => check_grid("powers", ex.powers.is_empty())?,
            ExperimentKind::EpsilonSweep | ExperimentKind::BaselineCompare => check_grid("epsilons", ex.epsilons.is_empty())?,
            _ => {}
        }
        if ex.nodes.contains(&0) {
            return Err(ConfigError::invalid("experiment.nodes", "node counts must be >= 1"));
        }
        for &a in &ex.alphas {
            PhysicalConfig { alpha: a, ..self.physical() }
                .validate()
                .map_err(|e| ConfigError::invalid("experiment.alphas", e.message))?;
        }
        for &p in &ex.powers {
            PhysicalConfig { power: p, ..self.physical() }
                .validate()
                .map_err(|e| ConfigError::invalid("experiment.powers", e.message))?;
        }
        for &eps in &ex.epsilons {
            PhysicalConfig { epsilon: eps, ..self.physical() }
                .validate()
                .map_err(|e| ConfigError::invalid("experiment.epsilons", e.message))?;
        }
        Ok(())
    }

    /// Engine configuration with a placeholder uniform topology.
    fn to_sim_unchecked(&self) -> SimConfig {
        SimConfig {
            topology: TopologySpec::Uniform { n: self.nodes, width: self.width, height: self.height },
            physical: self.physical(),
            adversary: AdversaryConfig {
                budget: self.budget(),
                window: self.window,
                epsilon: self.epsilon,
                uniform: self.jam_uniform,
            },
            jammer: match self.jammer {
                JammerChoice::None => JammerKind::None,
                JammerChoice::Reg => JammerKind::Reg(self.reg_mode),
                JammerChoice::Bur => JammerKind::Bur,
                JammerChoice::Const => JammerKind::Constant,
            },
            protocol: match self.protocol {
                ProtocolChoice::Sade => ProtocolSpec::Sade { gamma: self.gamma, p_hat: self.p_hat },
                ProtocolChoice::Backoff => ProtocolSpec::Backoff(BackoffParams { cw_min: self.cw_min, cw_max: self.cw_max }),
            },
            rounds: self.rounds,
            seed: self.seed,
            cell_size: self.cell_size,
            cutoff: self.cutoff,
        }
    }
}

/// Reads a configuration file. A relative `topology_file` is resolved
/// against the file's directory.
pub fn load_config(path: impl AsRef<Path>) -> Result<Config, Error> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = Config::from_toml_str(&text)?;
    if let (Some(file), Some(dir)) = (&cfg.topology_file, path.parent()) {
        if file.is_relative() {
            cfg.topology_file = Some(dir.join(file));
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = Config::from_toml_str("").unwrap();
        assert_eq!(cfg, Config::default());
        let sim = cfg.to_sim().unwrap();
        assert_eq!(sim, SimConfig::default());
        assert_eq!(cfg.seed_list(), (1..=10).collect::<Vec<_>>());
        assert!((cfg.budget() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_alpha_two() {
        let e = Config::from_toml_str("alpha = 2").unwrap_err();
        assert_eq!(e.key, "alpha");
    }

    #[test]
    fn unknown_keys_name_their_path() {
        assert_eq!(Config::from_toml_str("alhpa = 3.0").unwrap_err().key, "alhpa");
        let e = Config::from_toml_str("[experiment]\nkind = \"single\"\nnodez = [1]\n").unwrap_err();
        assert_eq!(e.key, "experiment.nodez");
        let e = Config::from_toml_str("rounds = \"many\"").unwrap_err();
        assert_eq!(e.key, "rounds");
        let e = Config::from_toml_str("[experiment]\nkind = \"scale_sweep\"\nnodes = []\n").unwrap_err();
        assert_eq!(e.key, "experiment.nodes");
    }

    #[test]
    fn emitted_config_reloads_identically() {
        let mut cfg = Config::default();
        cfg.apply_override("jammer", "bur").unwrap();
        cfg.apply_override("experiment.kind", "scale_sweep").unwrap();
        cfg.apply_override("gamma", "0.2").unwrap();
        let text = cfg.to_toml_string();
        let back = Config::from_toml_str(&text).unwrap();
        assert_eq!(back.to_sim().unwrap(), cfg.to_sim().unwrap());
        assert_eq!(back.to_toml_string(), text);
    }

    #[test]
    fn overrides() {
        let mut cfg = Config::default();
        cfg.apply_override("epsilon", "0.5").unwrap();
        assert!((cfg.budget() - 0.5).abs() < 1e-15);
        cfg.apply_override("protocol", "backoff").unwrap();
        assert!(matches!(cfg.to_sim().unwrap().protocol, ProtocolSpec::Backoff(_)));
        cfg.apply_override("experiment.nodes", "[10, 20]").unwrap();
        assert_eq!(cfg.experiment.nodes, vec![10, 20]);
        assert_eq!(cfg.apply_override("nope", "1").unwrap_err().key, "nope");
        assert_eq!(cfg.apply_override("alpha", "1.5").unwrap_err().key, "alpha");
        assert_eq!(cfg.apply_override("seed.x", "1").unwrap_err().key, "seed.x");
        assert_eq!(cfg.apply_override("jammer", "loud").unwrap_err().key, "jammer");
    }

    #[test]
    fn literal_budget_reading() {
        let cfg = Config::from_toml_str("budget_reading = \"beta\"").unwrap();
        assert!((cfg.budget() - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn file_scenario() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("t.txt"), "10 10 2\n1 1\n2 2\n").unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "scenario = \"file\"\ntopology_file = \"t.txt\"\n").unwrap();
        let sim = load_config(&path).unwrap().to_sim().unwrap();
        match sim.topology {
            TopologySpec::Explicit(t) => assert_eq!(t.len(), 2),
            other => panic!("{other:?}"),
        }
        let cfg = Config::from_toml_str("scenario = \"file\"").unwrap();
        assert!(matches!(cfg.to_sim(), Err(Error::Config(e)) if e.key == "topology_file"));
    }
}
