//! Run configuration: TOML with every key optional except where noted,
//! unknown keys rejected, validated before any compute.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::generation::GenConfig;
use crate::model::{ModelConfig, TrainConfig};
use crate::oracles::{validate_costs, ExternalCommand, SyntheticEnvConfig};

/// Which comparison the run performs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mode {
    #[default]
    Full,
    /// Likelihood weight forced to zero.
    NoLikelihood,
    /// Only the top oracle, with a one-level model.
    SingleFidelity,
    /// The full ladder minus one fidelity (1-based, never the top).
    DropFidelity(usize),
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Full => f.write_str("full"),
            Mode::NoLikelihood => f.write_str("no_likelihood"),
            Mode::SingleFidelity => f.write_str("single_fidelity"),
            Mode::DropFidelity(j) => write!(f, "drop_fidelity_{j}"),
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "no_likelihood" => Ok(Mode::NoLikelihood),
            "single_fidelity" => Ok(Mode::SingleFidelity),
            _ => s
                .strip_prefix("drop_fidelity_")
                .and_then(|j| j.parse().ok())
                .filter(|&j| j >= 1)
                .map(Mode::DropFidelity)
                .ok_or_else(|| {
                    Error::config(
                        "mode",
                        format!("unknown mode {s:?}; expected full, no_likelihood, single_fidelity or drop_fidelity_<j>"),
                    )
                }),
        }
    }
}

impl Serialize for Mode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Mode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    #[default]
    Synthetic,
    External,
}

/// Oracle ladder. Synthetic fields are ignored for `external` and vice versa.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub kind: EnvKind,
    /// Defaults to the run seed.
    pub seed: Option<u64>,
    pub alphabet_size: usize,
    pub length: usize,
    pub rho: Vec<f64>,
    pub noise: Vec<f64>,
    pub costs: Vec<f64>,
    pub pair_scale: f64,
    /// One command template per fidelity for `external`.
    pub commands: Vec<String>,
    pub timeout_secs: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            kind: EnvKind::Synthetic,
            seed: None,
            alphabet_size: 12,
            length: 10,
            rho: vec![0.5, 0.75, 0.9, 1.0],
            noise: vec![1.0, 0.5, 0.2, 0.0],
            costs: vec![1.0, 10.0, 100.0, 1000.0],
            pair_scale: 0.5,
            commands: Vec::new(),
            timeout_secs: 60.0,
        }
    }
}

impl EnvConfig {
    pub fn fidelities(&self) -> usize {
        self.costs.len()
    }

    pub fn synthetic(&self, run_seed: u64) -> SyntheticEnvConfig {
        SyntheticEnvConfig {
            seed: self.seed.unwrap_or(run_seed),
            alphabet_size: self.alphabet_size,
            length: self.length,
            rho: self.rho.clone(),
            noise: self.noise.clone(),
            costs: self.costs.clone(),
            pair_scale: self.pair_scale,
        }
    }

    pub fn external_commands(&self) -> Vec<ExternalCommand> {
        self.commands
            .iter()
            .map(|t| ExternalCommand { template: t.clone(), timeout_secs: self.timeout_secs })
            .collect()
    }

    fn validate(&self, run_seed: u64) -> Result<()> {
        match self.kind {
            EnvKind::Synthetic => self.synthetic(run_seed).validate(),
            EnvKind::External => {
                if self.alphabet_size < 2 {
                    return Err(Error::config("env.alphabet_size", "must be at least 2"));
                }
                if self.length == 0 {
                    return Err(Error::config("env.length", "must be positive"));
                }
                validate_costs(&self.costs, "env.costs")?;
                if self.commands.len() != self.costs.len() {
                    return Err(Error::config("env.commands", "need exactly one command per cost"));
                }
                for (i, c) in self.external_commands().iter().enumerate() {
                    c.validate(&format!("env.commands[{i}]"))?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActiveLearningConfig {
    /// Random seeds evaluated at the lowest fidelity.
    pub n_low: usize,
    /// Random seeds evaluated at each higher fidelity.
    pub n_high: usize,
    /// Escalation thresholds on relative posterior variance, one per
    /// fidelity below the top. Defaults to 0.5 each.
    pub gamma: Option<Vec<f64>>,
    pub max_regenerations: usize,
    pub retrain_every: usize,
    pub n_final: usize,
    pub final_attempts: usize,
}

impl Default for ActiveLearningConfig {
    fn default() -> Self {
        Self {
            n_low: 2000,
            n_high: 5,
            gamma: None,
            max_regenerations: 5,
            retrain_every: 1,
            n_final: 15,
            final_attempts: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    pub max_cost: f64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self { max_cost: 20_000.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: Mode,
    pub env: EnvConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generation: GenConfig,
    pub active_learning: ActiveLearningConfig,
    pub budget: BudgetConfig,
}

/// The ladder a mode actually uses.
#[derive(Clone, Debug, PartialEq)]
pub struct Ladder {
    /// Oracle fidelity (1-based) behind each model level.
    pub oracle_fidelity: Vec<usize>,
    pub gamma: Vec<f64>,
}

impl Ladder {
    pub fn levels(&self) -> usize {
        self.oracle_fidelity.len()
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let field = e.message().split('`').nth(1).unwrap_or("<document>").to_string();
            Error::config(field, e.to_string().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), format!("cannot read: {e}")))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn gamma(&self) -> Vec<f64> {
        let k = self.env.fidelities();
        self.active_learning.gamma.clone().unwrap_or_else(|| vec![0.5; k.saturating_sub(1)])
    }

    pub fn ladder(&self) -> Ladder {
        let k = self.env.fidelities();
        let gamma = self.gamma();
        match self.mode {
            Mode::Full | Mode::NoLikelihood => Ladder { oracle_fidelity: (1..=k).collect(), gamma },
            Mode::SingleFidelity => Ladder { oracle_fidelity: vec![k], gamma: Vec::new() },
            Mode::DropFidelity(j) => Ladder {
                oracle_fidelity: (1..=k).filter(|&f| f != j).collect(),
                gamma: gamma.iter().enumerate().filter(|&(i, _)| i + 1 != j).map(|(_, &g)| g).collect(),
            },
        }
    }

    /// Generation settings after the mode's overrides.
    pub fn effective_generation(&self) -> GenConfig {
        let mut g = self.generation.clone();
        if self.mode == Mode::NoLikelihood {
            g.lambda_lik = 0.0;
        }
        g
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate(self.seed)?;
        self.model.validate()?;
        self.train.validate()?;
        self.generation.validate()?;
        let k = self.env.fidelities();
        if let Some(gamma) = &self.active_learning.gamma {
            if k == 1 {
                return Err(Error::config("active_learning.gamma", "a single fidelity has no escalation thresholds"));
            }
            if gamma.len() != k - 1 {
                return Err(Error::config(
                    "active_learning.gamma",
                    format!("need {} thresholds for {k} fidelities, got {}", k - 1, gamma.len()),
                ));
            }
            if gamma.iter().any(|g| g.is_nan() || *g < 0.0) {
                return Err(Error::config("active_learning.gamma", "thresholds must be non-negative"));
            }
        }
        let al = &self.active_learning;
        for (name, v) in [
            ("active_learning.n_low", al.n_low),
            ("active_learning.retrain_every", al.retrain_every),
            ("active_learning.n_final", al.n_final),
            ("active_learning.final_attempts", al.final_attempts),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if k > 1 && al.n_high == 0 && matches!(self.mode, Mode::SingleFidelity) {
            return Err(Error::config("active_learning.n_high", "single-fidelity runs seed the top fidelity with n_high"));
        }
        if !(self.budget.max_cost > 0.0 && self.budget.max_cost.is_finite()) {
            return Err(Error::config("budget.max_cost", "must be positive and finite"));
        }
        if let Mode::DropFidelity(j) = self.mode {
            if j == 0 || j >= k {
                return Err(Error::config("mode", format!("can only drop fidelities 1..{}, not {j}", k.saturating_sub(1))));
            }
        }
        let ladder = self.ladder();
        let seed_cost = self.seeding_cost(&ladder);
        if seed_cost > self.budget.max_cost {
            return Err(Error::config(
                "budget.max_cost",
                format!("seeding alone costs {seed_cost}, above the budget {}", self.budget.max_cost),
            ));
        }
        Ok(())
    }

    /// Cost of the initial random data for `ladder`.
    pub fn seeding_cost(&self, ladder: &Ladder) -> f64 {
        let costs = &self.env.costs;
        ladder
            .oracle_fidelity
            .iter()
            .enumerate()
            .map(|(i, &f)| self.seed_count(ladder, i + 1) as f64 * costs[f - 1])
            .sum()
    }

    /// Seeds at model level `level` of `ladder`.
    pub fn seed_count(&self, ladder: &Ladder, level: usize) -> usize {
        if level == 1 && ladder.levels() > 1 {
            self.active_learning.n_low
        } else {
            self.active_learning.n_high
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_is_fully_defaulted() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.gamma(), vec![0.5; 3]);
        assert_eq!(cfg.seeding_cost(&cfg.ladder()), 2000.0 + 50.0 + 500.0 + 5000.0);
        let echo = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(echo, cfg);
    }

    fn field_of(text: &str) -> String {
        match RunConfig::from_toml(text).unwrap_err() {
            Error::Config { field, .. } => field,
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn rejections_name_the_field() {
        assert_eq!(field_of("[budget]\nmax_cost = -5.0"), "budget.max_cost");
        assert_eq!(field_of("[model]\nlatent_dim = 0"), "model.latent_dim");
        assert_eq!(field_of("bogus = 1"), "bogus");
        assert_eq!(field_of("[train]\nlr = 0.1"), "lr");
        assert_eq!(field_of("mode = \"sideways\""), "mode");
        assert_eq!(field_of("mode = \"drop_fidelity_4\""), "mode");
        assert_eq!(field_of("[active_learning]\ngamma = [0.5]"), "active_learning.gamma");
    }

    #[test]
    fn single_fidelity_with_gamma_rejected() {
        let text = "[env]\nrho = [1.0]\nnoise = [0.0]\ncosts = [1.0]\n[active_learning]\ngamma = []\nn_high = 1\n";
        assert_eq!(field_of(text), "active_learning.gamma");
        let ok = "[env]\nrho = [1.0]\nnoise = [0.0]\ncosts = [1.0]\n[budget]\nmax_cost = 5000.0\n";
        assert_eq!(RunConfig::from_toml(ok).unwrap().ladder().levels(), 1);
    }

    #[test]
    fn infinite_gamma_parses() {
        let cfg = RunConfig::from_toml("[active_learning]\ngamma = [inf, inf, 0.0]").unwrap();
        assert!(cfg.gamma()[0].is_infinite());
    }

    #[test]
    fn mode_ladders() {
        let mut cfg = RunConfig::default();
        cfg.active_learning.gamma = Some(vec![0.1, 0.2, 0.3]);
        cfg.mode = Mode::DropFidelity(2);
        let l = cfg.ladder();
        assert_eq!(l.oracle_fidelity, vec![1, 3, 4]);
        assert_eq!(l.gamma, vec![0.1, 0.3]);
        cfg.mode = Mode::SingleFidelity;
        assert_eq!(cfg.ladder().oracle_fidelity, vec![4]);
        assert_eq!(cfg.seeding_cost(&cfg.ladder()), 5000.0);
        cfg.mode = Mode::NoLikelihood;
        assert_eq!(cfg.effective_generation().lambda_lik, 0.0);
        for m in ["full", "no_likelihood", "single_fidelity", "drop_fidelity_3"] {
            assert_eq!(m.parse::<Mode>().unwrap().to_string(), m);
        }
    }

    #[test]
    fn seeding_over_budget_rejected() {
        assert_eq!(field_of("[budget]\nmax_cost = 7000.0"), "budget.max_cost");
    }

    #[test]
    fn external_env_validation() {
        let text = "[env]\nkind = \"external\"\ncosts = [1.0, 2.0]\ncommands = [\"echo {seq}\", \"echo 1\"]\n[budget]\nmax_cost = 1e9\n";
        assert_eq!(field_of(text), "env.commands[1]");
    }
}
