//! Cost-tiered oracles: a synthetic ladder over a hidden pairwise-additive
//! objective, and an adapter for external scoring programs.
//!
//! All scores follow the "lower is better" convention.

use std::io::Read;
use std::process::{Command, Stdio};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::error::{Error, Result};
use crate::representation::{Alphabet, Sequence};

/// Environment variable overriding every external oracle timeout, in seconds.
pub const TIMEOUT_ENV: &str = "MFLO_ORACLE_TIMEOUT_SECS";

const SCALE_SAMPLES: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEnvConfig {
    pub seed: u64,
    pub alphabet_size: usize,
    pub length: usize,
    /// Weight of the true objective in each fidelity, increasing, last = 1.
    pub rho: Vec<f64>,
    /// Observation noise std per fidelity, non-increasing, last = 0.
    pub noise: Vec<f64>,
    pub costs: Vec<f64>,
    /// Std of the pairwise interaction weights.
    pub pair_scale: f64,
}

impl SyntheticEnvConfig {
    pub fn fidelities(&self) -> usize {
        self.rho.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.rho.len();
        if k == 0 {
            return Err(Error::config("env.rho", "needs at least one fidelity"));
        }
        if self.noise.len() != k || self.costs.len() != k {
            return Err(Error::config(
                "env",
                format!("rho, noise and costs must have equal lengths ({k}, {}, {})", self.noise.len(), self.costs.len()),
            ));
        }
        if self.alphabet_size < 2 {
            return Err(Error::config("env.alphabet_size", "must be at least 2"));
        }
        if self.length == 0 {
            return Err(Error::config("env.length", "must be positive"));
        }
        if self.rho.iter().any(|&r| !(r > 0.0 && r <= 1.0)) || self.rho[k - 1] != 1.0 {
            return Err(Error::config("env.rho", "entries must lie in (0, 1] and end at 1"));
        }
        if self.rho.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("env.rho", "must be strictly increasing"));
        }
        if self.noise.iter().any(|&s| !(s >= 0.0 && s.is_finite())) || self.noise[k - 1] != 0.0 {
            return Err(Error::config("env.noise", "entries must be finite, non-negative and end at 0"));
        }
        if self.noise.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::config("env.noise", "must be non-increasing"));
        }
        validate_costs(&self.costs, "env.costs")?;
        if !(self.pair_scale >= 0.0 && self.pair_scale.is_finite()) {
            return Err(Error::config("env.pair_scale", "must be finite and non-negative"));
        }
        Ok(())
    }
}

pub(crate) fn validate_costs(costs: &[f64], field: &str) -> Result<()> {
    if costs.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
        return Err(Error::config(field, "costs must be positive and finite"));
    }
    if costs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(field, "costs must be strictly increasing"));
    }
    Ok(())
}

/// Hidden objective `g(x) = sum_i w[i, x_i] + sum_i w2[i, x_i, x_{i+1}]`
/// and its distorted, noisy views `f_k`.
#[derive(Clone, Debug)]
pub struct SyntheticEnv {
    config: SyntheticEnvConfig,
    unary: Vec<f64>,
    pairwise: Vec<f64>,
    /// Multiplier bringing each raw distortion to the spread of `g`.
    distortion_scale: Vec<f64>,
}

impl SyntheticEnv {
    pub fn new(config: SyntheticEnvConfig) -> Result<Self> {
        config.validate()?;
        let (a, l) = (config.alphabet_size, config.length);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let unary = (0..l * a).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let pairwise = (0..l.saturating_sub(1) * a * a)
            .map(|_| config.pair_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::from_tables(config, unary, pairwise)
    }

    /// `unary` is `[L, A]`, `pairwise` is `[L - 1, A, A]`, both row-major.
    pub fn from_tables(config: SyntheticEnvConfig, unary: Vec<f64>, pairwise: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let (a, l) = (config.alphabet_size, config.length);
        if unary.len() != l * a || pairwise.len() != l.saturating_sub(1) * a * a {
            return Err(Error::InvalidArgument("weight tables do not match L and A".into()));
        }
        let mut env = Self { config, unary, pairwise, distortion_scale: Vec::new() };
        env.distortion_scale = env.fit_distortion_scales();
        Ok(env)
    }

    pub fn config(&self) -> &SyntheticEnvConfig {
        &self.config
    }

    pub fn alphabet(&self) -> Alphabet {
        Alphabet::with_size(self.config.alphabet_size).expect("validated alphabet size")
    }

    fn fit_distortion_scales(&self) -> Vec<f64> {
        let alphabet = self.alphabet();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5ca1_ab1e);
        let xs: Vec<Sequence> = (0..SCALE_SAMPLES)
            .map(|_| Sequence::random(&alphabet, self.config.length, &mut rng))
            .collect();
        let g: Vec<f64> = xs.iter().map(|x| self.true_score(x)).collect();
        let g_std = std_dev(&g);
        (1..=self.config.fidelities())
            .map(|k| {
                let d: Vec<f64> = xs.iter().map(|x| self.raw_distortion(x, k)).collect();
                let d_std = std_dev(&d);
                if d_std > 0.0 {
                    g_std / d_std
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn true_score(&self, x: &Sequence) -> f64 {
        let a = self.config.alphabet_size;
        let ids = x.ids();
        let mut s = 0.0;
        for (i, &t) in ids.iter().enumerate() {
            s += self.unary[i * a + t];
        }
        for (i, w) in ids.windows(2).enumerate() {
            s += self.pairwise[(i * a + w[0]) * a + w[1]];
        }
        s
    }

    /// Sum of hashed Gaussian values over token trigrams (one window when
    /// `L < 3`), keyed by position and fidelity.
    fn raw_distortion(&self, x: &Sequence, k: usize) -> f64 {
        let ids = x.ids();
        let w = ids.len().min(3);
        ids.windows(w)
            .enumerate()
            .map(|(i, win)| {
                let mut h = self.config.seed ^ 0xd15c_0000_0000_0000 ^ ((k as u64) << 40) ^ ((i as u64) << 24);
                for &t in win {
                    h = splitmix64(h ^ t as u64);
                }
                hashed_normal(h)
            })
            .sum()
    }

    pub fn distortion(&self, x: &Sequence, k: usize) -> f64 {
        self.distortion_scale[k - 1] * self.raw_distortion(x, k)
    }

    /// `f_k(x)` for the `index`-th query at fidelity `k`.
    pub fn score(&self, x: &Sequence, k: usize, index: u64) -> Result<f64> {
        let kk = self.config.fidelities();
        if k == 0 || k > kk {
            return Err(Error::FidelityOutOfRange { k, max: kk });
        }
        if x.len() != self.config.length || x.ids().iter().any(|&t| t >= self.config.alphabet_size) {
            return Err(Error::InvalidSequence(format!("sequence does not fit L={}, A={}", self.config.length, self.config.alphabet_size)));
        }
        let rho = self.config.rho[k - 1];
        let g = self.true_score(x);
        if rho == 1.0 && self.config.noise[k - 1] == 0.0 {
            return Ok(g);
        }
        let sigma = self.config.noise[k - 1];
        let eps = if sigma > 0.0 {
            let seed = splitmix64(self.config.seed ^ splitmix64(((k as u64) << 48) ^ index));
            sigma * ChaCha8Rng::seed_from_u64(seed).sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        Ok(rho * g + (1.0 - rho) * self.distortion(x, k) + eps)
    }

    /// Exact minimizer of `g` by dynamic programming over positions.
    pub fn optimum(&self) -> (Sequence, f64) {
        let (a, l) = (self.config.alphabet_size, self.config.length);
        let mut best: Vec<f64> = self.unary[..a].to_vec();
        let mut back = vec![vec![0usize; a]; l];
        for i in 1..l {
            let mut next = vec![f64::INFINITY; a];
            for t in 0..a {
                for p in 0..a {
                    let v = best[p] + self.pairwise[((i - 1) * a + p) * a + t];
                    if v < next[t] {
                        next[t] = v;
                        back[i][t] = p;
                    }
                }
                next[t] += self.unary[i * a + t];
            }
            best = next;
        }
        let mut t = (0..a).fold(0, |b, j| if best[j] < best[b] { j } else { b });
        let value = best[t];
        let mut ids = vec![0; l];
        for i in (0..l).rev() {
            ids[i] = t;
            t = back[i][t];
        }
        (Sequence::new(ids, &self.alphabet()).expect("ids within alphabet"), value)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Standard normal from a 64-bit hash via Box-Muller.
fn hashed_normal(h: u64) -> f64 {
    let u1 = ((h >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
    let u2 = ((splitmix64(h) >> 11) as f64) / (1u64 << 53) as f64;
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// A program that prints one float for a sequence substituted into a
/// whitespace-split, shell-quoted template at every `{seq}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalCommand {
    pub template: String,
    pub timeout_secs: f64,
}

impl ExternalCommand {
    pub fn validate(&self, field: &str) -> Result<()> {
        let argv = shlex::split(&self.template)
            .ok_or_else(|| Error::config(field, "template is not valid shell syntax"))?;
        if argv.is_empty() {
            return Err(Error::config(field, "template is empty"));
        }
        if !self.template.contains("{seq}") {
            return Err(Error::config(field, "template lacks a {seq} placeholder"));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(Error::config(field, "timeout must be positive"));
        }
        Ok(())
    }

    fn timeout(&self) -> Duration {
        let secs = std::env::var(TIMEOUT_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<f64>().ok())
            .filter(|v| *v > 0.0)
            .unwrap_or(self.timeout_secs);
        Duration::from_secs_f64(secs)
    }

    pub fn run(&self, seq: &str) -> Result<f64> {
        let argv: Vec<String> = shlex::split(&self.template)
            .ok_or_else(|| Error::Oracle("template is not valid shell syntax".into()))?
            .into_iter()
            .map(|a| a.replace("{seq}", seq))
            .collect();
        let (prog, args) = argv.split_first().ok_or_else(|| Error::Oracle("empty template".into()))?;
        let mut child = Command::new(prog)
            .args(args)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| Error::Oracle(format!("cannot start {prog}: {e}")))?;
        let timeout = self.timeout();
        let status = match child.wait_timeout(timeout).map_err(|e| Error::Oracle(e.to_string()))? {
            Some(s) => s,
            None => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Error::Oracle(format!("timed out after {:.3}s", timeout.as_secs_f64())));
            }
        };
        let mut out = String::new();
        if let Some(mut stdout) = child.stdout.take() {
            stdout.read_to_string(&mut out).map_err(|e| Error::Oracle(e.to_string()))?;
        }
        if !status.success() {
            return Err(Error::Oracle(format!("exited with {status}")));
        }
        let text = out.trim();
        let y: f64 = text
            .parse()
            .map_err(|_| Error::Oracle(format!("cannot parse {text:?} as a float")))?;
        if !y.is_finite() {
            return Err(Error::Oracle(format!("non-finite output {text:?}")));
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub enum Backend {
    Synthetic(SyntheticEnv),
    External { commands: Vec<ExternalCommand>, alphabet: Alphabet },
}

/// Ledger account a query is charged to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Account {
    /// Seeding and active learning; bounded by the run budget.
    Budget,
    /// Final scoring of generated designs; reported separately.
    Evaluation,
}

/// Exact per-fidelity query counts and spend.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub costs: Vec<f64>,
    pub budget_counts: Vec<u64>,
    pub evaluation_counts: Vec<u64>,
}

impl CostLedger {
    pub fn new(costs: Vec<f64>) -> Self {
        let k = costs.len();
        Self { costs, budget_counts: vec![0; k], evaluation_counts: vec![0; k] }
    }

    fn charge(&mut self, k: usize, account: Account) {
        match account {
            Account::Budget => self.budget_counts[k - 1] += 1,
            Account::Evaluation => self.evaluation_counts[k - 1] += 1,
        }
    }

    fn total(&self, counts: &[u64]) -> f64 {
        counts.iter().zip(&self.costs).map(|(&n, &c)| n as f64 * c).sum()
    }

    /// Spend counted against the budget.
    pub fn spent(&self) -> f64 {
        self.total(&self.budget_counts)
    }

    pub fn evaluation_spent(&self) -> f64 {
        self.total(&self.evaluation_counts)
    }

    /// Queries issued so far at fidelity `k` across both accounts.
    pub fn issued(&self, k: usize) -> u64 {
        self.budget_counts[k - 1] + self.evaluation_counts[k - 1]
    }
}

/// Result of one charged query. `score` is `Err` for failed queries.
#[derive(Clone, Debug)]
pub struct QueryOutcome {
    pub score: std::result::Result<f64, String>,
    pub cost: f64,
}

/// Oracle ladder plus its ledger.
#[derive(Clone, Debug)]
pub struct OracleSuite {
    backend: Backend,
    ledger: CostLedger,
}

impl OracleSuite {
    pub fn synthetic(env: SyntheticEnv) -> Self {
        let ledger = CostLedger::new(env.config().costs.clone());
        Self { backend: Backend::Synthetic(env), ledger }
    }

    pub fn external(commands: Vec<ExternalCommand>, costs: Vec<f64>, alphabet: Alphabet) -> Result<Self> {
        if commands.len() != costs.len() || commands.is_empty() {
            return Err(Error::config("oracle.commands", "need one command per fidelity cost"));
        }
        validate_costs(&costs, "oracle.costs")?;
        for (i, c) in commands.iter().enumerate() {
            c.validate(&format!("oracle.commands[{i}]"))?;
        }
        Ok(Self { backend: Backend::External { commands, alphabet }, ledger: CostLedger::new(costs) })
    }

    pub fn fidelities(&self) -> usize {
        self.ledger.costs.len()
    }

    pub fn cost(&self, k: usize) -> f64 {
        self.ledger.costs[k - 1]
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.ledger
    }

    pub fn restore_ledger(&mut self, ledger: CostLedger) -> Result<()> {
        if ledger.costs != self.ledger.costs {
            return Err(Error::Checkpoint("ledger costs do not match the oracle suite".into()));
        }
        self.ledger = ledger;
        Ok(())
    }

    pub fn backend(&self) -> &Backend {
        &self.backend
    }

    /// Hidden ground truth, when the backend has one.
    pub fn true_score(&self, x: &Sequence) -> Option<f64> {
        match &self.backend {
            Backend::Synthetic(env) => Some(env.true_score(x)),
            Backend::External { .. } => None,
        }
    }

    /// Queries fidelity `k` and charges `account`, whether or not it succeeds.
    pub fn evaluate(&mut self, x: &Sequence, k: usize, account: Account) -> Result<QueryOutcome> {
        let kk = self.fidelities();
        if k == 0 || k > kk {
            return Err(Error::FidelityOutOfRange { k, max: kk });
        }
        let index = self.ledger.issued(k);
        let score = match &self.backend {
            Backend::Synthetic(env) => env.score(x, k, index).map_err(|e| e.to_string()),
            Backend::External { commands, alphabet } => {
                commands[k - 1].run(&x.render(alphabet)).map_err(|e| e.to_string())
            }
        };
        self.ledger.charge(k, account);
        Ok(QueryOutcome { score, cost: self.cost(k) })
    }
}

/// Pearson correlation of each fidelity with the top one over `n` random
/// sequences, using a scratch copy so no ledger is touched.
pub fn correlation_ladder(env: &SyntheticEnv, n: usize, seed: u64) -> Result<Vec<f64>> {
    let alphabet = env.alphabet();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<Sequence> = (0..n).map(|_| Sequence::random(&alphabet, env.config().length, &mut rng)).collect();
    let g: Vec<f64> = xs.iter().map(|x| env.true_score(x)).collect();
    (1..=env.config().fidelities())
        .map(|k| {
            let f = xs
                .iter()
                .enumerate()
                .map(|(i, x)| env.score(x, k, i as u64))
                .collect::<Result<Vec<f64>>>()?;
            Ok(pearson(&f, &g))
        })
        .collect()
}
