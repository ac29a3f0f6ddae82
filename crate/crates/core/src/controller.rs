//! The multi-fidelity active learning loop: seed, fit, then repeatedly
//! generate a query at the current level, escalate when the surrogate is
//! confident there, and retrain; finally generate designs at the top level
//! and score them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{EnvKind, Ladder, RunConfig};
use crate::dataset::MultiFidelityDataset;
use crate::error::{Error, Result};
use crate::generation::{generate_high_scoring, GenConfig, Generated};
use crate::model::{fit, MfModel, TrainStats};
use crate::oracles::{Account, CostLedger, OracleSuite, SyntheticEnv};
use crate::representation::{decode_sample, Alphabet, Sequence};

/// Optional validity check on candidates; rejected candidates count like
/// duplicates.
pub trait ConstraintFilter {
    fn accept(&self, x: &Sequence) -> bool;
}

pub struct AcceptAll;

impl ConstraintFilter for AcceptAll {
    fn accept(&self, _: &Sequence) -> bool {
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Seed,
    Active,
    Final,
}

/// Where a query came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Random,
    Generated,
    /// Temperature-1 decode of the best latent after regeneration ran out.
    Resampled,
    /// Single-position mutation of the best candidate.
    Mutated,
}

/// One charged oracle call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    /// Active learning step (0 for seeding and final scoring).
    pub step: usize,
    pub phase: Phase,
    pub source: Source,
    /// Model level queried.
    pub level: usize,
    /// Oracle fidelity behind that level.
    pub fidelity: usize,
    pub sequence: String,
    pub score: Option<f64>,
    pub error: Option<String>,
    pub cost: f64,
    /// Budget spent after this query.
    pub spent: f64,
    /// Hidden ground truth when the backend has one; never seen by the model.
    pub true_score: Option<f64>,
    /// Surrogate relative variance at the query's latent point (active
    /// queries only), the quantity compared against the escalation threshold.
    pub relative_variance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Escalation {
    pub step: usize,
    pub from_level: usize,
    pub to_level: usize,
    pub relative_variance: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub fits: usize,
    pub warm_fits: usize,
    pub train_steps: usize,
    pub restarts: usize,
    pub max_jitter: f64,
    pub min_kl: f64,
    pub min_reconstruction: f64,
    /// Level-1 reconstruction accuracy on the seed data after the first fit.
    pub seed_reconstruction_accuracy: f64,
    pub regenerations: usize,
    pub fallbacks: usize,
    pub dropped_points: usize,
    pub failed_queries: usize,
    /// Final designs short of `n_final` after every attempt.
    pub final_shortfall: usize,
}

impl Default for Diagnostics {
    fn default() -> Self {
        Self {
            fits: 0,
            warm_fits: 0,
            train_steps: 0,
            restarts: 0,
            max_jitter: 0.0,
            min_kl: f64::INFINITY,
            min_reconstruction: f64::INFINITY,
            seed_reconstruction_accuracy: f64::NAN,
            regenerations: 0,
            fallbacks: 0,
            dropped_points: 0,
            failed_queries: 0,
            final_shortfall: 0,
        }
    }
}

impl Diagnostics {
    fn absorb(&mut self, s: &TrainStats) {
        self.fits += 1;
        self.warm_fits += usize::from(!s.from_scratch);
        self.train_steps += s.steps;
        self.restarts += s.restarts;
        self.max_jitter = self.max_jitter.max(s.max_jitter);
        self.min_kl = self.min_kl.min(s.min_kl);
        self.min_reconstruction = self.min_reconstruction.min(s.min_reconstruction);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Active,
    Final,
    Done,
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub config: RunConfig,
    pub stage: Stage,
    /// Current model level (1-based).
    pub level: usize,
    /// Active learning steps completed.
    pub step: usize,
    pub since_retrain: usize,
    pub rng: ChaCha8Rng,
    pub data: MultiFidelityDataset,
    pub ledger: CostLedger,
    pub model: MfModel,
    pub records: Vec<QueryRecord>,
    pub escalations: Vec<Escalation>,
    pub diagnostics: Diagnostics,
}

impl RunState {
    pub fn ladder(&self) -> Ladder {
        self.config.ladder()
    }

    pub fn finals(&self) -> impl Iterator<Item = &QueryRecord> {
        self.records.iter().filter(|r| r.phase == Phase::Final)
    }
}

pub fn build_oracle(cfg: &RunConfig) -> Result<(OracleSuite, Alphabet)> {
    match cfg.env.kind {
        EnvKind::Synthetic => {
            let env = SyntheticEnv::new(cfg.env.synthetic(cfg.seed))?;
            let alphabet = env.alphabet();
            Ok((OracleSuite::synthetic(env), alphabet))
        }
        EnvKind::External => {
            let alphabet = Alphabet::with_size(cfg.env.alphabet_size)?;
            let suite = OracleSuite::external(cfg.env.external_commands(), cfg.env.costs.clone(), alphabet.clone())?;
            Ok((suite, alphabet))
        }
    }
}

pub struct Controller {
    state: RunState,
    oracle: OracleSuite,
    alphabet: Alphabet,
    ladder: Ladder,
    generation: GenConfig,
    filter: Box<dyn ConstraintFilter>,
}

/// A query candidate and the level latent it was decoded from.
struct Choice {
    x: Sequence,
    z: Option<Vec<f64>>,
    source: Source,
}

impl Controller {
    /// Seeds every level with random designs and fits the first model.
    pub fn start(config: RunConfig) -> Result<Self> {
        Self::start_with_filter(config, Box::new(AcceptAll))
    }

    pub fn start_with_filter(config: RunConfig, filter: Box<dyn ConstraintFilter>) -> Result<Self> {
        config.validate()?;
        let (oracle, alphabet) = build_oracle(&config)?;
        let ladder = config.ladder();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let levels = ladder.levels();
        let model = MfModel::new(&config.model, alphabet.size(), config.env.length, levels, &mut rng)?;
        let state = RunState {
            stage: Stage::Active,
            level: 1,
            step: 0,
            since_retrain: 0,
            rng,
            data: MultiFidelityDataset::new(levels),
            ledger: oracle.ledger().clone(),
            model,
            records: Vec::new(),
            escalations: Vec::new(),
            diagnostics: Diagnostics::default(),
            config,
        };
        let mut c = Self::assemble(state, oracle, alphabet, filter);
        c.seed()?;
        c.retrain(true)?;
        let xs: Vec<Sequence> = c.state.data.level(1).iter().map(|(x, _)| x.clone()).collect();
        c.state.diagnostics.seed_reconstruction_accuracy = c.state.model.hierarchy.reconstruction_accuracy(&xs, 1)?;
        Ok(c)
    }

    /// Continues from a checkpointed state.
    pub fn resume(state: RunState) -> Result<Self> {
        Self::resume_with_filter(state, Box::new(AcceptAll))
    }

    pub fn resume_with_filter(state: RunState, filter: Box<dyn ConstraintFilter>) -> Result<Self> {
        state.config.validate()?;
        let (mut oracle, alphabet) = build_oracle(&state.config)?;
        oracle.restore_ledger(state.ledger.clone())?;
        if state.model.fidelities() != state.ladder().levels() || state.data.fidelities() != state.model.fidelities() {
            return Err(Error::Checkpoint("model levels do not match the configured ladder".into()));
        }
        Ok(Self::assemble(state, oracle, alphabet, filter))
    }

    fn assemble(state: RunState, oracle: OracleSuite, alphabet: Alphabet, filter: Box<dyn ConstraintFilter>) -> Self {
        let ladder = state.config.ladder();
        let generation = state.config.effective_generation();
        Self { state, oracle, alphabet, ladder, generation, filter }
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn into_state(self) -> RunState {
        self.state
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn oracle(&self) -> &OracleSuite {
        &self.oracle
    }

    fn levels(&self) -> usize {
        self.ladder.levels()
    }

    fn fresh(&self, level: usize, x: &Sequence) -> bool {
        !self.state.data.contains(level, x) && self.filter.accept(x)
    }

    /// Charges one query, records it and stores a successful score.
    fn query(&mut self, x: &Sequence, level: usize, phase: Phase, source: Source) -> Result<Option<f64>> {
        let fidelity = self.ladder.oracle_fidelity[level - 1];
        let account = if phase == Phase::Final { Account::Evaluation } else { Account::Budget };
        if account == Account::Budget && self.oracle.ledger().spent() + self.oracle.cost(fidelity) > self.state.config.budget.max_cost {
            return Err(Error::Budget(format!("a fidelity-{fidelity} query would exceed the budget")));
        }
        let outcome = self.oracle.evaluate(x, fidelity, account)?;
        self.state.ledger = self.oracle.ledger().clone();
        let (score, error) = match outcome.score {
            Ok(y) if y.is_finite() => (Some(y), None),
            Ok(y) => (None, Some(format!("non-finite score {y}"))),
            Err(e) => (None, Some(e)),
        };
        if error.is_some() {
            self.state.diagnostics.failed_queries += 1;
        }
        if let (Some(y), true) = (score, phase != Phase::Final) {
            self.state.data.push(level, x.clone(), y)?;
        }
        self.state.records.push(QueryRecord {
            step: if phase == Phase::Active { self.state.step + 1 } else { 0 },
            phase,
            source,
            level,
            fidelity,
            sequence: x.render(&self.alphabet),
            score,
            error,
            cost: outcome.cost,
            spent: self.oracle.ledger().spent(),
            true_score: self.oracle.true_score(x),
            relative_variance: None,
        });
        Ok(score)
    }

    fn seed(&mut self) -> Result<()> {
        let length = self.state.config.env.length;
        let space = (self.alphabet.size() as f64).powi(length as i32);
        for level in 1..=self.levels() {
            let n = self.state.config.seed_count(&self.ladder, level);
            if n as f64 > space {
                return Err(Error::config("active_learning.n_low", format!("only {space} distinct designs exist")));
            }
            let mut done = 0;
            while done < n {
                let x = Sequence::random(&self.alphabet, length, &mut self.state.rng);
                if !self.fresh(level, &x) {
                    continue;
                }
                self.query(&x, level, Phase::Seed, Source::Random)?;
                done += 1;
            }
        }
        if self.state.data.count(1) == 0 {
            return Err(Error::Oracle("every seed query at the lowest level failed".into()));
        }
        Ok(())
    }

    fn retrain(&mut self, first: bool) -> Result<()> {
        let cfg = &self.state.config;
        let previous = (!first).then_some(&self.state.model);
        let (model, stats) = fit(
            previous,
            &self.state.data,
            self.alphabet.size(),
            cfg.env.length,
            &cfg.model,
            &cfg.train,
            &mut self.state.rng,
        )?;
        self.state.model = model;
        self.state.diagnostics.absorb(&stats);
        self.state.since_retrain = 0;
        Ok(())
    }

    fn generate(&mut self, level: usize, beta: f64, attempt: usize) -> Result<Option<Generated>> {
        let cfg = self.generation.for_attempt(attempt);
        match generate_high_scoring(&self.state.model, level, cfg.batch, beta, &cfg, &mut self.state.rng) {
            Ok(g) => {
                self.state.diagnostics.dropped_points += g.dropped;
                Ok(Some(g))
            }
            Err(e) if e.is_numerical() => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn choose(&mut self, level: usize) -> Result<Choice> {
        let mut best: Option<(Sequence, Vec<f64>)> = None;
        for attempt in 0..=self.state.config.active_learning.max_regenerations {
            if attempt > 0 {
                self.state.diagnostics.regenerations += 1;
            }
            let Some(g) = self.generate(level, self.generation.beta, attempt)? else { continue };
            let ranked = g.ranked();
            if let Some(&i) = ranked.iter().find(|&&i| self.fresh(level, &g.sequences[i])) {
                return Ok(Choice { x: g.sequences[i].clone(), z: Some(g.latents[i].clone()), source: Source::Generated });
            }
            if best.is_none() {
                best = ranked.first().map(|&i| (g.sequences[i].clone(), g.latents[i].clone()));
            }
        }
        self.state.diagnostics.fallbacks += 1;
        let length = self.state.config.env.length;
        let (base, z) = match best {
            Some((x, z)) => (x, Some(z)),
            None => (Sequence::random(&self.alphabet, length, &mut self.state.rng), None),
        };
        if let Some(z) = &z {
            let logits = self.state.model.hierarchy.decode_logits(z, level)?;
            for _ in 0..20 {
                let x = decode_sample(&logits, &self.alphabet, 1.0, &mut self.state.rng)?;
                if self.fresh(level, &x) {
                    return Ok(Choice { x, z: Some(z.clone()), source: Source::Resampled });
                }
            }
        }
        for _ in 0..10_000 {
            let mut ids = base.ids().to_vec();
            let pos = self.state.rng.random_range(0..ids.len());
            ids[pos] = self.state.rng.random_range(0..self.alphabet.size());
            let x = Sequence::new(ids, &self.alphabet)?;
            if self.fresh(level, &x) {
                return Ok(Choice { x, z: None, source: Source::Mutated });
            }
        }
        Err(Error::InvalidArgument(format!("no unseen acceptable design found at level {level}")))
    }

    /// Whether another query at the current level fits in the budget.
    pub fn can_query(&self) -> bool {
        let f = self.ladder.oracle_fidelity[self.state.level - 1];
        self.oracle.ledger().spent() + self.oracle.cost(f) <= self.state.config.budget.max_cost
    }

    /// One active learning step. Returns `false` once the budget is spent
    /// (the run then moves to final inference).
    pub fn step(&mut self) -> Result<bool> {
        if self.state.stage != Stage::Active {
            return Ok(false);
        }
        if !self.can_query() {
            if self.state.since_retrain > 0 {
                self.retrain(false)?;
            }
            self.state.stage = Stage::Final;
            return Ok(false);
        }
        let level = self.state.level;
        let choice = self.choose(level)?;
        // Escalation is judged by the model that proposed the query.
        let z = match choice.z {
            Some(z) => z,
            None => self.state.model.hierarchy.mean_latents(std::slice::from_ref(&choice.x), level)?.data().to_vec(),
        };
        let posterior = self.state.model.posterior(&z, level)?;
        self.query(&choice.x, level, Phase::Active, choice.source)?;
        if let Some(r) = self.state.records.last_mut() {
            r.relative_variance = Some(posterior.relative_variance);
        }
        self.state.step += 1;
        if level < self.levels() {
            let threshold = self.ladder.gamma[level - 1];
            if posterior.relative_variance < threshold {
                self.state.level += 1;
                self.state.escalations.push(Escalation {
                    step: self.state.step,
                    from_level: level,
                    to_level: level + 1,
                    relative_variance: posterior.relative_variance,
                    threshold,
                });
            }
        }
        self.state.since_retrain += 1;
        if self.state.since_retrain >= self.state.config.active_learning.retrain_every {
            self.retrain(false)?;
        }
        Ok(true)
    }

    /// Generates designs at the top level with pure exploitation and
    /// scores them on the evaluation account.
    pub fn finish(&mut self) -> Result<()> {
        while self.step()? {}
        if self.state.stage == Stage::Done {
            return Ok(());
        }
        let top = self.levels();
        let al = self.state.config.active_learning.clone();
        let mut finals: Vec<Sequence> = Vec::new();
        for attempt in 0..al.final_attempts {
            if finals.len() >= al.n_final {
                break;
            }
            let Some(g) = self.generate(top, 0.0, attempt)? else { continue };
            for i in g.ranked() {
                let x = &g.sequences[i];
                if finals.len() < al.n_final && !finals.contains(x) && self.filter.accept(x) {
                    finals.push(x.clone());
                }
            }
        }
        self.state.diagnostics.final_shortfall = al.n_final - finals.len();
        for x in &finals {
            self.query(x, top, Phase::Final, Source::Generated)?;
        }
        self.state.stage = Stage::Done;
        Ok(())
    }

    /// Runs active learning until the budget is spent or `halt_after`
    /// steps have completed in total, calling `after_step` after each.
    /// Returns whether the run reached the final stage.
    pub fn run_active(
        &mut self,
        halt_after: Option<usize>,
        mut after_step: impl FnMut(&RunState) -> Result<()>,
    ) -> Result<bool> {
        loop {
            if halt_after.is_some_and(|h| self.state.step >= h) && self.state.stage == Stage::Active {
                return Ok(false);
            }
            let more = self.step()?;
            after_step(&self.state)?;
            if !more {
                return Ok(true);
            }
        }
    }
}

/// Runs a configuration end to end.
pub fn run(config: RunConfig) -> Result<RunState> {
    let mut c = Controller::start(config)?;
    c.finish()?;
    Ok(c.into_state())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::config::Mode;

    /// A run small enough for unit tests.
    pub(crate) fn tiny_config(seed: u64) -> RunConfig {
        let mut cfg = RunConfig { seed, ..RunConfig::default() };
        cfg.env.alphabet_size = 5;
        cfg.env.length = 6;
        cfg.env.rho = vec![0.5, 1.0];
        cfg.env.noise = vec![0.5, 0.0];
        cfg.env.costs = vec![1.0, 10.0];
        cfg.model.latent_dim = 4;
        cfg.model.hidden = 32;
        cfg.model.hidden_layers = 2;
        cfg.model.kernel_hidden = 16;
        cfg.model.inducing = 8;
        cfg.train.max_steps = 60;
        cfg.train.batch_size = 32;
        cfg.train.warm_start = true;
        cfg.train.warm_steps = 10;
        cfg.generation.batch = 4;
        cfg.generation.opt_steps = 10;
        cfg.active_learning.n_low = 60;
        cfg.active_learning.n_high = 3;
        cfg.active_learning.n_final = 5;
        cfg.active_learning.final_attempts = 10;
        cfg.budget.max_cost = 60.0 + 30.0 + 40.0;
        cfg
    }

    #[test]
    fn budget_is_respected_exactly() {
        let state = run(tiny_config(1)).unwrap();
        let spent = state.ledger.spent();
        assert!(spent <= state.config.budget.max_cost);
        let recomputed: f64 = state.records.iter().filter(|r| r.phase != Phase::Final).map(|r| r.cost).sum();
        assert_eq!(recomputed, spent);
        let lowest = state.config.env.costs[0];
        assert!(state.config.budget.max_cost - spent < lowest + state.config.env.costs[1]);
        assert_eq!(state.stage, Stage::Done);
        assert_eq!(state.finals().count(), 5);
        assert!(state.finals().all(|r| r.fidelity == 2 && r.score == r.true_score));
    }

    #[test]
    fn runs_are_deterministic() {
        let a = run(tiny_config(3)).unwrap();
        let b = run(tiny_config(3)).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a, b);
    }

    #[test]
    fn queries_are_unique_within_level() {
        let state = run(tiny_config(4)).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for r in state.records.iter().filter(|r| r.phase != Phase::Final) {
            assert!(seen.insert((r.level, r.sequence.clone())), "repeat {r:?}");
        }
    }

    #[test]
    fn zero_gamma_never_escalates_and_infinite_always_does() {
        let mut cfg = tiny_config(5);
        cfg.active_learning.gamma = Some(vec![0.0]);
        let state = run(cfg.clone()).unwrap();
        assert!(state.escalations.is_empty());
        assert!(state.records.iter().filter(|r| r.phase == Phase::Active).all(|r| r.level == 1));

        cfg.active_learning.gamma = Some(vec![f64::INFINITY]);
        let state = run(cfg).unwrap();
        assert_eq!(state.escalations.len(), 1);
        assert_eq!(state.escalations[0].step, 1);
        let levels: Vec<usize> = state.records.iter().filter(|r| r.phase == Phase::Active).map(|r| r.level).collect();
        assert_eq!(levels[0], 1);
        assert!(levels[1..].iter().all(|&l| l == 2));
    }

    #[test]
    fn escalation_is_monotone() {
        let mut cfg = tiny_config(6);
        cfg.active_learning.gamma = Some(vec![0.9]);
        let state = run(cfg).unwrap();
        let levels: Vec<usize> = state.records.iter().filter(|r| r.phase == Phase::Active).map(|r| r.level).collect();
        assert!(levels.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn split_run_matches_uninterrupted() {
        let cfg = tiny_config(7);
        let whole = run(cfg.clone()).unwrap();
        let mut c = Controller::start(cfg).unwrap();
        assert!(!c.run_active(Some(3), |_| Ok(())).unwrap());
        let snapshot = c.into_state();
        let mut c = Controller::resume(snapshot).unwrap();
        c.finish().unwrap();
        assert_eq!(c.into_state(), whole);
    }

    #[test]
    fn filter_rejections_are_never_queried() {
        struct NoZeroStart;
        impl ConstraintFilter for NoZeroStart {
            fn accept(&self, x: &Sequence) -> bool {
                x.ids()[0] != 1
            }
        }
        let mut c = Controller::start_with_filter(tiny_config(8), Box::new(NoZeroStart)).unwrap();
        c.finish().unwrap();
        let a = c.alphabet().clone();
        assert!(c.state().records.iter().all(|r| !r.sequence.starts_with(a.symbol(1))));
    }

    #[test]
    fn modes_use_their_ladders() {
        let mut cfg = tiny_config(9);
        cfg.mode = Mode::SingleFidelity;
        cfg.budget.max_cost = 80.0;
        let state = run(cfg).unwrap();
        assert_eq!(state.model.fidelities(), 1);
        assert!(state.records.iter().all(|r| r.fidelity == 2));
        assert_eq!(state.ledger.budget_counts[0], 0);
    }

    #[test]
    fn failing_oracle_is_recorded_and_charged() {
        let mut cfg = tiny_config(10);
        cfg.env.kind = EnvKind::External;
        cfg.env.commands = vec!["sh -c 'echo 1.5' {seq}".into(), "sh -c 'exit 3' {seq}".into()];
        let state = run(cfg).unwrap();
        let top: Vec<&QueryRecord> = state.records.iter().filter(|r| r.fidelity == 2).collect();
        assert!(!top.is_empty() && top.iter().all(|r| r.score.is_none() && r.error.is_some()));
        assert_eq!(state.data.count(2), 0);
        assert!(state.records.iter().filter(|r| r.fidelity == 1).all(|r| r.score == Some(1.5)));
    }
}
