//! The joint model: latent hierarchy plus one surrogate per fidelity, and
//! the minibatch loop that fits both together.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::MultiFidelityDataset;
use crate::error::{Error, Result};
use crate::latent::{BoundHierarchy, HierarchyShape, LatentHierarchy};
use crate::numerics::{AdamState, Graph, Tensor};
use crate::representation::{encode_batch, Alphabet, Sequence};
use crate::surrogate::{Binding, BoundSvgp, OutputScaling, SurrogatePosterior, Svgp, SvgpShape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub kernel_hidden: usize,
    pub embed_dim: usize,
    pub inducing: usize,
    pub kl_weight: f64,
    pub gp_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            hidden: 128,
            hidden_layers: 3,
            kernel_hidden: 32,
            embed_dim: 8,
            inducing: 32,
            kl_weight: 0.1,
            gp_weight: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("model.latent_dim", self.latent_dim),
            ("model.hidden", self.hidden),
            ("model.hidden_layers", self.hidden_layers),
            ("model.kernel_hidden", self.kernel_hidden),
            ("model.embed_dim", self.embed_dim),
            ("model.inducing", self.inducing),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        for (name, v) in [("model.kl_weight", self.kl_weight), ("model.gp_weight", self.gp_weight)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Step cap of a from-scratch fit.
    pub max_steps: usize,
    /// Early stop after this many checks without relative improvement.
    pub patience: usize,
    /// Moving-average window of the loss, in steps.
    pub window: usize,
    pub check_every: usize,
    pub min_improvement: f64,
    /// Continue from the previous parameters instead of re-initializing.
    pub warm_start: bool,
    /// Step cap of a warm-started fit.
    pub warm_steps: usize,
    /// A from-scratch fit first trains on fidelity 1 alone, then starts the
    /// higher levels from its decoder and deep kernel before joint training.
    pub level_one_warmup: bool,
    /// Fidelity-1 sequences reconstructed at each higher level per step.
    pub replay: usize,
    /// Higher surrogates also start from fidelity 1's deep kernel.
    pub inherit_kernel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            max_steps: 3000,
            patience: 20,
            window: 100,
            check_every: 10,
            min_improvement: 0.01,
            warm_start: false,
            warm_steps: 200,
            level_one_warmup: true,
            replay: 32,
            inherit_kernel: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        for (name, v) in [
            ("train.batch_size", self.batch_size),
            ("train.max_steps", self.max_steps),
            ("train.patience", self.patience),
            ("train.window", self.window),
            ("train.check_every", self.check_every),
            ("train.warm_steps", self.warm_steps),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if !(self.min_improvement >= 0.0 && self.min_improvement < 1.0) {
            return Err(Error::config("train.min_improvement", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfModel {
    pub hierarchy: LatentHierarchy,
    pub surrogates: Vec<Svgp>,
}

pub struct BoundModel {
    pub hierarchy: BoundHierarchy,
    pub surrogates: Vec<BoundSvgp>,
}

impl MfModel {
    pub fn new<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        alphabet_size: usize,
        length: usize,
        fidelities: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let hierarchy = LatentHierarchy::new(
            HierarchyShape {
                alphabet_size,
                length,
                latent_dim: cfg.latent_dim,
                hidden: cfg.hidden,
                hidden_layers: cfg.hidden_layers,
                fidelities,
            },
            rng,
        )?;
        let shape = SvgpShape {
            latent_dim: cfg.latent_dim,
            kernel_hidden: cfg.kernel_hidden,
            embed_dim: cfg.embed_dim,
            inducing: cfg.inducing,
        };
        let surrogates = (0..fidelities)
            .map(|_| Svgp::new(shape.clone(), rng))
            .collect::<Result<_>>()?;
        Ok(Self { hierarchy, surrogates })
    }

    pub fn fidelities(&self) -> usize {
        self.surrogates.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.hierarchy.latent_dim()
    }

    pub fn surrogate(&self, k: usize) -> Result<&Svgp> {
        self.surrogates
            .get(k.wrapping_sub(1))
            .ok_or(Error::FidelityOutOfRange { k, max: self.surrogates.len() })
    }

    /// Hierarchy then surrogates `1..=K`, all trainable when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        let binding = if trainable { Binding::Full } else { Binding::Frozen };
        BoundModel {
            hierarchy: self.hierarchy.bind(g, trainable),
            surrogates: self.surrogates.iter().map(|s| s.bind(g, binding)).collect(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.hierarchy.params_mut();
        for s in &mut self.surrogates {
            out.extend(s.params_mut(Binding::Full));
        }
        out
    }

    pub fn posterior(&self, z: &[f64], k: usize) -> Result<SurrogatePosterior> {
        self.surrogate(k)?.posterior(z).map_err(|e| e.at_fidelity(k))
    }

    /// Refits output scalings to the current data.
    pub fn fit_scalings(&mut self, data: &MultiFidelityDataset) {
        for (k, s) in self.surrogates.iter_mut().enumerate() {
            s.set_scaling(OutputScaling::fit(&data.scores(k + 1)));
        }
    }

    /// Places inducing points of every non-empty fidelity on embeddings of
    /// mean-path latents of a random subset of its data.
    pub fn init_inducing<R: Rng + ?Sized>(&mut self, data: &MultiFidelityDataset, rng: &mut R) -> Result<()> {
        for k in 1..=self.fidelities() {
            self.init_inducing_at(k, data, rng)?;
        }
        Ok(())
    }

    fn init_inducing_at<R: Rng + ?Sized>(&mut self, k: usize, data: &MultiFidelityDataset, rng: &mut R) -> Result<()> {
        let level = data.level(k);
        if level.is_empty() {
            return Ok(());
        }
        let take = level.len().min(4 * self.surrogates[k - 1].shape().inducing);
        let idx = sample(rng, level.len(), take);
        let xs: Vec<Sequence> = idx.iter().map(|i| level[i].0.clone()).collect();
        let z = self.hierarchy.mean_latents(&xs, k)?;
        let e = self.surrogates[k - 1].embed(&z)?;
        self.surrogates[k - 1].init_inducing(&e, rng)
    }

    /// Starts every higher level from fidelity 1's decoder and, optionally,
    /// its deep kernel, re-placing those levels' inducing points in the new
    /// embedding.
    pub fn seed_upper_levels<R: Rng + ?Sized>(
        &mut self,
        data: &MultiFidelityDataset,
        inherit_kernel: bool,
        rng: &mut R,
    ) -> Result<()> {
        self.hierarchy.seed_upper_decoders();
        if !inherit_kernel {
            return Ok(());
        }
        let (first, rest) = self.surrogates.split_at_mut(1);
        for s in rest {
            s.inherit_kernel(&first[0])?;
        }
        for k in 2..=self.fidelities() {
            self.init_inducing_at(k, data, rng)?;
        }
        Ok(())
    }
}

/// Diagnostics of one fit.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub max_jitter: f64,
    pub min_kl: f64,
    pub min_reconstruction: f64,
    pub restarts: usize,
    pub from_scratch: bool,
}

/// Moving-average plateau detector: every `check_every` steps once `window`
/// losses exist, the trailing-window mean must beat the best so far by a
/// relative `min_improvement`, or a strike is counted; `patience` strikes stop.
#[derive(Clone, Debug)]
pub struct EarlyStop {
    window: usize,
    check_every: usize,
    min_improvement: f64,
    patience: usize,
    best: Option<f64>,
    stale: usize,
}

impl EarlyStop {
    pub fn new(train: &TrainConfig) -> Self {
        Self {
            window: train.window,
            check_every: train.check_every,
            min_improvement: train.min_improvement,
            patience: train.patience,
            best: None,
            stale: 0,
        }
    }

    /// Call once per step with every loss so far.
    pub fn should_stop(&mut self, losses: &[f64]) -> bool {
        let n = losses.len();
        if n < self.window || n % self.check_every != 0 {
            return false;
        }
        let ma = losses[n - self.window..].iter().sum::<f64>() / self.window as f64;
        match self.best {
            Some(b) if ma >= b - self.min_improvement * b.abs() => {
                self.stale += 1;
                self.stale >= self.patience
            }
            _ => {
                self.best = Some(ma);
                self.stale = 0;
                false
            }
        }
    }
}

/// Runs the joint minibatch loop on `model` in place. Each step sums one
/// minibatch term per non-empty fidelity. Above fidelity 1 the term also
/// reconstructs a replay batch of fidelity-1 sequences through the chain to
/// that level, which keeps sparse decoders from collapsing onto their few
/// scored designs.
pub fn train_steps<R: Rng + ?Sized>(
    model: &mut MfModel,
    data: &MultiFidelityDataset,
    cfg: &ModelConfig,
    train: &TrainConfig,
    max_steps: usize,
    rng: &mut R,
) -> Result<TrainStats> {
    let alphabet = Alphabet::with_size(model.hierarchy.shape().alphabet_size)?;
    let active: Vec<usize> = (1..=model.fidelities()).filter(|&k| data.count(k) > 0).collect();
    if active.is_empty() {
        return Err(Error::InvalidArgument("no training data at any fidelity".into()));
    }
    let targets: Vec<Vec<f64>> = (1..=model.fidelities())
        .map(|k| {
            let s = model.surrogates[k - 1].scaling();
            data.scores(k).into_iter().map(|y| s.to_target(y)).collect()
        })
        .collect();

    let mut adam = AdamState::new(train.learning_rate);
    let mut stats = TrainStats { min_kl: f64::INFINITY, min_reconstruction: f64::INFINITY, ..Default::default() };
    let mut losses: Vec<f64> = Vec::with_capacity(max_steps);
    let mut stopper = EarlyStop::new(train);
    for step in 0..max_steps {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let mut loss = None;
        for &k in &active {
            let level = data.level(k);
            let idx = sample(rng, level.len(), level.len().min(train.batch_size));
            let batch: Vec<&Sequence> = idx.iter().map(|i| &level[i].0).collect();
            let y: Vec<f64> = idx.iter().map(|i| targets[k - 1][i]).collect();

            let x = g.constant(encode_batch(&batch, &alphabet)?);
            let fail = |e: Error| e.at_fidelity(k);
            let elbo = bound.hierarchy.elbo(&mut g, x, k, cfg.kl_weight, rng).map_err(fail)?;
            let svgp = &bound.surrogates[k - 1];
            let prep = svgp.prepare(&mut g).map_err(fail)?;
            stats.max_jitter = stats.max_jitter.max(prep.jitter);
            let gp = svgp.neg_elbo(&mut g, &prep, elbo.z, &y, level.len()).map_err(fail)?;
            let gp = g.scale(gp, cfg.gp_weight / level.len() as f64);
            let mut term = g.add(elbo.loss, gp)?;
            if k > 1 && train.replay > 0 {
                let first = data.level(1);
                let idx = sample(rng, first.len(), first.len().min(train.replay));
                let batch: Vec<&Sequence> = idx.iter().map(|i| &first[i].0).collect();
                let x = g.constant(encode_batch(&batch, &alphabet)?);
                let replay = bound.hierarchy.elbo(&mut g, x, k, cfg.kl_weight, rng).map_err(fail)?;
                stats.min_kl = stats.min_kl.min(g.value(replay.kl).item());
                stats.min_reconstruction = stats.min_reconstruction.min(g.value(replay.reconstruction).item());
                term = g.add(term, replay.loss)?;
            }
            let value = g.value(term).item();
            if !value.is_finite() {
                return Err(Error::Numerical { fidelity: k, detail: format!("loss {value} at step {step}") });
            }
            stats.min_kl = stats.min_kl.min(g.value(elbo.kl).item());
            stats.min_reconstruction = stats.min_reconstruction.min(g.value(elbo.reconstruction).item());
            loss = Some(match loss {
                None => term,
                Some(l) => g.add(l, term)?,
            });
        }
        let loss = loss.expect("at least one active fidelity");
        let value = g.value(loss).item();
        losses.push(value);

        let mut grads = g.backward(loss)?;
        let gs: Vec<Option<Tensor>> = g.params().iter().map(|&v| grads.take(v)).collect();
        if gs.iter().flatten().any(|t| !t.all_finite()) {
            return Err(Error::Numerical { fidelity: active[0], detail: format!("non-finite gradient at step {step}") });
        }
        let mut params = model.params_mut();
        adam.step(&mut params, &gs)?;
        stats.steps = step + 1;

        if stopper.should_stop(&losses) {
            break;
        }
    }
    let head = losses.len().min(10);
    stats.initial_loss = losses[..head].iter().sum::<f64>() / head.max(1) as f64;
    stats.final_loss = losses[losses.len() - head..].iter().sum::<f64>() / head.max(1) as f64;
    Ok(stats)
}

/// Fits a model to `data`: from scratch, or from `previous` when warm
/// starting. A numerical failure triggers one fresh restart.
pub fn fit<R: Rng + ?Sized>(
    previous: Option<&MfModel>,
    data: &MultiFidelityDataset,
    alphabet_size: usize,
    length: usize,
    cfg: &ModelConfig,
    train: &TrainConfig,
    rng: &mut R,
) -> Result<(MfModel, TrainStats)> {
    if data.count(1) == 0 {
        return Err(Error::InvalidArgument("fidelity 1 has no data".into()));
    }
    let mut warm = train.warm_start.then_some(previous).flatten();
    let mut restarts = 0;
    loop {
        let (mut model, steps) = match warm {
            Some(m) => (m.clone(), train.warm_steps),
            None => {
                let mut m = MfModel::new(cfg, alphabet_size, length, data.fidelities(), rng)?;
                m.init_inducing(data, rng)?;
                if train.level_one_warmup && data.fidelities() > 1 {
                    let mut first = MultiFidelityDataset::new(data.fidelities());
                    for (x, y) in data.level(1) {
                        first.push(1, x.clone(), *y)?;
                    }
                    m.fit_scalings(&first);
                    train_steps(&mut m, &first, cfg, train, train.max_steps, rng)?;
                    m.seed_upper_levels(data, train.inherit_kernel, rng)?;
                }
                (m, train.max_steps)
            }
        };
        model.fit_scalings(data);
        match train_steps(&mut model, data, cfg, train, steps, rng) {
            Ok(mut stats) => {
                stats.restarts = restarts;
                stats.from_scratch = warm.is_none();
                return Ok((model, stats));
            }
            Err(e) if e.is_numerical() && restarts == 0 => {
                restarts += 1;
                warm = None;
            }
            Err(e) => return Err(e),
        }
    }
}
