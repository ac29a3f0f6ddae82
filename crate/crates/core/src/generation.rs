//! Latent-space query synthesis: upper-confidence acquisition with an L2
//! pull toward the prior, a likelihood term tying each level to the
//! transitions of the level below, and a cosine diversity penalty.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::LatentGaussian;
use crate::model::MfModel;
use crate::numerics::{lse_slice, AdamState, Graph, Tensor, Var};
use crate::representation::{decode_sample, Alphabet, Sequence};
use crate::surrogate::Binding;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    /// Exploration weight during active learning; inference uses 0.
    pub beta: f64,
    pub lambda_lik: f64,
    pub lambda_div: f64,
    /// Latent points optimized jointly at each level.
    pub batch: usize,
    pub opt_steps: usize,
    pub opt_lr: f64,
    /// Decoder sampling temperature; 0 takes the per-position argmax.
    pub temperature: f64,
    /// Temperature of repeat attempts after a batch yielded nothing new.
    pub resample_temperature: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            lambda_lik: 1.0,
            lambda_div: 1.0,
            batch: 8,
            opt_steps: 100,
            opt_lr: 0.1,
            temperature: 0.0,
            resample_temperature: 1.0,
        }
    }
}

impl GenConfig {
    /// Settings for the `attempt`-th try (0-based) at producing a new design.
    pub fn for_attempt(&self, attempt: usize) -> GenConfig {
        let mut c = self.clone();
        if attempt > 0 {
            c.temperature = c.temperature.max(c.resample_temperature);
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("generation.beta", self.beta),
            ("generation.lambda_lik", self.lambda_lik),
            ("generation.lambda_div", self.lambda_div),
            ("generation.temperature", self.temperature),
            ("generation.resample_temperature", self.resample_temperature),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be finite and non-negative"));
            }
        }
        if self.batch == 0 {
            return Err(Error::config("generation.batch", "must be positive"));
        }
        if self.opt_steps == 0 {
            return Err(Error::config("generation.opt_steps", "must be positive"));
        }
        if !(self.opt_lr > 0.0 && self.opt_lr.is_finite()) {
            return Err(Error::config("generation.opt_lr", "must be positive"));
        }
        Ok(())
    }
}

/// Equally weighted diagonal Gaussian mixture over one latent level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub components: Vec<LatentGaussian>,
}

impl MixtureParams {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::InvalidArgument("mixture has no components".into()));
        }
        for c in &self.components {
            if c.mu.len() != dim || c.sigma.len() != dim {
                return Err(Error::Shape {
                    op: "mixture_log_density",
                    detail: format!("component of dim {} for latent dim {dim}", c.mu.len()),
                });
            }
            if c.sigma.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::InvalidArgument("mixture sigma must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Source of surrogate predictions on a graph, in units where larger is
/// better. [`MfModel`] reports negated oracle units.
pub trait LatentSurrogate {
    fn latent_dim(&self) -> usize;

    /// Mean and function variance, each `[M]`, at the rows of `z`.
    fn predict(&self, g: &mut Graph, z: Var, k: usize) -> Result<(Var, Var)>;
}

impl LatentSurrogate for MfModel {
    fn latent_dim(&self) -> usize {
        MfModel::latent_dim(self)
    }

    fn predict(&self, g: &mut Graph, z: Var, k: usize) -> Result<(Var, Var)> {
        let b = self.surrogate(k)?.bind(g, Binding::Frozen);
        let prep = b.prepare(g).map_err(|e| e.at_fidelity(k))?;
        let (m, v) = b.predict(g, &prep, z)?;
        // Back to oracle units, negated so larger stays better.
        let s = self.surrogate(k)?.scaling();
        let m = g.scale(m, s.std);
        let m = g.add_scalar(m, -s.mean);
        Ok((m, g.scale(v, s.std * s.std)))
    }
}

/// `mean + beta * variance - ||z||^2` per row.
pub fn acquisition(g: &mut Graph, mean: Var, variance: Var, z: Var, beta: f64) -> Result<Var> {
    let v = g.scale(variance, beta);
    let a = g.add(mean, v)?;
    let z2 = g.square(z);
    let n = g.sum_last(z2);
    g.sub(a, n)
}

/// Log mixture density at each row of `z` (`[M, d]`), returned as `[M]`.
pub fn mixture_log_density(g: &mut Graph, z: Var, mixture: &MixtureParams) -> Result<Var> {
    let (m, d) = g.value(z).dims2("mixture_log_density")?;
    mixture.validate(d)?;
    let mut parts = Vec::with_capacity(mixture.components.len());
    for c in &mixture.components {
        let mu = g.constant(Tensor::vector(c.mu.clone()));
        let inv = g.constant(Tensor::vector(c.sigma.iter().map(|s| 1.0 / s).collect()));
        let diff = g.sub(z, mu)?;
        let scaled = g.mul(diff, inv)?;
        let sq = g.square(scaled);
        let s = g.sum_last(sq);
        let norm = -c.sigma.iter().map(|s| s.ln()).sum::<f64>() - 0.5 * d as f64 * (2.0 * PI).ln();
        let s = g.scale(s, -0.5);
        let lp = g.add_scalar(s, norm);
        parts.push(g.reshape(lp, &[m, 1])?);
    }
    let stacked = g.concat_last(&parts)?;
    let lse = g.log_sum_exp_last(stacked);
    Ok(g.add_scalar(lse, -(mixture.components.len() as f64).ln()))
}

pub fn mixture_log_density_value(z: &[f64], mixture: &MixtureParams) -> Result<f64> {
    mixture.validate(z.len())?;
    let logs: Vec<f64> = mixture
        .components
        .iter()
        .map(|c| {
            z.iter()
                .zip(&c.mu)
                .zip(&c.sigma)
                .map(|((x, m), s)| -0.5 * ((x - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * PI).ln())
                .sum()
        })
        .collect();
    Ok(lse_slice(&logs) - (logs.len() as f64).ln())
}

/// `(1 / M^2) * sum_{i,j} cos(z_i, z_j)`, diagonal included; a zero row
/// contributes 0 to every pair it is in.
pub fn diversity_penalty(g: &mut Graph, z: Var) -> Result<Var> {
    let m = g.value(z).dims2("diversity_penalty")?.0;
    let n = g.normalize_rows(z)?;
    let nt = g.transpose(n)?;
    let s = g.matmul(n, nt)?;
    let total = g.sum(s);
    Ok(g.scale(total, 1.0 / (m * m) as f64))
}

pub fn diversity_value(zs: &[Vec<f64>]) -> Result<f64> {
    let d = zs.first().map_or(1, Vec::len);
    let t = Tensor::matrix(zs.len(), d, zs.concat())?;
    let mut g = Graph::new();
    let z = g.constant(t);
    let v = diversity_penalty(&mut g, z)?;
    Ok(g.value(v).item())
}

/// Mean pairwise cosine similarity over distinct pairs.
pub fn mean_pairwise_cosine(zs: &[Vec<f64>]) -> f64 {
    let m = zs.len();
    if m < 2 {
        return 0.0;
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut total = 0.0;
    for i in 0..m {
        for j in (i + 1)..m {
            let (a, b) = (&zs[i], &zs[j]);
            let den = norm(a) * norm(b);
            if den > 0.0 {
                total += a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / den;
            }
        }
    }
    total / (m * (m - 1) / 2) as f64
}

/// The maximized objective and its per-row part before the diversity term.
pub struct ObjectiveVars {
    pub total: Var,
    pub per_point: Var,
    pub acquisition: Var,
}

/// `mean_i(acq_i + lambda_lik * log q(z_i)) - lambda_div * div(Z)`.
pub fn generation_objective(
    g: &mut Graph,
    surrogate: &dyn LatentSurrogate,
    z: Var,
    k: usize,
    beta: f64,
    mixture: Option<&MixtureParams>,
    cfg: &GenConfig,
) -> Result<ObjectiveVars> {
    let (mean, var) = surrogate.predict(g, z, k)?;
    let acq = acquisition(g, mean, var, z, beta)?;
    let per_point = match mixture {
        Some(mix) if cfg.lambda_lik > 0.0 => {
            let lp = mixture_log_density(g, z, mix)?;
            let lp = g.scale(lp, cfg.lambda_lik);
            g.add(acq, lp)?
        }
        _ => acq,
    };
    let mut total = g.mean(per_point);
    if cfg.lambda_div > 0.0 {
        let div = diversity_penalty(g, z)?;
        let div = g.scale(div, cfg.lambda_div);
        total = g.sub(total, div)?;
    }
    Ok(ObjectiveVars { total, per_point, acquisition: acq })
}

/// Optimized latent points with their final acquisition values.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch {
    pub points: Vec<Vec<f64>>,
    pub acquisition: Vec<f64>,
    /// Points abandoned after a second non-finite objective.
    pub dropped: usize,
}

/// Gradient ascent on the generation objective from `M` i.i.d. standard
/// normal starts. A point whose objective or gradient turns non-finite is
/// restarted once, then dropped.
pub fn optimize_latent_batch<R: Rng + ?Sized>(
    surrogate: &dyn LatentSurrogate,
    k: usize,
    m: usize,
    beta: f64,
    mixture: Option<&MixtureParams>,
    cfg: &GenConfig,
    rng: &mut R,
) -> Result<LatentBatch> {
    if k > 1 && mixture.is_none() {
        return Err(Error::InvalidArgument(format!("fidelity {k} needs a mixture from the level below")));
    }
    let d = surrogate.latent_dim();
    let mut rows: Vec<Vec<f64>> = (0..m).map(|_| Tensor::randn(&[d], 1.0, rng).into_data()).collect();
    let mut restarted = vec![false; m];
    let mut dropped = 0;
    let mut adam = AdamState::new(cfg.opt_lr);
    let mut step = 0;
    while step < cfg.opt_steps && !rows.is_empty() {
        let mut param = Tensor::matrix(rows.len(), d, rows.concat())?;
        let mut g = Graph::new();
        let z = g.param(&param);
        let obj = generation_objective(&mut g, surrogate, z, k, beta, mixture, cfg)?;
        let neg = g.neg(obj.total);
        let grads = g.backward(neg)?;
        let grad = grads.get(z).cloned().unwrap_or_else(|| Tensor::zeros(&[rows.len(), d]));
        let per = g.value(obj.per_point).data().to_vec();
        let bad: Vec<usize> = (0..rows.len())
            .filter(|&i| !per[i].is_finite() || grad.row(i).iter().any(|v| !v.is_finite()))
            .collect();
        if !bad.is_empty() {
            for &i in bad.iter().rev() {
                if restarted[i] {
                    rows.remove(i);
                    restarted.remove(i);
                    dropped += 1;
                } else {
                    restarted[i] = true;
                    rows[i] = Tensor::randn(&[d], 1.0, rng).into_data();
                }
            }
            adam = AdamState::new(cfg.opt_lr);
            continue;
        }
        adam.step(&mut [&mut param], &[Some(grad)])?;
        rows = param.data().chunks(d).map(<[f64]>::to_vec).collect();
        step += 1;
    }
    if rows.is_empty() {
        return Ok(LatentBatch { points: rows, acquisition: Vec::new(), dropped });
    }
    let mut g = Graph::new();
    let z = g.constant(Tensor::matrix(rows.len(), d, rows.concat())?);
    let (mean, var) = surrogate.predict(&mut g, z, k)?;
    let acq = acquisition(&mut g, mean, var, z, beta)?;
    let acquisition = g.value(acq).data().to_vec();
    Ok(LatentBatch { points: rows, acquisition, dropped })
}

/// Decoded candidates of one generation call at fidelity `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub sequences: Vec<Sequence>,
    pub latents: Vec<Vec<f64>>,
    pub acquisition: Vec<f64>,
    /// Calls to [`optimize_latent_batch`] made, one per level.
    pub levels_optimized: usize,
    pub dropped: usize,
}

impl Generated {
    /// Candidate indices from best to worst acquisition (stable on ties).
    pub fn ranked(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.acquisition.len()).collect();
        idx.sort_by(|&a, &b| self.acquisition[b].total_cmp(&self.acquisition[a]));
        idx
    }
}

/// Level `k` batch: level 1 optimizes alone; each higher level optimizes
/// against the mixture of transitions of the level below.
pub fn top_latent_points<R: Rng + ?Sized>(
    model: &MfModel,
    k: usize,
    m: usize,
    beta: f64,
    cfg: &GenConfig,
    rng: &mut R,
) -> Result<(LatentBatch, usize)> {
    if k == 0 || k > model.fidelities() {
        return Err(Error::FidelityOutOfRange { k, max: model.fidelities() });
    }
    if k == 1 {
        return Ok((optimize_latent_batch(model, 1, m, beta, None, cfg, rng)?, 1));
    }
    let (below, calls) = top_latent_points(model, k - 1, m, beta, cfg, rng)?;
    if below.points.is_empty() {
        return Err(Error::Numerical { fidelity: k - 1, detail: "every latent point was dropped".into() });
    }
    let components = below
        .points
        .iter()
        .map(|z| model.hierarchy.transition(z, k - 1))
        .collect::<Result<Vec<_>>>()?;
    let mixture = MixtureParams { components };
    let batch = optimize_latent_batch(model, k, m, beta, Some(&mixture), cfg, rng)?;
    Ok((batch, calls + 1))
}

/// Optimizes through levels `1..=k` and decodes every level-`k` point with
/// decoder `k`.
pub fn generate_high_scoring<R: Rng + ?Sized>(
    model: &MfModel,
    k: usize,
    m: usize,
    beta: f64,
    cfg: &GenConfig,
    rng: &mut R,
) -> Result<Generated> {
    let (batch, levels_optimized) = top_latent_points(model, k, m, beta, cfg, rng)?;
    let alphabet = Alphabet::with_size(model.hierarchy.shape().alphabet_size)?;
    let sequences = batch
        .points
        .iter()
        .map(|z| decode_sample(&model.hierarchy.decode_logits(z, k)?, &alphabet, cfg.temperature, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(Generated {
        sequences,
        latents: batch.points,
        acquisition: batch.acquisition,
        levels_optimized,
        dropped: batch.dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Mean `-||z - c||^2` with zero variance.
    struct Quadratic {
        center: Vec<f64>,
    }

    impl LatentSurrogate for Quadratic {
        fn latent_dim(&self) -> usize {
            self.center.len()
        }

        fn predict(&self, g: &mut Graph, z: Var, _k: usize) -> Result<(Var, Var)> {
            let c = g.constant(Tensor::vector(self.center.clone()));
            let d = g.sub(z, c)?;
            let d2 = g.square(d);
            let s = g.sum_last(d2);
            let mean = g.neg(s);
            let var = g.scale(s, 0.0);
            Ok((mean, var))
        }
    }

    fn gauss(mu: Vec<f64>, sigma: Vec<f64>) -> LatentGaussian {
        LatentGaussian { mu, sigma }
    }

    fn random_mixture(m: usize, d: usize, rng: &mut ChaCha8Rng) -> MixtureParams {
        MixtureParams {
            components: (0..m)
                .map(|_| {
                    gauss(
                        (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
                        (0..d).map(|_| rng.random_range(0.3..2.0)).collect(),
                    )
                })
                .collect(),
        }
    }

    fn eval_acq(mean: f64, var: f64, z: &[f64], beta: f64) -> f64 {
        let mut g = Graph::new();
        let m = g.constant(Tensor::vector(vec![mean]));
        let v = g.constant(Tensor::vector(vec![var]));
        let zv = g.constant(Tensor::matrix(1, z.len(), z.to_vec()).unwrap());
        let a = acquisition(&mut g, m, v, zv, beta).unwrap();
        g.value(a).item()
    }

    #[test]
    fn acquisition_examples() {
        assert!((eval_acq(2.0, 0.5, &[1.0, 0.0], 1.0) - 1.5).abs() < 1e-12);
        assert!((eval_acq(2.0, 7.0, &[0.0, 0.0], 0.0) - 2.0).abs() < 1e-12);
        assert!((eval_acq(-1.0, 3.0, &[0.0], 2.0) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn mixture_closed_forms() {
        let one = MixtureParams { components: vec![gauss(vec![0.3], vec![1.0])] };
        assert!((mixture_log_density_value(&[0.3], &one).unwrap() + 0.5 * (2.0 * PI).ln()).abs() < 1e-12);
        let two = MixtureParams { components: vec![gauss(vec![1.0, -1.0], vec![1.0, 1.0])] };
        assert!((mixture_log_density_value(&[1.0, -1.0], &two).unwrap() + (2.0 * PI).ln()).abs() < 1e-12);
        let bad = MixtureParams { components: vec![gauss(vec![0.0], vec![0.0])] };
        assert!(mixture_log_density_value(&[0.0], &bad).is_err());
    }

    /// Direct sum of densities, no log-space arithmetic.
    fn brute_force_density(z: &[f64], mixture: &MixtureParams) -> f64 {
        let mut total = 0.0;
        for c in &mixture.components {
            let mut p = 1.0;
            for i in 0..z.len() {
                let u = (z[i] - c.mu[i]) / c.sigma[i];
                p *= (-0.5 * u * u).exp() / (c.sigma[i] * (2.0 * PI).sqrt());
            }
            total += p;
        }
        total / mixture.components.len() as f64
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn mixture_matches_brute_force(seed in 0u64..1_000_000, d in 1usize..=8, m in 1usize..=5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mix = random_mixture(m, d, &mut rng);
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let direct = brute_force_density(&z, &mix).ln();
            let value = mixture_log_density_value(&z, &mix).unwrap();
            let mut g = Graph::new();
            let zv = g.constant(Tensor::matrix(1, d, z.clone()).unwrap());
            let lp = mixture_log_density(&mut g, zv, &mix).unwrap();
            prop_assert!((value - direct).abs() < 1e-9);
            prop_assert!((g.value(lp).item() - direct).abs() < 1e-9);
        }

        #[test]
        fn diversity_scale_invariant(seed in 0u64..100_000, c in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut zs: Vec<Vec<f64>> = (0..4).map(|_| Tensor::randn(&[3], 1.0, &mut rng).into_data()).collect();
            let before = diversity_value(&zs).unwrap();
            zs[1].iter_mut().for_each(|v| *v *= c);
            prop_assert!((diversity_value(&zs).unwrap() - before).abs() < 1e-12);
        }
    }

    #[test]
    fn diversity_examples() {
        let same = vec![vec![1.0, 2.0]; 3];
        assert!((diversity_value(&same).unwrap() - 1.0).abs() < 1e-12);
        let ortho = vec![vec![1.0, 0.0], vec![0.0, 3.0]];
        assert!((diversity_value(&ortho).unwrap() - 0.5).abs() < 1e-12);
        let opposite = vec![vec![1.0, 1.0], vec![-2.0, -2.0]];
        assert!(diversity_value(&opposite).unwrap().abs() < 1e-12);
        let with_zero = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
        assert!((diversity_value(&with_zero).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn quadratic_optimum_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let center = vec![1.2, -0.6, 0.4];
        let s = Quadratic { center: center.clone() };
        let cfg = GenConfig { beta: 0.0, lambda_div: 0.0, opt_steps: 300, ..GenConfig::default() };
        let b = optimize_latent_batch(&s, 1, 6, 0.0, None, &cfg, &mut rng).unwrap();
        for p in &b.points {
            for (x, c) in p.iter().zip(&center) {
                assert!((x - c / 2.0).abs() < 0.05, "{p:?}");
            }
        }
        let mut again = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(optimize_latent_batch(&s, 1, 6, 0.0, None, &cfg, &mut again).unwrap(), b);
    }

    #[test]
    fn strong_diversity_spreads_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = Quadratic { center: vec![1.0, 1.0, 1.0, 1.0] };
        let cfg = GenConfig { lambda_div: 1e3, ..GenConfig::default() };
        let b = optimize_latent_batch(&s, 1, 8, 0.0, None, &cfg, &mut rng).unwrap();
        assert!(mean_pairwise_cosine(&b.points) < 0.2);
    }

    #[test]
    fn higher_level_needs_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Quadratic { center: vec![0.0; 2] };
        assert!(optimize_latent_batch(&s, 2, 3, 1.0, None, &GenConfig::default(), &mut rng).is_err());
    }

    fn small_model(k: usize, rng: &mut ChaCha8Rng) -> MfModel {
        let cfg = ModelConfig { latent_dim: 3, hidden: 16, kernel_hidden: 8, embed_dim: 3, inducing: 5, ..ModelConfig::default() };
        let mut m = MfModel::new(&cfg, 4, 5, k, rng).unwrap();
        for s in &mut m.surrogates {
            let mean = Tensor::randn(&[5], 1.0, rng);
            let f = Tensor::randn(&[5, 5], 0.5, rng);
            s.set_variational(mean, f).unwrap();
        }
        m
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        for trial in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
            let model = small_model(2, &mut rng);
            let mix = random_mixture(3, 3, &mut rng);
            let cfg = GenConfig { lambda_div: 0.7, lambda_lik: 0.5, ..GenConfig::default() };
            let z0 = Tensor::randn(&[4, 3], 1.0, &mut rng);
            let value = |z: &Tensor| {
                let mut g = Graph::new();
                let zv = g.constant(z.clone());
                let o = generation_objective(&mut g, &model, zv, 2, 1.0, Some(&mix), &cfg).unwrap();
                g.value(o.total).item()
            };
            let mut g = Graph::new();
            let zv = g.param(&z0);
            let o = generation_objective(&mut g, &model, zv, 2, 1.0, Some(&mix), &cfg).unwrap();
            let grads = g.backward(o.total).unwrap();
            let analytic = grads.get(zv).unwrap();
            let h = 1e-5;
            for i in 0..z0.len() {
                let (mut up, mut down) = (z0.clone(), z0.clone());
                up.data_mut()[i] += h;
                down.data_mut()[i] -= h;
                let fd = (value(&up) - value(&down)) / (2.0 * h);
                let a = analytic.data()[i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-3, "trial {trial} coord {i}: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn zero_beta_ignores_variational_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut model = small_model(1, &mut rng);
        let z = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let cfg = GenConfig::default();
        let eval = |m: &MfModel, beta: f64| {
            let mut g = Graph::new();
            let zv = g.constant(z.clone());
            let o = generation_objective(&mut g, m, zv, 1, beta, None, &cfg).unwrap();
            g.value(o.total).item()
        };
        let before = (eval(&model, 0.0), eval(&model, 1.0));
        let s = &mut model.surrogates[0];
        let mean = s.variational_mean().clone();
        s.set_variational(mean, Tensor::randn(&[5, 5], 2.0, &mut rng)).unwrap();
        let after = (eval(&model, 0.0), eval(&model, 1.0));
        assert!((before.0 - after.0).abs() < 1e-12);
        assert!((before.1 - after.1).abs() > 1e-6);
    }

    #[test]
    fn recursion_visits_every_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = small_model(3, &mut rng);
        let cfg = GenConfig { opt_steps: 5, ..GenConfig::default() };
        for k in 1..=3 {
            let out = generate_high_scoring(&model, k, 4, 1.0, &cfg, &mut rng).unwrap();
            assert_eq!(out.levels_optimized, k);
            assert_eq!(out.sequences.len(), 4);
            assert_eq!(out.ranked().len(), 4);
        }
        assert!(generate_high_scoring(&model, 4, 4, 1.0, &cfg, &mut rng).is_err());

        let single = small_model(1, &mut ChaCha8Rng::seed_from_u64(9));
        let a = generate_high_scoring(&single, 1, 3, 0.0, &cfg, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let b = optimize_latent_batch(&single, 1, 3, 0.0, None, &cfg, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        assert_eq!(a.latents, b.points);
    }
}
