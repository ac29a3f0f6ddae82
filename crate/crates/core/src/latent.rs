//! Shared encoder, per-level transitions and per-fidelity decoders.
//!
//! Fidelities are 1-based in every public signature. Level 1 is produced by
//! the encoder; level `k + 1` by transition `k` applied to a sample of level `k`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BoundMlp, Mlp};
use crate::numerics::{inverse_softplus, Graph, Tensor, Var, DIAG_FLOOR};
use crate::representation::{encode_batch, encode_one_hot, Alphabet, Sequence};

/// Initial transition noise scale.
const TRANSITION_SCALE: f64 = 0.1;
/// Shrinks the initial transition output so its mean starts near `z`.
const TRANSITION_INIT_GAIN: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchyShape {
    pub alphabet_size: usize,
    pub length: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub fidelities: usize,
}

impl HierarchyShape {
    pub fn input_dim(&self) -> usize {
        self.alphabet_size * self.length
    }

    fn dims(&self, input: usize, output: usize) -> Vec<usize> {
        let mut d = vec![input];
        d.extend(std::iter::repeat_n(self.hidden, self.hidden_layers));
        d.push(output);
        d
    }
}

/// Diagonal Gaussian over one latent level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentGaussian {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl LatentGaussian {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `KL(self || N(0, I))`.
    pub fn kl_to_standard(&self) -> f64 {
        self.mu
            .iter()
            .zip(&self.sigma)
            .map(|(m, s)| 0.5 * (m * m + s * s - 1.0) - s.ln())
            .sum()
    }
}

/// `mu + sigma * eps` with `eps ~ N(0, I)`.
pub fn reparameterize<R: Rng + ?Sized>(g: &LatentGaussian, rng: &mut R) -> Vec<f64> {
    let eps = Tensor::randn(&[g.dim()], 1.0, rng);
    g.mu.iter()
        .zip(&g.sigma)
        .zip(eps.data())
        .map(|((m, s), e)| m + s * e)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentHierarchy {
    shape: HierarchyShape,
    encoder: Mlp,
    transitions: Vec<Mlp>,
    decoders: Vec<Mlp>,
}

/// Mean and scale nodes of a batch of latent Gaussians, each `[B, d_z]`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mu: Var,
    pub sigma: Var,
}

/// Loss pieces of one ELBO evaluation, all batch means.
#[derive(Clone, Copy, Debug)]
pub struct ElboVars {
    /// `reconstruction + kl_weight * kl`.
    pub loss: Var,
    pub reconstruction: Var,
    pub kl: Var,
    /// The sampled `z_k`, `[B, d_z]`.
    pub z: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboValue {
    pub loss: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

#[derive(Clone, Debug)]
pub struct BoundHierarchy {
    latent_dim: usize,
    alphabet_size: usize,
    length: usize,
    encoder: BoundMlp,
    transitions: Vec<BoundMlp>,
    decoders: Vec<BoundMlp>,
}

impl LatentHierarchy {
    pub fn new<R: Rng + ?Sized>(shape: HierarchyShape, rng: &mut R) -> Result<Self> {
        if shape.fidelities == 0 || shape.latent_dim == 0 || shape.hidden == 0 {
            return Err(Error::InvalidArgument(format!("degenerate hierarchy {shape:?}")));
        }
        let d = shape.latent_dim;
        let encoder = Mlp::new(&shape.dims(shape.input_dim(), 2 * d), rng);
        // Transitions start close to `z -> N(z, TRANSITION_SCALE^2)`.
        let transitions = (1..shape.fidelities)
            .map(|_| {
                let mut m = Mlp::new(&shape.dims(d, 2 * d), rng);
                m.scale_output_weights(TRANSITION_INIT_GAIN);
                m.set_output_bias(d, 2 * d, inverse_softplus(TRANSITION_SCALE - DIAG_FLOOR));
                m
            })
            .collect();
        let decoders = (0..shape.fidelities)
            .map(|_| Mlp::new(&shape.dims(d, shape.input_dim()), rng))
            .collect();
        Ok(Self { shape, encoder, transitions, decoders })
    }

    /// Copies decoder 1 into every higher decoder, so upper levels start from
    /// what the fidelity-1 data taught the shared encoder and decoder.
    pub fn seed_upper_decoders(&mut self) {
        let first = self.decoders[0].clone();
        for d in &mut self.decoders[1..] {
            *d = first.clone();
        }
    }

    pub fn shape(&self) -> &HierarchyShape {
        &self.shape
    }

    pub fn fidelities(&self) -> usize {
        self.shape.fidelities
    }

    pub fn latent_dim(&self) -> usize {
        self.shape.latent_dim
    }

    /// Binds encoder, transitions and decoders in that order.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundHierarchy {
        BoundHierarchy {
            latent_dim: self.shape.latent_dim,
            alphabet_size: self.shape.alphabet_size,
            length: self.shape.length,
            encoder: self.encoder.bind(g, trainable),
            transitions: self.transitions.iter().map(|m| m.bind(g, trainable)).collect(),
            decoders: self.decoders.iter().map(|m| m.bind(g, trainable)).collect(),
        }
    }

    /// Parameters in bind order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.params_mut();
        for m in self.transitions.iter_mut().chain(self.decoders.iter_mut()) {
            out.extend(m.params_mut());
        }
        out
    }

    pub fn encode(&self, x: &Sequence) -> Result<LatentGaussian> {
        let x = encode_one_hot(x, &Alphabet::with_size(self.shape.alphabet_size)?)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let xv = g.constant(x.reshaped(vec![1, self.shape.input_dim()])?);
        let out = b.encode(&mut g, xv)?;
        Ok(to_gaussian(&g, out))
    }

    /// Distribution of level `k + 1` given a point of level `k`.
    pub fn transition(&self, z: &[f64], k: usize) -> Result<LatentGaussian> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let zv = g.constant(Tensor::matrix(1, z.len(), z.to_vec())?);
        let out = b.transition(&mut g, zv, k)?;
        Ok(to_gaussian(&g, out))
    }

    /// Decoder `k` logits for one latent point, shape `[L, A]`.
    pub fn decode_logits(&self, z: &[f64], k: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let zv = g.constant(Tensor::matrix(1, z.len(), z.to_vec())?);
        let out = b.decode(&mut g, zv, k)?;
        g.value(out)
            .clone()
            .reshaped(vec![self.shape.length, self.shape.alphabet_size])
    }

    /// Batch-mean ELBO loss at fidelity `k` with one sample per level.
    pub fn elbo_loss<R: Rng + ?Sized>(
        &self,
        xs: &[Sequence],
        k: usize,
        kl_weight: f64,
        rng: &mut R,
    ) -> Result<ElboValue> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(self.one_hot(xs)?);
        let e = b.elbo(&mut g, x, k, kl_weight, rng)?;
        Ok(ElboValue {
            loss: g.value(e.loss).item(),
            reconstruction: g.value(e.reconstruction).item(),
            kl: g.value(e.kl).item(),
        })
    }

    /// Level-`k` latents obtained by chaining means only, `[B, d_z]`.
    pub fn mean_latents(&self, xs: &[Sequence], k: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(self.one_hot(xs)?);
        let z = b.mean_path(&mut g, x, k)?;
        Ok(g.value(z).clone())
    }

    /// Fraction of positions recovered by greedy decoding of the mean path.
    pub fn reconstruction_accuracy(&self, xs: &[Sequence], k: usize) -> Result<f64> {
        let hits = self.greedy_hits(xs, k)?;
        Ok(hits.iter().sum::<usize>() as f64 / (xs.len() * self.shape.length).max(1) as f64)
    }

    /// Fraction of sequences recovered exactly by greedy decoding of the mean path.
    pub fn reconstruction_exact_match(&self, xs: &[Sequence], k: usize) -> Result<f64> {
        if xs.is_empty() {
            return Ok(1.0);
        }
        let hits = self.greedy_hits(xs, k)?;
        Ok(hits.iter().filter(|&&h| h == self.shape.length).count() as f64 / xs.len() as f64)
    }

    /// Correct positions per sequence under greedy decoding.
    fn greedy_hits(&self, xs: &[Sequence], k: usize) -> Result<Vec<usize>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(self.one_hot(xs)?);
        let z = b.mean_path(&mut g, x, k)?;
        let logits = b.decode(&mut g, z, k)?;
        let a = self.shape.alphabet_size;
        let t = g.value(logits);
        Ok(xs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let row = t.row(i);
                x.ids()
                    .iter()
                    .enumerate()
                    .filter(|&(p, &id)| {
                        let block = &row[p * a..(p + 1) * a];
                        (0..a).fold(0, |b, j| if block[j] > block[b] { j } else { b }) == id
                    })
                    .count()
            })
            .collect())
    }

    fn one_hot(&self, xs: &[Sequence]) -> Result<Tensor> {
        let refs: Vec<&Sequence> = xs.iter().collect();
        encode_batch(&refs, &Alphabet::with_size(self.shape.alphabet_size)?)
    }
}

fn to_gaussian(g: &Graph, v: GaussianVars) -> LatentGaussian {
    LatentGaussian {
        mu: g.value(v.mu).row(0).to_vec(),
        sigma: g.value(v.sigma).row(0).to_vec(),
    }
}

impl BoundHierarchy {
    pub fn fidelities(&self) -> usize {
        self.decoders.len()
    }

    fn check_fidelity(&self, k: usize, max: usize) -> Result<()> {
        if k == 0 || k > max {
            return Err(Error::FidelityOutOfRange { k, max });
        }
        Ok(())
    }

    fn gaussian_head(&self, g: &mut Graph, out: Var) -> Result<GaussianVars> {
        let d = self.latent_dim;
        let mu = g.slice_last(out, 0, d)?;
        let raw = g.slice_last(out, d, 2 * d)?;
        let sp = g.softplus(raw);
        let sigma = g.add_scalar(sp, DIAG_FLOOR);
        Ok(GaussianVars { mu, sigma })
    }

    /// `x` is a `[B, L * A]` one-hot batch.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<GaussianVars> {
        let out = self.encoder.forward(g, x)?;
        self.gaussian_head(g, out)
    }

    pub fn transition(&self, g: &mut Graph, z: Var, k: usize) -> Result<GaussianVars> {
        self.check_fidelity(k, self.transitions.len())?;
        let out = self.transitions[k - 1].forward(g, z)?;
        let head = self.gaussian_head(g, out)?;
        // Residual mean keeps neighbouring latent spaces aligned.
        let mu = g.add(z, head.mu)?;
        Ok(GaussianVars { mu, sigma: head.sigma })
    }

    /// Flat logits `[B, L * A]` from decoder `k`.
    pub fn decode(&self, g: &mut Graph, z: Var, k: usize) -> Result<Var> {
        self.check_fidelity(k, self.decoders.len())?;
        self.decoders[k - 1].forward(g, z)
    }

    pub fn mean_path(&self, g: &mut Graph, x: Var, k: usize) -> Result<Var> {
        self.check_fidelity(k, self.decoders.len())?;
        let mut z = self.encode(g, x)?.mu;
        for j in 1..k {
            z = self.transition(g, z, j)?.mu;
        }
        Ok(z)
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        gauss: GaussianVars,
        rng: &mut R,
    ) -> Result<Var> {
        let shape = g.value(gauss.mu).shape().to_vec();
        let eps = g.constant(Tensor::randn(&shape, 1.0, rng));
        let noise = g.mul(gauss.sigma, eps)?;
        g.add(gauss.mu, noise)
    }

    /// Samples the path `x -> z_1 -> ... -> z_k`, decodes with decoder `k`
    /// and returns cross-entropy plus weighted KL summed over visited levels.
    pub fn elbo<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        x: Var,
        k: usize,
        kl_weight: f64,
        rng: &mut R,
    ) -> Result<ElboVars> {
        self.check_fidelity(k, self.decoders.len())?;
        let mut gauss = self.encode(g, x)?;
        let mut kl = kl_standard(g, gauss)?;
        let mut z = self.sample(g, gauss, rng)?;
        for j in 1..k {
            gauss = self.transition(g, z, j)?;
            let level = kl_standard(g, gauss)?;
            kl = g.add(kl, level)?;
            z = self.sample(g, gauss, rng)?;
        }
        let logits = self.decode(g, z, k)?;
        let reconstruction = cross_entropy(g, logits, x, self.alphabet_size, self.length)?;
        let weighted = g.scale(kl, kl_weight);
        let loss = g.add(reconstruction, weighted)?;
        Ok(ElboVars { loss, reconstruction, kl, z })
    }
}

/// Batch mean of `KL(N(mu, sigma^2) || N(0, I))` summed over dimensions.
pub fn kl_standard(g: &mut Graph, gauss: GaussianVars) -> Result<Var> {
    let rows = g.value(gauss.mu).shape()[0];
    let m2 = g.square(gauss.mu);
    let s2 = g.square(gauss.sigma);
    let ls = g.log(gauss.sigma);
    let a = g.add(m2, s2)?;
    let a = g.add_scalar(a, -1.0);
    let a = g.scale(a, 0.5);
    let t = g.sub(a, ls)?;
    let total = g.sum(t);
    Ok(g.scale(total, 1.0 / rows as f64))
}

/// Batch mean of the per-position cross-entropy summed over positions.
/// `target` is the one-hot batch matching `logits`, both `[B, L * A]`.
pub fn cross_entropy(
    g: &mut Graph,
    logits: Var,
    target: Var,
    alphabet_size: usize,
    length: usize,
) -> Result<Var> {
    let rows = g.value(logits).shape()[0];
    let flat = g.reshape(logits, &[rows * length, alphabet_size])?;
    let lp = g.log_softmax_last(flat);
    let t = g.reshape(target, &[rows * length, alphabet_size])?;
    let picked = g.mul(lp, t)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / rows as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::AdamState;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(k: usize) -> HierarchyShape {
        HierarchyShape {
            alphabet_size: 5,
            length: 6,
            latent_dim: 4,
            hidden: 16,
            hidden_layers: 3,
            fidelities: k,
        }
    }

    fn random_seqs(n: usize, a: usize, l: usize, rng: &mut ChaCha8Rng) -> Vec<Sequence> {
        let alphabet = Alphabet::with_size(a).unwrap();
        (0..n).map(|_| Sequence::random(&alphabet, l, rng)).collect()
    }

    #[test]
    fn kl_analytic_cases() {
        let prior = LatentGaussian { mu: vec![0.0; 3], sigma: vec![1.0; 3] };
        assert_eq!(prior.kl_to_standard(), 0.0);
        let shifted = LatentGaussian { mu: vec![0.7, -2.0], sigma: vec![1.0; 2] };
        assert!((shifted.kl_to_standard() - (0.49 + 4.0) / 2.0).abs() < 1e-12);

        let mut g = Graph::new();
        let mu = g.constant(Tensor::matrix(2, 2, vec![0.7, -2.0, 0.7, -2.0]).unwrap());
        let sigma = g.constant(Tensor::full(&[2, 2], 1.0));
        let kl = kl_standard(&mut g, GaussianVars { mu, sigma }).unwrap();
        assert!((g.value(kl).item() - shifted.kl_to_standard()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_limits() {
        let (a, l) = (4, 3);
        let alphabet = Alphabet::with_size(a).unwrap();
        let x = Sequence::new(vec![1, 3, 0], &alphabet).unwrap();
        let target = encode_one_hot(&x, &alphabet).unwrap().reshaped(vec![1, a * l]).unwrap();

        let mut g = Graph::new();
        let t = g.constant(target.clone());
        let uniform = g.constant(Tensor::zeros(&[1, a * l]));
        let ce = cross_entropy(&mut g, uniform, t, a, l).unwrap();
        assert!((g.value(ce).item() - l as f64 * (a as f64).ln()).abs() < 1e-12);

        let sharp = g.constant(target.map(|v| v * 200.0));
        let ce = cross_entropy(&mut g, sharp, t, a, l).unwrap();
        assert!(g.value(ce).item() < 1e-12);
    }

    #[test]
    fn sigma_positive_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = LatentHierarchy::new(shape(3), &mut rng).unwrap();
        let xs = random_seqs(1000, 5, 6, &mut rng);
        for x in xs.iter().take(1000) {
            let q = h.encode(x).unwrap();
            assert!(q.sigma.iter().all(|&s| s >= DIAG_FLOOR));
        }
        assert_eq!(h.encode(&xs[0]).unwrap(), h.encode(&xs[0]).unwrap());
        let q = h.encode(&xs[0]).unwrap();
        let t = h.transition(&q.mu, 1).unwrap();
        assert_eq!((t.mu.len(), t.sigma.len()), (4, 4));
        assert_eq!(t, h.transition(&q.mu, 1).unwrap());
        assert!(h.transition(&q.mu, 3).is_err());
        assert!(h.transition(&q.mu, 0).is_err());
        assert!(h.decode_logits(&q.mu, 4).is_err());
        assert_eq!(h.decode_logits(&q.mu, 3).unwrap().shape(), &[6, 5]);
    }

    #[test]
    fn chained_transitions_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = LatentHierarchy::new(shape(4), &mut rng).unwrap();
        let mut g = Graph::new();
        let b = h.bind(&mut g, false);
        let mut z = g.constant(Tensor::randn(&[1000, 4], 1.0, &mut rng));
        for k in 1..4 {
            let q = b.transition(&mut g, z, k).unwrap();
            z = b.sample(&mut g, q, &mut rng).unwrap();
        }
        assert!(g.value(z).all_finite());
    }

    #[test]
    fn fresh_transition_is_near_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = LatentHierarchy::new(shape(2), &mut rng).unwrap();
        let z = [0.7, -1.2, 0.0, 2.5];
        let q = h.transition(&z, 1).unwrap();
        for ((m, s), z) in q.mu.iter().zip(&q.sigma).zip(&z) {
            assert!((m - z).abs() < 0.1, "mean {m} vs {z}");
            assert!((s - TRANSITION_SCALE).abs() < 0.02, "sigma {s}");
        }
    }

    #[test]
    fn seeded_decoders_agree_with_decoder_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut h = LatentHierarchy::new(shape(3), &mut rng).unwrap();
        let z = [0.3, -0.4, 1.0, 0.2];
        assert_ne!(h.decode_logits(&z, 1).unwrap(), h.decode_logits(&z, 3).unwrap());
        h.seed_upper_decoders();
        let first = h.decode_logits(&z, 1).unwrap();
        assert_eq!(first, h.decode_logits(&z, 2).unwrap());
        assert_eq!(first, h.decode_logits(&z, 3).unwrap());
    }

    #[test]
    fn reparameterize_mean_and_identity_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = LatentGaussian { mu: vec![1.5, -0.5, 0.0], sigma: vec![0.3, 2.0, 1.0] };
        let n = 10_000;
        let mut acc = [0.0; 3];
        for _ in 0..n {
            for (a, z) in acc.iter_mut().zip(reparameterize(&q, &mut rng)) {
                *a += z / n as f64;
            }
        }
        for i in 0..3 {
            assert!((acc[i] - q.mu[i]).abs() < 3.0 * q.sigma[i] / (n as f64).sqrt());
        }

        let degenerate = LatentGaussian { mu: q.mu.clone(), sigma: vec![0.0; 3] };
        assert_eq!(reparameterize(&degenerate, &mut rng), q.mu);

        let mut g = Graph::new();
        let h = LatentHierarchy::new(shape(2), &mut rng).unwrap();
        let b = h.bind(&mut g, false);
        let mu = g.param(&Tensor::matrix(1, 3, q.mu.clone()).unwrap());
        let sigma = g.constant(Tensor::matrix(1, 3, q.sigma.clone()).unwrap());
        let z = b.sample(&mut g, GaussianVars { mu, sigma }, &mut rng).unwrap();
        let s = g.sum(z);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(mu).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn gradients_confined_to_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = LatentHierarchy::new(shape(4), &mut rng).unwrap();
        let xs = random_seqs(8, 5, 6, &mut rng);
        let x = h.one_hot(&xs).unwrap();
        let per_mlp = 2 * (shape(4).hidden_layers + 1);
        for k in 1..=4 {
            let mut g = Graph::new();
            let b = h.bind(&mut g, true);
            let xv = g.constant(x.clone());
            let e = b.elbo(&mut g, xv, k, 0.1, &mut rng).unwrap();
            let grads = g.backward(e.loss).unwrap();
            let params = g.params().to_vec();
            let nonzero = |v: Var| grads.get(v).is_some_and(|t| t.data().iter().any(|&x| x != 0.0));
            let group = |i: usize| &params[i * per_mlp..(i + 1) * per_mlp];
            // encoder, transitions 1..3, decoders 1..4
            assert!(group(0).iter().any(|&v| nonzero(v)));
            for j in 1..4 {
                assert_eq!(group(j).iter().any(|&v| nonzero(v)), j < k, "transition {j} at k={k}");
            }
            for j in 1..=4 {
                assert_eq!(group(3 + j).iter().any(|&v| nonzero(v)), j == k, "decoder {j} at k={k}");
            }
        }
    }

    #[test]
    fn training_memorizes_small_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = HierarchyShape {
            alphabet_size: 12,
            length: 10,
            latent_dim: 16,
            hidden: 128,
            hidden_layers: 3,
            fidelities: 2,
        };
        let mut h = LatentHierarchy::new(s, &mut rng).unwrap();
        let xs = random_seqs(64, 12, 10, &mut rng);
        let x = h.one_hot(&xs).unwrap();
        let mut adam = AdamState::new(1e-3);
        let mut losses = Vec::new();
        for _ in 0..500 {
            let mut g = Graph::new();
            let b = h.bind(&mut g, true);
            let xv = g.constant(x.clone());
            let e = b.elbo(&mut g, xv, 1, 0.1, &mut rng).unwrap();
            losses.push(g.value(e.loss).item());
            assert!(g.value(e.kl).item() >= 0.0 && g.value(e.reconstruction).item() >= 0.0);
            let mut grads = g.backward(e.loss).unwrap();
            let gs: Vec<Option<Tensor>> = g.params().iter().map(|&v| grads.take(v)).collect();
            let mut params = h.params_mut();
            adam.step(&mut params, &gs).unwrap();
        }
        let early: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let late: f64 = losses[490..].iter().sum::<f64>() / 10.0;
        assert!(late <= 0.5 * early, "loss {early} -> {late}");
        let acc = h.reconstruction_accuracy(&xs, 1).unwrap();
        assert!(acc > 0.9, "reconstruction {acc}");
        let norms: f64 = h
            .mean_latents(&xs, 1)
            .unwrap()
            .data()
            .chunks(16)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum::<f64>()
            / 64.0;
        assert!(norms > 0.1 * 4.0 && norms < 3.0 * 4.0, "mean norm {norms}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn elbo_terms_nonnegative(seed in 0u64..1000, k in 1usize..=3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = LatentHierarchy::new(shape(3), &mut rng).unwrap();
            let xs = random_seqs(4, 5, 6, &mut rng);
            let v = h.elbo_loss(&xs, k, 0.1, &mut rng).unwrap();
            prop_assert!(v.kl >= 0.0 && v.reconstruction >= 0.0);
            prop_assert!((v.loss - v.reconstruction - 0.1 * v.kl).abs() < 1e-9);
        }
    }
}
