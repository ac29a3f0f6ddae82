//! Sparse variational GP surrogates over a latent space, with a deep kernel.
//!
//! The variational distribution is whitened: `u = L v` with `L L^T = K_PP`
//! and `q(v) = N(m, F F^T)`, so the prior is `m = 0, F = I`.
//!
//! Surrogates regress a "quality" target: the oracle score, standardized and
//! negated, so larger predictions mean better designs.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BoundMlp, Mlp};
use crate::numerics::{inverse_softplus, softplus_value, Graph, Tensor, Var, DIAG_FLOOR};

/// Cholesky jitters tried in order on the inducing covariance.
pub const JITTER_LADDER: [f64; 4] = [1e-8, 1e-6, 1e-4, 1e-3];

/// Lower bound added to the softplus of the noise variance.
const NOISE_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvgpShape {
    pub latent_dim: usize,
    pub kernel_hidden: usize,
    pub embed_dim: usize,
    pub inducing: usize,
}

/// Affine map between oracle scores and regression targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputScaling {
    pub mean: f64,
    pub std: f64,
}

impl Default for OutputScaling {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

impl OutputScaling {
    /// Sample mean and standard deviation; a degenerate spread maps to 1.
    pub fn fit(ys: &[f64]) -> Self {
        if ys.is_empty() {
            return Self::default();
        }
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        let std = if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 };
        Self { mean, std }
    }

    pub fn to_target(&self, y: f64) -> f64 {
        -(y - self.mean) / self.std
    }

    pub fn from_target(&self, t: f64) -> f64 {
        self.mean - self.std * t
    }
}

/// Prediction at one latent point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogatePosterior {
    /// Predicted oracle score.
    pub mean: f64,
    /// Predictive variance of an observed score, in squared score units.
    pub variance: f64,
    /// Latent function variance in target units (no observation noise).
    pub function_variance: f64,
    /// `function_variance / sigma_f^2`: 1 at the prior, 0 when pinned down.
    pub relative_variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Svgp {
    shape: SvgpShape,
    deep_kernel: Mlp,
    inducing: Tensor,
    variational_mean: Tensor,
    covariance_raw: Tensor,
    raw_scale: Tensor,
    raw_lengthscale: Tensor,
    raw_noise: Tensor,
    scaling: OutputScaling,
}

/// Which parameter groups become trainable leaves when binding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    Frozen,
    /// Only `m` and `F`.
    Variational,
    Full,
}

#[derive(Clone, Debug)]
pub struct BoundSvgp {
    kernel: BoundMlp,
    inducing: Var,
    mean: Var,
    covariance_raw: Var,
    raw_scale: Var,
    raw_lengthscale: Var,
    raw_noise: Var,
}

/// Per-graph quantities shared by every prediction on that graph.
#[derive(Clone, Copy, Debug)]
pub struct Prepared {
    pub chol: Var,
    pub factor: Var,
    pub scale: Var,
    pub lengthscale: Var,
    pub noise: Var,
    pub jitter: f64,
}

impl Svgp {
    pub fn new<R: Rng + ?Sized>(shape: SvgpShape, rng: &mut R) -> Result<Self> {
        if shape.inducing == 0 || shape.embed_dim == 0 || shape.latent_dim == 0 {
            return Err(Error::InvalidArgument(format!("degenerate surrogate {shape:?}")));
        }
        let h = shape.kernel_hidden;
        let deep_kernel = Mlp::new(&[shape.latent_dim, h, h, h, shape.embed_dim], rng);
        let p = shape.inducing;
        let inducing = Tensor::randn(&[p, shape.embed_dim], 1.0, rng);
        let mut covariance_raw = Tensor::zeros(&[p, p]);
        let diag = inverse_softplus(1.0 - DIAG_FLOOR);
        for i in 0..p {
            covariance_raw.data_mut()[i * p + i] = diag;
        }
        Ok(Self {
            shape,
            deep_kernel,
            inducing,
            variational_mean: Tensor::zeros(&[p, 1]),
            covariance_raw,
            raw_scale: Tensor::scalar(inverse_softplus(1.0 - DIAG_FLOOR)),
            raw_lengthscale: Tensor::scalar(inverse_softplus(1.0 - DIAG_FLOOR)),
            raw_noise: Tensor::scalar(inverse_softplus(0.1 - NOISE_FLOOR)),
            scaling: OutputScaling::default(),
        })
    }

    pub fn shape(&self) -> &SvgpShape {
        &self.shape
    }

    pub fn scaling(&self) -> OutputScaling {
        self.scaling
    }

    pub fn set_scaling(&mut self, scaling: OutputScaling) {
        self.scaling = scaling;
    }

    /// `(sigma_f^2, lengthscale, sigma_n^2)`.
    pub fn hyperparameters(&self) -> (f64, f64, f64) {
        (
            softplus_value(self.raw_scale.item()) + DIAG_FLOOR,
            softplus_value(self.raw_lengthscale.item()) + DIAG_FLOOR,
            softplus_value(self.raw_noise.item()) + NOISE_FLOOR,
        )
    }

    pub fn set_hyperparameters(&mut self, scale: f64, lengthscale: f64, noise: f64) {
        self.raw_scale = Tensor::scalar(inverse_softplus(scale - DIAG_FLOOR));
        self.raw_lengthscale = Tensor::scalar(inverse_softplus(lengthscale - DIAG_FLOOR));
        self.raw_noise = Tensor::scalar(inverse_softplus(noise - NOISE_FLOOR));
    }

    pub fn inducing(&self) -> &Tensor {
        &self.inducing
    }

    pub fn set_inducing(&mut self, inducing: Tensor) -> Result<()> {
        if inducing.shape() != self.inducing.shape() {
            return Err(Error::Shape {
                op: "set_inducing",
                detail: format!("{:?} vs {:?}", inducing.shape(), self.inducing.shape()),
            });
        }
        self.inducing = inducing;
        Ok(())
    }

    pub fn variational_mean(&self) -> &Tensor {
        &self.variational_mean
    }

    /// Sets `m` and the unconstrained factor; test and diagnostics hook.
    pub fn set_variational(&mut self, mean: Tensor, covariance_raw: Tensor) -> Result<()> {
        let p = self.shape.inducing;
        if mean.len() != p || covariance_raw.shape() != [p, p] {
            return Err(Error::Shape {
                op: "set_variational",
                detail: format!("{:?}, {:?} for P = {p}", mean.shape(), covariance_raw.shape()),
            });
        }
        self.variational_mean = mean.reshaped(vec![p, 1])?;
        self.covariance_raw = covariance_raw;
        Ok(())
    }

    /// Takes `other`'s deep kernel, signal scale and lengthscale. Noise,
    /// inducing points and the variational distribution stay as they are.
    pub fn inherit_kernel(&mut self, other: &Svgp) -> Result<()> {
        if other.shape != self.shape {
            return Err(Error::Shape { op: "inherit_kernel", detail: format!("{:?} vs {:?}", other.shape, self.shape) });
        }
        self.deep_kernel = other.deep_kernel.clone();
        self.raw_scale = other.raw_scale.clone();
        self.raw_lengthscale = other.raw_lengthscale.clone();
        Ok(())
    }

    /// Deep-kernel embeddings of the rows of `z`.
    pub fn embed(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let k = self.deep_kernel.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let e = k.forward(&mut g, zv)?;
        Ok(g.value(e).clone())
    }

    /// Places the inducing points on a random subset of `embeddings` rows,
    /// repeating rows with small perturbations when there are too few.
    pub fn init_inducing<R: Rng + ?Sized>(&mut self, embeddings: &Tensor, rng: &mut R) -> Result<()> {
        let (n, d) = embeddings.dims2("init_inducing")?;
        if d != self.shape.embed_dim {
            return Err(Error::Shape {
                op: "init_inducing",
                detail: format!("embedding width {d}, expected {}", self.shape.embed_dim),
            });
        }
        let p = self.shape.inducing;
        let mut data = Vec::with_capacity(p * d);
        if n >= p {
            for i in sample(rng, n, p).into_iter() {
                data.extend_from_slice(embeddings.row(i));
            }
        } else {
            for i in 0..p {
                let jitter = if i < n { 0.0 } else { 0.1 };
                let noise = Tensor::randn(&[d], jitter, rng);
                data.extend(embeddings.row(i % n).iter().zip(noise.data()).map(|(a, b)| a + b));
            }
        }
        self.inducing = Tensor::matrix(p, d, data)?;
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, binding: Binding) -> BoundSvgp {
        let full = binding == Binding::Full;
        let var = binding != Binding::Frozen;
        let mut leaf = |t: &Tensor, train: bool| if train { g.param(t) } else { g.constant(t.clone()) };
        let inducing = leaf(&self.inducing, full);
        let mean = leaf(&self.variational_mean, var);
        let covariance_raw = leaf(&self.covariance_raw, var);
        let raw_scale = leaf(&self.raw_scale, full);
        let raw_lengthscale = leaf(&self.raw_lengthscale, full);
        let raw_noise = leaf(&self.raw_noise, full);
        let kernel = self.deep_kernel.bind(g, full);
        BoundSvgp { kernel, inducing, mean, covariance_raw, raw_scale, raw_lengthscale, raw_noise }
    }

    /// Parameters in the order [`Svgp::bind`] registers them for `binding`.
    pub fn params_mut(&mut self, binding: Binding) -> Vec<&mut Tensor> {
        match binding {
            Binding::Frozen => Vec::new(),
            Binding::Variational => vec![&mut self.variational_mean, &mut self.covariance_raw],
            Binding::Full => {
                let mut out = vec![
                    &mut self.inducing,
                    &mut self.variational_mean,
                    &mut self.covariance_raw,
                    &mut self.raw_scale,
                    &mut self.raw_lengthscale,
                    &mut self.raw_noise,
                ];
                out.extend(self.deep_kernel.params_mut());
                out
            }
        }
    }

    /// Posterior at each row of `z` (`[B, d_z]`), in oracle units.
    pub fn posterior_batch(&self, z: &Tensor) -> Result<Vec<SurrogatePosterior>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, Binding::Frozen);
        let prep = b.prepare(&mut g)?;
        let zv = g.constant(z.clone());
        let (mean, fvar) = b.predict(&mut g, &prep, zv)?;
        let scale = g.value(prep.scale).item();
        let noise = g.value(prep.noise).item();
        let s = self.scaling;
        let out: Vec<SurrogatePosterior> = g
            .value(mean)
            .data()
            .iter()
            .zip(g.value(fvar).data())
            .map(|(&m, &v)| SurrogatePosterior {
                mean: s.from_target(m),
                variance: s.std * s.std * (v + noise),
                function_variance: v,
                relative_variance: v / scale,
            })
            .collect();
        if out.iter().any(|p| !p.mean.is_finite() || !p.variance.is_finite()) {
            return Err(Error::Unstable("non-finite posterior".into()));
        }
        Ok(out)
    }

    pub fn posterior(&self, z: &[f64]) -> Result<SurrogatePosterior> {
        let t = Tensor::matrix(1, z.len(), z.to_vec())?;
        Ok(self.posterior_batch(&t)?[0])
    }

    /// Negative ELBO on already-scaled targets, likelihood rescaled to `n_total`.
    pub fn neg_elbo_value(&self, z: &Tensor, targets: &[f64], n_total: usize) -> Result<f64> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, Binding::Frozen);
        let prep = b.prepare(&mut g)?;
        let zv = g.constant(z.clone());
        let loss = b.neg_elbo(&mut g, &prep, zv, targets, n_total)?;
        Ok(g.value(loss).item())
    }

    /// `KL(q(v) || N(0, I))`.
    pub fn kl_value(&self) -> Result<f64> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, Binding::Frozen);
        let prep = b.prepare(&mut g)?;
        let kl = b.kl(&mut g, &prep)?;
        Ok(g.value(kl).item())
    }
}

impl BoundSvgp {
    /// Hyperparameters and the inducing Cholesky factor, escalating jitter
    /// through [`JITTER_LADDER`].
    pub fn prepare(&self, g: &mut Graph) -> Result<Prepared> {
        let s = g.softplus(self.raw_scale);
        let scale = g.add_scalar(s, DIAG_FLOOR);
        let l = g.softplus(self.raw_lengthscale);
        let lengthscale = g.add_scalar(l, DIAG_FLOOR);
        let n = g.softplus(self.raw_noise);
        let noise = g.add_scalar(n, NOISE_FLOOR);
        let kpp = g.matern52(self.inducing, self.inducing, lengthscale, scale)?;
        let p = g.value(kpp).shape()[0];
        let factor = g.lower_factor(self.covariance_raw)?;
        for &jitter in &JITTER_LADDER {
            let eye = g.constant(Tensor::eye(p).map(|v| v * jitter));
            let a = g.add(kpp, eye)?;
            match g.cholesky(a) {
                Ok(chol) => return Ok(Prepared { chol, factor, scale, lengthscale, noise, jitter }),
                Err(Error::NotPositiveDefinite { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
        Err(Error::Unstable(format!(
            "inducing covariance not positive definite at jitter {}",
            JITTER_LADDER[3]
        )))
    }

    pub fn embed(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.kernel.forward(g, z)
    }

    /// Predictive mean and latent function variance, each `[B]`, target units.
    pub fn predict(&self, g: &mut Graph, prep: &Prepared, z: Var) -> Result<(Var, Var)> {
        let e = self.embed(g, z)?;
        let kpb = g.matern52(self.inducing, e, prep.lengthscale, prep.scale)?;
        let a = g.tri_solve_lower(prep.chol, kpb)?;
        let at = g.transpose(a)?;
        let mean = g.matmul(at, self.mean)?;
        let rows = g.value(mean).shape()[0];
        let mean = g.reshape(mean, &[rows])?;

        let a2 = g.square(at);
        let explained = g.sum_last(a2);
        let ft = g.transpose(prep.factor)?;
        let fa = g.matmul(ft, a)?;
        let fat = g.transpose(fa)?;
        let fa2 = g.square(fat);
        let retained = g.sum_last(fa2);
        let v = g.sub(retained, explained)?;
        let v = g.add(v, prep.scale)?;
        let fvar = g.clamp_min(v, 1e-12);
        Ok((mean, fvar))
    }

    pub fn kl(&self, g: &mut Graph, prep: &Prepared) -> Result<Var> {
        let p = g.value(prep.factor).shape()[0] as f64;
        let f2 = g.square(prep.factor);
        let tr = g.sum(f2);
        let m2 = g.square(self.mean);
        let mm = g.sum(m2);
        let d = g.diag(prep.factor)?;
        let ld = g.log(d);
        let logdet = g.sum(ld);
        let a = g.add(tr, mm)?;
        let a = g.add_scalar(a, -p);
        let b = g.scale(logdet, 2.0);
        let a = g.sub(a, b)?;
        Ok(g.scale(a, 0.5))
    }

    /// `-(n_total / B * sum_i E_q[log p(t_i | f_i)] - KL)`.
    pub fn neg_elbo(
        &self,
        g: &mut Graph,
        prep: &Prepared,
        z: Var,
        targets: &[f64],
        n_total: usize,
    ) -> Result<Var> {
        let (mean, fvar) = self.predict(g, prep, z)?;
        let b = targets.len();
        if b == 0 || g.value(mean).len() != b {
            return Err(Error::Shape {
                op: "svgp_elbo",
                detail: format!("{} targets for {} inputs", b, g.value(mean).len()),
            });
        }
        let t = g.constant(Tensor::vector(targets.to_vec()));
        let r = g.sub(t, mean)?;
        let r2 = g.square(r);
        let q = g.add(r2, fvar)?;
        let sq = g.sum(q);
        let two_noise = g.scale(prep.noise, 2.0);
        let quad = g.div(sq, two_noise)?;
        let ln = g.log(prep.noise);
        let ln = g.add_scalar(ln, (2.0 * PI).ln());
        let norm = g.scale(ln, 0.5 * b as f64);
        let nll = g.add(quad, norm)?;
        let nll = g.scale(nll, n_total as f64 / b as f64);
        let kl = self.kl(g, prep)?;
        g.add(nll, kl)
    }
}
