use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::{Graph, Tensor, Var};

/// Fully-connected network with ReLU between layers and a linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// An [`Mlp`] whose parameters live on a [`Graph`].
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`; He-scaled normal weights, zero biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output sizes");
        let mut weights = Vec::with_capacity(dims.len() - 1);
        let mut biases = Vec::with_capacity(dims.len() - 1);
        for (i, w) in dims.windows(2).enumerate() {
            let last = i == dims.len() - 2;
            let gain = if last { 1.0 } else { 2.0 };
            weights.push(Tensor::randn(&[w[0], w[1]], (gain / w[0] as f64).sqrt(), rng));
            biases.push(Tensor::zeros(&[w[1]]));
        }
        Self { weights, biases }
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().unwrap().shape()[1]
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    /// Puts every weight and bias on `g`, as parameters when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        let layers = self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| {
                if trainable {
                    (g.param(w), g.param(b))
                } else {
                    (g.constant(w.clone()), g.constant(b.clone()))
                }
            })
            .collect();
        BoundMlp { layers }
    }

    /// Parameters in the same order [`Mlp::bind`] registers them.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    /// Multiplies the output layer's weights by `factor`.
    pub fn scale_output_weights(&mut self, factor: f64) {
        for v in self.weights.last_mut().unwrap().data_mut() {
            *v *= factor;
        }
    }

    /// Sets the output bias of units `start..end`.
    pub fn set_output_bias(&mut self, start: usize, end: usize, value: f64) {
        let b = self.biases.last_mut().unwrap();
        for v in &mut b.data_mut()[start..end] {
            *v = value;
        }
    }
}

impl BoundMlp {
    /// `x` is `[B, in]`; returns `[B, out]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = g.matmul(h, w)?;
            h = g.add(z, b)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bind_order_matches_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mlp = Mlp::new(&[3, 5, 2], &mut rng);
        let mut g = Graph::new();
        mlp.bind(&mut g, true);
        let shapes: Vec<Vec<usize>> = g.params().iter().map(|&v| g.value(v).shape().to_vec()).collect();
        let expect: Vec<Vec<usize>> = mlp.params_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, expect);
        assert_eq!((mlp.input_dim(), mlp.output_dim(), mlp.depth()), (3, 2, 2));
    }

    #[test]
    fn forward_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&[4, 8, 8, 3], &mut rng);
        let mut g = Graph::new();
        let b = mlp.bind(&mut g, false);
        let x = g.constant(Tensor::randn(&[6, 4], 1.0, &mut rng));
        let y = b.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).shape(), &[6, 3]);
    }
}
