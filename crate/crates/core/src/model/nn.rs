//! Fully connected layers on top of the autodiff graph.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[1, out]`
    pub bias: Tensor,
}

impl Linear {
    /// Gaussian weights with variance `gain / fan_in`, zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, gain: f64, rng: &mut R) -> Self {
        let std = (gain / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        Linear {
            weight: Tensor::from_fn(fan_in, fan_out, |_, _| normal.sample(rng)),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Graph handles for an [`Mlp`]'s weights, in `(weight, bias)` layer order.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub layers: Vec<(Var, Var)>,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`. Hidden layers use He scaling, the output
    /// layer is scaled by `out_gain / fan_in`.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], out_gain: f64, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let gain = if i + 1 == n { out_gain } else { 2.0 };
                Linear::init(dims[i], dims[i + 1], gain, rng)
            })
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    /// Smallest `|pre-activation|` over every hidden ReLU for the batch `x`.
    pub fn relu_margin(&self, x: &Tensor) -> Result<f64> {
        let mut h = x.clone();
        let mut margin = f64::INFINITY;
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = h.matmul(&l.weight)?;
            let out = l.out_dim();
            for (j, v) in z.data_mut().iter_mut().enumerate() {
                *v += l.bias.data()[j % out];
            }
            if i + 1 < n {
                margin = z.data().iter().fold(margin, |m, v| m.min(v.abs()));
                h = z.map(|v| v.max(0.0));
            } else {
                h = z;
            }
        }
        Ok(margin)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Puts the weights on `g` as parameters (`trainable`) or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        let leaf = |g: &mut Graph, t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| (leaf(g, &l.weight), leaf(g, &l.bias)))
                .collect(),
        }
    }

    /// Plain forward pass of a `[rows, in]` batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = bound.forward(&mut g, xv)?;
        Ok(g.value(out).clone())
    }
}

impl BoundMlp {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        let n = self.layers.len();
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = g.matmul(h, w)?;
            h = g.add_broadcast(z, b)?;
            if i + 1 < n {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

pub(crate) fn check_same_shapes(a: &[&Tensor], b: &[&Tensor], op: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op,
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    for (x, y) in a.iter().zip(b) {
        if x.shape() != y.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: x.shape().to_vec(),
                right: y.shape().to_vec(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_matches_manual_computation() {
        let mlp = Mlp {
            layers: vec![
                Linear {
                    weight: Tensor::matrix(2, 2, vec![1.0, -1.0, 2.0, 0.5]).unwrap(),
                    bias: Tensor::row(vec![0.0, -3.0]),
                },
                Linear {
                    weight: Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap(),
                    bias: Tensor::row(vec![0.5]),
                },
            ],
        };
        let x = Tensor::row(vec![1.0, 1.0]);
        // hidden = relu([3, -2.5]) = [3, 0]; out = 3 + 0.5
        assert_eq!(mlp.forward(&x).unwrap().data(), &[3.5]);
    }

    #[test]
    fn relu_margin_finds_the_closest_kink() {
        let mlp = Mlp {
            layers: vec![
                Linear {
                    weight: Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap(),
                    bias: Tensor::row(vec![0.25, 0.0]),
                },
                Linear::zeros(2, 1),
            ],
        };
        let x = Tensor::matrix(2, 1, vec![0.5, -0.3]).unwrap();
        // pre-activations: (0.75, -1.0) and (-0.05, 0.6)
        assert!((mlp.relu_margin(&x).unwrap() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn init_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::init(&[10, 7, 3], 1.0, &mut rng);
        assert_eq!(mlp.in_dim(), 10);
        assert_eq!(mlp.out_dim(), 3);
        assert_eq!(mlp.tensors().len(), 4);
    }
}
