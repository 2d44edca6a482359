use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One affine layer; `weights` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }
}

/// Feed-forward network: ReLU hidden layers, softmax output.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    seed: u64,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer: the features, then each hidden layer's ReLU output.
    inputs: Vec<Array2<f64>>,
    /// Output-layer pre-softmax activations.
    pub logits: Array2<f64>,
    /// Row-wise log-softmax of `logits`.
    pub log_posteriors: Array2<f64>,
}

/// Parameter-shaped buffer used for gradients and momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Network {
    /// Builds a network from explicit layers, checking that sizes chain.
    pub fn from_layers(layers: Vec<Layer>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Dimension("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.outputs() {
                return Err(Error::Dimension(format!("layer {i}: bias/weight mismatch")));
            }
            if i > 0 && layers[i - 1].outputs() != l.inputs() {
                return Err(Error::Dimension(format!("layer {i} does not chain")));
            }
        }
        Ok(Network { layers, seed })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::outputs)
    }

    /// `[input, hidden..., output]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::outputs))
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Posteriors (`T × S`, rows are distributions) and the backprop cache.
    pub fn forward(&self, features: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        if features.ncols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "features have {} columns, network expects {}",
                features.ncols(),
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = features.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = x.dot(&layer.weights.t());
            z += &layer.bias;
            inputs.push(x);
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            x = z;
        }
        let logits = x;
        let log_posteriors = log_softmax_rows(logits.view());
        let posteriors = log_posteriors.mapv(f64::exp);
        Ok((
            posteriors,
            ForwardCache {
                inputs,
                logits,
                log_posteriors,
            },
        ))
    }

    /// Row-wise log posteriors without keeping a cache.
    pub fn log_posteriors(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(features)?.1.log_posteriors)
    }

    /// Parameter gradients of an objective whose derivative with respect to
    /// the output activations is `output_grad` (`T × S`).
    pub fn backward(&self, cache: &ForwardCache, output_grad: ArrayView2<f64>) -> Result<Gradients> {
        if output_grad.dim() != cache.logits.dim() || cache.inputs.len() != self.layers.len() {
            return Err(Error::Dimension(format!(
                "output gradient {:?} does not match forward cache {:?}",
                output_grad.dim(),
                cache.logits.dim()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = output_grad.to_owned();
        for i in (0..self.layers.len()).rev() {
            let input = &cache.inputs[i];
            let dw = delta.t().dot(input);
            let db = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut prev = delta.dot(&self.layers[i].weights);
                // ReLU derivative, read off the stored post-activation values
                ndarray::Zip::from(&mut prev)
                    .and(input)
                    .for_each(|d, &h| {
                        if h <= 0.0 {
                            *d = 0.0;
                        }
                    });
                delta = prev;
            }
            grads.push(Layer {
                weights: dw,
                bias: db,
            });
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }
}

/// Glorot-uniform weights, zero biases, deterministic in `seed`.
///
/// `layer_sizes` is `[input, hidden..., output]` with at least one hidden layer.
pub fn init_network(layer_sizes: &[usize], seed: u64) -> Result<Network> {
    if layer_sizes.len() < 3 {
        return Err(Error::Config(
            "network needs an input, at least one hidden layer and an output".into(),
        ));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::Config("layer sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = layer_sizes
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weights =
                Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-limit..limit));
            Layer {
                weights,
                bias: Array1::zeros(fan_out),
            }
        })
        .collect();
    Network::from_layers(layers, seed)
}

pub fn log_softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Cross-entropy improvement direction: `targets − posteriors`.
pub fn ce_output_grad(posteriors: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<Array2<f64>> {
    if posteriors.dim() != targets.dim() {
        return Err(Error::Dimension(format!(
            "posteriors {:?} vs targets {:?}",
            posteriors.dim(),
            targets.dim()
        )));
    }
    Ok(&targets - &posteriors)
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            layers: net
                .layers()
                .iter()
                .map(|l| Layer {
                    weights: Array2::zeros(l.weights.dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights *= factor;
            l.bias *= factor;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|&v| v == 0.0))
    }

    /// Flattened values, weights then bias, layer by layer.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    fn shapes_match(&self, net: &Network) -> bool {
        self.layers.len() == net.layers().len()
            && self
                .layers
                .iter()
                .zip(net.layers())
                .all(|(g, l)| g.weights.dim() == l.weights.dim() && g.bias.len() == l.bias.len())
    }
}

/// Plain SGD with optional momentum, as an ascent step:
/// `v ← grad + momentum·v`, `θ ← θ + lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Option<Gradients>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) -> Result<()> {
        if !grads.shapes_match(net) {
            return Err(Error::Dimension("gradient shapes do not match network".into()));
        }
        let velocity = self.velocity.get_or_insert_with(|| Gradients::zeros_like(net));
        for (v, g) in velocity.layers.iter_mut().zip(&grads.layers) {
            v.weights *= self.momentum;
            v.weights += &g.weights;
            v.bias *= self.momentum;
            v.bias += &g.bias;
        }
        for (layer, v) in net.layers_mut().iter_mut().zip(&velocity.layers) {
            layer.weights.scaled_add(self.lr, &v.weights);
            layer.bias.scaled_add(self.lr, &v.bias);
        }
        Ok(())
    }

    /// Forgets accumulated momentum (used after restoring a weight backup).
    pub fn reset(&mut self) {
        self.velocity = None;
    }
}

/// One SGD step without persistent momentum state.
pub fn sgd_step(net: &mut Network, grads: &Gradients, lr: f64) -> Result<()> {
    Sgd::new(lr, 0.0).step(net, grads)
}
