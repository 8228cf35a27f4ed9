//! Dense evidential regressor.
//!
//! A stack of fully connected layers with ELU hidden activations maps a
//! parameter vector to `4 * N` pre-activations, which the evidential head
//! turns into one `(gamma, nu, alpha, beta)` tuple per grid element:
//!
//! * `gamma = tanh(z0)`
//! * `nu    = softplus(z1)`
//! * `alpha = 1 + softplus(z2)`
//! * `beta  = softplus(z3)`
//!
//! Outputs are interleaved per element: `z[4 i + c]`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidential::{EvidentialField, EvidentialParams, ParamGradient};

/// Lower clamp on the nu/alpha/beta pre-activations. softplus(-30) ~ 9e-14
/// keeps `alpha - 1` representable next to 1.0.
const POSITIVE_HEAD_FLOOR: f64 = -30.0;

/// Scale applied to the head layer's initial weights so fresh outputs sit
/// near zero pre-activation.
const HEAD_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub grid_shape: Vec<usize>,
    pub seed: u64,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "hidden_sizes must be non-empty and positive, got {:?}",
                self.hidden_sizes
            )));
        }
        if self.grid_shape.is_empty() || self.grid_shape.contains(&0) {
            return Err(Error::Config(format!("invalid grid shape {:?}", self.grid_shape)));
        }
        Ok(())
    }

    pub fn grid_len(&self) -> usize {
        self.grid_shape.iter().product()
    }

    pub fn output_dim(&self) -> usize {
        4 * self.grid_len()
    }

    /// Layer widths from input to head output.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_sizes.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_sizes);
        dims.push(self.output_dim());
        dims
    }
}

/// One affine layer; `weights` is `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            weights: Array2::zeros((n_out, n_in)),
            bias: Array1::zeros(n_out),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Gradients with the same layout as the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGradients {
    pub layers: Vec<Layer>,
}

impl NetGradients {
    pub fn zeros_like(net: &EvidentialNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Layer::zeros(l.weights.ncols(), l.weights.nrows()))
                .collect(),
        }
    }

    /// Flat views in the order used by [`EvidentialNet::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            out.push(l.weights.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0f64, |acc, g| acc.max(g.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvidentialNet {
    config: NetConfig,
    layers: Vec<Layer>,
}

/// Activations retained by a batched forward pass for the backward pass.
pub struct ForwardCache {
    /// Pre-activations of each layer, `(batch, width)`.
    pre: Vec<Array2<f64>>,
    /// Inputs to each layer; `inputs[0]` is the batch of parameter vectors.
    inputs: Vec<Array2<f64>>,
}

impl ForwardCache {
    /// Head pre-activations, `(batch, 4N)`.
    pub fn head(&self) -> &Array2<f64> {
        self.pre.last().expect("at least one layer")
    }
}

fn elu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        z.exp_m1()
    }
}

fn elu_grad(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        z.exp()
    }
}

pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Maps four head pre-activations to NIG hyperparameters.
pub fn head_params(z: [f64; 4]) -> EvidentialParams {
    EvidentialParams {
        gamma: z[0].tanh(),
        nu: softplus(z[1].max(POSITIVE_HEAD_FLOOR)),
        alpha_shape: 1.0 + softplus(z[2].max(POSITIVE_HEAD_FLOOR)),
        beta_scale: softplus(z[3].max(POSITIVE_HEAD_FLOOR)),
    }
}

/// d(head output)/d(pre-activation) per channel.
pub fn head_derivatives(z: [f64; 4]) -> [f64; 4] {
    let t = z[0].tanh();
    let pos = |v: f64| {
        if v < POSITIVE_HEAD_FLOOR {
            0.0
        } else {
            sigmoid(v)
        }
    };
    [1.0 - t * t, pos(z[1]), pos(z[2]), pos(z[3])]
}

impl EvidentialNet {
    /// Deterministic initialization from `config.seed`.
    pub fn init(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dims = config.layer_dims();
        let n_layers = dims.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for (k, pair) in dims.windows(2).enumerate() {
            let (n_in, n_out) = (pair[0], pair[1]);
            let mut limit = (6.0 / n_in as f64).sqrt();
            if k + 1 == n_layers {
                limit *= HEAD_INIT_SCALE;
            }
            let weights = Array2::from_shape_simple_fn((n_out, n_in), || rng.random_range(-limit..limit));
            layers.push(Layer {
                weights,
                bias: Array1::zeros(n_out),
            });
        }
        Ok(Self { config, layers })
    }

    /// Rebuilds a network from stored layers, checking every dimension.
    pub fn from_layers(config: NetConfig, layers: Vec<Layer>) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        if layers.len() != dims.len() - 1 {
            return Err(Error::Shape(format!(
                "expected {} layers, got {}",
                dims.len() - 1,
                layers.len()
            )));
        }
        for (k, (layer, pair)) in layers.iter().zip(dims.windows(2)).enumerate() {
            if layer.weights.dim() != (pair[1], pair[0]) || layer.bias.len() != pair[1] {
                return Err(Error::Shape(format!(
                    "layer {k}: expected weights {}x{} and bias {}, got {:?} and {}",
                    pair[1],
                    pair[0],
                    pair[1],
                    layer.weights.dim(),
                    layer.bias.len()
                )));
            }
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Mutable flat views: weights then bias, layer by layer.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.weights.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            out.push(l.weights.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        out
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "parameter vector has length {}, network expects {}",
                x.len(),
                self.config.input_dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("forward", "parameter vector contains non-finite values"));
        }
        Ok(())
    }

    /// Batched forward pass keeping intermediate values. `xs` is `(batch, d)`.
    pub fn forward_cached(&self, xs: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        if xs.ncols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "input batch has {} columns, network expects {}",
                xs.ncols(),
                self.config.input_dim
            )));
        }
        let n_layers = self.layers.len();
        let mut pre = Vec::with_capacity(n_layers);
        let mut inputs = Vec::with_capacity(n_layers);
        let mut current = xs.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = current.dot(&layer.weights.t()) + &layer.bias;
            inputs.push(current);
            current = if k + 1 < n_layers {
                z.mapv(elu)
            } else {
                Array2::zeros((0, 0))
            };
            pre.push(z);
        }
        Ok(ForwardCache { pre, inputs })
    }

    /// Converts row `row` of the head pre-activations into a field.
    pub fn field_from_head(&self, head: &Array2<f64>, row: usize) -> EvidentialField {
        let z = head.row(row);
        let params = z
            .as_slice()
            .expect("standard layout")
            .chunks_exact(4)
            .map(|c| head_params([c[0], c[1], c[2], c[3]]))
            .collect();
        EvidentialField::from_parts_unchecked(self.config.grid_shape.clone(), params)
    }

    pub fn forward(&self, x: &[f64]) -> Result<EvidentialField> {
        self.check_input(x)?;
        let xs = ArrayView2::from_shape((1, x.len()), x).expect("contiguous row");
        let cache = self.forward_cached(xs)?;
        Ok(self.field_from_head(cache.head(), 0))
    }

    /// Backward pass for a batch. `upstream` is `(batch, 4N)` holding
    /// dL/d(gamma, nu, alpha, beta) interleaved per element.
    pub fn backward_cached(&self, cache: &ForwardCache, upstream: &Array2<f64>) -> Result<NetGradients> {
        let head = cache.head();
        if upstream.dim() != head.dim() {
            return Err(Error::Shape(format!(
                "upstream gradient is {:?}, head output is {:?}",
                upstream.dim(),
                head.dim()
            )));
        }
        // Chain through the activation head.
        let mut delta = upstream.clone();
        for (mut drow, zrow) in delta.axis_iter_mut(Axis(0)).zip(head.axis_iter(Axis(0))) {
            let d = drow.as_slice_mut().expect("standard layout");
            let z = zrow.as_slice().expect("standard layout");
            for (dc, zc) in d.chunks_exact_mut(4).zip(z.chunks_exact(4)) {
                let h = head_derivatives([zc[0], zc[1], zc[2], zc[3]]);
                for c in 0..4 {
                    dc[c] *= h[c];
                }
            }
        }

        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        for k in (0..self.layers.len()).rev() {
            let input = &cache.inputs[k];
            let weights = delta.t().dot(input);
            let bias = delta.sum_axis(Axis(0));
            grads.push(Layer { weights, bias });
            if k > 0 {
                let mut back = delta.dot(&self.layers[k].weights);
                back.zip_mut_with(&cache.pre[k - 1], |b, &z| *b *= elu_grad(z));
                delta = back;
            }
        }
        grads.reverse();
        Ok(NetGradients { layers: grads })
    }

    /// Parameter gradients for a single input given per-element upstream
    /// gradients w.r.t. the NIG hyperparameters.
    pub fn backward(&self, x: &[f64], upstream: &[ParamGradient]) -> Result<NetGradients> {
        self.check_input(x)?;
        if upstream.len() != self.config.grid_len() {
            return Err(Error::Shape(format!(
                "upstream has {} elements, grid has {}",
                upstream.len(),
                self.config.grid_len()
            )));
        }
        let xs = ArrayView2::from_shape((1, x.len()), x).expect("contiguous row");
        let cache = self.forward_cached(xs)?;
        let flat: Vec<f64> = upstream.iter().flat_map(|g| g.as_array()).collect();
        let up = Array2::from_shape_vec((1, flat.len()), flat).expect("sized above");
        self.backward_cached(&cache, &up)
    }
}
