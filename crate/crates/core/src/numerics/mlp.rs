//! Fully connected networks with hand-written backpropagation.

use serde::{Deserialize, Serialize};

use super::matrix::{axpy, Matrix};
use super::rng::Rng;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, s: f64) -> f64 {
        match self {
            Activation::Relu => s.max(0.0),
            Activation::Identity => s,
        }
    }

    fn derivative(self, s: f64) -> f64 {
        match self {
            Activation::Relu => {
                if s > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine map `s = W a + b` followed by an elementwise activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    layers: Vec<Layer>,
}

/// Activations retained by [`MlpParams::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// `a_{i-1}`: the input seen by layer `i`.
    pub inputs: Vec<Vec<f64>>,
    /// `s_i`: the pre-activation of layer `i`.
    pub pre: Vec<Vec<f64>>,
}

/// Per-layer `(a_{i-1}, g_i)` pair with `g_i = ∂L/∂s_i`; `∇W_i = g_i a_{i-1}ᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub input: Vec<f64>,
    pub pre_grad: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MlpBackward {
    pub param_grads: MlpParams,
    pub input_grad: Vec<f64>,
    pub per_layer: Vec<LayerTrace>,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Precondition("an MLP needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.output_dim() {
                return Err(Error::dim("MlpParams::new bias", layer.output_dim(), layer.bias.len()));
            }
            if i > 0 && layers[i - 1].output_dim() != layer.input_dim() {
                return Err(Error::dim(
                    "MlpParams::new chaining",
                    layers[i - 1].output_dim(),
                    layer.input_dim(),
                ));
            }
        }
        if layers.last().map(|l| l.activation) != Some(Activation::Identity) {
            return Err(Error::Precondition("final MLP layer must be linear".into()));
        }
        Ok(MlpParams { layers })
    }

    /// He-initialized ReLU network with a linear output layer.
    pub fn init(dims: &[usize], rng: &mut Rng) -> Self {
        Self::init_scaled(dims, 1.0, rng)
    }

    pub fn init_scaled(dims: &[usize], gain: f64, rng: &mut Rng) -> Self {
        assert!(dims.len() >= 2, "need input and output dims");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (din, dout) = (dims[i], dims[i + 1]);
                let std = gain * (2.0 / din as f64).sqrt();
                Layer {
                    weight: Matrix::from_fn(dout, din, |_, _| std * rng.normal()),
                    bias: vec![0.0; dout],
                    activation: if i + 1 == n {
                        Activation::Identity
                    } else {
                        Activation::Relu
                    },
                }
            })
            .collect();
        MlpParams { layers }
    }

    /// A ReLU network computing the identity on its first `d_in` outputs
    /// (zero elsewhere), plus `noise`-scaled Gaussian perturbation.
    ///
    /// The first layer splits `x` into `relu(x)` and `relu(−x)`, hidden layers
    /// carry both halves through, and the output layer recombines them. Needs
    /// every hidden width `≥ 2·d_in` and an output width `≥ d_in`.
    pub fn split_identity(dims: &[usize], noise: f64, rng: &mut Rng) -> Result<Self> {
        if dims.len() < 3 {
            return Err(Error::Precondition(
                "split identity needs at least one hidden layer".into(),
            ));
        }
        let d = dims[0];
        let n = dims.len() - 1;
        if dims[1..n].iter().any(|&h| h < 2 * d) || dims[n] < d {
            return Err(Error::Precondition(format!(
                "widths {dims:?} cannot carry a {d}-dim identity"
            )));
        }
        let layers = (0..n)
            .map(|i| {
                let (din, dout) = (dims[i], dims[i + 1]);
                let exact = |r: usize, c: usize| -> f64 {
                    if i == 0 {
                        match r {
                            r if r < d && c == r => 1.0,
                            r if r >= d && r < 2 * d && c == r - d => -1.0,
                            _ => 0.0,
                        }
                    } else if i + 1 < n {
                        if r == c && r < 2 * d {
                            1.0
                        } else {
                            0.0
                        }
                    } else if r < d && c == r {
                        1.0
                    } else if r < d && c == r + d {
                        -1.0
                    } else {
                        0.0
                    }
                };
                Layer {
                    weight: Matrix::from_fn(dout, din, |r, c| exact(r, c) + noise * rng.normal()),
                    bias: vec![0.0; dout],
                    activation: if i + 1 == n {
                        Activation::Identity
                    } else {
                        Activation::Relu
                    },
                }
            })
            .collect();
        Ok(MlpParams { layers })
    }

    pub fn zeros_like(&self) -> Self {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Matrix::zeros(l.output_dim(), l.input_dim()),
                    bias: vec![0.0; l.output_dim()],
                    activation: l.activation,
                })
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.input_dim() * l.output_dim() + l.output_dim())
            .sum()
    }

    /// Flat view: per layer, the row-major weight followed by the bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::dim("MlpParams::assign_flat", self.param_count(), flat.len()));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weight.as_slice().len();
            l.weight.as_mut_slice().copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        if input.len() != self.input_dim() {
            return Err(Error::dim("mlp_forward input", self.input_dim(), input.len()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = input.to_vec();
        for layer in &self.layers {
            let mut s = layer.weight.matvec(&a)?;
            for (si, bi) in s.iter_mut().zip(&layer.bias) {
                *si += bi;
            }
            let next: Vec<f64> = s.iter().map(|&v| layer.activation.apply(v)).collect();
            inputs.push(std::mem::replace(&mut a, next));
            pre.push(s);
        }
        Ok((a, MlpCache { inputs, pre }))
    }

    /// Output only, skipping the cache.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::dim("mlp_forward input", self.input_dim(), input.len()));
        }
        let mut a = input.to_vec();
        for layer in &self.layers {
            let mut s = layer.weight.matvec(&a)?;
            for (si, bi) in s.iter_mut().zip(&layer.bias) {
                *si = layer.activation.apply(*si + bi);
            }
            a = s;
        }
        Ok(a)
    }

    fn check_cache(&self, cache: &MlpCache) -> Result<()> {
        if cache.inputs.len() != self.layers.len() || cache.pre.len() != self.layers.len() {
            return Err(Error::Precondition("MLP cache does not match the network depth".into()));
        }
        for (layer, (a, s)) in self.layers.iter().zip(cache.inputs.iter().zip(&cache.pre)) {
            if a.len() != layer.input_dim() || s.len() != layer.output_dim() {
                return Err(Error::Precondition("MLP cache does not match the layer shapes".into()));
            }
        }
        Ok(())
    }

    /// Pre-activation gradients `g_i` for every layer and the input gradient.
    pub fn backward_pre(&self, cache: &MlpCache, output_grad: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        self.check_cache(cache)?;
        if output_grad.len() != self.output_dim() {
            return Err(Error::dim(
                "mlp_backward output_grad",
                self.output_dim(),
                output_grad.len(),
            ));
        }
        let n = self.layers.len();
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); n];
        let mut g: Vec<f64> = output_grad
            .iter()
            .zip(&cache.pre[n - 1])
            .map(|(d, &s)| d * self.layers[n - 1].activation.derivative(s))
            .collect();
        let mut input_grad = Vec::new();
        for i in (0..n).rev() {
            let d = self.layers[i].weight.matvec_t(&g)?;
            grads[i] = g;
            if i == 0 {
                input_grad = d;
                break;
            }
            let act = self.layers[i - 1].activation;
            g = d
                .iter()
                .zip(&cache.pre[i - 1])
                .map(|(di, &s)| di * act.derivative(s))
                .collect();
        }
        Ok((grads, input_grad))
    }

    /// `acc += scale · ∇θ` given the pre-activation gradients from [`Self::backward_pre`].
    pub fn accumulate_grads(cache: &MlpCache, pre_grads: &[Vec<f64>], acc: &mut MlpParams, scale: f64) {
        for ((layer, a), g) in acc.layers.iter_mut().zip(&cache.inputs).zip(pre_grads) {
            for (r, &gr) in g.iter().enumerate() {
                if gr == 0.0 {
                    continue;
                }
                axpy(scale * gr, a, layer.weight.row_mut(r));
                layer.bias[r] += scale * gr;
            }
        }
    }

    pub fn backward(&self, cache: &MlpCache, output_grad: &[f64]) -> Result<MlpBackward> {
        let (pre_grads, input_grad) = self.backward_pre(cache, output_grad)?;
        let mut param_grads = self.zeros_like();
        Self::accumulate_grads(cache, &pre_grads, &mut param_grads, 1.0);
        let per_layer = cache
            .inputs
            .iter()
            .zip(pre_grads)
            .map(|(a, g)| LayerTrace {
                input: a.clone(),
                pre_grad: g,
            })
            .collect();
        Ok(MlpBackward {
            param_grads,
            input_grad,
            per_layer,
        })
    }
}
