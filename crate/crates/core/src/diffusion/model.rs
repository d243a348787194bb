//! The conditional noise-prediction network `ε_θ(x_t, c, t)`.
//!
//! The trunk is an MLP over `[x_t ; time_features(t) ; cond_table[c]]`. For
//! curvature estimation and unlearning the parameters are viewed as a list of
//! named linear *blocks*, each a `d_out × d_in` matrix whose per-sample gradient
//! is `g aᵀ`. Biases are folded in as a trailing constant-1 input column. The
//! flat parameter vector concatenates `vec(block)` (column-major) in block order.

use serde::{Deserialize, Serialize};

use super::schedule::{q_sample, time_embedding, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::{Activation, Layer, Matrix, MlpParams, Rng};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserArch {
    pub dim: usize,
    pub classes: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub hidden: Vec<usize>,
}

impl DenoiserArch {
    pub fn trunk_input_dim(&self) -> usize {
        self.dim + self.time_dim + self.cond_dim
    }

    fn trunk_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.trunk_input_dim()];
        dims.extend(&self.hidden);
        dims.push(self.dim);
        dims
    }

    /// Named parameter blocks in flat-vector order.
    pub fn blocks(&self) -> Vec<BlockSpec> {
        let mut out = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, d_out: usize, d_in: usize, cond: bool| {
            out.push(BlockSpec {
                name,
                d_out,
                d_in,
                offset,
                cond_pathway: cond,
            });
            offset += d_out * d_in;
        };
        let h0 = self.hidden.first().copied().unwrap_or(self.dim);
        push("cond_table".into(), self.cond_dim, self.classes, true);
        push("trunk.0.main".into(), h0, self.dim + self.time_dim + 1, false);
        push("trunk.0.cond".into(), h0, self.cond_dim, true);
        let dims = self.trunk_dims();
        for i in 1..dims.len() - 1 {
            push(format!("trunk.{i}"), dims[i + 1], dims[i] + 1, false);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }
}

/// One named `d_out × d_in` parameter block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub d_out: usize,
    pub d_in: usize,
    pub offset: usize,
    /// Part of the conditioning pathway (class embedding and the weights reading it).
    pub cond_pathway: bool,
}

impl BlockSpec {
    pub fn len(&self) -> usize {
        self.d_out * self.d_in
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Per-sample block activations `a` and output gradients `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSample {
    pub a: Vec<f64>,
    pub g: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    pub arch: DenoiserArch,
    pub trunk: MlpParams,
    /// Row `c` is the learned embedding of class `c`.
    pub cond_table: Matrix,
}

impl DenoiserParams {
    pub fn init(arch: &DenoiserArch, rng: &mut Rng) -> Self {
        let trunk = MlpParams::init(&arch.trunk_dims(), rng);
        let cond_table = Matrix::from_fn(arch.classes, arch.cond_dim, |_, _| rng.normal());
        let mut p = DenoiserParams {
            arch: arch.clone(),
            trunk,
            cond_table,
        };
        // small output layer: predictions start near zero
        let last = p.trunk.layers_mut().last_mut().expect("non-empty trunk");
        for w in last.weight.as_mut_slice() {
            *w *= 0.1;
        }
        p
    }

    pub fn param_count(&self) -> usize {
        self.arch.param_count()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let arch = &self.arch;
        let mut out = vec![0.0; arch.param_count()];
        let blocks = arch.blocks();
        let split = arch.dim + arch.time_dim;
        for b in &blocks {
            let dst = &mut out[b.range()];
            match b.name.as_str() {
                "cond_table" => {
                    for c in 0..arch.classes {
                        dst[c * b.d_out..(c + 1) * b.d_out].copy_from_slice(self.cond_table.row(c));
                    }
                }
                "trunk.0.main" => {
                    let l = &self.trunk.layers()[0];
                    for j in 0..split {
                        for i in 0..b.d_out {
                            dst[j * b.d_out + i] = l.weight[(i, j)];
                        }
                    }
                    dst[split * b.d_out..].copy_from_slice(&l.bias);
                }
                "trunk.0.cond" => {
                    let l = &self.trunk.layers()[0];
                    for j in 0..b.d_in {
                        for i in 0..b.d_out {
                            dst[j * b.d_out + i] = l.weight[(i, split + j)];
                        }
                    }
                }
                _ => {
                    let l = &self.trunk.layers()[trunk_index(&b.name)];
                    let din = l.input_dim();
                    for j in 0..din {
                        for i in 0..b.d_out {
                            dst[j * b.d_out + i] = l.weight[(i, j)];
                        }
                    }
                    dst[din * b.d_out..].copy_from_slice(&l.bias);
                }
            }
        }
        out
    }

    pub fn from_flat(arch: &DenoiserArch, flat: &[f64]) -> Result<Self> {
        let mut p = DenoiserParams {
            arch: arch.clone(),
            trunk: MlpParams::init(&arch.trunk_dims(), &mut Rng::new(0)).zeros_like(),
            cond_table: Matrix::zeros(arch.classes, arch.cond_dim),
        };
        p.assign_flat(flat)?;
        Ok(p)
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        let arch = self.arch.clone();
        if flat.len() != arch.param_count() {
            return Err(Error::dim(
                "DenoiserParams::assign_flat",
                arch.param_count(),
                flat.len(),
            ));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite denoiser parameter".into()));
        }
        let split = arch.dim + arch.time_dim;
        for b in arch.blocks() {
            let src = &flat[b.range()];
            match b.name.as_str() {
                "cond_table" => {
                    for c in 0..arch.classes {
                        self.cond_table
                            .row_mut(c)
                            .copy_from_slice(&src[c * b.d_out..(c + 1) * b.d_out]);
                    }
                }
                "trunk.0.main" => {
                    let l = &mut self.trunk.layers_mut()[0];
                    for j in 0..split {
                        for i in 0..b.d_out {
                            l.weight[(i, j)] = src[j * b.d_out + i];
                        }
                    }
                    l.bias.copy_from_slice(&src[split * b.d_out..]);
                }
                "trunk.0.cond" => {
                    let l = &mut self.trunk.layers_mut()[0];
                    for j in 0..b.d_in {
                        for i in 0..b.d_out {
                            l.weight[(i, split + j)] = src[j * b.d_out + i];
                        }
                    }
                }
                _ => {
                    let l = &mut self.trunk.layers_mut()[trunk_index(&b.name)];
                    let din = l.input_dim();
                    for j in 0..din {
                        for i in 0..b.d_out {
                            l.weight[(i, j)] = src[j * b.d_out + i];
                        }
                    }
                    l.bias.copy_from_slice(&src[din * b.d_out..]);
                }
            }
        }
        Ok(())
    }

    fn trunk_input(&self, x_t: &[f64], c: usize, t: usize) -> Result<Vec<f64>> {
        if x_t.len() != self.arch.dim {
            return Err(Error::dim("denoiser input", self.arch.dim, x_t.len()));
        }
        if c >= self.arch.classes {
            return Err(Error::Precondition(format!(
                "condition {c} outside 0..{}",
                self.arch.classes
            )));
        }
        let mut input = Vec::with_capacity(self.arch.trunk_input_dim());
        input.extend_from_slice(x_t);
        input.extend(time_embedding(t, self.arch.time_dim));
        input.extend_from_slice(self.cond_table.row(c));
        Ok(input)
    }

    /// `ε_θ(x_t, c, t)`.
    pub fn predict(&self, x_t: &[f64], c: usize, t: usize) -> Result<Vec<f64>> {
        self.trunk.predict(&self.trunk_input(x_t, c, t)?)
    }

    /// Runs one denoising sample and hands each block's `(a, g)` to `visit`,
    /// returning the loss `‖ε − ε_θ(x_t, c, t)‖²`.
    fn visit_sample(
        &self,
        x0: &[f64],
        c: usize,
        t: usize,
        eps: &[f64],
        sched: &NoiseSchedule,
        mut visit: impl FnMut(usize, &[f64], &[f64]),
    ) -> Result<f64> {
        let x_t = q_sample(x0, t, eps, sched)?;
        let (pred, cache) = self.trunk.forward(&self.trunk_input(&x_t, c, t)?)?;
        let mut loss = 0.0;
        let out_grad: Vec<f64> = pred
            .iter()
            .zip(eps)
            .map(|(p, e)| {
                let r = p - e;
                loss += r * r;
                2.0 * r
            })
            .collect();
        let (pre_grads, input_grad) = self.trunk.backward_pre(&cache, &out_grad)?;
        let arch = &self.arch;
        let split = arch.dim + arch.time_dim;

        let mut onehot = vec![0.0; arch.classes];
        onehot[c] = 1.0;
        visit(0, &onehot, &input_grad[split..]);

        let input0 = &cache.inputs[0];
        let mut main = Vec::with_capacity(split + 1);
        main.extend_from_slice(&input0[..split]);
        main.push(1.0);
        visit(1, &main, &pre_grads[0]);
        visit(2, &input0[split..], &pre_grads[0]);

        for (i, (input, grad)) in cache.inputs.iter().zip(&pre_grads).enumerate().skip(1) {
            let mut a = Vec::with_capacity(input.len() + 1);
            a.extend_from_slice(input);
            a.push(1.0);
            visit(2 + i, &a, grad);
        }
        Ok(loss)
    }

    /// Loss and per-block `(a, g)` pairs for one `(x0, c, t, ε)` draw.
    pub fn loss_trace(
        &self,
        x0: &[f64],
        c: usize,
        t: usize,
        eps: &[f64],
        sched: &NoiseSchedule,
    ) -> Result<(f64, Vec<BlockSample>)> {
        let mut samples = Vec::with_capacity(self.arch.hidden.len() + 3);
        let loss = self.visit_sample(x0, c, t, eps, sched, |_, a, g| {
            samples.push(BlockSample {
                a: a.to_vec(),
                g: g.to_vec(),
            })
        })?;
        Ok((loss, samples))
    }

    /// Adds `scale · ∇θ loss` for one draw into a flat gradient; returns the loss.
    #[allow(clippy::too_many_arguments)]
    pub fn accumulate_grad(
        &self,
        x0: &[f64],
        c: usize,
        t: usize,
        eps: &[f64],
        sched: &NoiseSchedule,
        flat_grad: &mut [f64],
        scale: f64,
    ) -> Result<f64> {
        if flat_grad.len() != self.param_count() {
            return Err(Error::dim("accumulate_grad", self.param_count(), flat_grad.len()));
        }
        let blocks = self.arch.blocks();
        self.visit_sample(x0, c, t, eps, sched, |bi, a, g| {
            add_outer(&blocks[bi], a, g, flat_grad, scale);
        })
    }

    pub fn loss(&self, x0: &[f64], c: usize, t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<f64> {
        let x_t = q_sample(x0, t, eps, sched)?;
        let pred = self.predict(&x_t, c, t)?;
        Ok(pred.iter().zip(eps).map(|(p, e)| (e - p) * (e - p)).sum())
    }
}

fn trunk_index(name: &str) -> usize {
    name.strip_prefix("trunk.")
        .and_then(|s| s.parse().ok())
        .expect("trunk block name")
}

/// `flat[block] += scale · vec(g aᵀ)`.
pub fn add_outer(block: &BlockSpec, a: &[f64], g: &[f64], flat: &mut [f64], scale: f64) {
    debug_assert_eq!(a.len(), block.d_in);
    debug_assert_eq!(g.len(), block.d_out);
    let dst = &mut flat[block.range()];
    for (j, &aj) in a.iter().enumerate() {
        if aj == 0.0 {
            continue;
        }
        let s = scale * aj;
        for (d, gi) in dst[j * block.d_out..(j + 1) * block.d_out].iter_mut().zip(g) {
            *d += s * gi;
        }
    }
}

/// Builds an MLP layer list directly; used by tests that need exact weights.
pub fn linear_layer(weight: Matrix, bias: Vec<f64>, relu: bool) -> Layer {
    Layer {
        weight,
        bias,
        activation: if relu { Activation::Relu } else { Activation::Identity },
    }
}
