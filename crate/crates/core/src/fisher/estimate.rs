//! Curvature estimators over a pinned stream of per-sample block gradients.
//!
//! Every estimator consumes the same [`SampleStream`], so cross-estimator
//! identities (diagonal vs. dense diagonal, trace vs. diagonal sum) hold
//! exactly rather than statistically.

use serde::{Deserialize, Serialize};

use crate::diffusion::{BlockSample, BlockSpec, DenoiserParams, Draw, NoiseSchedule, TrainExample};
use crate::error::{Error, Result};
use crate::numerics::{sym_eigh, Matrix, Rng};

/// Which `(z, ε, t)` triples the estimators see.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FisherPlan {
    pub seed: u64,
    pub draws_per_example: usize,
    /// Examples beyond this count are subsampled without replacement.
    pub max_examples: usize,
}

impl FisherPlan {
    pub fn new(seed: u64, draws_per_example: usize, max_examples: usize) -> Self {
        FisherPlan {
            seed,
            draws_per_example,
            max_examples,
        }
    }

    /// Dataset positions the plan visits, in visiting order.
    pub fn select(&self, n: usize) -> Vec<usize> {
        if n <= self.max_examples {
            return (0..n).collect();
        }
        let mut idx = Rng::new(self.seed)
            .child_named("subset")
            .sample_indices(n, self.max_examples);
        idx.sort_unstable();
        idx
    }

    /// The `(t, ε)` draws the plan pairs with example `id`.
    pub fn draws_for(&self, id: usize, steps: usize, dim: usize) -> Vec<Draw> {
        let mut r = Rng::new(self.seed).child_named("draws").child(id as u64);
        (0..self.draws_per_example)
            .map(|_| {
                let t = 1 + r.below(steps);
                Draw {
                    t,
                    eps: r.normal_vec(dim),
                }
            })
            .collect()
    }
}

/// Per-sample `(a, g)` pairs for every block of the denoiser.
#[derive(Debug, Clone)]
pub struct SampleStream {
    pub blocks: Vec<BlockSpec>,
    pub samples: Vec<Vec<BlockSample>>,
}

impl SampleStream {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn block_index(&self, name: &str) -> Result<usize> {
        self.blocks
            .iter()
            .position(|b| b.name == name)
            .ok_or_else(|| Error::Precondition(format!("unknown block `{name}`")))
    }

    fn require_samples(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Precondition("Fisher estimate needs at least one sample".into()));
        }
        Ok(())
    }
}

/// Draws the plan's samples from `theta`. Draws for an example depend only on
/// `(plan.seed, example id)`.
pub fn collect_samples(
    theta: &DenoiserParams,
    data: &[TrainExample],
    plan: &FisherPlan,
    sched: &NoiseSchedule,
) -> Result<SampleStream> {
    if data.is_empty() {
        return Err(Error::Precondition("Fisher estimate over an empty dataset".into()));
    }
    let mut samples = Vec::new();
    for i in plan.select(data.len()) {
        let z = &data[i];
        for d in plan.draws_for(z.id, sched.steps(), z.x.len()) {
            samples.push(theta.loss_trace(&z.x, z.c, d.t, &d.eps, sched)?.1);
        }
    }
    Ok(SampleStream {
        blocks: theta.arch.blocks(),
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherDiag {
    pub diag: Vec<f64>,
    pub sample_count: usize,
}

/// Mean of elementwise squared gradients, in flat-parameter order.
pub fn diag_from_samples(stream: &SampleStream) -> Result<FisherDiag> {
    stream.require_samples()?;
    let total: usize = stream.blocks.iter().map(|b| b.len()).sum();
    let mut diag = vec![0.0; total];
    for sample in &stream.samples {
        for (b, s) in stream.blocks.iter().zip(sample) {
            let dst = &mut diag[b.range()];
            for (j, &aj) in s.a.iter().enumerate() {
                for (i, &gi) in s.g.iter().enumerate() {
                    let v = aj * gi;
                    dst[j * b.d_out + i] += v * v;
                }
            }
        }
    }
    let n = stream.len() as f64;
    diag.iter_mut().for_each(|d| *d /= n);
    Ok(FisherDiag {
        diag,
        sample_count: stream.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KfacBlock {
    pub name: String,
    /// `E[a aᵀ]`, `d_in × d_in`.
    pub a: Matrix,
    /// `E[g gᵀ]`, `d_out × d_out`.
    pub b: Matrix,
    pub sample_count: usize,
}

fn add_outer_sym(m: &mut Matrix, v: &[f64]) {
    let n = v.len();
    let data = m.as_mut_slice();
    for i in 0..n {
        let vi = v[i];
        if vi == 0.0 {
            continue;
        }
        for j in i..n {
            data[i * n + j] += vi * v[j];
        }
    }
}

fn finish_sym(m: &mut Matrix, n_samples: f64) {
    let n = m.rows();
    let data = m.as_mut_slice();
    for i in 0..n {
        for j in i..n {
            let v = data[i * n + j] / n_samples;
            data[i * n + j] = v;
            data[j * n + i] = v;
        }
    }
}

pub fn kfac_from_samples(stream: &SampleStream) -> Result<Vec<KfacBlock>> {
    stream.require_samples()?;
    let n = stream.len() as f64;
    let mut out = Vec::with_capacity(stream.blocks.len());
    for (bi, b) in stream.blocks.iter().enumerate() {
        let mut a = Matrix::zeros(b.d_in, b.d_in);
        let mut g = Matrix::zeros(b.d_out, b.d_out);
        for sample in &stream.samples {
            add_outer_sym(&mut a, &sample[bi].a);
            add_outer_sym(&mut g, &sample[bi].g);
        }
        finish_sym(&mut a, n);
        finish_sym(&mut g, n);
        if a.asymmetry() > 1e-9 || g.asymmetry() > 1e-9 {
            return Err(Error::Numeric(format!("asymmetric K-FAC factor in `{}`", b.name)));
        }
        out.push(KfacBlock {
            name: b.name.clone(),
            a,
            b: g,
            sample_count: stream.len(),
        });
    }
    Ok(out)
}

/// A curvature block in its Kronecker eigenbasis: `(U_A ⊗ U_B) diag(S) (U_A ⊗ U_B)ᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenBlock {
    pub name: String,
    pub u_a: Matrix,
    pub u_b: Matrix,
    /// Eigenvalues in `vec` order: entry `j·d_out + i` pairs `U_B[:, i]` with `U_A[:, j]`.
    pub s: Vec<f64>,
    pub sample_count: usize,
}

impl EigenBlock {
    pub fn d_in(&self) -> usize {
        self.u_a.rows()
    }

    pub fn d_out(&self) -> usize {
        self.u_b.rows()
    }

    pub fn stored_floats(&self) -> usize {
        self.u_a.as_slice().len() + self.u_b.as_slice().len() + self.s.len()
    }
}

/// K-FAC in eigen form: `S = λ_A ⊗ λ_B`, with eigenvalues clamped at zero.
pub fn kfac_eigen(block: &KfacBlock) -> Result<EigenBlock> {
    let ea = sym_eigh(&block.a)?;
    let eb = sym_eigh(&block.b)?;
    let (d_in, d_out) = (block.a.rows(), block.b.rows());
    let mut s = vec![0.0; d_in * d_out];
    for j in 0..d_in {
        for i in 0..d_out {
            s[j * d_out + i] = ea.values[j].max(0.0) * eb.values[i].max(0.0);
        }
    }
    Ok(EigenBlock {
        name: block.name.clone(),
        u_a: ea.vectors,
        u_b: eb.vectors,
        s,
        sample_count: block.sample_count,
    })
}

/// Re-estimates the eigenvalues of each K-FAC block by projecting the sampled
/// gradients onto its Kronecker eigenbasis.
pub fn ekfac_from_samples(stream: &SampleStream, kfac: &[KfacBlock]) -> Result<Vec<EigenBlock>> {
    stream.require_samples()?;
    if kfac.len() != stream.blocks.len() {
        return Err(Error::dim("ekfac_correct blocks", stream.blocks.len(), kfac.len()));
    }
    let n = stream.len() as f64;
    let mut out = Vec::with_capacity(kfac.len());
    for (bi, (spec, kb)) in stream.blocks.iter().zip(kfac).enumerate() {
        if spec.name != kb.name || kb.a.rows() != spec.d_in || kb.b.rows() != spec.d_out {
            return Err(Error::Precondition(format!(
                "K-FAC block `{}` does not match `{}`",
                kb.name, spec.name
            )));
        }
        let mut eb = kfac_eigen(kb)?;
        let (d_in, d_out) = (spec.d_in, spec.d_out);
        let mut s = vec![0.0; d_in * d_out];
        for sample in &stream.samples {
            // U_Bᵀ (g aᵀ) U_A = (U_Bᵀ g)(U_Aᵀ a)ᵀ
            let p = eb.u_b.matvec_t(&sample[bi].g)?;
            let q = eb.u_a.matvec_t(&sample[bi].a)?;
            for (j, &qj) in q.iter().enumerate() {
                for (i, &pi) in p.iter().enumerate() {
                    let v = pi * qj;
                    s[j * d_out + i] += v * v;
                }
            }
        }
        s.iter_mut().for_each(|v| *v /= n);
        eb.s = s;
        eb.sample_count = stream.len();
        out.push(eb);
    }
    Ok(out)
}

/// Largest parameter count [`dense_from_samples`] will materialize.
pub const DENSE_LIMIT: usize = 200;

/// Dense `E[vec(∇) vec(∇)ᵀ]` over the named blocks, in flat-parameter order.
pub fn dense_from_samples(stream: &SampleStream, layers: &[&str]) -> Result<Matrix> {
    stream.require_samples()?;
    let mut idx: Vec<usize> = layers.iter().map(|l| stream.block_index(l)).collect::<Result<_>>()?;
    idx.sort_unstable();
    idx.dedup();
    let p: usize = idx.iter().map(|&i| stream.blocks[i].len()).sum();
    if p > DENSE_LIMIT {
        return Err(Error::Precondition(format!(
            "dense Fisher over {p} parameters exceeds the {DENSE_LIMIT}-parameter limit"
        )));
    }
    let mut f = Matrix::zeros(p, p);
    let mut v = vec![0.0; p];
    for sample in &stream.samples {
        let mut off = 0;
        for &bi in &idx {
            let b = &stream.blocks[bi];
            let s = &sample[bi];
            for (j, &aj) in s.a.iter().enumerate() {
                for (i, &gi) in s.g.iter().enumerate() {
                    v[off + j * b.d_out + i] = aj * gi;
                }
            }
            off += b.len();
        }
        let data = f.as_mut_slice();
        for k in 0..p {
            for l in 0..p {
                data[k * p + l] += v[k] * v[l];
            }
        }
    }
    let n = stream.len() as f64;
    f.as_mut_slice().iter_mut().for_each(|x| *x /= n);
    Ok(f)
}

pub fn estimate_diag(
    theta: &DenoiserParams,
    data: &[TrainExample],
    plan: &FisherPlan,
    sched: &NoiseSchedule,
) -> Result<FisherDiag> {
    diag_from_samples(&collect_samples(theta, data, plan, sched)?)
}

pub fn estimate_kfac(
    theta: &DenoiserParams,
    data: &[TrainExample],
    plan: &FisherPlan,
    sched: &NoiseSchedule,
) -> Result<Vec<KfacBlock>> {
    kfac_from_samples(&collect_samples(theta, data, plan, sched)?)
}

/// Second EKFAC pass; reuses the plan's sample budget.
pub fn ekfac_correct(
    theta: &DenoiserParams,
    data: &[TrainExample],
    kfac: &[KfacBlock],
    plan: &FisherPlan,
    sched: &NoiseSchedule,
) -> Result<Vec<EigenBlock>> {
    ekfac_from_samples(&collect_samples(theta, data, plan, sched)?, kfac)
}

pub fn brute_force_fisher(
    theta: &DenoiserParams,
    data: &[TrainExample],
    plan: &FisherPlan,
    sched: &NoiseSchedule,
    layers: &[&str],
) -> Result<Matrix> {
    let p: usize = theta
        .arch
        .blocks()
        .iter()
        .filter(|b| layers.contains(&b.name.as_str()))
        .map(|b| b.len())
        .sum();
    if p > DENSE_LIMIT {
        return Err(Error::Precondition(format!(
            "dense Fisher over {p} parameters exceeds the {DENSE_LIMIT}-parameter limit"
        )));
    }
    dense_from_samples(&collect_samples(theta, data, plan, sched)?, layers)
}
