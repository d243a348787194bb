use serde::{Deserialize, Serialize};

use super::data::TrainExample;
use super::model::DenoiserParams;
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Rng};

/// A fixed grid of `(t, ε)` draws for Monte-Carlo loss estimates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McPlan {
    pub timesteps: Vec<usize>,
    pub noises_per_timestep: usize,
    pub seed: u64,
}

/// One `(t, ε)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub t: usize,
    pub eps: Vec<f64>,
}

impl McPlan {
    /// `n` timesteps at `(k+1)·T/n`, `k = 0..n`.
    pub fn equally_spaced(steps: usize, n: usize, noises_per_timestep: usize, seed: u64) -> Result<Self> {
        if n == 0 || n > steps {
            return Err(Error::Precondition(format!("need 1..={steps} timesteps, got {n}")));
        }
        let plan = McPlan {
            timesteps: (0..n).map(|k| (k + 1) * steps / n).collect(),
            noises_per_timestep,
            seed,
        };
        plan.validate(steps)?;
        Ok(plan)
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.timesteps.is_empty() || self.noises_per_timestep == 0 {
            return Err(Error::Precondition("empty Monte-Carlo plan".into()));
        }
        if let Some(t) = self.timesteps.iter().find(|&&t| t == 0 || t > steps) {
            return Err(Error::Precondition(format!("plan timestep {t} outside 1..={steps}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.timesteps.len() * self.noises_per_timestep
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The same grid keyed to one example, so per-example noise is pinned.
    pub fn for_example(&self, id: usize) -> McPlan {
        McPlan {
            seed: derive_seed(self.seed, id as u64),
            ..self.clone()
        }
    }

    pub fn draws(&self, dim: usize) -> Vec<Draw> {
        let mut rng = Rng::new(self.seed);
        let mut out = Vec::with_capacity(self.len());
        for &t in &self.timesteps {
            for _ in 0..self.noises_per_timestep {
                out.push(Draw {
                    t,
                    eps: rng.normal_vec(dim),
                });
            }
        }
        out
    }
}

/// `‖ε − ε_θ(x_t, c, t)‖²`.
pub fn diffusion_loss(
    theta: &DenoiserParams,
    z: &TrainExample,
    eps: &[f64],
    t: usize,
    sched: &NoiseSchedule,
) -> Result<f64> {
    theta.loss(&z.x, z.c, t, eps, sched)
}

pub fn mc_loss_draws(theta: &DenoiserParams, z: &TrainExample, draws: &[Draw], sched: &NoiseSchedule) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::Precondition("no Monte-Carlo draws".into()));
    }
    let mut sum = 0.0;
    for d in draws {
        sum += theta.loss(&z.x, z.c, d.t, &d.eps, sched)?;
    }
    Ok(sum / draws.len() as f64)
}

pub fn mc_loss(theta: &DenoiserParams, z: &TrainExample, plan: &McPlan, sched: &NoiseSchedule) -> Result<f64> {
    plan.validate(sched.steps())?;
    mc_loss_draws(theta, z, &plan.draws(z.x.len()), sched)
}

/// Loss and flat gradient averaged over `draws`.
pub fn mc_loss_grad_draws(
    theta: &DenoiserParams,
    z: &TrainExample,
    draws: &[Draw],
    sched: &NoiseSchedule,
) -> Result<(f64, Vec<f64>)> {
    if draws.is_empty() {
        return Err(Error::Precondition("no Monte-Carlo draws".into()));
    }
    let w = 1.0 / draws.len() as f64;
    let mut grad = vec![0.0; theta.param_count()];
    let mut sum = 0.0;
    for d in draws {
        sum += theta.accumulate_grad(&z.x, z.c, d.t, &d.eps, sched, &mut grad, w)?;
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite loss gradient for example {}", z.id)));
    }
    Ok((sum * w, grad))
}

pub fn mc_loss_grad(
    theta: &DenoiserParams,
    z: &TrainExample,
    plan: &McPlan,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    plan.validate(sched.steps())?;
    Ok(mc_loss_grad_draws(theta, z, &plan.draws(z.x.len()), sched)?.1)
}
