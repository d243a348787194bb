use serde::{Deserialize, Serialize};

use super::data::TrainExample;
use super::model::DenoiserParams;
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Rng};

/// A generated query `ẑ = (x̂, c)`, reproducible from `(c, noise_seed)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthQuery {
    pub id: usize,
    pub x: Vec<f64>,
    pub c: usize,
    pub noise_seed: u64,
}

impl SynthQuery {
    /// The query as a conditioned point, for loss and gradient evaluation.
    pub fn as_example(&self) -> TrainExample {
        TrainExample {
            id: self.id,
            x: self.x.clone(),
            c: self.c,
        }
    }
}

/// Deterministic DDIM sampling over `steps` equally spaced timesteps.
pub fn ddim_sample(
    theta: &DenoiserParams,
    c: usize,
    noise_seed: u64,
    steps: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let t_max = sched.steps();
    if steps == 0 || steps > t_max {
        return Err(Error::Precondition(format!(
            "DDIM steps must be in 1..={t_max}, got {steps}"
        )));
    }
    let ts: Vec<usize> = (1..=steps).map(|i| i * t_max / steps).collect();
    let mut x = Rng::new(noise_seed).normal_vec(theta.arch.dim);
    for i in (0..steps).rev() {
        let t = ts[i];
        let ab = sched.alpha_bar(t);
        let ab_prev = if i == 0 { 1.0 } else { sched.alpha_bar(ts[i - 1]) };
        let eps = theta.predict(&x, c, t)?;
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let x0: Vec<f64> = x
            .iter()
            .zip(&eps)
            .map(|(xi, e)| ((xi - sb * e) / sa).clamp(-1.0, 1.0))
            .collect();
        let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        x = x
            .iter()
            .zip(&x0)
            .map(|(xi, x0i)| {
                // noise direction implied by the clipped clean estimate
                let e = (xi - sa * x0i) / sb;
                pa * x0i + pb * e
            })
            .collect();
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite DDIM sample".into()));
    }
    Ok(x)
}

/// `count` queries cycling through the classes, each with a fresh noise seed.
pub fn generate_queries(
    theta: &DenoiserParams,
    count: usize,
    seed: u64,
    steps: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<SynthQuery>> {
    (0..count)
        .map(|id| {
            let c = id % theta.arch.classes;
            let noise_seed = derive_seed(seed, id as u64);
            Ok(SynthQuery {
                id,
                x: ddim_sample(theta, c, noise_seed, steps, sched)?,
                c,
                noise_seed,
            })
        })
        .collect()
}
