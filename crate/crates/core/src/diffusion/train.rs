use serde::{Deserialize, Serialize};

use super::data::TrainExample;
use super::model::{DenoiserArch, DenoiserParams};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, mix64, AdamWConfig, AdamWState, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.05,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Adam denominator floor. Large values damp the per-coordinate step
    /// normalization, which keeps retraining on near-identical data stable.
    pub adam_eps: f64,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
    /// Mini-batches per epoch; defaults to `ceil(n / batch)`. Pin it to the
    /// full-data value when retraining on subsets so batch membership of the
    /// surviving examples is unchanged.
    pub epoch_batches: Option<usize>,
    pub schedule: ScheduleConfig,
    pub arch: DenoiserArch,
}

/// Mini-batch of `id` in `epoch`, out of `batches`.
///
/// Membership depends only on `(seed, epoch, id)`, so removing examples leaves
/// every survivor in the same batch with the same noise draws.
fn batch_of(seed: u64, epoch: usize, id: usize, batches: usize) -> usize {
    let u = mix64(derive_seed(derive_seed(seed, epoch as u64), id as u64));
    ((u as u128 * batches as u128) >> 64) as usize
}

/// Trains a denoiser with AdamW; returns the parameters and per-epoch mean loss.
pub fn train_model_logged(
    dataset: &[TrainExample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(DenoiserParams, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::Precondition("empty training set".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Precondition("batch size must be positive".into()));
    }
    if let Some(z) = dataset.iter().find(|z| z.x.len() != cfg.arch.dim) {
        return Err(Error::dim("train_model example", cfg.arch.dim, z.x.len()));
    }
    let sched = cfg.schedule.build()?;
    let root = Rng::new(seed);
    let mut theta = DenoiserParams::init(&cfg.arch, &mut root.child_named("init"));
    let noise_root = root.child_named("noise");
    let blocks = cfg.arch.blocks();
    let groups: Vec<(&str, usize)> = blocks.iter().map(|b| (b.name.as_str(), b.len())).collect();
    let mut flat = theta.to_flat();
    let mut opt = AdamWState::new(
        flat.len(),
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            eps: cfg.adam_eps,
            ..Default::default()
        },
    );
    let mut grad = vec![0.0; flat.len()];
    let mut history = Vec::with_capacity(cfg.epochs);
    let n_batches = cfg.epoch_batches.unwrap_or_else(|| dataset.len().div_ceil(cfg.batch));
    if n_batches == 0 {
        return Err(Error::Precondition("epoch_batches must be positive".into()));
    }
    let total_steps = (cfg.epochs * n_batches) as f64;
    let mut step = 0usize;
    let mut batches: Vec<Vec<usize>> = vec![Vec::new(); n_batches];
    for epoch in 0..cfg.epochs {
        batches.iter_mut().for_each(|b| b.clear());
        for (i, z) in dataset.iter().enumerate() {
            batches[batch_of(seed, epoch, z.id, n_batches)].push(i);
        }
        let epoch_noise = noise_root.child(epoch as u64);
        let mut epoch_loss = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            if cfg.cosine_decay {
                let frac = step as f64 / total_steps;
                opt.hyper.lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
            }
            step += 1;
            if batch.is_empty() {
                continue;
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
            let w = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let z = &dataset[i];
                let mut r = epoch_noise.child(z.id as u64);
                let t = 1 + r.below(sched.steps());
                let eps = r.normal_vec(z.x.len());
                batch_loss += theta.accumulate_grad(&z.x, z.c, t, &eps, &sched, &mut grad, w)?;
            }
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, batch: Some(bi) });
            }
            epoch_loss += batch_loss;
            opt.step_flat(&mut flat, &grad, &groups)?;
            theta
                .assign_flat(&flat)
                .map_err(|_| Error::Diverged { epoch, batch: Some(bi) })?;
        }
        history.push(epoch_loss / dataset.len() as f64);
    }
    Ok((theta, history))
}

pub fn train_model(dataset: &[TrainExample], cfg: &TrainConfig, seed: u64) -> Result<DenoiserParams> {
    Ok(train_model_logged(dataset, cfg, seed)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::data::make_dataset;

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch: 8,
            lr: 3e-3,
            weight_decay: 0.0,
            adam_eps: 1e-8,
            cosine_decay: true,
            epoch_batches: None,
            schedule: ScheduleConfig::default(),
            arch: DenoiserArch {
                dim: 16,
                classes: 2,
                cond_dim: 2,
                time_dim: 4,
                hidden: vec![12],
            },
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let d = make_dataset(2, 10, 16, 1).unwrap();
        let a = train_model(&d, &cfg(2), 4).unwrap();
        let b = train_model(&d, &cfg(2), 4).unwrap();
        assert_eq!(a.to_flat(), b.to_flat());
        assert_ne!(a.to_flat(), train_model(&d, &cfg(2), 5).unwrap().to_flat());
    }

    #[test]
    fn batches_are_balanced_and_in_range() {
        let mut counts = [0usize; 8];
        for id in 0..8000 {
            counts[batch_of(9, 3, id, 8)] += 1;
        }
        // 1000 expected per batch, sd ≈ 30
        assert!(counts.iter().all(|&c| (850..1150).contains(&c)), "{counts:?}");
        assert_ne!(batch_of(9, 3, 5, 1000), batch_of(9, 4, 5, 1000));
    }

    #[test]
    fn pinned_batches_make_retraining_a_perturbation() {
        let d = make_dataset(2, 20, 16, 1).unwrap();
        let mut c = cfg(3);
        c.epoch_batches = Some(5);
        let full = train_model(&d, &c, 2).unwrap().to_flat();
        let kept: Vec<TrainExample> = d.iter().filter(|z| z.id != 7).cloned().collect();
        let removed = train_model(&kept, &c, 2).unwrap().to_flat();
        let other = train_model(&d, &c, 3).unwrap().to_flat();
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(dist(&full, &removed) < 0.5 * dist(&full, &other));
    }

    #[test]
    fn divergence_reports_epoch() {
        let d = make_dataset(2, 10, 16, 1).unwrap();
        let mut c = cfg(3);
        c.lr = 1e200;
        match train_model(&d, &c, 1) {
            Err(Error::Diverged { epoch, .. }) => assert!(epoch < 3),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn rejects_empty() {
        assert!(train_model(&[], &cfg(1), 0).is_err());
    }
}
