//! Synthetic conditioned image dataset.
//!
//! Each class owns a smooth 2-D prototype pattern. Within a class, examples are
//! split across a few sub-modes (each a smooth offset pattern), plus a small
//! amount of pixel noise. Sub-modes give the data local neighborhoods that
//! removal experiments can carve out.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// A conditioned training point `z = (x, c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainExample {
    pub id: usize,
    pub x: Vec<f64>,
    pub c: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub modes_per_class: usize,
    pub prototype_rms: f64,
    pub mode_rms: f64,
    pub pixel_noise: f64,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn new(classes: usize, per_class: usize, dim: usize, seed: u64) -> Self {
        DatasetConfig {
            classes,
            per_class,
            dim,
            modes_per_class: 4,
            prototype_rms: 0.45,
            mode_rms: 0.2,
            pixel_noise: 0.04,
            seed,
        }
    }

    /// The desk-scale dataset: 10 classes of 200 8×8 images, 20 sub-modes each.
    pub fn desk(seed: u64) -> Self {
        DatasetConfig {
            modes_per_class: 20,
            mode_rms: 0.3,
            ..DatasetConfig::new(10, 200, 64, seed)
        }
    }
}

/// Side length of the square image layout, if `dim` is a perfect square.
pub fn image_side(dim: usize) -> Option<usize> {
    let s = (dim as f64).sqrt().round() as usize;
    (s * s == dim && s > 0).then_some(s)
}

fn smooth_pattern(side: usize, rms: f64, rng: &mut Rng) -> Vec<f64> {
    let mut px = vec![0.0; side * side];
    for _ in 0..4 {
        let cx = rng.uniform_range(-0.5, side as f64 - 0.5);
        let cy = rng.uniform_range(-0.5, side as f64 - 0.5);
        let width = rng.uniform_range(0.12, 0.3) * side as f64;
        let amp = if rng.bernoulli(0.5) { 1.0 } else { -1.0 } * rng.uniform_range(0.5, 1.0);
        for v in 0..side {
            for u in 0..side {
                let d2 = (u as f64 - cx).powi(2) + (v as f64 - cy).powi(2);
                px[v * side + u] += amp * (-d2 / (2.0 * width * width)).exp();
            }
        }
    }
    let mean = px.iter().sum::<f64>() / px.len() as f64;
    let cur = (px.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / px.len() as f64).sqrt();
    let scale = if cur > 0.0 { rms / cur } else { 0.0 };
    px.iter().map(|p| (p - mean) * scale).collect()
}

/// The class prototype patterns a dataset with this config is built around.
pub fn class_prototypes(cfg: &DatasetConfig) -> Result<Vec<Vec<f64>>> {
    let side =
        image_side(cfg.dim).ok_or_else(|| Error::Precondition(format!("dim {} is not a perfect square", cfg.dim)))?;
    let root = Rng::new(cfg.seed).child_named("prototypes");
    Ok((0..cfg.classes)
        .map(|c| smooth_pattern(side, cfg.prototype_rms, &mut root.child(c as u64)))
        .collect())
}

pub fn make_dataset(classes: usize, per_class: usize, dim: usize, seed: u64) -> Result<Vec<TrainExample>> {
    make_dataset_with(&DatasetConfig::new(classes, per_class, dim, seed))
}

pub fn make_dataset_with(cfg: &DatasetConfig) -> Result<Vec<TrainExample>> {
    if cfg.classes < 2 {
        return Err(Error::Precondition("need at least 2 classes".into()));
    }
    if cfg.per_class < 10 {
        return Err(Error::Precondition("need at least 10 examples per class".into()));
    }
    if cfg.modes_per_class == 0 {
        return Err(Error::Precondition("need at least one sub-mode per class".into()));
    }
    let side =
        image_side(cfg.dim).ok_or_else(|| Error::Precondition(format!("dim {} is not a perfect square", cfg.dim)))?;
    let protos = class_prototypes(cfg)?;
    let modes_rng = Rng::new(cfg.seed).child_named("modes");
    let noise_rng = Rng::new(cfg.seed).child_named("pixels");
    let mut out = Vec::with_capacity(cfg.classes * cfg.per_class);
    for (c, proto) in protos.iter().enumerate() {
        let modes: Vec<Vec<f64>> = (0..cfg.modes_per_class)
            .map(|m| {
                let mut r = modes_rng.child((c * cfg.modes_per_class + m) as u64);
                smooth_pattern(side, cfg.mode_rms, &mut r)
            })
            .collect();
        for i in 0..cfg.per_class {
            let id = c * cfg.per_class + i;
            let mode = &modes[i % cfg.modes_per_class];
            let mut r = noise_rng.child(id as u64);
            // per-example jitter of the sub-mode strength keeps neighborhoods graded
            let strength = r.uniform_range(0.8, 1.2);
            let x = proto
                .iter()
                .zip(mode)
                .map(|(p, m)| (p + strength * m + cfg.pixel_noise * r.normal()).clamp(-1.0, 1.0))
                .collect();
            out.push(TrainExample { id, x, c });
        }
    }
    Ok(out)
}

/// Sub-mode index of an example generated by [`make_dataset_with`].
pub fn sub_mode_of(cfg: &DatasetConfig, id: usize) -> usize {
    (id % cfg.per_class) % cfg.modes_per_class
}
