//! On-disk layout: a FATN tensor plus a JSON sidecar with the same stem.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::TrainExample;
use super::model::{BlockSpec, DenoiserArch, DenoiserParams};
use super::train::ScheduleConfig;
use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub count: usize,
    pub dim: usize,
    pub classes: usize,
    pub ids: Vec<usize>,
    pub conditions: Vec<usize>,
}

/// Writes `path` (an `N × D` tensor) and its `.json` sidecar.
pub fn save_dataset(path: &Path, data: &[TrainExample], classes: usize) -> Result<()> {
    let dim = data.first().map_or(0, |z| z.x.len());
    let mut flat = Vec::with_capacity(data.len() * dim);
    for z in data {
        if z.x.len() != dim {
            return Err(Error::dim("save_dataset", dim, z.x.len()));
        }
        flat.extend_from_slice(&z.x);
    }
    Tensor::new(vec![data.len() as u64, dim as u64], flat)?.write(path)?;
    let meta = DatasetSidecar {
        count: data.len(),
        dim,
        classes,
        ids: data.iter().map(|z| z.id).collect(),
        conditions: data.iter().map(|z| z.c).collect(),
    };
    fs::write(sidecar(path), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<(Vec<TrainExample>, DatasetSidecar)> {
    let meta: DatasetSidecar = serde_json::from_slice(&fs::read(sidecar(path))?)?;
    let t = Tensor::read(path)?;
    if t.dims != [meta.count as u64, meta.dim as u64]
        || meta.ids.len() != meta.count
        || meta.conditions.len() != meta.count
    {
        return Err(Error::Format("dataset tensor and sidecar disagree".into()));
    }
    let data = (0..meta.count)
        .map(|i| TrainExample {
            id: meta.ids[i],
            x: t.data[i * meta.dim..(i + 1) * meta.dim].to_vec(),
            c: meta.conditions[i],
        })
        .collect();
    Ok((data, meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub arch: DenoiserArch,
    pub schedule: ScheduleConfig,
    pub blocks: Vec<BlockSpec>,
}

/// Writes the flat parameter vector and a sidecar naming every block.
pub fn save_model(path: &Path, theta: &DenoiserParams, schedule: &ScheduleConfig) -> Result<()> {
    Tensor::vector(theta.to_flat()).write(path)?;
    let meta = ModelSidecar {
        arch: theta.arch.clone(),
        schedule: schedule.clone(),
        blocks: theta.arch.blocks(),
    };
    fs::write(sidecar(path), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(DenoiserParams, ScheduleConfig)> {
    let meta: ModelSidecar = serde_json::from_slice(&fs::read(sidecar(path))?)?;
    if meta.blocks != meta.arch.blocks() {
        return Err(Error::Format(
            "model sidecar block map does not match its architecture".into(),
        ));
    }
    let t = Tensor::read(path)?;
    let theta = DenoiserParams::from_flat(&meta.arch, &t.data)?;
    Ok((theta, meta.schedule))
}
