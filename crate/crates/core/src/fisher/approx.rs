use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::estimate::{kfac_eigen, EigenBlock, FisherDiag, KfacBlock};
use crate::diffusion::BlockSpec;
use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FisherKind {
    Diag,
    Kfac,
    Ekfac,
}

impl FisherKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FisherKind::Diag => "diag",
            FisherKind::Kfac => "kfac",
            FisherKind::Ekfac => "ekfac",
        }
    }
}

impl std::str::FromStr for FisherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diag" => Ok(FisherKind::Diag),
            "kfac" => Ok(FisherKind::Kfac),
            "ekfac" => Ok(FisherKind::Ekfac),
            _ => Err(Error::Precondition(format!("unknown Fisher tag `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Curvature {
    Diag(Vec<f64>),
    Eigen(Vec<EigenBlock>),
}

/// A damped, block-diagonal Fisher approximation over the whole parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherApprox {
    pub kind: FisherKind,
    pub damping: f64,
    pub sample_count: usize,
    pub blocks: Vec<BlockSpec>,
    curvature: Curvature,
}

/// Relative damping applied when none is given.
pub const DEFAULT_RELATIVE_DAMPING: f64 = 1e-4;

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn check_damping(d: f64) -> Result<f64> {
    if !(d >= 0.0 && d.is_finite()) {
        return Err(Error::Precondition(format!("damping must be finite and ≥ 0, got {d}")));
    }
    Ok(d)
}

impl FisherApprox {
    /// `damping = None` picks `1e-4 × mean(diag)`.
    pub fn from_diag(blocks: Vec<BlockSpec>, diag: FisherDiag, damping: Option<f64>) -> Result<Self> {
        let total: usize = blocks.iter().map(|b| b.len()).sum();
        if diag.diag.len() != total {
            return Err(Error::dim("FisherApprox::from_diag", total, diag.diag.len()));
        }
        if diag.diag.iter().any(|d| d.is_nan() || *d < 0.0) {
            return Err(Error::Numeric("negative or NaN diagonal Fisher entry".into()));
        }
        let damping =
            check_damping(damping.unwrap_or_else(|| DEFAULT_RELATIVE_DAMPING * mean(diag.diag.iter().copied())))?;
        Ok(FisherApprox {
            kind: FisherKind::Diag,
            damping,
            sample_count: diag.sample_count,
            blocks,
            curvature: Curvature::Diag(diag.diag),
        })
    }

    pub fn from_kfac(blocks: Vec<BlockSpec>, kfac: &[KfacBlock], damping: Option<f64>) -> Result<Self> {
        let eig = kfac.iter().map(kfac_eigen).collect::<Result<Vec<_>>>()?;
        Self::from_eigen(FisherKind::Kfac, blocks, eig, damping)
    }

    pub fn from_ekfac(blocks: Vec<BlockSpec>, ekfac: Vec<EigenBlock>, damping: Option<f64>) -> Result<Self> {
        Self::from_eigen(FisherKind::Ekfac, blocks, ekfac, damping)
    }

    fn from_eigen(
        kind: FisherKind,
        blocks: Vec<BlockSpec>,
        eig: Vec<EigenBlock>,
        damping: Option<f64>,
    ) -> Result<Self> {
        if eig.len() != blocks.len() {
            return Err(Error::dim("FisherApprox blocks", blocks.len(), eig.len()));
        }
        for (b, e) in blocks.iter().zip(&eig) {
            if b.name != e.name || b.d_in != e.d_in() || b.d_out != e.d_out() || e.s.len() != b.len() {
                return Err(Error::Precondition(format!(
                    "curvature block `{}` does not match parameter block `{}`",
                    e.name, b.name
                )));
            }
            if e.s.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
                return Err(Error::Numeric(format!("invalid eigenvalue in `{}`", e.name)));
            }
        }
        let damping = check_damping(
            damping.unwrap_or_else(|| DEFAULT_RELATIVE_DAMPING * mean(eig.iter().flat_map(|e| e.s.iter().copied()))),
        )?;
        let sample_count = eig.first().map_or(0, |e| e.sample_count);
        Ok(FisherApprox {
            kind,
            damping,
            sample_count,
            blocks,
            curvature: Curvature::Eigen(eig),
        })
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }

    pub fn eigen_blocks(&self) -> Option<&[EigenBlock]> {
        match &self.curvature {
            Curvature::Eigen(e) => Some(e),
            Curvature::Diag(_) => None,
        }
    }

    pub fn diag(&self) -> Option<&[f64]> {
        match &self.curvature {
            Curvature::Diag(d) => Some(d),
            Curvature::Eigen(_) => None,
        }
    }

    /// Floats held per block: `d_in² + d_out² + d_in·d_out` for eigen forms.
    pub fn stored_floats(&self) -> usize {
        match &self.curvature {
            Curvature::Diag(d) => d.len(),
            Curvature::Eigen(e) => e.iter().map(|b| b.stored_floats()).sum(),
        }
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.param_count() {
            return Err(Error::dim("Fisher vector product", self.param_count(), v.len()));
        }
        Ok(())
    }

    /// `(F + λI)⁻¹ v`.
    pub fn inv_vprod(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_len(v)?;
        let lambda = self.damping;
        match &self.curvature {
            Curvature::Diag(d) => {
                let mut out = Vec::with_capacity(v.len());
                for (k, (&vk, &dk)) in v.iter().zip(d).enumerate() {
                    let den = dk + lambda;
                    if den == 0.0 {
                        return Err(Error::Singular(self.block_of(k).to_string()));
                    }
                    out.push(vk / den);
                }
                Ok(out)
            }
            Curvature::Eigen(eig) => {
                let mut out = vec![0.0; v.len()];
                for (b, e) in self.blocks.iter().zip(eig) {
                    if lambda == 0.0 && e.s.contains(&0.0) {
                        return Err(Error::Singular(b.name.clone()));
                    }
                    let res = eigen_apply(e, &v[b.range()], |s| 1.0 / (s + lambda))?;
                    out[b.range()].copy_from_slice(&res);
                }
                Ok(out)
            }
        }
    }

    /// `(F + λI) v`.
    pub fn vprod(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_len(v)?;
        let lambda = self.damping;
        match &self.curvature {
            Curvature::Diag(d) => Ok(v.iter().zip(d).map(|(vk, dk)| (dk + lambda) * vk).collect()),
            Curvature::Eigen(eig) => {
                let mut out = vec![0.0; v.len()];
                for (b, e) in self.blocks.iter().zip(eig) {
                    let res = eigen_apply(e, &v[b.range()], |s| s + lambda)?;
                    out[b.range()].copy_from_slice(&res);
                }
                Ok(out)
            }
        }
    }

    /// Dense undamped block, for small-layer comparisons.
    pub fn dense_block(&self, name: &str) -> Result<Matrix> {
        let bi = self
            .blocks
            .iter()
            .position(|b| b.name == name)
            .ok_or_else(|| Error::Precondition(format!("unknown block `{name}`")))?;
        let b = &self.blocks[bi];
        match &self.curvature {
            Curvature::Diag(d) => Ok(Matrix::diag(&d[b.range()])),
            Curvature::Eigen(eig) => Ok(eigen_dense(&eig[bi])),
        }
    }

    fn block_of(&self, k: usize) -> &str {
        self.blocks
            .iter()
            .find(|b| b.range().contains(&k))
            .map_or("?", |b| b.name.as_str())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        match &self.curvature {
            Curvature::Diag(d) => {
                Tensor::vector(d.clone()).write(&dir.join("diag.fatn"))?;
                files.push("diag.fatn".to_string());
            }
            Curvature::Eigen(eig) => {
                for e in eig {
                    for (suffix, t) in [
                        ("u_a", Tensor::from_matrix(&e.u_a)),
                        ("u_b", Tensor::from_matrix(&e.u_b)),
                        ("s", Tensor::vector(e.s.clone())),
                    ] {
                        let f = format!("{}.{suffix}.fatn", e.name);
                        t.write(&dir.join(&f))?;
                        files.push(f);
                    }
                }
            }
        }
        let manifest = FisherManifest {
            tag: self.kind,
            damping: self.damping,
            sample_count: self.sample_count,
            layers: self.blocks.iter().map(|b| b.name.clone()).collect(),
            blocks: self.blocks.clone(),
            files,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: FisherManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        match m.tag {
            FisherKind::Diag => {
                let diag = Tensor::read(&dir.join("diag.fatn"))?.data;
                Self::from_diag(
                    m.blocks,
                    FisherDiag {
                        diag,
                        sample_count: m.sample_count,
                    },
                    Some(m.damping),
                )
            }
            kind => {
                let mut eig = Vec::with_capacity(m.blocks.len());
                for b in &m.blocks {
                    let read = |suffix: &str| Tensor::read(&dir.join(format!("{}.{suffix}.fatn", b.name)));
                    eig.push(EigenBlock {
                        name: b.name.clone(),
                        u_a: read("u_a")?.into_matrix()?,
                        u_b: read("u_b")?.into_matrix()?,
                        s: read("s")?.data,
                        sample_count: m.sample_count,
                    });
                }
                Self::from_eigen(kind, m.blocks, eig, Some(m.damping))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FisherManifest {
    tag: FisherKind,
    damping: f64,
    sample_count: usize,
    layers: Vec<String>,
    blocks: Vec<BlockSpec>,
    files: Vec<String>,
}

/// `U_B [ f(S) ⊙ (U_Bᵀ V U_A) ] U_Aᵀ` with `V` the column-major reshape of `v`.
fn eigen_apply(e: &EigenBlock, v: &[f64], f: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
    let (d_out, d_in) = (e.d_out(), e.d_in());
    let vm = Matrix::from_vec_col(d_out, d_in, v)?;
    let proj = e.u_b.transpose().matmul(&vm)?.matmul(&e.u_a)?;
    let scaled = Matrix::from_fn(d_out, d_in, |i, j| proj[(i, j)] * f(e.s[j * d_out + i]));
    Ok(e.u_b.matmul(&scaled)?.matmul(&e.u_a.transpose())?.vec_col())
}

fn eigen_dense(e: &EigenBlock) -> Matrix {
    let u = e.u_a.kron(&e.u_b);
    let n = u.rows();
    let scaled = Matrix::from_fn(n, n, |i, j| u[(i, j)] * e.s[j]);
    scaled.matmul(&u.transpose()).expect("square Kronecker basis")
}

pub fn fisher_inv_vprod(f: &FisherApprox, v: &[f64]) -> Result<Vec<f64>> {
    f.inv_vprod(v)
}

pub fn fisher_vprod(f: &FisherApprox, v: &[f64]) -> Result<Vec<f64>> {
    f.vprod(v)
}
