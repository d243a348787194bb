//! Base features, feature stores and cosine k-NN search (exact and coarse).

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::TrainExample;
use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::numerics::{dot, norm2, sym_eigh, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    Image,
    Text,
    ImageText,
}

impl std::str::FromStr for EncoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(EncoderMode::Image),
            "text" => Ok(EncoderMode::Text),
            "image+text" | "image_text" => Ok(EncoderMode::ImageText),
            _ => Err(Error::Precondition(format!("unknown encoder mode `{s}`"))),
        }
    }
}

/// Frozen off-the-shelf features: PCA of the training images and a one-hot
/// condition code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseEncoder {
    pub mode: EncoderMode,
    pub classes: usize,
    pub mean: Vec<f64>,
    /// `d_img × D`, orthonormal rows.
    pub components: Matrix,
    /// Variance captured by each component, descending.
    pub variances: Vec<f64>,
    /// Fraction of total image variance captured.
    pub explained: f64,
    pub seed: u64,
}

/// Share of image variance the automatic component count must reach.
pub const TARGET_EXPLAINED: f64 = 0.9;

/// Fits the encoder. `d_img = None` picks the smallest count reaching 90%
/// explained variance.
pub fn fit_encoder(
    data: &[TrainExample],
    d_img: Option<usize>,
    mode: EncoderMode,
    classes: usize,
    seed: u64,
) -> Result<BaseEncoder> {
    let n = data.len();
    let dim = data.first().map_or(0, |z| z.x.len());
    if n < 2 || dim == 0 {
        return Err(Error::Precondition("encoder needs at least two examples".into()));
    }
    if let Some(d) = d_img {
        if d == 0 || d >= n {
            return Err(Error::Precondition(format!("d_img {d} must be in 1..{n}")));
        }
    }
    let mut mean = vec![0.0; dim];
    for z in data {
        if z.x.len() != dim {
            return Err(Error::dim("fit_encoder", dim, z.x.len()));
        }
        for (m, v) in mean.iter_mut().zip(&z.x) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = Matrix::zeros(dim, dim);
    let mut centered = vec![0.0; dim];
    for z in data {
        for (c, (v, m)) in centered.iter_mut().zip(z.x.iter().zip(&mean)) {
            *c = v - m;
        }
        let buf = cov.as_mut_slice();
        for i in 0..dim {
            for j in i..dim {
                buf[i * dim + j] += centered[i] * centered[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = cov[(i, j)] / n as f64;
            cov.as_mut_slice()[i * dim + j] = v;
            cov.as_mut_slice()[j * dim + i] = v;
        }
    }
    let eig = sym_eigh(&cov)?;
    let total: f64 = eig.values.iter().map(|v| v.max(0.0)).sum();
    let top = eig.values[0].max(0.0);
    let rank = eig.values.iter().filter(|&&v| v > 1e-12 * top).count();
    let d = match d_img {
        Some(d) if d > rank => {
            return Err(Error::Precondition(format!("d_img {d} exceeds data rank {rank}")));
        }
        Some(d) => d,
        None => {
            let mut acc = 0.0;
            let mut d = rank;
            for (k, v) in eig.values.iter().enumerate().take(rank) {
                acc += v.max(0.0);
                if acc >= TARGET_EXPLAINED * total {
                    d = k + 1;
                    break;
                }
            }
            d
        }
    };
    let components = Matrix::from_fn(d, dim, |k, j| eig.vectors[(j, k)]);
    let variances: Vec<f64> = eig.values[..d].to_vec();
    let explained = if total > 0.0 {
        variances.iter().sum::<f64>() / total
    } else {
        1.0
    };
    Ok(BaseEncoder {
        mode,
        classes,
        mean,
        components,
        variances,
        explained,
        seed,
    })
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm2(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

impl BaseEncoder {
    pub fn d_img(&self) -> usize {
        self.components.rows()
    }

    pub fn dim(&self) -> usize {
        match self.mode {
            EncoderMode::Image => self.d_img(),
            EncoderMode::Text => self.classes,
            EncoderMode::ImageText => self.d_img() + self.classes,
        }
    }

    /// PCA coefficients of an image.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(Error::dim("BaseEncoder::project", self.mean.len(), x.len()));
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        self.components.matvec(&centered)
    }

    pub fn reconstruct(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        let mut x = self.components.matvec_t(coeffs)?;
        x.iter_mut().zip(&self.mean).for_each(|(v, m)| *v += m);
        Ok(x)
    }

    pub fn text(&self, c: usize) -> Result<Vec<f64>> {
        if c >= self.classes {
            return Err(Error::Precondition(format!(
                "condition {c} outside 0..{}",
                self.classes
            )));
        }
        let mut v = vec![0.0; self.classes];
        v[c] = 1.0;
        Ok(v)
    }

    /// Unit-norm feature of `(x, c)`; in image+text mode each part is
    /// normalized before concatenation.
    pub fn encode(&self, x: &[f64], c: usize) -> Result<Vec<f64>> {
        let v = match self.mode {
            EncoderMode::Image => self.project(x)?,
            EncoderMode::Text => self.text(c)?,
            EncoderMode::ImageText => {
                let mut v = normalized(self.project(x)?);
                v.extend(self.text(c)?);
                v
            }
        };
        Ok(normalized(v))
    }

    pub fn encode_all(&self, data: &[TrainExample]) -> Result<FeatureStore> {
        let mut flat = Vec::with_capacity(data.len() * self.dim());
        for z in data {
            flat.extend(self.encode(&z.x, z.c)?);
        }
        FeatureStore::new(
            data.iter().map(|z| z.id).collect(),
            Matrix::new(data.len(), self.dim(), flat)?,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Row-aligned ids and feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    pub ids: Vec<usize>,
    pub vectors: Matrix,
    pub normalized: bool,
}

impl FeatureStore {
    /// Stores `vectors` as given; `normalized` is set when every row is unit length.
    pub fn new(ids: Vec<usize>, vectors: Matrix) -> Result<Self> {
        if ids.len() != vectors.rows() {
            return Err(Error::dim("FeatureStore ids", vectors.rows(), ids.len()));
        }
        let normalized = (0..vectors.rows()).all(|i| (norm2(vectors.row(i)) - 1.0).abs() <= 1e-9);
        Ok(FeatureStore {
            ids,
            vectors,
            normalized,
        })
    }

    /// Copy with every nonzero row scaled to unit length.
    pub fn normalize(&self) -> FeatureStore {
        let mut v = self.vectors.clone();
        for i in 0..v.rows() {
            let n = norm2(v.row(i));
            if n > 0.0 {
                v.row_mut(i).iter_mut().for_each(|x| *x /= n);
            }
        }
        let normalized = (0..v.rows()).all(|i| (norm2(v.row(i)) - 1.0).abs() <= 1e-9);
        FeatureStore {
            ids: self.ids.clone(),
            vectors: v,
            normalized,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn position(&self, id: usize) -> Option<usize> {
        self.ids.iter().position(|&i| i == id)
    }

    /// Applies `f` to every row and stores normalized results.
    pub fn map(&self, mut f: impl FnMut(&[f64]) -> Result<Vec<f64>>) -> Result<FeatureStore> {
        let mut flat = Vec::new();
        let mut dim = 0;
        for i in 0..self.len() {
            let v = normalized(f(self.vectors.row(i))?);
            dim = v.len();
            flat.extend(v);
        }
        FeatureStore::new(self.ids.clone(), Matrix::new(self.len(), dim, flat)?)
    }

    /// Writes `path` (an `n × d` tensor) and a `.json` id manifest.
    pub fn save(&self, path: &Path) -> Result<()> {
        Tensor::from_matrix(&self.vectors).write(path)?;
        fs::write(path.with_extension("json"), serde_json::to_vec(&self.ids)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ids: Vec<usize> = serde_json::from_slice(&fs::read(path.with_extension("json"))?)?;
        FeatureStore::new(ids, Tensor::read(path)?.into_matrix()?)
    }
}

/// Score descending, then id ascending.
fn by_score_then_id(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

fn top_k(mut scored: Vec<(usize, f64)>, k: usize) -> Vec<(usize, f64)> {
    if k < scored.len() {
        if k > 0 {
            scored.select_nth_unstable_by(k - 1, by_score_then_id);
        }
        scored.truncate(k);
    }
    scored.sort_by(by_score_then_id);
    scored
}

fn require_normalized(store: &FeatureStore) -> Result<()> {
    if !store.normalized {
        return Err(Error::Precondition("feature store is not normalized".into()));
    }
    Ok(())
}

fn scores(store: &FeatureStore, q: &[f64], rows: impl Iterator<Item = usize>) -> Result<Vec<(usize, f64)>> {
    if q.len() != store.dim() {
        return Err(Error::dim("k-NN query", store.dim(), q.len()));
    }
    let q = normalized(q.to_vec());
    Ok(rows.map(|r| (store.ids[r], dot(store.vectors.row(r), &q))).collect())
}

/// The `k` most cosine-similar stored ids.
pub fn knn_exact(store: &FeatureStore, q: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
    require_normalized(store)?;
    if k > store.len() {
        return Err(Error::Precondition(format!(
            "K = {k} exceeds store size {}",
            store.len()
        )));
    }
    Ok(top_k(scores(store, q, 0..store.len())?, k))
}

/// Every stored id ordered by cosine to `q`.
pub fn rank_all(store: &FeatureStore, q: &[f64]) -> Result<Vec<(usize, f64)>> {
    require_normalized(store)?;
    let mut s = scores(store, q, 0..store.len())?;
    s.sort_by(by_score_then_id);
    Ok(s)
}

/// Spherical k-means cells over a normalized store.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseIndex {
    pub n_cells: usize,
    pub n_probe: usize,
    /// `n_cells × d`, unit rows.
    pub centroids: Matrix,
    /// Store row positions per cell.
    pub cells: Vec<Vec<usize>>,
}

pub const LLOYD_ITERATIONS: usize = 20;

/// `(√n, ⌈0.2·√n⌉)`.
pub fn default_cells(n: usize) -> (usize, usize) {
    let cells = ((n as f64).sqrt().round() as usize).max(1);
    (cells, ((0.2 * cells as f64).ceil() as usize).max(1))
}

fn nearest_centroid(centroids: &Matrix, v: &[f64]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for c in 0..centroids.rows() {
        let s = dot(centroids.row(c), v);
        if s > best.1 {
            best = (c, s);
        }
    }
    best.0
}

pub fn build_index(store: &FeatureStore, n_cells: usize, n_probe: usize, seed: u64) -> Result<CoarseIndex> {
    require_normalized(store)?;
    if n_cells == 0 || n_cells > store.len() {
        return Err(Error::Precondition(format!(
            "n_cells must be in 1..={}, got {n_cells}",
            store.len()
        )));
    }
    if n_probe == 0 || n_probe > n_cells {
        return Err(Error::Precondition(format!("n_probe must be in 1..={n_cells}")));
    }
    let d = store.dim();
    let init = Rng::new(seed)
        .child_named("kmeans")
        .sample_indices(store.len(), n_cells);
    let mut centroids = Matrix::from_fn(n_cells, d, |c, j| store.vectors[(init[c], j)]);
    let mut assign = vec![0usize; store.len()];
    for _ in 0..LLOYD_ITERATIONS {
        for (r, a) in assign.iter_mut().enumerate() {
            *a = nearest_centroid(&centroids, store.vectors.row(r));
        }
        let mut sums = Matrix::zeros(n_cells, d);
        for (r, &a) in assign.iter().enumerate() {
            for (s, v) in sums.row_mut(a).iter_mut().zip(store.vectors.row(r)) {
                *s += v;
            }
        }
        for c in 0..n_cells {
            let n = norm2(sums.row(c));
            // an emptied or degenerate cell keeps its previous centroid
            if n > 0.0 {
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / n;
                }
            }
        }
    }
    let mut cells = vec![Vec::new(); n_cells];
    for r in 0..store.len() {
        cells[nearest_centroid(&centroids, store.vectors.row(r))].push(r);
    }
    Ok(CoarseIndex {
        n_cells,
        n_probe,
        centroids,
        cells,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseHits {
    pub hits: Vec<(usize, f64)>,
    /// Set when the probed cells held fewer than `K` vectors.
    pub short: bool,
}

pub fn knn_coarse(index: &CoarseIndex, store: &FeatureStore, q: &[f64], k: usize) -> Result<CoarseHits> {
    require_normalized(store)?;
    if index.cells.iter().map(|c| c.len()).sum::<usize>() != store.len() {
        return Err(Error::Precondition("index was not built over this store".into()));
    }
    if q.len() != store.dim() {
        return Err(Error::dim("k-NN query", store.dim(), q.len()));
    }
    let qn = normalized(q.to_vec());
    let cell_scores: Vec<(usize, f64)> = (0..index.n_cells)
        .map(|c| (c, dot(index.centroids.row(c), &qn)))
        .collect();
    let probed = top_k(cell_scores, index.n_probe);
    let rows = probed.iter().flat_map(|&(c, _)| index.cells[c].iter().copied());
    let s = scores(store, q, rows)?;
    let short = s.len() < k;
    if short {
        log::warn!("coarse search found {} of {k} requested neighbors", s.len());
    }
    Ok(CoarseHits {
        hits: top_k(s, k),
        short,
    })
}

#[derive(Serialize, Deserialize)]
struct IndexManifest {
    n_cells: usize,
    n_probe: usize,
    cells: Vec<Vec<usize>>,
}

impl CoarseIndex {
    pub fn save(&self, path: &Path) -> Result<()> {
        Tensor::from_matrix(&self.centroids).write(path)?;
        let m = IndexManifest {
            n_cells: self.n_cells,
            n_probe: self.n_probe,
            cells: self.cells.clone(),
        };
        fs::write(path.with_extension("json"), serde_json::to_vec(&m)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: IndexManifest = serde_json::from_slice(&fs::read(path.with_extension("json"))?)?;
        let centroids = Tensor::read(path)?.into_matrix()?;
        if centroids.rows() != m.n_cells || m.cells.len() != m.n_cells {
            return Err(Error::Format("index centroids and cells disagree".into()));
        }
        Ok(CoarseIndex {
            n_cells: m.n_cells,
            n_probe: m.n_probe,
            centroids,
            cells: m.cells,
        })
    }
}
