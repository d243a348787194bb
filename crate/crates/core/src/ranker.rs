//! The distilled student: an MLP head over frozen base features whose cosine
//! similarities are trained to reproduce the teacher's normalized ranks.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curation::{BatchSampler, Corpus};
use crate::error::{Error, Result};
use crate::eval::map_at_l;
use crate::numerics::tensor::Tensor;
use crate::numerics::{dot, norm2, AdamWConfig, AdamWState, MlpCache, MlpParams, Rng};
use crate::retrieval::FeatureStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "tag")]
pub enum LossMode {
    Bce,
    Ordinal { bins: usize },
    Mse,
}

impl LossMode {
    fn thresholds(self) -> usize {
        match self {
            LossMode::Ordinal { bins } => bins - 1,
            _ => 1,
        }
    }

    pub fn name(self) -> String {
        match self {
            LossMode::Bce => "bce".into(),
            LossMode::Mse => "mse".into(),
            LossMode::Ordinal { bins } => format!("ordinal:{bins}"),
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    /// `bce`, `mse`, `ordinal` (10 bins) or `ordinal:<B>`.
    fn from_str(s: &str) -> Result<Self> {
        let mode = match s {
            "bce" => LossMode::Bce,
            "mse" => LossMode::Mse,
            "ordinal" => LossMode::Ordinal { bins: 10 },
            _ => match s.strip_prefix("ordinal:").map(str::parse::<usize>) {
                Some(Ok(bins)) => LossMode::Ordinal { bins },
                _ => return Err(Error::Precondition(format!("unknown loss mode `{s}`"))),
            },
        };
        if let LossMode::Ordinal { bins } = mode {
            if bins < 2 {
                return Err(Error::Precondition("ordinal mode needs at least 2 bins".into()));
            }
        }
        Ok(mode)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Soft-target BCE of `p = σ(a·r + b)` against `π`. Returns
/// `(loss, ∂/∂r, ∂/∂a, ∂/∂b)`.
pub fn bce_loss(pi: f64, r: f64, a: f64, b: f64) -> (f64, f64, f64, f64) {
    let z = a * r + b;
    // −[π ln σ(z) + (1−π) ln(1−σ(z))] = softplus(z) − π z
    let loss = softplus(z) - pi * z;
    let dz = sigmoid(z) - pi;
    (loss, dz * a, dz * r, dz)
}

/// `(σ(a·r + b) − π)²` with the same partials as [`bce_loss`].
pub fn mse_rank_loss(pi: f64, r: f64, a: f64, b: f64) -> (f64, f64, f64, f64) {
    let p = sigmoid(a * r + b);
    let e = p - pi;
    let dz = 2.0 * e * p * (1.0 - p);
    (e * e, dz * a, dz * r, dz)
}

/// Threshold targets `b^k = [rank_bin > k]` for `k = 1..B−1`.
pub fn ordinal_targets(rank_bin: usize, bins: usize) -> Result<Vec<f64>> {
    if rank_bin == 0 || rank_bin > bins {
        return Err(Error::Precondition(format!("rank bin {rank_bin} outside 1..={bins}")));
    }
    Ok((1..bins).map(|k| if rank_bin > k { 1.0 } else { 0.0 }).collect())
}

/// Summed threshold BCE and its gradient with respect to each logit.
pub fn ordinal_loss(rank_bin: usize, logits: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numeric("non-finite ordinal logit".into()));
    }
    let targets = ordinal_targets(rank_bin, logits.len() + 1)?;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (&l, &t) in logits.iter().zip(&targets) {
        loss += softplus(l) - t * l;
        grads.push(sigmoid(l) - t);
    }
    Ok((loss, grads))
}

/// `r̂ = Σ σ(ℓ^k)`; a hard prediction of bin `r` yields `r − 1`.
pub fn ordinal_predict(logits: &[f64]) -> f64 {
    logits.iter().map(|&l| sigmoid(l)).sum()
}

/// Bin of a normalized rank in `(0, 1]` among `bins` equal-width bins.
pub fn rank_bin(pi: f64, bins: usize) -> usize {
    ((pi * bins as f64 - 1e-9).ceil() as usize).clamp(1, bins)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankerParams {
    pub mode: LossMode,
    pub head: MlpParams,
    /// Logit scale per threshold (one entry unless ordinal).
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Initial logit scale. Negative because a higher cosine must predict a
/// smaller normalized rank.
pub const INIT_SCALE: f64 = -5.0;

/// Perturbation added to the identity head at initialization.
pub const INIT_NOISE: f64 = 0.01;

const CALIBRATION_PAIRS: usize = 4096;
const CALIBRATION_STEPS: usize = 300;
const CALIBRATION_LR: f64 = 0.05;

impl RankerParams {
    /// 3-layer head `d_in → hidden → hidden → d_emb`. Starts near the
    /// identity (zero-padded) when the widths allow it, so training begins
    /// from the base-feature ordering; otherwise He-initialized.
    pub fn init(d_in: usize, hidden: usize, d_emb: usize, mode: LossMode, rng: &mut Rng) -> Self {
        let dims = [d_in, hidden, hidden, d_emb];
        let head = MlpParams::split_identity(&dims, INIT_NOISE, rng).unwrap_or_else(|_| MlpParams::init(&dims, rng));
        let n = mode.thresholds();
        let b = match mode {
            // thresholds start at the uniform prior P(bin > k) = 1 − k/B
            LossMode::Ordinal { bins } => (1..bins).map(|k| ((bins - k) as f64 / k as f64).ln()).collect(),
            _ => vec![0.0],
        };
        RankerParams {
            mode,
            head,
            a: vec![INIT_SCALE; n],
            b,
        }
    }

    pub fn d_in(&self) -> usize {
        self.head.input_dim()
    }

    pub fn d_emb(&self) -> usize {
        self.head.output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.head.param_count() + self.a.len() + self.b.len()
    }

    /// Head parameters, then `a`, then `b`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.head.flatten();
        v.extend(&self.a);
        v.extend(&self.b);
        v
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::dim("RankerParams::assign_flat", self.param_count(), flat.len()));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite ranker parameter".into()));
        }
        let nh = self.head.param_count();
        let na = self.a.len();
        self.head.assign_flat(&flat[..nh])?;
        self.a.copy_from_slice(&flat[nh..nh + na]);
        self.b.copy_from_slice(&flat[nh + na..]);
        Ok(())
    }

    /// Unit-norm embedding `f = g(x) / ‖g(x)‖`.
    pub fn embed(&self, base: &[f64]) -> Result<Vec<f64>> {
        Ok(unit_or_fallback(self.head.predict(base)?).0)
    }

    fn embed_traced(&self, base: &[f64]) -> Result<Trace> {
        let (h, cache) = self.head.forward(base)?;
        let (f, norm) = unit_or_fallback(h);
        Ok(Trace { f, norm, cache })
    }

    /// `cos(f(u), f(v))`.
    pub fn rank_score(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        Ok(dot(&self.embed(u)?, &self.embed(v)?))
    }

    /// Loss of one pair, its cosine, and the per-threshold readout gradients.
    fn head_loss(&self, r: f64, pi: f64) -> (f64, f64, Vec<f64>, Vec<f64>) {
        match self.mode {
            LossMode::Bce | LossMode::Mse => {
                let f = if self.mode == LossMode::Bce {
                    bce_loss
                } else {
                    mse_rank_loss
                };
                let (l, dr, da, db) = f(pi, r, self.a[0], self.b[0]);
                (l, dr, vec![da], vec![db])
            }
            LossMode::Ordinal { bins } => {
                let logits: Vec<f64> = self.a.iter().zip(&self.b).map(|(a, b)| a * r + b).collect();
                // logits are finite because a, b and r are
                let (l, dl) = ordinal_loss(rank_bin(pi, bins), &logits).expect("finite logits");
                let dr = dl.iter().zip(&self.a).map(|(d, a)| d * a).sum();
                let da = dl.iter().map(|d| d * r).collect();
                (l, dr, da, dl)
            }
        }
    }

    /// Fits the readout `(a, b)` to `(cosine, π)` pairs with the head frozen.
    pub fn calibrate_readout(&mut self, pairs: &[(f64, f64)]) -> Result<()> {
        if pairs.is_empty() {
            return Ok(());
        }
        let na = self.a.len();
        let mut ab: Vec<f64> = self.a.iter().chain(&self.b).copied().collect();
        let mut opt = AdamWState::new(
            ab.len(),
            AdamWConfig {
                lr: CALIBRATION_LR,
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        let w = 1.0 / pairs.len() as f64;
        for _ in 0..CALIBRATION_STEPS {
            let mut g = vec![0.0; ab.len()];
            for &(r, pi) in pairs {
                let (_, _, da, db) = self.head_loss(r, pi);
                for (k, (da, db)) in da.iter().zip(&db).enumerate() {
                    g[k] += w * da;
                    g[na + k] += w * db;
                }
            }
            opt.step_flat(&mut ab, &g, &[])?;
            self.a.copy_from_slice(&ab[..na]);
            self.b.copy_from_slice(&ab[na..]);
        }
        Ok(())
    }

    pub fn pair_loss(&self, u: &[f64], v: &[f64], pi: f64) -> Result<f64> {
        let r = self.rank_score(u, v)?;
        Ok(self.head_loss(r, pi).0)
    }

    /// Accumulates `scale · ∇` of one pair's loss into `grad` (flat layout)
    /// and returns the loss. Gradients reach the head through both embeddings.
    pub fn accumulate_pair_grad(
        &self,
        u: &[f64],
        v: &[f64],
        pi: f64,
        grad: &mut RankerGrad,
        scale: f64,
    ) -> Result<f64> {
        let tu = self.embed_traced(u)?;
        let tv = self.embed_traced(v)?;
        let r = dot(&tu.f, &tv.f);
        let (loss, dr, da, db) = self.head_loss(r, pi);
        for (side, other) in [(&tu, &tv), (&tv, &tu)] {
            if side.norm == 0.0 {
                continue;
            }
            // ∂r/∂h = (f_other − r f) / ‖h‖
            let dh: Vec<f64> = other
                .f
                .iter()
                .zip(&side.f)
                .map(|(o, s)| scale * dr * (o - r * s) / side.norm)
                .collect();
            let (pre, _) = self.head.backward_pre(&side.cache, &dh)?;
            MlpParams::accumulate_grads(&side.cache, &pre, &mut grad.head, 1.0);
        }
        for (g, d) in grad.a.iter_mut().zip(da) {
            *g += scale * d;
        }
        for (g, d) in grad.b.iter_mut().zip(db) {
            *g += scale * d;
        }
        Ok(loss)
    }

    pub fn zero_grad(&self) -> RankerGrad {
        RankerGrad {
            head: self.head.zeros_like(),
            a: vec![0.0; self.a.len()],
            b: vec![0.0; self.b.len()],
        }
    }

    /// Embeds every row of a base-feature store.
    pub fn embed_store(&self, base: &FeatureStore) -> Result<FeatureStore> {
        base.map(|v| self.embed(v))
    }

    /// Writes the flat parameters to `path` and a `.json` sidecar.
    pub fn save(&self, path: &Path, provenance: &RankerProvenance) -> Result<()> {
        Tensor::vector(self.to_flat()).write(path)?;
        let meta = CheckpointMeta {
            mode: self.mode,
            d_in: self.d_in(),
            hidden: self.head.layers()[0].output_dim(),
            d_emb: self.d_emb(),
            a: self.a.clone(),
            b: self.b.clone(),
            provenance: provenance.clone(),
        };
        fs::write(path.with_extension("json"), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, RankerProvenance)> {
        let meta: CheckpointMeta = serde_json::from_slice(&fs::read(path.with_extension("json"))?)?;
        let mut r = RankerParams::init(meta.d_in, meta.hidden, meta.d_emb, meta.mode, &mut Rng::new(0));
        let flat = Tensor::read(path)?.data;
        r.assign_flat(&flat)?;
        if r.a != meta.a || r.b != meta.b {
            return Err(Error::Format("checkpoint sidecar disagrees with tensor".into()));
        }
        Ok((r, meta.provenance))
    }
}

fn unit_or_fallback(h: Vec<f64>) -> (Vec<f64>, f64) {
    let n = norm2(&h);
    if n > 0.0 && n.is_finite() {
        (h.iter().map(|v| v / n).collect(), n)
    } else {
        log::warn!("zero embedding; falling back to the first basis vector");
        let mut e = vec![0.0; h.len()];
        e[0] = 1.0;
        (e, 0.0)
    }
}

struct Trace {
    f: Vec<f64>,
    norm: f64,
    cache: MlpCache,
}

/// Gradient buffer shaped like [`RankerParams`].
#[derive(Debug, Clone)]
pub struct RankerGrad {
    pub head: MlpParams,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl RankerGrad {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.head.flatten();
        v.extend(&self.a);
        v.extend(&self.b);
        v
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankerProvenance {
    pub corpus_hash: String,
    pub encoder_hash: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    mode: LossMode,
    d_in: usize,
    hidden: usize,
    d_emb: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    provenance: RankerProvenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankerConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub p_neg: f64,
    pub hidden: usize,
    pub d_emb: usize,
    /// Validation cutoffs, applied within each validation query's scored
    /// candidates; the first selects the checkpoint.
    pub val_ls: Vec<usize>,
    pub seed: u64,
}

impl Default for RankerConfig {
    fn default() -> Self {
        RankerConfig {
            epochs: 10,
            batch: 64,
            lr: 1e-3,
            weight_decay: 0.01,
            p_neg: 0.1,
            hidden: 128,
            d_emb: 64,
            val_ls: vec![10],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_map: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub val_ls: Vec<usize>,
    pub epochs: Vec<EpochLog>,
    /// Epoch (1-based) of the returned checkpoint.
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss");
        for l in &self.val_ls {
            s.push_str(&format!(",val_map_{l}"));
        }
        s.push('\n');
        for e in &self.epochs {
            s.push_str(&format!("{},{}", e.epoch, e.train_loss));
            for v in &e.val_map {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Base features the ranker trains on.
pub struct RankerInputs<'a> {
    pub corpus: &'a Corpus,
    /// Training-set base features, one row per candidate id.
    pub store: &'a FeatureStore,
    /// Base feature of every corpus query, by query id.
    pub queries: &'a HashMap<usize, Vec<f64>>,
}

impl RankerInputs<'_> {
    fn query(&self, id: usize) -> Result<&[f64]> {
        self.queries
            .get(&id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Precondition(format!("no base feature for query {id}")))
    }
}

fn val_map(r: &RankerParams, inputs: &RankerInputs, rows: &HashMap<usize, usize>, ls: &[usize]) -> Result<Vec<f64>> {
    let val = &inputs.corpus.manifest.val;
    let mut sums = vec![0.0; ls.len()];
    for &qid in val {
        let q = inputs.corpus.get(qid).expect("val query in corpus");
        let fq = r.embed(inputs.query(qid)?)?;
        let truth: Vec<usize> = q.records.iter().map(|rec| rec.candidate_id).collect();
        let mut scored: Vec<(usize, f64)> = truth
            .iter()
            .map(|&id| Ok((id, dot(&fq, &r.embed(inputs.store.vectors.row(rows[&id]))?))))
            .collect::<Result<_>>()?;
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let pred: Vec<usize> = scored.iter().map(|s| s.0).collect();
        for (sum, &l) in sums.iter_mut().zip(ls) {
            *sum += map_at_l(&pred, &truth, l.min(truth.len()))?;
        }
    }
    Ok(sums.iter().map(|s| s / val.len() as f64).collect())
}

/// Trains the head with AdamW; returns the best-validation checkpoint.
pub fn train_ranker(inputs: &RankerInputs, mode: LossMode, cfg: &RankerConfig) -> Result<(RankerParams, TrainLog)> {
    if cfg.batch == 0 || cfg.epochs == 0 {
        return Err(Error::Precondition("epochs and batch must be positive".into()));
    }
    let corpus = inputs.corpus;
    if corpus.manifest.train.is_empty() {
        return Err(Error::Precondition("corpus has no training queries".into()));
    }
    let rows: HashMap<usize, usize> = inputs.store.ids.iter().enumerate().map(|(r, &id)| (id, r)).collect();
    for q in &corpus.queries {
        inputs.query(q.query.id)?;
        if let Some(bad) = q.records.iter().find(|r| !rows.contains_key(&r.candidate_id)) {
            return Err(Error::Precondition(format!(
                "candidate {} not in feature store",
                bad.candidate_id
            )));
        }
    }
    let root = Rng::new(cfg.seed);
    let mut params = RankerParams::init(
        inputs.store.dim(),
        cfg.hidden,
        cfg.d_emb,
        mode,
        &mut root.child_named("init"),
    );
    let sampler = BatchSampler::new(corpus, &corpus.manifest.train, &inputs.store.ids)?;
    let calib = sampler.sample(CALIBRATION_PAIRS, cfg.p_neg, &mut root.child_named("calibrate"))?;
    let calib: Vec<(f64, f64)> = calib
        .iter()
        .map(|item| {
            let r = params.rank_score(
                inputs.query(item.query_id)?,
                inputs.store.vectors.row(rows[&item.candidate_id]),
            )?;
            Ok((r, item.pi))
        })
        .collect::<Result<_>>()?;
    params.calibrate_readout(&calib)?;
    let steps = sampler.pair_count().div_ceil(cfg.batch);
    let mut opt = AdamWState::new(
        params.param_count(),
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    );
    let mut rng = root.child_named("batches");
    let mut flat = params.to_flat();
    let mut log = TrainLog {
        val_ls: cfg.val_ls.clone(),
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
    };
    let mut best: Option<(f64, RankerParams)> = None;
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for step in 0..steps {
            let batch = sampler.sample(cfg.batch, cfg.p_neg, &mut rng)?;
            let mut grad = params.zero_grad();
            let w = 1.0 / batch.len() as f64;
            let mut loss = 0.0;
            for item in &batch {
                let u = inputs.query(item.query_id)?;
                let v = inputs.store.vectors.row(rows[&item.candidate_id]);
                loss += w * params.accumulate_pair_grad(u, v, item.pi, &mut grad, w)?;
            }
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: Some(step),
                });
            }
            epoch_loss += loss;
            opt.step_flat(&mut flat, &grad.to_flat(), &[])
                .map_err(|_| Error::Diverged {
                    epoch,
                    batch: Some(step),
                })?;
            params.assign_flat(&flat).map_err(|_| Error::Diverged {
                epoch,
                batch: Some(step),
            })?;
        }
        let val = if corpus.manifest.val.is_empty() || cfg.val_ls.is_empty() {
            Vec::new()
        } else {
            val_map(&params, inputs, &rows, &cfg.val_ls)?
        };
        // without validation data the last epoch wins
        let score = val.first().copied().unwrap_or(epoch as f64);
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, params.clone()));
            log.best_epoch = epoch + 1;
        }
        log.epochs.push(EpochLog {
            epoch: epoch + 1,
            train_loss: epoch_loss / steps as f64,
            val_map: val,
        });
    }
    Ok((best.expect("at least one epoch").1, log))
}
