//! Distillation corpus: neighbor retrieval, teacher scoring of a candidate
//! subsample, and per-iteration negative sampling.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attribution::{rank_normalize, AttributionRecord, CandidateScorer};
use crate::diffusion::SynthQuery;
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::retrieval::{knn_coarse, knn_exact, CoarseIndex, FeatureStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query: SynthQuery,
    pub neighbor_ids: Vec<usize>,
    pub scored_ids: Vec<usize>,
    pub records: Vec<AttributionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationConfig {
    /// Neighbors retrieved per query.
    pub k: usize,
    /// Fraction `m = M / K` of neighbors sent to the teacher.
    pub subsample_ratio: f64,
    pub p_neg: f64,
    pub train_queries: usize,
    pub val_queries: usize,
    /// Use the coarse index (when one is supplied) instead of exact search.
    pub coarse: bool,
    pub seed: u64,
}

impl CurationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Precondition("K must be ≥ 1".into()));
        }
        if !(self.subsample_ratio > 0.0 && self.subsample_ratio <= 1.0) {
            return Err(Error::Precondition(format!(
                "subsample ratio must be in (0, 1], got {}",
                self.subsample_ratio
            )));
        }
        if !(0.0..1.0).contains(&self.p_neg) {
            return Err(Error::Precondition(format!(
                "p_neg must be in [0, 1), got {}",
                self.p_neg
            )));
        }
        Ok(())
    }

    /// `M = ⌈m·K⌉`.
    pub fn scored_count(&self) -> usize {
        subsample_count(self.subsample_ratio, self.k)
    }
}

fn subsample_count(ratio: f64, k: usize) -> usize {
    // guard against 0.2 * 200 = 40.000000000000004
    (((ratio * k as f64) - 1e-9).ceil() as usize).clamp(1, k)
}

/// Retrieves `K` neighbors, scores a seeded `M`-subset with `teacher` and
/// ranks it.
pub fn curate_query(
    query: &SynthQuery,
    query_feature: &[f64],
    store: &FeatureStore,
    index: Option<&CoarseIndex>,
    teacher: &mut dyn CandidateScorer,
    cfg: &CurationConfig,
) -> Result<QueryRecord> {
    cfg.validate()?;
    if cfg.k > store.len() {
        return Err(Error::Precondition(format!(
            "K = {} exceeds the dataset size {}",
            cfg.k,
            store.len()
        )));
    }
    let hits = match index {
        Some(ix) if cfg.coarse => knn_coarse(ix, store, query_feature, cfg.k)?.hits,
        _ => knn_exact(store, query_feature, cfg.k)?,
    };
    let neighbor_ids: Vec<usize> = hits.iter().map(|h| h.0).collect();
    let m = subsample_count(cfg.subsample_ratio, neighbor_ids.len());
    let mut scored_ids: Vec<usize> = if m == neighbor_ids.len() {
        neighbor_ids.clone()
    } else {
        Rng::new(cfg.seed)
            .child_named("subsample")
            .child(query.id as u64)
            .sample_indices(neighbor_ids.len(), m)
            .into_iter()
            .map(|i| neighbor_ids[i])
            .collect()
    };
    if m < neighbor_ids.len() {
        scored_ids.sort_unstable();
    }
    let tau = teacher.score(query, &scored_ids)?;
    let scored: Vec<(usize, f64)> = scored_ids.iter().copied().zip(tau).collect();
    Ok(QueryRecord {
        query: query.clone(),
        neighbor_ids,
        scored_ids,
        records: rank_normalize(query.id, &scored),
    })
}

/// Provenance written into the corpus manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config: CurationConfig,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub dataset_hash: String,
    pub model_hash: String,
    pub record_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    /// Sorted by query id.
    pub queries: Vec<QueryRecord>,
}

#[derive(Serialize, Deserialize)]
struct NeighborFile {
    query: SynthQuery,
    neighbors: Vec<usize>,
    scored: Vec<usize>,
}

impl Corpus {
    pub fn get(&self, query_id: usize) -> Option<&QueryRecord> {
        self.queries
            .binary_search_by_key(&query_id, |q| q.query.id)
            .ok()
            .map(|i| &self.queries[i])
    }

    pub fn record_count(&self) -> usize {
        self.queries.iter().map(|q| q.records.len()).sum()
    }

    /// Writes `manifest.json`, `q_<id>.jsonl` and `neighbors_<id>.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for q in &self.queries {
            let mut lines = String::new();
            for r in &q.records {
                lines.push_str(&serde_json::to_string(r)?);
                lines.push('\n');
            }
            fs::write(dir.join(format!("q_{}.jsonl", q.query.id)), lines)?;
            let nf = NeighborFile {
                query: q.query.clone(),
                neighbors: q.neighbor_ids.clone(),
                scored: q.scored_ids.clone(),
            };
            fs::write(
                dir.join(format!("neighbors_{}.json", q.query.id)),
                serde_json::to_vec(&nf)?,
            )?;
        }
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CorpusManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let mut ids: Vec<usize> = manifest.train.iter().chain(&manifest.val).copied().collect();
        ids.sort_unstable();
        let mut queries = Vec::with_capacity(ids.len());
        for id in ids {
            let nf: NeighborFile = serde_json::from_slice(&fs::read(dir.join(format!("neighbors_{id}.json")))?)?;
            let text = fs::read_to_string(dir.join(format!("q_{id}.jsonl")))?;
            let records = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect::<std::result::Result<Vec<AttributionRecord>, _>>()?;
            queries.push(QueryRecord {
                query: nf.query,
                neighbor_ids: nf.neighbors,
                scored_ids: nf.scored,
                records,
            });
        }
        let corpus = Corpus { manifest, queries };
        if corpus.record_count() != corpus.manifest.record_count {
            return Err(Error::Format(format!(
                "corpus holds {} records, manifest says {}",
                corpus.record_count(),
                corpus.manifest.record_count
            )));
        }
        Ok(corpus)
    }
}

/// Seeded disjoint train/val split of `ids`.
pub fn split_ids(ids: &[usize], train: usize, val: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if train + val > ids.len() {
        return Err(Error::Precondition(format!(
            "split {train}+{val} exceeds {} queries",
            ids.len()
        )));
    }
    let mut order = ids.to_vec();
    order.sort_unstable();
    Rng::new(seed).child_named("split").shuffle(&mut order);
    let mut tr = order[..train].to_vec();
    let mut va = order[train..train + val].to_vec();
    tr.sort_unstable();
    va.sort_unstable();
    Ok((tr, va))
}

/// Curates every query and assigns the split. `features[i]` is the base
/// feature of `queries[i]`.
#[allow(clippy::too_many_arguments)]
pub fn curate_corpus(
    queries: &[SynthQuery],
    features: &[Vec<f64>],
    store: &FeatureStore,
    index: Option<&CoarseIndex>,
    teacher: &mut dyn CandidateScorer,
    cfg: &CurationConfig,
    dataset_hash: &str,
    model_hash: &str,
) -> Result<Corpus> {
    if queries.is_empty() {
        return Err(Error::Precondition("no queries to curate".into()));
    }
    if features.len() != queries.len() {
        return Err(Error::dim("curate_corpus features", queries.len(), features.len()));
    }
    let ids: Vec<usize> = queries.iter().map(|q| q.id).collect();
    if ids.iter().collect::<HashSet<_>>().len() != ids.len() {
        return Err(Error::Precondition("query ids must be unique".into()));
    }
    let (train, val) = split_ids(&ids, cfg.train_queries, cfg.val_queries, cfg.seed)?;
    let keep: HashSet<usize> = train.iter().chain(&val).copied().collect();
    let mut out = Vec::with_capacity(keep.len());
    for (q, f) in queries.iter().zip(features) {
        if keep.contains(&q.id) {
            out.push(curate_query(q, f, store, index, teacher, cfg)?);
        }
    }
    out.sort_by_key(|q| q.query.id);
    let record_count = out.iter().map(|q| q.records.len()).sum();
    Ok(Corpus {
        manifest: CorpusManifest {
            config: cfg.clone(),
            train,
            val,
            dataset_hash: dataset_hash.to_string(),
            model_hash: model_hash.to_string(),
            record_count,
        },
        queries: out,
    })
}

/// One training target for the ranker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchItem {
    pub query_id: usize,
    pub candidate_id: usize,
    pub pi: f64,
    pub negative: bool,
}

/// Draws ranker training pairs from a fixed set of corpus queries.
pub struct BatchSampler<'a> {
    queries: Vec<&'a QueryRecord>,
    neighbors: Vec<HashSet<usize>>,
    universe: Vec<usize>,
    pairs: Vec<(usize, usize)>,
}

impl<'a> BatchSampler<'a> {
    /// `universe` lists every training id eligible as a negative.
    pub fn new(corpus: &'a Corpus, query_ids: &[usize], universe: &[usize]) -> Result<Self> {
        let queries: Vec<&QueryRecord> = query_ids
            .iter()
            .map(|&id| {
                corpus
                    .get(id)
                    .ok_or_else(|| Error::Precondition(format!("query {id} not in corpus")))
            })
            .collect::<Result<_>>()?;
        let pairs: Vec<(usize, usize)> = queries
            .iter()
            .enumerate()
            .flat_map(|(qi, q)| (0..q.records.len()).map(move |ri| (qi, ri)))
            .collect();
        if pairs.is_empty() {
            return Err(Error::Precondition("corpus has no records to sample".into()));
        }
        Ok(BatchSampler {
            neighbors: queries
                .iter()
                .map(|q| q.neighbor_ids.iter().copied().collect())
                .collect(),
            queries,
            universe: universe.to_vec(),
            pairs,
        })
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    /// Each slot is a negative with probability `p_neg`, otherwise a uniform
    /// stored `(query, candidate)` pair.
    pub fn sample(&self, batch: usize, p_neg: f64, rng: &mut Rng) -> Result<Vec<BatchItem>> {
        if !(0.0..=1.0).contains(&p_neg) {
            return Err(Error::Precondition(format!("p_neg must be in [0, 1], got {p_neg}")));
        }
        let mut out = Vec::with_capacity(batch);
        for _ in 0..batch {
            if p_neg > 0.0 && rng.bernoulli(p_neg) {
                let qi = rng.below(self.queries.len());
                let nb = &self.neighbors[qi];
                if self.universe.iter().all(|id| nb.contains(id)) {
                    return Err(Error::Precondition(format!(
                        "query {} neighbors cover the training set; no negative exists",
                        self.queries[qi].query.id
                    )));
                }
                let cand = loop {
                    let c = self.universe[rng.below(self.universe.len())];
                    if !nb.contains(&c) {
                        break c;
                    }
                };
                out.push(BatchItem {
                    query_id: self.queries[qi].query.id,
                    candidate_id: cand,
                    pi: 1.0,
                    negative: true,
                });
            } else {
                let (qi, ri) = self.pairs[rng.below(self.pairs.len())];
                let r = &self.queries[qi].records[ri];
                out.push(BatchItem {
                    query_id: r.query_id,
                    candidate_id: r.candidate_id,
                    pi: r.pi,
                    negative: false,
                });
            }
        }
        Ok(out)
    }
}

/// One batch from `corpus` restricted to `query_ids`.
pub fn sample_batch(
    corpus: &Corpus,
    query_ids: &[usize],
    universe: &[usize],
    batch: usize,
    p_neg: f64,
    rng: &mut Rng,
) -> Result<Vec<BatchItem>> {
    BatchSampler::new(corpus, query_ids, universe)?.sample(batch, p_neg, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scored_count_rounds_up() {
        assert_eq!(subsample_count(0.2, 200), 40);
        assert_eq!(subsample_count(1.0, 200), 200);
        assert_eq!(subsample_count(0.001, 10), 1);
        assert_eq!(subsample_count(0.25, 10), 3);
    }

    #[test]
    fn split_is_disjoint_cover() {
        let ids: Vec<usize> = (0..50).collect();
        let (tr, va) = split_ids(&ids, 45, 5, 3).unwrap();
        let all: HashSet<usize> = tr.iter().chain(&va).copied().collect();
        assert_eq!(all.len(), 50);
        assert!(split_ids(&ids, 45, 6, 3).is_err());
    }
}
