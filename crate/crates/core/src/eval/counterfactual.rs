use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{mean_and_se, sign_test};
use crate::diffusion::{
    ddim_sample, mc_loss, train_model, DenoiserParams, McPlan, SynthQuery, TrainConfig, TrainExample,
};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, dot, norm2, Rng};
use crate::retrieval::BaseEncoder;

/// Everything a removal experiment holds fixed.
pub struct RemovalContext<'a> {
    pub data: &'a [TrainExample],
    pub train: &'a TrainConfig,
    pub encoder: &'a BaseEncoder,
    /// Loss plan for the query; pinned across all retrains.
    pub eval_plan: McPlan,
    pub ddim_steps: usize,
}

/// Change in a query's loss and regeneration after removing examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemovalEffect {
    pub delta_loss: f64,
    pub delta_gen_mse: f64,
    /// Cosine similarity of regenerated and reference images in the frozen
    /// feature space; lower means more deviation.
    pub gen_feat_cos: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualRow {
    pub query_id: usize,
    pub k: usize,
    pub seed: u64,
    pub method: String,
    #[serde(flatten)]
    pub effect: RemovalEffect,
}

/// A full-data model for one seed and what it generates for each query.
pub struct Reference {
    pub seed: u64,
    pub theta: DenoiserParams,
}

impl RemovalContext<'_> {
    fn sched(&self) -> Result<crate::diffusion::NoiseSchedule> {
        self.train.schedule.build()
    }

    /// Trains the full-data model for `seed`.
    pub fn reference(&self, seed: u64) -> Result<Reference> {
        Ok(Reference {
            seed,
            theta: train_model(self.data, self.train, seed)?,
        })
    }

    fn feature(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.encoder.project(x)
    }

    /// Measures one model against the reference on one query.
    pub fn effect(&self, reference: &Reference, theta: &DenoiserParams, query: &SynthQuery) -> Result<RemovalEffect> {
        let sched = self.sched()?;
        let z = query.as_example();
        let plan = self.eval_plan.for_example(query.id);
        let delta_loss = mc_loss(theta, &z, &plan, &sched)? - mc_loss(&reference.theta, &z, &plan, &sched)?;
        let g0 = ddim_sample(&reference.theta, query.c, query.noise_seed, self.ddim_steps, &sched)?;
        let g = ddim_sample(theta, query.c, query.noise_seed, self.ddim_steps, &sched)?;
        let delta_gen_mse = g.iter().zip(&g0).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / g.len() as f64;
        let (f, f0) = (self.feature(&g)?, self.feature(&g0)?);
        let denom = norm2(&f) * norm2(&f0);
        let gen_feat_cos = if denom > 0.0 { dot(&f, &f0) / denom } else { 1.0 };
        Ok(RemovalEffect {
            delta_loss,
            delta_gen_mse,
            gen_feat_cos,
        })
    }

    /// Retrains without `removed` under the reference seed and measures the effect.
    pub fn removal_effect(
        &self,
        reference: &Reference,
        query: &SynthQuery,
        removed: &[usize],
    ) -> Result<RemovalEffect> {
        if removed.len() >= self.data.len() {
            return Err(Error::Precondition(format!(
                "cannot remove {} of {} examples",
                removed.len(),
                self.data.len()
            )));
        }
        let drop: std::collections::HashSet<usize> = removed.iter().copied().collect();
        let kept: Vec<TrainExample> = self.data.iter().filter(|z| !drop.contains(&z.id)).cloned().collect();
        let theta = train_model(&kept, self.train, reference.seed)?;
        self.effect(reference, &theta, query)
    }
}

/// Leave-top-k-out row for one method ranking (most influential first).
pub fn counterfactual_eval(
    ctx: &RemovalContext,
    reference: &Reference,
    method: &str,
    ranking: &[usize],
    query: &SynthQuery,
    k: usize,
) -> Result<CounterfactualRow> {
    if k > ranking.len() {
        return Err(Error::Precondition(format!(
            "k = {k} exceeds the ranking length {}",
            ranking.len()
        )));
    }
    Ok(CounterfactualRow {
        query_id: query.id,
        k,
        seed: reference.seed,
        method: method.to_string(),
        effect: ctx.removal_effect(reference, query, &ranking[..k])?,
    })
}

/// A seeded uniform removal set of size `k`, independent of any method.
pub fn random_removal(ids: &[usize], k: usize, query_id: usize, seed: u64) -> Vec<usize> {
    let rng_seed = derive_seed(derive_seed(seed, query_id as u64), k as u64);
    Rng::new(rng_seed)
        .child_named("random_removal")
        .sample_indices(ids.len(), k)
        .into_iter()
        .map(|i| ids[i])
        .collect()
}

/// Method-vs-random comparison at one `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSummary {
    pub k: usize,
    pub pairs: usize,
    pub method_loss: (f64, f64),
    pub random_loss: (f64, f64),
    pub method_gen_mse: (f64, f64),
    pub random_gen_mse: (f64, f64),
    pub method_feat_cos: (f64, f64),
    pub random_feat_cos: (f64, f64),
    /// Pairs where the method beats random, and the one-sided sign-test p.
    pub loss_wins: usize,
    pub loss_p: f64,
    pub gen_mse_wins: usize,
    pub gen_mse_p: f64,
    pub feat_wins: usize,
    pub feat_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<CounterfactualRow>,
    pub summary: Vec<KSummary>,
}

impl CounterfactualReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("query_id,k,seed,method,delta_loss,delta_gen_mse,gen_feat_cos\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.query_id, r.k, r.seed, r.method, r.effect.delta_loss, r.effect.delta_gen_mse, r.effect.gen_feat_cos
            ));
        }
        s
    }
}

fn summarize(rows: &[CounterfactualRow], method: &str, k: usize) -> KSummary {
    let pick = |m: &str| -> Vec<&CounterfactualRow> { rows.iter().filter(|r| r.k == k && r.method == m).collect() };
    let (ours, rand) = (pick(method), pick("random"));
    let paired: Vec<(&CounterfactualRow, &CounterfactualRow)> = ours
        .iter()
        .filter_map(|a| {
            rand.iter()
                .find(|b| b.query_id == a.query_id && b.seed == a.seed)
                .map(|b| (*a, *b))
        })
        .collect();
    let stat = |f: &dyn Fn(&RemovalEffect) -> f64, side: usize| {
        let v: Vec<f64> = paired
            .iter()
            .map(|(a, b)| f(if side == 0 { &a.effect } else { &b.effect }))
            .collect();
        mean_and_se(&v)
    };
    let diffs = |f: &dyn Fn(&RemovalEffect) -> f64| -> Vec<f64> {
        paired.iter().map(|(a, b)| f(&a.effect) - f(&b.effect)).collect()
    };
    let (loss_wins, _, loss_p) = sign_test(&diffs(&|e| e.delta_loss));
    let (gen_mse_wins, _, gen_mse_p) = sign_test(&diffs(&|e| e.delta_gen_mse));
    let (feat_wins, _, feat_p) = sign_test(&diffs(&|e| -e.gen_feat_cos));
    KSummary {
        k,
        pairs: paired.len(),
        method_loss: stat(&|e| e.delta_loss, 0),
        random_loss: stat(&|e| e.delta_loss, 1),
        method_gen_mse: stat(&|e| e.delta_gen_mse, 0),
        random_gen_mse: stat(&|e| e.delta_gen_mse, 1),
        method_feat_cos: stat(&|e| e.gen_feat_cos, 0),
        random_feat_cos: stat(&|e| e.gen_feat_cos, 1),
        loss_wins,
        loss_p,
        gen_mse_wins,
        gen_mse_p,
        feat_wins,
        feat_p,
    }
}

/// Runs every `(query, k, seed)` removal for `method` and for random removal.
/// `rankings[i]` orders the training ids for `queries[i]`.
pub fn counterfactual_grid(
    ctx: &RemovalContext,
    method: &str,
    queries: &[SynthQuery],
    rankings: &[Vec<usize>],
    ks: &[usize],
    seeds: &[u64],
) -> Result<CounterfactualReport> {
    if queries.len() != rankings.len() {
        return Err(Error::dim(
            "counterfactual_grid rankings",
            queries.len(),
            rankings.len(),
        ));
    }
    if method == "random" {
        return Err(Error::Precondition("`random` is reserved for the baseline".into()));
    }
    let ids: Vec<usize> = ctx.data.iter().map(|z| z.id).collect();
    let references: Vec<Reference> = seeds.par_iter().map(|&s| ctx.reference(s)).collect::<Result<_>>()?;
    let mut jobs = Vec::new();
    for (qi, q) in queries.iter().enumerate() {
        for &k in ks {
            for ri in 0..references.len() {
                jobs.push((qi, q, k, ri, true));
                jobs.push((qi, q, k, ri, false));
            }
        }
    }
    let rows: Vec<CounterfactualRow> = jobs
        .par_iter()
        .map(|&(qi, q, k, ri, ours)| {
            let r = &references[ri];
            if ours {
                counterfactual_eval(ctx, r, method, &rankings[qi], q, k)
            } else {
                let removed = random_removal(&ids, k, q.id, r.seed);
                Ok(CounterfactualRow {
                    query_id: q.id,
                    k,
                    seed: r.seed,
                    method: "random".into(),
                    effect: ctx.removal_effect(r, q, &removed)?,
                })
            }
        })
        .collect::<Result<_>>()?;
    let summary = ks.iter().map(|&k| summarize(&rows, method, k)).collect();
    Ok(CounterfactualReport {
        seeds: seeds.to_vec(),
        rows,
        summary,
    })
}
