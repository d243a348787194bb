//! The attribution teacher: one-step Newton unlearning of a generated query,
//! scored by the loss change it induces on each training candidate.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{mc_loss, mc_loss_grad, DenoiserParams, McPlan, NoiseSchedule, SynthQuery, TrainExample};
use crate::error::{Error, Result};
use crate::fisher::{FisherApprox, FisherKind};
use crate::numerics::{dot, norm2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateScope {
    AllParams,
    ConditionPathway,
}

impl std::str::FromStr for UpdateScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" | "all_params" => Ok(UpdateScope::AllParams),
            "cond" | "condition_pathway" => Ok(UpdateScope::ConditionPathway),
            _ => Err(Error::Precondition(format!("unknown update scope `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnConfig {
    /// Newton step size α; the applied step is `α / N`.
    pub step_size: f64,
    pub train_count: usize,
    pub fisher: FisherKind,
    pub update_scope: UpdateScope,
    pub grad_plan: McPlan,
    pub eval_plan: McPlan,
}

impl UnlearnConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::Precondition(format!(
                "step size must be ≥ 0, got {}",
                self.step_size
            )));
        }
        if self.train_count == 0 {
            return Err(Error::Precondition("train_count must be ≥ 1".into()));
        }
        self.grad_plan.validate(steps)?;
        self.eval_plan.validate(steps)
    }
}

/// One scored `(query, candidate)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    #[serde(rename = "q")]
    pub query_id: usize,
    #[serde(rename = "c")]
    pub candidate_id: usize,
    pub tau: f64,
    pub pi: f64,
}

/// Zeroes the entries of `v` outside `scope`.
pub fn mask_to_scope(theta: &DenoiserParams, scope: UpdateScope, v: &mut [f64]) {
    if scope == UpdateScope::AllParams {
        return;
    }
    for b in theta.arch.blocks() {
        if !b.cond_pathway {
            v[b.range()].iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

fn check_fisher(theta: &DenoiserParams, f: &FisherApprox) -> Result<()> {
    if f.blocks != theta.arch.blocks() {
        return Err(Error::Precondition("Fisher blocks do not match the model".into()));
    }
    Ok(())
}

/// `θ0 + (α/N) F⁻¹ ∇L(ẑ)` within the update scope; other parameters are copied.
pub fn unlearn(
    theta0: &DenoiserParams,
    query: &SynthQuery,
    fisher: &FisherApprox,
    cfg: &UnlearnConfig,
    sched: &NoiseSchedule,
) -> Result<DenoiserParams> {
    cfg.validate(sched.steps())?;
    check_fisher(theta0, fisher)?;
    if cfg.step_size == 0.0 {
        return Ok(theta0.clone());
    }
    let mut g = mc_loss_grad(theta0, &query.as_example(), &cfg.grad_plan, sched)?;
    mask_to_scope(theta0, cfg.update_scope, &mut g);
    let step = fisher.inv_vprod(&g)?;
    let scale = cfg.step_size / cfg.train_count as f64;
    let mut flat = theta0.to_flat();
    for b in theta0.arch.blocks() {
        if cfg.update_scope == UpdateScope::ConditionPathway && !b.cond_pathway {
            continue;
        }
        for k in b.range() {
            flat[k] += scale * step[k];
        }
    }
    DenoiserParams::from_flat(&theta0.arch, &flat)
}

/// `‖θ_u − θ0‖ / ‖θ0‖`.
pub fn relative_change(theta0: &DenoiserParams, theta_u: &DenoiserParams) -> f64 {
    let a = theta0.to_flat();
    let b = theta_u.to_flat();
    let diff: Vec<f64> = b.iter().zip(&a).map(|(x, y)| x - y).collect();
    norm2(&diff) / norm2(&a)
}

/// `τ_i = L(z_i; θ_u) − L(z_i; θ0)` with each candidate's own pinned plan.
pub fn attribution_scores(
    theta0: &DenoiserParams,
    theta_u: &DenoiserParams,
    candidates: &[TrainExample],
    eval_plan: &McPlan,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    candidates
        .par_iter()
        .map(|z| {
            let plan = eval_plan.for_example(z.id);
            Ok(mc_loss(theta_u, z, &plan, sched)? - mc_loss(theta0, z, &plan, sched)?)
        })
        .collect()
}

/// Sorts by `τ` descending (ties by ascending id) and assigns `π = rank / K`.
pub fn rank_normalize(query_id: usize, scored: &[(usize, f64)]) -> Vec<AttributionRecord> {
    let mut order: Vec<&(usize, f64)> = scored.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let k = order.len() as f64;
    order
        .iter()
        .enumerate()
        .map(|(r, &&(id, tau))| AttributionRecord {
            query_id,
            candidate_id: id,
            tau,
            pi: (r + 1) as f64 / k,
        })
        .collect()
}

/// A scoring teacher bound to one base model; caches candidate losses under θ0.
pub struct Teacher<'a> {
    pub theta0: &'a DenoiserParams,
    pub fisher: &'a FisherApprox,
    pub cfg: UnlearnConfig,
    pub sched: &'a NoiseSchedule,
    by_id: HashMap<usize, &'a TrainExample>,
    base: HashMap<usize, f64>,
}

impl<'a> Teacher<'a> {
    pub fn new(
        theta0: &'a DenoiserParams,
        fisher: &'a FisherApprox,
        cfg: UnlearnConfig,
        sched: &'a NoiseSchedule,
        data: &'a [TrainExample],
    ) -> Result<Self> {
        cfg.validate(sched.steps())?;
        check_fisher(theta0, fisher)?;
        Ok(Teacher {
            theta0,
            fisher,
            cfg,
            sched,
            by_id: data.iter().map(|z| (z.id, z)).collect(),
            base: HashMap::new(),
        })
    }

    fn lookup(&self, ids: &[usize]) -> Result<Vec<&'a TrainExample>> {
        ids.iter()
            .map(|id| {
                self.by_id
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Precondition(format!("unknown candidate id {id}")))
            })
            .collect()
    }

    fn base_losses(&mut self, ids: &[usize]) -> Result<Vec<f64>> {
        let missing: Vec<&TrainExample> = self
            .lookup(ids)?
            .into_iter()
            .filter(|z| !self.base.contains_key(&z.id))
            .collect();
        let (theta0, plan, sched) = (self.theta0, &self.cfg.eval_plan, self.sched);
        let fresh: Vec<(usize, f64)> = missing
            .par_iter()
            .map(|z| Ok((z.id, mc_loss(theta0, z, &plan.for_example(z.id), sched)?)))
            .collect::<Result<_>>()?;
        self.base.extend(fresh);
        Ok(ids.iter().map(|id| self.base[id]).collect())
    }

    /// Raw `τ` for each candidate id, in input order.
    pub fn scores(&mut self, query: &SynthQuery, ids: &[usize]) -> Result<Vec<f64>> {
        let theta_u = unlearn(self.theta0, query, self.fisher, &self.cfg, self.sched)?;
        let base = self.base_losses(ids)?;
        let cands = self.lookup(ids)?;
        let (plan, sched) = (&self.cfg.eval_plan, self.sched);
        let after: Vec<f64> = cands
            .par_iter()
            .map(|z| mc_loss(&theta_u, z, &plan.for_example(z.id), sched))
            .collect::<Result<_>>()?;
        Ok(after.iter().zip(&base).map(|(a, b)| a - b).collect())
    }

    pub fn rank(&mut self, query: &SynthQuery, ids: &[usize]) -> Result<Vec<AttributionRecord>> {
        if ids.is_empty() {
            return Err(Error::Precondition("no candidates to rank".into()));
        }
        let tau = self.scores(query, ids)?;
        let scored: Vec<(usize, f64)> = ids.iter().copied().zip(tau).collect();
        Ok(rank_normalize(query.id, &scored))
    }
}

/// Anything that assigns raw attribution scores to candidate ids for a query;
/// larger means more influential.
pub trait CandidateScorer {
    fn score(&mut self, query: &SynthQuery, ids: &[usize]) -> Result<Vec<f64>>;
}

impl CandidateScorer for Teacher<'_> {
    fn score(&mut self, query: &SynthQuery, ids: &[usize]) -> Result<Vec<f64>> {
        self.scores(query, ids)
    }
}

/// Influence-function scorer, the cheaper alternative teacher.
pub struct InfluenceScorer<'a> {
    pub theta0: &'a DenoiserParams,
    pub fisher: &'a FisherApprox,
    pub grad_plan: McPlan,
    pub scope: UpdateScope,
    pub sched: &'a NoiseSchedule,
    by_id: HashMap<usize, &'a TrainExample>,
}

impl<'a> InfluenceScorer<'a> {
    pub fn new(
        theta0: &'a DenoiserParams,
        fisher: &'a FisherApprox,
        grad_plan: McPlan,
        scope: UpdateScope,
        sched: &'a NoiseSchedule,
        data: &'a [TrainExample],
    ) -> Result<Self> {
        grad_plan.validate(sched.steps())?;
        check_fisher(theta0, fisher)?;
        Ok(InfluenceScorer {
            theta0,
            fisher,
            grad_plan,
            scope,
            sched,
            by_id: data.iter().map(|z| (z.id, z)).collect(),
        })
    }
}

impl CandidateScorer for InfluenceScorer<'_> {
    fn score(&mut self, query: &SynthQuery, ids: &[usize]) -> Result<Vec<f64>> {
        let cands: Vec<TrainExample> = ids
            .iter()
            .map(|id| {
                self.by_id
                    .get(id)
                    .map(|z| (*z).clone())
                    .ok_or_else(|| Error::Precondition(format!("unknown candidate id {id}")))
            })
            .collect::<Result<_>>()?;
        influence_scores(
            self.theta0,
            query,
            &cands,
            self.fisher,
            &self.grad_plan,
            self.scope,
            self.sched,
        )
    }
}

/// Scores and ranks `candidate_ids` for one query.
pub fn abu_rank(
    query: &SynthQuery,
    candidate_ids: &[usize],
    data: &[TrainExample],
    theta0: &DenoiserParams,
    fisher: &FisherApprox,
    cfg: &UnlearnConfig,
    sched: &NoiseSchedule,
) -> Result<Vec<AttributionRecord>> {
    Teacher::new(theta0, fisher, cfg.clone(), sched, data)?.rank(query, candidate_ids)
}

/// `⟨∇L(ẑ), F⁻¹ ∇L(z_i)⟩` restricted to the update scope.
#[allow(clippy::too_many_arguments)]
pub fn influence_scores(
    theta0: &DenoiserParams,
    query: &SynthQuery,
    candidates: &[TrainExample],
    fisher: &FisherApprox,
    grad_plan: &McPlan,
    scope: UpdateScope,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_fisher(theta0, fisher)?;
    let mut gq = mc_loss_grad(theta0, &query.as_example(), grad_plan, sched)?;
    mask_to_scope(theta0, scope, &mut gq);
    // F is symmetric, so ⟨g_q, F⁻¹ g_i⟩ = ⟨F⁻¹ g_q, g_i⟩
    let w = fisher.inv_vprod(&gq)?;
    candidates
        .par_iter()
        .map(|z| {
            let mut gi = mc_loss_grad(theta0, z, &grad_plan.for_example(z.id), sched)?;
            mask_to_scope(theta0, scope, &mut gi);
            Ok(dot(&w, &gi))
        })
        .collect()
}
