//! Pipeline stages over a run directory.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use fastattrib::attribution::{CandidateScorer, InfluenceScorer, Teacher, UnlearnConfig};
use fastattrib::curation::{curate_corpus, Corpus, CurationConfig};
use fastattrib::diffusion::store::{load_dataset, load_model, save_dataset, save_model};
use fastattrib::diffusion::{
    generate_queries, make_dataset_with, train_model, DatasetConfig, DenoiserArch, DenoiserParams, McPlan,
    NoiseSchedule, ScheduleConfig, SynthQuery, TrainConfig, TrainExample,
};
use fastattrib::eval::{
    bench, counterfactual_grid, fatn_bytes, map_at_l, mean_and_se, order_spearman, CounterfactualReport, KSummary,
    LatencyStats, RemovalContext,
};
use fastattrib::fisher::{
    collect_samples, diag_from_samples, ekfac_from_samples, kfac_from_samples, FisherApprox, FisherKind, FisherPlan,
};
use fastattrib::ranker::{train_ranker, RankerConfig, RankerInputs, RankerParams, RankerProvenance};
use fastattrib::retrieval::{
    build_index, default_cells, fit_encoder, knn_coarse, knn_exact, rank_all, BaseEncoder, CoarseIndex, FeatureStore,
};

use crate::config::{RunConfig, TeacherKind};
use crate::stamp::{changed, hash_path, Stamp};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{0}")]
    Precondition(String),
    #[error("upstream artifacts of {stage} changed since they were produced:\n{diff}")]
    HashMismatch { stage: String, diff: String },
    #[error(transparent)]
    Core(#[from] fastattrib::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    pub fn is_numeric(&self) -> bool {
        matches!(self, PipelineError::Core(e) if e.is_numeric())
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    MakeData,
    TrainModel,
    GenQueries,
    FitEncoder,
    FitFisher,
    Curate,
    TrainRanker,
    EvalRank,
    EvalCounterfactual,
    Bench,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 11] = [
        Stage::MakeData,
        Stage::TrainModel,
        Stage::GenQueries,
        Stage::FitEncoder,
        Stage::FitFisher,
        Stage::Curate,
        Stage::TrainRanker,
        Stage::EvalRank,
        Stage::EvalCounterfactual,
        Stage::Bench,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::MakeData => "make-data",
            Stage::TrainModel => "train-model",
            Stage::GenQueries => "gen-queries",
            Stage::FitEncoder => "fit-encoder",
            Stage::FitFisher => "fit-fisher",
            Stage::Curate => "curate",
            Stage::TrainRanker => "train-ranker",
            Stage::EvalRank => "eval-rank",
            Stage::EvalCounterfactual => "eval-counterfactual",
            Stage::Bench => "bench",
            Stage::Report => "report",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn deps(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            MakeData => &[],
            TrainModel => &[MakeData],
            GenQueries => &[TrainModel],
            FitEncoder => &[MakeData],
            FitFisher => &[MakeData, TrainModel],
            Curate => &[MakeData, TrainModel, GenQueries, FitEncoder, FitFisher],
            TrainRanker => &[GenQueries, FitEncoder, Curate],
            EvalRank => &[GenQueries, FitEncoder, Curate, TrainRanker],
            EvalCounterfactual => &[MakeData, TrainModel, GenQueries, FitEncoder, Curate],
            Bench => &[MakeData, TrainModel, GenQueries, FitEncoder, FitFisher, TrainRanker],
            Report => &[Curate, TrainRanker, EvalRank, EvalCounterfactual, Bench],
        }
    }

    /// Config keys (exact, or prefixes ending in `.`) the stage reads directly.
    fn keys(self) -> &'static [&'static str] {
        use Stage::*;
        match self {
            MakeData => &["data."],
            TrainModel => &["schedule.", "model.", "train."],
            GenQueries => &["queries."],
            FitEncoder => &["encoder.", "retrieval."],
            FitFisher => &["fisher."],
            Curate => &["teacher", "unlearn.", "curate.", "ranker.p_neg"],
            TrainRanker => &["ranker."],
            EvalRank => &["eval.ls"],
            EvalCounterfactual => &["eval.ks", "eval.retrain_seeds", "eval.cf_queries", "unlearn.eval_"],
            Bench => &["bench.", "unlearn."],
            Report => &[],
        }
    }

    pub fn outputs(self) -> &'static [&'static str] {
        use Stage::*;
        match self {
            MakeData => &["data"],
            TrainModel => &["model"],
            GenQueries => &["queries"],
            FitEncoder => &["encoder"],
            FitFisher => &["fisher"],
            Curate => &["corpus", "truth"],
            TrainRanker => &["ranker", "metrics/ranker_train.csv"],
            EvalRank => &["metrics/rank_eval.csv", "metrics/rank_summary.csv"],
            EvalCounterfactual => &["metrics/counterfactual.csv", "metrics/counterfactual_summary.csv"],
            Bench => &["metrics/bench.csv"],
            Report => &["summary.md"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

/// Seeds of every random choice, derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub model: u64,
    pub fisher: u64,
    pub queries: u64,
    pub test_queries: u64,
    pub grad_plan: u64,
    pub eval_plan: u64,
    pub curation: u64,
    pub encoder: u64,
    pub ranker: u64,
}

impl Seeds {
    pub fn from_master(s: u64) -> Self {
        Seeds {
            data: s.wrapping_add(1),
            model: s,
            fisher: s.wrapping_add(5),
            queries: s.wrapping_add(777),
            test_queries: s.wrapping_add(4242),
            grad_plan: s.wrapping_add(11),
            eval_plan: s.wrapping_add(12),
            curation: s.wrapping_add(5),
            encoder: s,
            ranker: s,
        }
    }
}

/// A test query's full teacher ordering over the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub query_id: usize,
    /// Training ids, most influential first.
    pub ranking: Vec<usize>,
    /// The query's retrieved candidates, in retrieval order.
    pub candidates: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySet {
    pub queries: Vec<SynthQuery>,
    pub test: Vec<SynthQuery>,
}

const DATASET: &str = "data/dataset.fatn";
const MODEL: &str = "model/theta0.fatn";
const QUERIES: &str = "queries/queries.json";
const ENCODER: &str = "encoder/encoder.json";
const FEATURES: &str = "encoder/features.fatn";
const RETRIEVAL_ENCODER: &str = "encoder/retrieval_encoder.json";
const RETRIEVAL_FEATURES: &str = "encoder/retrieval.fatn";
const INDEX: &str = "encoder/index.fatn";
const FISHER: &str = "fisher";
const CORPUS: &str = "corpus";
const TRUTH: &str = "truth/test_truth.json";
const RANKER: &str = "ranker/ranker.fatn";

pub struct Pipeline {
    pub cfg: RunConfig,
    pub dir: PathBuf,
}

impl Pipeline {
    pub fn new(cfg: RunConfig, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("config.txt"), cfg.to_text())?;
        Ok(Pipeline { cfg, dir })
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::from_master(self.cfg.seed)
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn stamp_path(&self, stage: Stage) -> PathBuf {
        self.dir.join("stamps").join(format!("{}.json", stage.name()))
    }

    pub fn stamp(&self, stage: Stage) -> Result<Option<Stamp>> {
        Ok(Stamp::load(&self.stamp_path(stage))?)
    }

    fn stage_hash(&self, stage: Stage) -> String {
        let mut text = String::new();
        for (k, v) in self.cfg.entries() {
            let used = k == "seed"
                || stage
                    .keys()
                    .iter()
                    .any(|p| k == *p || (p.ends_with('.') || p.ends_with('_')) && k.starts_with(p));
            if used {
                let _ = writeln!(text, "{k} = {v}");
            }
        }
        fastattrib::hash::sha256_hex(format!("{}\n{text}", stage.name()).as_bytes())
    }

    /// Hashes of every upstream output, after checking each still matches
    /// the stamp of the stage that produced it.
    fn verified_inputs(&self, stage: Stage) -> Result<BTreeMap<String, String>> {
        let mut inputs = BTreeMap::new();
        let mut diff = String::new();
        for &dep in stage.deps() {
            let stamp = self.stamp(dep)?.ok_or_else(|| {
                PipelineError::Precondition(format!(
                    "{} needs the output of {}, which has not run in {}",
                    stage.name(),
                    dep.name(),
                    self.dir.display()
                ))
            })?;
            for (path, was, now) in changed(&self.dir, &stamp.outputs)? {
                let _ = writeln!(diff, "  {path}: produced by {} as {was}, now {now}", dep.name());
            }
            inputs.extend(stamp.outputs);
        }
        if !diff.is_empty() {
            return Err(PipelineError::HashMismatch {
                stage: stage.name().into(),
                diff,
            });
        }
        Ok(inputs)
    }

    /// Runs one stage unless its stamp shows the same config, inputs and outputs.
    pub fn run_stage(&self, stage: Stage) -> Result<Outcome> {
        let inputs = self.verified_inputs(stage)?;
        let stage_hash = self.stage_hash(stage);
        if let Some(old) = self.stamp(stage)? {
            let same = old.stage_hash == stage_hash && old.inputs == inputs;
            if same && changed(&self.dir, &old.outputs)?.is_empty() {
                log::info!("{}: up to date", stage.name());
                return Ok(Outcome::UpToDate);
            }
            for (k, v) in &inputs {
                if old.inputs.get(k) != Some(v) {
                    log::info!("{}: input {k} changed, rerunning", stage.name());
                }
            }
        }
        let _ = fs::remove_file(self.stamp_path(stage));
        for rel in stage.outputs() {
            let p = self.path(rel);
            if p.is_dir() {
                fs::remove_dir_all(&p)?;
            } else if p.exists() {
                fs::remove_file(&p)?;
            }
            if p.extension().is_none() {
                fs::create_dir_all(&p)?;
            } else if let Some(parent) = p.parent() {
                fs::create_dir_all(parent)?;
            }
        }
        let start = Instant::now();
        match stage {
            Stage::MakeData => self.make_data()?,
            Stage::TrainModel => self.train_model()?,
            Stage::GenQueries => self.gen_queries()?,
            Stage::FitEncoder => self.fit_encoder()?,
            Stage::FitFisher => self.fit_fisher()?,
            Stage::Curate => self.curate(&inputs)?,
            Stage::TrainRanker => self.train_ranker(&inputs)?,
            Stage::EvalRank => self.eval_rank()?,
            Stage::EvalCounterfactual => self.eval_counterfactual()?,
            Stage::Bench => self.bench()?,
            Stage::Report => self.report()?,
        }
        let mut outputs = BTreeMap::new();
        for rel in stage.outputs() {
            let h = hash_path(&self.path(rel))?
                .ok_or_else(|| PipelineError::Precondition(format!("{} did not produce {rel}", stage.name())))?;
            outputs.insert(rel.to_string(), h);
        }
        Stamp {
            stage: stage.name().into(),
            stage_hash,
            config_hash: self.cfg.hash(),
            inputs,
            outputs,
        }
        .save(&self.stamp_path(stage))?;
        log::info!("{}: done in {:.1}s", stage.name(), start.elapsed().as_secs_f64());
        Ok(Outcome::Ran)
    }

    pub fn run_all(&self) -> Result<()> {
        for stage in Stage::ALL {
            self.run_stage(stage)?;
        }
        Ok(())
    }

    // ---- configuration views ----

    pub fn dataset_config(&self) -> DatasetConfig {
        let c = &self.cfg;
        DatasetConfig {
            classes: c.data_classes,
            per_class: c.data_per_class,
            dim: c.data_dim,
            modes_per_class: c.data_modes_per_class,
            prototype_rms: c.data_prototype_rms,
            mode_rms: c.data_mode_rms,
            pixel_noise: c.data_pixel_noise,
            seed: self.seeds().data,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let c = &self.cfg;
        TrainConfig {
            epochs: c.train_epochs,
            batch: c.train_batch,
            lr: c.train_lr,
            weight_decay: c.train_weight_decay,
            adam_eps: c.train_adam_eps,
            cosine_decay: c.train_cosine_decay,
            epoch_batches: Some(c.train_count().div_ceil(c.train_batch.max(1))),
            schedule: ScheduleConfig {
                steps: c.schedule_steps,
                beta_start: c.schedule_beta_start,
                beta_end: c.schedule_beta_end,
            },
            arch: DenoiserArch {
                dim: c.data_dim,
                classes: c.data_classes,
                cond_dim: c.model_cond_dim,
                time_dim: c.model_time_dim,
                hidden: c.model_hidden.clone(),
            },
        }
    }

    pub fn unlearn_config(&self) -> Result<UnlearnConfig> {
        let c = &self.cfg;
        let s = self.seeds();
        Ok(UnlearnConfig {
            step_size: c.unlearn_alpha,
            train_count: c.train_count(),
            fisher: c.fisher_kind,
            update_scope: c.unlearn_scope,
            grad_plan: McPlan::equally_spaced(
                c.schedule_steps,
                c.unlearn_grad_timesteps,
                c.unlearn_grad_noises,
                s.grad_plan,
            )?,
            eval_plan: McPlan::equally_spaced(
                c.schedule_steps,
                c.unlearn_eval_timesteps,
                c.unlearn_eval_noises,
                s.eval_plan,
            )?,
        })
    }

    pub fn curation_config(&self) -> CurationConfig {
        let c = &self.cfg;
        CurationConfig {
            k: c.curate_k,
            subsample_ratio: c.curate_m,
            p_neg: c.ranker_p_neg,
            train_queries: c.queries_train,
            val_queries: c.queries_val,
            coarse: c.retrieval_coarse,
            seed: self.seeds().curation,
        }
    }

    pub fn ranker_config(&self) -> RankerConfig {
        let c = &self.cfg;
        RankerConfig {
            epochs: c.ranker_epochs,
            batch: c.ranker_batch,
            lr: c.ranker_lr,
            weight_decay: c.ranker_weight_decay,
            p_neg: c.ranker_p_neg,
            hidden: c.ranker_hidden,
            d_emb: c.ranker_d_emb,
            val_ls: vec![c.ranker_val_l],
            seed: self.seeds().ranker,
        }
    }

    // ---- artifact loaders ----

    pub fn load_data(&self) -> Result<Vec<TrainExample>> {
        Ok(load_dataset(&self.path(DATASET))?.0)
    }

    pub fn load_model(&self) -> Result<(DenoiserParams, NoiseSchedule)> {
        let (theta, schedule) = load_model(&self.path(MODEL))?;
        Ok((theta, schedule.build()?))
    }

    pub fn load_queries(&self) -> Result<QuerySet> {
        Ok(serde_json::from_slice(&fs::read(self.path(QUERIES))?)?)
    }

    pub fn load_encoder(&self) -> Result<(BaseEncoder, FeatureStore)> {
        Ok((
            BaseEncoder::load(&self.path(ENCODER))?,
            FeatureStore::load(&self.path(FEATURES))?,
        ))
    }

    /// The encoder and store used for neighbor retrieval.
    pub fn load_retrieval(&self) -> Result<(BaseEncoder, FeatureStore)> {
        if self.path(RETRIEVAL_ENCODER).exists() {
            Ok((
                BaseEncoder::load(&self.path(RETRIEVAL_ENCODER))?,
                FeatureStore::load(&self.path(RETRIEVAL_FEATURES))?,
            ))
        } else {
            self.load_encoder()
        }
    }

    pub fn load_fisher(&self) -> Result<FisherApprox> {
        Ok(FisherApprox::load(&self.path(FISHER))?)
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        Ok(Corpus::load(&self.path(CORPUS))?)
    }

    pub fn load_truth(&self) -> Result<Vec<TruthRow>> {
        Ok(serde_json::from_slice(&fs::read(self.path(TRUTH))?)?)
    }

    pub fn load_ranker(&self) -> Result<RankerParams> {
        Ok(RankerParams::load(&self.path(RANKER))?.0)
    }

    // ---- stages ----

    fn make_data(&self) -> Result<()> {
        let data = make_dataset_with(&self.dataset_config())?;
        save_dataset(&self.path(DATASET), &data, self.cfg.data_classes)?;
        Ok(())
    }

    fn train_model(&self) -> Result<()> {
        let data = self.load_data()?;
        let tc = self.train_config();
        let theta = train_model(&data, &tc, self.seeds().model)?;
        save_model(&self.path(MODEL), &theta, &tc.schedule)?;
        Ok(())
    }

    fn gen_queries(&self) -> Result<()> {
        let (theta, sched) = self.load_model()?;
        let c = &self.cfg;
        let s = self.seeds();
        let set = QuerySet {
            queries: generate_queries(
                &theta,
                c.queries_train + c.queries_val,
                s.queries,
                c.queries_ddim_steps,
                &sched,
            )?,
            test: generate_queries(&theta, c.queries_test, s.test_queries, c.queries_ddim_steps, &sched)?,
        };
        fs::write(self.path(QUERIES), serde_json::to_vec(&set)?)?;
        Ok(())
    }

    fn fit_encoder(&self) -> Result<()> {
        let data = self.load_data()?;
        let c = &self.cfg;
        let seed = self.seeds().encoder;
        let enc = fit_encoder(&data, c.encoder_d_img, c.encoder_mode, c.data_classes, seed)?;
        log::info!(
            "encoder: d_img {} explains {:.3} of the variance",
            enc.d_img(),
            enc.explained
        );
        let store = enc.encode_all(&data)?;
        enc.save(&self.path(ENCODER))?;
        store.save(&self.path(FEATURES))?;
        let retrieval_store = if c.retrieval_encoder_mode() != c.encoder_mode {
            let r = fit_encoder(
                &data,
                Some(enc.d_img()),
                c.retrieval_encoder_mode(),
                c.data_classes,
                seed,
            )?;
            let rs = r.encode_all(&data)?;
            r.save(&self.path(RETRIEVAL_ENCODER))?;
            rs.save(&self.path(RETRIEVAL_FEATURES))?;
            rs
        } else {
            store
        };
        if c.retrieval_coarse {
            let (cells, probe) = default_cells(retrieval_store.len());
            build_index(&retrieval_store, cells, probe, seed)?.save(&self.path(INDEX))?;
        }
        Ok(())
    }

    fn fit_fisher(&self) -> Result<()> {
        let data = self.load_data()?;
        let (theta, sched) = self.load_model()?;
        let c = &self.cfg;
        let plan = FisherPlan::new(self.seeds().fisher, c.fisher_draws, c.fisher_max_examples);
        let stream = collect_samples(&theta, &data, &plan, &sched)?;
        let blocks = theta.arch.blocks();
        let fisher = match c.fisher_kind {
            FisherKind::Diag => FisherApprox::from_diag(blocks, diag_from_samples(&stream)?, c.fisher_damping)?,
            FisherKind::Kfac => FisherApprox::from_kfac(blocks, &kfac_from_samples(&stream)?, c.fisher_damping)?,
            FisherKind::Ekfac => {
                let kfac = kfac_from_samples(&stream)?;
                FisherApprox::from_ekfac(blocks, ekfac_from_samples(&stream, &kfac)?, c.fisher_damping)?
            }
        };
        fisher.save(&self.path(FISHER))?;
        Ok(())
    }

    fn curate(&self, inputs: &BTreeMap<String, String>) -> Result<()> {
        let data = self.load_data()?;
        let (theta, sched) = self.load_model()?;
        let fisher = self.load_fisher()?;
        let set = self.load_queries()?;
        let (renc, rstore) = self.load_retrieval()?;
        let index = if self.cfg.retrieval_coarse {
            Some(CoarseIndex::load(&self.path(INDEX))?)
        } else {
            None
        };
        let ucfg = self.unlearn_config()?;
        let mut scorer: Box<dyn CandidateScorer> = match self.cfg.teacher {
            TeacherKind::Abu => Box::new(Teacher::new(&theta, &fisher, ucfg.clone(), &sched, &data)?),
            TeacherKind::Influence => Box::new(InfluenceScorer::new(
                &theta,
                &fisher,
                ucfg.grad_plan.clone(),
                ucfg.update_scope,
                &sched,
                &data,
            )?),
        };
        let feats: Vec<Vec<f64>> = set
            .queries
            .iter()
            .map(|q| renc.encode(&q.x, q.c))
            .collect::<fastattrib::Result<_>>()?;
        let ccfg = self.curation_config();
        let corpus = curate_corpus(
            &set.queries,
            &feats,
            &rstore,
            index.as_ref(),
            scorer.as_mut(),
            &ccfg,
            &inputs["data"],
            &inputs["model"],
        )?;
        corpus.save(&self.path(CORPUS))?;
        log::info!("curate: {} attribution records", corpus.record_count());
        let ids: Vec<usize> = data.iter().map(|z| z.id).collect();
        let truth: Vec<TruthRow> = set
            .test
            .iter()
            .map(|q| {
                let f = renc.encode(&q.x, q.c)?;
                let hits = match index.as_ref() {
                    Some(ix) if ccfg.coarse => knn_coarse(ix, &rstore, &f, ccfg.k)?.hits,
                    _ => knn_exact(&rstore, &f, ccfg.k)?,
                };
                let scores = scorer.score(q, &ids)?;
                let records =
                    fastattrib::attribution::rank_normalize(q.id, &ids.iter().copied().zip(scores).collect::<Vec<_>>());
                Ok(TruthRow {
                    query_id: q.id,
                    ranking: records.iter().map(|r| r.candidate_id).collect(),
                    candidates: hits.into_iter().map(|h| h.0).collect(),
                })
            })
            .collect::<Result<_>>()?;
        fs::write(self.path(TRUTH), serde_json::to_vec(&truth)?)?;
        Ok(())
    }

    fn query_features(enc: &BaseEncoder, queries: &[SynthQuery]) -> Result<HashMap<usize, Vec<f64>>> {
        queries.iter().map(|q| Ok((q.id, enc.encode(&q.x, q.c)?))).collect()
    }

    fn train_ranker(&self, inputs: &BTreeMap<String, String>) -> Result<()> {
        let set = self.load_queries()?;
        let (enc, store) = self.load_encoder()?;
        let corpus = self.load_corpus()?;
        let qf = Self::query_features(&enc, &set.queries)?;
        let inputs_ = RankerInputs {
            corpus: &corpus,
            store: &store,
            queries: &qf,
        };
        let (params, log) = train_ranker(&inputs_, self.cfg.ranker_loss, &self.ranker_config())?;
        let provenance = RankerProvenance {
            corpus_hash: inputs[CORPUS].clone(),
            encoder_hash: inputs["encoder"].clone(),
        };
        params.save(&self.path(RANKER), &provenance)?;
        fs::write(self.path("metrics/ranker_train.csv"), log.to_csv())?;
        log::info!("train-ranker: best epoch {}", log.best_epoch);
        Ok(())
    }

    fn eval_rank(&self) -> Result<()> {
        let set = self.load_queries()?;
        let (enc, store) = self.load_encoder()?;
        let ranker = self.load_ranker()?;
        let truth = self.load_truth()?;
        let report = evaluate_rankings(&enc, &store, Some(&ranker), &set.test, &truth, &self.cfg.eval_ls)?;
        fs::write(self.path("metrics/rank_eval.csv"), report.per_query_csv())?;
        fs::write(self.path("metrics/rank_summary.csv"), report.summary_csv())?;
        Ok(())
    }

    fn eval_counterfactual(&self) -> Result<()> {
        let data = self.load_data()?;
        let set = self.load_queries()?;
        let (enc, _) = self.load_encoder()?;
        let truth = self.load_truth()?;
        let n = self.cfg.eval_cf_queries.min(set.test.len());
        let tc = self.train_config();
        let ctx = RemovalContext {
            data: &data,
            train: &tc,
            encoder: &enc,
            eval_plan: self.unlearn_config()?.eval_plan,
            ddim_steps: self.cfg.queries_ddim_steps,
        };
        let rankings: Vec<Vec<usize>> = truth[..n].iter().map(|t| t.ranking.clone()).collect();
        let seeds: Vec<u64> = self
            .cfg
            .eval_retrain_seeds
            .iter()
            .map(|s| s.wrapping_add(self.cfg.seed))
            .collect();
        let report = counterfactual_grid(
            &ctx,
            &self.cfg.teacher.to_string(),
            &set.test[..n],
            &rankings,
            &self.cfg.eval_ks,
            &seeds,
        )?;
        fs::write(self.path("metrics/counterfactual.csv"), report.to_csv())?;
        fs::write(
            self.path("metrics/counterfactual_summary.csv"),
            counterfactual_summary_csv(&report),
        )?;
        Ok(())
    }

    fn bench(&self) -> Result<()> {
        let data = self.load_data()?;
        let (theta, sched) = self.load_model()?;
        let fisher = self.load_fisher()?;
        let set = self.load_queries()?;
        let (enc, store) = self.load_encoder()?;
        let ranker = self.load_ranker()?;
        let ucfg = self.unlearn_config()?;
        let report = bench_attribution(
            &data,
            &theta,
            &sched,
            &fisher,
            &ucfg,
            &enc,
            &store,
            &ranker,
            &set.test,
            self.cfg.bench_warm,
            self.cfg.bench_reps,
        )?;
        fs::write(self.path("metrics/bench.csv"), report.to_csv())?;
        Ok(())
    }

    fn report(&self) -> Result<()> {
        let read = |rel: &str| fs::read_to_string(self.path(rel));
        let corpus = self.load_corpus()?;
        let mut md = String::new();
        let _ = writeln!(md, "# Attribution run summary\n");
        let _ = writeln!(md, "- config hash: `{}`", self.cfg.hash());
        let _ = writeln!(md, "- master seed: {}", self.cfg.seed);
        let _ = writeln!(
            md,
            "- corpus: {} train / {} val queries, {} attribution records",
            corpus.manifest.train.len(),
            corpus.manifest.val.len(),
            corpus.record_count()
        );
        let _ = writeln!(
            md,
            "- teacher: {}, student loss: {}\n",
            self.cfg.teacher,
            self.cfg.ranker_loss.name()
        );
        let _ = writeln!(md, "## Counterfactual removal\n");
        md.push_str(&csv_to_markdown(&read("metrics/counterfactual_summary.csv")?));
        let _ = writeln!(md, "\n## Rank prediction on test queries\n");
        md.push_str(&csv_to_markdown(&read("metrics/rank_summary.csv")?));
        let _ = writeln!(md, "\n## Attribution latency\n");
        md.push_str(&csv_to_markdown(&read("metrics/bench.csv")?));
        let _ = writeln!(md, "\n## Ranker training\n");
        md.push_str(&csv_to_markdown(&read("metrics/ranker_train.csv")?));
        fs::write(self.path("summary.md"), md)?;
        Ok(())
    }
}

fn csv_to_markdown(csv: &str) -> String {
    let mut lines = csv.lines().filter(|l| !l.is_empty());
    let Some(header) = lines.next() else {
        return String::new();
    };
    let cols = header.split(',').count();
    let mut md = format!("| {} |\n|{}\n", header.replace(',', " | "), "---|".repeat(cols));
    for l in lines {
        let cells: Vec<String> = l
            .split(',')
            .map(|c| match c.parse::<f64>() {
                Ok(v) if c.contains('.') || c.contains('e') => format!("{v:.4}"),
                _ => c.to_string(),
            })
            .collect();
        let _ = writeln!(md, "| {} |", cells.join(" | "));
    }
    md
}

pub fn counterfactual_summary_csv(report: &CounterfactualReport) -> String {
    let mut s = String::from("k,pairs,metric,method_mean,method_se,random_mean,random_se,wins,p_value\n");
    for k in &report.summary {
        let KSummary { k: kk, pairs, .. } = k;
        for (name, m, r, wins, p) in [
            ("delta_loss", k.method_loss, k.random_loss, k.loss_wins, k.loss_p),
            (
                "delta_gen_mse",
                k.method_gen_mse,
                k.random_gen_mse,
                k.gen_mse_wins,
                k.gen_mse_p,
            ),
            (
                "gen_feat_cos",
                k.method_feat_cos,
                k.random_feat_cos,
                k.feat_wins,
                k.feat_p,
            ),
        ] {
            let _ = writeln!(s, "{kk},{pairs},{name},{},{},{},{},{wins},{p}", m.0, m.1, r.0, r.1);
        }
    }
    s
}

/// Per-query ranking quality of the base and tuned embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingReport {
    pub ls: Vec<usize>,
    /// `(method, query_id, AP per L, Spearman vs. the teacher over the
    /// query's candidate set)`.
    pub rows: Vec<(String, usize, Vec<f64>, f64)>,
}

impl RankingReport {
    pub fn methods(&self) -> Vec<String> {
        let mut m: Vec<String> = Vec::new();
        for (name, ..) in &self.rows {
            if !m.contains(name) {
                m.push(name.clone());
            }
        }
        m
    }

    /// Mean AP per L and mean Spearman for `method`.
    pub fn means(&self, method: &str) -> (Vec<(f64, f64)>, (f64, f64)) {
        let rows: Vec<_> = self.rows.iter().filter(|r| r.0 == method).collect();
        let maps = (0..self.ls.len())
            .map(|i| mean_and_se(&rows.iter().map(|r| r.2[i]).collect::<Vec<_>>()))
            .collect();
        (maps, mean_and_se(&rows.iter().map(|r| r.3).collect::<Vec<_>>()))
    }

    pub fn per_query_csv(&self) -> String {
        let mut s = String::from("method,query_id");
        for l in &self.ls {
            let _ = write!(s, ",ap_{l}");
        }
        s.push_str(",spearman\n");
        for (m, q, aps, rho) in &self.rows {
            let _ = write!(s, "{m},{q}");
            for a in aps {
                let _ = write!(s, ",{a}");
            }
            let _ = writeln!(s, ",{rho}");
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("method,metric,mean,se\n");
        for m in self.methods() {
            let (maps, rho) = self.means(&m);
            for (l, (mean, se)) in self.ls.iter().zip(maps) {
                let _ = writeln!(s, "{m},map_{l},{mean},{se}");
            }
            let _ = writeln!(s, "{m},spearman,{},{}", rho.0, rho.1);
        }
        s
    }
}

/// Ranks the full training set for each test query with the base features
/// and, if given, the tuned embedding, and scores both against the teacher.
/// AP is taken over the full ranking; Spearman over the query's candidates.
pub fn evaluate_rankings(
    enc: &BaseEncoder,
    store: &FeatureStore,
    ranker: Option<&RankerParams>,
    tests: &[SynthQuery],
    truth: &[TruthRow],
    ls: &[usize],
) -> Result<RankingReport> {
    let tuned_store = ranker.map(|r| r.embed_store(store)).transpose()?;
    let mut rows = Vec::new();
    let mut push = |name: &str, q: &SynthQuery, t: &TruthRow, f: &[f64], s: &FeatureStore| -> Result<()> {
        let cand: HashSet<usize> = t.candidates.iter().copied().collect();
        let pred: Vec<usize> = rank_all(s, f)?.into_iter().map(|h| h.0).collect();
        let aps = ls
            .iter()
            .map(|&l| map_at_l(&pred, &t.ranking, l))
            .collect::<fastattrib::Result<Vec<_>>>()?;
        let within = |order: &[usize]| -> Vec<usize> { order.iter().copied().filter(|i| cand.contains(i)).collect() };
        let rho = order_spearman(&within(&pred), &within(&t.ranking))?;
        rows.push((name.to_string(), q.id, aps, rho));
        Ok(())
    };
    for (q, t) in tests.iter().zip(truth) {
        if q.id != t.query_id {
            return Err(PipelineError::Precondition(format!(
                "truth row {} does not match test query {}",
                t.query_id, q.id
            )));
        }
        let base = enc.encode(&q.x, q.c)?;
        push("untuned", q, t, &base, store)?;
        if let (Some(r), Some(ts)) = (ranker, tuned_store.as_ref()) {
            push("tuned", q, t, &r.embed(&base)?, ts)?;
        }
    }
    Ok(RankingReport { ls: ls.to_vec(), rows })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub embedding: LatencyStats,
    pub teacher: LatencyStats,
    pub candidates: usize,
    /// Bytes of the precomputed tuned feature store.
    pub index_bytes: u64,
}

impl BenchReport {
    pub fn speedup(&self) -> f64 {
        self.teacher.median / self.embedding.median
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,candidates,reps,median_s,mean_s,p95_s,speedup,index_bytes\n");
        for (name, st) in [("teacher", &self.teacher), ("embedding", &self.embedding)] {
            let _ = writeln!(
                s,
                "{name},{},{},{},{},{},{},{}",
                self.candidates,
                st.reps,
                st.median,
                st.mean,
                st.p95,
                self.teacher.median / st.median,
                if name == "embedding" { self.index_bytes } else { 0 }
            );
        }
        s
    }
}

/// Times attributing one query over the full training set with the teacher
/// and with the tuned embedding (warm repetitions untimed).
#[allow(clippy::too_many_arguments)]
pub fn bench_attribution(
    data: &[TrainExample],
    theta: &DenoiserParams,
    sched: &NoiseSchedule,
    fisher: &FisherApprox,
    ucfg: &UnlearnConfig,
    enc: &BaseEncoder,
    store: &FeatureStore,
    ranker: &RankerParams,
    queries: &[SynthQuery],
    warm: usize,
    reps: usize,
) -> Result<BenchReport> {
    if queries.is_empty() {
        return Err(PipelineError::Precondition("no queries to benchmark".into()));
    }
    let ids: Vec<usize> = data.iter().map(|z| z.id).collect();
    let tuned = ranker.embed_store(store)?;
    let embedding = bench(warm, reps, |i| {
        let q = &queries[i % queries.len()];
        let f = ranker.embed(&enc.encode(&q.x, q.c)?)?;
        rank_all(&tuned, &f)
    })?;
    let mut teacher = Teacher::new(theta, fisher, ucfg.clone(), sched, data)?;
    let teacher_stats = bench(warm, reps, |i| teacher.rank(&queries[i % queries.len()], &ids))?;
    Ok(BenchReport {
        embedding,
        teacher: teacher_stats,
        candidates: ids.len(),
        index_bytes: fatn_bytes(&[tuned.len(), tuned.dim()]),
    })
}
