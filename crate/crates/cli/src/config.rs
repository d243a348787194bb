//! `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use fastattrib::attribution::UpdateScope;
use fastattrib::fisher::FisherKind;
use fastattrib::hash::sha256_hex;
use fastattrib::ranker::LossMode;
use fastattrib::retrieval::EncoderMode;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("duplicate config key `{0}`")]
    Duplicate(String),
    #[error("bad value for `{key}`: `{value}` ({reason})")]
    Value { key: String, value: String, reason: String },
}

/// Which scorer produces the distillation targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherKind {
    Abu,
    Influence,
}

impl FromStr for TeacherKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "abu" => Ok(TeacherKind::Abu),
            "influence" => Ok(TeacherKind::Influence),
            _ => Err("expected abu or influence".into()),
        }
    }
}

impl Display for TeacherKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TeacherKind::Abu => "abu",
            TeacherKind::Influence => "influence",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    pub data_classes: usize,
    pub data_per_class: usize,
    pub data_dim: usize,
    pub data_modes_per_class: usize,
    pub data_prototype_rms: f64,
    pub data_mode_rms: f64,
    pub data_pixel_noise: f64,

    pub schedule_steps: usize,
    pub schedule_beta_start: f64,
    pub schedule_beta_end: f64,

    pub model_hidden: Vec<usize>,
    pub model_cond_dim: usize,
    pub model_time_dim: usize,

    pub train_epochs: usize,
    pub train_batch: usize,
    pub train_lr: f64,
    pub train_weight_decay: f64,
    pub train_adam_eps: f64,
    pub train_cosine_decay: bool,

    pub queries_train: usize,
    pub queries_val: usize,
    pub queries_test: usize,
    pub queries_ddim_steps: usize,

    pub encoder_mode: EncoderMode,
    /// `None` picks the 90%-variance component count.
    pub encoder_d_img: Option<usize>,
    /// Base features used for neighbor retrieval; defaults to `encoder_mode`.
    pub retrieval_mode: Option<EncoderMode>,
    pub retrieval_coarse: bool,

    pub fisher_kind: FisherKind,
    pub fisher_draws: usize,
    pub fisher_max_examples: usize,
    /// `None` uses the default relative damping.
    pub fisher_damping: Option<f64>,

    pub teacher: TeacherKind,
    pub unlearn_alpha: f64,
    pub unlearn_scope: UpdateScope,
    pub unlearn_grad_timesteps: usize,
    pub unlearn_grad_noises: usize,
    pub unlearn_eval_timesteps: usize,
    pub unlearn_eval_noises: usize,

    pub curate_k: usize,
    pub curate_m: f64,

    pub ranker_loss: LossMode,
    pub ranker_epochs: usize,
    pub ranker_batch: usize,
    pub ranker_lr: f64,
    pub ranker_weight_decay: f64,
    pub ranker_p_neg: f64,
    pub ranker_hidden: usize,
    pub ranker_d_emb: usize,
    pub ranker_val_l: usize,

    pub eval_ls: Vec<usize>,
    pub eval_ks: Vec<usize>,
    pub eval_retrain_seeds: Vec<u64>,
    pub eval_cf_queries: usize,

    pub bench_warm: usize,
    pub bench_reps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data_classes: 10,
            data_per_class: 200,
            data_dim: 64,
            data_modes_per_class: 20,
            data_prototype_rms: 0.45,
            data_mode_rms: 0.3,
            data_pixel_noise: 0.04,
            schedule_steps: 100,
            schedule_beta_start: 1e-4,
            schedule_beta_end: 0.05,
            model_hidden: vec![128],
            model_cond_dim: 8,
            model_time_dim: 16,
            train_epochs: 100,
            train_batch: 32,
            train_lr: 5e-3,
            train_weight_decay: 0.0,
            train_adam_eps: 0.1,
            train_cosine_decay: true,
            queries_train: 500,
            queries_val: 20,
            queries_test: 20,
            queries_ddim_steps: 50,
            encoder_mode: EncoderMode::ImageText,
            encoder_d_img: None,
            retrieval_mode: None,
            retrieval_coarse: false,
            fisher_kind: FisherKind::Ekfac,
            fisher_draws: 1,
            fisher_max_examples: 2000,
            fisher_damping: None,
            teacher: TeacherKind::Abu,
            unlearn_alpha: 3.0,
            unlearn_scope: UpdateScope::ConditionPathway,
            unlearn_grad_timesteps: 20,
            unlearn_grad_noises: 5,
            unlearn_eval_timesteps: 20,
            unlearn_eval_noises: 5,
            curate_k: 200,
            curate_m: 0.2,
            ranker_loss: LossMode::Bce,
            ranker_epochs: 10,
            ranker_batch: 64,
            ranker_lr: 1e-3,
            ranker_weight_decay: 0.01,
            ranker_p_neg: 0.1,
            ranker_hidden: 128,
            ranker_d_emb: 64,
            ranker_val_l: 10,
            eval_ls: vec![20, 50, 100],
            eval_ks: vec![25, 50, 100],
            eval_retrain_seeds: vec![1, 2, 3],
            eval_cf_queries: 10,
            bench_warm: 10,
            bench_reps: 20,
        }
    }
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn opt<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), ToString::to_string)
}

fn mode_name(m: EncoderMode) -> &'static str {
    match m {
        EncoderMode::Image => "image",
        EncoderMode::Text => "text",
        EncoderMode::ImageText => "image+text",
    }
}

fn scope_name(s: UpdateScope) -> &'static str {
    match s {
        UpdateScope::AllParams => "all",
        UpdateScope::ConditionPathway => "cond",
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: Display,
{
    value.split(',').map(|p| parse(key, p.trim())).collect()
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: Display,
{
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl RunConfig {
    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("data.classes", self.data_classes.to_string()),
            ("data.per_class", self.data_per_class.to_string()),
            ("data.dim", self.data_dim.to_string()),
            ("data.modes_per_class", self.data_modes_per_class.to_string()),
            ("data.prototype_rms", self.data_prototype_rms.to_string()),
            ("data.mode_rms", self.data_mode_rms.to_string()),
            ("data.pixel_noise", self.data_pixel_noise.to_string()),
            ("schedule.steps", self.schedule_steps.to_string()),
            ("schedule.beta_start", self.schedule_beta_start.to_string()),
            ("schedule.beta_end", self.schedule_beta_end.to_string()),
            ("model.hidden", list(&self.model_hidden)),
            ("model.cond_dim", self.model_cond_dim.to_string()),
            ("model.time_dim", self.model_time_dim.to_string()),
            ("train.epochs", self.train_epochs.to_string()),
            ("train.batch", self.train_batch.to_string()),
            ("train.lr", self.train_lr.to_string()),
            ("train.weight_decay", self.train_weight_decay.to_string()),
            ("train.adam_eps", self.train_adam_eps.to_string()),
            ("train.cosine_decay", self.train_cosine_decay.to_string()),
            ("queries.train", self.queries_train.to_string()),
            ("queries.val", self.queries_val.to_string()),
            ("queries.test", self.queries_test.to_string()),
            ("queries.ddim_steps", self.queries_ddim_steps.to_string()),
            ("encoder.mode", mode_name(self.encoder_mode).to_string()),
            ("encoder.d_img", opt(&self.encoder_d_img)),
            (
                "retrieval.mode",
                self.retrieval_mode
                    .map_or_else(|| "auto".into(), |m| mode_name(m).to_string()),
            ),
            ("retrieval.coarse", self.retrieval_coarse.to_string()),
            ("fisher.kind", self.fisher_kind.as_str().to_string()),
            ("fisher.draws", self.fisher_draws.to_string()),
            ("fisher.max_examples", self.fisher_max_examples.to_string()),
            ("fisher.damping", opt(&self.fisher_damping)),
            ("teacher", self.teacher.to_string()),
            ("unlearn.alpha", self.unlearn_alpha.to_string()),
            ("unlearn.scope", scope_name(self.unlearn_scope).to_string()),
            ("unlearn.grad_timesteps", self.unlearn_grad_timesteps.to_string()),
            ("unlearn.grad_noises", self.unlearn_grad_noises.to_string()),
            ("unlearn.eval_timesteps", self.unlearn_eval_timesteps.to_string()),
            ("unlearn.eval_noises", self.unlearn_eval_noises.to_string()),
            ("curate.k", self.curate_k.to_string()),
            ("curate.m", self.curate_m.to_string()),
            ("ranker.loss", self.ranker_loss.name()),
            ("ranker.epochs", self.ranker_epochs.to_string()),
            ("ranker.batch", self.ranker_batch.to_string()),
            ("ranker.lr", self.ranker_lr.to_string()),
            ("ranker.weight_decay", self.ranker_weight_decay.to_string()),
            ("ranker.p_neg", self.ranker_p_neg.to_string()),
            ("ranker.hidden", self.ranker_hidden.to_string()),
            ("ranker.d_emb", self.ranker_d_emb.to_string()),
            ("ranker.val_l", self.ranker_val_l.to_string()),
            ("eval.ls", list(&self.eval_ls)),
            ("eval.ks", list(&self.eval_ks)),
            ("eval.retrain_seeds", list(&self.eval_retrain_seeds)),
            ("eval.cf_queries", self.eval_cf_queries.to_string()),
            ("bench.warm", self.bench_warm.to_string()),
            ("bench.reps", self.bench_reps.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.classes" => self.data_classes = parse(key, v)?,
            "data.per_class" => self.data_per_class = parse(key, v)?,
            "data.dim" => self.data_dim = parse(key, v)?,
            "data.modes_per_class" => self.data_modes_per_class = parse(key, v)?,
            "data.prototype_rms" => self.data_prototype_rms = parse(key, v)?,
            "data.mode_rms" => self.data_mode_rms = parse(key, v)?,
            "data.pixel_noise" => self.data_pixel_noise = parse(key, v)?,
            "schedule.steps" => self.schedule_steps = parse(key, v)?,
            "schedule.beta_start" => self.schedule_beta_start = parse(key, v)?,
            "schedule.beta_end" => self.schedule_beta_end = parse(key, v)?,
            "model.hidden" => self.model_hidden = parse_list(key, v)?,
            "model.cond_dim" => self.model_cond_dim = parse(key, v)?,
            "model.time_dim" => self.model_time_dim = parse(key, v)?,
            "train.epochs" => self.train_epochs = parse(key, v)?,
            "train.batch" => self.train_batch = parse(key, v)?,
            "train.lr" => self.train_lr = parse(key, v)?,
            "train.weight_decay" => self.train_weight_decay = parse(key, v)?,
            "train.adam_eps" => self.train_adam_eps = parse(key, v)?,
            "train.cosine_decay" => self.train_cosine_decay = parse(key, v)?,
            "queries.train" => self.queries_train = parse(key, v)?,
            "queries.val" => self.queries_val = parse(key, v)?,
            "queries.test" => self.queries_test = parse(key, v)?,
            "queries.ddim_steps" => self.queries_ddim_steps = parse(key, v)?,
            "encoder.mode" => self.encoder_mode = parse(key, v)?,
            "encoder.d_img" => self.encoder_d_img = parse_opt(key, v)?,
            "retrieval.mode" => self.retrieval_mode = parse_opt(key, v)?,
            "retrieval.coarse" => self.retrieval_coarse = parse(key, v)?,
            "fisher.kind" => self.fisher_kind = parse(key, v)?,
            "fisher.draws" => self.fisher_draws = parse(key, v)?,
            "fisher.max_examples" => self.fisher_max_examples = parse(key, v)?,
            "fisher.damping" => self.fisher_damping = parse_opt(key, v)?,
            "teacher" => self.teacher = parse(key, v)?,
            "unlearn.alpha" => self.unlearn_alpha = parse(key, v)?,
            "unlearn.scope" => self.unlearn_scope = parse(key, v)?,
            "unlearn.grad_timesteps" => self.unlearn_grad_timesteps = parse(key, v)?,
            "unlearn.grad_noises" => self.unlearn_grad_noises = parse(key, v)?,
            "unlearn.eval_timesteps" => self.unlearn_eval_timesteps = parse(key, v)?,
            "unlearn.eval_noises" => self.unlearn_eval_noises = parse(key, v)?,
            "curate.k" => self.curate_k = parse(key, v)?,
            "curate.m" => self.curate_m = parse(key, v)?,
            "ranker.loss" => self.ranker_loss = parse(key, v)?,
            "ranker.epochs" => self.ranker_epochs = parse(key, v)?,
            "ranker.batch" => self.ranker_batch = parse(key, v)?,
            "ranker.lr" => self.ranker_lr = parse(key, v)?,
            "ranker.weight_decay" => self.ranker_weight_decay = parse(key, v)?,
            "ranker.p_neg" => self.ranker_p_neg = parse(key, v)?,
            "ranker.hidden" => self.ranker_hidden = parse(key, v)?,
            "ranker.d_emb" => self.ranker_d_emb = parse(key, v)?,
            "ranker.val_l" => self.ranker_val_l = parse(key, v)?,
            "eval.ls" => self.eval_ls = parse_list(key, v)?,
            "eval.ks" => self.eval_ks = parse_list(key, v)?,
            "eval.retrain_seeds" => self.eval_retrain_seeds = parse_list(key, v)?,
            "eval.cf_queries" => self.eval_cf_queries = parse(key, v)?,
            "bench.warm" => self.bench_warm = parse(key, v)?,
            "bench.reps" => self.bench_reps = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if seen.insert(k.to_string(), ()).is_some() {
                return Err(ConfigError::Duplicate(k.into()));
            }
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Canonical text: every key, one per line.
    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }

    pub fn retrieval_encoder_mode(&self) -> EncoderMode {
        self.retrieval_mode.unwrap_or(self.encoder_mode)
    }

    pub fn train_count(&self) -> usize {
        self.data_classes * self.data_per_class
    }
}
