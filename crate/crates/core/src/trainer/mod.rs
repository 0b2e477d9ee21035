//! The two-stage training loop: Stage 1 on the disentangling objective,
//! freezing of the imputation copy, Stage 2 on augmented features, model
//! selection on the validation split, checkpoints and multi-seed runs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{sample_alpha, stage2_objective, Stage2Options};
use crate::autodiff::{sigmoid, AutodiffError, Graph};
use crate::data::{BatchSampler, DataError, EncodedDataset, LabeledBatch, Split};
use crate::disentangle::{
    auto_beta, stage1_objective, Architecture, DisentangleError, FairCdaNetwork, LossBundle,
};
use crate::metrics::{self, average_precision, EvalSlice, MetricError, MetricReport};
use crate::nn::checkpoint::{Checkpoint, CheckpointError, RngState};
use crate::nn::{AdamConfig, AdamState, Group, NnError, ParameterStore};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] DisentangleError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("metric: {0}")]
    Metric(#[from] MetricError),
    #[error("non-finite loss at stage {stage}, iteration {iter}: {detail}")]
    NonFinite { stage: u8, iter: usize, detail: String },
    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("checkpoint does not belong to this run: {0}")]
    Mismatch(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Fairness gap used for validation and model selection.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GapMetric {
    #[default]
    Dp,
    Eo,
}

impl GapMetric {
    pub fn key(self) -> &'static str {
        match self {
            GapMetric::Dp => "delta_dp",
            GapMetric::Eo => "delta_eo",
        }
    }

    pub fn compute(self, s: &EvalSlice) -> metrics::Result<f64> {
        match self {
            GapMetric::Dp => metrics::delta_dp(s),
            GapMetric::Eo => metrics::delta_eo(s),
        }
    }
}

/// Single-stage alternatives to the Fair-CDA objective.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Baseline {
    /// Task loss plus `weight` times the batch estimate of the gap.
    GapReg { weight: f64 },
    /// Swaps the one-hot sensitive input columns of each sampled row with probability `p`.
    AttributeFlip { p: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Stage-1 optimizer steps (`T`).
    #[serde(alias = "T")]
    pub stage1_iters: usize,
    /// Stage-2 optimizer steps (`S`).
    #[serde(alias = "S")]
    pub stage2_iters: usize,
    pub eta1: f64,
    pub eta2: f64,
    pub lambda: f64,
    pub gamma: f64,
    /// `None` picks the initial-loss ratio.
    pub beta: Option<f64>,
    /// Rows drawn from each attribute group per batch.
    pub per_group: usize,
    pub seed: u64,
    pub metric: GapMetric,
    pub orth: bool,
    pub hard_labels: bool,
    pub supplement: bool,
    /// Candidates within `slack` times the best validation gap compete on AP.
    pub selection_slack: f64,
    pub hidden: Vec<usize>,
    pub branch: usize,
    /// Write a resumable checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    pub baseline: Option<Baseline>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_iters: 450,
            stage2_iters: 10,
            eta1: 1e-3,
            eta2: 5e-4,
            lambda: 500.0,
            gamma: 0.9,
            beta: None,
            per_group: 500,
            seed: 0,
            metric: GapMetric::Dp,
            orth: true,
            hard_labels: false,
            supplement: false,
            selection_slack: 1.1,
            hidden: vec![200, 200],
            branch: 200,
            checkpoint_every: 0,
            baseline: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.eta1.is_finite() && self.eta1 > 0.0 && self.eta2.is_finite() && self.eta2 > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if let Some(b) = self.beta {
            if !(b.is_finite() && b >= 0.0) {
                return bad("beta must be finite and non-negative");
            }
        }
        if self.per_group == 0 {
            return bad("per_group must be positive");
        }
        if !(self.selection_slack.is_finite() && self.selection_slack >= 1.0) {
            return bad("selection_slack must be at least 1");
        }
        if self.branch == 0 || self.hidden.iter().any(|&w| w == 0) {
            return bad("layer widths must be positive");
        }
        match self.baseline {
            Some(Baseline::GapReg { weight }) if !(weight.is_finite() && weight >= 0.0) => {
                bad("gapreg weight must be finite and non-negative")
            }
            Some(Baseline::AttributeFlip { p }) if !(0.0..=1.0).contains(&p) => bad("flip probability must lie in [0, 1]"),
            _ => Ok(()),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Io(path.into(), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn architecture(&self, input: usize) -> Architecture {
        Architecture { input, hidden: self.hidden.clone(), branch: self.branch }
    }

    /// Baselines are single-stage runs.
    fn effective_stage2(&self) -> usize {
        if self.baseline.is_some() {
            0
        } else {
            self.stage2_iters
        }
    }

    pub fn digest(&self) -> String {
        sha_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Digest of everything Stage 1 depends on.
    pub fn stage1_digest(&self, data_digest: &str) -> String {
        let key = serde_json::json!({
            "T": self.stage1_iters, "eta1": self.eta1, "beta": self.beta, "per_group": self.per_group,
            "seed": self.seed, "orth": self.orth, "hidden": self.hidden, "branch": self.branch,
            "baseline": self.baseline, "metric": self.metric, "data": data_digest,
        });
        sha_hex(key.to_string().as_bytes())
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    crate::data::hex(&Sha256::digest(bytes))
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

const STAGE1_STREAM: u64 = 1;
const STAGE2_STREAM: u64 = 2;
const BETA_STREAM: u64 = 3;

/// Validation AP and gap of one candidate.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    pub ap: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub stage: u8,
    /// 1-based within the stage.
    pub iter: usize,
    pub total: f64,
    pub losses: LossBundle,
    /// Stage-2 loss on perturbed features against the true labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmented: Option<f64>,
    /// Stage-2 loss against the imputed labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imputed: Option<f64>,
    /// Share of augmented rows whose attribute head prediction flipped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flip_rate: Option<f64>,
    /// GapReg batch estimate of the gap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_gap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValPoint>,
}

/// Which task head produces predictions.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Task,
    Aug,
}

/// A network together with the head it predicts with.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub net: FairCdaNetwork,
    pub head: Head,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    head: Head,
    arch: Architecture,
}

impl TrainedModel {
    /// Positive-class probabilities for every row of `x`.
    pub fn predict(&self, x: &crate::autodiff::Tensor) -> Result<Vec<f64>> {
        let inf = self.net.infer(x)?;
        Ok(match self.head {
            Head::Task => inf.task,
            Head::Aug => inf.aug,
        })
    }

    pub fn evaluate(&self, batch: &LabeledBatch, split: Split, seed: u64) -> Result<MetricReport> {
        let p = self.predict(&batch.x)?;
        let s = EvalSlice::new(&p, &batch.y, &batch.a)?;
        Ok(MetricReport::evaluate(&s, split.as_str(), seed))
    }

    pub fn to_checkpoint(&self, config_digest: &str) -> Checkpoint {
        let mut ck = Checkpoint::new(self.net.spec.clone(), config_digest);
        ck.put_store("params", &self.net.params);
        if let Some(imp) = self.net.imputation() {
            ck.put_store("imputation", imp);
        }
        ck.meta = serde_json::to_value(ModelMeta { kind: "model".into(), head: self.head, arch: self.net.arch.clone() })
            .expect("meta serializes");
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_value(ck.meta.clone())?;
        if meta.kind != "model" {
            return Err(TrainError::Mismatch(format!("expected a model checkpoint, found `{}`", meta.kind)));
        }
        let imp = if ck.has_prefix("imputation") { Some(ck.take_store("imputation")?) } else { None };
        let net = FairCdaNetwork::from_parts(meta.arch, ck.take_store("params")?, imp)?;
        Ok(Self { net, head: meta.head })
    }

    pub fn save(&self, path: &Path, config_digest: &str) -> Result<()> {
        Ok(self.to_checkpoint(config_digest).save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selected {
    pub stage: u8,
    pub iter: usize,
}

/// Metrics of one run; contains nothing that varies between identical reruns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub seed: u64,
    pub config_digest: String,
    pub data_digest: String,
    pub beta: f64,
    pub metric: GapMetric,
    pub selected: Selected,
    pub stage1_validation: ValPoint,
    pub selected_validation: ValPoint,
    pub validation: MetricReport,
    pub test: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub summary: MetricSummary,
    pub iterations: Vec<IterRecord>,
    pub checkpoints: Vec<String>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// Writes `log.jsonl` (one line per step), `summary.json` and `run.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let io = |p: PathBuf| move |e| TrainError::Io(p, e);
        std::fs::create_dir_all(dir).map_err(io(dir.into()))?;
        let mut log = String::new();
        for r in &self.iterations {
            log.push_str(&serde_json::to_string(r)?);
            log.push('\n');
        }
        let p = dir.join("log.jsonl");
        std::fs::write(&p, log).map_err(io(p.clone()))?;
        let p = dir.join("summary.json");
        std::fs::write(&p, serde_json::to_string_pretty(&self.summary)?).map_err(io(p.clone()))?;
        let run = serde_json::json!({
            "seed": self.summary.seed,
            "checkpoints": self.checkpoints,
            "wall_clock_secs": self.wall_clock_secs,
            "iterations": self.iterations.len(),
        });
        let p = dir.join("run.json");
        std::fs::write(&p, serde_json::to_string_pretty(&run)?).map_err(io(p.clone()))?;
        Ok(())
    }
}

pub struct TrainOutcome {
    pub record: RunRecord,
    pub model: TrainedModel,
}

/// State right after Stage 1 and the freeze; the starting point of every Stage-2 variant.
#[derive(Clone, Debug)]
pub struct Stage1Output {
    pub net: FairCdaNetwork,
    pub beta: f64,
    pub records: Vec<IterRecord>,
    pub validation: ValPoint,
    pub elapsed: f64,
}

#[derive(Serialize, Deserialize)]
struct Stage1Meta {
    kind: String,
    arch: Architecture,
    beta: f64,
    records: Vec<IterRecord>,
    validation: ValPoint,
}

impl Stage1Output {
    pub fn to_checkpoint(&self, stage1_digest: &str) -> Checkpoint {
        let mut ck = Checkpoint::new(self.net.spec.clone(), stage1_digest);
        ck.put_store("params", &self.net.params);
        if let Some(imp) = self.net.imputation() {
            ck.put_store("imputation", imp);
        }
        let meta = Stage1Meta {
            kind: "stage1".into(),
            arch: self.net.arch.clone(),
            beta: self.beta,
            records: self.records.clone(),
            validation: self.validation,
        };
        ck.meta = serde_json::to_value(meta).expect("meta serializes");
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, stage1_digest: &str) -> Result<Self> {
        if ck.config_digest != stage1_digest {
            return Err(TrainError::Mismatch("stage-1 cache entry has a different digest".into()));
        }
        let meta: Stage1Meta = serde_json::from_value(ck.meta.clone())?;
        if meta.kind != "stage1" {
            return Err(TrainError::Mismatch(format!("expected a stage-1 checkpoint, found `{}`", meta.kind)));
        }
        let imp = if ck.has_prefix("imputation") { Some(ck.take_store("imputation")?) } else { None };
        Ok(Self {
            net: FairCdaNetwork::from_parts(meta.arch, ck.take_store("params")?, imp)?,
            beta: meta.beta,
            records: meta.records,
            validation: meta.validation,
            elapsed: 0.0,
        })
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
enum Phase {
    Stage1,
    Stage2,
    Done,
}

#[derive(Clone, Debug)]
struct Candidate {
    stage: u8,
    iter: usize,
    val: ValPoint,
    params: ParameterStore,
}

#[derive(Serialize, Deserialize)]
struct CandidateMeta {
    stage: u8,
    iter: usize,
    val: ValPoint,
}

#[derive(Serialize, Deserialize)]
struct SessionMeta {
    kind: String,
    phase: Phase,
    iter: usize,
    arch: Architecture,
    beta: f64,
    records: Vec<IterRecord>,
    stage1_validation: Option<ValPoint>,
    candidates: Vec<CandidateMeta>,
    elapsed: f64,
    data_digest: String,
}

/// Index of the best-AP candidate among those within `slack` times the smallest gap.
pub fn select_candidate(points: &[ValPoint], slack: f64) -> Option<usize> {
    let best_gap = points.iter().map(|p| p.gap).fold(f64::INFINITY, f64::min);
    let mut best: Option<usize> = None;
    for (i, p) in points.iter().enumerate() {
        if p.gap <= best_gap * slack && best.is_none_or(|b| p.ap > points[b].ap) {
            best = Some(i);
        }
    }
    best
}

/// Data views shared by every step of one run.
struct Views {
    sampler: BatchSampler,
    val: LabeledBatch,
}

impl Views {
    fn new(ds: &EncodedDataset) -> Result<Self> {
        let val = ds.slice(Split::Val);
        if val.is_empty() {
            return Err(DataError::EmptySplit("val").into());
        }
        Ok(Self { sampler: BatchSampler::new(ds, Split::Train)?, val })
    }
}

/// A resumable training run.
pub struct Session {
    cfg: TrainConfig,
    data_digest: String,
    phase: Phase,
    iter: usize,
    net: FairCdaNetwork,
    adam: AdamState,
    rng: ChaCha8Rng,
    beta: f64,
    records: Vec<IterRecord>,
    stage1_val: Option<ValPoint>,
    candidates: Vec<Candidate>,
    elapsed: f64,
    checkpoints: Vec<String>,
    stage1_net: Option<FairCdaNetwork>,
}

impl Session {
    pub fn new(cfg: &TrainConfig, ds: &EncodedDataset) -> Result<Self> {
        cfg.validate()?;
        if let Some(Baseline::AttributeFlip { .. }) = cfg.baseline {
            if ds.sensitive_cols.is_none() {
                return Err(TrainError::Config("attribute flip needs the sensitive attribute as an input".into()));
            }
        }
        let net = FairCdaNetwork::new(cfg.architecture(ds.width()), cfg.seed)?;
        let beta = match (cfg.baseline, cfg.beta) {
            (Some(_), _) => 0.0,
            (None, Some(b)) => b,
            (None, None) => {
                let sampler = BatchSampler::new(ds, Split::Train)?;
                let probe = sampler.sample(ds, cfg.per_group, &mut stream(cfg.seed, BETA_STREAM));
                auto_beta(&net, &probe, cfg.orth)?
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            data_digest: ds.digest(),
            phase: Phase::Stage1,
            iter: 0,
            net,
            adam: AdamState::new(AdamConfig::with_lr(cfg.eta1)),
            rng: stream(cfg.seed, STAGE1_STREAM),
            beta,
            records: vec![],
            stage1_val: None,
            candidates: vec![],
            elapsed: 0.0,
            checkpoints: vec![],
            stage1_net: None,
        })
    }

    /// Starts Stage 2 from a finished Stage 1 (possibly cached from another run).
    pub fn after_stage1(cfg: &TrainConfig, ds: &EncodedDataset, s1: &Stage1Output) -> Result<Self> {
        cfg.validate()?;
        let mut s = Self {
            cfg: cfg.clone(),
            data_digest: ds.digest(),
            phase: Phase::Stage1,
            iter: cfg.stage1_iters,
            net: s1.net.clone(),
            adam: AdamState::new(AdamConfig::with_lr(cfg.eta2)),
            rng: stream(cfg.seed, STAGE2_STREAM),
            beta: s1.beta,
            records: s1.records.clone(),
            stage1_val: Some(s1.validation),
            candidates: vec![],
            elapsed: s1.elapsed,
            checkpoints: vec![],
            stage1_net: Some(s1.net.clone()),
        };
        s.enter_stage2();
        Ok(s)
    }

    fn enter_stage2(&mut self) {
        if self.cfg.effective_stage2() == 0 {
            self.candidates.push(Candidate {
                stage: 1,
                iter: self.cfg.stage1_iters,
                val: self.stage1_val.expect("stage-1 validation recorded"),
                params: self.net.params.clone(),
            });
            self.phase = Phase::Done;
        } else {
            self.net.init_aug_head().expect("g and g_aug share a shape");
            self.adam = AdamState::new(AdamConfig::with_lr(self.cfg.eta2));
            self.rng = stream(self.cfg.seed, STAGE2_STREAM);
            self.iter = 0;
            self.phase = Phase::Stage2;
        }
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn net(&self) -> &FairCdaNetwork {
        &self.net
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    pub fn stage1_done(&self) -> bool {
        self.phase != Phase::Stage1
    }

    fn validate_point(&self, views: &Views, head: Head) -> Result<ValPoint> {
        let m = TrainedModel { net: self.net.clone(), head };
        let p = m.predict(&views.val.x)?;
        let s = EvalSlice::new(&p, &views.val.y, &views.val.a)?;
        Ok(ValPoint { ap: average_precision(&s)?, gap: self.cfg.metric.compute(&s)? })
    }

    /// Draws one training batch, applying the attribute-flip baseline if configured.
    fn draw_batch(&mut self, ds: &EncodedDataset, views: &Views) -> LabeledBatch {
        let mut batch = views.sampler.sample(ds, self.cfg.per_group, &mut self.rng);
        if let (Some(Baseline::AttributeFlip { p }), Some((c0, c1))) = (self.cfg.baseline, ds.sensitive_cols) {
            let w = ds.width();
            for i in 0..batch.len() {
                if self.rng.random::<f64>() < p {
                    batch.x.data_mut().swap(i * w + c0, i * w + c1);
                }
            }
        }
        batch
    }

    fn stage1_step(&mut self, ds: &EncodedDataset, views: &Views) -> Result<()> {
        let batch = self.draw_batch(ds, views);
        let iter = self.iter + 1;
        let non_finite = |detail: String| TrainError::NonFinite { stage: 1, iter, detail };
        let mut g = Graph::new();
        let bind = self.net.params.bind(&mut g, true)?;
        let t = stage1_objective(&self.net, &mut g, &bind, &batch, self.beta, self.cfg.orth)
            .map_err(|e| non_finite(e.to_string()))?;
        let losses = t.bundle(&g);
        let mut total = t.total;
        let mut batch_gap = None;
        if let Some(Baseline::GapReg { weight }) = self.cfg.baseline {
            let logits = self.net.task_logits(&mut g, &bind, t.feats.z_y, t.feats.z_a, false)?;
            let gap = crate::harness::batch_gap(&mut g, logits, &batch, self.cfg.metric)?;
            let w = g.scale(gap, weight)?;
            total = g.add(total, w)?;
            batch_gap = g.value(gap).item();
        }
        let value = g.value(total).item().unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(non_finite(format!("{losses:?}")));
        }
        let grads = g.backward(total)?;
        let named = bind.collect_grads(&g, &grads);
        self.adam.step(&mut self.net.params, &named).map_err(|e| non_finite(e.to_string()))?;
        self.iter = iter;
        self.records.push(IterRecord {
            stage: 1,
            iter,
            total: value,
            losses,
            augmented: None,
            imputed: None,
            flip_rate: None,
            batch_gap,
            validation: None,
        });
        Ok(())
    }

    fn stage2_step(&mut self, ds: &EncodedDataset, views: &Views) -> Result<()> {
        let batch = self.draw_batch(ds, views);
        let alpha = sample_alpha(self.cfg.lambda, batch.len(), &mut self.rng);
        let iter = self.iter + 1;
        let non_finite = |detail: String| TrainError::NonFinite { stage: 2, iter, detail };
        let opts = Stage2Options {
            gamma: self.cfg.gamma,
            beta: self.beta,
            orth: self.cfg.orth,
            hard_labels: self.cfg.hard_labels,
            supplement: self.cfg.supplement,
        };
        let mut g = Graph::new();
        let bind = self.net.params.bind(&mut g, true)?;
        let t = stage2_objective(&self.net, &mut g, &bind, &batch, &alpha, &opts)
            .map_err(|e| non_finite(e.to_string()))?;
        let mean = |id| {
            let v = g.value(id);
            v.sum() / v.len() as f64
        };
        let losses = LossBundle {
            task: mean(t.aug_rows),
            label_branch: mean(t.ly_rows),
            attr_branch: mean(t.la_rows),
            orth: t.orth_rows.map_or(0.0, mean),
        };
        let augmented = Some(losses.task);
        let imputed = t.imp_rows.map(mean);
        let flip_rate = {
            let za = g.value(t.z_a_tilde).clone();
            let mut h = Graph::new();
            let b = self.net.params.bind(&mut h, false)?;
            let z = h.constant(za)?;
            let u = self.net.head(&mut h, &b, Group::GA, z)?;
            let flips =
                h.value(u).data().iter().zip(&batch.a).filter(|(&u, &a)| (sigmoid(u) >= 0.5) != (a > 0.5)).count();
            Some(flips as f64 / batch.len() as f64)
        };
        let value = g.value(t.total).item().unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(non_finite(format!("{losses:?}")));
        }
        let grads = g.backward(t.total)?;
        let named = bind.collect_grads(&g, &grads);
        self.adam.step(&mut self.net.params, &named).map_err(|e| non_finite(e.to_string()))?;
        self.iter = iter;
        let val = self.validate_point(views, Head::Aug)?;
        self.candidates.push(Candidate { stage: 2, iter, val, params: self.net.params.clone() });
        self.records.push(IterRecord {
            stage: 2,
            iter,
            total: value,
            losses,
            augmented,
            imputed,
            flip_rate,
            batch_gap: None,
            validation: Some(val),
        });
        Ok(())
    }

    fn finish_stage1(&mut self, views: &Views) -> Result<()> {
        self.net.freeze_imputation()?;
        self.stage1_val = Some(self.validate_point(views, Head::Task)?);
        self.stage1_net = Some(self.net.clone());
        Ok(())
    }

    /// The frozen end-of-Stage-1 state; `None` before Stage 1 completes in this session.
    pub fn stage1_output(&self) -> Option<Stage1Output> {
        let net = self.stage1_net.clone()?;
        Some(Stage1Output {
            net,
            beta: self.beta,
            records: self.records.iter().filter(|r| r.stage == 1).cloned().collect(),
            validation: self.stage1_val?,
            elapsed: self.elapsed,
        })
    }

    /// One optimizer step or stage transition.
    fn advance(&mut self, ds: &EncodedDataset, views: &Views) -> Result<()> {
        match self.phase {
            Phase::Stage1 if self.iter < self.cfg.stage1_iters => self.stage1_step(ds, views),
            Phase::Stage1 => {
                self.finish_stage1(views)?;
                self.enter_stage2();
                Ok(())
            }
            Phase::Stage2 if self.iter < self.cfg.effective_stage2() => self.stage2_step(ds, views),
            Phase::Stage2 => {
                self.phase = Phase::Done;
                Ok(())
            }
            Phase::Done => Ok(()),
        }
    }

    fn stepped(&self) -> bool {
        matches!(self.phase, Phase::Stage1 | Phase::Stage2) && self.iter > 0
    }

    /// Runs until `stop` returns true or training completes, checkpointing into `ckpt_dir`.
    fn run_while(
        &mut self,
        ds: &EncodedDataset,
        ckpt_dir: Option<&Path>,
        mut stop: impl FnMut(&Self) -> bool,
    ) -> Result<()> {
        let views = Views::new(ds)?;
        while self.phase != Phase::Done && !stop(self) {
            let start = Instant::now();
            let before = (self.phase, self.iter);
            self.advance(ds, &views)?;
            self.elapsed += start.elapsed().as_secs_f64();
            let k = self.cfg.checkpoint_every;
            if let Some(dir) = ckpt_dir {
                if k > 0 && self.stepped() && (self.phase, self.iter) != before && self.iter % k == 0 {
                    let stage = if self.phase == Phase::Stage1 { 1 } else { 2 };
                    let path = dir.join(format!("ckpt-stage{stage}-{:05}.fcda", self.iter));
                    std::fs::create_dir_all(dir).map_err(|e| TrainError::Io(dir.into(), e))?;
                    self.to_checkpoint().save(&path)?;
                    self.checkpoints.push(path.display().to_string());
                }
            }
        }
        Ok(())
    }

    pub fn run(&mut self, ds: &EncodedDataset, ckpt_dir: Option<&Path>) -> Result<()> {
        self.run_while(ds, ckpt_dir, |_| false)
    }

    /// Runs Stage 1 and the freeze only.
    pub fn run_stage1(&mut self, ds: &EncodedDataset, ckpt_dir: Option<&Path>) -> Result<Stage1Output> {
        self.run_while(ds, ckpt_dir, |s| s.stage1_done())?;
        Ok(self.stage1_output().expect("stage 1 finished"))
    }

    /// Runs at most `steps` transitions; for tests and interactive resumption.
    pub fn run_steps(&mut self, ds: &EncodedDataset, steps: usize) -> Result<()> {
        let mut left = steps;
        self.run_while(ds, None, |_| {
            let stop = left == 0;
            left = left.saturating_sub(1);
            stop
        })
    }

    /// Applies model selection and evaluates the chosen model on validation and test.
    pub fn finish(mut self, ds: &EncodedDataset) -> Result<TrainOutcome> {
        if self.phase != Phase::Done {
            self.run(ds, None)?;
        }
        let points: Vec<ValPoint> = self.candidates.iter().map(|c| c.val).collect();
        let k = select_candidate(&points, self.cfg.selection_slack)
            .ok_or_else(|| TrainError::Config("no model-selection candidates".into()))?;
        let chosen = &self.candidates[k];
        let head = if chosen.stage == 1 { Head::Task } else { Head::Aug };
        let imp = self.net.imputation().cloned();
        let net = FairCdaNetwork::from_parts(self.net.arch.clone(), chosen.params.clone(), imp)?;
        let model = TrainedModel { net, head };
        let seed = self.cfg.seed;
        let validation = model.evaluate(&ds.slice(Split::Val), Split::Val, seed)?;
        let test = model.evaluate(&ds.slice(Split::Test), Split::Test, seed)?;
        let summary = MetricSummary {
            seed,
            config_digest: self.cfg.digest(),
            data_digest: self.data_digest.clone(),
            beta: self.beta,
            metric: self.cfg.metric,
            selected: Selected { stage: chosen.stage, iter: chosen.iter },
            stage1_validation: self.stage1_val.expect("stage 1 finished"),
            selected_validation: chosen.val,
            validation,
            test,
        };
        let record = RunRecord {
            summary,
            iterations: self.records,
            checkpoints: self.checkpoints,
            wall_clock_secs: self.elapsed,
        };
        Ok(TrainOutcome { record, model })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.net.spec.clone(), self.cfg.digest());
        ck.put_store("params", &self.net.params);
        if let Some(imp) = self.net.imputation() {
            ck.put_store("imputation", imp);
        }
        ck.put_adam("adam", &self.adam);
        for (k, c) in self.candidates.iter().enumerate() {
            ck.put_store(&format!("cand{k}"), &c.params);
        }
        ck.rng = Some(RngState::capture(&self.rng));
        let meta = SessionMeta {
            kind: "session".into(),
            phase: self.phase,
            iter: self.iter,
            arch: self.net.arch.clone(),
            beta: self.beta,
            records: self.records.clone(),
            stage1_validation: self.stage1_val,
            candidates: self.candidates.iter().map(|c| CandidateMeta { stage: c.stage, iter: c.iter, val: c.val }).collect(),
            elapsed: self.elapsed,
            data_digest: self.data_digest.clone(),
        };
        ck.meta = serde_json::to_value(meta).expect("meta serializes");
        ck
    }

    pub fn from_checkpoint(cfg: &TrainConfig, ds: &EncodedDataset, ck: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        if ck.config_digest != cfg.digest() {
            return Err(TrainError::Mismatch("configuration digest differs".into()));
        }
        let meta: SessionMeta = serde_json::from_value(ck.meta.clone())?;
        if meta.kind != "session" {
            return Err(TrainError::Mismatch(format!("expected a session checkpoint, found `{}`", meta.kind)));
        }
        if meta.data_digest != ds.digest() {
            return Err(TrainError::Mismatch("dataset digest differs".into()));
        }
        let imp = if ck.has_prefix("imputation") { Some(ck.take_store("imputation")?) } else { None };
        let net = FairCdaNetwork::from_parts(meta.arch, ck.take_store("params")?, imp)?;
        let candidates = meta
            .candidates
            .into_iter()
            .enumerate()
            .map(|(k, c)| Ok(Candidate { stage: c.stage, iter: c.iter, val: c.val, params: ck.take_store(&format!("cand{k}"))? }))
            .collect::<Result<Vec<_>>>()?;
        let rng = ck.rng.as_ref().ok_or_else(|| TrainError::Mismatch("checkpoint has no rng state".into()))?.restore()?;
        Ok(Self {
            cfg: cfg.clone(),
            data_digest: meta.data_digest,
            phase: meta.phase,
            iter: meta.iter,
            net,
            adam: ck.take_adam("adam")?,
            rng,
            beta: meta.beta,
            records: meta.records,
            stage1_val: meta.stage1_validation,
            candidates,
            elapsed: meta.elapsed,
            checkpoints: vec![],
            stage1_net: None,
        })
    }
}

/// Stage 1 followed by the freeze.
pub fn run_stage1(cfg: &TrainConfig, ds: &EncodedDataset) -> Result<Stage1Output> {
    Session::new(cfg, ds)?.run_stage1(ds, None)
}

/// Stage 2 and model selection starting from a finished Stage 1.
pub fn run_stage2(cfg: &TrainConfig, ds: &EncodedDataset, s1: &Stage1Output) -> Result<TrainOutcome> {
    Session::after_stage1(cfg, ds, s1)?.finish(ds)
}

/// Both stages and model selection.
pub fn train_full(cfg: &TrainConfig, ds: &EncodedDataset) -> Result<TrainOutcome> {
    Session::new(cfg, ds)?.finish(ds)
}

/// Stage 1 from an on-disk cache keyed by its digest, training and storing it on a miss.
pub fn cached_stage1(cfg: &TrainConfig, ds: &EncodedDataset, cache_dir: Option<&Path>) -> Result<Stage1Output> {
    let digest = cfg.stage1_digest(&ds.digest());
    let path = cache_dir.map(|d| d.join(format!("stage1-{}.fcda", &digest[..16])));
    if let Some(p) = &path {
        if p.exists() {
            match Checkpoint::load(p).map_err(TrainError::from).and_then(|ck| Stage1Output::from_checkpoint(&ck, &digest)) {
                Ok(s1) => return Ok(s1),
                Err(e) => log::warn!("ignoring stage-1 cache entry {}: {e}", p.display()),
            }
        }
    }
    let s1 = run_stage1(cfg, ds)?;
    if let Some(p) = &path {
        if let Some(d) = p.parent() {
            std::fs::create_dir_all(d).map_err(|e| TrainError::Io(d.into(), e))?;
        }
        s1.to_checkpoint(&digest).save(p)?;
    }
    Ok(s1)
}

/// Trains one run per seed, concurrently; results come back in seed order.
pub fn train_seeds(cfg: &TrainConfig, ds: &EncodedDataset, seeds: &[u64]) -> Result<Vec<TrainOutcome>> {
    seeds
        .par_iter()
        .map(|&seed| train_full(&TrainConfig { seed, ..cfg.clone() }, ds))
        .collect()
}

/// Mean and sample standard deviation; the deviation is absent for a single value.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1)
        .then(|| (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

/// Mean and deviation of one test metric across runs.
pub fn aggregate(records: &[RunRecord], metric: &str) -> Option<(f64, Option<f64>)> {
    let vals: Option<Vec<f64>> = records.iter().map(|r| r.summary.test.get(metric)).collect();
    vals.filter(|v| !v.is_empty()).map(|v| mean_std(&v))
}
