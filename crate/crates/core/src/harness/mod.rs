//! Experiment plumbing: data sources, baselines, λ sweeps with Pareto
//! extraction, the robustness audit and result files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{attribute_gradient, augment_batch, unit_directions};
use crate::autodiff::{sigmoid, AutodiffError, Graph, NodeId, Tensor};
use crate::data::{
    fit_encode, load_csv, synth_generate, DataError, DatasetSchema, EncodedDataset, LabeledBatch, Split, SynthSpec,
};
use crate::disentangle::DisentangleError;
use crate::metrics::MetricReport;
use crate::trainer::{
    cached_stage1, mean_std, run_stage2, train_full, Baseline, GapMetric, Head, Result, Stage1Output, TrainConfig,
    TrainError, TrainOutcome, TrainedModel,
};

/// Differentiable batch gap of `sigmoid(logits)`: group-mean difference for DP,
/// summed over label cells for EO. Cells missing from the batch are skipped.
pub fn batch_gap(
    graph: &mut Graph,
    logits: NodeId,
    batch: &LabeledBatch,
    metric: GapMetric,
) -> std::result::Result<NodeId, AutodiffError> {
    let p = graph.sigmoid(logits)?;
    let cells: Vec<Option<f64>> = match metric {
        GapMetric::Dp => vec![None],
        GapMetric::Eo => vec![Some(0.0), Some(1.0)],
    };
    let mut total = graph.constant(Tensor::scalar(0.0))?;
    for label in cells {
        let keep = |i: usize| label.is_none_or(|y| batch.y[i] == y);
        let mut means = [None, None];
        for (g, m) in means.iter_mut().enumerate() {
            let member: Vec<bool> = (0..batch.len()).map(|i| keep(i) && (batch.a[i] > 0.5) == (g == 1)).collect();
            let count = member.iter().filter(|&&b| b).count();
            if count == 0 {
                continue;
            }
            let w: Vec<f64> = member.iter().map(|&b| if b { 1.0 / count as f64 } else { 0.0 }).collect();
            let w = graph.constant(Tensor::column(w))?;
            let prod = graph.mul(p, w)?;
            *m = Some(graph.sum(prod)?);
        }
        if let [Some(m0), Some(m1)] = means {
            let d = graph.sub(m0, m1)?;
            let sign = if graph.value(d).item().unwrap_or(0.0) >= 0.0 { 1.0 } else { -1.0 };
            let abs = graph.scale(d, sign)?;
            total = graph.add(total, abs)?;
        }
    }
    Ok(total)
}

/// Where a dataset comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// A CSV file with a JSON schema sidecar; the built-in Adult schema when `schema` is absent.
    Csv {
        path: PathBuf,
        #[serde(default)]
        schema: Option<PathBuf>,
        #[serde(default)]
        split_seed: u64,
    },
    Synth {
        #[serde(default)]
        spec: SynthSpec,
        #[serde(default)]
        seed: u64,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Csv { path: PathBuf::from("data/adult/adult.csv"), schema: None, split_seed: 0 }
    }
}

impl DataSource {
    /// Loads and encodes the data; `sensitive_inputs` appends the one-hot attribute columns.
    pub fn load(&self, sensitive_inputs: bool) -> std::result::Result<EncodedDataset, DataError> {
        match self {
            DataSource::Csv { path, schema, split_seed } => {
                let mut schema = match schema {
                    Some(p) => DatasetSchema::load(p)?,
                    None => DatasetSchema::adult(),
                };
                schema.include_sensitive |= sensitive_inputs;
                let table = load_csv(path, &schema)?;
                fit_encode(&table, &schema, *split_seed)
            }
            DataSource::Synth { spec, seed } => {
                let ds = synth_generate(spec, *seed)?;
                Ok(if sensitive_inputs { ds.with_sensitive_inputs() } else { ds })
            }
        }
    }
}

/// Methods compared in sweeps.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    FairCda,
    FairCdaNoIm,
    FairCdaNoOrth,
    Erm,
    Gapreg,
    AttributeLevel,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::FairCda, Method::FairCdaNoIm, Method::FairCdaNoOrth, Method::Erm, Method::Gapreg, Method::AttributeLevel];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::FairCda => "fair-cda",
            Method::FairCdaNoIm => "fair-cda-no-im",
            Method::FairCdaNoOrth => "fair-cda-no-orth",
            Method::Erm => "erm",
            Method::Gapreg => "gapreg",
            Method::AttributeLevel => "attribute-level",
        }
    }

    /// Whether runs of this method branch off a shared Stage 1.
    pub fn two_stage(self) -> bool {
        matches!(self, Method::FairCda | Method::FairCdaNoIm | Method::FairCdaNoOrth)
    }

    /// `base` specialised to this method with its sweep parameter (λ, weight or probability).
    pub fn configure(self, base: &TrainConfig, param: f64) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Method::FairCda => c.lambda = param,
            Method::FairCdaNoIm => {
                c.lambda = param;
                c.gamma = 1.0;
            }
            Method::FairCdaNoOrth => {
                c.lambda = param;
                c.orth = false;
            }
            Method::Erm => {
                c.beta = Some(0.0);
                c.lambda = 0.0;
                c.stage2_iters = 0;
            }
            Method::Gapreg => c.baseline = Some(Baseline::GapReg { weight: param }),
            Method::AttributeLevel => c.baseline = Some(Baseline::AttributeFlip { p: param }),
        }
        c
    }

    /// Default sweep grid.
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            Method::FairCda | Method::FairCdaNoIm | Method::FairCdaNoOrth => linear_grid(0.0, 1000.0, 20),
            Method::Erm => vec![0.0],
            Method::Gapreg => linear_grid(0.0, 10.0, 20),
            Method::AttributeLevel => linear_grid(0.0, 0.5, 6),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Method::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| format!("unknown method `{s}`"))
    }
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn linear_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// One aggregated sweep cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub method: Method,
    /// λ, or the baseline weight/probability.
    pub lambda: f64,
    pub seed_count: usize,
    pub task_mean: f64,
    pub task_std: Option<f64>,
    pub gap_metric: GapMetric,
    pub gap_mean: f64,
    pub gap_std: Option<f64>,
    pub dominated: bool,
}

/// Flags each (task, gap) point that another point beats on one axis without losing on the other.
pub fn dominated_flags(points: &[(f64, f64)]) -> Vec<bool> {
    points
        .iter()
        .map(|&(t, g)| points.iter().any(|&(t2, g2)| t2 >= t && g2 <= g && (t2 > t || g2 < g)))
        .collect()
}

pub const PARETO_HEADER: &str = "method\tlambda\tseed_count\ttask_mean\ttask_std\tgap_metric\tgap_mean\tgap_std\tdominated";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v}"))
}

pub fn pareto_tsv(points: &[ParetoPoint]) -> String {
    let mut s = String::from(PARETO_HEADER);
    s.push('\n');
    for p in points {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            p.method,
            p.lambda,
            p.seed_count,
            p.task_mean,
            opt(p.task_std),
            p.gap_metric.key(),
            p.gap_mean,
            opt(p.gap_std),
            p.dominated
        ));
    }
    s
}

pub fn parse_pareto_tsv(text: &str) -> std::result::Result<Vec<ParetoPoint>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(PARETO_HEADER) {
        return Err("unexpected header".into());
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 9 {
                return Err(format!("expected 9 fields: {l}"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{s}: {e}"));
            let optn = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            Ok(ParetoPoint {
                method: f[0].parse()?,
                lambda: num(f[1])?,
                seed_count: f[2].parse().map_err(|e| format!("{e}"))?,
                task_mean: num(f[3])?,
                task_std: optn(f[4])?,
                gap_metric: match f[5] {
                    "delta_dp" => GapMetric::Dp,
                    "delta_eo" => GapMetric::Eo,
                    o => return Err(format!("unknown gap metric {o}")),
                },
                gap_mean: num(f[6])?,
                gap_std: optn(f[7])?,
                dominated: f[8].parse().map_err(|e| format!("{e}"))?,
            })
        })
        .collect()
}

/// Outcome of one (method, parameter, seed) training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: Method,
    pub param: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap: Option<f64>,
    /// Stage-1 (or sole-stage) validation point, for two-stage diagnostics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage1_validation: Option<crate::trainer::ValPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<crate::trainer::ValPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CellResult {
    fn key(&self) -> (Method, u64, u64) {
        (self.method, self.param.to_bits(), self.seed)
    }

    pub fn ok(&self) -> bool {
        self.error.is_none() && self.task.is_some() && self.gap.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub methods: Vec<Method>,
    /// Per-method grids; methods without an entry use their default grid.
    pub grids: BTreeMap<Method, Vec<f64>>,
    pub seeds: Vec<u64>,
    /// Test metric on the accuracy axis.
    pub task_metric: String,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self { methods: vec![Method::FairCda], grids: BTreeMap::new(), seeds: (0..5).collect(), task_metric: "ap".into() }
    }
}

impl SweepSpec {
    pub fn grid(&self, m: Method) -> Vec<f64> {
        self.grids.get(&m).cloned().unwrap_or_else(|| m.default_grid())
    }
}

/// Datasets a sweep draws on; `with_sensitive` feeds the attribute-level baseline.
pub struct SweepData<'a> {
    pub plain: &'a EncodedDataset,
    pub with_sensitive: Option<&'a EncodedDataset>,
}

pub const RUNS_FILE: &str = "runs.jsonl";
pub const PARETO_FILE: &str = "pareto.tsv";

fn io_err(p: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |e| TrainError::Io(p.into(), e)
}

pub fn read_runs(dir: &Path) -> Result<Vec<CellResult>> {
    let p = dir.join(RUNS_FILE);
    if !p.exists() {
        return Ok(vec![]);
    }
    let text = std::fs::read_to_string(&p).map_err(io_err(&p))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

fn append_runs(dir: &Path, cells: &[CellResult]) -> Result<()> {
    let p = dir.join(RUNS_FILE);
    let mut f = OpenOptions::new().create(true).append(true).open(&p).map_err(io_err(&p))?;
    let mut s = String::new();
    for c in cells {
        s.push_str(&serde_json::to_string(c)?);
        s.push('\n');
    }
    f.write_all(s.as_bytes()).map_err(io_err(&p))
}

/// Trains one cell; `cache` holds shared Stage-1 checkpoints.
pub fn run_cell(
    method: Method,
    base: &TrainConfig,
    param: f64,
    seed: u64,
    data: &SweepData,
    cache: Option<&Path>,
) -> Result<TrainOutcome> {
    let cfg = method.configure(&TrainConfig { seed, ..base.clone() }, param);
    let ds = match method {
        Method::AttributeLevel => data
            .with_sensitive
            .ok_or_else(|| TrainError::Config("attribute-level needs a dataset with sensitive inputs".into()))?,
        _ => data.plain,
    };
    if method.two_stage() {
        let s1 = cached_stage1(&cfg, ds, cache)?;
        run_stage2(&cfg, ds, &s1)
    } else {
        train_full(&cfg, ds)
    }
}

/// Runs every missing (method, parameter, seed) cell, appending to `runs.jsonl`,
/// then rewrites `pareto.tsv` from the run log. Completed cells are never retrained.
pub fn run_sweep(base: &TrainConfig, data: &SweepData, spec: &SweepSpec, out: &Path) -> Result<Vec<ParetoPoint>> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let done: std::collections::HashSet<_> = read_runs(out)?.iter().filter(|c| c.ok()).map(CellResult::key).collect();
    let cache = out.join("cache");
    for &method in &spec.methods {
        for param in spec.grid(method) {
            let todo: Vec<u64> =
                spec.seeds.iter().copied().filter(|&s| !done.contains(&(method, param.to_bits(), s))).collect();
            if todo.is_empty() {
                continue;
            }
            log::info!("sweep {method} param={param} seeds={todo:?}");
            let cells: Vec<CellResult> = todo
                .par_iter()
                .map(|&seed| {
                    let res = run_cell(method, base, param, seed, data, Some(&cache));
                    let mut c = CellResult {
                        method,
                        param,
                        seed,
                        task: None,
                        gap: None,
                        stage1_validation: None,
                        validation: None,
                        error: None,
                    };
                    match res {
                        Ok(o) => {
                            let s = &o.record.summary;
                            c.task = s.test.get(&spec.task_metric);
                            c.gap = s.test.get(base.metric.key());
                            c.stage1_validation = Some(s.stage1_validation);
                            c.validation = Some(s.selected_validation);
                        }
                        Err(e) => {
                            log::warn!("sweep cell {method} param={param} seed={seed} failed: {e}");
                            c.error = Some(e.to_string());
                        }
                    }
                    c
                })
                .collect();
            append_runs(out, &cells)?;
        }
    }
    let points = aggregate_runs(&read_runs(out)?, base.metric);
    let p = out.join(PARETO_FILE);
    std::fs::write(&p, pareto_tsv(&points)).map_err(io_err(&p))?;
    Ok(points)
}

/// Aggregates successful runs per (method, parameter) and flags dominated points within each method.
/// The latest entry wins when a cell appears more than once.
pub fn aggregate_runs(runs: &[CellResult], metric: GapMetric) -> Vec<ParetoPoint> {
    let mut latest: BTreeMap<(Method, u64, u64), &CellResult> = BTreeMap::new();
    for c in runs.iter().filter(|c| c.ok()) {
        latest.insert(c.key(), c);
    }
    let mut cells: BTreeMap<(Method, u64), (f64, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for c in latest.values() {
        let e = cells.entry((c.method, c.param.to_bits())).or_insert((c.param, vec![], vec![]));
        e.1.push(c.task.unwrap());
        e.2.push(c.gap.unwrap());
    }
    let mut points: Vec<ParetoPoint> = cells
        .into_iter()
        .map(|((method, _), (lambda, tasks, gaps))| {
            let (task_mean, task_std) = mean_std(&tasks);
            let (gap_mean, gap_std) = mean_std(&gaps);
            ParetoPoint {
                method,
                lambda,
                seed_count: tasks.len(),
                task_mean,
                task_std,
                gap_metric: metric,
                gap_mean,
                gap_std,
                dominated: false,
            }
        })
        .collect();
    points.sort_by(|a, b| a.method.cmp(&b.method).then(a.lambda.total_cmp(&b.lambda)));
    for m in Method::ALL {
        let idx: Vec<usize> = (0..points.len()).filter(|&i| points[i].method == m).collect();
        let xy: Vec<(f64, f64)> = idx.iter().map(|&i| (points[i].task_mean, points[i].gap_mean)).collect();
        for (k, d) in dominated_flags(&xy).into_iter().enumerate() {
            points[idx[k]].dominated = d;
        }
    }
    points
}

/// Smallest gap among `front` points with task metric at least `anchor`.
pub fn gap_at_task(front: &[(f64, f64)], anchor: f64) -> Option<f64> {
    front.iter().filter(|p| p.0 >= anchor).map(|p| p.1).reduce(f64::min)
}

/// Largest task metric among `front` points with gap at most `anchor`.
pub fn task_at_gap(front: &[(f64, f64)], anchor: f64) -> Option<f64> {
    front.iter().filter(|p| p.1 <= anchor).map(|p| p.0).reduce(f64::max)
}

/// Spearman rank correlation with midranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let mid = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = mid;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx * vy).sqrt()
}

/// Per-sample minimal perturbation that flips the task prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub lambda: f64,
    pub cap: f64,
    pub step: f64,
    /// `None` is the ∞ sentinel: no flip on the grid.
    pub alpha_star: Vec<Option<f64>>,
    /// `(q, value)`; `None` values are ∞.
    pub quantiles: Vec<(f64, Option<f64>)>,
    pub flipped_fraction: f64,
    /// Share of samples whose α* exceeds the training λ (∞ counts as exceeding).
    pub fraction_above_lambda: f64,
    pub warnings: Vec<String>,
}

impl AuditReport {
    pub fn median(&self) -> Option<f64> {
        quantile(&self.alpha_star, 0.5)
    }
}

/// Nearest-rank quantile where `None` sorts above every finite value.
pub fn quantile(values: &[Option<f64>], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = values.iter().map(|x| x.unwrap_or(f64::INFINITY)).collect();
    v.sort_by(f64::total_cmp);
    let k = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    Some(v[k]).filter(|x| x.is_finite())
}

/// Walks `z_a` along the unit attribute-loss ascent direction on the grid
/// `step, 2·step, …, cap` and records where the task prediction first crosses 0.5.
pub fn audit(
    model: &TrainedModel,
    batch: &LabeledBatch,
    cap: f64,
    step: f64,
    lambda: f64,
) -> std::result::Result<AuditReport, DisentangleError> {
    let mut warnings = vec![];
    let grid: Vec<f64> = if cap > 0.0 && step > 0.0 {
        (1..).map(|k| k as f64 * step).take_while(|&a| a <= cap * (1.0 + 1e-12)).collect()
    } else {
        warnings.push(format!("empty perturbation grid (cap {cap}, step {step}); every sample reports ∞"));
        vec![]
    };
    let net = &model.net;
    let aug = model.head == Head::Aug;
    let mut alpha_star = Vec::with_capacity(batch.len());
    let rows: Vec<usize> = (0..batch.len()).collect();
    for chunk in rows.chunks(4096) {
        let mut g = Graph::new();
        let b = net.params.bind(&mut g, false)?;
        let x = g.constant(batch.x.select_rows(chunk))?;
        let a = g.constant(Tensor::column(chunk.iter().map(|&i| batch.a[i]).collect()))?;
        let f = net.extract(&mut g, &b, x)?;
        let dir = unit_directions(&attribute_gradient(net, &mut g, &b, f.z_a, a)?);
        let za = g.value(f.z_a).clone();
        let logits = |g: &mut Graph, z: Tensor| -> std::result::Result<Vec<f64>, DisentangleError> {
            let z = g.constant(z)?;
            let u = net.task_logits(g, &b, f.z_y, z, aug)?;
            Ok(g.value(u).data().iter().map(|&v| sigmoid(v)).collect())
        };
        let base: Vec<bool> = logits(&mut g, za.clone())?.iter().map(|&p| p >= 0.5).collect();
        let mut found: Vec<Option<f64>> = vec![None; chunk.len()];
        for &alpha in &grid {
            if found.iter().all(Option::is_some) {
                break;
            }
            let z = za.zip_map(&dir, |z, d| z + alpha * d);
            let p = logits(&mut g, z)?;
            for (i, (&pi, &b0)) in p.iter().zip(&base).enumerate() {
                if found[i].is_none() && (pi >= 0.5) != b0 {
                    found[i] = Some(alpha);
                }
            }
        }
        alpha_star.extend(found);
    }
    let n = alpha_star.len().max(1) as f64;
    let qs = [0.1, 0.25, 0.5, 0.75, 0.9];
    Ok(AuditReport {
        lambda,
        cap,
        step,
        quantiles: qs.iter().map(|&q| (q, quantile(&alpha_star, q))).collect(),
        flipped_fraction: alpha_star.iter().filter(|a| a.is_some()).count() as f64 / n,
        fraction_above_lambda: alpha_star.iter().filter(|a| a.is_none_or(|v| v > lambda)).count() as f64 / n,
        alpha_star,
        warnings,
    })
}

/// Imputer behavior on the augmented members of synthetic feature pairs.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairProbe {
    pub members: usize,
    /// Members whose imputed label crosses 0.5 away from their observed label.
    pub flipped: usize,
}

impl PairProbe {
    pub fn fraction(&self) -> f64 {
        self.flipped as f64 / self.members.max(1) as f64
    }
}

/// Augments every pair member with the end-of-Stage-1 network at budget `lambda`
/// and imputes labels with its frozen task head.
pub fn pair_flip_probe(s1: &Stage1Output, ds: &EncodedDataset, lambda: f64, seed: u64) -> Result<PairProbe> {
    let rows: Vec<usize> = ds.pairs.iter().flat_map(|&(i, j)| [i, j]).collect();
    if rows.is_empty() {
        return Err(TrainError::Config("dataset has no feature pairs".into()));
    }
    let mut net = s1.net.clone();
    if net.imputation().is_none() {
        net.freeze_imputation()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let aug = augment_batch(&net, &ds.rows(&rows), lambda, &mut rng)?;
    Ok(PairProbe { members: rows.len(), flipped: aug.label_flips().expect("imputation copy is frozen") })
}

/// Metric report of `model` on one split.
pub fn evaluate(model: &TrainedModel, ds: &EncodedDataset, split: Split, seed: u64) -> Result<MetricReport> {
    model.evaluate(&ds.slice(split), split, seed)
}

/// Full experiment description: data, training and sweep settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub train: TrainConfig,
    pub sweep: SweepSpec,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }
}

#[cfg(test)]
mod tests;
