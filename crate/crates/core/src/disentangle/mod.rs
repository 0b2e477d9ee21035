//! The two-branch network and the Stage-1 losses, including the
//! gradient-orthogonality penalty.

use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};
use crate::data::LabeledBatch;
use crate::nn::{
    init_parameters, mlp_forward, Activation, Binding, Group, NetworkSpec, NnError, ParameterStore,
};

/// Per-sample gradient norms below this contribute nothing to the penalty.
pub const GRAD_GUARD: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DisentangleError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("imputation copy has not been frozen")]
    NotFrozen,
    #[error("imputation copy is already frozen")]
    AlreadyFrozen,
    #[error("loss weight beta must be finite and non-negative, got {0}")]
    InvalidBeta(f64),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("features are not an ancestor of the {0} loss")]
    Unreachable(&'static str),
}

pub type Result<T> = std::result::Result<T, DisentangleError>;

/// Layer widths of the two-branch network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: usize,
    /// Widths of the shared extractor `h`.
    pub hidden: Vec<usize>,
    /// Width of each branch `h_y`, `h_a`.
    pub branch: usize,
}

impl Architecture {
    /// Two 200-wide extractor layers followed by 200-wide branches.
    pub fn adult(input: usize) -> Self {
        Self { input, hidden: vec![200, 200], branch: 200 }
    }

    pub fn feature_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input)
    }

    fn push_extractor(&self, spec: &mut NetworkSpec) {
        let mut dims = vec![self.input];
        dims.extend(&self.hidden);
        spec.push_chain(Group::H, &dims, Activation::Relu, Activation::Relu);
    }

    /// All seven groups: `h`, `h_y`, `h_a`, `g_y`, `g_a`, `g`, `g_aug`.
    pub fn spec(&self) -> NetworkSpec {
        let mut spec = NetworkSpec::default();
        self.push_extractor(&mut spec);
        let f = self.feature_dim();
        spec.push_chain(Group::HY, &[f, self.branch], Activation::Relu, Activation::Relu);
        spec.push_chain(Group::HA, &[f, self.branch], Activation::Relu, Activation::Relu);
        spec.push_chain(Group::GY, &[self.branch, 1], Activation::Identity, Activation::Identity);
        spec.push_chain(Group::GA, &[self.branch, 1], Activation::Identity, Activation::Identity);
        spec.push_chain(Group::G, &[2 * self.branch, 1], Activation::Identity, Activation::Identity);
        spec.push_chain(Group::GAug, &[2 * self.branch, 1], Activation::Identity, Activation::Identity);
        spec
    }

    /// The plain backbone: extractor plus one classification layer.
    pub fn backbone_spec(&self) -> NetworkSpec {
        let mut spec = NetworkSpec::default();
        self.push_extractor(&mut spec);
        spec.push_chain(Group::G, &[self.feature_dim(), 1], Activation::Identity, Activation::Identity);
        spec
    }
}

/// Graph nodes of the three feature tensors.
#[derive(Copy, Clone, Debug)]
pub struct Features {
    pub z: NodeId,
    pub z_y: NodeId,
    pub z_a: NodeId,
}

#[derive(Clone, Debug)]
pub struct FairCdaNetwork {
    pub arch: Architecture,
    pub spec: NetworkSpec,
    pub params: ParameterStore,
    imputation: Option<Arc<ParameterStore>>,
}

impl FairCdaNetwork {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let spec = arch.spec();
        let params = init_parameters(&spec, seed)?;
        Ok(Self { arch, spec, params, imputation: None })
    }

    pub fn from_parts(arch: Architecture, params: ParameterStore, imputation: Option<ParameterStore>) -> Result<Self> {
        let spec = arch.spec();
        spec.validate()?;
        for l in &spec.layers {
            for name in [l.weight_name(), l.bias_name()] {
                if params.get(&name).is_none() {
                    return Err(NnError::UnknownParam(name).into());
                }
            }
        }
        Ok(Self { arch, spec, params, imputation: imputation.map(Arc::new) })
    }

    /// Snapshots `h`, `h_y`, `h_a` and `g` as the frozen imputation model.
    pub fn freeze_imputation(&mut self) -> Result<()> {
        if self.imputation.is_some() {
            return Err(DisentangleError::AlreadyFrozen);
        }
        let mut copy = ParameterStore::new();
        for (name, p) in self.params.iter() {
            if matches!(p.group, Group::H | Group::HY | Group::HA | Group::G) {
                copy.insert(name, p.group, p.tensor.clone())?;
            }
        }
        self.imputation = Some(Arc::new(copy));
        Ok(())
    }

    pub fn imputation(&self) -> Option<&ParameterStore> {
        self.imputation.as_deref()
    }

    /// Copies `g` onto `g_aug`.
    pub fn init_aug_head(&mut self) -> Result<()> {
        let src = self.params.clone();
        self.params.copy_group(&src, Group::G, Group::GAug)?;
        Ok(())
    }

    pub fn extract(&self, graph: &mut Graph, binding: &Binding, x: NodeId) -> Result<Features> {
        let z = mlp_forward(graph, binding, self.spec.group(Group::H), x)?;
        let z_y = mlp_forward(graph, binding, self.spec.group(Group::HY), z)?;
        let z_a = mlp_forward(graph, binding, self.spec.group(Group::HA), z)?;
        Ok(Features { z, z_y, z_a })
    }

    /// Logits of one of the heads.
    pub fn head(&self, graph: &mut Graph, binding: &Binding, group: Group, input: NodeId) -> Result<NodeId> {
        Ok(mlp_forward(graph, binding, self.spec.group(group), input)?)
    }

    /// Task-head logits on `[z_y, z_a]`.
    pub fn task_logits(&self, graph: &mut Graph, binding: &Binding, z_y: NodeId, z_a: NodeId, aug: bool) -> Result<NodeId> {
        let cat = graph.concat(z_y, z_a)?;
        self.head(graph, binding, if aug { Group::GAug } else { Group::G }, cat)
    }

    /// Feature tensors and probabilities of the three heads for every row of `x`.
    pub fn infer(&self, x: &Tensor) -> Result<Inference> {
        const CHUNK: usize = 4096;
        let n = x.shape()[0];
        let mut out = Inference::default();
        let rows: Vec<usize> = (0..n).collect();
        for chunk in rows.chunks(CHUNK) {
            let mut g = Graph::new();
            let b = self.params.bind(&mut g, false)?;
            let xn = g.constant(x.select_rows(chunk))?;
            let f = self.extract(&mut g, &b, xn)?;
            let task = self.task_logits(&mut g, &b, f.z_y, f.z_a, false)?;
            let aug = self.task_logits(&mut g, &b, f.z_y, f.z_a, true)?;
            let attr = self.head(&mut g, &b, Group::GA, f.z_a)?;
            let prob = |t: &Tensor| t.data().iter().map(|&v| crate::autodiff::sigmoid(v)).collect::<Vec<_>>();
            out.task.extend(prob(g.value(task)));
            out.aug.extend(prob(g.value(aug)));
            out.attribute.extend(prob(g.value(attr)));
            out.z_y.extend_from_slice(g.value(f.z_y).data());
            out.z_a.extend_from_slice(g.value(f.z_a).data());
        }
        out.branch = self.arch.branch;
        Ok(out)
    }
}

/// Row-aligned outputs of a forward pass without gradients.
#[derive(Clone, Debug, Default)]
pub struct Inference {
    /// `sigmoid(g([z_y, z_a]))`.
    pub task: Vec<f64>,
    /// `sigmoid(g_aug([z_y, z_a]))`.
    pub aug: Vec<f64>,
    /// `sigmoid(g_a(z_a))`.
    pub attribute: Vec<f64>,
    pub z_y: Vec<f64>,
    pub z_a: Vec<f64>,
    pub branch: usize,
}

impl Inference {
    pub fn z_y(&self) -> Tensor {
        Tensor::from_vec(&[self.task.len(), self.branch], self.z_y.clone())
    }

    pub fn z_a(&self) -> Tensor {
        Tensor::from_vec(&[self.task.len(), self.branch], self.z_a.clone())
    }
}

/// Per-row bce of the branch heads: `(g_y(z_y), y)` and `(g_a(z_a), a)`, each `[n, 1]`.
pub fn branch_losses(
    net: &FairCdaNetwork,
    graph: &mut Graph,
    binding: &Binding,
    feats: &Features,
    y: NodeId,
    a: NodeId,
) -> Result<(NodeId, NodeId)> {
    let ly = net.head(graph, binding, Group::GY, feats.z_y)?;
    let la = net.head(graph, binding, Group::GA, feats.z_a)?;
    Ok((graph.bce_logits(ly, y)?, graph.bce_logits(la, a)?))
}

/// Per-row bce of the task head `g` (or `g_aug`) on `[z_y, z_a]`.
pub fn task_loss(
    net: &FairCdaNetwork,
    graph: &mut Graph,
    binding: &Binding,
    z_y: NodeId,
    z_a: NodeId,
    y: NodeId,
    use_aug_head: bool,
) -> Result<NodeId> {
    let logits = net.task_logits(graph, binding, z_y, z_a, use_aug_head)?;
    Ok(graph.bce_logits(logits, y)?)
}

/// Per-row squared cosine of two `[n, d]` gradient tensors, `[n, 1]`.
/// Rows where either norm is below [`GRAD_GUARD`] are 0.
pub fn gradient_cos2(graph: &mut Graph, gy: NodeId, ga: NodeId) -> Result<NodeId> {
    let prod = graph.mul(gy, ga)?;
    let dots = graph.sum_cols(prod)?;
    let sy = graph.square(gy)?;
    let ny = graph.sum_cols(sy)?;
    let sa = graph.square(ga)?;
    let na = graph.sum_cols(sa)?;
    let guard2 = GRAD_GUARD * GRAD_GUARD;
    let mask = graph.value(ny).zip_map(graph.value(na), |u, v| if u >= guard2 && v >= guard2 { 1.0 } else { 0.0 });
    let fill = mask.map(|m| 1.0 - m);
    let mask = graph.constant(mask)?;
    let fill = graph.constant(fill)?;
    let num = graph.square(dots)?;
    let den = graph.mul(ny, na)?;
    let den = graph.add(den, fill)?;
    let ratio = graph.div(num, den)?;
    Ok(graph.mul(ratio, mask)?)
}

/// Per-row `⟨∇_z ℓ_y, ∇_z ℓ_a⟩² / (‖∇_z ℓ_y‖² ‖∇_z ℓ_a‖²)`.
///
/// `ly_sum` and `la_sum` must be sums of per-row losses, so that row `i` of
/// the gradient with respect to `z` is the gradient of sample `i`'s own loss.
pub fn orth_loss(graph: &mut Graph, ly_sum: NodeId, la_sum: NodeId, z: NodeId) -> Result<NodeId> {
    let gy = graph.grad_wrt(ly_sum, z)?;
    if !gy.reachable {
        return Err(DisentangleError::Unreachable("label-branch"));
    }
    let ga = graph.grad_wrt(la_sum, z)?;
    if !ga.reachable {
        return Err(DisentangleError::Unreachable("attribute-branch"));
    }
    gradient_cos2(graph, gy.node, ga.node)
}

/// Batch means of the four loss terms.
#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub task: f64,
    pub label_branch: f64,
    pub attr_branch: f64,
    pub orth: f64,
}

/// Graph nodes of the per-row terms (`[n, 1]`) and of the objective.
#[derive(Copy, Clone, Debug)]
pub struct Stage1Terms {
    pub total: NodeId,
    pub task_rows: NodeId,
    pub ly_rows: NodeId,
    pub la_rows: NodeId,
    /// `None` when the penalty is disabled.
    pub orth_rows: Option<NodeId>,
    pub feats: Features,
}

impl Stage1Terms {
    pub fn bundle(&self, graph: &Graph) -> LossBundle {
        let m = |id: NodeId| {
            let v = graph.value(id);
            v.sum() / v.len() as f64
        };
        LossBundle {
            task: m(self.task_rows),
            label_branch: m(self.ly_rows),
            attr_branch: m(self.la_rows),
            orth: self.orth_rows.map_or(0.0, m),
        }
    }
}

/// Shared pieces of both stage objectives: features, branch losses and the penalty.
pub(crate) struct Regularizer {
    pub feats: Features,
    pub ly_rows: NodeId,
    pub la_rows: NodeId,
    pub orth_rows: Option<NodeId>,
    /// `mean(ℓ_y) + mean(ℓ_a) + mean(L⊥)`.
    pub sum: NodeId,
}

pub(crate) fn regularizer(
    net: &FairCdaNetwork,
    graph: &mut Graph,
    binding: &Binding,
    x: NodeId,
    y: NodeId,
    a: NodeId,
    orth: bool,
) -> Result<Regularizer> {
    let feats = net.extract(graph, binding, x)?;
    let (ly_rows, la_rows) = branch_losses(net, graph, binding, &feats, y, a)?;
    let ly_sum = graph.sum(ly_rows)?;
    let la_sum = graph.sum(la_rows)?;
    let n = graph.value(ly_rows).len() as f64;
    let mut sum = graph.add(ly_sum, la_sum)?;
    let orth_rows = if orth {
        let rows = orth_loss(graph, ly_sum, la_sum, feats.z)?;
        let s = graph.sum(rows)?;
        sum = graph.add(sum, s)?;
        Some(rows)
    } else {
        None
    };
    let sum = graph.scale(sum, 1.0 / n)?;
    Ok(Regularizer { feats, ly_rows, la_rows, orth_rows, sum })
}

pub(crate) fn check_beta(beta: f64) -> Result<()> {
    if !beta.is_finite() || beta < 0.0 {
        return Err(DisentangleError::InvalidBeta(beta));
    }
    Ok(())
}

/// `mean(L) + beta * (mean(L_y) + mean(L_a) + mean(L⊥))` on one batch.
pub fn stage1_objective(
    net: &FairCdaNetwork,
    graph: &mut Graph,
    binding: &Binding,
    batch: &LabeledBatch,
    beta: f64,
    orth: bool,
) -> Result<Stage1Terms> {
    check_beta(beta)?;
    let x = graph.constant(batch.x.clone())?;
    let y = graph.constant(batch.y_column())?;
    let a = graph.constant(batch.a_column())?;
    let reg = regularizer(net, graph, binding, x, y, a, orth && beta > 0.0)?;
    let task_rows = task_loss(net, graph, binding, reg.feats.z_y, reg.feats.z_a, y, false)?;
    let task = graph.mean(task_rows)?;
    let weighted = graph.scale(reg.sum, beta)?;
    let total = graph.add(task, weighted)?;
    if !graph.value(total).is_finite() {
        return Err(DisentangleError::NonFinite("stage-1 objective"));
    }
    Ok(Stage1Terms { total, task_rows, ly_rows: reg.ly_rows, la_rows: reg.la_rows, orth_rows: reg.orth_rows, feats: reg.feats })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `median(ℓ_i) / median(ℓ_i^y + ℓ_i^a + ℓ_i^⊥)` over the rows of one batch.
pub fn auto_beta(net: &FairCdaNetwork, batch: &LabeledBatch, orth: bool) -> Result<f64> {
    let mut g = Graph::new();
    let b = net.params.bind(&mut g, true)?;
    let t = stage1_objective(net, &mut g, &b, batch, 1.0, orth)?;
    let task = g.value(t.task_rows).data().to_vec();
    let mut reg: Vec<f64> = g.value(t.ly_rows).zip_map(g.value(t.la_rows), |u, v| u + v).into_data();
    if let Some(o) = t.orth_rows {
        for (r, v) in reg.iter_mut().zip(g.value(o).data()) {
            *r += v;
        }
    }
    let den = median(reg);
    let beta = median(task) / den;
    if !beta.is_finite() || den <= 0.0 {
        return Err(DisentangleError::NonFinite("initial-loss ratio for beta"));
    }
    Ok(beta)
}
