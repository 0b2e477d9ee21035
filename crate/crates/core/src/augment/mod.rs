//! Directional perturbation of sensitive features, imputed labels and the Stage-2 objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, NodeId, Tensor};
use crate::data::LabeledBatch;
use crate::disentangle::{
    check_beta, regularizer, DisentangleError, FairCdaNetwork, Features, Result, GRAD_GUARD,
};
use crate::nn::{Binding, Group};

/// Rows of `grad` scaled to unit length; rows with norm below the guard become zero.
pub fn unit_directions(grad: &Tensor) -> Tensor {
    let (n, d) = grad.dims2().expect("gradient is a matrix");
    let mut out = grad.clone();
    for i in 0..n {
        let row = &mut out.data_mut()[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < GRAD_GUARD {
            row.iter_mut().for_each(|v| *v = 0.0);
        } else {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

/// `z_a + alpha_i * grad_i / ‖grad_i‖` per row; rows with a vanishing gradient are unchanged.
pub fn perturb(z_a: &Tensor, grad: &Tensor, alpha: &[f64]) -> Result<Tensor> {
    if z_a.shape() != grad.shape() || z_a.dims2().map(|d| d.0) != Some(alpha.len()) {
        return Err(DisentangleError::Autodiff(crate::autodiff::AutodiffError::ShapeMismatch {
            op: "perturb",
            lhs: z_a.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        }));
    }
    Ok(z_a.zip_map(&offsets(grad, alpha), |z, o| z + o))
}

/// `alpha_i * grad_i / ‖grad_i‖`.
fn offsets(grad: &Tensor, alpha: &[f64]) -> Tensor {
    let mut dir = unit_directions(grad);
    let d = dir.shape()[1];
    for (i, &al) in alpha.iter().enumerate() {
        dir.data_mut()[i * d..(i + 1) * d].iter_mut().for_each(|v| *v *= al);
    }
    dir
}

/// `n` draws from `U(0, lambda)`. The same stream of uniforms is consumed for
/// every `lambda`, so equal seeds give proportional draws.
pub fn sample_alpha<R: Rng + ?Sized>(lambda: f64, n: usize, rng: &mut R) -> Vec<f64> {
    assert!(lambda.is_finite() && lambda >= 0.0, "lambda must be finite and non-negative");
    (0..n).map(|_| lambda * rng.random::<f64>()).collect()
}

/// Gradient of the summed attribute cross-entropy of the current `g_a` with respect to `z_a`.
pub fn attribute_gradient(
    net: &FairCdaNetwork,
    graph: &mut Graph,
    binding: &Binding,
    z_a: NodeId,
    a: NodeId,
) -> Result<Tensor> {
    let logits = net.head(graph, binding, Group::GA, z_a)?;
    let rows = graph.bce_logits(logits, a)?;
    let s = graph.sum(rows)?;
    let g = graph.grad_wrt(s, z_a)?;
    Ok(graph.value(g.node).clone())
}

/// Probabilities of the frozen task head `g` on `[z_y, z_a_tilde]`; thresholded at 0.5 when `hard`.
pub fn impute_labels(net: &FairCdaNetwork, z_y: &Tensor, z_a_tilde: &Tensor, hard: bool) -> Result<Vec<f64>> {
    let imp = net.imputation().ok_or(DisentangleError::NotFrozen)?;
    let mut g = Graph::new();
    let b = imp.bind(&mut g, false)?;
    let zy = g.constant(z_y.clone())?;
    let za = g.constant(z_a_tilde.clone())?;
    let logits = net.task_logits(&mut g, &b, zy, za, false)?;
    Ok(g
        .value(logits)
        .data()
        .iter()
        .map(|&u| {
            let p = sigmoid(u);
            if hard {
                if p >= 0.5 { 1.0 } else { 0.0 }
            } else {
                p
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedBatch {
    pub z_y: Tensor,
    pub z_a: Tensor,
    pub z_a_tilde: Tensor,
    pub alpha: Vec<f64>,
    pub y: Vec<f64>,
    pub a: Vec<f64>,
    /// Imputed labels; empty when no imputation copy is frozen.
    pub y_check: Vec<f64>,
}

/// Augments the batch with the current extractors and attribute head.
pub fn augment_batch<R: Rng + ?Sized>(
    net: &FairCdaNetwork,
    batch: &LabeledBatch,
    lambda: f64,
    rng: &mut R,
) -> Result<AugmentedBatch> {
    let alpha = sample_alpha(lambda, batch.len(), rng);
    augment_with(net, batch, alpha)
}

pub fn augment_with(net: &FairCdaNetwork, batch: &LabeledBatch, alpha: Vec<f64>) -> Result<AugmentedBatch> {
    let mut g = Graph::new();
    let b = net.params.bind(&mut g, false)?;
    let x = g.constant(batch.x.clone())?;
    let a = g.constant(batch.a_column())?;
    let f = net.extract(&mut g, &b, x)?;
    let grad = attribute_gradient(net, &mut g, &b, f.z_a, a)?;
    let z_a = g.value(f.z_a).clone();
    let z_a_tilde = perturb(&z_a, &grad, &alpha)?;
    let z_y = g.value(f.z_y).clone();
    let y_check = match net.imputation() {
        Some(_) => impute_labels(net, &z_y, &z_a_tilde, false)?,
        None => vec![],
    };
    Ok(AugmentedBatch { z_y, z_a, z_a_tilde, alpha, y: batch.y.clone(), a: batch.a.clone(), y_check })
}

impl AugmentedBatch {
    /// Share of rows whose current attribute head, applied to the augmented
    /// features, predicts the opposite of the true attribute.
    pub fn attribute_flip_rate(&self, net: &FairCdaNetwork) -> Result<f64> {
        let mut g = Graph::new();
        let b = net.params.bind(&mut g, false)?;
        let za = g.constant(self.z_a_tilde.clone())?;
        let logits = net.head(&mut g, &b, Group::GA, za)?;
        let flips = g
            .value(logits)
            .data()
            .iter()
            .zip(&self.a)
            .filter(|(&u, &a)| (sigmoid(u) >= 0.5) != (a > 0.5))
            .count();
        Ok(flips as f64 / self.a.len() as f64)
    }

    /// Rows whose imputed label lands on the other side of 0.5 from the observed label.
    /// `None` without an imputation copy.
    pub fn label_flips(&self) -> Option<usize> {
        if self.y_check.len() != self.y.len() {
            return None;
        }
        Some(self.y_check.iter().zip(&self.y).filter(|(&c, &y)| (c > 0.5) != (y > 0.5)).count())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Options {
    pub gamma: f64,
    pub beta: f64,
    pub orth: bool,
    /// Threshold imputed probabilities at 0.5.
    pub hard_labels: bool,
    /// Also fit `g_aug` on the unperturbed features.
    pub supplement: bool,
}

impl Default for Stage2Options {
    fn default() -> Self {
        Self { gamma: 0.9, beta: 1.0, orth: true, hard_labels: false, supplement: false }
    }
}

#[derive(Clone, Debug)]
pub struct Stage2Terms {
    pub total: NodeId,
    /// `bce(g_aug([z_y, z̃_a]), y)` per row.
    pub aug_rows: NodeId,
    /// `bce(g_aug([z_y, z̃_a]), y̌)` per row; absent when `gamma == 1`.
    pub imp_rows: Option<NodeId>,
    pub ly_rows: NodeId,
    pub la_rows: NodeId,
    pub orth_rows: Option<NodeId>,
    pub feats: Features,
    pub z_a_tilde: NodeId,
    pub y_check: Vec<f64>,
}

/// Quantities Stage 2 treats as constants: the perturbation offsets
/// `alpha_i * d_i / ‖d_i‖` and the imputed labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Inputs {
    pub offsets: Tensor,
    /// `None` when `gamma == 1`.
    pub y_check: Option<Vec<f64>>,
}

/// Evaluates the offsets and imputed labels at the current parameters.
pub fn stage2_inputs(net: &FairCdaNetwork, batch: &LabeledBatch, alpha: &[f64], opts: &Stage2Options) -> Result<Stage2Inputs> {
    let mut g = Graph::new();
    let b = net.params.bind(&mut g, false)?;
    let x = g.constant(batch.x.clone())?;
    let a = g.constant(batch.a_column())?;
    let f = net.extract(&mut g, &b, x)?;
    let grad = attribute_gradient(net, &mut g, &b, f.z_a, a)?;
    if grad.dims2().map(|d| d.0) != Some(alpha.len()) {
        return Err(DisentangleError::Autodiff(crate::autodiff::AutodiffError::ShapeMismatch {
            op: "alpha",
            lhs: grad.shape().to_vec(),
            rhs: vec![alpha.len()],
        }));
    }
    let offsets = offsets(&grad, alpha);
    let y_check = if opts.gamma < 1.0 {
        let z_a_tilde = g.value(f.z_a).zip_map(&offsets, |z, o| z + o);
        Some(impute_labels(net, g.value(f.z_y), &z_a_tilde, opts.hard_labels)?)
    } else {
        None
    };
    Ok(Stage2Inputs { offsets, y_check })
}

/// `γ·mean(L̃) + (1-γ)·mean(Ľ) + β·(mean(L_y) + mean(L_a) + mean(L⊥))` with
/// perturbation sizes `alpha`. Offsets and imputed labels are constants.
pub fn stage2_objective(
    net: &FairCdaNetwork,
    graph: &mut Graph,
    binding: &Binding,
    batch: &LabeledBatch,
    alpha: &[f64],
    opts: &Stage2Options,
) -> Result<Stage2Terms> {
    let inputs = stage2_inputs(net, batch, alpha, opts)?;
    stage2_objective_with(net, graph, binding, batch, &inputs, opts)
}

pub fn stage2_objective_with(
    net: &FairCdaNetwork,
    graph: &mut Graph,
    binding: &Binding,
    batch: &LabeledBatch,
    inputs: &Stage2Inputs,
    opts: &Stage2Options,
) -> Result<Stage2Terms> {
    check_beta(opts.beta)?;
    if !(0.0..=1.0).contains(&opts.gamma) {
        return Err(DisentangleError::NonFinite("gamma outside [0, 1]"));
    }
    let x = graph.constant(batch.x.clone())?;
    let y = graph.constant(batch.y_column())?;
    let a = graph.constant(batch.a_column())?;
    let reg = regularizer(net, graph, binding, x, y, a, opts.orth && opts.beta > 0.0)?;
    let feats = reg.feats;
    let off = graph.constant(inputs.offsets.clone())?;
    let z_a_tilde = graph.add(feats.z_a, off)?;
    let logits = net.task_logits(graph, binding, feats.z_y, z_a_tilde, true)?;
    let aug_rows = graph.bce_logits(logits, y)?;
    let aug = graph.mean(aug_rows)?;
    let mut total = graph.scale(aug, opts.gamma)?;
    let mut imp_rows = None;
    let mut y_check = vec![];
    if opts.gamma < 1.0 {
        let yc = inputs.y_check.as_ref().ok_or(DisentangleError::NotFrozen)?;
        let t = graph.constant(Tensor::column(yc.clone()))?;
        let rows = graph.bce_logits(logits, t)?;
        let m = graph.mean(rows)?;
        let w = graph.scale(m, 1.0 - opts.gamma)?;
        total = graph.add(total, w)?;
        imp_rows = Some(rows);
        y_check = yc.clone();
    }
    if opts.supplement {
        let orig = net.task_logits(graph, binding, feats.z_y, feats.z_a, true)?;
        let rows = graph.bce_logits(orig, y)?;
        let m = graph.mean(rows)?;
        total = graph.add(total, m)?;
    }
    let weighted = graph.scale(reg.sum, opts.beta)?;
    let total = graph.add(total, weighted)?;
    if !graph.value(total).is_finite() {
        return Err(DisentangleError::NonFinite("stage-2 objective"));
    }
    Ok(Stage2Terms {
        total,
        aug_rows,
        imp_rows,
        ly_rows: reg.ly_rows,
        la_rows: reg.la_rows,
        orth_rows: reg.orth_rows,
        feats,
        z_a_tilde,
        y_check,
    })
}
