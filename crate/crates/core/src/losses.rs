//! Training losses and the pieces they are built from.
//!
//! Plain-value functions (`ce_candidates`, `mask_matrix`, ...) operate on a
//! single graph and serve as references; the tape versions operate on a whole
//! [`Batch`] and are what training differentiates.

use serde::{Deserialize, Serialize};

use crate::autodiff::{masked_column_mean, softmax, ParamIdx, ParamStore, Tape, Var, LOG_FLOOR, MASK_EPS};
use crate::error::{ModelError, NumericError};
use crate::graph::CandidateLabelSet;
use crate::model::{Batch, Model};
use crate::tensor::Tensor;

/// Mean candidate cross-entropy of one prediction, and whether any
/// probability had to be clamped to [`LOG_FLOOR`].
pub fn ce_candidates(pred: &[f64], candidates: &CandidateLabelSet) -> (f64, bool) {
    let k = candidates.len() as f64;
    let mut clamped = false;
    let total: f64 = candidates
        .classes()
        .iter()
        .map(|&c| {
            let p = pred[c];
            if p < LOG_FLOOR {
                clamped = true;
                -LOG_FLOOR.ln()
            } else {
                -p.ln()
            }
        })
        .sum();
    (total / k, clamped)
}

/// Column-normalized absolute projections; a column whose absolute sum is
/// below [`MASK_EPS`] becomes uniform.
pub fn mask_matrix(proj: &Tensor) -> Tensor {
    let (n, d) = proj.shape();
    let mut m = Tensor::zeros(n, d);
    for c in 0..d {
        let s: f64 = (0..n).map(|l| proj.get(l, c).abs()).sum();
        for l in 0..n {
            let v = if s < MASK_EPS {
                1.0 / n as f64
            } else {
                proj.get(l, c).abs() / s
            };
            m.set(l, c, v);
        }
    }
    m
}

/// `softmax(sum_l (M o proj)[l])` for one graph.
pub fn node_level_prediction(proj: &Tensor) -> Vec<f64> {
    softmax(&masked_column_mean(proj, 0..proj.rows()))
}

/// Elementwise `exp(v^lambda)`.
pub fn epow(v: &[f64], lambda: u32) -> Vec<f64> {
    v.iter().map(|x| x.powi(lambda as i32).exp()).collect()
}

/// Node-level class probabilities `B x D` from batched projections.
pub fn node_level_probs(tape: &mut Tape, proj: Var, batch: &Batch) -> Result<Var, NumericError> {
    let s = tape.segment_masked_mean(proj, &batch.spans)?;
    tape.softmax_rows(s)
}

/// `-(1 / B) sum_i (1 / K_i) sum_k log probs[i, y_ik]`.
pub fn candidate_nll(
    tape: &mut Tape,
    probs: Var,
    candidates: &[&CandidateLabelSet],
) -> Result<Var, NumericError> {
    let b = candidates.len() as f64;
    let entries = candidates
        .iter()
        .enumerate()
        .flat_map(|(i, c)| {
            let w = -1.0 / (b * c.len() as f64);
            c.classes().iter().map(move |&d| (i, d, w))
        })
        .collect();
    let logs = tape.log(probs)?;
    tape.weighted_sum(logs, entries)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// For each node, the most cosine-similar prototype if that similarity is at
/// least `beta` (lowest index on ties), else `None`.
pub fn assign_prototypes(nodes: &Tensor, prototypes: &Tensor, beta: f64) -> Vec<Option<usize>> {
    nodes
        .iter_rows()
        .map(|z| {
            let mut best: Option<(usize, f64)> = None;
            for (j, c) in prototypes.iter_rows().enumerate() {
                let s = cosine(z, c);
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((j, s));
                }
            }
            best.filter(|&(_, s)| s >= beta).map(|(j, _)| j)
        })
        .collect()
}

/// The `w` rows: `o_j` for nodes assigned to prototype `j`, zero otherwise.
pub fn assign_w(nodes: &Tensor, prototypes: &Tensor, outputs: &Tensor, beta: f64) -> Tensor {
    let assignment = assign_prototypes(nodes, prototypes, beta);
    let mut w = Tensor::zeros(nodes.rows(), outputs.cols());
    for (l, a) in assignment.iter().enumerate() {
        if let Some(j) = a {
            w.row_mut(l).copy_from_slice(outputs.row(*j));
        }
    }
    w
}

/// `B x J` matrix whose row `i` holds, per prototype, the fraction of graph
/// `i`'s nodes assigned to it; `counts * O` is then the per-graph mean `w`.
pub fn assignment_fractions(assignment: &[Option<usize>], batch: &Batch, prototypes: usize) -> Tensor {
    let mut f = Tensor::zeros(batch.len(), prototypes);
    for (i, span) in batch.spans.iter().enumerate() {
        let inv = 1.0 / span.len() as f64;
        for &j in assignment[span.clone()].iter().flatten() {
            f.set(i, j, f.get(i, j) + inv);
        }
    }
    f
}

/// `sum_i sum_k -(mean w_i)[y_ik]^lambda`; only `outputs` receives gradient.
pub fn loss_v(
    tape: &mut Tape,
    fractions: &Tensor,
    outputs: Var,
    candidates: &[&CandidateLabelSet],
    lambda: u32,
) -> Result<Var, NumericError> {
    let f = tape.constant(fractions.clone())?;
    let mean_w = tape.matmul(f, outputs)?;
    let powered = tape.pow(mean_w, lambda)?;
    let entries = candidates
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.classes().iter().map(move |&d| (i, d, -1.0)))
        .collect();
    tape.weighted_sum(powered, entries)
}

/// Row-wise softmax of the mean `w` of each graph, used as a constant
/// target.
pub fn guidance_targets(fractions: &Tensor, outputs: &Tensor) -> Result<Tensor, NumericError> {
    let mean_w = fractions.matmul(outputs)?;
    let mut t = mean_w.clone();
    for r in 0..t.rows() {
        t.row_mut(r).copy_from_slice(&softmax(mean_w.row(r)));
    }
    Ok(t)
}

/// `sum_i sum_d -targets[i, d] log probs[i, d]` (or the batch mean).
pub fn loss_g(
    tape: &mut Tape,
    probs: Var,
    targets: &Tensor,
    reduction: Reduction,
) -> Result<Var, NumericError> {
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / targets.rows().max(1) as f64,
    };
    let entries = (0..targets.rows())
        .flat_map(|i| (0..targets.cols()).map(move |d| (i, d)))
        .map(|(i, d)| (i, d, -scale * targets.get(i, d)))
        .collect();
    let logs = tape.log(probs)?;
    tape.weighted_sum(logs, entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub ce: f64,
    pub o: f64,
    pub v: f64,
    pub g: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 1.0,
            o: 1.0,
            v: 1.0,
            g: 0.5,
        }
    }
}

/// Selected prototypes and their learnable outputs, as seen by the losses.
#[derive(Debug, Clone, Copy)]
pub struct Guidance<'a> {
    /// `J x H` prototype centers, `J >= 1`.
    pub centers: &'a Tensor,
    /// Store holding the `J x D` output matrix `O`.
    pub outputs: &'a ParamStore,
    pub outputs_idx: ParamIdx,
    pub beta: f64,
    pub lambda: u32,
    pub g_reduction: Reduction,
    /// `O` values the constant targets are built from; the current `O`
    /// when `None`.
    pub target_outputs: Option<&'a Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective<'a> {
    /// Candidate cross-entropy only.
    CandidateCe,
    /// `L_ce + L_o`.
    Pretrain,
    /// `L_ce + L_o + L_v + L_g`, falling back to `Pretrain` when there is no
    /// guidance.
    Auxiliary(Option<Guidance<'a>>),
}

impl PartialEq for Guidance<'_> {
    fn eq(&self, other: &Self) -> bool {
        std::ptr::eq(self.centers, other.centers) && std::ptr::eq(self.outputs, other.outputs)
    }
}

/// Unweighted loss values of one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub o: f64,
    pub v: f64,
    pub g: f64,
    pub total: f64,
}

/// Records the weighted objective for `batch` and returns the scalar loss
/// node with its breakdown.
pub fn objective(
    tape: &mut Tape,
    model: &Model,
    batch: &Batch,
    candidates: &[&CandidateLabelSet],
    weights: &LossWeights,
    which: Objective<'_>,
) -> Result<(Var, LossBreakdown), ModelError> {
    let nodes = model.encode(tape, batch)?;
    let probs = model.classify(tape, batch, nodes)?;
    let ce = candidate_nll(tape, probs, candidates)?;
    let mut parts = LossBreakdown {
        ce: tape.value(ce).data()[0],
        ..LossBreakdown::default()
    };
    let mut total = tape.scale(ce, weights.ce)?;
    if which == Objective::CandidateCe {
        parts.total = tape.value(total).data()[0];
        return Ok((total, parts));
    }

    let proj = model.project(tape, nodes)?;
    let node_probs = node_level_probs(tape, proj, batch)?;
    let lo = candidate_nll(tape, node_probs, candidates)?;
    parts.o = tape.value(lo).data()[0];
    let lo = tape.scale(lo, weights.o)?;
    total = tape.add(total, lo)?;

    if let Objective::Auxiliary(Some(g)) = which {
        let node_values = tape.value(nodes).clone();
        let assignment = assign_prototypes(&node_values, g.centers, g.beta);
        let fractions = assignment_fractions(&assignment, batch, g.centers.rows());
        let o_var = tape.param(g.outputs, g.outputs_idx)?;
        let lv = loss_v(tape, &fractions, o_var, candidates, g.lambda)?;
        parts.v = tape.value(lv).data()[0];
        let lv = tape.scale(lv, weights.v)?;
        total = tape.add(total, lv)?;

        let o_now = g.outputs.value(g.outputs_idx);
        let targets = guidance_targets(&fractions, g.target_outputs.unwrap_or(o_now))?;
        let lg = loss_g(tape, node_probs, &targets, g.g_reduction)?;
        parts.g = tape.value(lg).data()[0];
        let lg = tape.scale(lg, weights.g)?;
        total = tape.add(total, lg)?;
    }
    parts.total = tape.value(total).data()[0];
    Ok((total, parts))
}
