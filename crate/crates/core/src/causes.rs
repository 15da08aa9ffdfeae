//! Potential-cause extraction: cluster node representations, keep clusters
//! whose projections clear the `±delta` criteria, and own the learnable
//! outputs `O` attached to the kept prototypes.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamIdx, ParamStore};
use crate::cluster::{elbow_cluster, ClusterResult, ElbowConfig, ElbowRound};
use crate::error::CauseError;
use crate::graph::{Dataset, Graph};
use crate::losses::{Guidance, Reduction};
use crate::model::{Batch, Model};
use crate::tensor::Tensor;

pub const DELTA_CAP: f64 = 0.9;

/// `min(delta0 + round * step, 0.9)`.
pub fn delta_schedule(round: usize, delta0: f64, step: f64) -> f64 {
    (delta0 + round as f64 * step).min(DELTA_CAP)
}

/// Whether some class has every member projection above `delta` or every
/// member projection below `-delta`. Empty clusters never qualify.
pub fn cluster_qualifies(member_projs: &[&[f64]], delta: f64) -> bool {
    let Some(first) = member_projs.first() else {
        return false;
    };
    (0..first.len()).any(|d| {
        member_projs.iter().all(|p| p[d] > delta) || member_projs.iter().all(|p| p[d] < -delta)
    })
}

/// Indices of the clusters that satisfy [`cluster_qualifies`], with
/// `projections` holding one row per clustered point.
pub fn select_clusters(
    clusters: &ClusterResult,
    projections: &Tensor,
    delta: f64,
) -> Result<Vec<usize>, CauseError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(CauseError::InvalidDelta(delta));
    }
    Ok(clusters
        .members()
        .iter()
        .enumerate()
        .filter(|(_, m)| {
            let rows: Vec<&[f64]> = m.iter().map(|&p| projections.row(p)).collect();
            cluster_qualifies(&rows, delta)
        })
        .map(|(j, _)| j)
        .collect())
}

/// Selected prototypes `C*` and their outputs `O`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    /// `J x H`.
    pub centers: Tensor,
    /// Holds the single `J x D` parameter `O` when `J > 0`.
    pub outputs: ParamStore,
    pub outputs_idx: Option<ParamIdx>,
    pub member_counts: Vec<usize>,
    pub extraction_round: usize,
    pub delta_used: f64,
}

impl PrototypeSet {
    pub fn empty(hidden: usize, round: usize, delta: f64) -> Self {
        Self {
            centers: Tensor::zeros(0, hidden),
            outputs: ParamStore::new(),
            outputs_idx: None,
            member_counts: Vec::new(),
            extraction_round: round,
            delta_used: delta,
        }
    }

    /// Builds `C*` from the chosen clusters with `o_j` set to the head's
    /// projection of `c*_j`.
    pub fn from_selection(
        clusters: &ClusterResult,
        selected: &[usize],
        model: &Model,
        round: usize,
        delta: f64,
    ) -> Result<Self, CauseError> {
        if selected.is_empty() {
            return Ok(Self::empty(clusters.centers.cols(), round, delta));
        }
        let centers = clusters.centers.select_rows(selected);
        let o = model.node_project(&centers)?;
        let members = clusters.members();
        let mut outputs = ParamStore::new();
        let idx = outputs.add("O", o);
        Ok(Self {
            centers,
            outputs,
            outputs_idx: Some(idx),
            member_counts: selected.iter().map(|&j| members[j].len()).collect(),
            extraction_round: round,
            delta_used: delta,
        })
    }

    pub fn len(&self) -> usize {
        self.centers.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn output_values(&self) -> Option<&Tensor> {
        self.outputs_idx.map(|i| self.outputs.value(i))
    }

    /// Loss-side view, or `None` when nothing was selected.
    pub fn guidance(&self, beta: f64, lambda: u32, g_reduction: Reduction) -> Option<Guidance<'_>> {
        self.outputs_idx.map(|idx| Guidance {
            centers: &self.centers,
            outputs: &self.outputs,
            outputs_idx: idx,
            beta,
            lambda,
            g_reduction,
            target_outputs: None,
        })
    }

    /// Keeps `O` inside `[-1, 1]`.
    pub fn clamp_outputs(&mut self) {
        self.outputs.clamp_values(-1.0, 1.0);
    }

    pub fn summary(&self) -> PrototypeSummary {
        PrototypeSummary {
            extraction_round: self.extraction_round,
            delta_used: self.delta_used,
            prototypes: (0..self.len())
                .map(|j| PrototypeRecord {
                    center_norm: self.centers.row(j).iter().map(|v| v * v).sum::<f64>().sqrt(),
                    output: self.output_values().map_or(Vec::new(), |o| o.row(j).to_vec()),
                    members: self.member_counts[j],
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeRecord {
    pub center_norm: f64,
    pub output: Vec<f64>,
    pub members: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSummary {
    pub extraction_round: usize,
    pub delta_used: f64,
    pub prototypes: Vec<PrototypeRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    pub delta0: f64,
    pub delta_step: f64,
    pub elbow: ElbowConfig,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            delta0: 0.15,
            delta_step: 0.05,
            elbow: ElbowConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub prototypes: PrototypeSet,
    pub clusters: ClusterResult,
    pub elbow_rounds: Vec<ElbowRound>,
    pub clusters_considered: usize,
}

/// Node representations and projections of every node in `ds`, stacked in
/// sample order.
pub fn encode_dataset(ds: &Dataset, model: &Model, chunk: usize) -> Result<(Tensor, Tensor), CauseError> {
    let h = model.config.hidden_dim();
    let d = model.config.num_classes;
    let mut reprs = Vec::new();
    let mut projs = Vec::new();
    for part in ds.samples.chunks(chunk.max(1)) {
        let graphs: Vec<&Graph> = part.iter().map(|s| &s.graph).collect();
        let batch = Batch::from_graphs(&graphs);
        let mut tape = crate::autodiff::Tape::new();
        let nodes = model.encode(&mut tape, &batch)?;
        let proj = model.project(&mut tape, nodes)?;
        reprs.extend_from_slice(tape.value(nodes).data());
        projs.extend_from_slice(tape.value(proj).data());
    }
    let n = reprs.len() / h;
    let as_tensor = |rows, cols, data| {
        Tensor::from_vec(rows, cols, data).map_err(|e| CauseError::Model(e.into()))
    };
    Ok((as_tensor(n, h, reprs)?, as_tensor(n, d, projs)?))
}

/// Encodes every training node, elbow-clusters the representations and keeps
/// the clusters meeting the `delta` criteria. An empty selection is legal.
pub fn extract(
    ds: &Dataset,
    model: &Model,
    elbow: &ElbowConfig,
    delta: f64,
    round: usize,
    seed: u64,
) -> Result<Extraction, CauseError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(CauseError::InvalidDelta(delta));
    }
    let (reprs, projs) = encode_dataset(ds, model, 64)?;
    let elbow_res = elbow_cluster(&reprs, elbow, seed ^ round as u64)?;
    let selected = select_clusters(&elbow_res.best, &projs, delta)?;
    let prototypes = PrototypeSet::from_selection(&elbow_res.best, &selected, model, round, delta)?;
    Ok(Extraction {
        prototypes,
        clusters_considered: elbow_res.best.k(),
        clusters: elbow_res.best,
        elbow_rounds: elbow_res.rounds,
    })
}

/// `max_d |head(encode(g))[l, d]|` per node.
pub fn node_attribution(g: &Graph, model: &Model) -> Result<Vec<f64>, CauseError> {
    let nodes = model.encode_nodes(g)?;
    let proj = model.node_project(&nodes)?;
    Ok(proj
        .iter_rows()
        .map(|r| r.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .collect())
}

/// Indices of the `k` highest scores (lower index first on ties).
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Fraction of the top-(causal count) nodes that are causal.
pub fn top_k_precision(scores: &[f64], mask: &[bool]) -> f64 {
    let k = mask.iter().filter(|&&m| m).count();
    if k == 0 {
        return 0.0;
    }
    let hits = top_k(scores, k).iter().filter(|&&i| mask[i]).count();
    hits as f64 / k as f64
}
