//! Graphs, partial-label samples, datasets and the planted-cause generator.

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::GraphError;
use crate::rng;
use crate::tensor::Tensor;

/// An undirected graph with one feature row per node.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    features: Tensor,
    edges: Vec<(usize, usize)>,
}

impl Graph {
    /// Validates and builds a graph. Rejects out-of-range endpoints,
    /// self-loops and duplicate edges (in either orientation).
    pub fn new(features: Tensor, edges: Vec<(usize, usize)>) -> Result<Self, GraphError> {
        let n = features.rows();
        if n == 0 || features.cols() == 0 {
            return Err(GraphError::EmptyGraph);
        }
        let mut seen = HashSet::with_capacity(edges.len());
        for &(a, b) in &edges {
            if a >= n || b >= n {
                return Err(GraphError::IndexOutOfRange(a, b, n));
            }
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(GraphError::DuplicateEdge(a, b));
            }
        }
        Ok(Self { features, edges })
    }

    pub fn node_count(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Neighbour lists in edge order.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.node_count()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    /// The subgraph induced by the nodes where `keep` is true, with nodes
    /// renumbered in their original order.
    pub fn induced_subgraph(&self, keep: &[bool]) -> Result<Graph, GraphError> {
        if keep.len() != self.node_count() {
            return Err(GraphError::InvalidSample(format!(
                "mask length {} != node count {}",
                keep.len(),
                self.node_count()
            )));
        }
        let mut remap = vec![usize::MAX; keep.len()];
        let mut kept = Vec::new();
        for (i, &k) in keep.iter().enumerate() {
            if k {
                remap[i] = kept.len();
                kept.push(i);
            }
        }
        let edges = self
            .edges
            .iter()
            .filter(|(a, b)| keep[*a] && keep[*b])
            .map(|&(a, b)| (remap[a], remap[b]))
            .collect();
        Graph::new(self.features.select_rows(&kept), edges)
    }
}

/// Column-wise mean of a node matrix.
pub fn global_mean_pool(nodes: &Tensor) -> Result<Vec<f64>, GraphError> {
    if nodes.rows() == 0 {
        return Err(GraphError::EmptyGraph);
    }
    let n = nodes.rows() as f64;
    let mut out = vec![0.0; nodes.cols()];
    for row in nodes.iter_rows() {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// The K candidate labels of a sample, stored as class indices of the
/// one-hot vectors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateLabelSet {
    classes: Vec<usize>,
    num_classes: usize,
}

impl CandidateLabelSet {
    pub fn new(classes: Vec<usize>, num_classes: usize) -> Result<Self, GraphError> {
        if classes.is_empty() {
            return Err(GraphError::InvalidCandidates("empty candidate set".into()));
        }
        let mut seen = HashSet::new();
        for &c in &classes {
            if c >= num_classes {
                return Err(GraphError::InvalidCandidates(format!(
                    "class {c} outside 0..{num_classes}"
                )));
            }
            if !seen.insert(c) {
                return Err(GraphError::InvalidCandidates(format!("class {c} repeated")));
            }
        }
        Ok(Self {
            classes,
            num_classes,
        })
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn contains(&self, class: usize) -> bool {
        self.classes.contains(&class)
    }

    pub fn one_hot(&self) -> Vec<Vec<f64>> {
        self.classes
            .iter()
            .map(|&c| {
                let mut v = vec![0.0; self.num_classes];
                v[c] = 1.0;
                v
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PllSample {
    pub graph: Graph,
    pub candidates: CandidateLabelSet,
    /// Evaluation only; training losses read `candidates`.
    pub ground_truth: usize,
    pub causal_mask: Option<Vec<bool>>,
}

impl PllSample {
    pub fn new(
        graph: Graph,
        candidates: CandidateLabelSet,
        ground_truth: usize,
        causal_mask: Option<Vec<bool>>,
    ) -> Result<Self, GraphError> {
        if !candidates.contains(ground_truth) {
            return Err(GraphError::InvalidSample(format!(
                "ground truth {ground_truth} missing from candidates {:?}",
                candidates.classes()
            )));
        }
        if let Some(mask) = &causal_mask {
            if mask.len() != graph.node_count() {
                return Err(GraphError::InvalidSample(format!(
                    "causal mask length {} != node count {}",
                    mask.len(),
                    graph.node_count()
                )));
            }
            if !mask.iter().any(|&m| m) {
                return Err(GraphError::InvalidSample("causal mask is all false".into()));
            }
        }
        Ok(Self {
            graph,
            candidates,
            ground_truth,
            causal_mask,
        })
    }

    /// A copy whose candidate set is the ground truth alone.
    pub fn with_true_label_only(&self) -> Self {
        let mut s = self.clone();
        s.candidates = CandidateLabelSet {
            classes: vec![self.ground_truth],
            num_classes: self.candidates.num_classes,
        };
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

/// A set of samples sharing the class count `D`, feature width `F` and, when
/// fixed, the candidate count `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub num_classes: usize,
    /// `None` when candidate sets vary in size (annotator noise).
    pub num_candidates: Option<usize>,
    pub feature_dim: usize,
    pub samples: Vec<PllSample>,
}

impl Dataset {
    /// Builds a dataset, inferring `K` (fixed if every sample agrees).
    pub fn new(
        split: Split,
        num_classes: usize,
        feature_dim: usize,
        samples: Vec<PllSample>,
    ) -> Result<Self, GraphError> {
        for (i, s) in samples.iter().enumerate() {
            if s.graph.feature_dim() != feature_dim {
                return Err(GraphError::InvalidSample(format!(
                    "sample {i} has feature dim {} != {feature_dim}",
                    s.graph.feature_dim()
                )));
            }
            if s.candidates.num_classes() != num_classes {
                return Err(GraphError::InvalidSample(format!(
                    "sample {i} has {} classes != {num_classes}",
                    s.candidates.num_classes()
                )));
            }
        }
        let num_candidates = common_k(&samples);
        Ok(Self {
            split,
            num_classes,
            num_candidates,
            feature_dim,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Replaces samples and recomputes `K`.
    pub fn with_samples(&self, samples: Vec<PllSample>) -> Self {
        let num_candidates = common_k(&samples);
        Self {
            split: self.split,
            num_classes: self.num_classes,
            num_candidates,
            feature_dim: self.feature_dim,
            samples,
        }
    }

    /// Every sample restricted to its causal-mask nodes.
    pub fn pruned_to_causal(&self) -> Result<Self, GraphError> {
        let mut out = Vec::with_capacity(self.samples.len());
        for (i, s) in self.samples.iter().enumerate() {
            let mask = s.causal_mask.as_ref().ok_or_else(|| {
                GraphError::InvalidSample(format!("sample {i} has no causal mask"))
            })?;
            let graph = s.graph.induced_subgraph(mask)?;
            let n = graph.node_count();
            out.push(PllSample {
                graph,
                candidates: s.candidates.clone(),
                ground_truth: s.ground_truth,
                causal_mask: Some(vec![true; n]),
            });
        }
        Ok(self.with_samples(out))
    }

    /// Every sample supervised by its ground truth only.
    pub fn with_true_labels(&self) -> Self {
        self.with_samples(
            self.samples
                .iter()
                .map(PllSample::with_true_label_only)
                .collect(),
        )
    }

    /// Splits into consecutive train / validation / test blocks of the given
    /// sizes.
    pub fn split_sizes(
        mut self,
        train: usize,
        validation: usize,
        test: usize,
    ) -> Result<DataSplits, GraphError> {
        if train + validation + test != self.samples.len() {
            return Err(GraphError::InvalidConfig(format!(
                "split sizes {train}+{validation}+{test} != {} samples",
                self.samples.len()
            )));
        }
        let rest = self.samples.split_off(train);
        let mut val_samples = rest;
        let test_samples = val_samples.split_off(validation);
        let make = |split, samples| {
            let mut ds = self.with_samples(samples);
            ds.split = split;
            ds
        };
        Ok(DataSplits {
            train: make(Split::Train, self.samples.clone()),
            validation: make(Split::Validation, val_samples),
            test: make(Split::Test, test_samples),
        })
    }
}

fn common_k(samples: &[PllSample]) -> Option<usize> {
    let first = samples.first()?.candidates.len();
    samples
        .iter()
        .all(|s| s.candidates.len() == first)
        .then_some(first)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

impl DataSplits {
    pub fn map(&self, f: impl Fn(&Dataset) -> Dataset) -> DataSplits {
        DataSplits {
            train: f(&self.train),
            validation: f(&self.validation),
            test: f(&self.test),
        }
    }

    pub fn try_map<E>(&self, f: impl Fn(&Dataset) -> Result<Dataset, E>) -> Result<DataSplits, E> {
        Ok(DataSplits {
            train: f(&self.train)?,
            validation: f(&self.validation)?,
            test: f(&self.test)?,
        })
    }
}

/// Parameters of the planted-cause generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedConfig {
    pub n_samples: usize,
    pub num_classes: usize,
    pub causal_nodes: usize,
    pub noise_nodes: usize,
    pub feature_dim: usize,
    /// Pairwise distance between class mean vectors.
    pub margin: f64,
    /// Edge probability for every node pair involving a noise node.
    pub edge_prob: f64,
    /// Standard deviation of noise-node features around the origin.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            n_samples: 700,
            num_classes: 3,
            causal_nodes: 3,
            noise_nodes: 7,
            feature_dim: 8,
            margin: 4.0,
            edge_prob: 0.3,
            noise_std: 1.0,
            seed: 7,
        }
    }
}

impl PlantedConfig {
    fn validate(&self) -> Result<(), GraphError> {
        let bad = |m: &str| Err(GraphError::InvalidConfig(m.to_string()));
        if self.n_samples == 0 || self.num_classes == 0 || self.feature_dim == 0 {
            return bad("sample, class and feature counts must be positive");
        }
        if self.causal_nodes == 0 {
            return bad("at least one causal node is required");
        }
        if self.feature_dim < self.num_classes {
            return bad("feature_dim must be at least num_classes");
        }
        if !(0.0..=1.0).contains(&self.edge_prob) {
            return bad("edge_prob must lie in [0, 1]");
        }
        if !(self.margin.is_finite() && self.margin > 0.0) || !(self.noise_std >= 0.0) {
            return bad("margin must be positive and noise_std non-negative");
        }
        Ok(())
    }

    /// Class mean vectors `m_c = (margin / sqrt 2) e_c`, pairwise `margin`
    /// apart.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let scale = self.margin / std::f64::consts::SQRT_2;
        (0..self.num_classes)
            .map(|c| {
                let mut m = vec![0.0; self.feature_dim];
                m[c] = scale;
                m
            })
            .collect()
    }
}

/// Generates samples whose class is carried only by their causal nodes.
///
/// Causal nodes draw features from `N(m_c, I)` and are joined by a path in
/// random order; noise nodes draw from `N(0, noise_std^2 I)` and every pair
/// involving a noise node is an edge with probability `edge_prob`. Node order
/// is shuffled. Candidate sets hold only the ground truth (`K = 1`) until a
/// noise model from [`crate::noise`] is applied.
pub fn gen_planted_dataset(cfg: &PlantedConfig) -> Result<Dataset, GraphError> {
    cfg.validate()?;
    let means = cfg.class_means();
    let samples = (0..cfg.n_samples)
        .map(|i| planted_sample(cfg, &means, i as u64))
        .collect::<Result<Vec<_>, _>>()?;
    Dataset::new(Split::Train, cfg.num_classes, cfg.feature_dim, samples)
}

fn planted_sample(cfg: &PlantedConfig, means: &[Vec<f64>], index: u64) -> Result<PllSample, GraphError> {
    let mut rng = rng::stream(cfg.seed, rng::TAG_GRAPH, index);
    let class = rng.random_range(0..cfg.num_classes);
    let n = cfg.causal_nodes + cfg.noise_nodes;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    // Slot i < causal_nodes is causal before shuffling.
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let row: Vec<f64> = if i < cfg.causal_nodes {
            means[class].iter().map(|m| m + unit.sample(&mut rng)).collect()
        } else {
            (0..cfg.feature_dim)
                .map(|_| cfg.noise_std * unit.sample(&mut rng))
                .collect()
        };
        rows.push(row);
    }

    let mut edges = Vec::new();
    let mut causal_order: Vec<usize> = (0..cfg.causal_nodes).collect();
    causal_order.shuffle(&mut rng);
    for w in causal_order.windows(2) {
        edges.push((w[0], w[1]));
    }
    for a in 0..n {
        for b in (a + 1)..n {
            if b >= cfg.causal_nodes && rng.random::<f64>() < cfg.edge_prob {
                edges.push((a, b));
            }
        }
    }

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    // perm[new] = old; position[old] = new.
    let mut position = vec![0; n];
    for (new, &old) in perm.iter().enumerate() {
        position[old] = new;
    }
    let features = Tensor::from_rows(&perm.iter().map(|&old| rows[old].clone()).collect::<Vec<_>>())
        .map_err(|e| GraphError::InvalidConfig(e.to_string()))?;
    let edges = edges
        .into_iter()
        .map(|(a, b)| (position[a], position[b]))
        .collect();
    let mask = perm.iter().map(|&old| old < cfg.causal_nodes).collect();

    PllSample::new(
        Graph::new(features, edges)?,
        CandidateLabelSet::new(vec![class], cfg.num_classes)?,
        class,
        Some(mask),
    )
}
