//! Node encoder, per-node projection head and graph classifier.
//!
//! All three run batched: the node rows of every graph in a [`Batch`] are
//! stacked, neighbour means come from a block-diagonal sparse matrix and
//! pooling from a sparse `B x N` averaging matrix.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamIdx, ParamStore, Tape, Var};
use crate::error::{ModelError, NumericError};
use crate::graph::{Graph, PllSample};
use crate::rng;
use crate::tensor::{CsrMatrix, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Output width of each message-passing layer.
    pub encoder_dims: Vec<usize>,
    pub head_hidden: usize,
    pub classifier_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 8,
            num_classes: 3,
            encoder_dims: vec![64, 64],
            head_hidden: 32,
            classifier_hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn hidden_dim(&self) -> usize {
        *self.encoder_dims.last().expect("validated non-empty")
    }

    fn validate(&self) -> Result<(), ModelError> {
        let dims_ok = !self.encoder_dims.is_empty()
            && self.feature_dim > 0
            && self.num_classes > 0
            && self.head_hidden > 0
            && self.classifier_hidden > 0
            && self.encoder_dims.iter().all(|&d| d > 0);
        if dims_ok {
            Ok(())
        } else {
            Err(ModelError::Numeric(NumericError::InvalidArgument(
                "model dimensions must be positive with at least one encoder layer".into(),
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct MpLayer {
    w_self: ParamIdx,
    w_neigh: ParamIdx,
    bias: ParamIdx,
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    w: ParamIdx,
    bias: ParamIdx,
}

/// Parameters of the encoder, head and classifier, each in its own store so
/// training phases can step them independently.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: ParamStore,
    pub head: ParamStore,
    pub classifier: ParamStore,
    enc_layers: Vec<MpLayer>,
    head_layers: Vec<Dense>,
    clf_layers: Vec<Dense>,
}

fn glorot(rows: usize, cols: usize, r: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| r.random_range(-bound..bound))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("shape matches data")
}

impl Model {
    /// Glorot-uniform weights and zero biases drawn from the init stream of
    /// `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut r = rng::stream(seed, rng::TAG_INIT, 0);
        let mut encoder = ParamStore::new();
        let mut enc_layers = Vec::new();
        let mut din = config.feature_dim;
        for (l, &dout) in config.encoder_dims.iter().enumerate() {
            enc_layers.push(MpLayer {
                w_self: encoder.add(format!("enc{l}.w_self"), glorot(din, dout, &mut r)),
                w_neigh: encoder.add(format!("enc{l}.w_neigh"), glorot(din, dout, &mut r)),
                bias: encoder.add(format!("enc{l}.bias"), Tensor::zeros(1, dout)),
            });
            din = dout;
        }
        let h = config.hidden_dim();
        let d = config.num_classes;
        let mut mlp = |store: &mut ParamStore, prefix: &str, hidden: usize| {
            vec![
                Dense {
                    w: store.add(format!("{prefix}0.w"), glorot(h, hidden, &mut r)),
                    bias: store.add(format!("{prefix}0.bias"), Tensor::zeros(1, hidden)),
                },
                Dense {
                    w: store.add(format!("{prefix}1.w"), glorot(hidden, d, &mut r)),
                    bias: store.add(format!("{prefix}1.bias"), Tensor::zeros(1, d)),
                },
            ]
        };
        let mut head = ParamStore::new();
        let head_layers = mlp(&mut head, "head", config.head_hidden);
        let mut classifier = ParamStore::new();
        let clf_layers = mlp(&mut classifier, "clf", config.classifier_hidden);
        Ok(Self {
            config,
            encoder,
            head,
            classifier,
            enc_layers,
            head_layers,
            clf_layers,
        })
    }

    /// Node representations `N x H` for every node of the batch.
    pub fn encode(&self, tape: &mut Tape, batch: &Batch) -> Result<Var, ModelError> {
        if batch.features.cols() != self.config.feature_dim {
            return Err(ModelError::DimMismatch {
                expected: self.config.feature_dim,
                found: batch.features.cols(),
            });
        }
        let mut h = tape.constant(batch.features.clone())?;
        for layer in &self.enc_layers {
            let ws = tape.param(&self.encoder, layer.w_self)?;
            let wn = tape.param(&self.encoder, layer.w_neigh)?;
            let b = tape.param(&self.encoder, layer.bias)?;
            let own = tape.matmul(h, ws)?;
            let agg = tape.sparse_matmul(batch.neighbor_mean.clone(), h)?;
            let nb = tape.matmul(agg, wn)?;
            let z = tape.add(own, nb)?;
            let z = tape.add_row(z, b)?;
            h = tape.relu(z)?;
        }
        Ok(h)
    }

    fn mlp(
        tape: &mut Tape,
        store: &ParamStore,
        layers: &[Dense],
        x: Var,
    ) -> Result<Var, NumericError> {
        let mut h = x;
        for (i, layer) in layers.iter().enumerate() {
            let w = tape.param(store, layer.w)?;
            let b = tape.param(store, layer.bias)?;
            let z = tape.matmul(h, w)?;
            h = tape.add_row(z, b)?;
            if i + 1 < layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    fn check_hidden(&self, tape: &Tape, x: Var) -> Result<(), ModelError> {
        let found = tape.value(x).cols();
        let expected = self.config.hidden_dim();
        if found != expected {
            return Err(ModelError::DimMismatch { expected, found });
        }
        Ok(())
    }

    /// Per-node projections `N x D` in `(-1, 1)`.
    pub fn project(&self, tape: &mut Tape, nodes: Var) -> Result<Var, ModelError> {
        self.check_hidden(tape, nodes)?;
        let z = Self::mlp(tape, &self.head, &self.head_layers, nodes)?;
        Ok(tape.tanh(z)?)
    }

    /// Graph-level class probabilities `B x D` from mean-pooled nodes.
    pub fn classify(&self, tape: &mut Tape, batch: &Batch, nodes: Var) -> Result<Var, ModelError> {
        self.check_hidden(tape, nodes)?;
        let pooled = tape.sparse_matmul(batch.pool.clone(), nodes)?;
        let z = Self::mlp(tape, &self.classifier, &self.clf_layers, pooled)?;
        Ok(tape.softmax_rows(z)?)
    }

    /// Convenience single-graph forward for `encode`.
    pub fn encode_nodes(&self, g: &Graph) -> Result<Tensor, ModelError> {
        let batch = Batch::from_graphs(&[g]);
        let mut tape = Tape::new();
        let h = self.encode(&mut tape, &batch)?;
        Ok(tape.value(h).clone())
    }

    /// Applies the head row-wise to given node representations.
    pub fn node_project(&self, nodes: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let x = tape.constant(nodes.clone())?;
        let p = self.project(&mut tape, x)?;
        Ok(tape.value(p).clone())
    }

    pub fn graph_predict(&self, g: &Graph) -> Result<Vec<f64>, ModelError> {
        let batch = Batch::from_graphs(&[g]);
        let mut tape = Tape::new();
        let h = self.encode(&mut tape, &batch)?;
        let p = self.classify(&mut tape, &batch, h)?;
        Ok(tape.value(p).row(0).to_vec())
    }

    /// Graph-level probabilities for many graphs, processed in chunks.
    pub fn predict_all(&self, graphs: &[&Graph], chunk: usize) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut out = Vec::with_capacity(graphs.len());
        for part in graphs.chunks(chunk.max(1)) {
            let batch = Batch::from_graphs(part);
            let mut tape = Tape::new();
            let h = self.encode(&mut tape, &batch)?;
            let p = self.classify(&mut tape, &batch, h)?;
            out.extend(tape.value(p).iter_rows().map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    pub fn stores_mut(&mut self) -> [&mut ParamStore; 3] {
        [&mut self.encoder, &mut self.head, &mut self.classifier]
    }

    pub fn zero_grad(&mut self) {
        self.stores_mut().into_iter().for_each(ParamStore::zero_grad);
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let dump = |s: &ParamStore| s.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            encoder: dump(&self.encoder),
            head: dump(&self.head),
            classifier: dump(&self.classifier),
        }
    }

    /// Rebuilds a model with the stored values; optimizer state starts fresh.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(ModelError::Numeric(NumericError::InvalidArgument(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            ))));
        }
        let mut m = Model::new(ck.config.clone(), 0)?;
        let load = |store: &mut ParamStore, values: &[(String, Tensor)]| -> Result<(), ModelError> {
            if store.len() != values.len() {
                return Err(ModelError::DimMismatch {
                    expected: store.len(),
                    found: values.len(),
                });
            }
            for (p, (name, v)) in store.iter_mut().zip(values) {
                if &p.name != name || p.value.shape() != v.shape() {
                    return Err(ModelError::Numeric(NumericError::InvalidArgument(format!(
                        "checkpoint entry `{name}` does not match parameter `{}`",
                        p.name
                    ))));
                }
                p.value = v.clone();
            }
            Ok(())
        };
        load(&mut m.encoder, &ck.encoder)?;
        load(&mut m.head, &ck.head)?;
        load(&mut m.classifier, &ck.classifier)?;
        Ok(m)
    }
}

pub const CHECKPOINT_FORMAT: &str = "gpcd-model";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub encoder: Vec<(String, Tensor)>,
    pub head: Vec<(String, Tensor)>,
    pub classifier: Vec<(String, Tensor)>,
}

/// Stacked node features of several graphs plus the sparse operators that
/// keep them apart.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Tensor,
    /// Row `v` averages the neighbours of `v`; zero for isolated nodes.
    pub neighbor_mean: Arc<CsrMatrix>,
    /// Row `i` averages the nodes of graph `i`.
    pub pool: Arc<CsrMatrix>,
    /// Node row range of each graph.
    pub spans: Vec<Range<usize>>,
}

impl Batch {
    pub fn from_graphs(graphs: &[&Graph]) -> Self {
        let total: usize = graphs.iter().map(|g| g.node_count()).sum();
        let f = graphs.first().map_or(0, |g| g.feature_dim());
        let mut data = Vec::with_capacity(total * f);
        let mut adj_rows = Vec::with_capacity(total);
        let mut pool_rows = Vec::with_capacity(graphs.len());
        let mut spans = Vec::with_capacity(graphs.len());
        let mut offset = 0;
        for g in graphs {
            data.extend_from_slice(g.features().data());
            for nb in g.neighbors() {
                let w = 1.0 / nb.len().max(1) as f64;
                adj_rows.push(nb.iter().map(|&u| (offset + u, w)).collect());
            }
            let n = g.node_count();
            let w = 1.0 / n as f64;
            pool_rows.push((offset..offset + n).map(|v| (v, w)).collect());
            spans.push(offset..offset + n);
            offset += n;
        }
        Self {
            features: Tensor::from_vec(total, f, data).expect("graphs share feature width"),
            neighbor_mean: Arc::new(CsrMatrix::from_row_entries(total, &adj_rows)),
            pool: Arc::new(CsrMatrix::from_row_entries(total, &pool_rows)),
            spans,
        }
    }

    pub fn from_samples(samples: &[&PllSample]) -> Self {
        let graphs: Vec<&Graph> = samples.iter().map(|s| &s.graph).collect();
        Self::from_graphs(&graphs)
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.features.rows()
    }
}
