//! Training phases, the baseline and ablations, and evaluation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape};
use crate::causes::{self, delta_schedule, PrototypeSet, PrototypeSummary};
use crate::config::TrainConfig;
use crate::error::TrainError;
use crate::graph::{CandidateLabelSet, DataSplits, Dataset, Graph, PllSample};
use crate::losses::{self, LossBreakdown, Objective};
use crate::model::{Batch, Model, ModelConfig};
use crate::optim::Adam;
use crate::rng;

const EVAL_CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gpcd,
    WoLambda,
    WoAuxiliary,
    /// Candidate cross-entropy only.
    BaselineCe,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Gpcd => "gpcd",
            Method::WoLambda => "wo_lambda",
            Method::WoAuxiliary => "wo_auxiliary",
            Method::BaselineCe => "baseline_ce",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Auxiliary,
    CandidateCe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub run: String,
    /// Zero-based global epoch index.
    pub epoch: usize,
    pub phase: Phase,
    /// Mean over mini-batches.
    pub train_loss: LossBreakdown,
    pub train_acc: f64,
    /// Candidate cross-entropy of the graph classifier.
    pub val_loss: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub prototypes: usize,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CauseRecovery {
    /// Mean per-graph precision of the top-(causal count) attribution nodes.
    pub topk_precision: f64,
    /// Precision and recall of nodes matched to a selected prototype.
    pub prototype_precision: f64,
    pub prototype_recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub run: String,
    pub model: Model,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    /// Test accuracy at the best validation epoch.
    pub test_acc: f64,
    pub extractions: Vec<PrototypeSummary>,
    pub prototypes: Option<PrototypeSet>,
    pub cause_recovery: Option<CauseRecovery>,
}

/// Index of the highest probability, lowest index on ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Fraction of predictions whose argmax equals the ground truth.
pub fn accuracy(preds: &[Vec<f64>], samples: &[PllSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits = preds
        .iter()
        .zip(samples)
        .filter(|(p, s)| argmax(p) == s.ground_truth)
        .count();
    hits as f64 / samples.len() as f64
}

fn graphs(ds: &Dataset) -> Vec<&Graph> {
    ds.samples.iter().map(|s| &s.graph).collect()
}

/// Graph-classifier accuracy on `ds`. Never reads candidate sets.
pub fn evaluate(ds: &Dataset, model: &Model) -> Result<f64, TrainError> {
    let preds = model.predict_all(&graphs(ds), EVAL_CHUNK)?;
    Ok(accuracy(&preds, &ds.samples))
}

fn candidate_ce(preds: &[Vec<f64>], ds: &Dataset) -> f64 {
    if ds.is_empty() {
        return 0.0;
    }
    preds
        .iter()
        .zip(&ds.samples)
        .map(|(p, s)| losses::ce_candidates(p, &s.candidates).0)
        .sum::<f64>()
        / ds.len() as f64
}

/// Model sized for `ds` with the hidden layout of `cfg`.
pub fn init_model(ds: &Dataset, cfg: &TrainConfig) -> Result<Model, TrainError> {
    let mc = ModelConfig {
        feature_dim: ds.feature_dim,
        num_classes: ds.num_classes,
        ..cfg.model.clone()
    };
    Ok(Model::new(mc, rng::derive_seed(cfg.seed, rng::TAG_INIT, 0))?)
}

/// One training run's mutable state.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub model: Model,
    pub splits: &'a DataSplits,
    pub run: String,
    pub epochs: Vec<EpochRecord>,
    adam: Adam,
    observer: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

impl<'a> Trainer<'a> {
    pub fn new(splits: &'a DataSplits, cfg: &TrainConfig, run: impl Into<String>) -> Result<Self, TrainError> {
        cfg.validate()?;
        if splits.train.is_empty() {
            return Err(TrainError::InvalidConfig("training split is empty".into()));
        }
        Ok(Self {
            model: init_model(&splits.train, cfg)?,
            cfg: cfg.clone(),
            splits,
            run: run.into(),
            epochs: Vec::new(),
            adam: Adam::with_lr(cfg.lr),
            observer: None,
        })
    }

    /// Called with every epoch record as soon as it is complete.
    pub fn with_observer(mut self, observer: &'a mut dyn FnMut(&EpochRecord)) -> Self {
        self.observer = Some(observer);
        self
    }

    fn shuffled(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.splits.train.len()).collect();
        order.shuffle(&mut rng::stream(self.cfg.seed, rng::TAG_SHUFFLE, epoch as u64));
        order
    }

    /// One pass over the shuffled training set.
    fn train_epoch(
        &mut self,
        phase: Phase,
        mut prototypes: Option<&mut PrototypeSet>,
    ) -> Result<LossBreakdown, TrainError> {
        let epoch = self.epochs.len();
        let order = self.shuffled(epoch);
        let mut sum = LossBreakdown::default();
        let mut batches = 0usize;
        for chunk in order.chunks(self.cfg.batch_size) {
            let samples: Vec<&PllSample> = chunk.iter().map(|&i| &self.splits.train.samples[i]).collect();
            let batch = Batch::from_samples(&samples);
            let cands: Vec<&CandidateLabelSet> = samples.iter().map(|s| &s.candidates).collect();
            let mut tape = Tape::new();
            let guidance = prototypes
                .as_deref()
                .and_then(|p| p.guidance(self.cfg.beta, self.cfg.lambda, self.cfg.g_reduction));
            let which = match phase {
                Phase::CandidateCe => Objective::CandidateCe,
                Phase::Pretrain => Objective::Pretrain,
                Phase::Auxiliary => Objective::Auxiliary(guidance),
            };
            let uses_head = which != Objective::CandidateCe;
            let uses_outputs = guidance.is_some();
            let (loss, parts) =
                losses::objective(&mut tape, &self.model, &batch, &cands, &self.cfg.weights, which)?;

            self.model.zero_grad();
            let mut stores: Vec<&mut ParamStore> = Vec::with_capacity(4);
            let [enc, head, clf] = self.model.stores_mut();
            stores.push(enc);
            stores.push(clf);
            if uses_head {
                stores.push(head);
            }
            let outputs = match prototypes.as_deref_mut() {
                Some(p) if uses_outputs => {
                    p.outputs.zero_grad();
                    Some(&mut p.outputs)
                }
                _ => None,
            };
            if let Some(o) = outputs {
                stores.push(o);
            }
            tape.backward(loss, &mut stores)?;
            for s in stores {
                self.adam.step(s)?;
            }
            if uses_outputs {
                if let Some(p) = prototypes.as_deref_mut() {
                    p.clamp_outputs();
                }
            }

            sum.ce += parts.ce;
            sum.o += parts.o;
            sum.v += parts.v;
            sum.g += parts.g;
            sum.total += parts.total;
            batches += 1;
        }
        let n = batches.max(1) as f64;
        Ok(LossBreakdown {
            ce: sum.ce / n,
            o: sum.o / n,
            v: sum.v / n,
            g: sum.g / n,
            total: sum.total / n,
        })
    }

    fn record(
        &mut self,
        phase: Phase,
        train_loss: LossBreakdown,
        prototypes: usize,
        delta: Option<f64>,
    ) -> Result<(), TrainError> {
        let train_preds = self.model.predict_all(&graphs(&self.splits.train), EVAL_CHUNK)?;
        let val_preds = self.model.predict_all(&graphs(&self.splits.validation), EVAL_CHUNK)?;
        let test_preds = self.model.predict_all(&graphs(&self.splits.test), EVAL_CHUNK)?;
        let rec = EpochRecord {
            run: self.run.clone(),
            epoch: self.epochs.len(),
            phase,
            train_loss,
            train_acc: accuracy(&train_preds, &self.splits.train.samples),
            val_loss: candidate_ce(&val_preds, &self.splits.validation),
            val_acc: accuracy(&val_preds, &self.splits.validation.samples),
            test_acc: accuracy(&test_preds, &self.splits.test.samples),
            prototypes,
            delta,
        };
        if let Some(obs) = self.observer.as_deref_mut() {
            obs(&rec);
        }
        self.epochs.push(rec);
        Ok(())
    }

    /// `epochs` epochs of a fixed objective without prototypes.
    pub fn train_plain(&mut self, phase: Phase, epochs: usize) -> Result<(), TrainError> {
        for _ in 0..epochs {
            let loss = self.train_epoch(phase, None)?;
            self.record(phase, loss, 0, None)?;
        }
        Ok(())
    }

    /// `mu` epochs of `L_ce + L_o`.
    pub fn pretrain(&mut self) -> Result<(), TrainError> {
        self.train_plain(Phase::Pretrain, self.cfg.pretrain_epochs)
    }

    /// Extract, then train `period` epochs with the auxiliary objective;
    /// repeat until `aux_epochs` are used. After `max_extraction_rounds`
    /// extractions the last prototype set stays in use.
    pub fn auxiliary_train(&mut self) -> Result<(Vec<PrototypeSummary>, Option<PrototypeSet>), TrainError> {
        let mut history = Vec::new();
        let mut current: Option<PrototypeSet> = None;
        let mut used = 0;
        let mut round = 0;
        while used < self.cfg.aux_epochs {
            if round < self.cfg.max_extraction_rounds {
                let ex = &self.cfg.extraction;
                let delta = delta_schedule(round, ex.delta0, ex.delta_step);
                let extraction = causes::extract(
                    &self.splits.train,
                    &self.model,
                    &ex.elbow,
                    delta,
                    round,
                    rng::derive_seed(self.cfg.seed, rng::TAG_KMEANS, round as u64),
                )?;
                history.push(extraction.prototypes.summary());
                current = Some(extraction.prototypes);
                round += 1;
            }
            let span = self.cfg.period.min(self.cfg.aux_epochs - used);
            for _ in 0..span {
                let loss = self.train_epoch(Phase::Auxiliary, current.as_mut())?;
                let (count, delta) = current.as_ref().map_or((0, None), |p| (p.len(), Some(p.delta_used)));
                self.record(Phase::Auxiliary, loss, count, delta)?;
            }
            used += span;
        }
        Ok((history, current))
    }

    fn finish(
        self,
        extractions: Vec<PrototypeSummary>,
        prototypes: Option<PrototypeSet>,
    ) -> Result<RunOutput, TrainError> {
        let (best_epoch, best_val_acc, test_acc) = select_best(&self.epochs);
        let cause_recovery = cause_recovery(&self.splits.test, &self.model, prototypes.as_ref(), self.cfg.beta)?;
        Ok(RunOutput {
            run: self.run,
            model: self.model,
            epochs: self.epochs,
            best_epoch,
            best_val_acc,
            test_acc,
            extractions,
            prototypes,
            cause_recovery,
        })
    }
}

/// Earliest epoch with the highest validation accuracy, with its test
/// accuracy.
pub fn select_best(epochs: &[EpochRecord]) -> (usize, f64, f64) {
    let mut best: Option<&EpochRecord> = None;
    for e in epochs {
        if best.is_none_or(|b| e.val_acc > b.val_acc) {
            best = Some(e);
        }
    }
    best.map_or((0, 0.0, 0.0), |b| (b.epoch, b.val_acc, b.test_acc))
}

/// Attribution-based recovery on samples with causal masks; `None` if no
/// sample has one.
pub fn cause_recovery(
    ds: &Dataset,
    model: &Model,
    prototypes: Option<&PrototypeSet>,
    beta: f64,
) -> Result<Option<CauseRecovery>, TrainError> {
    let masked: Vec<&PllSample> = ds.samples.iter().filter(|s| s.causal_mask.is_some()).collect();
    if masked.is_empty() {
        return Ok(None);
    }
    let mut precision_sum = 0.0;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for s in &masked {
        let mask = s.causal_mask.as_ref().expect("filtered");
        let nodes = model.encode_nodes(&s.graph)?;
        let scores = causes::node_attribution(&s.graph, model)?;
        precision_sum += causes::top_k_precision(&scores, mask);
        if let Some(p) = prototypes.filter(|p| !p.is_empty()) {
            let assigned = losses::assign_prototypes(&nodes, &p.centers, beta);
            for (a, &m) in assigned.iter().zip(mask) {
                match (a.is_some(), m) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    (false, false) => {}
                }
            }
        }
    }
    let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
    Ok(Some(CauseRecovery {
        topk_precision: precision_sum / masked.len() as f64,
        prototype_precision: ratio(tp, fp),
        prototype_recall: ratio(tp, fneg),
    }))
}

/// Runs one method with the full epoch budget `mu + aux_epochs`.
pub fn run_method(
    splits: &DataSplits,
    cfg: &TrainConfig,
    method: Method,
    observer: Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<RunOutput, TrainError> {
    let mut cfg = cfg.clone();
    if method == Method::WoLambda {
        cfg.lambda = 1;
    }
    let mut trainer = Trainer::new(splits, &cfg, method.name())?;
    if let Some(obs) = observer {
        trainer = trainer.with_observer(obs);
    }
    match method {
        Method::Gpcd | Method::WoLambda => {
            trainer.pretrain()?;
            let (history, protos) = trainer.auxiliary_train()?;
            trainer.finish(history, protos)
        }
        Method::WoAuxiliary => {
            let total = cfg.total_epochs();
            trainer.train_plain(Phase::Pretrain, total)?;
            trainer.finish(Vec::new(), None)
        }
        Method::BaselineCe => {
            let total = cfg.total_epochs();
            trainer.train_plain(Phase::CandidateCe, total)?;
            trainer.finish(Vec::new(), None)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutputs {
    pub full_pll: RunOutput,
    pub pruned_pll: RunOutput,
    pub full_supervised: RunOutput,
}

/// Candidate cross-entropy on (a) full graphs, (b) graphs pruned to their
/// causal nodes in every split, (c) full graphs with ground-truth labels,
/// all with the same budget.
pub fn oracle_prune_experiment(splits: &DataSplits, cfg: &TrainConfig) -> Result<OracleOutputs, TrainError> {
    for ds in [&splits.train, &splits.validation, &splits.test] {
        if let Some(i) = ds.samples.iter().position(|s| s.causal_mask.is_none()) {
            return Err(TrainError::MissingCausalMask(i));
        }
    }
    let pruned = splits.try_map(Dataset::pruned_to_causal)?;
    let supervised = splits.map(Dataset::with_true_labels);
    let run = |s: &DataSplits, name: &str| -> Result<RunOutput, TrainError> {
        let mut out = run_method(s, cfg, Method::BaselineCe, None)?;
        out.run = name.into();
        out.epochs.iter_mut().for_each(|e| e.run = name.into());
        Ok(out)
    };
    Ok(OracleOutputs {
        full_pll: run(splits, "full_pll")?,
        pruned_pll: run(&pruned, "pruned_pll")?,
        full_supervised: run(&supervised, "full_supervised")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DataConfig, SplitSizes};

    fn tiny_splits(seed: u64) -> DataSplits {
        DataConfig {
            splits: SplitSizes {
                train: 24,
                validation: 8,
                test: 8,
            },
            ..Default::default()
        }
        .build(seed)
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig {
            pretrain_epochs: 1,
            aux_epochs: 2,
            period: 1,
            batch_size: 8,
            lr: 1e-3,
            ..Default::default()
        };
        cfg.model.encoder_dims = vec![8, 8];
        cfg.model.head_hidden = 6;
        cfg.model.classifier_hidden = 6;
        cfg.extraction.elbow.max_k = 21;
        cfg
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[1.0 / 3.0; 3]), 0);
    }

    #[test]
    fn accuracy_recount() {
        let s = tiny_splits(1);
        let all_right: Vec<Vec<f64>> = s
            .test
            .samples
            .iter()
            .map(|x| {
                let mut p = vec![0.0; 3];
                p[x.ground_truth] = 1.0;
                p
            })
            .collect();
        assert_eq!(accuracy(&all_right, &s.test.samples), 1.0);
        let uniform = vec![vec![1.0 / 3.0; 3]; s.test.len()];
        let naive = s.test.samples.iter().filter(|x| x.ground_truth == 0).count() as f64 / s.test.len() as f64;
        assert_eq!(accuracy(&uniform, &s.test.samples), naive);
    }

    #[test]
    fn single_batch_epoch_matches_hand_step() {
        let splits = tiny_splits(2);
        let cfg = TrainConfig {
            pretrain_epochs: 1,
            batch_size: 1000,
            ..tiny_cfg()
        };
        let mut trainer = Trainer::new(&splits, &cfg, "t").unwrap();
        let mut manual = trainer.model.clone();
        trainer.pretrain().unwrap();

        let order = trainer.shuffled(0);
        let samples: Vec<&PllSample> = order.iter().map(|&i| &splits.train.samples[i]).collect();
        let batch = Batch::from_samples(&samples);
        let cands: Vec<&CandidateLabelSet> = samples.iter().map(|s| &s.candidates).collect();
        let mut tape = Tape::new();
        let (loss, _) =
            losses::objective(&mut tape, &manual, &batch, &cands, &cfg.weights, Objective::Pretrain).unwrap();
        let [e, h, c] = manual.stores_mut();
        tape.backward(loss, &mut [e, h, c]).unwrap();
        let adam = Adam::with_lr(cfg.lr);
        for s in manual.stores_mut() {
            adam.step(s).unwrap();
        }
        for (a, b) in [
            (&trainer.model.encoder, &manual.encoder),
            (&trainer.model.head, &manual.head),
            (&trainer.model.classifier, &manual.classifier),
        ] {
            for (pa, pb) in a.iter().zip(b.iter()) {
                assert_eq!(pa.value, pb.value, "{}", pa.name);
            }
        }
    }

    #[test]
    fn aux_budget_equal_to_period_runs_one_round() {
        let splits = tiny_splits(3);
        let cfg = TrainConfig {
            aux_epochs: 2,
            period: 2,
            ..tiny_cfg()
        };
        let out = run_method(&splits, &cfg, Method::Gpcd, None).unwrap();
        assert_eq!(out.extractions.len(), 1);
        assert_eq!(out.epochs.len(), cfg.total_epochs());
    }

    #[test]
    fn empty_selection_matches_wo_auxiliary() {
        let splits = tiny_splits(4);
        let mut cfg = tiny_cfg();
        // A single cluster of every node cannot clear a high threshold.
        cfg.extraction.delta0 = 0.9;
        cfg.extraction.elbow.alpha = 1e12;
        let gpcd = run_method(&splits, &cfg, Method::Gpcd, None).unwrap();
        assert!(gpcd.extractions.iter().all(|e| e.prototypes.is_empty()));
        let wo = run_method(&splits, &cfg, Method::WoAuxiliary, None).unwrap();
        assert_eq!(gpcd.model, wo.model);
        let strip = |r: &RunOutput| -> Vec<(f64, f64)> {
            r.epochs.iter().map(|e| (e.train_loss.total, e.val_acc)).collect()
        };
        assert_eq!(strip(&gpcd), strip(&wo));
    }

    #[test]
    fn runs_are_deterministic() {
        let splits = tiny_splits(5);
        let cfg = tiny_cfg();
        let a = run_method(&splits, &cfg, Method::Gpcd, None).unwrap();
        let b = run_method(&splits, &cfg, Method::Gpcd, None).unwrap();
        assert_eq!(a.epochs, b.epochs);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn observer_sees_every_epoch() {
        let splits = tiny_splits(6);
        let cfg = tiny_cfg();
        let mut seen = Vec::new();
        let mut obs = |r: &EpochRecord| seen.push(r.epoch);
        run_method(&splits, &cfg, Method::BaselineCe, Some(&mut obs)).unwrap();
        assert_eq!(seen, (0..cfg.total_epochs()).collect::<Vec<_>>());
    }

    #[test]
    fn best_epoch_is_earliest_max() {
        let rec = |epoch, val_acc, test_acc| EpochRecord {
            run: String::new(),
            epoch,
            phase: Phase::Pretrain,
            train_loss: LossBreakdown::default(),
            train_acc: 0.0,
            val_loss: 0.0,
            val_acc,
            test_acc,
            prototypes: 0,
            delta: None,
        };
        let eps = [rec(0, 0.5, 0.1), rec(1, 0.7, 0.2), rec(2, 0.7, 0.9)];
        assert_eq!(select_best(&eps), (1, 0.7, 0.2));
    }

    #[test]
    fn oracle_requires_masks_and_identity_prune() {
        let splits = tiny_splits(7);
        let mut stripped = splits.clone();
        stripped.test.samples[0].causal_mask = None;
        assert!(matches!(
            oracle_prune_experiment(&stripped, &tiny_cfg()),
            Err(TrainError::MissingCausalMask(0))
        ));

        // An all-true mask makes pruning the identity.
        let all_true = splits.map(|ds| {
            ds.with_samples(
                ds.samples
                    .iter()
                    .map(|s| PllSample {
                        causal_mask: Some(vec![true; s.graph.node_count()]),
                        ..s.clone()
                    })
                    .collect(),
            )
        });
        let out = oracle_prune_experiment(&all_true, &tiny_cfg()).unwrap();
        assert_eq!(out.pruned_pll.model, out.full_pll.model);
        assert_eq!(out.pruned_pll.test_acc, out.full_pll.test_acc);
    }
}
