//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamIdx, ParamStore, Tape, Var};
use crate::error::{ModelError, NumericError};
use crate::graph::{CandidateLabelSet, PllSample};
use crate::losses::{objective, Guidance, LossWeights, Objective, Reduction};
use crate::model::{Batch, Model};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
const DENOM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub param: String,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    /// Entries rejected because the one-sided slopes disagree (a ReLU kink
    /// lies inside the probe interval).
    pub skipped_kinks: usize,
    pub worst: Option<ProbeResult>,
}

fn eval<F>(forward: &F, stores: &[&mut ParamStore]) -> Result<f64, NumericError>
where
    F: Fn(&mut Tape, &[&ParamStore]) -> Result<Var, NumericError>,
{
    let refs: Vec<&ParamStore> = stores.iter().map(|s| &**s).collect();
    let mut tape = Tape::new();
    let loss = forward(&mut tape, &refs)?;
    tape.value(loss)
        .item()
        .ok_or(NumericError::NotScalar(tape.value(loss).shape()))
}

/// Compares backward gradients with central differences on `probe_count`
/// randomly chosen parameter entries. `forward` must be deterministic.
///
/// Existing gradients in `stores` are cleared and replaced by the analytic
/// gradient of the loss at the current values.
pub fn gradcheck<F>(
    forward: F,
    stores: &mut [&mut ParamStore],
    probe_count: usize,
    seed: u64,
) -> Result<GradcheckReport, NumericError>
where
    F: Fn(&mut Tape, &[&ParamStore]) -> Result<Var, NumericError>,
{
    for s in stores.iter_mut() {
        s.zero_grad();
    }
    {
        let refs: Vec<&ParamStore> = stores.iter().map(|s| &**s).collect();
        let mut tape = Tape::new();
        let loss = forward(&mut tape, &refs)?;
        drop(refs);
        tape.backward(loss, stores)?;
    }

    // Flat index over (store, param, entry).
    let mut slots = Vec::new();
    for (si, s) in stores.iter().enumerate() {
        for (pi, p) in s.iter().enumerate() {
            for e in 0..p.value.len() {
                slots.push((si, pi, e));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = sample(&mut rng, slots.len(), slots.len());

    let f0 = eval(&forward, stores)?;
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        probes: 0,
        skipped_kinks: 0,
        worst: None,
    };
    for slot in order.iter() {
        if report.probes >= probe_count {
            break;
        }
        let (si, pi, e) = slots[slot];
        let idx = ParamIdx(pi);
        let original = stores[si].get(idx).value.data()[e];
        let analytic = stores[si].get(idx).grad.data()[e];

        stores[si].get_mut(idx).value.data_mut()[e] = original + FD_STEP;
        let fp = eval(&forward, stores)?;
        stores[si].get_mut(idx).value.data_mut()[e] = original - FD_STEP;
        let fm = eval(&forward, stores)?;
        stores[si].get_mut(idx).value.data_mut()[e] = original;

        let right = (fp - f0) / FD_STEP;
        let left = (f0 - fm) / FD_STEP;
        let jump = (right - left).abs();
        if jump > 1e-6 && jump > 0.1 * right.abs().max(left.abs()) {
            report.skipped_kinks += 1;
            continue;
        }

        let numeric = (fp - fm) / (2.0 * FD_STEP);
        let denom = analytic.abs().max(numeric.abs()).max(DENOM_FLOOR);
        let rel_error = (analytic - numeric).abs() / denom;
        report.probes += 1;
        if rel_error >= report.max_rel_error {
            report.max_rel_error = rel_error;
            report.worst = Some(ProbeResult {
                param: stores[si].get(idx).name.clone(),
                entry: e,
                analytic,
                numeric,
                rel_error,
            });
        }
    }
    Ok(report)
}

/// Which training objective a loss gradcheck differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// `L_ce + L_o`.
    Pretrain,
    /// `L_ce + L_o + L_v + L_g` with one prototype per graph.
    Auxiliary,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossCheckConfig {
    pub weights: LossWeights,
    pub lambda: u32,
    pub beta: f64,
    pub g_reduction: Reduction,
    pub probes: usize,
    pub seed: u64,
}

fn model_err(e: ModelError) -> NumericError {
    match e {
        ModelError::Numeric(n) => n,
        other => NumericError::InvalidArgument(other.to_string()),
    }
}

/// Gradcheck of a full training objective of `model` on `samples` (one
/// batch).
///
/// For `Auxiliary`, the prototypes are the encodings of each graph's first
/// node with `O` set to their head projections. `L_g` targets are held at
/// the starting `O`, matching how the objective treats them as constants.
pub fn loss_gradcheck(
    model: &Model,
    samples: &[&PllSample],
    kind: LossKind,
    cfg: &LossCheckConfig,
) -> Result<GradcheckReport, ModelError> {
    let batch = Batch::from_samples(samples);
    let cands: Vec<&CandidateLabelSet> = samples.iter().map(|s| &s.candidates).collect();
    let mut enc = model.encoder.clone();
    let mut head = model.head.clone();
    let mut clf = model.classifier.clone();

    let (centers, mut outputs, o_idx) = {
        let rows: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| model.encode_nodes(&s.graph).map(|h| h.row(0).to_vec()))
            .collect::<Result<_, _>>()?;
        let centers = Tensor::from_rows(&rows)?;
        let o = model.node_project(&centers)?;
        let mut store = ParamStore::new();
        let idx = store.add("O", o);
        (centers, store, idx)
    };
    let frozen_o = outputs.value(o_idx).clone();

    let forward = |tape: &mut Tape, refs: &[&ParamStore]| -> Result<Var, NumericError> {
        let mut m = model.clone();
        m.encoder = refs[0].snapshot();
        m.head = refs[1].snapshot();
        m.classifier = refs[2].snapshot();
        let which = match kind {
            LossKind::Pretrain => Objective::Pretrain,
            LossKind::Auxiliary => Objective::Auxiliary(Some(Guidance {
                centers: &centers,
                outputs: refs[3],
                outputs_idx: o_idx,
                beta: cfg.beta,
                lambda: cfg.lambda,
                g_reduction: cfg.g_reduction,
                target_outputs: Some(&frozen_o),
            })),
        };
        objective(tape, &m, &batch, &cands, &cfg.weights, which)
            .map(|(loss, _)| loss)
            .map_err(model_err)
    };
    let report = match kind {
        LossKind::Pretrain => gradcheck(forward, &mut [&mut enc, &mut head, &mut clf], cfg.probes, cfg.seed),
        LossKind::Auxiliary => gradcheck(
            forward,
            &mut [&mut enc, &mut head, &mut clf, &mut outputs],
            cfg.probes,
            cfg.seed,
        ),
    };
    Ok(report?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_loss_is_exact() {
        let mut store = ParamStore::new();
        let w = store.add(
            "w",
            Tensor::from_rows(&[vec![0.3, -1.2, 2.0], vec![0.9, 0.1, -0.4]]).unwrap(),
        );
        let forward = |tape: &mut Tape, s: &[&ParamStore]| {
            let x = tape.param(s[0], w)?;
            let sq = tape.pow(x, 2)?;
            tape.sum(sq)
        };
        let report = gradcheck(forward, &mut [&mut store], 6, 1).unwrap();
        assert_eq!(report.probes, 6);
        assert!(report.max_rel_error < 1e-7, "{report:?}");
        // The analytic gradient of sum(w^2) is 2w.
        let p = store.get(w);
        for (g, v) in p.grad.data().iter().zip(p.value.data()) {
            assert_eq!(*g, 2.0 * v);
        }
    }

    #[test]
    fn three_layer_composition_matches() {
        let mut store = ParamStore::new();
        let a = store.add(
            "a",
            Tensor::from_rows(&[vec![0.5, -0.3], vec![0.2, 0.8], vec![-0.6, 0.1]]).unwrap(),
        );
        let b = store.add(
            "b",
            Tensor::from_rows(&[vec![0.7, -0.2, 0.4], vec![0.3, 0.9, -0.5]]).unwrap(),
        );
        let c = store.add("c", Tensor::row_vector(&[0.05, -0.1, 0.2]));
        let x = Tensor::from_rows(&[vec![1.0, -0.5, 0.25], vec![0.3, 0.7, -1.1]]).unwrap();
        let forward = |tape: &mut Tape, s: &[&ParamStore]| {
            let xv = tape.constant(x.clone())?;
            let av = tape.param(s[0], a)?;
            let bv = tape.param(s[0], b)?;
            let cv = tape.param(s[0], c)?;
            let h = tape.matmul(xv, av)?;
            let h = tape.tanh(h)?;
            let h = tape.matmul(h, bv)?;
            let h = tape.add_row(h, cv)?;
            let p = tape.softmax_rows(h)?;
            let lp = tape.log(p)?;
            tape.weighted_sum(lp, vec![(0, 1, -1.0), (1, 2, -0.5)])
        };
        let report = gradcheck(forward, &mut [&mut store], 100, 3).unwrap();
        assert_eq!(report.probes, store.scalar_count());
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn relu_kink_is_skipped() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row_vector(&[0.0, 0.5, -0.5]));
        let forward = |tape: &mut Tape, s: &[&ParamStore]| {
            let x = tape.param(s[0], w)?;
            let r = tape.relu(x)?;
            tape.sum(r)
        };
        let report = gradcheck(forward, &mut [&mut store], 3, 0).unwrap();
        assert_eq!(report.skipped_kinks, 1);
        assert_eq!(report.probes, 2);
        assert!(report.max_rel_error < 1e-8);
    }
    fn two_graph_setup() -> (Model, Vec<PllSample>) {
        use crate::config::DataConfig;
        use crate::model::ModelConfig;
        let splits = DataConfig::default().build(3).unwrap();
        let samples: Vec<PllSample> = splits.train.samples[..2].to_vec();
        let model = Model::new(
            ModelConfig {
                feature_dim: splits.train.feature_dim,
                num_classes: splits.train.num_classes,
                ..ModelConfig::default()
            },
            5,
        )
        .unwrap();
        (model, samples)
    }

    fn loss_cfg() -> LossCheckConfig {
        LossCheckConfig {
            weights: LossWeights::default(),
            lambda: 4,
            beta: 0.7,
            g_reduction: Reduction::Sum,
            probes: 150,
            seed: 9,
        }
    }

    #[test]
    fn full_objectives_match_finite_differences() {
        let (model, samples) = two_graph_setup();
        let refs: Vec<&PllSample> = samples.iter().collect();
        for kind in [LossKind::Pretrain, LossKind::Auxiliary] {
            let r = loss_gradcheck(&model, &refs, kind, &loss_cfg()).unwrap();
            assert_eq!(r.probes, 150, "{kind:?}");
            assert!(r.max_rel_error < 1e-4, "{kind:?}: {r:?}");
        }
    }
}
