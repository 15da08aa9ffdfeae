//! Candidate-label noise models.
//!
//! Each generator discards any existing candidates and rebuilds them from the
//! ground truth, drawing from a per-sample stream so output depends only on
//! `(dataset, parameters, seed)`.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::NoiseError;
use crate::graph::{CandidateLabelSet, Dataset, PllSample};
use crate::rng;

fn rebuild(
    ds: &Dataset,
    seed: u64,
    tag: u64,
    mut draw: impl FnMut(usize, &mut ChaCha8Rng) -> Vec<usize>,
) -> Dataset {
    let samples = ds
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut r = rng::stream(seed, tag, i as u64);
            let mut classes = draw(s.ground_truth, &mut r);
            classes.sort_unstable();
            classes.dedup();
            PllSample {
                candidates: CandidateLabelSet::new(classes, ds.num_classes)
                    .expect("generated candidates are valid by construction"),
                ..s.clone()
            }
        })
        .collect();
    ds.with_samples(samples)
}

/// Uniform wrong class, i.e. a uniform draw from the `d - 1` classes other
/// than `truth`.
fn wrong_class(truth: usize, d: usize, r: &mut ChaCha8Rng) -> usize {
    let c = r.random_range(0..d - 1);
    if c >= truth {
        c + 1
    } else {
        c
    }
}

/// Ground truth plus `k - 1` distinct distractors drawn uniformly without
/// replacement.
pub fn add_random_pll(ds: &Dataset, k: usize, seed: u64) -> Result<Dataset, NoiseError> {
    let d = ds.num_classes;
    if k > d {
        return Err(NoiseError::KTooLarge { k, d });
    }
    if k < 2 {
        return Err(NoiseError::KTooSmall(k));
    }
    Ok(rebuild(ds, seed, rng::TAG_RANDOM_PLL, |truth, r| {
        let mut out = vec![truth];
        out.extend(
            sample(r, d - 1, k - 1)
                .into_iter()
                .map(|c| if c >= truth { c + 1 } else { c }),
        );
        out
    }))
}

/// Union of the labels emitted by simulated annotators; annotator `a` emits
/// the truth with probability `accuracies[a]` and a uniform wrong class
/// otherwise. `K` varies per sample.
pub fn add_annotator_pll(ds: &Dataset, accuracies: &[f64], seed: u64) -> Result<Dataset, NoiseError> {
    if let Some(&bad) = accuracies.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(NoiseError::InvalidAccuracy(bad));
    }
    if !accuracies.contains(&1.0) {
        return Err(NoiseError::NoPerfectAnnotator);
    }
    let d = ds.num_classes;
    if d < 2 {
        return Err(NoiseError::TooFewClasses);
    }
    Ok(rebuild(ds, seed, rng::TAG_ANNOTATOR_PLL, |truth, r| {
        accuracies
            .iter()
            .map(|&acc| {
                if r.random::<f64>() < acc {
                    truth
                } else {
                    wrong_class(truth, d, r)
                }
            })
            .collect()
    }))
}

/// The semantically nearest class: the predecessor in `order`, or the
/// successor for the first class.
pub fn nearest_class(order: &[usize], class: usize) -> Option<usize> {
    let pos = order.iter().position(|&c| c == class)?;
    if pos > 0 {
        Some(order[pos - 1])
    } else {
        order.get(1).copied()
    }
}

/// Exactly one distractor: the nearest class under `order` with probability
/// `rho`, otherwise a uniform draw from the remaining wrong classes.
pub fn add_competitive_pll(
    ds: &Dataset,
    order: &[usize],
    rho: f64,
    seed: u64,
) -> Result<Dataset, NoiseError> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(NoiseError::InvalidRho(rho));
    }
    let d = ds.num_classes;
    if d < 2 {
        return Err(NoiseError::TooFewClasses);
    }
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..d).collect::<Vec<_>>() {
        return Err(NoiseError::InvalidOrder(d));
    }
    let nearest: Vec<usize> = (0..d)
        .map(|c| nearest_class(order, c).expect("order is a permutation with d >= 2"))
        .collect();
    Ok(rebuild(ds, seed, rng::TAG_COMPETITIVE_PLL, |truth, r| {
        let near = nearest[truth];
        let hit = r.random::<f64>() < rho;
        let distractor = if hit || d == 2 {
            near
        } else {
            let rest: Vec<usize> = (0..d).filter(|&c| c != truth && c != near).collect();
            rest[r.random_range(0..rest.len())]
        };
        vec![truth, distractor]
    }))
}

/// Class-index order, the default semantic scale.
pub fn identity_order(d: usize) -> Vec<usize> {
    (0..d).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, Split};
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    /// Single-node samples with cyclic ground truths.
    fn label_only(n: usize, d: usize) -> Dataset {
        let samples = (0..n)
            .map(|i| {
                let t = i % d;
                PllSample::new(
                    Graph::new(Tensor::filled(1, 1, 0.0), vec![]).unwrap(),
                    CandidateLabelSet::new(vec![t], d).unwrap(),
                    t,
                    None,
                )
                .unwrap()
            })
            .collect();
        Dataset::new(Split::Train, d, 1, samples).unwrap()
    }

    fn with_truth(n: usize, d: usize, t: usize) -> Dataset {
        let base = label_only(n, d);
        let samples = base
            .samples
            .iter()
            .map(|s| PllSample {
                ground_truth: t,
                candidates: CandidateLabelSet::new(vec![t], d).unwrap(),
                ..s.clone()
            })
            .collect();
        base.with_samples(samples)
    }

    #[test]
    fn random_two_of_two() {
        let out = add_random_pll(&label_only(20, 2), 2, 1).unwrap();
        for s in &out.samples {
            assert_eq!(s.candidates.classes(), &[0, 1]);
        }
        assert_eq!(out.num_candidates, Some(2));
    }

    #[test]
    fn random_rejects_k_above_d() {
        assert_eq!(
            add_random_pll(&label_only(3, 2), 3, 1),
            Err(NoiseError::KTooLarge { k: 3, d: 2 })
        );
    }

    #[test]
    fn random_distractor_frequencies() {
        let out = add_random_pll(&with_truth(10_000, 5, 2), 2, 9).unwrap();
        let mut counts = [0usize; 5];
        for s in &out.samples {
            for &c in s.candidates.classes() {
                if c != 2 {
                    counts[c] += 1;
                }
            }
        }
        assert_eq!(counts[2], 0);
        for c in [0, 1, 3, 4] {
            let f = counts[c] as f64 / 10_000.0;
            assert!((f - 0.25).abs() <= 0.02, "class {c}: {f}");
        }
    }

    #[test]
    fn annotator_perfect_only() {
        let out = add_annotator_pll(&label_only(30, 4), &[1.0], 3).unwrap();
        for s in &out.samples {
            assert_eq!(s.candidates.classes(), &[s.ground_truth]);
        }
    }

    #[test]
    fn annotator_requires_perfect() {
        assert_eq!(
            add_annotator_pll(&label_only(3, 2), &[0.7], 3),
            Err(NoiseError::NoPerfectAnnotator)
        );
    }

    #[test]
    fn annotator_wrong_label_rate() {
        let out = add_annotator_pll(&label_only(10_000, 2), &[1.0, 0.7, 0.5], 5).unwrap();
        let wrong = out.samples.iter().filter(|s| s.candidates.len() == 2).count();
        let f = wrong as f64 / 10_000.0;
        // P(wrong included) = 1 - 0.7 * 0.5.
        assert!((f - 0.65).abs() <= 0.02, "{f}");
        assert_eq!(out.num_candidates, None);
    }

    #[test]
    fn competitive_two_classes() {
        let out = add_competitive_pll(&label_only(50, 2), &[0, 1], 0.3, 2).unwrap();
        for s in &out.samples {
            assert_eq!(s.candidates.classes(), &[0, 1]);
        }
    }

    #[test]
    fn competitive_nearest_rate() {
        // Middle of a three-point scale.
        let out = add_competitive_pll(&with_truth(10_000, 3, 1), &[0, 1, 2], 0.9, 4).unwrap();
        let near = nearest_class(&[0, 1, 2], 1).unwrap();
        let hits = out
            .samples
            .iter()
            .filter(|s| s.candidates.contains(near))
            .count();
        let f = hits as f64 / 10_000.0;
        assert!((f - 0.9).abs() <= 0.01, "{f}");
    }

    #[test]
    fn competitive_invalid_rho_and_order() {
        assert_eq!(
            add_competitive_pll(&label_only(3, 3), &[0, 1, 2], 1.2, 0),
            Err(NoiseError::InvalidRho(1.2))
        );
        assert_eq!(
            add_competitive_pll(&label_only(3, 3), &[0, 1, 1], 0.5, 0),
            Err(NoiseError::InvalidOrder(3))
        );
    }

    #[test]
    fn nearest_class_endpoints() {
        assert_eq!(nearest_class(&[2, 0, 1], 2), Some(0));
        assert_eq!(nearest_class(&[2, 0, 1], 1), Some(0));
        assert_eq!(nearest_class(&[2, 0, 1], 0), Some(2));
    }

    proptest! {
        #[test]
        fn generators_keep_truth_and_are_deterministic(
            d in 2usize..7, seed in any::<u64>(), rho in 0.0f64..=1.0
        ) {
            let ds = label_only(40, d);
            let k = 2 + (seed as usize % (d - 1));
            let outs = [
                add_random_pll(&ds, k, seed).unwrap(),
                add_annotator_pll(&ds, &[1.0, 0.6, 0.2], seed).unwrap(),
                add_competitive_pll(&ds, &identity_order(d), rho, seed).unwrap(),
            ];
            for out in &outs {
                for s in &out.samples {
                    prop_assert!(s.candidates.contains(s.ground_truth));
                }
            }
            prop_assert_eq!(&outs[0], &add_random_pll(&ds, k, seed).unwrap());
            prop_assert_eq!(outs[0].num_candidates, Some(k));
            prop_assert_eq!(outs[2].num_candidates, Some(2));
        }
    }
}
