//! Brute-force check of where the candidate-power objective is minimized.
//!
//! For a set of samples sharing one causal subgraph, the model's output on
//! that subgraph is a single point `psi` of the probability simplex. The
//! candidate objective is `L1 = -sum_i sum_{y in Y_i} psi_y^lambda` and the
//! supervised one is `L2 = -sum_i ln psi_{y*_i}`. Both are evaluated on every
//! grid point of the simplex.

use serde::{Deserialize, Serialize};

use crate::error::TheoremError;

/// One sample: its ground truth and the distractors in its candidate set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub truth: usize,
    pub distractors: Vec<usize>,
}

impl ProfileEntry {
    pub fn new(truth: usize, distractors: &[usize]) -> Self {
        Self {
            truth,
            distractors: distractors.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub num_classes: usize,
    pub lambda: u32,
    pub grid_step: f64,
    pub grid_points: usize,
    pub truth: usize,
    /// Grid minimizer of `L1`; among ties, the one with the least truth mass.
    pub minimizer: Vec<f64>,
    pub truth_mass: f64,
    pub l1_min: f64,
    /// Grid points attaining `l1_min`.
    pub num_minimizers: usize,
    pub unique: bool,
    /// The minimizer is unique and is the ground-truth vertex.
    pub at_truth_vertex: bool,
    pub l2_at_minimizer: f64,
    pub l2_min: f64,
    pub l2_minimized_there: bool,
}

fn validate(num_classes: usize, profile: &[ProfileEntry]) -> Result<usize, TheoremError> {
    let bad = |m: String| Err(TheoremError::InvalidProfile(m));
    if num_classes < 2 {
        return bad("at least two classes are required".into());
    }
    let Some(first) = profile.first() else {
        return bad("profile is empty".into());
    };
    let mut sets = Vec::with_capacity(profile.len());
    for (i, e) in profile.iter().enumerate() {
        if e.truth != first.truth {
            return bad(format!("entry {i} has a different ground truth from entry 0"));
        }
        if e.distractors.is_empty() {
            return bad(format!("entry {i} has no distractor"));
        }
        let mut all = e.distractors.clone();
        all.push(e.truth);
        all.sort_unstable();
        if all.iter().any(|&c| c >= num_classes) {
            return bad(format!("entry {i} names a class outside 0..{num_classes}"));
        }
        if all.windows(2).any(|w| w[0] == w[1]) {
            return bad(format!("entry {i} repeats a label"));
        }
        let mut d = e.distractors.clone();
        d.sort_unstable();
        sets.push(d);
    }
    if sets.iter().all(|s| *s == sets[0]) {
        return bad("distractors are constant across the profile".into());
    }
    Ok(first.truth)
}

fn grid_resolution(step: f64) -> Result<usize, TheoremError> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(TheoremError::InvalidGridStep(step));
    }
    let n = (1.0 / step).round();
    if (n * step - 1.0).abs() > 1e-9 {
        return Err(TheoremError::InvalidGridStep(step));
    }
    Ok(n as usize)
}

/// Calls `f` with every composition of `n` into `parts` non-negative integers.
fn for_each_composition(n: usize, parts: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(rest: usize, slot: usize, cur: &mut [usize], f: &mut impl FnMut(&[usize])) {
        if slot + 1 == cur.len() {
            cur[slot] = rest;
            f(cur);
            return;
        }
        for v in 0..=rest {
            cur[slot] = v;
            rec(rest - v, slot + 1, cur, f);
        }
    }
    let mut cur = vec![0; parts];
    rec(n, 0, &mut cur, f);
}

const TIE_TOL: f64 = 1e-12;

pub fn verify_theorem3(
    num_classes: usize,
    profile: &[ProfileEntry],
    lambda: u32,
    grid_step: f64,
) -> Result<TheoremReport, TheoremError> {
    let truth = validate(num_classes, profile)?;
    if lambda == 0 {
        return Err(TheoremError::InvalidProfile("lambda must be at least 1".into()));
    }
    let n = grid_resolution(grid_step)?;
    let mut count = vec![0.0; num_classes];
    for e in profile {
        count[e.truth] += 1.0;
        for &d in &e.distractors {
            count[d] += 1.0;
        }
    }
    let samples = profile.len() as f64;
    let l2 = |psi_t: f64| -samples * psi_t.ln();

    let mut points = 0usize;
    let mut best = f64::INFINITY;
    let mut ties = 0usize;
    let mut best_point = vec![0usize; num_classes];
    let mut l2_min = f64::INFINITY;
    for_each_composition(n, num_classes, &mut |c| {
        points += 1;
        let l1: f64 = -c
            .iter()
            .zip(&count)
            .map(|(&ci, &w)| w * (ci as f64 / n as f64).powi(lambda as i32))
            .sum::<f64>();
        l2_min = l2_min.min(l2(c[truth] as f64 / n as f64));
        let tol = TIE_TOL * best.abs().max(1.0);
        if points == 1 || l1 < best - tol {
            best = l1;
            ties = 1;
            best_point.copy_from_slice(c);
        } else if (l1 - best).abs() <= tol {
            ties += 1;
            if c[truth] < best_point[truth] {
                best_point.copy_from_slice(c);
            }
        }
    });

    let minimizer: Vec<f64> = best_point.iter().map(|&c| c as f64 / n as f64).collect();
    let truth_mass = minimizer[truth];
    let l2_at = l2(truth_mass);
    Ok(TheoremReport {
        num_classes,
        lambda,
        grid_step,
        grid_points: points,
        truth,
        truth_mass,
        l1_min: best,
        num_minimizers: ties,
        unique: ties == 1,
        at_truth_vertex: ties == 1 && best_point[truth] == n,
        l2_at_minimizer: l2_at,
        l2_min,
        l2_minimized_there: l2_at <= l2_min + TIE_TOL * l2_min.abs().max(1.0),
        minimizer,
    })
}

/// Truth mass of the grid minimizer for each `lambda`.
pub fn truth_mass_path(
    num_classes: usize,
    profile: &[ProfileEntry],
    lambdas: impl IntoIterator<Item = u32>,
    grid_step: f64,
) -> Result<Vec<(u32, f64)>, TheoremError> {
    lambdas
        .into_iter()
        .map(|l| verify_theorem3(num_classes, profile, l, grid_step).map(|r| (l, r.truth_mass)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_sample() -> Vec<ProfileEntry> {
        vec![ProfileEntry::new(0, &[1]), ProfileEntry::new(0, &[2])]
    }

    #[test]
    fn squared_profile_minimizes_at_truth() {
        let r = verify_theorem3(3, &two_sample(), 2, 0.01).unwrap();
        assert_eq!(r.minimizer, vec![1.0, 0.0, 0.0]);
        assert_eq!(r.l1_min, -2.0);
        assert!(r.unique && r.at_truth_vertex && r.l2_minimized_there);
        assert_eq!(r.l2_at_minimizer, 0.0);
        assert_eq!(r.grid_points, 101 * 102 / 2);
    }

    #[test]
    fn linear_case_is_still_minimized_at_truth_for_this_profile() {
        // L1 = -(1 + psi_0) here, so the vertex is the unique minimizer.
        let r = verify_theorem3(3, &two_sample(), 1, 0.01).unwrap();
        assert!(r.at_truth_vertex);
        assert_eq!(r.l1_min, -2.0);
    }

    #[test]
    fn linear_case_with_equal_weights_has_a_face_of_minimizers() {
        // Truth and distractor 1 both appear twice: every point on the edge
        // between their vertices ties.
        let p = vec![ProfileEntry::new(0, &[1, 2]), ProfileEntry::new(0, &[1, 3])];
        let r = verify_theorem3(4, &p, 1, 0.1).unwrap();
        assert_eq!(r.num_minimizers, 11);
        assert_eq!(r.truth_mass, 0.0);
        assert!(!r.unique);
    }

    #[test]
    fn invalid_profiles() {
        let constant = vec![ProfileEntry::new(0, &[1]), ProfileEntry::new(0, &[1])];
        assert!(matches!(verify_theorem3(3, &constant, 2, 0.01), Err(TheoremError::InvalidProfile(_))));
        let mixed_truth = vec![ProfileEntry::new(0, &[1]), ProfileEntry::new(1, &[2])];
        assert!(verify_theorem3(3, &mixed_truth, 2, 0.01).is_err());
        let out_of_range = vec![ProfileEntry::new(0, &[1]), ProfileEntry::new(0, &[5])];
        assert!(verify_theorem3(3, &out_of_range, 2, 0.01).is_err());
        assert_eq!(verify_theorem3(3, &two_sample(), 2, 0.3), Err(TheoremError::InvalidGridStep(0.3)));
    }

    #[test]
    fn composition_count() {
        let mut n = 0;
        for_each_composition(10, 4, &mut |c| {
            assert_eq!(c.iter().sum::<usize>(), 10);
            n += 1;
        });
        assert_eq!(n, 286);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        // For lambda >= 2, L1 is concave, so the minimum
        // sits at the vertex of the most frequent candidate.
        #[test]
        fn grid_minimum_matches_vertex_oracle(
            lambda in 2u32..=7,
            raw in prop::collection::vec(prop::collection::btree_set(1usize..4, 1..3), 2..5),
        ) {
            let profile: Vec<ProfileEntry> = raw
                .iter()
                .map(|s| ProfileEntry::new(0, &s.iter().copied().collect::<Vec<_>>()))
                .collect();
            prop_assume!(raw.iter().any(|s| *s != raw[0]));
            let mut count = [0usize; 4];
            for e in &profile {
                count[0] += 1;
                for &d in &e.distractors {
                    count[d] += 1;
                }
            }
            let top = *count.iter().max().unwrap();
            let r = verify_theorem3(4, &profile, lambda, 0.05).unwrap();
            prop_assert!((r.l1_min + top as f64).abs() < 1e-9);
            prop_assert_eq!(r.num_minimizers, count.iter().filter(|&&c| c == top).count());
        }
    }
}
