//! K-means with k-means++ seeding and an AMSE-threshold search over k.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ClusterError;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub centers: Tensor,
    pub assignments: Vec<usize>,
    /// Total squared distance to assigned centers over the point count.
    pub amse: f64,
    pub iterations: usize,
    /// Total squared error after every assignment step.
    pub sse_history: Vec<f64>,
}

impl ClusterResult {
    pub fn k(&self) -> usize {
        self.centers.rows()
    }

    /// Point indices of each cluster.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.k()];
        for (p, &c) in self.assignments.iter().enumerate() {
            m[c].push(p);
        }
        m
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center per point (lowest index on ties) and the total squared
/// error.
fn assign(points: &Tensor, centers: &Tensor) -> (Vec<usize>, f64) {
    let mut sse = 0.0;
    let a = points
        .iter_rows()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (j, c) in centers.iter_rows().enumerate() {
                let d = sq_dist(p, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            sse += best.1;
            best.0
        })
        .collect();
    (a, sse)
}

fn plus_plus_init(points: &Tensor, k: usize, r: &mut impl Rng) -> Tensor {
    let n = points.rows();
    let mut centers = Tensor::zeros(k, points.cols());
    let first = r.random_range(0..n);
    centers.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = points.iter_rows().map(|p| sq_dist(p, points.row(first))).collect();
    for j in 1..k {
        let pick = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(r),
            // Every point coincides with a chosen center.
            Err(_) => r.random_range(0..n),
        };
        centers.row_mut(j).copy_from_slice(points.row(pick));
        for (d, p) in d2.iter_mut().zip(points.iter_rows()) {
            *d = d.min(sq_dist(p, centers.row(j)));
        }
    }
    centers
}

fn update_centers(points: &Tensor, assignments: &[usize], old: &Tensor) -> Tensor {
    let (k, h) = old.shape();
    let mut sums = Tensor::zeros(k, h);
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter_rows().zip(assignments) {
        counts[c] += 1;
        for (s, v) in sums.row_mut(c).iter_mut().zip(p) {
            *s += v;
        }
    }
    for (j, &n) in counts.iter().enumerate() {
        if n > 0 {
            sums.row_mut(j).iter_mut().for_each(|s| *s /= n as f64);
        }
    }
    // Re-seed empty clusters at the points farthest from their centers.
    let mut taken = vec![false; points.rows()];
    for j in (0..k).filter(|&j| counts[j] == 0) {
        let far = points
            .iter_rows()
            .zip(assignments)
            .enumerate()
            .filter(|(i, _)| !taken[*i])
            .map(|(i, (p, &c))| (i, sq_dist(p, sums.row(c))))
            .fold((usize::MAX, -1.0), |best, (i, d)| if d > best.1 { (i, d) } else { best });
        if far.0 != usize::MAX {
            taken[far.0] = true;
            let row = points.row(far.0).to_vec();
            sums.row_mut(j).copy_from_slice(&row);
        }
    }
    sums
}

/// Lloyd iterations from a k-means++ start until the assignment stops
/// changing or `max_iters` updates have run.
pub fn kmeans(points: &Tensor, k: usize, max_iters: usize, seed: u64) -> Result<ClusterResult, ClusterError> {
    let n = points.rows();
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    if k > n {
        return Err(ClusterError::KExceedsPoints { k, points: n });
    }
    let mut r = rng::stream(seed, rng::TAG_KMEANS, k as u64);
    let mut centers = plus_plus_init(points, k, &mut r);
    let (mut assignments, mut sse) = assign(points, &centers);
    let mut history = vec![sse];
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        centers = update_centers(points, &assignments, &centers);
        let (next, next_sse) = assign(points, &centers);
        history.push(next_sse);
        sse = next_sse;
        if next == assignments {
            break;
        }
        assignments = next;
    }
    Ok(ClusterResult {
        centers,
        assignments,
        amse: sse / n as f64,
        iterations,
        sse_history: history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElbowConfig {
    /// Stop once AMSE falls below this.
    pub alpha: f64,
    pub k_step: usize,
    /// Upper bound on k regardless of the point count.
    pub max_k: usize,
    pub max_iters: usize,
}

impl Default for ElbowConfig {
    fn default() -> Self {
        Self {
            alpha: 0.28,
            k_step: 10,
            max_k: 101,
            max_iters: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElbowRound {
    pub k: usize,
    pub amse: f64,
    /// Best AMSE over this and all earlier rounds.
    pub best_amse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowResult {
    pub best: ClusterResult,
    pub rounds: Vec<ElbowRound>,
    pub reached_alpha: bool,
}

/// Runs k = 1, 1 + step, 1 + 2 step, ... and returns the first result with
/// AMSE below `alpha`, or the best one seen once k would exceed the point
/// count or `max_k`.
pub fn elbow_cluster(points: &Tensor, cfg: &ElbowConfig, seed: u64) -> Result<ElbowResult, ClusterError> {
    if !(cfg.alpha > 0.0) {
        return Err(ClusterError::InvalidAlpha(cfg.alpha));
    }
    if points.rows() == 0 {
        return Err(ClusterError::KExceedsPoints { k: 1, points: 0 });
    }
    let limit = points.rows().min(cfg.max_k.max(1));
    let mut best: Option<ClusterResult> = None;
    let mut rounds = Vec::new();
    let mut k = 1;
    while k <= limit {
        let res = kmeans(points, k, cfg.max_iters, seed)?;
        let amse = res.amse;
        if best.as_ref().is_none_or(|b| amse < b.amse) {
            best = Some(res);
        }
        let best_amse = best.as_ref().map_or(amse, |b| b.amse);
        rounds.push(ElbowRound { k, amse, best_amse });
        if amse < cfg.alpha {
            return Ok(ElbowResult {
                best: best.expect("set above"),
                rounds,
                reached_alpha: true,
            });
        }
        k += cfg.k_step.max(1);
    }
    Ok(ElbowResult {
        best: best.expect("k = 1 always runs"),
        rounds,
        reached_alpha: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::Normal;

    fn random_points(seed: u64, n: usize, h: usize) -> Tensor {
        let mut r = rng::stream(seed, 77, 0);
        let data = (0..n * h).map(|_| r.random_range(-3.0..3.0)).collect();
        Tensor::from_vec(n, h, data).unwrap()
    }

    fn blobs(seed: u64, per_blob: usize, spread: f64) -> Tensor {
        let mut r = rng::stream(seed, 78, 0);
        let noise = Normal::new(0.0, spread).unwrap();
        let mut rows = Vec::new();
        for b in 0..5 {
            let center = [10.0 * b as f64, -5.0 * b as f64];
            for _ in 0..per_blob {
                rows.push(center.iter().map(|c| c + noise.sample(&mut r)).collect());
            }
        }
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn two_tight_pairs() {
        let p = Tensor::from_rows(&[
            vec![0.0, 0.0],
            vec![0.0, 1.0],
            vec![100.0, 0.0],
            vec![100.0, 1.0],
        ])
        .unwrap();
        let res = kmeans(&p, 2, 100, 1).unwrap();
        let mut centers: Vec<Vec<f64>> = res.centers.iter_rows().map(<[f64]>::to_vec).collect();
        centers.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(centers, vec![vec![0.0, 0.5], vec![100.0, 0.5]]);
        assert_eq!(res.amse, 0.25);
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let p = random_points(3, 30, 4);
        let res = kmeans(&p, 1, 100, 0).unwrap();
        let mean = crate::graph::global_mean_pool(&p).unwrap();
        for (a, b) in res.centers.row(0).iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
        let naive = p.iter_rows().map(|r| sq_dist(r, &mean)).sum::<f64>() / 30.0;
        assert!((res.amse - naive).abs() < 1e-10);
    }

    #[test]
    fn amse_matches_recomputation() {
        for seed in 0..5 {
            let p = random_points(seed, 60, 3);
            let res = kmeans(&p, 7, 100, seed).unwrap();
            let naive = p
                .iter_rows()
                .zip(&res.assignments)
                .map(|(r, &c)| sq_dist(r, res.centers.row(c)))
                .sum::<f64>()
                / 60.0;
            assert!((res.amse - naive).abs() < 1e-10);
            // Every point sits at its nearest center.
            for (r, &c) in p.iter_rows().zip(&res.assignments) {
                let d = sq_dist(r, res.centers.row(c));
                for other in res.centers.iter_rows() {
                    assert!(d <= sq_dist(r, other));
                }
            }
        }
    }

    #[test]
    fn k_bounds() {
        let p = random_points(1, 3, 2);
        assert_eq!(kmeans(&p, 4, 10, 0), Err(ClusterError::KExceedsPoints { k: 4, points: 3 }));
        assert_eq!(kmeans(&p, 0, 10, 0), Err(ClusterError::ZeroK));
        assert!(kmeans(&p, 3, 10, 0).unwrap().amse < 1e-30);
    }

    #[test]
    fn duplicate_points_with_large_k() {
        let p = Tensor::filled(5, 2, 1.5);
        let res = kmeans(&p, 3, 10, 0).unwrap();
        assert_eq!(res.amse, 0.0);
    }

    #[test]
    fn identical_points_stop_at_k1() {
        let p = Tensor::filled(20, 3, 0.7);
        let res = elbow_cluster(&p, &ElbowConfig::default(), 0).unwrap();
        assert_eq!(res.best.k(), 1);
        assert!(res.best.amse < 1e-20);
        assert!(res.reached_alpha);
    }

    #[test]
    fn alpha_above_k1_amse_returns_k1() {
        let p = random_points(4, 50, 2);
        let k1 = kmeans(&p, 1, 100, 0).unwrap().amse;
        let cfg = ElbowConfig {
            alpha: k1 * 1.01,
            ..ElbowConfig::default()
        };
        let res = elbow_cluster(&p, &cfg, 0).unwrap();
        assert_eq!(res.rounds.len(), 1);
        assert_eq!(res.best.k(), 1);
    }

    #[test]
    fn five_blobs_reach_small_alpha() {
        let p = blobs(2, 40, 0.3);
        let cfg = ElbowConfig {
            alpha: 0.3,
            ..ElbowConfig::default()
        };
        let res = elbow_cluster(&p, &cfg, 9).unwrap();
        assert!(res.reached_alpha);
        assert!(res.best.amse < 0.3);
        assert!(res.best.k() <= p.rows());
        for w in res.rounds.windows(2) {
            assert!(w[1].best_amse <= w[0].best_amse);
        }
    }

    #[test]
    fn invalid_alpha() {
        let p = random_points(0, 4, 2);
        let cfg = ElbowConfig {
            alpha: 0.0,
            ..ElbowConfig::default()
        };
        assert_eq!(elbow_cluster(&p, &cfg, 0), Err(ClusterError::InvalidAlpha(0.0)));
    }

    #[test]
    fn point_count_caps_k() {
        let p = random_points(5, 15, 2);
        let cfg = ElbowConfig {
            alpha: 1e-300,
            ..ElbowConfig::default()
        };
        let res = elbow_cluster(&p, &cfg, 0).unwrap();
        assert!(!res.reached_alpha);
        assert_eq!(res.rounds.iter().map(|r| r.k).collect::<Vec<_>>(), vec![1, 11]);
    }

    proptest! {
        #[test]
        fn lloyd_never_increases_error(seed in any::<u64>(), k in 1usize..9) {
            let p = random_points(seed, 40, 3);
            let res = kmeans(&p, k, 100, seed).unwrap();
            for w in res.sse_history.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", res.sse_history);
            }
            prop_assert_eq!(&res, &kmeans(&p, k, 100, seed).unwrap());
        }
    }
}
