//! Superpixel- and cluster-level statistics: majority votes, dominance
//! ratios, complexity filtering, feature pooling, and seeded k-means.
//!
//! Every tie anywhere resolves toward the lowest index (class id, superpixel
//! id, point id), which keeps the whole pipeline deterministic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, RptError};
use crate::slic::SuperpixelMap;
use crate::tensor::{FeatureMap, LabelMap, ProbMap, IGNORE_LABEL};

/// Per-pixel argmax over a probability map; ties pick the lowest class.
pub fn argmax_labels(p: &ProbMap) -> LabelMap {
    let mut data = Vec::with_capacity(p.height * p.width);
    for px in 0..p.height * p.width {
        let mut best = 0usize;
        let mut best_v = p.data[px * p.classes];
        for c in 1..p.classes {
            let v = p.data[px * p.classes + c];
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        data.push(best as u8);
    }
    LabelMap::new(p.height, p.width, data).expect("dims come from a valid ProbMap")
}

/// Majority-vote summary of every superpixel.
///
/// `dominative[i]` is `None` when superpixel `i` contains only ignore pixels;
/// such superpixels are excluded from retention and from every regularizer.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelStats {
    pub count: usize,
    /// Total member pixels per superpixel (ignore pixels included).
    pub pixel_count: Vec<u32>,
    /// Majority label per superpixel; ties pick the lowest class id.
    pub dominative: Vec<Option<u8>>,
    /// Votes for the majority label divided by the member pixel count.
    pub dominance_ratio: Vec<f64>,
    /// Mean (row, col) over all member pixels.
    pub centroid: Vec<(f64, f64)>,
}

impl SuperpixelStats {
    pub fn is_valid(&self, id: usize) -> bool {
        self.dominative[id].is_some()
    }
}

/// Votes the dominative category of every superpixel from a label map.
pub fn dominative_categories(
    sp: &SuperpixelMap,
    labels: &LabelMap,
    classes: usize,
) -> Result<SuperpixelStats> {
    if sp.height != labels.height || sp.width != labels.width {
        return Err(RptError::Invalid(format!(
            "superpixel map {}x{} does not match labels {}x{}",
            sp.height, sp.width, labels.height, labels.width
        )));
    }
    labels.validate_classes(classes)?;
    let n = sp.count;
    let mut votes = vec![0u32; n * classes];
    let mut pixel_count = vec![0u32; n];
    let mut row_sum = vec![0.0f64; n];
    let mut col_sum = vec![0.0f64; n];
    for idx in 0..sp.ids.len() {
        let id = sp.ids[idx] as usize;
        pixel_count[id] += 1;
        row_sum[id] += (idx / sp.width) as f64;
        col_sum[id] += (idx % sp.width) as f64;
        let v = labels.data[idx];
        if v != IGNORE_LABEL {
            votes[id * classes + v as usize] += 1;
        }
    }
    let mut dominative = Vec::with_capacity(n);
    let mut dominance_ratio = Vec::with_capacity(n);
    let mut centroid = Vec::with_capacity(n);
    for id in 0..n {
        let mut best_class = None;
        let mut best_votes = 0u32;
        for c in 0..classes {
            let v = votes[id * classes + c];
            // Strict '>' keeps the lowest class on ties.
            if v > best_votes {
                best_votes = v;
                best_class = Some(c as u8);
            }
        }
        dominative.push(best_class);
        dominance_ratio.push(if best_class.is_some() {
            best_votes as f64 / pixel_count[id] as f64
        } else {
            0.0
        });
        centroid.push((
            row_sum[id] / pixel_count[id] as f64,
            col_sum[id] / pixel_count[id] as f64,
        ));
    }
    Ok(SuperpixelStats {
        count: n,
        pixel_count,
        dominative,
        dominance_ratio,
        centroid,
    })
}

/// The superpixels that survive complexity filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct RetainedSet {
    pub retained: Vec<bool>,
    pub count: usize,
}

impl RetainedSet {
    #[inline]
    pub fn contains(&self, id: usize) -> bool {
        self.retained[id]
    }
}

/// Keeps the `round(keep_fraction * N)` superpixels with the highest
/// dominance ratio; ties keep the lower superpixel id. Invalid (all-ignore)
/// superpixels are never retained.
pub fn complexity_filter(stats: &SuperpixelStats, keep_fraction: f64) -> Result<RetainedSet> {
    if !(0.0..=1.0).contains(&keep_fraction) || keep_fraction <= 0.0 {
        return Err(RptError::Invalid(format!(
            "keep_fraction must be in (0, 1], got {keep_fraction}"
        )));
    }
    let n = stats.count;
    let want = (keep_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).filter(|&i| stats.is_valid(i)).collect();
    order.sort_by(|&a, &b| {
        stats.dominance_ratio[b]
            .partial_cmp(&stats.dominance_ratio[a])
            .expect("ratios are finite")
            .then(a.cmp(&b))
    });
    let take = want.min(order.len());
    let mut retained = vec![false; n];
    for &id in order.iter().take(take) {
        retained[id] = true;
    }
    Ok(RetainedSet {
        retained,
        count: take,
    })
}

/// Mean feature vector per superpixel, row-major `count x depth`.
pub fn pool_features(features: &FeatureMap, sp: &SuperpixelMap) -> Result<Vec<f64>> {
    if sp.height != features.height || sp.width != features.width {
        return Err(RptError::Invalid(format!(
            "superpixel map {}x{} does not match features {}x{}",
            sp.height, sp.width, features.height, features.width
        )));
    }
    let f = features.depth;
    let mut sums = vec![0.0f64; sp.count * f];
    let mut counts = vec![0u32; sp.count];
    for idx in 0..sp.ids.len() {
        let id = sp.ids[idx] as usize;
        counts[id] += 1;
        for ch in 0..f {
            sums[id * f + ch] += features.data[idx * f + ch] as f64;
        }
    }
    for id in 0..sp.count {
        for ch in 0..f {
            sums[id * f + ch] /= counts[id] as f64;
        }
    }
    Ok(sums)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansResult {
    pub k: usize,
    pub feature_dim: usize,
    /// Row-major `k x feature_dim`.
    pub centroids: Vec<f64>,
    pub assignment: Vec<u32>,
    /// Sum of squared distances after each assignment pass.
    pub objective_trace: Vec<f64>,
}

#[inline]
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Seeded k-means++ initialization followed by Lloyd iterations.
///
/// Empty clusters re-seed to the point farthest from its assigned centroid,
/// so `k` clusters always survive. Runs until assignments stabilize or
/// `max_iters` passes complete.
pub fn kmeans(
    vectors: &[f64],
    n: usize,
    feature_dim: usize,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<KmeansResult> {
    if feature_dim == 0 || n == 0 {
        return Err(RptError::Invalid("kmeans needs nonempty input".into()));
    }
    if vectors.len() != n * feature_dim {
        return Err(RptError::Length(format!(
            "kmeans data length {} does not match {n}x{feature_dim}",
            vectors.len()
        )));
    }
    if k == 0 || k > n {
        return Err(RptError::Invalid(format!(
            "k must be in 1..=n ({n}), got {k}"
        )));
    }
    let point = |i: usize| &vectors[i * feature_dim..(i + 1) * feature_dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++: first centroid uniform, the rest sampled proportional to the
    // squared distance from the nearest chosen centroid.
    let mut centroids = Vec::with_capacity(k * feature_dim);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(point(first));
    let mut chosen = vec![false; n];
    chosen[first] = true;
    let mut d2: Vec<f64> = (0..n).map(|i| dist2(point(i), point(first))).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let r = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc >= r && w > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // All remaining mass is zero (duplicate points); take the lowest
            // unchosen index.
            (0..n).find(|&i| !chosen[i]).unwrap_or(0)
        };
        chosen[next] = true;
        let c0 = centroids.len();
        centroids.extend_from_slice(point(next));
        let new_c = centroids[c0..].to_vec();
        for i in 0..n {
            let d = dist2(point(i), &new_c);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    let mut assignment = vec![0u32; n];
    let mut trace = Vec::new();
    for _ in 0..max_iters {
        // Assign: strict '<' keeps the lowest cluster index on ties.
        let mut changed = false;
        let mut objective = 0.0;
        let mut best_d = vec![f64::INFINITY; n];
        for i in 0..n {
            let mut best = 0u32;
            let mut bd = f64::INFINITY;
            for c in 0..k {
                let d = dist2(point(i), &centroids[c * feature_dim..(c + 1) * feature_dim]);
                if d < bd {
                    bd = d;
                    best = c as u32;
                }
            }
            if assignment[i] != best {
                changed = true;
            }
            assignment[i] = best;
            best_d[i] = bd;
            objective += bd;
        }
        trace.push(objective);

        // Re-seed empty clusters to the point farthest from its centroid.
        let mut member_count = vec![0u32; k];
        for &a in &assignment {
            member_count[a as usize] += 1;
        }
        for c in 0..k {
            if member_count[c] > 0 {
                continue;
            }
            let mut far = 0usize;
            let mut far_d = -1.0;
            for i in 0..n {
                if member_count[assignment[i] as usize] > 1 && best_d[i] > far_d {
                    far_d = best_d[i];
                    far = i;
                }
            }
            member_count[assignment[far] as usize] -= 1;
            assignment[far] = c as u32;
            member_count[c] = 1;
            best_d[far] = 0.0;
            centroids[c * feature_dim..(c + 1) * feature_dim].copy_from_slice(point(far));
            changed = true;
        }

        // Update centroids to member means, accumulated in point order.
        let mut sums = vec![0.0f64; k * feature_dim];
        for i in 0..n {
            let c = assignment[i] as usize;
            for ch in 0..feature_dim {
                sums[c * feature_dim + ch] += vectors[i * feature_dim + ch];
            }
        }
        for c in 0..k {
            if member_count[c] > 0 {
                for ch in 0..feature_dim {
                    centroids[c * feature_dim + ch] =
                        sums[c * feature_dim + ch] / member_count[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }

    Ok(KmeansResult {
        k,
        feature_dim,
        centroids,
        assignment,
        objective_trace: trace,
    })
}

/// Majority vote of superpixel dominative categories inside each cluster;
/// one vote per superpixel, ties pick the lowest class, clusters whose
/// members are all invalid come back `None`.
pub fn cluster_dominative(
    assignment: &[u32],
    k: usize,
    sp_dominative: &[Option<u8>],
    classes: usize,
) -> Result<Vec<Option<u8>>> {
    if assignment.len() != sp_dominative.len() {
        return Err(RptError::Invalid(format!(
            "assignment length {} does not match dominative length {}",
            assignment.len(),
            sp_dominative.len()
        )));
    }
    let mut votes = vec![0u32; k * classes];
    for (i, &c) in assignment.iter().enumerate() {
        let c = c as usize;
        if c >= k {
            return Err(RptError::Invalid(format!(
                "assignment {c} out of range for k={k}"
            )));
        }
        if let Some(y) = sp_dominative[i] {
            votes[c * classes + y as usize] += 1;
        }
    }
    let mut out = Vec::with_capacity(k);
    for c in 0..k {
        let mut best = None;
        let mut best_votes = 0u32;
        for cls in 0..classes {
            let v = votes[c * classes + cls];
            if v > best_votes {
                best_votes = v;
                best = Some(cls as u8);
            }
        }
        out.push(best);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slic::SuperpixelMap;
    use crate::tensor::ProbMap;

    fn sp_two_rows() -> SuperpixelMap {
        // Top row superpixel 0, bottom row superpixel 1.
        SuperpixelMap::new(2, 3, vec![0, 0, 0, 1, 1, 1]).unwrap()
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_class() {
        let p = ProbMap::new(1, 2, 3, vec![0.4, 0.4, 0.2, 0.2, 0.3, 0.5]).unwrap();
        let l = argmax_labels(&p);
        assert_eq!(l.data, vec![0, 2]);
    }

    #[test]
    fn dominative_votes_match_hand_count() {
        let sp = SuperpixelMap::new(2, 3, vec![0, 0, 0, 0, 0, 0]).unwrap();
        let labels = LabelMap::new(2, 3, vec![0, 0, 1, 2, 2, 2]).unwrap();
        let stats = dominative_categories(&sp, &labels, 3).unwrap();
        assert_eq!(stats.dominative[0], Some(2));
        assert!((stats.dominance_ratio[0] - 0.5).abs() < 1e-12);
        assert_eq!(stats.pixel_count[0], 6);
    }

    #[test]
    fn vote_tie_takes_lowest_class() {
        let sp = SuperpixelMap::new(1, 4, vec![0, 0, 0, 0]).unwrap();
        let labels = LabelMap::new(1, 4, vec![3, 3, 1, 1]).unwrap();
        let stats = dominative_categories(&sp, &labels, 4).unwrap();
        assert_eq!(stats.dominative[0], Some(1));
    }

    #[test]
    fn all_ignore_superpixel_is_invalid() {
        let sp = sp_two_rows();
        let labels = LabelMap::new(2, 3, vec![IGNORE_LABEL; 6]).unwrap();
        let stats = dominative_categories(&sp, &labels, 5).unwrap();
        assert_eq!(stats.dominative, vec![None, None]);
        assert_eq!(stats.dominance_ratio, vec![0.0, 0.0]);
        // And invalid superpixels never enter the retained set.
        let retained = complexity_filter(&stats, 1.0).unwrap();
        assert_eq!(retained.count, 0);
    }

    #[test]
    fn ignore_pixels_are_excluded_from_votes() {
        let sp = SuperpixelMap::new(1, 4, vec![0, 0, 0, 0]).unwrap();
        let labels = LabelMap::new(1, 4, vec![IGNORE_LABEL, IGNORE_LABEL, IGNORE_LABEL, 4]).unwrap();
        let stats = dominative_categories(&sp, &labels, 5).unwrap();
        assert_eq!(stats.dominative[0], Some(4));
        // Ratio divides by the member count, ignore pixels included.
        assert!((stats.dominance_ratio[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn centroids_are_member_means() {
        let sp = sp_two_rows();
        let labels = LabelMap::new(2, 3, vec![0; 6]).unwrap();
        let stats = dominative_categories(&sp, &labels, 5).unwrap();
        assert_eq!(stats.centroid[0], (0.0, 1.0));
        assert_eq!(stats.centroid[1], (1.0, 1.0));
    }

    #[test]
    fn filter_keeps_top_half_with_tie_on_lower_id() {
        // Ratios: [1.0, 0.6, 0.6, 0.2, 0.9]; keep 3 of 5 -> ids 0, 4, 1.
        let stats = SuperpixelStats {
            count: 5,
            pixel_count: vec![10; 5],
            dominative: vec![Some(0); 5],
            dominance_ratio: vec![1.0, 0.6, 0.6, 0.2, 0.9],
            centroid: vec![(0.0, 0.0); 5],
        };
        let r = complexity_filter(&stats, 0.5).unwrap();
        // round(0.5 * 5) = 3 (half rounds away from zero)
        assert_eq!(r.count, 3);
        assert_eq!(r.retained, vec![true, true, false, false, true]);
    }

    #[test]
    fn filter_count_is_exactly_rounded_fraction() {
        for n in 1..40usize {
            let stats = SuperpixelStats {
                count: n,
                pixel_count: vec![1; n],
                dominative: vec![Some(1); n],
                dominance_ratio: (0..n).map(|i| i as f64 / n as f64).collect(),
                centroid: vec![(0.0, 0.0); n],
            };
            for keep in [0.25, 0.5, 0.75, 1.0] {
                let r = complexity_filter(&stats, keep).unwrap();
                assert_eq!(r.count, (keep * n as f64).round() as usize, "n={n} keep={keep}");
            }
        }
    }

    #[test]
    fn pooling_averages_member_features() {
        let sp = sp_two_rows();
        let f = FeatureMap::new(
            2,
            3,
            2,
            vec![1.0, 0.0, 2.0, 0.0, 3.0, 0.0, 4.0, 1.0, 5.0, 1.0, 6.0, 1.0],
        )
        .unwrap();
        let pooled = pool_features(&f, &sp).unwrap();
        assert_eq!(pooled, vec![2.0, 0.0, 5.0, 1.0]);
    }

    #[test]
    fn kmeans_separates_two_obvious_groups() {
        let pts = vec![0.0, 1.0, 10.0, 11.0];
        for seed in 0..20u64 {
            let res = kmeans(&pts, 4, 1, 2, 50, seed).unwrap();
            let mut cents = vec![res.centroids[0], res.centroids[1]];
            cents.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert!((cents[0] - 0.5).abs() < 1e-12, "seed {seed} got {cents:?}");
            assert!((cents[1] - 10.5).abs() < 1e-12);
            assert_eq!(res.assignment[0], res.assignment[1]);
            assert_eq!(res.assignment[2], res.assignment[3]);
            assert_ne!(res.assignment[0], res.assignment[2]);
        }
    }

    #[test]
    fn kmeans_k_equals_n_is_perfect() {
        let pts = vec![0.0, 0.5, 3.0, 9.0, 12.5];
        let res = kmeans(&pts, 5, 1, 5, 20, 3).unwrap();
        assert!(res.objective_trace.last().unwrap() < &1e-18);
        let mut seen = res.assignment.clone();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn kmeans_objective_is_monotone() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for trial in 0..30 {
            let n = rng.gen_range(8..40);
            let f = rng.gen_range(1..5);
            let k = rng.gen_range(1..=n.min(8));
            let pts: Vec<f64> = (0..n * f).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let res = kmeans(&pts, n, f, k, 30, trial as u64).unwrap();
            for w in res.objective_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "trial {trial}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn kmeans_is_stable_at_convergence() {
        let pts = vec![0.0, 1.0, 10.0, 11.0, 5.0, 5.5];
        let a = kmeans(&pts, 6, 1, 3, 100, 7).unwrap();
        let b = kmeans(&pts, 6, 1, 3, 101, 7).unwrap();
        assert_eq!(a.assignment, b.assignment);
        assert_eq!(a.centroids, b.centroids);
    }

    #[test]
    fn kmeans_rejects_k_larger_than_n() {
        assert!(kmeans(&[0.0, 1.0], 2, 1, 3, 10, 0).is_err());
        assert!(kmeans(&[0.0, 1.0], 2, 1, 0, 10, 0).is_err());
    }

    #[test]
    fn kmeans_handles_duplicate_points_with_k_equals_n() {
        let pts = vec![1.0, 1.0, 1.0];
        let res = kmeans(&pts, 3, 1, 3, 10, 2).unwrap();
        assert!(res.objective_trace.last().unwrap() < &1e-18);
    }

    #[test]
    fn cluster_vote_is_unweighted_majority() {
        // Cluster 0: superpixels with categories [1, 1, 0] -> 1.
        // Cluster 1: tie [2, 3] -> 2 (lowest class wins).
        // Cluster 2: only invalid members -> None.
        let assignment = vec![0, 0, 0, 1, 1, 2];
        let doms = vec![Some(1), Some(1), Some(0), Some(2), Some(3), None];
        let out = cluster_dominative(&assignment, 3, &doms, 5).unwrap();
        assert_eq!(out, vec![Some(1), Some(2), None]);
    }
}
