//! Target clustering in the residual metric, cross-view cluster alignment,
//! soft cluster labels and the target compactness loss.

use std::path::Path;

use rayon::prelude::*;

use crate::cam::{check_lambda, csv_error, CamConfig, TargetViewScores};
use crate::data::format_float;
use crate::error::{Error, Result};
use crate::losses::{split_agreement, weighted_contrastive, ContrastiveOptions, LossValue};
use crate::numeric::{Matrix, Rng, Vector};
use crate::sparse::{Dictionary, ResidualVector};

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// One atom per cluster, labeled by cluster id.
    pub centers: Dictionary,
    pub assignments: Vec<usize>,
    pub objective: f64,
    /// Objective after every assignment step.
    pub trace: Vec<f64>,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centers.num_atoms()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_vectors(vectors: &[Vector], k: usize) -> Result<usize> {
    let dim = vectors
        .first()
        .map(|v| v.len())
        .ok_or_else(|| Error::argument("cannot cluster an empty set"))?;
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::shape("vectors to cluster have different dimensions"));
    }
    if k < 2 {
        return Err(Error::argument(format!("need at least 2 clusters, got {k}")));
    }
    if k > vectors.len() {
        return Err(Error::argument(format!(
            "{k} clusters requested for {} vectors",
            vectors.len()
        )));
    }
    Ok(dim)
}

fn center_dictionary(centers: &[Vector]) -> Result<Dictionary> {
    Dictionary::from_atoms(centers, (0..centers.len()).collect())
}

/// Recomputes centers as member means. Empty clusters take the point with
/// the largest `cost` (ties to the lowest index) not already used as a
/// replacement.
fn update_centers(vectors: &[Vector], assignments: &mut [usize], k: usize, cost: &[f64]) -> Vec<Vector> {
    let dim = vectors[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (v, &a) in vectors.iter().zip(assignments.iter()) {
        counts[a] += 1;
        sums[a].iter_mut().zip(v.iter()).for_each(|(s, x)| *s += x);
    }
    let mut taken = vec![false; vectors.len()];
    let mut centers = Vec::with_capacity(k);
    for c in 0..k {
        if counts[c] == 0 {
            let mut best: Option<usize> = None;
            for i in 0..vectors.len() {
                if taken[i] || counts[assignments[i]] <= 1 {
                    continue;
                }
                if best.is_none_or(|b| cost[i] > cost[b]) {
                    best = Some(i);
                }
            }
            if let Some(i) = best {
                taken[i] = true;
                counts[assignments[i]] -= 1;
                assignments[i] = c;
                counts[c] = 1;
                centers.push(vectors[i].clone());
                continue;
            }
            centers.push(Vector::zeros(dim));
        } else {
            let n = counts[c] as f64;
            centers.push(sums[c].iter().map(|s| s / n).collect());
        }
    }
    // Means of reassigned donors are stale; recompute those clusters.
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (v, &a) in vectors.iter().zip(assignments.iter()) {
        counts[a] += 1;
        sums[a].iter_mut().zip(v.iter()).for_each(|(s, x)| *s += x);
    }
    for c in 0..k {
        if counts[c] > 0 {
            let n = counts[c] as f64;
            centers[c] = sums[c].iter().map(|s| s / n).collect();
        }
    }
    centers
}

fn nearest(v: &[f64], centers: &[Vector]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(v, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seed(vectors: &[Vector], k: usize, rng: &mut Rng) -> Vec<Vector> {
    let n = vectors.len();
    let mut chosen = vec![rng.below(n)];
    let mut d2: Vec<f64> = vectors.iter().map(|v| sq_dist(v, &vectors[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if *d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| d2.iter().rposition(|d| *d > 0.0).expect("positive mass"))
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (i, v) in vectors.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(v, &vectors[next]));
        }
    }
    chosen.into_iter().map(|i| vectors[i].clone()).collect()
}

/// Lloyd's algorithm with k-means++ seeding. The objective is the sum of
/// squared Euclidean distances to the assigned centers.
pub fn kmeans(vectors: &[Vector], k: usize, seed: u64, max_iter: usize) -> Result<Clustering> {
    check_vectors(vectors, k)?;
    let mut rng = Rng::new(seed);
    let mut centers = plus_plus_seed(vectors, k, &mut rng);
    let mut assignments = vec![usize::MAX; vectors.len()];
    let mut trace = Vec::new();
    for _ in 0..max_iter.max(1) {
        let nearest: Vec<(usize, f64)> = vectors.iter().map(|v| nearest(v, &centers)).collect();
        let new: Vec<usize> = nearest.iter().map(|n| n.0).collect();
        trace.push(nearest.iter().map(|n| n.1).sum());
        if new == assignments {
            break;
        }
        assignments = new;
        let cost: Vec<f64> = nearest.iter().map(|n| n.1).collect();
        centers = update_centers(vectors, &mut assignments, k, &cost);
    }
    let objective = vectors
        .iter()
        .zip(&assignments)
        .map(|(v, &a)| sq_dist(v, &centers[a]))
        .sum();
    if trace.last().is_none_or(|t| *t != objective) {
        trace.push(objective);
    }
    Ok(Clustering {
        centers: center_dictionary(&centers)?,
        assignments,
        objective,
        trace,
    })
}

/// Class residuals of every vector against `centers`, computed in parallel.
pub fn cluster_residuals(vectors: &[Vector], centers: &Dictionary, cam: &CamConfig) -> Result<Vec<ResidualVector>> {
    let dict = cam.prepare(centers)?;
    vectors.par_iter().map(|v| cam.residuals(v, &dict)).collect()
}

fn argmin(r: &ResidualVector) -> (usize, f64) {
    let mut best = (r.class_ids[0], r.values[0]);
    for (c, v) in r.class_ids.iter().zip(r.values.iter()) {
        if *v < best.1 || (*v == best.1 && *c < best.0) {
            best = (*c, *v);
        }
    }
    best
}

fn residual_assign(vectors: &[Vector], centers: &[Vector], cam: &CamConfig) -> Result<Vec<(usize, f64)>> {
    // A collapsed center cannot be normalized; keep it out of the dictionary.
    let live: Vec<usize> = (0..centers.len())
        .filter(|&c| centers[c].iter().any(|x| *x != 0.0))
        .collect();
    if live.len() < 2 {
        return Err(Error::numeric("fewer than two non-degenerate cluster centers"));
    }
    let cols: Vec<Vector> = live.iter().map(|&c| centers[c].clone()).collect();
    let dict = Dictionary::from_atoms(&cols, live.clone())?;
    Ok(cluster_residuals(vectors, &dict, cam)?.iter().map(argmin).collect())
}

/// Reassigns samples by their minimum class residual against the current
/// centers and recomputes the centers as member means, for up to `rounds`
/// rounds. Stops when assignments no longer change; a round that would
/// raise the residual objective is discarded.
pub fn residual_refine(vectors: &[Vector], clustering: &Clustering, cam: &CamConfig, rounds: usize) -> Result<Clustering> {
    let k = clustering.k();
    check_vectors(vectors, k)?;
    if clustering.assignments.len() != vectors.len() {
        return Err(Error::shape("clustering does not cover the given vectors"));
    }
    let mut centers: Vec<Vector> = (0..k).map(|c| clustering.centers.atom(c)).collect();
    let mut assignments = clustering.assignments.clone();
    let mut objective = f64::INFINITY;
    let mut trace = Vec::new();
    let mut previous: Option<(Vec<Vector>, Vec<usize>)> = None;
    for _ in 0..rounds {
        let assigned = residual_assign(vectors, &centers, cam)?;
        let obj: f64 = assigned.iter().map(|a| a.1).sum();
        let new: Vec<usize> = assigned.iter().map(|a| a.0).collect();
        if obj > objective {
            if let Some((c, a)) = previous.take() {
                centers = c;
                assignments = a;
            }
            break;
        }
        objective = obj;
        trace.push(obj);
        if new == assignments {
            break;
        }
        let cost: Vec<f64> = assigned.iter().map(|a| a.1).collect();
        let mut next = new;
        let next_centers = update_centers(vectors, &mut next, k, &cost);
        previous = Some((std::mem::replace(&mut centers, next_centers), next.clone()));
        assignments = next;
    }
    if !objective.is_finite() {
        objective = residual_assign(vectors, &centers, cam)?.iter().map(|a| a.1).sum();
    }
    Ok(Clustering {
        centers: center_dictionary(&centers)?,
        assignments,
        objective,
        trace,
    })
}

/// Bijection from feature-cluster ids to attention-cluster ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterCorrespondence {
    pub mapping: Vec<usize>,
    /// `overlap[f][a]`: samples in feature cluster `f` and attention cluster `a`.
    pub overlap: Vec<Vec<usize>>,
}

/// Greedy maximum-overlap matching on assignment lists.
pub fn align_assignments(attn: &[usize], feat: &[usize], k: usize) -> Result<ClusterCorrespondence> {
    if attn.len() != feat.len() {
        return Err(Error::shape("clusterings cover different sample counts"));
    }
    if attn.iter().chain(feat).any(|&c| c >= k) {
        return Err(Error::argument(format!("cluster id outside [0, {k})")));
    }
    let mut overlap = vec![vec![0usize; k]; k];
    for (&a, &f) in attn.iter().zip(feat) {
        overlap[f][a] += 1;
    }
    let mut cells: Vec<(usize, usize, usize)> = (0..k)
        .flat_map(|f| (0..k).map(move |a| (f, a)))
        .map(|(f, a)| (overlap[f][a], f, a))
        .collect();
    cells.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut mapping = vec![usize::MAX; k];
    let mut used = vec![false; k];
    for (_, f, a) in cells {
        if mapping[f] == usize::MAX && !used[a] {
            mapping[f] = a;
            used[a] = true;
        }
    }
    Ok(ClusterCorrespondence { mapping, overlap })
}

pub fn align_clusterings(attn: &Clustering, feat: &Clustering) -> Result<ClusterCorrespondence> {
    if attn.k() != feat.k() {
        return Err(Error::argument(format!(
            "cluster counts differ: {} vs {}",
            attn.k(),
            feat.k()
        )));
    }
    align_assignments(&attn.assignments, &feat.assignments, attn.k())
}

/// Soft membership of a sample in attention-cluster `c`.
pub fn soft_cluster_label(c: usize, scores: &TargetViewScores, corr: &ClusterCorrespondence, lambda: f64) -> f64 {
    let mapped = corr.mapping.get(scores.cluster_feat).copied().unwrap_or(usize::MAX);
    split_agreement(scores.cluster_attn == c, mapped == c, scores.o_attn, scores.o_feat, lambda)
}

/// Per-sample soft labels over all `k` clusters.
pub fn soft_labels(
    scores: &[TargetViewScores],
    corr: &ClusterCorrespondence,
    lambda: f64,
) -> Result<Vec<Vec<f64>>> {
    check_lambda(lambda)?;
    let k = corr.mapping.len();
    Ok(scores
        .iter()
        .map(|s| (0..k).map(|c| soft_cluster_label(c, s, corr, lambda)).collect())
        .collect())
}

/// Probability that two samples share a cluster under independent soft labels.
pub fn co_membership(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Contrastive compactness loss over target rows of `z`, weighted by
/// [`co_membership`] of their soft cluster labels.
pub fn target_contrastive_loss(z: &Matrix, soft: &[Vec<f64>], opts: &ContrastiveOptions) -> Result<LossValue> {
    if z.rows() < 2 {
        return Err(Error::argument("target contrastive loss needs at least two samples"));
    }
    if soft.len() != z.rows() {
        return Err(Error::shape("one soft label row is needed per target sample"));
    }
    let anchors: Vec<usize> = (0..z.rows()).collect();
    weighted_contrastive(z, &anchors, |i, j| co_membership(&soft[i], &soft[j]), opts)
}

/// Clustering purity: fraction of samples that belong to the majority
/// ground-truth class of their cluster.
pub fn purity(assignments: &[usize], truth: &[i64]) -> f64 {
    if assignments.is_empty() {
        return 0.0;
    }
    let mut counts: std::collections::BTreeMap<(usize, i64), usize> = Default::default();
    for (&a, &t) in assignments.iter().zip(truth) {
        *counts.entry((a, t)).or_default() += 1;
    }
    let mut best: std::collections::BTreeMap<usize, usize> = Default::default();
    for ((a, _), n) in counts {
        let e = best.entry(a).or_default();
        *e = (*e).max(n);
    }
    best.values().sum::<usize>() as f64 / assignments.len() as f64
}

pub const CLUSTER_REPORT_HEADER: [&str; 6] = ["id", "c_attn", "c_feat", "c_feat_mapped", "o_attn", "o_feat"];

pub fn write_cluster_report(
    path: &Path,
    ids: &[String],
    scores: &[TargetViewScores],
    corr: &ClusterCorrespondence,
) -> Result<()> {
    if ids.len() != scores.len() {
        return Err(Error::shape("one id is needed per scored sample"));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(CLUSTER_REPORT_HEADER).map_err(|e| csv_error(path, e))?;
    for (id, s) in ids.iter().zip(scores) {
        w.write_record([
            id.clone(),
            s.cluster_attn.to_string(),
            s.cluster_feat.to_string(),
            corr.mapping[s.cluster_feat].to_string(),
            format_float(s.o_attn),
            format_float(s.o_feat),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_grad, relative_error};
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    fn v(x: &[f64]) -> Vector {
        Vector::new(x.to_vec())
    }

    fn blobs(rng: &mut Rng, centers: &[Vec<f64>], per: usize, sigma: f64) -> (Vec<Vector>, Vec<i64>) {
        let mut out = Vec::new();
        let mut truth = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per {
                out.push(center.iter().map(|x| x + sigma * rng.normal()).collect());
                truth.push(c as i64);
            }
        }
        (out, truth)
    }

    #[test]
    fn kmeans_four_points() {
        let pts = [v(&[0.0, 0.0]), v(&[0.2, 0.0]), v(&[4.0, 4.0]), v(&[4.2, 4.0])];
        for seed in 0..10 {
            let c = kmeans(&pts, 2, seed, 100).unwrap();
            let mut centers: Vec<Vec<f64>> = (0..2).map(|i| c.centers.atom(i).into_inner()).collect();
            centers.sort_by(|a, b| a[0].total_cmp(&b[0]));
            assert!((centers[0][0] - 0.1).abs() < 1e-12 && centers[0][1].abs() < 1e-12);
            assert!((centers[1][0] - 4.1).abs() < 1e-12 && (centers[1][1] - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kmeans_saturates_at_k_equals_n() {
        let mut rng = Rng::new(3);
        let pts: Vec<Vector> = (0..6).map(|_| rng.normal_vec(3, 1.0)).collect();
        let c = kmeans(&pts, 6, 1, 50).unwrap();
        assert_eq!(c.objective, 0.0);
        let mut a = c.assignments.clone();
        a.sort_unstable();
        assert_eq!(a, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn kmeans_rejects_bad_k() {
        let pts = [v(&[0.0]), v(&[1.0])];
        assert!(matches!(kmeans(&pts, 3, 0, 10), Err(Error::Argument(_))));
        assert!(matches!(kmeans(&pts, 1, 0, 10), Err(Error::Argument(_))));
    }

    #[test]
    fn kmeans_objective_is_monotone() {
        for seed in 0..50 {
            let mut rng = Rng::new(seed);
            let n = 20 + rng.below(40);
            let pts: Vec<Vector> = (0..n).map(|_| rng.normal_vec(3, 1.0)).collect();
            let c = kmeans(&pts, 2 + rng.below(5), seed, 100).unwrap();
            for w in c.trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0), "{:?}", c.trace);
            }
        }
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        let pts = [v(&[0.0]), v(&[0.0]), v(&[0.0]), v(&[10.0])];
        let c = kmeans(&pts, 3, 0, 20).unwrap();
        let mut used = c.assignments.clone();
        used.sort_unstable();
        used.dedup();
        assert!(used.len() >= 2);
        assert!(c.objective.is_finite());
    }

    #[test]
    fn refine_at_fixed_point_keeps_assignments() {
        let pts = [v(&[1.0, 0.0]), v(&[1.0, 0.0]), v(&[0.0, 1.0]), v(&[0.0, 1.0])];
        let c = kmeans(&pts, 2, 0, 10).unwrap();
        let r = residual_refine(&pts, &c, &CamConfig::default(), 5).unwrap();
        assert_eq!(r.assignments, c.assignments);
        assert_eq!(r.trace.len(), 1);
    }

    #[test]
    fn refine_agrees_with_kmeans_on_separated_blobs() {
        let mut rng = Rng::new(8);
        let (pts, _) = blobs(&mut rng, &[vec![3.0, 0.0, 0.0], vec![0.0, 3.0, 0.0]], 30, 0.2);
        let c = kmeans(&pts, 2, 1, 100).unwrap();
        let r = residual_refine(&pts, &c, &CamConfig::default(), 5).unwrap();
        assert_eq!(r.assignments, c.assignments);
        for w in r.trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn early_stop_objective_matches_returned_centers() {
        let cam = CamConfig::default();
        for seed in 0..6 {
            let mut rng = Rng::new(seed);
            let (pts, _) = blobs(&mut rng, &[vec![2.0, 0.0, 0.5], vec![0.0, 2.0, 0.5], vec![0.5, 0.5, 2.0]], 25, 0.8);
            let c = kmeans(&pts, 4, seed, 100).unwrap();
            let r = residual_refine(&pts, &c, &cam, 50).unwrap();
            if r.trace.len() == 50 {
                continue;
            }
            let res = cluster_residuals(&pts, &r.centers, &cam).unwrap();
            let mut total = 0.0;
            for (rv, &a) in res.iter().zip(&r.assignments) {
                let i = rv.class_ids.iter().position(|&c| c == a).unwrap();
                total += rv.values[i];
            }
            assert!((total - r.objective).abs() <= 1e-9 * (1.0 + total.abs()), "seed {seed}: {total} vs {}", r.objective);
        }
    }

    #[test]
    fn greedy_alignment_recovers_permutations() {
        let attn = vec![0, 0, 1, 1, 2, 2, 3];
        let perm = [2, 0, 3, 1];
        let feat: Vec<usize> = attn.iter().map(|&a| perm[a]).collect();
        let corr = align_assignments(&attn, &feat, 4).unwrap();
        for a in 0..4 {
            assert_eq!(corr.mapping[perm[a]], a);
        }
        let id = align_assignments(&attn, &attn, 4).unwrap();
        assert_eq!(id.mapping, vec![0, 1, 2, 3]);
    }

    fn brute_force_best(overlap: &[Vec<usize>]) -> usize {
        fn go(f: usize, used: &mut Vec<bool>, ov: &[Vec<usize>]) -> usize {
            if f == ov.len() {
                return 0;
            }
            let mut best = 0;
            for a in 0..ov.len() {
                if !used[a] {
                    used[a] = true;
                    best = best.max(ov[f][a] + go(f + 1, used, ov));
                    used[a] = false;
                }
            }
            best
        }
        go(0, &mut vec![false; overlap.len()], overlap)
    }

    #[test]
    fn greedy_matches_exhaustive_on_majority_overlap() {
        let mut rng = Rng::new(12);
        for _ in 0..200 {
            let k = 2 + rng.below(3);
            let perm = {
                let mut p: Vec<usize> = (0..k).collect();
                rng.shuffle(&mut p);
                p
            };
            let n = 30 + rng.below(30);
            let attn: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
            let feat: Vec<usize> = attn
                .iter()
                .map(|&a| if rng.uniform() < 0.2 { rng.below(k) } else { perm[a] })
                .collect();
            let corr = align_assignments(&attn, &feat, k).unwrap();
            let greedy: usize = (0..k).map(|f| corr.overlap[f][corr.mapping[f]]).sum();
            assert_eq!(greedy, brute_force_best(&corr.overlap));
        }
    }

    #[test]
    fn alignment_rejects_k_mismatch() {
        let pts: Vec<Vector> = (0..6).map(|i| v(&[i as f64, 1.0])).collect();
        let a = kmeans(&pts, 2, 0, 10).unwrap();
        let b = kmeans(&pts, 3, 0, 10).unwrap();
        assert!(matches!(align_clusterings(&a, &b), Err(Error::Argument(_))));
    }

    fn tv(o_attn: f64, o_feat: f64, ca: usize, cf: usize) -> TargetViewScores {
        TargetViewScores {
            o_attn,
            o_feat,
            cluster_attn: ca,
            cluster_feat: cf,
        }
    }

    #[test]
    fn soft_label_examples() {
        let corr = align_assignments(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(soft_cluster_label(1, &tv(0.6, 0.7, 1, 1), &corr, 0.3), 1.0);
        let only = soft_cluster_label(1, &tv(0.6, 0.7, 1, 2), &corr, 0.3);
        assert!((only - 0.2687).abs() < 1e-4);
        assert_eq!(soft_cluster_label(0, &tv(0.6, 0.7, 1, 2), &corr, 0.3), 0.0);
        let mut rng = Rng::new(5);
        for _ in 0..100 {
            let s = tv(rng.uniform(), rng.uniform(), 0, 1);
            let total = soft_cluster_label(0, &s, &corr, 0.3) + soft_cluster_label(1, &s, &corr, 0.3);
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hard_co_membership() {
        assert_eq!(co_membership(&[1.0, 0.0], &[1.0, 0.0]), 1.0);
        assert_eq!(co_membership(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn target_contrastive_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = Rng::new(300 + seed);
            let n = 6;
            let z = Matrix::from_vec(n, 4, rng.normal_vec(n * 4, 1.0).into_inner()).unwrap();
            let corr = align_assignments(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
            let scores: Vec<TargetViewScores> = (0..n)
                .map(|_| tv(rng.uniform(), rng.uniform(), rng.below(3), rng.below(3)))
                .collect();
            let soft = soft_labels(&scores, &corr, 0.3).unwrap();
            let opts = ContrastiveOptions {
                tau: 0.5,
                ..Default::default()
            };
            let v = target_contrastive_loss(&z, &soft, &opts).unwrap();
            let numeric = finite_diff_grad(
                |x| {
                    let m = Matrix::from_vec(n, 4, x.to_vec()).unwrap();
                    target_contrastive_loss(&m, &soft, &opts).unwrap().value
                },
                z.as_slice(),
                1e-6,
            )
            .unwrap();
            assert!(relative_error(v.grad.as_slice(), &numeric) <= 1e-4);
        }
        let one = Matrix::zeros(1, 2);
        assert!(target_contrastive_loss(&one, &[vec![1.0]], &ContrastiveOptions::default()).is_err());
    }

    #[test]
    fn purity_counts_majorities() {
        assert_eq!(purity(&[0, 0, 1, 1], &[5, 5, 6, 7]), 0.75);
        assert_eq!(purity(&[0, 1, 2, 3], &[1, 1, 2, 2]), 1.0);
    }

    #[test]
    fn cluster_report_roundtrips_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clusters.csv");
        let corr = align_assignments(&[0, 1], &[1, 0], 2).unwrap();
        write_cluster_report(&path, &["t0".into()], &[tv(0.5, 0.25, 0, 1)], &corr).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("id,c_attn,c_feat,c_feat_mapped,o_attn,o_feat\nt0,0,1,0,"));
    }

    proptest! {
        #[test]
        fn alignment_is_a_bijection(
            k in 2usize..6,
            pairs in prop::collection::vec((0usize..6, 0usize..6), 1..60),
        ) {
            let attn: Vec<usize> = pairs.iter().map(|p| p.0 % k).collect();
            let feat: Vec<usize> = pairs.iter().map(|p| p.1 % k).collect();
            let corr = align_assignments(&attn, &feat, k).unwrap();
            let mut m = corr.mapping.clone();
            m.sort_unstable();
            prop_assert_eq!(m, (0..k).collect::<Vec<_>>());
        }

        #[test]
        fn soft_labels_in_unit_interval(
            oa in 0.0f64..3.0, of in 0.0f64..3.0, ca in 0usize..3, cf in 0usize..3, lambda in 0.0f64..=1.0,
        ) {
            let corr = align_assignments(&[0, 1, 2], &[2, 0, 1], 3).unwrap();
            let soft = soft_labels(&[tv(oa, of, ca, cf)], &corr, lambda).unwrap();
            for a in &soft[0] {
                prop_assert!((0.0..=1.0 + 1e-12).contains(a));
            }
            for b in &soft[0] {
                let o = co_membership(&soft[0], &soft[0]);
                prop_assert!((0.0..=1.0 + 1e-12).contains(&o) && *b >= 0.0);
            }
        }
    }
}
