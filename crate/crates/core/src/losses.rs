//! Alignment losses with analytic gradients.

use serde::{Deserialize, Serialize};

use crate::cam::{check_lambda, CommonnessScores, SourceClassWeights};
use crate::error::{Error, Result};
use crate::numeric::{l2_norm, Matrix};

pub const PROB_EPS: f64 = 1e-7;

/// One batch row: a labeled source sample or a scored target sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Member {
    Source { label: usize },
    Target { scores: CommonnessScores },
}

impl Member {
    pub fn is_source(&self) -> bool {
        matches!(self, Member::Source { .. })
    }
}

/// Features of a mixed batch together with the frozen scoring snapshot.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub z: Matrix,
    pub members: Vec<Member>,
    pub class_weights: &'a SourceClassWeights,
}

impl Batch<'_> {
    fn check(&self) -> Result<()> {
        if self.z.rows() != self.members.len() {
            return Err(Error::shape(format!(
                "batch has {} feature rows but {} members",
                self.z.rows(),
                self.members.len()
            )));
        }
        Ok(())
    }

    pub fn num_source(&self) -> usize {
        self.members.iter().filter(|m| m.is_source()).count()
    }

    fn class_weight(&self, label: usize) -> Result<f64> {
        self.class_weights
            .get(label)
            .ok_or_else(|| Error::argument(format!("no source weight for class {label}")))
    }
}

/// Loss value and its gradient with respect to the differentiated input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Matrix,
}

impl LossValue {
    fn zero(rows: usize, cols: usize) -> Self {
        LossValue {
            value: 0.0,
            grad: Matrix::zeros(rows, cols),
        }
    }
}

/// Weighted domain-adversarial objective on discriminator outputs
/// (probability of "target"). Gradient is with respect to the outputs, as a
/// `batch × 1` matrix; clamped entries get zero gradient.
pub fn adversarial_loss(batch: &Batch, d_out: &[f64]) -> Result<LossValue> {
    batch.check()?;
    if d_out.len() != batch.members.len() {
        return Err(Error::shape("discriminator output length differs from batch size"));
    }
    if let Some(d) = d_out.iter().find(|d| !(0.0..=1.0).contains(*d)) {
        return Err(Error::numeric(format!("discriminator output {d} outside [0, 1]")));
    }
    let n_s = batch.num_source();
    let n_t = batch.members.len() - n_s;
    let mut out = LossValue::zero(d_out.len(), 1);
    for (i, (m, &d)) in batch.members.iter().zip(d_out).enumerate() {
        let clamped = d.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let live = clamped == d;
        match m {
            Member::Source { label } => {
                let w = batch.class_weight(*label)? / n_s as f64;
                out.value += w * (1.0 - clamped).ln();
                if live {
                    out.grad[(i, 0)] = -w / (1.0 - d);
                }
            }
            Member::Target { scores } => {
                let w = scores.w_t / n_t as f64;
                out.value += w * clamped.ln();
                if live {
                    out.grad[(i, 0)] = w / d;
                }
            }
        }
    }
    Ok(out)
}

/// Mean softmax cross-entropy over the source rows of `batch`, keeping only
/// samples whose class weight reaches `alpha`. `logits` has one row per
/// source member, in batch order.
pub fn gated_cross_entropy(batch: &Batch, logits: &Matrix, alpha: f64) -> Result<LossValue> {
    let labels: Vec<usize> = batch
        .members
        .iter()
        .filter_map(|m| match m {
            Member::Source { label } => Some(*label),
            Member::Target { .. } => None,
        })
        .collect();
    if logits.rows() != labels.len() {
        return Err(Error::shape(format!(
            "{} logit rows for {} source samples",
            logits.rows(),
            labels.len()
        )));
    }
    let mut out = LossValue::zero(logits.rows(), logits.cols());
    if labels.is_empty() {
        return Ok(out);
    }
    let n = labels.len() as f64;
    for (i, &y) in labels.iter().enumerate() {
        if y >= logits.cols() {
            return Err(Error::argument(format!(
                "label {y} outside the {} classifier classes",
                logits.cols()
            )));
        }
        if batch.class_weight(y)? < alpha {
            continue;
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + denom.ln();
        out.value += (lse - row[y]) / n;
        for (k, v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            out.grad[(i, k)] = (p - if k == y { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok(out)
}

/// Fusion weight shared by the source pair weights and the soft cluster
/// labels: 1 when both views agree on `target`, 0 when neither does, and the
/// agreeing view's share of the fused score otherwise.
pub fn split_agreement(attn_hit: bool, feat_hit: bool, s_attn: f64, s_feat: f64, lambda: f64) -> f64 {
    let fused = lambda * s_attn + (1.0 - lambda) * s_feat;
    match (attn_hit, feat_hit) {
        (true, true) => 1.0,
        (false, false) => 0.0,
        _ if fused <= 0.0 => 0.0,
        (true, false) => lambda * s_attn / fused,
        (false, true) => (1.0 - lambda) * s_feat / fused,
    }
}

/// Weight of the pair (anchor with label `y_i`, candidate `j`).
pub fn pair_weight(y_i: usize, j: &Member, lambda: f64) -> f64 {
    match j {
        Member::Source { label } => f64::from(*label == y_i),
        Member::Target { scores } => split_agreement(
            scores.pseudo_label_attn == y_i,
            scores.pseudo_label_feat == y_i,
            scores.w_attn,
            scores.w_feat,
            lambda,
        ),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveOptions {
    pub tau: f64,
    /// Keep the anchor in its own softmax denominator.
    pub include_anchor: bool,
    /// Use `−w log l` instead of `−w l`.
    pub log_form: bool,
}

impl Default for ContrastiveOptions {
    fn default() -> Self {
        ContrastiveOptions {
            tau: 0.1,
            include_anchor: false,
            log_form: false,
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::argument(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn normalized(v: &[f64]) -> (Vec<f64>, f64) {
    let n = l2_norm(v);
    if n < 1e-12 {
        (vec![0.0; v.len()], n)
    } else {
        (v.iter().map(|x| x / n).collect(), n)
    }
}

fn softmax_in_place(s: &mut [f64]) {
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in s.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    s.iter_mut().for_each(|v| *v /= total);
}

/// Softmax probability of candidate `j` given anchor `z_i`, on unit-normalized
/// vectors with temperature `tau`.
pub fn contrastive_similarity(z_i: &[f64], candidates: &[Vec<f64>], tau: f64, j: usize) -> Result<f64> {
    check_tau(tau)?;
    if j >= candidates.len() {
        return Err(Error::argument(format!(
            "candidate index {j} out of range for {} candidates",
            candidates.len()
        )));
    }
    let (a, _) = normalized(z_i);
    let mut s: Vec<f64> = candidates
        .iter()
        .map(|c| {
            if c.len() != a.len() {
                return Err(Error::shape("candidate dimension differs from anchor"));
            }
            let (c, _) = normalized(c);
            Ok(a.iter().zip(&c).map(|(x, y)| x * y).sum::<f64>() / tau)
        })
        .collect::<Result<_>>()?;
    softmax_in_place(&mut s);
    Ok(s[j])
}

/// Weighted contrastive loss over the rows of `z`: for every anchor `i`,
/// `−Σ_j w(i, j) l(z_i, z_j)` with the softmax taken over all rows (anchor
/// excluded unless configured), averaged over anchors.
pub fn weighted_contrastive<W>(z: &Matrix, anchors: &[usize], weight: W, opts: &ContrastiveOptions) -> Result<LossValue>
where
    W: Fn(usize, usize) -> f64,
{
    check_tau(opts.tau)?;
    let n = z.rows();
    let d = z.cols();
    let mut out = LossValue::zero(n, d);
    if anchors.is_empty() {
        return Ok(out);
    }
    let units: Vec<(Vec<f64>, f64)> = (0..n).map(|i| normalized(z.row(i))).collect();
    let mut d_unit = vec![vec![0.0; d]; n];
    let scale = 1.0 / anchors.len() as f64;
    for &i in anchors {
        let cands: Vec<usize> = (0..n).filter(|&k| opts.include_anchor || k != i).collect();
        if cands.is_empty() {
            continue;
        }
        let w: Vec<f64> = cands.iter().map(|&k| weight(i, k)).collect();
        if w.iter().all(|v| *v == 0.0) {
            continue;
        }
        let ui = &units[i].0;
        let mut l: Vec<f64> = cands
            .iter()
            .map(|&k| ui.iter().zip(&units[k].0).map(|(a, b)| a * b).sum::<f64>() / opts.tau)
            .collect();
        softmax_in_place(&mut l);
        // dL_i / ds_ik for s_ik = u_i·u_k / τ
        let ds: Vec<f64> = if opts.log_form {
            let w_sum: f64 = w.iter().sum();
            out.value -= scale
                * w.iter()
                    .zip(&l)
                    .map(|(wk, lk)| if *wk == 0.0 { 0.0 } else { wk * lk.max(f64::MIN_POSITIVE).ln() })
                    .sum::<f64>();
            w.iter().zip(&l).map(|(wk, lk)| -(wk - lk * w_sum)).collect()
        } else {
            let mean: f64 = w.iter().zip(&l).map(|(a, b)| a * b).sum();
            out.value -= scale * mean;
            w.iter().zip(&l).map(|(wk, lk)| -lk * (wk - mean)).collect()
        };
        for (&k, g) in cands.iter().zip(ds) {
            let g = g * scale / opts.tau;
            if g == 0.0 {
                continue;
            }
            for c in 0..d {
                d_unit[i][c] += g * units[k].0[c];
                d_unit[k][c] += g * ui[c];
            }
        }
    }
    for (r, ((u, norm), du)) in units.iter().zip(&d_unit).enumerate() {
        if *norm < 1e-12 {
            continue;
        }
        let proj: f64 = u.iter().zip(du).map(|(a, b)| a * b).sum();
        for c in 0..d {
            out.grad[(r, c)] = (du[c] - u[c] * proj) / norm;
        }
    }
    Ok(out)
}

/// Contrastive loss anchored on the source rows of `batch`, with candidates
/// drawn from the whole batch and weights from [`pair_weight`].
pub fn source_contrastive_loss(batch: &Batch, lambda: f64, opts: &ContrastiveOptions) -> Result<LossValue> {
    batch.check()?;
    check_lambda(lambda)?;
    let anchors: Vec<usize> = (0..batch.members.len())
        .filter(|&i| batch.members[i].is_source())
        .collect();
    if anchors.is_empty() {
        return Err(Error::argument("source contrastive loss needs a source sample"));
    }
    let weight = |i: usize, k: usize| match batch.members[i] {
        Member::Source { label } => pair_weight(label, &batch.members[k], lambda),
        Member::Target { .. } => 0.0,
    };
    weighted_contrastive(&batch.z, &anchors, weight, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_grad, relative_error, Rng};
    use proptest::prelude::{prop, prop_assert, proptest};

    fn scores(w_attn: f64, w_feat: f64, la: usize, lf: usize, lambda: f64) -> CommonnessScores {
        CommonnessScores {
            w_attn,
            w_feat,
            w_t: lambda * w_attn + (1.0 - lambda) * w_feat,
            pseudo_label_attn: la,
            pseudo_label_feat: lf,
            match_attn: 0.1,
            match_feat: 0.1,
        }
    }

    fn weights(ws: &[f64]) -> SourceClassWeights {
        SourceClassWeights {
            class_ids: (0..ws.len()).collect(),
            weights: ws.to_vec(),
            direction: crate::cam::WeightDirection::Complement,
        }
    }

    fn random_batch(rng: &mut Rng, n: usize, d: usize, classes: usize) -> (Matrix, Vec<Member>) {
        let z = Matrix::from_vec(n, d, rng.normal_vec(n * d, 1.0).into_inner()).unwrap();
        let members = (0..n)
            .map(|i| {
                if i % 2 == 0 {
                    Member::Source {
                        label: rng.below(classes),
                    }
                } else {
                    Member::Target {
                        scores: scores(
                            rng.uniform(),
                            rng.uniform(),
                            rng.below(classes),
                            rng.below(classes),
                            0.3,
                        ),
                    }
                }
            })
            .collect();
        (z, members)
    }

    #[test]
    fn adversarial_examples() {
        let cw = weights(&[1.0]);
        let s = scores(1.0, 1.0, 0, 0, 0.3);
        let batch = Batch {
            z: Matrix::zeros(2, 1),
            members: vec![Member::Source { label: 0 }, Member::Target { scores: s }],
            class_weights: &cw,
        };
        let v = adversarial_loss(&batch, &[0.5, 0.5]).unwrap();
        assert!((v.value - (-1.3863)).abs() < 1e-4);
        let zero = weights(&[0.0]);
        let s0 = scores(0.0, 0.0, 0, 0, 0.3);
        let batch0 = Batch {
            z: Matrix::zeros(2, 1),
            members: vec![Member::Source { label: 0 }, Member::Target { scores: s0 }],
            class_weights: &zero,
        };
        assert_eq!(adversarial_loss(&batch0, &[0.3, 0.9]).unwrap().value, 0.0);
        assert!(matches!(adversarial_loss(&batch, &[1.5, 0.5]), Err(Error::Numeric(_))));
        let edge = adversarial_loss(&batch, &[1.0, 0.0]).unwrap();
        assert!(edge.value.is_finite());
        assert!(edge.grad.as_slice().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn cross_entropy_examples() {
        let cw = weights(&[0.9, 0.5]);
        let batch = Batch {
            z: Matrix::zeros(1, 1),
            members: vec![Member::Source { label: 0 }],
            class_weights: &cw,
        };
        let logits = Matrix::zeros(1, 2);
        let v = gated_cross_entropy(&batch, &logits, 0.85).unwrap();
        assert!((v.value - 2f64.ln()).abs() < 1e-12);
        let gated = Batch {
            members: vec![Member::Source { label: 1 }],
            ..batch.clone()
        };
        let v = gated_cross_entropy(&gated, &logits, 0.85).unwrap();
        assert_eq!(v.value, 0.0);
        assert!(v.grad.as_slice().iter().all(|g| *g == 0.0));
        let bad = Batch {
            members: vec![Member::Source { label: 5 }],
            class_weights: &weights(&[1.0; 6]),
            ..batch.clone()
        };
        assert!(matches!(gated_cross_entropy(&bad, &logits, 0.85), Err(Error::Argument(_))));
    }

    #[test]
    fn pair_weight_examples() {
        let s = scores(0.6, 0.7, 2, 5, 0.3);
        assert!((s.w_t - 0.67).abs() < 1e-12);
        assert!((pair_weight(2, &Member::Target { scores: s }, 0.3) - 0.2687).abs() < 1e-4);
        assert!((pair_weight(5, &Member::Target { scores: s }, 0.3) - 0.49 / 0.67).abs() < 1e-12);
        let both = scores(0.6, 0.7, 2, 2, 0.3);
        assert_eq!(pair_weight(2, &Member::Target { scores: both }, 0.3), 1.0);
        assert_eq!(pair_weight(1, &Member::Target { scores: s }, 0.3), 0.0);
        assert_eq!(pair_weight(1, &Member::Source { label: 1 }, 0.3), 1.0);
        assert_eq!(pair_weight(1, &Member::Source { label: 0 }, 0.3), 0.0);
        let dead = scores(0.0, 0.0, 2, 5, 0.3);
        assert_eq!(pair_weight(2, &Member::Target { scores: dead }, 0.3), 0.0);
    }

    #[test]
    fn similarity_examples() {
        let c = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let p = contrastive_similarity(&[1.0, 0.0], &c, 1.0, 0).unwrap();
        assert!((p - 0.7311).abs() < 1e-4);
        let eq = vec![vec![1.0, 1.0]; 4];
        for j in 0..4 {
            assert!((contrastive_similarity(&[0.0, 1.0], &eq, 0.5, j).unwrap() - 0.25).abs() < 1e-15);
        }
        assert!(matches!(contrastive_similarity(&[1.0, 0.0], &c, 0.0, 0), Err(Error::Argument(_))));
        let mut rng = Rng::new(4);
        for _ in 0..20 {
            let cands: Vec<Vec<f64>> = (0..7).map(|_| rng.normal_vec(5, 1.0).into_inner()).collect();
            let a = rng.normal_vec(5, 1.0);
            let total: f64 = (0..7).map(|j| contrastive_similarity(&a, &cands, 0.1, j).unwrap()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn source_contrastive_examples() {
        let cw = weights(&[1.0, 1.0]);
        let hit = scores(0.5, 0.5, 0, 0, 0.3);
        let miss = scores(0.5, 0.5, 1, 1, 0.3);
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let batch = Batch {
            z,
            members: vec![
                Member::Source { label: 0 },
                Member::Target { scores: hit },
                Member::Target { scores: miss },
            ],
            class_weights: &cw,
        };
        let opts = ContrastiveOptions {
            tau: 1.0,
            ..Default::default()
        };
        let v = source_contrastive_loss(&batch, 0.3, &opts).unwrap();
        assert!((v.value + 0.7311).abs() < 1e-4);

        let none = Batch {
            members: vec![
                Member::Source { label: 0 },
                Member::Target { scores: miss },
                Member::Target { scores: miss },
            ],
            ..batch.clone()
        };
        let v = source_contrastive_loss(&none, 0.3, &opts).unwrap();
        assert_eq!(v.value, 0.0);
        assert!(v.grad.as_slice().iter().all(|g| *g == 0.0));

        let targets_only = Batch {
            members: vec![Member::Target { scores: miss }; 3],
            ..batch.clone()
        };
        assert!(matches!(
            source_contrastive_loss(&targets_only, 0.3, &opts),
            Err(Error::Argument(_))
        ));
    }

    fn check_fd(analytic: &[f64], f: impl Fn(&[f64]) -> f64, x: &[f64]) {
        let numeric = finite_diff_grad(f, x, 1e-6).unwrap();
        let err = relative_error(analytic, &numeric);
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn adversarial_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let cw = weights(&(0..4).map(|_| rng.uniform()).collect::<Vec<_>>());
            let (z, members) = random_batch(&mut rng, 8, 3, 4);
            let batch = Batch { z, members, class_weights: &cw };
            let d: Vec<f64> = (0..8).map(|_| 0.05 + 0.9 * rng.uniform()).collect();
            let v = adversarial_loss(&batch, &d).unwrap();
            check_fd(v.grad.as_slice(), |x| adversarial_loss(&batch, x).unwrap().value, &d);
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = Rng::new(100 + seed);
            let cw = weights(&(0..4).map(|_| rng.uniform()).collect::<Vec<_>>());
            let (z, members) = random_batch(&mut rng, 10, 3, 4);
            let batch = Batch { z, members, class_weights: &cw };
            let logits = Matrix::from_vec(5, 4, rng.normal_vec(20, 2.0).into_inner()).unwrap();
            let v = gated_cross_entropy(&batch, &logits, 0.3).unwrap();
            check_fd(
                v.grad.as_slice(),
                |x| {
                    let l = Matrix::from_vec(5, 4, x.to_vec()).unwrap();
                    gated_cross_entropy(&batch, &l, 0.3).unwrap().value
                },
                logits.as_slice(),
            );
        }
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        for seed in 0..20 {
            for (include_anchor, log_form) in [(false, false), (true, false), (false, true)] {
                let mut rng = Rng::new(200 + seed);
                let cw = weights(&[1.0; 3]);
                let (z, members) = random_batch(&mut rng, 8, 4, 3);
                let batch = Batch { z, members, class_weights: &cw };
                let opts = ContrastiveOptions {
                    tau: 0.5,
                    include_anchor,
                    log_form,
                };
                let v = source_contrastive_loss(&batch, 0.3, &opts).unwrap();
                check_fd(
                    v.grad.as_slice(),
                    |x| {
                        let b = Batch {
                            z: Matrix::from_vec(8, 4, x.to_vec()).unwrap(),
                            ..batch.clone()
                        };
                        source_contrastive_loss(&b, 0.3, &opts).unwrap().value
                    },
                    batch.z.as_slice(),
                );
            }
        }
    }

    #[test]
    fn cross_entropy_nonincreasing_in_true_logit() {
        let cw = weights(&[1.0; 3]);
        let mut rng = Rng::new(9);
        for _ in 0..50 {
            let y = rng.below(3);
            let batch = Batch {
                z: Matrix::zeros(1, 1),
                members: vec![Member::Source { label: y }],
                class_weights: &cw,
            };
            let mut logits = Matrix::from_vec(1, 3, rng.normal_vec(3, 3.0).into_inner()).unwrap();
            let before = gated_cross_entropy(&batch, &logits, 0.5).unwrap().value;
            logits[(0, y)] += 0.1;
            let after = gated_cross_entropy(&batch, &logits, 0.5).unwrap().value;
            assert!(after <= before);
        }
    }

    proptest! {
        #[test]
        fn adversarial_is_nonpositive(
            ws in prop::collection::vec(0.0f64..1.0, 3),
            ds in prop::collection::vec(0.0f64..=1.0, 6),
            wt in prop::collection::vec(0.0f64..1.0, 6),
        ) {
            let cw = weights(&ws);
            let members: Vec<Member> = (0..6)
                .map(|i| if i < 3 { Member::Source { label: i } } else { Member::Target { scores: scores(wt[i], wt[i], 0, 0, 0.3) } })
                .collect();
            let batch = Batch { z: Matrix::zeros(6, 1), members, class_weights: &cw };
            let v = adversarial_loss(&batch, &ds).unwrap();
            prop_assert!(v.value <= 0.0 && v.value.is_finite());
        }

        #[test]
        fn pair_weight_is_in_unit_interval(
            wa in 0.0f64..5.0, wf in 0.0f64..5.0, lambda in 0.0f64..=1.0,
            la in 0usize..3, lf in 0usize..3, y in 0usize..3,
        ) {
            let s = scores(wa, wf, la, lf, lambda);
            let w = pair_weight(y, &Member::Target { scores: s }, lambda);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&w));
        }

        #[test]
        fn contrastive_softmax_sums_to_one(seed in 0u64..1000, include_anchor in proptest::bool::ANY) {
            let mut rng = Rng::new(seed);
            let n = 2 + rng.below(6);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| rng.normal_vec(3, 1.0).into_inner()).collect();
            let anchor = rng.below(n);
            let cands: Vec<Vec<f64>> = rows
                .iter()
                .enumerate()
                .filter(|(k, _)| include_anchor || *k != anchor)
                .map(|(_, r)| r.clone())
                .collect();
            let total: f64 = (0..cands.len())
                .map(|j| contrastive_similarity(&rows[anchor], &cands, 0.1, j).unwrap())
                .sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
