//! Metrics, the entropy baseline, threshold calibration, sweeps and score
//! histograms.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cam::{csv_error, predict, CommonnessScores, Decision, DecisionDirection, ScoreRow};
use crate::data::{format_float, generate, Dataset, ScenarioSpec};
use crate::error::{Error, Result};
use crate::numeric::{Matrix, Rng};
use crate::trainer::{fit, source_scores, TrainConfig, TrainData};

pub fn h_score(acc_common: f64, acc_unknown: f64) -> Result<f64> {
    for v in [acc_common, acc_unknown] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::argument(format!("accuracy {v} outside [0, 1]")));
        }
    }
    let s = acc_common + acc_unknown;
    Ok(if s == 0.0 { 0.0 } else { 2.0 * acc_common * acc_unknown / s })
}

/// Mann-Whitney estimate of P(score(pos) > score(neg)), ties counted half.
/// `None` if either side is empty.
pub fn auroc(positives: &[f64], negatives: &[f64]) -> Option<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|v| (*v, true))
        .chain(negatives.iter().map(|v| (*v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        rank_sum += avg * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let (p, n) = (positives.len() as f64, negatives.len() as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: i64,
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Counts of true class (rows) against decision (columns, `unknown` last).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub rows: Vec<i64>,
    pub cols: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub common_accuracy: f64,
    pub unknown_accuracy: f64,
    pub h_score: f64,
    /// Common-vs-private separation of the supplied scores.
    pub auroc: Option<f64>,
    pub num_common: usize,
    pub num_private: usize,
    pub per_class: Vec<ClassAccuracy>,
    pub confusion: Confusion,
}

/// Scores decisions against hidden ground truth. With no private samples
/// the unknown accuracy is 1 (nothing to reject); likewise for common.
pub fn evaluate(decisions: &[Decision], ground_truth: &[i64], common: &[usize], scores: Option<&[f64]>) -> Result<EvalReport> {
    if decisions.len() != ground_truth.len() || scores.is_some_and(|s| s.len() != decisions.len()) {
        return Err(Error::argument("decisions, ground truth and scores must align"));
    }
    let common: BTreeSet<i64> = common.iter().map(|&c| c as i64).collect();
    let is_common = |t: i64| common.contains(&t);
    let classes: Vec<i64> = ground_truth.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mut predicted: BTreeSet<usize> = BTreeSet::new();
    for d in decisions {
        if let Decision::Common(c) = d {
            predicted.insert(*c);
        }
    }
    let pred_cols: Vec<usize> = predicted.into_iter().collect();
    let mut counts = vec![vec![0usize; pred_cols.len() + 1]; classes.len()];
    let mut per_class: Vec<ClassAccuracy> = classes
        .iter()
        .map(|&c| ClassAccuracy {
            class: c,
            count: 0,
            correct: 0,
            accuracy: 0.0,
        })
        .collect();
    let (mut n_common, mut ok_common, mut n_private, mut ok_private) = (0, 0, 0, 0);
    for (d, &t) in decisions.iter().zip(ground_truth) {
        let row = classes.binary_search(&t).expect("collected above");
        let col = match d {
            Decision::Common(c) => pred_cols.binary_search(c).expect("collected above"),
            Decision::Unknown => pred_cols.len(),
        };
        counts[row][col] += 1;
        let correct = if is_common(t) {
            n_common += 1;
            *d == Decision::Common(t as usize)
        } else {
            n_private += 1;
            *d == Decision::Unknown
        };
        if is_common(t) {
            ok_common += usize::from(correct);
        } else {
            ok_private += usize::from(correct);
        }
        per_class[row].count += 1;
        per_class[row].correct += usize::from(correct);
    }
    for pc in &mut per_class {
        pc.accuracy = pc.correct as f64 / pc.count as f64;
    }
    let rate = |ok: usize, n: usize| if n == 0 { 1.0 } else { ok as f64 / n as f64 };
    let common_accuracy = rate(ok_common, n_common);
    let unknown_accuracy = rate(ok_private, n_private);
    let auroc = scores.and_then(|s| {
        let (pos, neg): (Vec<(f64, i64)>, Vec<(f64, i64)>) =
            s.iter().copied().zip(ground_truth.iter().copied()).partition(|(_, t)| is_common(*t));
        auroc(
            &pos.iter().map(|p| p.0).collect::<Vec<_>>(),
            &neg.iter().map(|p| p.0).collect::<Vec<_>>(),
        )
    });
    let mut cols: Vec<String> = pred_cols.iter().map(|c| c.to_string()).collect();
    cols.push("unknown".into());
    Ok(EvalReport {
        common_accuracy,
        unknown_accuracy,
        h_score: h_score(common_accuracy, unknown_accuracy)?,
        auroc,
        num_common: n_common,
        num_private: n_private,
        per_class,
        confusion: Confusion {
            rows: classes,
            cols,
            counts,
        },
    })
}

/// Softmax entropy (natural log) of one logit row.
pub fn entropy(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    let lz = z.ln();
    -logits
        .iter()
        .map(|v| {
            let lp = v - max - lz;
            lp.exp() * lp
        })
        .sum::<f64>()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Unknown when entropy exceeds `threshold`, otherwise the arg-max class.
pub fn entropy_baseline(logits: &Matrix, threshold: f64) -> Vec<Decision> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            if entropy(row) > threshold {
                Decision::Unknown
            } else {
                Decision::Common(argmax(row))
            }
        })
        .collect()
}

/// Threshold candidates: midpoints of consecutive distinct values plus one
/// point beyond each end.
fn cut_points(values: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    if v.is_empty() {
        return vec![0.0];
    }
    let mut cuts = vec![v[0] - 1.0];
    cuts.extend(v.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    cuts.push(v[v.len() - 1] + 1.0);
    cuts
}

/// Maximizes `score(cut)` over cut points; among ties picks the middle one.
fn best_cut(cuts: &[f64], score: impl Fn(f64) -> Result<f64> + Sync) -> Result<(f64, f64)> {
    let vals: Vec<f64> = cuts.par_iter().map(|c| score(*c)).collect::<Result<_>>()?;
    let best = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<usize> = (0..cuts.len()).filter(|&i| vals[i] == best).collect();
    Ok((cuts[tied[tied.len() / 2]], best))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub threshold: f64,
    pub report: EvalReport,
}

/// Entropy baseline at the threshold that maximizes its H-score on the
/// given samples.
pub fn entropy_baseline_best(logits: &Matrix, ground_truth: &[i64], common: &[usize]) -> Result<BaselineResult> {
    let ent: Vec<f64> = (0..logits.rows()).map(|r| entropy(logits.row(r))).collect();
    let neg: Vec<f64> = ent.iter().map(|e| -e).collect();
    let (threshold, _) = best_cut(&cut_points(&ent), |t| {
        Ok(evaluate(&entropy_baseline(logits, t), ground_truth, common, None)?.h_score)
    })?;
    Ok(BaselineResult {
        threshold,
        report: evaluate(&entropy_baseline(logits, threshold), ground_truth, common, Some(&neg))?,
    })
}

pub fn decisions(scores: &[CommonnessScores], beta: f64, direction: DecisionDirection, lambda: f64) -> Vec<Decision> {
    scores.iter().map(|s| predict(s, beta, direction, lambda)).collect()
}

/// Threshold on `w_t` maximizing the H-score of labeled validation samples.
pub fn calibrate_beta(
    scores: &[CommonnessScores],
    ground_truth: &[i64],
    common: &[usize],
    direction: DecisionDirection,
    lambda: f64,
) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::argument("cannot calibrate a threshold on no samples"));
    }
    let w: Vec<f64> = scores.iter().map(|s| s.w_t).collect();
    Ok(best_cut(&cut_points(&w), |b| {
        Ok(evaluate(&decisions(scores, b, direction, lambda), ground_truth, common, None)?.h_score)
    })?
    .0)
}

/// Seeded split of `0..n` into sorted validation and test index lists.
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut idx);
    let n_val = ((n as f64) * fraction).round() as usize;
    let mut val = idx[..n_val.min(n)].to_vec();
    let mut test = idx[n_val.min(n)..].to_vec();
    val.sort_unstable();
    test.sort_unstable();
    (val, test)
}

fn pick<T: Clone>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i].clone()).collect()
}

/// Result of train → score → calibrate → evaluate on one dataset.
#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub fit: crate::trainer::FitOutput,
    pub scores: Vec<CommonnessScores>,
    pub target_logits: Matrix,
    pub ground_truth: Vec<i64>,
    pub beta: f64,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    /// Method on the test split.
    pub report: EvalReport,
    /// Entropy baseline on the test split at its best threshold.
    pub baseline: BaselineResult,
}

pub const VALIDATION_FRACTION: f64 = 0.3;

pub fn run_pipeline(dataset: &Dataset, cfg: &TrainConfig) -> Result<PipelineResult> {
    let data = TrainData::from_dataset(dataset)?;
    let (_, target) = crate::data::split_for_protocol(dataset)?;
    let truth = target.reveal_ground_truth().to_vec();
    let common = dataset.manifest.common_classes.clone();
    let fit_out = fit(&data, cfg, None, false)?;
    let (scores, _, _) = source_scores(&fit_out.model, &data, cfg)?;
    let scores = scores.commonness;
    let logits = fit_out.model.forward(&data.target_x)?.logits;
    let (val, test) = validation_split(truth.len(), VALIDATION_FRACTION, crate::numeric::derive_seed(cfg.seed, 3));
    let beta = calibrate_beta(&pick(&scores, &val), &pick(&truth, &val), &common, cfg.decision_direction, cfg.lambda)?;
    let test_scores = pick(&scores, &test);
    let test_truth = pick(&truth, &test);
    let w_t: Vec<f64> = test_scores.iter().map(|s| s.w_t).collect();
    let report = evaluate(
        &decisions(&test_scores, beta, cfg.decision_direction, cfg.lambda),
        &test_truth,
        &common,
        Some(&w_t),
    )?;
    let mut test_logits = Matrix::zeros(test.len(), logits.cols());
    for (r, &i) in test.iter().enumerate() {
        test_logits.row_mut(r).copy_from_slice(logits.row(i));
    }
    let baseline = entropy_baseline_best(&test_logits, &test_truth, &common)?;
    Ok(PipelineResult {
        fit: fit_out,
        scores,
        target_logits: logits,
        ground_truth: truth,
        beta,
        validation: val,
        test,
        report,
        baseline,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Beta,
    Alpha,
    NTargetPrivate,
    NCommon,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Beta => "beta",
            SweepAxis::Alpha => "alpha",
            SweepAxis::NTargetPrivate => "n_target_private",
            SweepAxis::NCommon => "n_common",
        }
    }

    pub fn is_threshold(&self) -> bool {
        matches!(self, SweepAxis::Beta)
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "beta" => Ok(SweepAxis::Beta),
            "alpha" => Ok(SweepAxis::Alpha),
            "n_target_private" => Ok(SweepAxis::NTargetPrivate),
            "n_common" => Ok(SweepAxis::NCommon),
            other => Err(format!("unknown sweep axis `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub h_score: f64,
    pub common_accuracy: f64,
    pub unknown_accuracy: f64,
    pub auroc: Option<f64>,
    /// Entropy-baseline H-score on the same samples, for retraining axes.
    pub baseline_h_score: Option<f64>,
}

/// Evaluates fixed scores at every threshold in `grid`.
pub fn beta_sweep(
    scores: &[CommonnessScores],
    ground_truth: &[i64],
    common: &[usize],
    direction: DecisionDirection,
    lambda: f64,
    grid: &[f64],
) -> Result<Vec<SweepPoint>> {
    let w: Vec<f64> = scores.iter().map(|s| s.w_t).collect();
    grid.iter()
        .map(|&b| {
            let r = evaluate(&decisions(scores, b, direction, lambda), ground_truth, common, Some(&w))?;
            Ok(SweepPoint {
                value: b,
                h_score: r.h_score,
                common_accuracy: r.common_accuracy,
                unknown_accuracy: r.unknown_accuracy,
                auroc: r.auroc,
                baseline_h_score: None,
            })
        })
        .collect()
}

fn apply_axis(axis: SweepAxis, value: f64, spec: &mut ScenarioSpec, cfg: &mut TrainConfig) -> Result<()> {
    let count = || {
        if value < 0.0 || value.fract() != 0.0 {
            Err(Error::argument(format!("{} must be a non-negative integer, got {value}", axis.name())))
        } else {
            Ok(value as usize)
        }
    };
    match axis {
        SweepAxis::Beta => cfg.beta = value,
        SweepAxis::Alpha => cfg.alpha = value,
        SweepAxis::NTargetPrivate => spec.n_target_private = count()?,
        SweepAxis::NCommon => spec.n_common = count()?,
    }
    Ok(())
}

/// One full generate → train → calibrate → evaluate run per grid value,
/// in parallel; results follow grid order.
pub fn scenario_sweep(axis: SweepAxis, grid: &[f64], spec: &ScenarioSpec, cfg: &TrainConfig) -> Result<Vec<SweepPoint>> {
    if axis.is_threshold() {
        return Err(Error::argument("threshold axes reuse a trained model; use beta_sweep"));
    }
    grid.par_iter()
        .map(|&value| {
            let mut spec = spec.clone();
            let mut cfg = cfg.clone();
            apply_axis(axis, value, &mut spec, &mut cfg)?;
            let out = run_pipeline(&generate(&spec)?, &cfg)?;
            Ok(SweepPoint {
                value,
                h_score: out.report.h_score,
                common_accuracy: out.report.common_accuracy,
                unknown_accuracy: out.report.unknown_accuracy,
                auroc: out.report.auroc,
                baseline_h_score: Some(out.baseline.report.h_score),
            })
        })
        .collect()
}

pub fn write_sweep_csv(path: &Path, axis: SweepAxis, points: &[SweepPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record([axis.name(), "h_score", "common_acc", "unknown_acc"])
        .map_err(|e| csv_error(path, e))?;
    for p in points {
        w.write_record([
            format_float(p.value),
            format_float(p.h_score),
            format_float(p.common_accuracy),
            format_float(p.unknown_accuracy),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `lo, lo+step, …` up to `hi` inclusive; the count is rounded so that
/// floating-point steps land on `hi`.
pub fn inclusive_range(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !lo.is_finite() || !hi.is_finite() || hi < lo {
        return Err(Error::argument(format!("invalid range {lo}:{hi}:{step}")));
    }
    let n = ((hi - lo) / step).round() as usize + 1;
    Ok((0..n).map(|i| lo + step * i as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub score: String,
    pub bin_center: f64,
    pub count_common: usize,
    pub count_private: usize,
}

/// Fixed-width bins over the observed range of each score column; the
/// maximum falls in the last bin.
pub fn histogram(rows: &[ScoreRow], is_common: &dyn Fn(&str) -> Option<bool>, bins: usize) -> Result<Vec<HistogramRow>> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("no scores to bin".into()));
    }
    if bins == 0 {
        return Err(Error::argument("bins must be positive"));
    }
    let labels: Vec<bool> = rows
        .iter()
        .map(|r| is_common(&r.id).ok_or_else(|| Error::argument(format!("no ground truth for {}", r.id))))
        .collect::<Result<_>>()?;
    let columns: [(&str, fn(&CommonnessScores) -> f64); 3] =
        [("w_attn", |s| s.w_attn), ("w_feat", |s| s.w_feat), ("w_t", |s| s.w_t)];
    let mut out = Vec::new();
    for (name, get) in columns {
        let vals: Vec<f64> = rows.iter().map(|r| get(&r.scores)).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = (hi - lo) / bins as f64;
        let mut common = vec![0usize; bins];
        let mut private = vec![0usize; bins];
        for (v, &c) in vals.iter().zip(&labels) {
            let b = if width > 0.0 {
                (((v - lo) / width) as usize).min(bins - 1)
            } else {
                0
            };
            if c {
                common[b] += 1;
            } else {
                private[b] += 1;
            }
        }
        for b in 0..bins {
            out.push(HistogramRow {
                score: name.to_string(),
                bin_center: lo + width * (b as f64 + 0.5),
                count_common: common[b],
                count_private: private[b],
            });
        }
    }
    Ok(out)
}

pub fn write_histogram_csv(path: &Path, rows: &[HistogramRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["score", "bin_center", "count_common", "count_private"])
        .map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record([
            r.score.clone(),
            format_float(r.bin_center),
            r.count_common.to_string(),
            r.count_private.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
