//! Commonness scoring from class residuals: attention and feature
//! commonness degrees, the fused transferability score, per-class source
//! weights, target-dictionary view scores and the common-vs-unknown rule.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::minmax_normalize;
use crate::sparse::{class_residuals, normalize_dictionary, solve_lasso, Dictionary, LassoOptions, ResidualVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CamConfig {
    pub rho: f64,
    /// Unit-normalize dictionary columns and queries before solving.
    pub normalize: bool,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for CamConfig {
    fn default() -> Self {
        CamConfig {
            rho: 0.1,
            normalize: true,
            max_iter: 2000,
            tol: 1e-6,
        }
    }
}

impl CamConfig {
    pub fn lasso_options(&self) -> LassoOptions {
        LassoOptions {
            max_iter: self.max_iter,
            tol: self.tol,
        }
    }

    /// Applies the configured column normalization.
    pub fn prepare(&self, d: &Dictionary) -> Result<Dictionary> {
        if self.normalize {
            normalize_dictionary(d)
        } else {
            Ok(d.clone())
        }
    }

    pub fn prepare_query(&self, query: &[f64]) -> Vec<f64> {
        if !self.normalize {
            return query.to_vec();
        }
        let n = crate::numeric::l2_norm(query);
        if n > 0.0 {
            query.iter().map(|v| v / n).collect()
        } else {
            query.to_vec()
        }
    }

    /// Sparse-codes `query` against a prepared dictionary and returns its
    /// class residuals.
    pub fn residuals(&self, query: &[f64], dict: &Dictionary) -> Result<ResidualVector> {
        let q = self.prepare_query(query);
        let code = solve_lasso(&q, dict, self.rho, &self.lasso_options())?;
        class_residuals(&q, dict, &code)
    }
}

/// How per-class source weights read the normalized residual sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightDirection {
    /// `σ(Σr)` as printed: large for classes the target rarely matches.
    Literal,
    /// `1 − σ(Σr)`: large for classes the target matches well.
    Complement,
}

/// Which side of the threshold counts as common.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionDirection {
    HighIsCommon,
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommonnessScores {
    pub w_attn: f64,
    pub w_feat: f64,
    pub w_t: f64,
    pub pseudo_label_attn: usize,
    pub pseudo_label_feat: usize,
    /// Matched (minimum) residual in each view.
    pub match_attn: f64,
    pub match_feat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceClassWeights {
    pub class_ids: Vec<usize>,
    pub weights: Vec<f64>,
    pub direction: WeightDirection,
}

impl SourceClassWeights {
    /// Uniform weight for every class.
    pub fn uniform(class_ids: Vec<usize>, value: f64) -> Self {
        let weights = vec![value; class_ids.len()];
        SourceClassWeights {
            class_ids,
            weights,
            direction: WeightDirection::Complement,
        }
    }

    pub fn get(&self, class: usize) -> Option<f64> {
        self.class_ids
            .iter()
            .position(|&c| c == class)
            .map(|i| self.weights[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetViewScores {
    pub o_attn: f64,
    pub o_feat: f64,
    pub cluster_attn: usize,
    pub cluster_feat: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Decision {
    Common(usize),
    Unknown,
}

impl std::fmt::Display for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Decision::Common(c) => write!(f, "{c}"),
            Decision::Unknown => f.write_str("unknown"),
        }
    }
}

impl std::str::FromStr for Decision {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "unknown" {
            return Ok(Decision::Unknown);
        }
        s.parse()
            .map(Decision::Common)
            .map_err(|_| format!("invalid decision `{s}`"))
    }
}

/// Mean non-matched residual minus matched residual, with the matched
/// class. Ties resolve to the lowest class id.
pub fn acd(r: &ResidualVector) -> Result<(f64, usize)> {
    if r.len() < 2 {
        return Err(Error::argument(
            "commonness degree needs residuals for at least two classes",
        ));
    }
    let mut order: Vec<usize> = (0..r.len()).collect();
    order.sort_by_key(|&i| r.class_ids[i]);
    let best = order
        .iter()
        .copied()
        .min_by(|&a, &b| r.values[a].total_cmp(&r.values[b]))
        .expect("non-empty");
    let matched = r.values[best];
    let others: f64 = r.values.iter().sum::<f64>() - matched;
    let non_match = others / (r.len() - 1) as f64;
    Ok(((non_match - matched).max(0.0), r.class_ids[best]))
}

/// Same formula as [`acd`], on feature residuals.
pub fn fcd(r: &ResidualVector) -> Result<(f64, usize)> {
    acd(r)
}

pub fn fuse_transferability(w_attn: f64, w_feat: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(lambda * w_attn + (1.0 - lambda) * w_feat)
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::argument(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// Scores for one target sample from its attention and feature residuals
/// against the source dictionaries.
pub fn commonness(attn: &ResidualVector, feat: &ResidualVector, lambda: f64) -> Result<CommonnessScores> {
    let (w_attn, pseudo_label_attn) = acd(attn)?;
    let (w_feat, pseudo_label_feat) = fcd(feat)?;
    let match_of = |r: &ResidualVector, class: usize| {
        r.class_ids
            .iter()
            .position(|&c| c == class)
            .map(|i| r.values[i])
            .unwrap_or(0.0)
    };
    Ok(CommonnessScores {
        w_attn,
        w_feat,
        w_t: fuse_transferability(w_attn, w_feat, lambda)?,
        pseudo_label_attn,
        pseudo_label_feat,
        match_attn: match_of(attn, pseudo_label_attn),
        match_feat: match_of(feat, pseudo_label_feat),
    })
}

fn sum_residuals(rs: &[ResidualVector]) -> Result<(Vec<usize>, Vec<f64>)> {
    let first = rs
        .first()
        .ok_or_else(|| Error::argument("no target residuals to aggregate"))?;
    let mut total = vec![0.0; first.len()];
    for r in rs {
        if r.class_ids != first.class_ids {
            return Err(Error::shape("residual vectors disagree on the class axis"));
        }
        for (t, v) in total.iter_mut().zip(r.values.iter()) {
            *t += v;
        }
    }
    Ok((first.class_ids.clone(), total))
}

/// Per-source-class weights from residuals summed over all target samples,
/// min-max normalized over classes in each view and mixed with `lambda`.
pub fn source_class_weights(
    attn_residuals: &[ResidualVector],
    feat_residuals: &[ResidualVector],
    lambda: f64,
    direction: WeightDirection,
) -> Result<SourceClassWeights> {
    check_lambda(lambda)?;
    let (ids_a, sum_a) = sum_residuals(attn_residuals)?;
    let (ids_f, sum_f) = sum_residuals(feat_residuals)?;
    if ids_a != ids_f {
        return Err(Error::shape("attention and feature residuals use different classes"));
    }
    let sa = minmax_normalize(&sum_a);
    let sf = minmax_normalize(&sum_f);
    let weights = sa
        .iter()
        .zip(sf.iter())
        .map(|(a, f)| match direction {
            WeightDirection::Literal => lambda * a + (1.0 - lambda) * f,
            WeightDirection::Complement => lambda * (1.0 - a) + (1.0 - lambda) * (1.0 - f),
        })
        .collect();
    Ok(SourceClassWeights {
        class_ids: ids_a,
        weights,
        direction,
    })
}

pub fn decide_common(w_t: f64, beta: f64, direction: DecisionDirection) -> bool {
    match direction {
        DecisionDirection::HighIsCommon => w_t >= beta,
        DecisionDirection::Literal => w_t < beta,
    }
}

/// Test-time rule: reject as unknown, or assign the predicted source class.
/// When the two views disagree, the smaller λ-weighted matched residual
/// picks the class.
pub fn predict(scores: &CommonnessScores, beta: f64, direction: DecisionDirection, lambda: f64) -> Decision {
    if !decide_common(scores.w_t, beta, direction) {
        return Decision::Unknown;
    }
    if scores.pseudo_label_attn == scores.pseudo_label_feat {
        return Decision::Common(scores.pseudo_label_attn);
    }
    let attn = lambda * scores.match_attn;
    let feat = (1.0 - lambda) * scores.match_feat;
    if feat < attn {
        Decision::Common(scores.pseudo_label_feat)
    } else {
        Decision::Common(scores.pseudo_label_attn)
    }
}

/// Commonness of a target sample against the target dictionaries.
pub fn target_view_scores(attn_r_tt: &ResidualVector, feat_r_tt: &ResidualVector) -> Result<TargetViewScores> {
    let (o_attn, cluster_attn) = acd(attn_r_tt)?;
    let (o_feat, cluster_feat) = acd(feat_r_tt)?;
    Ok(TargetViewScores {
        o_attn,
        o_feat,
        cluster_attn,
        cluster_feat,
    })
}

/// One line of the score export.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub id: String,
    pub scores: CommonnessScores,
    pub decision: Decision,
}

pub const SCORE_HEADER: [&str; 7] = [
    "id",
    "w_attn",
    "w_feat",
    "w_t",
    "pseudo_label_attn",
    "pseudo_label_feat",
    "decision",
];

pub fn write_scores_csv(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(SCORE_HEADER).map_err(|e| csv_error(path, e))?;
    for row in rows {
        let s = &row.scores;
        w.write_record([
            row.id.clone(),
            crate::data::format_float(s.w_attn),
            crate::data::format_float(s.w_feat),
            crate::data::format_float(s.w_t),
            s.pseudo_label_attn.to_string(),
            s.pseudo_label_feat.to_string(),
            row.decision.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a score export. Matched residuals are not part of the file and
/// come back as zero.
pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().ne(SCORE_HEADER.iter().copied()) {
        return Err(Error::Data {
            path: path.into(),
            line: 1,
            message: format!("expected header {}", SCORE_HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |msg: String| Error::Data {
            path: path.into(),
            line,
            message: msg,
        };
        let float = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|_| bad(format!("column {} is not a number: `{}`", SCORE_HEADER[i], &rec[i])))
        };
        let int = |i: usize| -> Result<usize> {
            rec[i]
                .parse::<usize>()
                .map_err(|_| bad(format!("column {} is not a class id: `{}`", SCORE_HEADER[i], &rec[i])))
        };
        rows.push(ScoreRow {
            id: rec[0].to_string(),
            scores: CommonnessScores {
                w_attn: float(1)?,
                w_feat: float(2)?,
                w_t: float(3)?,
                pseudo_label_attn: int(4)?,
                pseudo_label_feat: int(5)?,
                match_attn: 0.0,
                match_feat: 0.0,
            },
            decision: rec[6].parse().map_err(bad)?,
        });
    }
    if rows.is_empty() {
        return Err(Error::format(path, "score file has no rows"));
    }
    Ok(rows)
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data {
            path: path.into(),
            line,
            message: format!("{other:?}"),
        },
    }
}
