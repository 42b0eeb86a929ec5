//! Training loop: per-epoch score snapshots, composed saddle-point updates,
//! checkpoints and resume.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::compute_prototypes;
use crate::cam::{
    commonness, source_class_weights, target_view_scores, CamConfig, CommonnessScores, DecisionDirection,
    SourceClassWeights, TargetViewScores, WeightDirection,
};
use crate::data::{format_float, Dataset, SourceView, TargetView};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_loss, gated_cross_entropy, source_contrastive_loss, Batch, ContrastiveOptions, Member,
};
use crate::model::layers::add_into;
use crate::model::{gradient_reversal, lr_at, sgd_step, BnStats, Model, ModelConfig, ModelParams, OptimizerConfig, OptimizerState};
use crate::numeric::{derive_seed, Matrix, Rng, Vector};
use crate::separation::{
    align_clusterings, cluster_residuals, kmeans, residual_refine, soft_labels, target_contrastive_loss,
    ClusterCorrespondence, Clustering,
};
use crate::sparse::{Dictionary, ResidualVector};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub eta1: f64,
    pub eta2: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    /// Target clusters; `None` uses the number of target classes plus two.
    pub k: Option<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_direction: WeightDirection,
    pub decision_direction: DecisionDirection,
    pub refresh_period: usize,
    pub refine_rounds: usize,
    pub kmeans_iters: usize,
    /// Gradient-reversal scale.
    pub mu: f64,
    pub include_anchor: bool,
    pub log_contrastive: bool,
    pub cam: CamConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta1: 0.5,
            eta2: 0.5,
            lambda: 0.3,
            alpha: 0.85,
            beta: 0.5,
            tau: 0.1,
            k: None,
            batch_size: 36,
            epochs: 20,
            seed: 0,
            weight_direction: WeightDirection::Complement,
            decision_direction: DecisionDirection::HighIsCommon,
            refresh_period: 1,
            refine_rounds: 5,
            kmeans_iters: 100,
            mu: 1.0,
            include_anchor: false,
            log_contrastive: false,
            cam: CamConfig::default(),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::argument(m));
        if !(self.eta1 >= 0.0 && self.eta2 >= 0.0) {
            return bad("eta1 and eta2 must be non-negative".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.refresh_period == 0 {
            return bad("refresh_period must be at least 1".into());
        }
        if !(self.cam.rho >= 0.0) {
            return bad(format!("rho must be non-negative, got {}", self.cam.rho));
        }
        if self.k.is_some_and(|k| k < 2) {
            return bad("k must be at least 2".into());
        }
        Ok(())
    }

    pub fn contrastive(&self) -> ContrastiveOptions {
        ContrastiveOptions {
            tau: self.tau,
            include_anchor: self.include_anchor,
            log_form: self.log_contrastive,
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Model inputs and fixed attention vectors, with target labels withheld.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub source_x: Matrix,
    pub source_labels: Vec<usize>,
    pub source_attn: Vec<Vector>,
    pub target_ids: Vec<String>,
    pub target_x: Matrix,
    pub target_attn: Vec<Vector>,
    pub num_classes: usize,
    pub default_k: usize,
}

fn rows(samples: &[crate::data::Sample]) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.feat.as_slice().to_vec()).collect();
    Matrix::from_rows(&rows)
}

impl TrainData {
    pub fn from_views(source: &SourceView, target: &TargetView, num_classes: usize, default_k: usize) -> Result<Self> {
        let source_labels = source
            .samples
            .iter()
            .map(|s| {
                s.source_label()
                    .filter(|&l| l < num_classes)
                    .ok_or_else(|| Error::argument(format!("source sample {} has label {}", s.id, s.label)))
            })
            .collect::<Result<_>>()?;
        Ok(TrainData {
            source_x: rows(&source.samples)?,
            source_labels,
            source_attn: source.samples.iter().map(|s| s.attn.clone()).collect(),
            target_ids: target.samples.iter().map(|s| s.id.clone()).collect(),
            target_x: rows(&target.samples)?,
            target_attn: target.samples.iter().map(|s| s.attn.clone()).collect(),
            num_classes,
            default_k,
        })
    }

    pub fn from_dataset(dataset: &Dataset) -> Result<Self> {
        let (source, target) = crate::data::split_for_protocol(dataset)?;
        let m = &dataset.manifest;
        Self::from_views(&source, &target, m.num_source_classes(), m.target_classes().len() + 2)
    }

    pub fn input_dim(&self) -> usize {
        self.source_x.cols()
    }

    pub fn k(&self, cfg: &TrainConfig) -> usize {
        cfg.k.unwrap_or(self.default_k).clamp(2, self.target_x.rows().max(2))
    }
}

/// Source-dictionary scores for every target sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceScores {
    pub source_attn_dict: Dictionary,
    pub source_feat_dict: Dictionary,
    pub attn_residuals: Vec<ResidualVector>,
    pub feat_residuals: Vec<ResidualVector>,
    pub commonness: Vec<CommonnessScores>,
    pub class_weights: SourceClassWeights,
}

/// Everything held constant while an epoch trains.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSnapshot {
    pub scores: SourceScores,
    pub target_attn_clusters: Clustering,
    pub target_feat_clusters: Clustering,
    pub correspondence: ClusterCorrespondence,
    pub target_views: Vec<TargetViewScores>,
    pub soft_labels: Vec<Vec<f64>>,
}

fn attention_of(model: &Model, x: &Matrix, stored: &[Vector]) -> Result<(Matrix, Vec<Vector>)> {
    let out = model.forward(x)?;
    let attn = out.attn.unwrap_or_else(|| stored.to_vec());
    Ok((out.z, attn))
}

fn matrix_rows(m: &Matrix) -> Vec<Vector> {
    (0..m.rows()).map(|r| Vector::new(m.row(r).to_vec())).collect()
}

/// Scores target samples against the class prototypes of the current
/// source features and attention vectors.
pub fn source_scores(model: &Model, data: &TrainData, cfg: &TrainConfig) -> Result<(SourceScores, Vec<Vector>, Vec<Vector>)> {
    let (zs, attn_s) = attention_of(model, &data.source_x, &data.source_attn)?;
    let (zt, attn_t) = attention_of(model, &data.target_x, &data.target_attn)?;
    let zs = matrix_rows(&zs);
    let zt = matrix_rows(&zt);
    let p_s = cfg.cam.prepare(&compute_prototypes(&attn_s, &data.source_labels)?)?;
    let q_s = cfg.cam.prepare(&compute_prototypes(&zs, &data.source_labels)?)?;
    let solved: Vec<(ResidualVector, ResidualVector)> = attn_t
        .par_iter()
        .zip(zt.par_iter())
        .map(|(a, z)| Ok((cfg.cam.residuals(a, &p_s)?, cfg.cam.residuals(z, &q_s)?)))
        .collect::<Result<_>>()?;
    let (attn_residuals, feat_residuals): (Vec<_>, Vec<_>) = solved.into_iter().unzip();
    let commonness = attn_residuals
        .iter()
        .zip(&feat_residuals)
        .map(|(a, f)| commonness(a, f, cfg.lambda))
        .collect::<Result<Vec<_>>>()?;
    let class_weights = source_class_weights(&attn_residuals, &feat_residuals, cfg.lambda, cfg.weight_direction)?;
    Ok((
        SourceScores {
            source_attn_dict: p_s,
            source_feat_dict: q_s,
            attn_residuals,
            feat_residuals,
            commonness,
            class_weights,
        },
        attn_t,
        zt,
    ))
}

fn cluster_view(vectors: &[Vector], k: usize, seed: u64, cfg: &TrainConfig) -> Result<(Clustering, Vec<ResidualVector>)> {
    let unit: Vec<Vector> = vectors.iter().map(|v| Vector::new(cfg.cam.prepare_query(v))).collect();
    let init = kmeans(&unit, k, seed, cfg.kmeans_iters)?;
    let refined = residual_refine(&unit, &init, &cfg.cam, cfg.refine_rounds)?;
    let residuals = cluster_residuals(&unit, &refined.centers, &cfg.cam)?;
    Ok((refined, residuals))
}

/// Recomputes dictionaries, scores, target clusters and soft labels from
/// the current model. `round` only varies the clustering seeds.
pub fn refresh_snapshot(model: &Model, data: &TrainData, cfg: &TrainConfig, round: u64) -> Result<EpochSnapshot> {
    let (scores, attn_t, zt) = source_scores(model, data, cfg)?;
    let k = data.k(cfg);
    let base = derive_seed(cfg.seed, 2_000_000 + round);
    let (attn_c, attn_r) = cluster_view(&attn_t, k, derive_seed(base, 0), cfg)?;
    let (feat_c, feat_r) = cluster_view(&zt, k, derive_seed(base, 1), cfg)?;
    let correspondence = align_clusterings(&attn_c, &feat_c)?;
    let target_views = attn_r
        .iter()
        .zip(&feat_r)
        .map(|(a, f)| target_view_scores(a, f))
        .collect::<Result<Vec<_>>>()?;
    let soft_labels = soft_labels(&target_views, &correspondence, cfg.lambda)?;
    Ok(EpochSnapshot {
        scores,
        target_attn_clusters: attn_c,
        target_feat_clusters: feat_c,
        correspondence,
        target_views,
        soft_labels,
    })
}

/// Loss terms of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub adv: f64,
    pub src: f64,
    pub tgt: f64,
}

impl LossBreakdown {
    /// Objective minimized by the feature extractor and classifier.
    pub fn feature_player(&self, cfg: &TrainConfig) -> f64 {
        self.cls + cfg.eta1 * self.src + cfg.eta2 * self.tgt - cfg.mu * self.adv
    }

    /// Objective minimized by the discriminator.
    pub fn discriminator_player(&self) -> f64 {
        self.adv
    }

    fn check(&self) -> Result<()> {
        for (name, v) in [("L_cls", self.cls), ("L_adv", self.adv), ("L_src", self.src), ("L_tgt", self.tgt)] {
            if !v.is_finite() {
                return Err(Error::numeric(format!("{name} is not finite ({v})")));
            }
        }
        Ok(())
    }
}

/// Rows of one training batch.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub x: Matrix,
    pub members: Vec<Member>,
    /// Soft cluster labels of the target rows, in order.
    pub soft: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub losses: LossBreakdown,
    pub grads: ModelParams,
    pub bn_batch: Option<BnStats>,
}

fn select_rows(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(idx.len(), m.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(m.row(i));
    }
    out
}

fn scatter_rows(acc: &mut Matrix, idx: &[usize], part: &Matrix, scale: f64) {
    for (r, &i) in idx.iter().enumerate() {
        acc.row_mut(i)
            .iter_mut()
            .zip(part.row(r))
            .for_each(|(a, p)| *a += scale * p);
    }
}

/// Forward and backward pass of the composed objective on one batch.
/// Extractor and classifier gradients descend the feature player's
/// objective; discriminator gradients descend `L_adv`.
pub fn composed_step(model: &Model, batch: &StepBatch, weights: &SourceClassWeights, cfg: &TrainConfig) -> Result<StepOutput> {
    let ex = model.extract(&batch.x)?;
    let z = &ex.z;
    let mut grads = model.params.zeros_like();
    let mut dz = Matrix::zeros(z.rows(), z.cols());
    let mut losses = LossBreakdown::default();
    let lb = Batch {
        z: z.clone(),
        members: batch.members.clone(),
        class_weights: weights,
    };
    let src: Vec<usize> = (0..batch.members.len()).filter(|&i| batch.members[i].is_source()).collect();
    let tgt: Vec<usize> = (0..batch.members.len()).filter(|&i| !batch.members[i].is_source()).collect();
    if tgt.len() != batch.soft.len() {
        return Err(Error::shape("one soft label row is needed per target row"));
    }

    let mut bn_batch = None;
    if !src.is_empty() {
        let (logits, cache, stats) = model.classify_train(&select_rows(z, &src))?;
        let ce = gated_cross_entropy(&lb, &logits, cfg.alpha)?;
        losses.cls = ce.value;
        let dz_src = model.classifier_backward(&cache, &ce.grad, &mut grads)?;
        scatter_rows(&mut dz, &src, &dz_src, 1.0);
        bn_batch = Some(stats);

        if cfg.eta1 > 0.0 {
            let l = source_contrastive_loss(&lb, cfg.lambda, &cfg.contrastive())?;
            losses.src = l.value;
            scatter_rows(&mut dz, &(0..z.rows()).collect::<Vec<_>>(), &l.grad, cfg.eta1);
        }
    }
    if cfg.eta2 > 0.0 && tgt.len() >= 2 {
        let l = target_contrastive_loss(&select_rows(z, &tgt), &batch.soft, &cfg.contrastive())?;
        losses.tgt = l.value;
        scatter_rows(&mut dz, &tgt, &l.grad, cfg.eta2);
    }

    let (probs, disc_cache) = model.discriminate(z)?;
    let adv = adversarial_loss(&lb, &probs)?;
    losses.adv = adv.value;
    let dz_adv = model.discriminator_backward(&disc_cache, adv.grad.as_slice(), &mut grads)?;
    let reversed = Matrix::from_vec(dz_adv.rows(), dz_adv.cols(), gradient_reversal(dz_adv.as_slice(), cfg.mu).into_inner())?;
    add_into(&mut dz, &reversed);

    losses.check()?;
    model.extractor_backward(&ex.cache, &dz, &mut grads)?;
    if !grads.is_finite() {
        return Err(Error::numeric("non-finite parameter gradient"));
    }
    Ok(StepOutput { losses, grads, bn_batch })
}

/// Per-epoch running means of the loss terms and the learning rate at the
/// first step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub lr: f64,
}

/// Number of batches per epoch: both domains are cycled until the larger
/// one is exhausted.
pub fn batches_per_epoch(data: &TrainData, batch_size: usize) -> usize {
    let half = (batch_size / 2).max(1);
    let n = data.source_x.rows().max(data.target_x.rows());
    n.div_ceil(half)
}

fn epoch_order(n: usize, count: usize, rng: &mut Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count && n > 0 {
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        out.extend(perm);
    }
    out.truncate(count);
    out
}

/// Mutable training state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub model: Model,
    pub velocity: ModelParams,
    pub optimizer: OptimizerState,
}

impl TrainState {
    pub fn new(model: Model, optimizer: OptimizerState) -> Self {
        TrainState {
            velocity: model.params.zeros_like(),
            model,
            optimizer,
        }
    }
}

pub fn train_epoch(state: &mut TrainState, data: &TrainData, snapshot: &EpochSnapshot, cfg: &TrainConfig, epoch: usize) -> Result<EpochMetrics> {
    let half = (cfg.batch_size / 2).max(1);
    let batches = batches_per_epoch(data, cfg.batch_size);
    let mut rng = Rng::new(derive_seed(cfg.seed, 1_000_000 + epoch as u64));
    let s_order = epoch_order(data.source_x.rows(), batches * half, &mut rng);
    let t_order = epoch_order(data.target_x.rows(), batches * half, &mut rng);
    let lr = lr_at(&state.optimizer, state.optimizer.step);
    let mut total = LossBreakdown::default();
    for b in 0..batches {
        let s_idx = &s_order[b * half..((b + 1) * half).min(s_order.len())];
        let t_idx = &t_order[b * half..((b + 1) * half).min(t_order.len())];
        let mut x = Matrix::zeros(s_idx.len() + t_idx.len(), data.input_dim());
        let mut members = Vec::with_capacity(x.rows());
        for (r, &i) in s_idx.iter().enumerate() {
            x.row_mut(r).copy_from_slice(data.source_x.row(i));
            members.push(Member::Source { label: data.source_labels[i] });
        }
        for (r, &i) in t_idx.iter().enumerate() {
            x.row_mut(s_idx.len() + r).copy_from_slice(data.target_x.row(i));
            members.push(Member::Target {
                scores: snapshot.scores.commonness[i],
            });
        }
        let soft = t_idx.iter().map(|&i| snapshot.soft_labels[i].clone()).collect();
        let step = composed_step(
            &state.model,
            &StepBatch { x, members, soft },
            &snapshot.scores.class_weights,
            cfg,
        )
        .map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, batch {b}: {m}")),
            other => other,
        })?;
        sgd_step(&mut state.model.params, &step.grads, &mut state.velocity, &mut state.optimizer);
        if let Some(stats) = &step.bn_batch {
            state.model.bn_stats.update(stats);
        }
        if !state.model.params.is_finite() {
            return Err(Error::numeric(format!("epoch {epoch}, batch {b}: parameters diverged")));
        }
        total.cls += step.losses.cls;
        total.adv += step.losses.adv;
        total.src += step.losses.src;
        total.tgt += step.losses.tgt;
    }
    let n = batches.max(1) as f64;
    Ok(EpochMetrics {
        epoch,
        losses: LossBreakdown {
            cls: total.cls / n,
            adv: total.adv / n,
            src: total.src / n,
            tgt: total.tgt / n,
        },
        lr,
    })
}

/// Saved after every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    /// Epochs completed.
    pub epoch: usize,
    pub state: TrainState,
    /// Model the current snapshot was computed from.
    pub snapshot_model: Model,
    pub history: Vec<EpochMetrics>,
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub model: Model,
    pub history: Vec<EpochMetrics>,
}

pub const HISTORY_HEADER: [&str; 6] = ["epoch", "L_cls", "L_adv", "L_src", "L_tgt", "lr"];

pub fn write_history(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::cam::csv_error(path, e))?;
    w.write_record(HISTORY_HEADER).map_err(|e| crate::cam::csv_error(path, e))?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            format_float(h.losses.cls),
            format_float(h.losses.adv),
            format_float(h.losses.src),
            format_float(h.losses.tgt),
            format_float(h.lr),
        ])
        .map_err(|e| crate::cam::csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        line: e.line() as u64,
        message: e.to_string(),
    })
}

pub fn checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("epoch_{epoch:04}.json"))
}

pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    let dir = run_dir.join("checkpoints");
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut names: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("epoch_") && n.ends_with(".json"))
        })
        .collect();
    names.sort();
    Ok(names.pop())
}

/// Initial model for a dataset and configuration.
pub fn init_model(data: &TrainData, cfg: &TrainConfig) -> Result<Model> {
    Model::init(&cfg.model, data.input_dim(), data.num_classes, derive_seed(cfg.seed, 1))
}

/// Trains for `cfg.epochs` epochs. With a run directory, echoes the config,
/// rewrites `history.csv` and writes a checkpoint after every epoch and
/// `model.json` at the end. `resume` continues from the latest checkpoint.
pub fn fit(data: &TrainData, cfg: &TrainConfig, run_dir: Option<&Path>, resume: bool) -> Result<FitOutput> {
    cfg.validate()?;
    let horizon = (cfg.epochs * batches_per_epoch(data, cfg.batch_size)) as u64;
    let mut state = TrainState::new(init_model(data, cfg)?, OptimizerState::new(cfg.optimizer, horizon));
    let mut history = Vec::new();
    let mut snapshot_model = state.model.clone();
    let mut start = 0;
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
        if resume {
            if let Some(path) = latest_checkpoint(dir)? {
                let ck: Checkpoint = read_json(&path)?;
                if ck.config_hash != cfg.hash() {
                    return Err(Error::argument(format!(
                        "checkpoint {} was written with a different configuration",
                        path.display()
                    )));
                }
                start = ck.epoch;
                state = ck.state;
                snapshot_model = ck.snapshot_model;
                history = ck.history;
            }
        }
        write_json(&dir.join("config.json"), cfg)?;
    }
    let mut snapshot = None;
    for epoch in start..cfg.epochs {
        if epoch % cfg.refresh_period == 0 {
            snapshot_model = state.model.clone();
            snapshot = None;
        }
        if snapshot.is_none() {
            let round = (epoch - epoch % cfg.refresh_period) as u64;
            snapshot = Some(refresh_snapshot(&snapshot_model, data, cfg, round)?);
        }
        let metrics = train_epoch(&mut state, data, snapshot.as_ref().expect("set above"), cfg, epoch)?;
        history.push(metrics);
        if let Some(dir) = run_dir {
            write_history(&dir.join("history.csv"), &history)?;
            let ck = Checkpoint {
                format_version: CHECKPOINT_VERSION,
                config_hash: cfg.hash(),
                epoch: epoch + 1,
                state: state.clone(),
                snapshot_model: snapshot_model.clone(),
                history: history.clone(),
            };
            write_json(&checkpoint_path(dir, epoch + 1), &ck)?;
        }
    }
    if let Some(dir) = run_dir {
        write_history(&dir.join("history.csv"), &history)?;
        write_json(&dir.join("model.json"), &state.model)?;
    }
    Ok(FitOutput {
        model: state.model,
        history,
    })
}
