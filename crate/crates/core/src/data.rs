//! Synthetic universal-DA scenarios and the on-disk dataset format
//! (`manifest.json` + `samples.csv`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cam::csv_error;
use crate::error::{Error, Result};
use crate::numeric::{dot, l2_norm, Rng, Vector};

pub const FORMAT_VERSION: u32 = 1;

/// Label-set geometry and sampling parameters of a synthetic scenario.
///
/// Class ids are laid out as common classes first, then source-private,
/// then target-private, so the source label space is `0..M` with
/// `M = n_common + n_source_private`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSpec {
    pub n_common: usize,
    pub n_source_private: usize,
    pub n_target_private: usize,
    pub samples_per_class: usize,
    pub feat_dim: usize,
    pub attn_dim: usize,
    /// Minimum pairwise distance between class prototypes in each view.
    pub class_separation: f64,
    /// Norm of the translation applied to target samples; the rotation
    /// angle is a quarter of this value in radians.
    pub domain_shift: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            n_common: 5,
            n_source_private: 3,
            n_target_private: 3,
            samples_per_class: 100,
            feat_dim: 16,
            attn_dim: 32,
            class_separation: 3.0,
            domain_shift: 1.0,
            noise_sigma: 0.5,
            seed: 0,
        }
    }
}

impl ScenarioSpec {
    pub fn num_source_classes(&self) -> usize {
        self.n_common + self.n_source_private
    }

    pub fn num_classes(&self) -> usize {
        self.n_common + self.n_source_private + self.n_target_private
    }

    fn validate(&self) -> Result<()> {
        if self.num_source_classes() == 0 {
            return Err(Error::argument("scenario needs at least one source class"));
        }
        if self.samples_per_class == 0 || self.feat_dim == 0 || self.attn_dim == 0 {
            return Err(Error::argument("sample count and dimensions must be positive"));
        }
        let finite = [self.class_separation, self.domain_shift, self.noise_sigma];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::argument("separation, shift and noise must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(&self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub domain: Domain,
    /// Visible label; −1 for unlabeled target samples.
    pub label: i64,
    /// −1 once hidden by [`split_for_protocol`].
    pub ground_truth: i64,
    pub feat: Vector,
    pub attn: Vector,
}

impl Sample {
    pub fn source_label(&self) -> Option<usize> {
        usize::try_from(self.label).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub feat_dim: usize,
    pub attn_dim: usize,
    pub num_source: usize,
    pub num_target: usize,
    pub class_names: Vec<String>,
    pub common_classes: Vec<usize>,
    pub source_private_classes: Vec<usize>,
    pub target_private_classes: Vec<usize>,
    pub spec: Option<ScenarioSpec>,
}

impl Manifest {
    /// `L_s`, ascending.
    pub fn source_classes(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .common_classes
            .iter()
            .chain(&self.source_private_classes)
            .copied()
            .collect();
        v.sort_unstable();
        v
    }

    /// `L_t`, ascending.
    pub fn target_classes(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .common_classes
            .iter()
            .chain(&self.target_private_classes)
            .copied()
            .collect();
        v.sort_unstable();
        v
    }

    pub fn num_source_classes(&self) -> usize {
        self.common_classes.len() + self.source_private_classes.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn source(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.domain == Domain::Source)
    }

    pub fn target(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.domain == Domain::Target)
    }
}

/// Translation plus rotation in a random plane.
struct Shift {
    translation: Vector,
    plane: (Vector, Vector),
    angle: f64,
}

impl Shift {
    fn draw(rng: &mut Rng, dim: usize, magnitude: f64) -> Shift {
        let u = unit(rng, dim);
        let e1 = unit(rng, dim);
        let mut e2 = unit(rng, dim);
        let proj = dot(&e1, &e2);
        e2.iter_mut().zip(e1.iter()).for_each(|(b, a)| *b -= proj * a);
        let e2 = e2.normalized().unwrap_or_else(|| Vector::zeros(dim));
        Shift {
            translation: u.scaled(magnitude),
            plane: (e1, e2),
            angle: 0.25 * magnitude,
        }
    }

    fn apply(&self, x: &[f64]) -> Vector {
        let (e1, e2) = &self.plane;
        let (a, b) = (dot(x, e1), dot(x, e2));
        let (c, s) = (self.angle.cos(), self.angle.sin());
        x.iter()
            .enumerate()
            .map(|(i, xi)| {
                let rotated = xi + (c - 1.0) * (a * e1[i] + b * e2[i]) + s * (a * e2[i] - b * e1[i]);
                rotated + self.translation[i]
            })
            .collect()
    }
}

fn unit(rng: &mut Rng, dim: usize) -> Vector {
    loop {
        if let Some(v) = rng.normal_vec(dim, 1.0).normalized() {
            return v;
        }
    }
}

fn draw_prototypes(rng: &mut Rng, count: usize, dim: usize, separation: f64) -> Result<Vec<Vector>> {
    const RETRIES: usize = 1000;
    let mut protos: Vec<Vector> = Vec::with_capacity(count);
    for c in 0..count {
        let mut accepted = None;
        for _ in 0..RETRIES {
            let cand = rng.normal_vec(dim, 1.0);
            let far = protos.iter().all(|p| {
                let d: Vec<f64> = p.iter().zip(cand.iter()).map(|(a, b)| a - b).collect();
                l2_norm(&d) >= separation
            });
            if far {
                accepted = Some(cand);
                break;
            }
        }
        match accepted {
            Some(p) => protos.push(p),
            None => {
                return Err(Error::Generation(format!(
                    "could not place prototype {c} at separation {separation} in {dim} dimensions"
                )))
            }
        }
    }
    Ok(protos)
}

fn noisy(rng: &mut Rng, center: &[f64], sigma: f64) -> Vector {
    center.iter().map(|c| c + sigma * rng.normal()).collect()
}

/// Draws a scenario. Deterministic in `spec.seed`.
pub fn generate(spec: &ScenarioSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let n_classes = spec.num_classes();
    let feat_protos = draw_prototypes(&mut rng, n_classes, spec.feat_dim, spec.class_separation)?;
    let attn_protos = draw_prototypes(&mut rng, n_classes, spec.attn_dim, spec.class_separation)?;
    let feat_shift = Shift::draw(&mut rng, spec.feat_dim, spec.domain_shift);
    let attn_shift = Shift::draw(&mut rng, spec.attn_dim, spec.domain_shift);

    let m = spec.num_source_classes();
    let common: Vec<usize> = (0..spec.n_common).collect();
    let source_private: Vec<usize> = (spec.n_common..m).collect();
    let target_private: Vec<usize> = (m..n_classes).collect();

    let mut samples = Vec::new();
    let mut idx = 0usize;
    for class in common.iter().chain(&source_private) {
        for _ in 0..spec.samples_per_class {
            samples.push(Sample {
                id: format!("s{idx:05}"),
                domain: Domain::Source,
                label: *class as i64,
                ground_truth: *class as i64,
                feat: noisy(&mut rng, &feat_protos[*class], spec.noise_sigma),
                attn: noisy(&mut rng, &attn_protos[*class], spec.noise_sigma),
            });
            idx += 1;
        }
    }
    let num_source = samples.len();
    idx = 0;
    for class in common.iter().chain(&target_private) {
        let fc = feat_shift.apply(&feat_protos[*class]);
        let ac = attn_shift.apply(&attn_protos[*class]);
        for _ in 0..spec.samples_per_class {
            samples.push(Sample {
                id: format!("t{idx:05}"),
                domain: Domain::Target,
                label: -1,
                ground_truth: *class as i64,
                feat: noisy(&mut rng, &fc, spec.noise_sigma),
                attn: noisy(&mut rng, &ac, spec.noise_sigma),
            });
            idx += 1;
        }
    }
    let class_names = (0..n_classes)
        .map(|c| {
            if c < spec.n_common {
                format!("common_{c}")
            } else if c < m {
                format!("source_private_{c}")
            } else {
                format!("target_private_{c}")
            }
        })
        .collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        feat_dim: spec.feat_dim,
        attn_dim: spec.attn_dim,
        num_source,
        num_target: samples.len() - num_source,
        class_names,
        common_classes: common,
        source_private_classes: source_private,
        target_private_classes: target_private,
        spec: Some(spec.clone()),
    };
    Ok(Dataset { samples, manifest })
}

/// Round-trip decimal with 17 significant digits.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn header(feat_dim: usize, attn_dim: usize) -> Vec<String> {
    let mut h: Vec<String> = ["id", "domain", "label", "ground_truth"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..feat_dim).map(|i| format!("feat_{i}")));
    h.extend((0..attn_dim).map(|i| format!("attn_{i}")));
    h
}

pub fn save(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&dataset.manifest).expect("manifest serializes");
    fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))?;

    let path = dir.join("samples.csv");
    let m = &dataset.manifest;
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    w.write_record(header(m.feat_dim, m.attn_dim))
        .map_err(|e| csv_error(&path, e))?;
    for s in &dataset.samples {
        let mut rec = vec![
            s.id.clone(),
            s.domain.as_str().to_string(),
            s.label.to_string(),
            s.ground_truth.to_string(),
        ];
        rec.extend(s.feat.iter().map(|v| format_float(*v)));
        rec.extend(s.attn.iter().map(|v| format_float(*v)));
        w.write_record(&rec).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Data {
        path: manifest_path.clone(),
        line: e.line() as u64,
        message: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &manifest_path,
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }

    let path = dir.join("samples.csv");
    let mut r = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(&path)
        .map_err(|e| csv_error(&path, e))?;
    let want = header(manifest.feat_dim, manifest.attn_dim);
    let got = r.headers().map_err(|e| csv_error(&path, e))?.clone();
    if got.iter().ne(want.iter().map(String::as_str)) {
        return Err(Error::Data {
            path: path.clone(),
            line: 1,
            message: format!(
                "header does not match manifest dims (feat_dim {}, attn_dim {})",
                manifest.feat_dim, manifest.attn_dim
            ),
        });
    }
    let mut samples = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(&path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |message: String| Error::Data {
            path: path.clone(),
            line,
            message,
        };
        if rec.len() != want.len() {
            return Err(bad(format!(
                "row {} has {} columns, manifest implies {} (feat_dim {}, attn_dim {})",
                rec.get(0).unwrap_or("?"),
                rec.len(),
                want.len(),
                manifest.feat_dim,
                manifest.attn_dim
            )));
        }
        let domain = match &rec[1] {
            "source" => Domain::Source,
            "target" => Domain::Target,
            other => return Err(bad(format!("unknown domain `{other}`"))),
        };
        let int = |i: usize| {
            rec[i]
                .parse::<i64>()
                .map_err(|_| bad(format!("{} is not an integer: `{}`", want[i], &rec[i])))
        };
        let mut floats = Vec::with_capacity(want.len() - 4);
        for i in 4..want.len() {
            let v: f64 = rec[i]
                .parse()
                .map_err(|_| bad(format!("{} is not a number: `{}`", want[i], &rec[i])))?;
            if !v.is_finite() {
                return Err(bad(format!("{} is not finite", want[i])));
            }
            floats.push(v);
        }
        let attn = floats.split_off(manifest.feat_dim);
        samples.push(Sample {
            id: rec[0].to_string(),
            domain,
            label: int(2)?,
            ground_truth: int(3)?,
            feat: Vector::new(floats),
            attn: Vector::new(attn),
        });
    }
    let dataset = Dataset { samples, manifest };
    let (m, n) = (dataset.source().count(), dataset.target().count());
    if m != dataset.manifest.num_source || n != dataset.manifest.num_target {
        return Err(Error::format(
            &path,
            format!(
                "manifest declares {} source / {} target samples, file has {m} / {n}",
                dataset.manifest.num_source, dataset.manifest.num_target
            ),
        ));
    }
    Ok(dataset)
}

/// Labeled source samples.
#[derive(Debug, Clone)]
pub struct SourceView {
    pub samples: Vec<Sample>,
}

/// Target samples with labels and ground truth hidden.
#[derive(Debug, Clone)]
pub struct TargetView {
    pub samples: Vec<Sample>,
    truth: Vec<i64>,
}

impl TargetView {
    /// Hidden ground truth, aligned with `samples`. Evaluation use only.
    pub fn reveal_ground_truth(&self) -> &[i64] {
        &self.truth
    }
}

pub fn split_for_protocol(dataset: &Dataset) -> Result<(SourceView, TargetView)> {
    let source: Vec<Sample> = dataset.source().cloned().collect();
    let mut truth = Vec::new();
    let target: Vec<Sample> = dataset
        .target()
        .map(|s| {
            truth.push(s.ground_truth);
            Sample {
                label: -1,
                ground_truth: -1,
                ..s.clone()
            }
        })
        .collect();
    if source.is_empty() || target.is_empty() {
        return Err(Error::argument("dataset must contain both source and target samples"));
    }
    if source.iter().any(|s| s.label < 0) {
        return Err(Error::argument("source samples must be labeled"));
    }
    Ok((SourceView { samples: source }, TargetView { samples: target, truth }))
}
