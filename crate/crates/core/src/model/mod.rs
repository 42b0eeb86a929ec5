//! Feature extractor, label classifier and domain discriminator, with
//! backward passes and the momentum SGD optimizer.

pub mod layers;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{encoder_backward, encoder_forward_cached, EncoderCache, EncoderConfig, EncoderParams, TokenSequence};
use crate::error::{Error, Result};
use crate::losses::PROB_EPS;
use crate::numeric::{matmul, Matrix, Rng, Vector};

pub use layers::{BatchNorm, BnCache, BnStats, Linear};
use layers::{add_into, relu, relu_backward, sigmoid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    /// `input → hidden → d_z` with a ReLU in between.
    Mlp,
    /// Single affine layer `input → d_z`.
    Linear,
    /// Toy attention encoder over tokens lifted from the input.
    Encoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub extractor: ExtractorKind,
    pub hidden: usize,
    pub d_z: usize,
    pub disc_hidden: [usize; 2],
    pub encoder: EncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            extractor: ExtractorKind::Mlp,
            hidden: 64,
            d_z: 16,
            disc_hidden: [32, 32],
            encoder: EncoderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extractor {
    Mlp(Vec<Linear>),
    Encoder(EncoderParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub bn: BatchNorm,
    pub fc: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub layers: Vec<Linear>,
}

/// All trainable tensors. Gradient and momentum buffers use the same type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub extractor: Extractor,
    pub classifier: Classifier,
    pub discriminator: Discriminator,
}

impl ModelParams {
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = match &self.extractor {
            Extractor::Mlp(layers) => layers.iter().flat_map(|l| l.tensors()).collect(),
            Extractor::Encoder(p) => p.tensors(),
        };
        out.extend(self.classifier.bn.tensors());
        out.extend(self.classifier.fc.tensors());
        out.extend(self.discriminator.layers.iter().flat_map(|l| l.tensors()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = match &mut self.extractor {
            Extractor::Mlp(layers) => layers.iter_mut().flat_map(|l| l.tensors_mut()).collect(),
            Extractor::Encoder(p) => p.tensors_mut(),
        };
        out.extend(self.classifier.bn.tensors_mut());
        out.extend(self.classifier.fc.tensors_mut());
        out.extend(self.discriminator.layers.iter_mut().flat_map(|l| l.tensors_mut()));
        out
    }

    /// Zero tensors of identical shapes.
    pub fn zeros_like(&self) -> ModelParams {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.as_mut_slice().fill(0.0));
        z
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.as_slice().len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.as_slice().iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::shape("flat parameter vector has the wrong length"));
        }
        let mut at = 0;
        for t in self.tensors_mut() {
            let n = t.as_slice().len();
            t.as_mut_slice().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            add_into(a, b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub input_dim: usize,
    pub num_classes: usize,
    pub params: ModelParams,
    /// Running batch-norm statistics of the classifier.
    pub bn_stats: BnStats,
    /// Fixed input-to-token lift used by the encoder extractor.
    pub lift: Option<Matrix>,
}

/// Intermediate values of the feature extractor.
#[derive(Debug, Clone)]
pub enum FeatCache {
    Mlp { inputs: Vec<Matrix>, pre: Vec<Matrix> },
    Encoder(Vec<EncoderCache>),
}

#[derive(Debug, Clone)]
pub struct Extracted {
    pub z: Matrix,
    /// Encoder attention vectors, one per row; `None` for MLP extractors.
    pub attn: Option<Vec<Vector>>,
    pub cache: FeatCache,
}

#[derive(Debug, Clone)]
pub struct ClsCache {
    bn: BnCache,
    h: Matrix,
}

#[derive(Debug, Clone)]
pub struct DiscCache {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub z: Matrix,
    pub logits: Matrix,
    /// Clamped to `[1e-7, 1 − 1e-7]`.
    pub domain_prob: Vec<f64>,
    pub attn: Option<Vec<Vector>>,
}

fn finite(m: &Matrix, what: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!("non-finite {what} activation")))
    }
}

impl Model {
    pub fn init(config: &ModelConfig, input_dim: usize, num_classes: usize, seed: u64) -> Result<Model> {
        if input_dim == 0 || num_classes == 0 || config.d_z == 0 {
            return Err(Error::argument("model dimensions must be positive"));
        }
        let mut rng = Rng::new(seed);
        let mut config = config.clone();
        let (extractor, lift) = match config.extractor {
            ExtractorKind::Mlp => (
                Extractor::Mlp(vec![
                    Linear::init(input_dim, config.hidden, &mut rng),
                    Linear::init(config.hidden, config.d_z, &mut rng),
                ]),
                None,
            ),
            ExtractorKind::Linear => (Extractor::Mlp(vec![Linear::init(input_dim, config.d_z, &mut rng)]), None),
            ExtractorKind::Encoder => {
                config.encoder.d_z = config.d_z;
                let enc = config.encoder;
                let width = (enc.num_patches + 1) * enc.d_model;
                let sigma = (1.0 / input_dim as f64).sqrt();
                let lift = Matrix::from_vec(input_dim, width, rng.normal_vec(input_dim * width, sigma).into_inner())?;
                (Extractor::Encoder(EncoderParams::init(&enc, &mut rng)), Some(lift))
            }
        };
        let [h1, h2] = config.disc_hidden;
        let params = ModelParams {
            extractor,
            classifier: Classifier {
                bn: BatchNorm::new(config.d_z),
                fc: Linear::init(config.d_z, num_classes, &mut rng),
            },
            discriminator: Discriminator {
                layers: vec![
                    Linear::init(config.d_z, h1, &mut rng),
                    Linear::init(h1, h2, &mut rng),
                    Linear::init(h2, 1, &mut rng),
                ],
            },
        };
        Ok(Model {
            bn_stats: BnStats::new(config.d_z),
            config,
            input_dim,
            num_classes,
            params,
            lift,
        })
    }

    pub fn d_z(&self) -> usize {
        self.config.d_z
    }

    /// Attention vectors come from the encoder rather than the dataset.
    pub fn produces_attention(&self) -> bool {
        matches!(self.params.extractor, Extractor::Encoder(_))
    }

    pub fn extract(&self, x: &Matrix) -> Result<Extracted> {
        if x.cols() != self.input_dim {
            return Err(Error::shape(format!(
                "model expects {} input columns, got {}",
                self.input_dim,
                x.cols()
            )));
        }
        match &self.params.extractor {
            Extractor::Mlp(layers) => {
                let mut inputs = Vec::with_capacity(layers.len());
                let mut pre = Vec::with_capacity(layers.len());
                let mut h = x.clone();
                for (i, layer) in layers.iter().enumerate() {
                    let y = layer.forward(&h)?;
                    inputs.push(h);
                    h = if i + 1 < layers.len() { relu(&y) } else { y.clone() };
                    pre.push(y);
                }
                finite(&h, "feature")?;
                Ok(Extracted {
                    z: h,
                    attn: None,
                    cache: FeatCache::Mlp { inputs, pre },
                })
            }
            Extractor::Encoder(params) => {
                let lift = self.lift.as_ref().ok_or_else(|| Error::argument("encoder model lacks its token lift"))?;
                let tokens = matmul(x, lift)?;
                let d_model = self.config.encoder.d_model;
                let post = self.config.encoder.post_softmax;
                let outs: Vec<_> = (0..x.rows())
                    .into_par_iter()
                    .map(|r| {
                        let seq = TokenSequence::new(Matrix::from_vec(
                            tokens.cols() / d_model,
                            d_model,
                            tokens.row(r).to_vec(),
                        )?)?;
                        encoder_forward_cached(&seq, params, post)
                    })
                    .collect::<Result<_>>()?;
                let mut z = Matrix::zeros(x.rows(), self.d_z());
                let mut attn = Vec::with_capacity(outs.len());
                let mut caches = Vec::with_capacity(outs.len());
                for (r, (out, cache)) in outs.into_iter().enumerate() {
                    z.row_mut(r).copy_from_slice(&out.features);
                    attn.push(out.flattened);
                    caches.push(cache);
                }
                finite(&z, "feature")?;
                Ok(Extracted {
                    z,
                    attn: Some(attn),
                    cache: FeatCache::Encoder(caches),
                })
            }
        }
    }

    pub fn extractor_backward(&self, cache: &FeatCache, dz: &Matrix, grads: &mut ModelParams) -> Result<()> {
        match (&self.params.extractor, cache, &mut grads.extractor) {
            (Extractor::Mlp(layers), FeatCache::Mlp { inputs, pre }, Extractor::Mlp(g)) => {
                let mut d = dz.clone();
                for i in (0..layers.len()).rev() {
                    if i + 1 < layers.len() {
                        d = relu_backward(&pre[i], &d);
                    }
                    d = layers[i].backward(&inputs[i], &d, &mut g[i])?;
                }
                Ok(())
            }
            (Extractor::Encoder(params), FeatCache::Encoder(caches), Extractor::Encoder(g)) => {
                let parts: Vec<EncoderParams> = caches
                    .par_iter()
                    .enumerate()
                    .map(|(r, c)| encoder_backward(params, c, dz.row(r)))
                    .collect::<Result<_>>()?;
                for p in &parts {
                    for (a, b) in g.tensors_mut().into_iter().zip(p.tensors()) {
                        add_into(a, b);
                    }
                }
                Ok(())
            }
            _ => Err(Error::argument("feature cache does not match the extractor")),
        }
    }

    /// Classifier logits using batch statistics; returns them for the
    /// running-average update.
    pub fn classify_train(&self, z: &Matrix) -> Result<(Matrix, ClsCache, BnStats)> {
        let c = &self.params.classifier;
        let (h, bn, stats) = c.bn.forward_train(z)?;
        let logits = c.fc.forward(&h)?;
        finite(&logits, "classifier")?;
        Ok((logits, ClsCache { bn, h }, stats))
    }

    pub fn classify_eval(&self, z: &Matrix) -> Result<Matrix> {
        let c = &self.params.classifier;
        let logits = c.fc.forward(&c.bn.forward_eval(z, &self.bn_stats)?)?;
        finite(&logits, "classifier")?;
        Ok(logits)
    }

    pub fn classifier_backward(&self, cache: &ClsCache, dlogits: &Matrix, grads: &mut ModelParams) -> Result<Matrix> {
        let c = &self.params.classifier;
        let g = &mut grads.classifier;
        let dh = c.fc.backward(&cache.h, dlogits, &mut g.fc)?;
        Ok(c.bn.backward(&cache.bn, &dh, &mut g.bn))
    }

    /// Unclamped probability that each row is a target sample.
    pub fn discriminate(&self, z: &Matrix) -> Result<(Vec<f64>, DiscCache)> {
        let layers = &self.params.discriminator.layers;
        let mut inputs = Vec::with_capacity(layers.len());
        let mut pre = Vec::with_capacity(layers.len());
        let mut h = z.clone();
        for (i, layer) in layers.iter().enumerate() {
            let y = layer.forward(&h)?;
            inputs.push(h);
            h = if i + 1 < layers.len() { relu(&y) } else { y.clone() };
            pre.push(y);
        }
        finite(&h, "discriminator")?;
        let probs: Vec<f64> = h.as_slice().iter().map(|a| sigmoid(*a)).collect();
        Ok((probs.clone(), DiscCache { inputs, pre, probs }))
    }

    pub fn discriminator_backward(&self, cache: &DiscCache, dprob: &[f64], grads: &mut ModelParams) -> Result<Matrix> {
        let layers = &self.params.discriminator.layers;
        let da: Vec<f64> = dprob
            .iter()
            .zip(&cache.probs)
            .map(|(d, p)| d * p * (1.0 - p))
            .collect();
        let mut d = Matrix::from_vec(da.len(), 1, da)?;
        for i in (0..layers.len()).rev() {
            if i + 1 < layers.len() {
                d = relu_backward(&cache.pre[i], &d);
            }
            d = layers[i].backward(&cache.inputs[i], &d, &mut grads.discriminator.layers[i])?;
        }
        Ok(d)
    }

    /// Evaluation-mode pass over a batch of inputs.
    pub fn forward(&self, x: &Matrix) -> Result<ForwardOutput> {
        let ex = self.extract(x)?;
        let logits = self.classify_eval(&ex.z)?;
        let (probs, _) = self.discriminate(&ex.z)?;
        Ok(ForwardOutput {
            domain_prob: probs.iter().map(|p| p.clamp(PROB_EPS, 1.0 - PROB_EPS)).collect(),
            z: ex.z,
            logits,
            attn: ex.attn,
        })
    }
}

/// Backward rule of the gradient-reversal layer.
pub fn gradient_reversal(upstream: &[f64], mu: f64) -> Vector {
    upstream.iter().map(|g| -mu * g).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Schedule constants of `base·(1 + a·i/N)^(−b)`.
    pub a: f64,
    pub b: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            a: 10.0,
            b: 0.75,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    pub horizon: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, horizon: u64) -> Self {
        OptimizerState {
            config,
            step: 0,
            horizon,
        }
    }
}

pub fn lr_at(opt: &OptimizerState, i: u64) -> f64 {
    let c = &opt.config;
    if opt.horizon == 0 {
        return c.base_lr;
    }
    let progress = i.min(opt.horizon) as f64 / opt.horizon as f64;
    c.base_lr * (1.0 + c.a * progress).powf(-c.b)
}

/// `v ← m·v + g + wd·p; p ← p − lr·v` on one tensor.
pub fn sgd_update(param: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, config: &OptimizerConfig) {
    for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = config.momentum * *v + g + config.weight_decay * *p;
        *p -= lr * *v;
    }
}

/// One momentum step over every tensor at the scheduled rate; advances the
/// step counter.
pub fn sgd_step(params: &mut ModelParams, grads: &ModelParams, velocity: &mut ModelParams, opt: &mut OptimizerState) {
    let lr = lr_at(opt, opt.step);
    for ((p, g), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(velocity.tensors_mut())
    {
        sgd_update(p.as_mut_slice(), g.as_slice(), v.as_mut_slice(), lr, &opt.config);
    }
    opt.step += 1;
}
