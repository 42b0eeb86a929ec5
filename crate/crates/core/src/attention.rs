//! Toy multi-head self-attention encoder. Produces the flattened per-sample
//! attention vector (raw scaled query-key scores of every head) and a
//! class-token feature, plus class-mean prototypes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dot, matmul, matmul_at, matmul_bt, Matrix, Rng, Vector};
use crate::sparse::Dictionary;

/// `(N+1) × d_model` token matrix whose first row is the class token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    tokens: Matrix,
}

impl TokenSequence {
    pub fn new(tokens: Matrix) -> Result<Self> {
        if tokens.rows() < 2 {
            return Err(Error::shape("a token sequence needs a class token and one patch"));
        }
        Ok(TokenSequence { tokens })
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn num_patches(&self) -> usize {
        self.tokens.rows() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// Pre-softmax score matrix of each head.
    pub per_head: Vec<Matrix>,
    /// Head-major, row-major flattening; length `N_H·(N+1)²`.
    pub flattened: Vector,
    pub features: Vector,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_patches: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_z: usize,
    /// Extract row-softmaxed scores instead of the raw `QKᵀ/√d_k`.
    pub post_softmax: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_patches: 3,
            d_model: 16,
            num_heads: 2,
            d_k: 8,
            d_v: 8,
            d_z: 16,
            post_softmax: false,
        }
    }
}

impl EncoderConfig {
    pub fn attention_dim(&self) -> usize {
        self.num_heads * (self.num_patches + 1).pow(2)
    }
}

/// Projection weights of one encoder block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub w_q: Vec<Matrix>,
    pub w_k: Vec<Matrix>,
    pub w_v: Vec<Matrix>,
    /// `(N_H·d_v) × d_z` projection of the concatenated class-token outputs.
    pub w_out: Matrix,
    pub b_out: Matrix,
}

impl EncoderParams {
    pub fn init(cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let gauss = |rng: &mut Rng, r: usize, c: usize, sigma: f64| {
            Matrix::from_vec(r, c, rng.normal_vec(r * c, sigma).into_inner()).unwrap()
        };
        let s_in = (1.0 / cfg.d_model as f64).sqrt();
        let mut w_q = Vec::new();
        let mut w_k = Vec::new();
        let mut w_v = Vec::new();
        for _ in 0..cfg.num_heads {
            w_q.push(gauss(rng, cfg.d_model, cfg.d_k, s_in));
            w_k.push(gauss(rng, cfg.d_model, cfg.d_k, s_in));
            w_v.push(gauss(rng, cfg.d_model, cfg.d_v, s_in));
        }
        let pooled = cfg.num_heads * cfg.d_v;
        EncoderParams {
            w_q,
            w_k,
            w_v,
            w_out: gauss(rng, pooled, cfg.d_z, (1.0 / pooled as f64).sqrt()),
            b_out: Matrix::zeros(1, cfg.d_z),
        }
    }

    pub fn num_heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn d_k(&self) -> usize {
        self.w_q[0].cols()
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = Vec::new();
        for h in 0..self.num_heads() {
            out.extend([&self.w_q[h], &self.w_k[h], &self.w_v[h]]);
        }
        out.extend([&self.w_out, &self.b_out]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        for ((q, k), v) in self.w_q.iter_mut().zip(&mut self.w_k).zip(&mut self.w_v) {
            out.extend([q, k, v]);
        }
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
        out
    }

    fn check(&self, d_model: usize) -> Result<()> {
        let h = self.num_heads();
        if h == 0 || self.w_k.len() != h || self.w_v.len() != h {
            return Err(Error::shape("encoder needs the same positive number of Q, K and V heads"));
        }
        let d_k = self.d_k();
        let d_v = self.w_v[0].cols();
        for i in 0..h {
            let ok = self.w_q[i].rows() == d_model
                && self.w_k[i].rows() == d_model
                && self.w_v[i].rows() == d_model
                && self.w_q[i].cols() == d_k
                && self.w_k[i].cols() == d_k
                && self.w_v[i].cols() == d_v;
            if !ok {
                return Err(Error::shape(format!("head {i} projections are inconsistent")));
            }
        }
        if self.w_out.rows() != h * d_v || self.b_out.rows() != 1 || self.b_out.cols() != self.w_out.cols() {
            return Err(Error::shape("output projection does not match the heads"));
        }
        Ok(())
    }
}

/// `A = Q Kᵀ / √d_k`, no softmax.
pub fn self_attention_scores(q: &Matrix, k: &Matrix, d_k: usize) -> Result<Matrix> {
    if q.rows() != k.rows() || q.cols() != k.cols() || q.cols() != d_k || d_k == 0 {
        return Err(Error::shape(format!(
            "queries {}x{} and keys {}x{} incompatible with d_k = {d_k}",
            q.rows(),
            q.cols(),
            k.rows(),
            k.cols()
        )));
    }
    let mut a = matmul_bt(q, k)?;
    a.scale(1.0 / (d_k as f64).sqrt());
    Ok(a)
}

pub fn flatten_heads(per_head: &[Matrix]) -> Result<Vector> {
    let first = per_head
        .first()
        .ok_or_else(|| Error::shape("no attention heads to flatten"))?;
    if per_head
        .iter()
        .any(|m| m.rows() != first.rows() || m.cols() != first.cols())
    {
        return Err(Error::shape("attention heads differ in shape"));
    }
    Ok(per_head.iter().flat_map(|m| m.as_slice().iter().copied()).collect())
}

/// Inverse of [`flatten_heads`] for square heads of side `side`.
pub fn unflatten_heads(flat: &[f64], num_heads: usize, side: usize) -> Result<Vec<Matrix>> {
    let block = side * side;
    if num_heads == 0 || flat.len() != num_heads * block {
        return Err(Error::shape(format!(
            "length {} is not {num_heads} heads of {side}x{side}",
            flat.len()
        )));
    }
    flat.chunks(block)
        .map(|c| Matrix::from_vec(side, side, c.to_vec()))
        .collect()
}

fn row_softmax(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    tokens: Matrix,
    queries: Vec<Matrix>,
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
    probs: Vec<Matrix>,
    pooled: Vec<f64>,
}

pub fn encoder_forward(
    seq: &TokenSequence,
    params: &EncoderParams,
    post_softmax: bool,
) -> Result<AttentionOutput> {
    encoder_forward_cached(seq, params, post_softmax).map(|(out, _)| out)
}

pub fn encoder_forward_cached(
    seq: &TokenSequence,
    params: &EncoderParams,
    post_softmax: bool,
) -> Result<(AttentionOutput, EncoderCache)> {
    let x = seq.tokens();
    params.check(x.cols())?;
    let d_k = params.d_k();
    let mut per_head = Vec::with_capacity(params.num_heads());
    let mut cache = EncoderCache {
        tokens: x.clone(),
        queries: Vec::new(),
        keys: Vec::new(),
        values: Vec::new(),
        probs: Vec::new(),
        pooled: Vec::new(),
    };
    for h in 0..params.num_heads() {
        let q = matmul(x, &params.w_q[h])?;
        let k = matmul(x, &params.w_k[h])?;
        let v = matmul(x, &params.w_v[h])?;
        let scores = self_attention_scores(&q, &k, d_k)?;
        let probs = row_softmax(&scores);
        // class-token output: first row of probs · V
        let p0 = probs.row(0);
        for c in 0..v.cols() {
            cache
                .pooled
                .push((0..v.rows()).map(|r| p0[r] * v[(r, c)]).sum());
        }
        per_head.push(scores);
        cache.queries.push(q);
        cache.keys.push(k);
        cache.values.push(v);
        cache.probs.push(probs);
    }
    let flattened = if post_softmax {
        flatten_heads(&cache.probs)?
    } else {
        flatten_heads(&per_head)?
    };
    let mut features = params.w_out.tr_mul_vec(&cache.pooled)?;
    for (f, b) in features.iter_mut().zip(params.b_out.row(0)) {
        *f += b;
    }
    if !flattened.is_finite() || !features.is_finite() {
        return Err(Error::numeric("non-finite encoder activations"));
    }
    let expected = params.num_heads() * x.rows() * x.rows();
    assert_eq!(flattened.len(), expected, "attention dimension bookkeeping");
    Ok((
        AttentionOutput {
            per_head,
            flattened,
            features,
        },
        cache,
    ))
}

/// Gradient of a scalar loss with respect to every encoder weight, given
/// the loss gradient `d_features` at the class-token feature.
pub fn encoder_backward(params: &EncoderParams, cache: &EncoderCache, d_features: &[f64]) -> Result<EncoderParams> {
    if d_features.len() != params.w_out.cols() {
        return Err(Error::shape("feature gradient length does not match d_z"));
    }
    let x = &cache.tokens;
    let d_k = params.d_k();
    let d_v = params.w_v[0].cols();
    let n = x.rows();
    let inv_sqrt = 1.0 / (d_k as f64).sqrt();

    let mut w_out = Matrix::zeros(params.w_out.rows(), params.w_out.cols());
    for (i, p) in cache.pooled.iter().enumerate() {
        for (j, g) in d_features.iter().enumerate() {
            w_out[(i, j)] = p * g;
        }
    }
    let b_out = Matrix::from_vec(1, d_features.len(), d_features.to_vec())?;
    let d_pooled = params.w_out.mul_vec(d_features)?;

    let mut grads = EncoderParams {
        w_q: Vec::new(),
        w_k: Vec::new(),
        w_v: Vec::new(),
        w_out,
        b_out,
    };
    for h in 0..params.num_heads() {
        let d_o0 = &d_pooled[h * d_v..(h + 1) * d_v];
        let v = &cache.values[h];
        let p0 = cache.probs[h].row(0);

        // only the class-token row of the output reaches the features
        let mut d_v_mat = Matrix::zeros(n, d_v);
        let mut d_p0 = vec![0.0; n];
        for r in 0..n {
            d_p0[r] = dot(v.row(r), d_o0);
            for c in 0..d_v {
                d_v_mat[(r, c)] = p0[r] * d_o0[c];
            }
        }
        let weighted: f64 = dot(p0, &d_p0);
        let mut d_scores = Matrix::zeros(n, n);
        for j in 0..n {
            d_scores[(0, j)] = p0[j] * (d_p0[j] - weighted);
        }
        let mut d_q = matmul(&d_scores, &cache.keys[h])?;
        d_q.scale(inv_sqrt);
        let mut d_k_mat = matmul_at(&d_scores, &cache.queries[h])?;
        d_k_mat.scale(inv_sqrt);

        grads.w_q.push(matmul_at(x, &d_q)?);
        grads.w_k.push(matmul_at(x, &d_k_mat)?);
        grads.w_v.push(matmul_at(x, &d_v_mat)?);
    }
    Ok(grads)
}

/// Class-mean prototypes, one atom per distinct label (ascending).
pub fn compute_prototypes(vectors: &[Vector], labels: &[usize]) -> Result<Dictionary> {
    if vectors.is_empty() {
        return Err(Error::argument("cannot build prototypes from no vectors"));
    }
    if vectors.len() != labels.len() {
        return Err(Error::shape("vectors and labels differ in length"));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::shape("vectors differ in length"));
    }
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut sums = vec![vec![0.0; dim]; classes.len()];
    let mut counts = vec![0usize; classes.len()];
    for (v, label) in vectors.iter().zip(labels) {
        let slot = classes.binary_search(label).expect("label collected above");
        counts[slot] += 1;
        for (s, x) in sums[slot].iter_mut().zip(v.iter()) {
            *s += x;
        }
    }
    let atoms: Vec<Vector> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| s.into_iter().map(|x| x / c as f64).collect())
        .collect();
    Dictionary::from_atoms(&atoms, classes)
}
