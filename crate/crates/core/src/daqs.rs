//! Domain-agnostic query selection.
//!
//! Per image:
//!
//! 1. `s = LayerNorm(Linear(mu + sigma))` from the channel statistics of the
//!    encoder feature map;
//! 2. each flattened token loses its component along `s`:
//!    `q_hat = q - alpha * (<q, s> / |s|^2) * s`;
//! 3. an auxiliary head scores every projected token
//!    (`max_c sigmoid(logit_c)`) and the top-K rows become the initial
//!    decoder queries.
//!
//! The projection is only used for selection: consumers such as decoder
//! cross-attention read the unprojected tokens from [`DaqsTrace::tokens`].

use serde::Serialize;

use crate::numcore::{
    channel_stats, channel_stats_backward, dot, layer_normalize, layer_normalize_backward,
    linear_backward, ChannelStats, FeatureMap, LinearParams, Real, Shape4,
};
use crate::{Error, Result};

/// Epsilon of the style encoder's layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Below this squared norm the style axis is treated as absent.
pub const MIN_STYLE_NORM_SQ: f64 = 1e-12;

/// Row-major `n_q x d` token matrix of one image.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuerySet<T> {
    pub n_q: usize,
    pub d: usize,
    pub tokens: Vec<T>,
}

impl<T: Real> QuerySet<T> {
    pub fn new(n_q: usize, d: usize, tokens: Vec<T>) -> Result<Self> {
        if tokens.len() != n_q * d {
            return Err(Error::contract(format!(
                "query set {n_q}x{d} needs {} values, got {}",
                n_q * d,
                tokens.len()
            )));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("query tokens".into()));
        }
        Ok(Self { n_q, d, tokens })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::contract("ragged query rows"));
        }
        Self::new(rows.len(), d, rows.concat())
    }

    /// Flattens image `n` of a feature map into `h*w` tokens of dimension `c`,
    /// token index `y * w + x`.
    pub fn from_feature_map(f: &FeatureMap<T>, n: usize) -> Self {
        let s = f.shape();
        let plane = s.plane();
        let mut tokens = vec![T::zero(); plane * s.c];
        for c in 0..s.c {
            for (t, &v) in f.plane(n, c).iter().enumerate() {
                tokens[t * s.c + c] = v;
            }
        }
        Self { n_q: plane, d: s.c, tokens }
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.tokens[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> std::slice::Chunks<'_, T> {
        self.tokens.chunks(self.d)
    }
}

/// Style embedding `s` of one image, spanning the removed subspace.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleEmbedding<T> {
    pub s: Vec<T>,
    pub source_mu: Vec<T>,
    pub source_sigma: Vec<T>,
    norm_sq: T,
}

impl<T: Real> StyleEmbedding<T> {
    pub fn new(s: Vec<T>, source_mu: Vec<T>, source_sigma: Vec<T>) -> Self {
        let norm_sq = dot(&s, &s);
        Self { s, source_mu, source_sigma, norm_sq }
    }

    /// Embedding without recorded source statistics.
    pub fn from_vector(s: Vec<T>) -> Self {
        Self::new(s, Vec::new(), Vec::new())
    }

    pub fn norm_sq(&self) -> T {
        self.norm_sq
    }

    pub fn dim(&self) -> usize {
        self.s.len()
    }
}

/// Learnable state of the style encoder `E_s` and the scoring head `E_c`.
#[derive(Clone, Debug, PartialEq)]
pub struct DaqsParams<T> {
    /// `c -> d`.
    pub es_linear: LinearParams<T>,
    pub es_gamma: Vec<T>,
    pub es_beta: Vec<T>,
    /// `d -> num_classes`.
    pub ec_head: LinearParams<T>,
    pub k: usize,
    /// Projection strength used in inference mode.
    pub proj_alpha: f64,
}

impl<T: Real> DaqsParams<T> {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::contract("k must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.proj_alpha) {
            return Err(Error::contract(format!("proj_alpha must lie in [0, 1], got {}", self.proj_alpha)));
        }
        let d = self.es_linear.d_out;
        if self.es_gamma.len() != d || self.es_beta.len() != d {
            return Err(Error::contract("style layer-norm affine must match es_linear output"));
        }
        if self.ec_head.d_in != d {
            return Err(Error::contract(format!(
                "ec_head expects dim {}, style embedding has dim {d}",
                self.ec_head.d_in
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.es_linear.d_out
    }

    pub fn num_classes(&self) -> usize {
        self.ec_head.d_out
    }
}

/// The K chosen tokens of one image, best first.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelectionResult<T> {
    pub indices: Vec<usize>,
    pub queries: QuerySet<T>,
    pub scores: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Projection strength fixed at 1.
    Train,
    /// Projection strength taken from [`DaqsParams::proj_alpha`].
    Infer,
}

/// One style embedding per image: `s = LayerNorm(Linear(mu + sigma))`.
pub fn style_embedding<T: Real>(stats: &ChannelStats<T>, p: &DaqsParams<T>) -> Result<Vec<StyleEmbedding<T>>> {
    if stats.c != p.es_linear.d_in {
        return Err(Error::contract(format!(
            "style encoder expects {} channels, statistics have {}",
            p.es_linear.d_in, stats.c
        )));
    }
    (0..stats.n)
        .map(|n| {
            let z = stats.combined_row(n);
            let a = p.es_linear.apply(&z);
            let s = layer_normalize(&[a], &p.es_gamma, &p.es_beta, T::of(LAYER_NORM_EPS))?
                .pop()
                .expect("one row");
            let r = n * stats.c..(n + 1) * stats.c;
            Ok(StyleEmbedding::new(s, stats.mu[r.clone()].to_vec(), stats.sigma[r].to_vec()))
        })
        .collect()
}

fn projection_active<T: Real>(s: &StyleEmbedding<T>, proj_alpha: T) -> bool {
    proj_alpha != T::zero() && s.norm_sq().as_f64() >= MIN_STYLE_NORM_SQ
}

/// Removes `proj_alpha` times each row's component along `s`.
///
/// A near-zero style vector leaves the tokens unchanged.
pub fn project_out_style<T: Real>(q: &QuerySet<T>, s: &StyleEmbedding<T>, proj_alpha: T) -> Result<QuerySet<T>> {
    if q.d != s.dim() {
        return Err(Error::contract(format!(
            "query dim {} does not match style dim {}",
            q.d,
            s.dim()
        )));
    }
    if !projection_active(s, proj_alpha) {
        return Ok(q.clone());
    }
    let norm_sq = s.norm_sq();
    let mut out = q.clone();
    for row in out.tokens.chunks_mut(q.d) {
        let coeff = proj_alpha * dot(row, &s.s) / norm_sq;
        for (v, &sv) in row.iter_mut().zip(&s.s) {
            *v = *v - coeff * sv;
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of [`project_out_style`]: cotangents on the
/// tokens and on the style vector.
pub fn project_out_style_backward<T: Real>(
    q: &QuerySet<T>,
    s: &StyleEmbedding<T>,
    proj_alpha: T,
    upstream: &QuerySet<T>,
) -> Result<(QuerySet<T>, Vec<T>)> {
    if q.d != s.dim() || upstream.d != q.d || upstream.n_q != q.n_q {
        return Err(Error::contract("project_out_style_backward: shape mismatch"));
    }
    let d = q.d;
    let mut g_q = upstream.clone();
    let mut g_s = vec![T::zero(); d];
    if !projection_active(s, proj_alpha) {
        return Ok((g_q, g_s));
    }
    // J_q = I - alpha s s^T / |s|^2 is symmetric.
    let (sv, norm_sq) = (&s.s, s.norm_sq());
    let two = T::of(2.0);
    for (t, (qrow, grow)) in q.rows().zip(upstream.rows()).enumerate() {
        let qs = dot(qrow, sv);
        let sg = dot(sv, grow);
        for i in 0..d {
            g_q.tokens[t * d + i] = g_q.tokens[t * d + i] - proj_alpha * sv[i] * sg / norm_sq;
            g_s[i] = g_s[i]
                - proj_alpha
                    * ((qrow[i] * sg + qs * grow[i]) / norm_sq - two * qs * sg * sv[i] / (norm_sq * norm_sq));
        }
    }
    Ok((g_q, g_s))
}

/// Gradients of [`style_embedding`] for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingGrads<T> {
    /// Cotangent on `mu + sigma` (equal for both statistics).
    pub combined: Vec<T>,
    pub es_weight: Vec<T>,
    pub es_bias: Vec<T>,
    pub es_gamma: Vec<T>,
    pub es_beta: Vec<T>,
}

/// Vector-Jacobian product of [`style_embedding`] for one image, given
/// its `mu + sigma` row.
pub fn style_embedding_backward<T: Real>(
    combined: &[T],
    p: &DaqsParams<T>,
    upstream: &[T],
) -> Result<EmbeddingGrads<T>> {
    if combined.len() != p.es_linear.d_in || upstream.len() != p.dim() {
        return Err(Error::contract("style_embedding_backward: shape mismatch"));
    }
    let pre_norm = p.es_linear.apply(combined);
    let ln = layer_normalize_backward(&[pre_norm], &p.es_gamma, T::of(LAYER_NORM_EPS), &[upstream.to_vec()])?;
    let lin = linear_backward(&[combined.to_vec()], &p.es_linear, &ln.input)?;
    Ok(EmbeddingGrads {
        combined: lin.input.into_iter().next().expect("one row"),
        es_weight: lin.weight,
        es_bias: lin.bias,
        es_gamma: ln.gamma,
        es_beta: ln.beta_ln,
    })
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Class logits of every token under `E_c`, row-major `n_q x num_classes`.
pub fn token_logits<T: Real>(q: &QuerySet<T>, head: &LinearParams<T>) -> Result<Vec<T>> {
    if q.d != head.d_in {
        return Err(Error::contract(format!("E_c expects dim {}, tokens have {}", head.d_in, q.d)));
    }
    Ok(q.rows().flat_map(|r| head.apply(r)).collect())
}

/// Per-token confidence `max_c sigmoid(logit_c)`, the arg-max class and the
/// max logit. Ranking uses the logit: it orders tokens exactly like the
/// score but does not collapse into ties where the sigmoid saturates.
fn token_scores<T: Real>(logits: &[T], num_classes: usize) -> Vec<(T, usize, T)> {
    logits
        .chunks(num_classes)
        .map(|row| {
            let (best, &z) = row
                .iter()
                .enumerate()
                .fold((0, &row[0]), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
            (sigmoid(z), best, z)
        })
        .collect()
}

/// Indices of the `k` best scores; ties go to the lower index.
pub fn rank_scores<T: Real>(scores: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].as_f64().total_cmp(&scores[a].as_f64()).then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Scores every projected token with `E_c` and keeps the top `k` rows.
pub fn select_topk<T: Real>(q_hat: &QuerySet<T>, p: &DaqsParams<T>) -> Result<SelectionResult<T>> {
    if q_hat.n_q < p.k {
        return Err(Error::contract(format!("cannot select {} of {} tokens", p.k, q_hat.n_q)));
    }
    let logits = token_logits(q_hat, &p.ec_head)?;
    let scored = token_scores(&logits, p.num_classes());
    let scores: Vec<T> = scored.iter().map(|s| s.0).collect();
    let keys: Vec<T> = scored.iter().map(|s| s.2).collect();
    Ok(gather(q_hat, &scores, rank_scores(&keys, p.k)))
}

fn gather<T: Real>(q: &QuerySet<T>, scores: &[T], indices: Vec<usize>) -> SelectionResult<T> {
    let tokens = indices.iter().flat_map(|&i| q.row(i).iter().copied()).collect();
    SelectionResult {
        scores: indices.iter().map(|&i| scores[i]).collect(),
        queries: QuerySet { n_q: indices.len(), d: q.d, tokens },
        indices,
    }
}

/// Per-image intermediates retained for the backward pass.
#[derive(Clone, Debug)]
struct ImageTrace<T> {
    combined: Vec<T>,
    style: StyleEmbedding<T>,
    tokens: QuerySet<T>,
    projected: QuerySet<T>,
    logits: Vec<T>,
    best_class: Vec<usize>,
    indices: Vec<usize>,
}

/// Forward state of [`daqs_forward`]; consumed by [`daqs_backward`].
#[derive(Clone, Debug)]
pub struct DaqsTrace<T> {
    features: FeatureMap<T>,
    stats: ChannelStats<T>,
    params: DaqsParams<T>,
    alpha: T,
    images: Vec<ImageTrace<T>>,
}

impl<T: Real> DaqsTrace<T> {
    /// Unprojected tokens of image `n`, the memory seen by everything but selection.
    pub fn tokens(&self, n: usize) -> &QuerySet<T> {
        &self.images[n].tokens
    }

    pub fn projected(&self, n: usize) -> &QuerySet<T> {
        &self.images[n].projected
    }

    pub fn style(&self, n: usize) -> &StyleEmbedding<T> {
        &self.images[n].style
    }

    /// `E_c` logits of every projected token of image `n`.
    pub fn logits(&self, n: usize) -> &[T] {
        &self.images[n].logits
    }

    pub fn indices(&self, n: usize) -> &[usize] {
        &self.images[n].indices
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn batch(&self) -> usize {
        self.images.len()
    }
}

/// Full selection pipeline in the given mode.
pub fn daqs_forward<T: Real>(
    features: &FeatureMap<T>,
    p: &DaqsParams<T>,
    mode: Mode,
) -> Result<(Vec<SelectionResult<T>>, DaqsTrace<T>)> {
    let alpha = match mode {
        Mode::Train => 1.0,
        Mode::Infer => p.proj_alpha,
    };
    daqs_forward_with(features, p, T::of(alpha), None)
}

/// Pipeline with an explicit projection strength. `forced_indices`, one list
/// per image, replaces the top-K choice (used to hold selection fixed).
pub fn daqs_forward_with<T: Real>(
    features: &FeatureMap<T>,
    p: &DaqsParams<T>,
    alpha: T,
    forced_indices: Option<&[Vec<usize>]>,
) -> Result<(Vec<SelectionResult<T>>, DaqsTrace<T>)> {
    p.validate()?;
    let shape = features.shape();
    if shape.c != p.es_linear.d_in || shape.c != p.dim() {
        return Err(Error::contract(format!(
            "encoder features have {} channels; E_s maps {} -> {}",
            shape.c,
            p.es_linear.d_in,
            p.dim()
        )));
    }
    if shape.plane() < p.k {
        return Err(Error::contract(format!("cannot select {} of {} tokens", p.k, shape.plane())));
    }
    if let Some(f) = forced_indices {
        if f.len() != shape.n || f.iter().flatten().any(|&i| i >= shape.plane()) {
            return Err(Error::contract("forced indices do not match the batch"));
        }
    }
    let stats = channel_stats(features);
    let styles = style_embedding(&stats, p)?;
    let mut results = Vec::with_capacity(shape.n);
    let mut images = Vec::with_capacity(shape.n);
    for (n, style) in styles.into_iter().enumerate() {
        let combined = stats.combined_row(n);
        let tokens = QuerySet::from_feature_map(features, n);
        let projected = project_out_style(&tokens, &style, alpha)?;
        let logits = token_logits(&projected, &p.ec_head)?;
        let scored = token_scores(&logits, p.num_classes());
        let scores: Vec<T> = scored.iter().map(|s| s.0).collect();
        let indices = match forced_indices {
            Some(f) => f[n].clone(),
            None => rank_scores(&scored.iter().map(|s| s.2).collect::<Vec<_>>(), p.k),
        };
        let result = gather(&projected, &scores, indices.clone());
        results.push(result);
        images.push(ImageTrace {
            combined,
            style,
            tokens,
            projected,
            logits,
            best_class: scored.iter().map(|s| s.1).collect(),
            indices,
        });
    }
    let trace = DaqsTrace { features: features.clone(), stats, params: p.clone(), alpha, images };
    Ok((results, trace))
}

/// Upstream cotangents for [`daqs_backward`], one entry per image.
#[derive(Clone, Debug, PartialEq)]
pub struct DaqsCotangent<T> {
    /// `K x d`, row-major, matching [`SelectionResult::queries`].
    pub queries: Vec<Vec<T>>,
    /// `K`, matching [`SelectionResult::scores`].
    pub scores: Vec<Vec<T>>,
    /// Optional `n_q x num_classes` cotangent on all token logits
    /// (an auxiliary loss on `E_c`).
    pub logits: Option<Vec<Vec<T>>>,
}

impl<T: Real> DaqsCotangent<T> {
    pub fn zeros(batch: usize, k: usize, d: usize) -> Self {
        Self { queries: vec![vec![T::zero(); k * d]; batch], scores: vec![vec![T::zero(); k]; batch], logits: None }
    }
}

/// Gradients of [`daqs_forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct DaqsGrads<T> {
    pub features: FeatureMap<T>,
    pub es_weight: Vec<T>,
    pub es_bias: Vec<T>,
    pub es_gamma: Vec<T>,
    pub es_beta: Vec<T>,
    pub ec_weight: Vec<T>,
    pub ec_bias: Vec<T>,
}

/// Reverse pass; the selected index set is held constant.
pub fn daqs_backward<T: Real>(trace: DaqsTrace<T>, upstream: &DaqsCotangent<T>) -> Result<DaqsGrads<T>> {
    let DaqsTrace { features, stats, params: p, alpha, images } = trace;
    let shape: Shape4 = features.shape();
    let (d, nc) = (p.dim(), p.num_classes());
    let batch = images.len();
    let ok_logits = upstream.logits.as_ref().is_none_or(|l| {
        l.len() == batch && l.iter().all(|v| v.len() == shape.plane() * nc)
    });
    if upstream.queries.len() != batch
        || upstream.scores.len() != batch
        || !ok_logits
        || images.iter().zip(&upstream.queries).any(|(im, q)| q.len() != im.indices.len() * d)
        || images.iter().zip(&upstream.scores).any(|(im, s)| s.len() != im.indices.len())
    {
        return Err(Error::contract("daqs_backward: cotangent does not match the forward trace"));
    }

    let mut grads = DaqsGrads {
        features: FeatureMap::zeros(shape),
        es_weight: vec![T::zero(); p.es_linear.weight.len()],
        es_bias: vec![T::zero(); d],
        es_gamma: vec![T::zero(); d],
        es_beta: vec![T::zero(); d],
        ec_weight: vec![T::zero(); p.ec_head.weight.len()],
        ec_bias: vec![T::zero(); nc],
    };
    let mut grad_mu = vec![T::zero(); stats.mu.len()];
    let mut grad_sigma = vec![T::zero(); stats.sigma.len()];

    for (n, im) in images.iter().enumerate() {
        let n_q = im.tokens.n_q;
        let mut g_logits = match &upstream.logits {
            Some(l) => l[n].clone(),
            None => vec![T::zero(); n_q * nc],
        };
        let mut g_proj = vec![T::zero(); n_q * d];

        for (j, &idx) in im.indices.iter().enumerate() {
            let c = im.best_class[idx];
            let sg = sigmoid(im.logits[idx * nc + c]);
            g_logits[idx * nc + c] = g_logits[idx * nc + c] + upstream.scores[n][j] * sg * (T::one() - sg);
            for (dst, &g) in g_proj[idx * d..(idx + 1) * d].iter_mut().zip(&upstream.queries[n][j * d..(j + 1) * d]) {
                *dst = *dst + g;
            }
        }

        // E_c
        for t in 0..n_q {
            let row = im.projected.row(t);
            let gl = &g_logits[t * nc..(t + 1) * nc];
            for (o, &go) in gl.iter().enumerate() {
                if go == T::zero() {
                    continue;
                }
                grads.ec_bias[o] = grads.ec_bias[o] + go;
                let wrow = p.ec_head.row(o);
                for i in 0..d {
                    grads.ec_weight[o * d + i] = grads.ec_weight[o * d + i] + go * row[i];
                    g_proj[t * d + i] = g_proj[t * d + i] + go * wrow[i];
                }
            }
        }

        let g_proj = QuerySet { n_q, d, tokens: g_proj };
        let (g_tokens, g_s) = project_out_style_backward(&im.tokens, &im.style, alpha, &g_proj)?;
        let g_tokens = g_tokens.tokens;

        let emb = style_embedding_backward(&im.combined, &p, &g_s)?;
        for i in 0..d {
            grads.es_gamma[i] = grads.es_gamma[i] + emb.es_gamma[i];
            grads.es_beta[i] = grads.es_beta[i] + emb.es_beta[i];
            grads.es_bias[i] = grads.es_bias[i] + emb.es_bias[i];
        }
        for (dst, &g) in grads.es_weight.iter_mut().zip(&emb.es_weight) {
            *dst = *dst + g;
        }
        for (c, &g) in emb.combined.iter().enumerate() {
            grad_mu[n * shape.c + c] = g;
            grad_sigma[n * shape.c + c] = g;
        }

        // Flatten.
        for c in 0..shape.c {
            let plane = grads.features.plane_mut(n, c);
            for (t, dst) in plane.iter_mut().enumerate() {
                *dst = g_tokens[t * d + c];
            }
        }
    }

    let g_stats = channel_stats_backward(&features, &stats, &grad_mu, &grad_sigma)?;
    for (dst, &g) in grads.features.data_mut().iter_mut().zip(g_stats.data()) {
        *dst = *dst + g;
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::RngStream;

    fn params(c: usize, classes: usize, k: usize, seed: u64) -> DaqsParams<f64> {
        let mut rng = RngStream::new(seed);
        let mut rand = |len: usize| (0..len).map(|_| rng.uniform_range(-0.5, 0.5)).collect::<Vec<_>>();
        DaqsParams {
            es_linear: LinearParams::new(c, c, rand(c * c), rand(c)).unwrap(),
            es_gamma: vec![1.0; c],
            es_beta: vec![0.0; c],
            ec_head: LinearParams::new(c, classes, rand(c * classes), rand(classes)).unwrap(),
            k,
            proj_alpha: 1.0,
        }
    }

    #[test]
    fn constant_statistics_give_zero_style() {
        let stats = ChannelStats { n: 1, c: 3, mu: vec![1.0, 2.0, 0.5], sigma: vec![1.0, 0.0, 1.5] };
        let mut p = params(3, 2, 1, 1);
        p.es_linear = LinearParams::identity(3);
        let s = style_embedding(&stats, &p).unwrap();
        assert!(s[0].s.iter().all(|&v| v == 0.0));
        assert_eq!(s[0].norm_sq(), 0.0);
    }

    #[test]
    fn identity_encoder_two_channels() {
        let stats = ChannelStats { n: 1, c: 2, mu: vec![1.0, 3.0], sigma: vec![1.0, 1.0] };
        let mut p = params(2, 2, 1, 1);
        p.es_linear = LinearParams::identity(2);
        let s = style_embedding(&stats, &p).unwrap();
        assert!((s[0].s[0] + 1.0).abs() < 1e-4 && (s[0].s[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn embedding_dim_follows_encoder_output() {
        let stats = ChannelStats { n: 2, c: 3, mu: vec![0.1; 6], sigma: vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7] };
        let mut p = params(3, 2, 1, 2);
        p.es_linear = LinearParams::new(3, 5, vec![0.1; 15], vec![0.0, 0.1, 0.2, 0.3, 0.4]).unwrap();
        p.es_gamma = vec![1.0; 5];
        p.es_beta = vec![0.0; 5];
        let s = style_embedding(&stats, &p).unwrap();
        assert_eq!((s.len(), s[0].dim()), (2, 5));
        let bad = ChannelStats { n: 1, c: 4, mu: vec![0.0; 4], sigma: vec![0.0; 4] };
        assert!(style_embedding(&bad, &p).is_err());
    }

    #[test]
    fn projection_examples() {
        let s = StyleEmbedding::from_vector(vec![1.0, 0.0]);
        let q = QuerySet::from_rows(&[vec![3.0, 4.0], vec![0.0, 2.0], vec![1.0, 0.0]]).unwrap();
        let half = project_out_style(&q, &s, 0.5).unwrap();
        assert_eq!(half.row(0), &[1.5, 4.0]);
        assert_eq!(half.row(1), &[0.0, 2.0]);
        let full = project_out_style(&q, &s, 1.0).unwrap();
        assert_eq!(full.row(2), &[0.0, 0.0]);
        let bad = QuerySet::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert!(project_out_style(&bad, &s, 1.0).is_err());
    }

    #[test]
    fn zero_style_skips_projection() {
        let s = StyleEmbedding::from_vector(vec![0.0, 1e-7]);
        let q = QuerySet::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(project_out_style(&q, &s, 1.0).unwrap(), q);
    }

    /// One-dim tokens and one class, so each token's logit is its value.
    fn scoring_params(k: usize) -> DaqsParams<f64> {
        DaqsParams {
            es_linear: LinearParams::identity(1),
            es_gamma: vec![1.0],
            es_beta: vec![0.0],
            ec_head: LinearParams::identity(1),
            k,
            proj_alpha: 1.0,
        }
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn topk_ordering() {
        let q = QuerySet::new(3, 1, vec![logit(0.1), logit(0.9), logit(0.5)]).unwrap();
        let p = scoring_params(2);
        let r = select_topk(&q, &p).unwrap();
        assert_eq!(r.indices, vec![1, 2]);
        assert!((r.scores[0] - 0.9).abs() < 1e-12 && (r.scores[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let mut vals = vec![-1.0; 9];
        vals[3] = 2.0;
        vals[7] = 2.0;
        let q = QuerySet::new(9, 1, vals).unwrap();
        let r = select_topk(&q, &scoring_params(1)).unwrap();
        assert_eq!(r.indices, vec![3]);
    }

    #[test]
    fn too_few_tokens() {
        let q = QuerySet::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert!(matches!(select_topk(&q, &scoring_params(3)), Err(Error::Contract(_))));
    }

    fn random_features(shape: Shape4, seed: u64) -> FeatureMap<f64> {
        let mut rng = RngStream::new(seed);
        FeatureMap::from_fn(shape, |_, c, _, _| rng.uniform_range(-1.0, 1.0) + 0.2 * c as f64)
    }

    #[test]
    fn forward_shapes_and_orthogonality() {
        let f = random_features(Shape4::new(2, 8, 4, 4), 3);
        let p = params(8, 3, 3, 4);
        let (res, trace) = daqs_forward(&f, &p, Mode::Train).unwrap();
        assert_eq!(res.len(), 2);
        for (n, r) in res.iter().enumerate() {
            assert_eq!((r.queries.n_q, r.queries.d), (3, 8));
            let s = &trace.style(n).s;
            let sn = dot(s, s).sqrt();
            for row in r.queries.rows() {
                assert!(dot(row, s).abs() <= 1e-5 * dot(row, row).sqrt() * sn + 1e-12);
            }
            assert!(r.scores.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn zero_alpha_matches_plain_selection() {
        let f = random_features(Shape4::new(1, 8, 4, 4), 5);
        let mut p = params(8, 3, 4, 6);
        p.proj_alpha = 0.0;
        let (res, _) = daqs_forward(&f, &p, Mode::Infer).unwrap();
        let plain = select_topk(&QuerySet::from_feature_map(&f, 0), &p).unwrap();
        assert_eq!(res[0], plain);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let f = random_features(Shape4::new(1, 4, 4, 4), 7);
        let p = params(4, 2, 3, 8);
        let (_, trace) = daqs_forward(&f, &p, Mode::Train).unwrap();
        let g = daqs_backward(trace, &DaqsCotangent::zeros(1, 3, 4)).unwrap();
        assert!(g.features.data().iter().all(|&v| v == 0.0));
        assert!(g.es_weight.iter().chain(&g.ec_weight).all(|&v| v == 0.0));
    }

    #[test]
    fn zero_alpha_backward_is_gather() {
        let f = random_features(Shape4::new(1, 4, 4, 4), 9);
        let mut p = params(4, 2, 3, 10);
        p.proj_alpha = 0.0;
        let (res, trace) = daqs_forward(&f, &p, Mode::Infer).unwrap();
        let mut up = DaqsCotangent::zeros(1, 3, 4);
        let mut rng = RngStream::new(1);
        for v in up.queries[0].iter_mut() {
            *v = rng.normal();
        }
        let g = daqs_backward(trace, &up).unwrap();
        let mut expected = FeatureMap::<f64>::zeros(f.shape());
        for (j, &idx) in res[0].indices.iter().enumerate() {
            for c in 0..4 {
                expected.plane_mut(0, c)[idx] += up.queries[0][j * 4 + c];
            }
        }
        assert!(g.features.max_abs_diff(&expected).unwrap() < 1e-14);
    }

    #[test]
    fn mismatched_cotangent_is_rejected() {
        let f = random_features(Shape4::new(1, 4, 4, 4), 7);
        let p = params(4, 2, 3, 8);
        let (_, trace) = daqs_forward(&f, &p, Mode::Train).unwrap();
        assert!(daqs_backward(trace, &DaqsCotangent::zeros(1, 2, 4)).is_err());
    }
}
