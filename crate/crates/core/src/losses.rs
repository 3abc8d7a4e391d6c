//! Proxy-based metric learning objectives with analytic gradients.
//!
//! Every loss is a function of the sample-proxy similarity matrix
//! `S = X P^T`, so each implementation produces `dL/dS` and the gradients
//! with respect to embeddings and proxies follow from `dS P` and `dS^T X`.
//! Gradients treat rows as free vectors; the sphere constraint is handled
//! upstream by the embedder's normalization and proxy re-normalization.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use crate::embedding::{log_sum_exp, EmbeddingBatch, ProxySet};
use crate::error::{NirError, Result};

/// ProxyAnchor scale `alpha` and margin `delta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxyAnchorParams {
    pub alpha: f64,
    pub delta: f64,
}

impl Default for ProxyAnchorParams {
    fn default() -> Self {
        Self {
            alpha: 32.0,
            delta: 0.1,
        }
    }
}

impl ProxyAnchorParams {
    pub fn new(alpha: f64, delta: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(NirError::InvalidConfig(format!(
                "proxy anchor alpha must be positive, got {alpha}"
            )));
        }
        Ok(Self { alpha, delta })
    }
}

/// Loss value plus gradients. `d_flow` is only populated by objectives
/// that involve the conditional flow.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValueWithGrads {
    pub value: f64,
    pub d_embeddings: Array2<f64>,
    pub d_proxies: Array2<f64>,
    pub d_flow: Option<Vec<f64>>,
}

impl LossValueWithGrads {
    pub fn zeros(n: usize, c: usize, d: usize) -> Self {
        Self {
            value: 0.0,
            d_embeddings: Array2::zeros((n, d)),
            d_proxies: Array2::zeros((c, d)),
            d_flow: None,
        }
    }

    /// `self += weight * other`, including flow gradients when present.
    pub fn add_scaled(&mut self, other: &LossValueWithGrads, weight: f64) {
        self.value += weight * other.value;
        self.d_embeddings.scaled_add(weight, &other.d_embeddings);
        self.d_proxies.scaled_add(weight, &other.d_proxies);
        if let Some(of) = &other.d_flow {
            let f = self.d_flow.get_or_insert_with(|| vec![0.0; of.len()]);
            for (a, b) in f.iter_mut().zip(of) {
                *a += weight * b;
            }
        }
    }

    pub fn scale(&mut self, weight: f64) {
        self.value *= weight;
        self.d_embeddings.mapv_inplace(|g| g * weight);
        self.d_proxies.mapv_inplace(|g| g * weight);
        if let Some(f) = &mut self.d_flow {
            f.iter_mut().for_each(|g| *g *= weight);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.d_embeddings.iter().all(|g| g.is_finite())
            && self.d_proxies.iter().all(|g| g.is_finite())
            && self
                .d_flow
                .as_ref()
                .is_none_or(|f| f.iter().all(|g| g.is_finite()))
    }
}

/// Which proxy objective to optimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProxyLossKind {
    ProxyNca,
    ProxyNcaPp,
    ProxyAnchor,
    ProxyNcaStar,
}

impl ProxyLossKind {
    pub const ALL: [ProxyLossKind; 4] = [
        ProxyLossKind::ProxyNca,
        ProxyLossKind::ProxyNcaPp,
        ProxyLossKind::ProxyAnchor,
        ProxyLossKind::ProxyNcaStar,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProxyLossKind::ProxyNca => "proxy_nca",
            ProxyLossKind::ProxyNcaPp => "proxy_nca_pp",
            ProxyLossKind::ProxyAnchor => "proxy_anchor",
            ProxyLossKind::ProxyNcaStar => "proxy_nca_star",
        }
    }
}

impl fmt::Display for ProxyLossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProxyLossKind {
    type Err = NirError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| NirError::InvalidConfig(format!("unknown proxy loss '{s}'")))
    }
}

/// A selected proxy objective together with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DmlLoss {
    pub kind: ProxyLossKind,
    pub params: ProxyAnchorParams,
}

impl Default for DmlLoss {
    fn default() -> Self {
        Self {
            kind: ProxyLossKind::ProxyAnchor,
            params: ProxyAnchorParams::default(),
        }
    }
}

impl DmlLoss {
    pub fn evaluate(&self, batch: &EmbeddingBatch, proxies: &ProxySet) -> Result<LossValueWithGrads> {
        match self.kind {
            ProxyLossKind::ProxyNca => proxy_nca(batch, proxies),
            ProxyLossKind::ProxyNcaPp => proxy_nca_pp(batch, proxies),
            ProxyLossKind::ProxyAnchor => proxy_anchor(batch, proxies, self.params),
            ProxyLossKind::ProxyNcaStar => proxy_nca_star(batch, proxies, self.params),
        }
    }
}

fn similarities(batch: &EmbeddingBatch, proxies: &ProxySet) -> Result<Array2<f64>> {
    batch.check_against(proxies)?;
    Ok(batch.data.dot(&proxies.proxies.t()))
}

fn finish(value: f64, ds: Array2<f64>, batch: &EmbeddingBatch, proxies: &ProxySet) -> LossValueWithGrads {
    LossValueWithGrads {
        value,
        d_embeddings: ds.dot(&proxies.proxies),
        d_proxies: ds.t().dot(&batch.data),
        d_flow: None,
    }
}

/// `log(1 + sum(exp(a)))` and the weights `exp(a_k) / (1 + sum(exp(a)))`.
fn softplus_sum(args: &[f64]) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(std::iter::once(0.0).chain(args.iter().copied()));
    (lse, args.iter().map(|a| (a - lse).exp()).collect())
}

/// ProxyNCA: the positive proxy is contrasted against the non-matching
/// proxies only.
pub fn proxy_nca(batch: &EmbeddingBatch, proxies: &ProxySet) -> Result<LossValueWithGrads> {
    let c = proxies.len();
    if c < 2 {
        return Err(NirError::NoNegativeProxies(c));
    }
    if batch.is_empty() {
        return Err(NirError::EmptyBatch);
    }
    let s = similarities(batch, proxies)?;
    let n = batch.len() as f64;
    let mut ds = Array2::zeros(s.raw_dim());
    let mut total = 0.0;
    for (i, &y) in batch.labels.iter().enumerate() {
        let row = s.row(i);
        let negs = (0..c).filter(|&k| k != y).map(|k| row[k]);
        let lse = log_sum_exp(negs);
        total += lse - row[y];
        ds[[i, y]] -= 1.0 / n;
        for k in (0..c).filter(|&k| k != y) {
            ds[[i, k]] += (row[k] - lse).exp() / n;
        }
    }
    Ok(finish(total / n, ds, batch, proxies))
}

/// ProxyNCA++: negative log of the softmax over all proxies, i.e. the
/// vMF mixture negative log-likelihood at unit concentration.
pub fn proxy_nca_pp(batch: &EmbeddingBatch, proxies: &ProxySet) -> Result<LossValueWithGrads> {
    if batch.is_empty() {
        return Err(NirError::EmptyBatch);
    }
    let s = similarities(batch, proxies)?;
    let c = proxies.len();
    let n = batch.len() as f64;
    let mut ds = Array2::zeros(s.raw_dim());
    let mut total = 0.0;
    for (i, &y) in batch.labels.iter().enumerate() {
        let row = s.row(i);
        let lse = log_sum_exp(row.iter().copied());
        total += lse - row[y];
        for k in 0..c {
            ds[[i, k]] = (row[k] - lse).exp() / n;
        }
        ds[[i, y]] -= 1.0 / n;
    }
    Ok(finish(total / n, ds, batch, proxies))
}

/// ProxyAnchor: per-proxy log-sum-exp over positive samples (averaged over
/// proxies with positives in the batch) plus over negative samples
/// (averaged over all proxies).
pub fn proxy_anchor(
    batch: &EmbeddingBatch,
    proxies: &ProxySet,
    p: ProxyAnchorParams,
) -> Result<LossValueWithGrads> {
    if batch.is_empty() {
        return Err(NirError::EmptyBatch);
    }
    let s = similarities(batch, proxies)?;
    let c = proxies.len();
    let mut ds = Array2::zeros(s.raw_dim());

    let mut pos_proxies = 0usize;
    let mut pos_total = 0.0;
    let mut pos_grads = Vec::new();
    let mut neg_total = 0.0;
    for k in 0..c {
        let pos: Vec<usize> = (0..batch.len()).filter(|&i| batch.labels[i] == k).collect();
        let neg: Vec<usize> = (0..batch.len()).filter(|&i| batch.labels[i] != k).collect();

        if !pos.is_empty() {
            pos_proxies += 1;
            let args: Vec<f64> = pos.iter().map(|&i| -p.alpha * (s[[i, k]] - p.delta)).collect();
            let (v, w) = softplus_sum(&args);
            pos_total += v;
            pos_grads.push((k, pos, w));
        }

        let args: Vec<f64> = neg.iter().map(|&i| p.alpha * (s[[i, k]] + p.delta)).collect();
        let (v, w) = softplus_sum(&args);
        neg_total += v;
        for (&i, wi) in neg.iter().zip(w) {
            ds[[i, k]] += p.alpha * wi / c as f64;
        }
    }
    for (k, pos, w) in pos_grads {
        for (&i, wi) in pos.iter().zip(w) {
            ds[[i, k]] -= p.alpha * wi / pos_proxies as f64;
        }
    }
    let value = pos_total / pos_proxies as f64 + neg_total / c as f64;
    Ok(finish(value, ds, batch, proxies))
}

/// ProxyNCA in ProxyAnchor form: per-sample positive softplus term plus a
/// per-sample log-sum-exp over all non-matching proxies. Every sample
/// counts as positive, so both terms are averaged over the batch.
pub fn proxy_nca_star(
    batch: &EmbeddingBatch,
    proxies: &ProxySet,
    p: ProxyAnchorParams,
) -> Result<LossValueWithGrads> {
    if batch.is_empty() {
        return Err(NirError::EmptyBatch);
    }
    let s = similarities(batch, proxies)?;
    let c = proxies.len();
    let n = batch.len() as f64;
    let mut ds = Array2::zeros(s.raw_dim());
    let mut total = 0.0;
    for (i, &y) in batch.labels.iter().enumerate() {
        let (v, w) = softplus_sum(&[-p.alpha * (s[[i, y]] - p.delta)]);
        total += v;
        ds[[i, y]] -= p.alpha * w[0] / n;

        let negs: Vec<usize> = (0..c).filter(|&k| k != y).collect();
        let args: Vec<f64> = negs.iter().map(|&k| p.alpha * (s[[i, k]] + p.delta)).collect();
        let (v, w) = softplus_sum(&args);
        total += v;
        for (&k, wk) in negs.iter().zip(w) {
            ds[[i, k]] += p.alpha * wk / n;
        }
    }
    Ok(finish(total / n, ds, batch, proxies))
}
