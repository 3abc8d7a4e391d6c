//! Non-isotropy regularization: the flow negative log-likelihood of
//! embeddings around their class proxy, the combined objective with a
//! proxy loss, and the generative self-regularization variants.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::embedding::{normalize_rows, normalize_rows_backward, EmbeddingBatch, ProxySet};
use crate::error::{NirError, Result};
use crate::flow::{sample_residual_with, ConditionalFlow};
use crate::losses::{DmlLoss, LossValueWithGrads};

/// Monotone scaling `f` applied to the NIR term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scaling {
    /// `exp(min(L, clamp))`
    Exp,
    /// `exp(min(L, clamp) / t)`
    ExpTemperature(f64),
    /// `log(1 + exp(L))`
    Softplus,
}

impl Scaling {
    /// Value and derivative of `f` at `l`.
    pub fn apply(self, l: f64, clamp: f64) -> (f64, f64) {
        if l.is_nan() {
            return (f64::NAN, f64::NAN);
        }
        match self {
            Scaling::Exp => {
                let v = l.min(clamp).exp();
                (v, if l < clamp { v } else { 0.0 })
            }
            Scaling::ExpTemperature(t) => {
                let v = (l.min(clamp) / t).exp();
                (v, if l < clamp { v / t } else { 0.0 })
            }
            Scaling::Softplus => {
                let v = if l > 30.0 { l + (-l).exp().ln_1p() } else { l.exp().ln_1p() };
                (v, 1.0 / (1.0 + (-l).exp()))
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scaling::Exp => "exp",
            Scaling::ExpTemperature(_) => "exp_temperature",
            Scaling::Softplus => "softplus",
        }
    }
}

/// Configuration of the regularizer inside the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NirConfig {
    pub omega: f64,
    pub scaling: Scaling,
    pub exponent_clamp: f64,
    pub proxy_backprop: bool,
    /// Weight of the negative-pair NLL maximization; `None` disables it.
    pub negative_pairs: Option<f64>,
    pub grad_clip: Option<f64>,
}

impl Default for NirConfig {
    fn default() -> Self {
        Self {
            omega: 0.005,
            scaling: Scaling::Exp,
            exponent_clamp: 50.0,
            proxy_backprop: true,
            negative_pairs: None,
            grad_clip: None,
        }
    }
}

impl NirConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega >= 0.0) {
            return Err(NirError::InvalidConfig(format!("omega must be >= 0, got {}", self.omega)));
        }
        if let Scaling::ExpTemperature(t) = self.scaling {
            if !(t > 0.0) {
                return Err(NirError::InvalidConfig(format!("temperature must be > 0, got {t}")));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(NirError::InvalidConfig(format!("grad_clip must be > 0, got {c}")));
            }
        }
        Ok(())
    }
}

/// Synthetic-sample self-regularization variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SelfRegMode {
    #[default]
    Off,
    /// Proxy loss on detached synthetic samples; only proxies learn.
    Generate,
    /// Proxy loss with proxies held fixed; only the flow learns.
    ReverseMatch,
    /// Both proxies and flow learn.
    GenerateAndMatch,
}

impl SelfRegMode {
    pub const ALL: [SelfRegMode; 4] = [
        SelfRegMode::Off,
        SelfRegMode::Generate,
        SelfRegMode::ReverseMatch,
        SelfRegMode::GenerateAndMatch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SelfRegMode::Off => "off",
            SelfRegMode::Generate => "generate",
            SelfRegMode::ReverseMatch => "reverse_match",
            SelfRegMode::GenerateAndMatch => "generate_and_match",
        }
    }
}

impl fmt::Display for SelfRegMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SelfRegMode {
    type Err = NirError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| NirError::InvalidConfig(format!("unknown self-regularization mode '{s}'")))
    }
}

/// Adds per-sample condition gradients onto the proxy rows they came from.
fn scatter_to_proxies(d_cond: &Array2<f64>, labels: &[usize], num_proxies: usize) -> Array2<f64> {
    let mut out = Array2::zeros((num_proxies, d_cond.ncols()));
    for (i, &y) in labels.iter().enumerate() {
        let mut row = out.row_mut(y);
        row += &d_cond.row(i);
    }
    out
}

/// Per-sample `|zeta|^2 - logdet_inv` for sample-proxy pairs given by
/// `proxy_index`, plus the gradient of `sum_i weights_i * nll_i`.
fn weighted_pair_nll(
    batch: &EmbeddingBatch,
    proxies: &ProxySet,
    proxy_index: &[usize],
    flow: &ConditionalFlow,
    weights: impl Fn(&Array1<f64>) -> Array1<f64>,
) -> Result<(Array1<f64>, LossValueWithGrads)> {
    let rho = proxies.gather(proxy_index);
    let mut nll = Array1::zeros(0);
    let mut total = 0.0;
    let (_, _, grads) = flow.inverse_backward(batch.data.view(), rho.view(), |z, ld| {
        nll = z.map_axis(Axis(1), |r| r.dot(&r)) - ld;
        let w = weights(&nll);
        total = (&w * &nll).sum();
        (z * &(&w * 2.0).insert_axis(Axis(1)), -w)
    })?;
    Ok((
        nll,
        LossValueWithGrads {
            value: total,
            d_embeddings: grads.d_input,
            d_proxies: scatter_to_proxies(&grads.d_cond, proxy_index, proxies.len()),
            d_flow: Some(grads.d_params),
        },
    ))
}

/// Flow negative log-likelihood of each embedding given its class proxy:
/// `mean_i |tau^{-1}(psi_i | rho_{y_i})|^2 - log|det J_{tau^{-1}}|`.
/// Proxy gradients (through the flow condition) are always reported.
pub fn nir_loss(batch: &EmbeddingBatch, proxies: &ProxySet, flow: &ConditionalFlow) -> Result<LossValueWithGrads> {
    if batch.is_empty() {
        return Err(NirError::EmptyBatch);
    }
    batch.check_against(proxies)?;
    let inv_n = 1.0 / batch.len() as f64;
    let (_, loss) = weighted_pair_nll(batch, proxies, &batch.labels, flow, |nll| {
        Array1::from_elem(nll.len(), inv_n)
    })?;
    Ok(loss)
}

/// Exact Gaussian negative log-likelihood (nats per sample) of `psi`
/// under the flow pushforward of `N(0, I)`, with its gradients.
pub fn gaussian_nll(psi: &Array2<f64>, rho: &Array2<f64>, flow: &ConditionalFlow) -> Result<(f64, Array2<f64>, Vec<f64>)> {
    let n = psi.nrows() as f64;
    let d = psi.ncols() as f64;
    let mut value = 0.0;
    let (_, _, grads) = flow.inverse_backward(psi.view(), rho.view(), |z, ld| {
        let sq: f64 = z.iter().map(|v| v * v).sum();
        value = (0.5 * sq - ld.sum()) / n + 0.5 * d * (2.0 * std::f64::consts::PI).ln();
        (z / n, Array1::from_elem(ld.len(), -1.0 / n))
    })?;
    Ok((value, grads.d_input, grads.d_params))
}

/// One uniformly drawn non-matching proxy per sample; the term is
/// `-weight * mean_i min(nll_i, clamp)` so that maximizing the negative
/// NLL stays bounded.
pub fn nir_negative_pair_term<R: Rng + ?Sized>(
    batch: &EmbeddingBatch,
    proxies: &ProxySet,
    flow: &ConditionalFlow,
    weight: f64,
    clamp: f64,
    rng: &mut R,
) -> Result<LossValueWithGrads> {
    let c = proxies.len();
    if c < 2 {
        return Err(NirError::NoNegativeProxies(c));
    }
    if batch.is_empty() {
        return Err(NirError::EmptyBatch);
    }
    batch.check_against(proxies)?;
    let negatives: Vec<usize> = batch
        .labels
        .iter()
        .map(|&y| {
            let k = rng.random_range(0..c - 1);
            if k >= y {
                k + 1
            } else {
                k
            }
        })
        .collect();
    if weight == 0.0 {
        let mut zero = LossValueWithGrads::zeros(batch.len(), c, batch.dim());
        zero.d_flow = Some(vec![0.0; flow.num_params()]);
        return Ok(zero);
    }
    let scale = -weight / batch.len() as f64;
    let (nll, mut loss) = weighted_pair_nll(batch, proxies, &negatives, flow, |nll| {
        nll.mapv(|v| if v < clamp { scale } else { 0.0 })
    })?;
    // value of the clamped term; clamped pairs contribute a constant
    loss.value = scale * nll.iter().map(|&v| v.min(clamp)).sum::<f64>();
    Ok(loss)
}

/// Value of the combined objective with its separate components.
#[derive(Debug, Clone)]
pub struct CombinedObjective {
    pub total: LossValueWithGrads,
    pub nir: f64,
    pub pdml: f64,
    pub negative: f64,
}

/// `f(L_nir) + omega * L_pdml`, plus the negative-pair term when enabled.
pub fn combined_objective<R: Rng + ?Sized>(
    batch: &EmbeddingBatch,
    proxies: &ProxySet,
    flow: &ConditionalFlow,
    dml: &DmlLoss,
    cfg: &NirConfig,
    rng: &mut R,
) -> Result<CombinedObjective> {
    cfg.validate()?;
    let mut nir = nir_loss(batch, proxies, flow)?;
    let l_nir = nir.value;
    let (f_val, f_grad) = cfg.scaling.apply(l_nir, cfg.exponent_clamp);
    nir.scale(f_grad);
    nir.value = f_val;
    if !cfg.proxy_backprop {
        nir.d_proxies.fill(0.0);
    }

    let mut total = nir;
    let mut pdml = 0.0;
    if cfg.omega > 0.0 {
        let l = dml.evaluate(batch, proxies)?;
        pdml = l.value;
        total.add_scaled(&l, cfg.omega);
    }

    let mut negative = 0.0;
    if let Some(weight) = cfg.negative_pairs {
        let mut neg = nir_negative_pair_term(batch, proxies, flow, weight, cfg.exponent_clamp, rng)?;
        if !cfg.proxy_backprop {
            neg.d_proxies.fill(0.0);
        }
        negative = neg.value;
        total.add_scaled(&neg, 1.0);
    }

    Ok(CombinedObjective {
        total,
        nir: l_nir,
        pdml,
        negative,
    })
}

/// Synthetic embeddings generated by pushing residuals through the flow.
#[derive(Debug, Clone)]
pub struct SyntheticSamples {
    pub batch: EmbeddingBatch,
    pub residuals: Array2<f64>,
}

/// `psi_s = normalize(tau(zeta | rho_c))` with `zeta ~ N(0, I)`,
/// `per_class` samples for every proxy.
pub fn generate_synthetic(
    proxies: &ProxySet,
    per_class: usize,
    flow: &ConditionalFlow,
    seed: u64,
) -> Result<SyntheticSamples> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<usize> = proxies.class_ids().collect();
    generate_synthetic_for(proxies, &classes, per_class, flow, &mut rng)
}

/// As [`generate_synthetic`], restricted to the given classes.
pub fn generate_synthetic_for<R: Rng + ?Sized>(
    proxies: &ProxySet,
    classes: &[usize],
    per_class: usize,
    flow: &ConditionalFlow,
    rng: &mut R,
) -> Result<SyntheticSamples> {
    let labels: Vec<usize> = classes
        .iter()
        .flat_map(|&c| std::iter::repeat_n(c, per_class))
        .collect();
    if let Some(&y) = labels.iter().find(|&&y| y >= proxies.len()) {
        return Err(NirError::MissingProxy(y));
    }
    let residuals = sample_residual_with(labels.len(), proxies.dim(), rng);
    let rho = proxies.gather(&labels);
    let (mut psi, _) = flow.forward(residuals.view(), rho.view())?;
    normalize_rows(&mut psi)?;
    Ok(SyntheticSamples {
        batch: EmbeddingBatch::new(psi, labels)?,
        residuals,
    })
}

/// Proxy loss on synthetic samples with the gradient routing of `mode`.
pub fn self_reg_loss(
    mode: SelfRegMode,
    synthetic: &SyntheticSamples,
    proxies: &ProxySet,
    flow: &ConditionalFlow,
    dml: &DmlLoss,
) -> Result<LossValueWithGrads> {
    let batch = &synthetic.batch;
    let mut out = LossValueWithGrads::zeros(batch.len(), proxies.len(), proxies.dim());
    out.d_flow = Some(vec![0.0; flow.num_params()]);
    if mode == SelfRegMode::Off {
        return Ok(out);
    }
    if batch.is_empty() {
        return Err(NirError::EmptySynthetic);
    }
    let l = dml.evaluate(batch, proxies)?;
    out.value = l.value;
    if matches!(mode, SelfRegMode::Generate | SelfRegMode::GenerateAndMatch) {
        out.d_proxies = l.d_proxies.clone();
    }
    if matches!(mode, SelfRegMode::ReverseMatch | SelfRegMode::GenerateAndMatch) {
        let rho = proxies.gather(&batch.labels);
        let (_, _, grads) = flow.forward_backward(synthetic.residuals.view(), rho.view(), |raw, ld| {
            let g = normalize_rows_backward(raw.view(), batch.data.view(), l.d_embeddings.view());
            (g, Array1::zeros(ld.len()))
        })?;
        out.d_embeddings = l.d_embeddings;
        out.d_flow = Some(grads.d_params);
        if mode == SelfRegMode::GenerateAndMatch {
            out.d_proxies += &scatter_to_proxies(&grads.d_cond, &batch.labels, proxies.len());
        }
    }
    Ok(out)
}
