//! Embedding-space data model: unit-hypersphere batches, class proxies,
//! cosine similarity and the vMF mixture posterior over proxies.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{NirError, Result};

const ZERO_NORM: f64 = 1e-12;

/// A batch of sample representations with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub data: Array2<f64>,
    pub labels: Vec<usize>,
}

impl EmbeddingBatch {
    /// Wraps rows as-is. Rows are expected to be unit-norm already.
    pub fn new(data: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if data.nrows() != labels.len() {
            return Err(NirError::DimensionMismatch {
                what: "labels vs rows",
                expected: data.nrows(),
                got: labels.len(),
            });
        }
        Ok(Self { data, labels })
    }

    /// Normalizes every row onto the unit hypersphere.
    pub fn normalized(mut data: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        normalize_rows(&mut data)?;
        Self::new(data, labels)
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Number of distinct labels.
    pub fn num_classes(&self) -> usize {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    }

    /// Checks that every label has a proxy row and dimensions agree.
    pub fn check_against(&self, proxies: &ProxySet) -> Result<()> {
        if self.dim() != proxies.dim() {
            return Err(NirError::DimensionMismatch {
                what: "embedding vs proxy dimension",
                expected: proxies.dim(),
                got: self.dim(),
            });
        }
        match self.labels.iter().find(|&&y| y >= proxies.len()) {
            Some(&y) => Err(NirError::MissingProxy(y)),
            None => Ok(()),
        }
    }

    /// Selects a subset of rows.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            data: self.data.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// One learnable proxy per class; row `c` belongs to class id `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxySet {
    pub proxies: Array2<f64>,
}

impl ProxySet {
    pub fn new(proxies: Array2<f64>) -> Result<Self> {
        if proxies.nrows() == 0 {
            return Err(NirError::InsufficientClasses {
                needed: 1,
                available: 0,
            });
        }
        Ok(Self { proxies })
    }

    /// I.i.d. standard normal entries, l2-normalized per row.
    pub fn random<R: Rng + ?Sized>(num_classes: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let mut p = Array2::from_shape_simple_fn((num_classes, dim), || {
            rng.sample::<f64, _>(StandardNormal)
        });
        normalize_rows(&mut p)?;
        Self::new(p)
    }

    pub fn len(&self) -> usize {
        self.proxies.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.proxies.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.proxies.ncols()
    }

    pub fn class_ids(&self) -> std::ops::Range<usize> {
        0..self.len()
    }

    /// Proxy rows gathered by label, one per sample.
    pub fn gather(&self, labels: &[usize]) -> Array2<f64> {
        self.proxies.select(Axis(0), labels)
    }

    /// Projects every proxy back onto the sphere (applied after each update).
    pub fn renormalize(&mut self) -> Result<()> {
        normalize_rows(&mut self.proxies)
    }
}

/// Class-independent vMF concentration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VmfConfig {
    pub kappa: f64,
}

impl VmfConfig {
    pub fn new(kappa: f64) -> Result<Self> {
        if !(kappa > 0.0) || !kappa.is_finite() {
            return Err(NirError::InvalidConfig(format!(
                "vmf kappa must be positive, got {kappa}"
            )));
        }
        Ok(Self { kappa })
    }
}

pub fn l2_normalize(v: ArrayView1<f64>) -> Result<Array1<f64>> {
    let norm = v.dot(&v).sqrt();
    if !(norm >= ZERO_NORM) {
        return Err(NirError::ZeroVector(norm));
    }
    Ok(v.mapv(|x| x / norm))
}

/// In-place row normalization.
pub fn normalize_rows(m: &mut Array2<f64>) -> Result<()> {
    for mut row in m.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if !(norm >= ZERO_NORM) {
            return Err(NirError::ZeroVector(norm));
        }
        row.mapv_inplace(|x| x / norm);
    }
    Ok(())
}

/// Vector-Jacobian product of row normalization `u = z / |z|`:
/// `dz = (du - u <u, du>) / |z|`.
pub fn normalize_rows_backward(
    raw: ArrayView2<f64>,
    unit: ArrayView2<f64>,
    grad_unit: ArrayView2<f64>,
) -> Array2<f64> {
    let mut out = Array2::zeros(raw.raw_dim());
    for (i, mut g) in out.rows_mut().into_iter().enumerate() {
        let z = raw.row(i);
        let u = unit.row(i);
        let gu = grad_unit.row(i);
        let norm = z.dot(&z).sqrt();
        let proj = u.dot(&gu);
        g.assign(&((&gu - &(&u * proj)) / norm));
    }
    out
}

/// `S[i, j] = <a_i, b_j>`; cosine similarity for unit rows.
pub fn cosine_similarity_matrix(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(NirError::DimensionMismatch {
            what: "similarity operand columns",
            expected: a.ncols(),
            got: b.ncols(),
        });
    }
    Ok(a.dot(&b.t()))
}

/// Mixture posterior over proxies for one sample. The vMF normalizer and
/// the uniform mixture weights cancel, leaving `softmax(kappa * s(psi, rho))`.
pub fn vmf_posterior(psi: ArrayView1<f64>, proxies: &ProxySet, cfg: VmfConfig) -> Result<Array1<f64>> {
    if psi.len() != proxies.dim() {
        return Err(NirError::DimensionMismatch {
            what: "sample vs proxy dimension",
            expected: proxies.dim(),
            got: psi.len(),
        });
    }
    let logits = proxies.proxies.dot(&psi) * cfg.kappa;
    Ok(softmax(logits.view()))
}

pub(crate) fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = logits.mapv(|x| (x - m).exp());
    let z = e.sum();
    e / z
}

/// Stable `log(sum(exp(x)))`; `-inf` for an empty input.
pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}
