//! Retrieval metrics (Recall@K, NMI, mAP@1000) and structural metrics of
//! the embedding space (spectral decay, density ratio, uniformity and
//! class-concentration variance).

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingBatch;
use crate::error::{NirError, Result};

const SPECTRUM_FLOOR: f64 = 1e-12;
const MAP_CUTOFF: usize = 1000;

/// All metrics of one evaluation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub nmi: f64,
    pub map_at_1000: f64,
    pub spectral_decay: f64,
    pub pi_density: f64,
    pub uniformity_g2: f64,
    pub concentration_variance: f64,
}

impl MetricsReport {
    pub fn compute(batch: &EmbeddingBatch, ks: &[usize], nmi_seed: u64) -> Result<Self> {
        Ok(Self {
            recall_at: recall_at_k(batch, ks)?,
            nmi: nmi(batch, nmi_seed)?,
            map_at_1000: map_at_1000(batch)?,
            spectral_decay: spectral_decay(batch)?,
            pi_density: pi_density(batch)?,
            uniformity_g2: uniformity_g2(batch)?,
            concentration_variance: concentration_variance(batch)?,
        })
    }

    pub fn recall_at_1(&self) -> f64 {
        self.recall_at.get(&1).copied().unwrap_or(f64::NAN)
    }

    pub fn is_finite(&self) -> bool {
        self.recall_at.values().all(|v| v.is_finite())
            && [
                self.nmi,
                self.map_at_1000,
                self.spectral_decay,
                self.pi_density,
                self.uniformity_g2,
                self.concentration_variance,
            ]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Neighbors of `query` sorted by decreasing similarity (ties by index),
/// excluding the query itself.
fn ranking(sims: ArrayView1<f64>, query: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..sims.len()).filter(|&j| j != query).collect();
    idx.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    idx
}

fn check_retrieval(batch: &EmbeddingBatch) -> Result<Array2<f64>> {
    if batch.len() < 2 {
        return Err(NirError::EmptyBatch);
    }
    Ok(batch.data.dot(&batch.data.t()))
}

/// Fraction of queries with a same-class sample among their top-K cosine
/// neighbors, for every K in `ks`.
pub fn recall_at_k(batch: &EmbeddingBatch, ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let sims = check_retrieval(batch)?;
    let first_hit: Vec<Option<usize>> = (0..batch.len())
        .into_par_iter()
        .map(|q| {
            ranking(sims.row(q), q)
                .iter()
                .position(|&j| batch.labels[j] == batch.labels[q])
        })
        .collect();
    let n = batch.len() as f64;
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = first_hit.iter().filter(|r| r.is_some_and(|r| r < k)).count();
            (k, hits as f64 / n)
        })
        .collect())
}

/// Mean average precision over rankings truncated at 1000, normalized by
/// `min(#relevant, 1000)`. Queries without any relevant item score 0.
pub fn map_at_1000(batch: &EmbeddingBatch) -> Result<f64> {
    let sims = check_retrieval(batch)?;
    let aps: Vec<f64> = (0..batch.len())
        .into_par_iter()
        .map(|q| {
            let y = batch.labels[q];
            let relevant = batch.labels.iter().enumerate().filter(|&(j, &l)| j != q && l == y).count();
            if relevant == 0 {
                return 0.0;
            }
            let mut hits = 0usize;
            let mut sum = 0.0;
            for (rank, &j) in ranking(sims.row(q), q).iter().take(MAP_CUTOFF).enumerate() {
                if batch.labels[j] == y {
                    hits += 1;
                    sum += hits as f64 / (rank + 1) as f64;
                }
            }
            sum / relevant.min(MAP_CUTOFF) as f64
        })
        .collect();
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Lloyd's K-means with k-means++ seeding. Returns assignments and inertia.
pub fn kmeans<R: Rng + ?Sized>(data: &Array2<f64>, k: usize, max_iter: usize, rng: &mut R) -> (Vec<usize>, f64) {
    let n = data.nrows();
    let sqdist = |a: ArrayView1<f64>, b: ArrayView1<f64>| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();

    let mut centers = Array2::zeros((k, data.ncols()));
    centers.row_mut(0).assign(&data.row(rng.random_range(0..n)));
    let mut closest: Vec<f64> = (0..n).map(|i| sqdist(data.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in closest.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).assign(&data.row(pick));
        for (i, best) in closest.iter_mut().enumerate() {
            *best = best.min(sqdist(data.row(i), centers.row(c)));
        }
    }

    let mut assign = vec![usize::MAX; n];
    let mut inertia = 0.0;
    for _ in 0..max_iter {
        let mut changed = false;
        inertia = 0.0;
        for i in 0..n {
            let (best, d) = (0..k)
                .map(|c| (c, sqdist(data.row(i), centers.row(c))))
                .fold((0, f64::INFINITY), |acc, (c, d)| if d < acc.1 { (c, d) } else { acc });
            inertia += d;
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros(centers.raw_dim());
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let mut row = sums.row_mut(assign[i]);
            row += &data.row(i);
            counts[assign[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            }
        }
    }
    (assign, inertia)
}

/// Normalized mutual information with arithmetic-mean normalization.
pub fn normalized_mutual_information(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut ca: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cb: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
    }
    let entropy = |m: &BTreeMap<usize, usize>| -> f64 {
        m.values()
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let (ha, hb) = (entropy(&ca), entropy(&cb));
    if ha == 0.0 && hb == 0.0 {
        return 1.0;
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let c = c as f64;
            c / n * (n * c / (ca[&x] as f64 * cb[&y] as f64)).ln()
        })
        .sum();
    (mi / (0.5 * (ha + hb))).clamp(0.0, 1.0)
}

/// NMI between labels and K-means clusters (K = number of labels, 10
/// seeded restarts, lowest inertia kept).
pub fn nmi(batch: &EmbeddingBatch, seed: u64) -> Result<f64> {
    if batch.is_empty() {
        return Err(NirError::EmptyBatch);
    }
    let k = batch.num_classes();
    if batch.len() < k {
        return Err(NirError::InsufficientSamples(format!(
            "{} samples for {k} classes",
            batch.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..10 {
        let (assign, inertia) = kmeans(&batch.data, k, 300, &mut rng);
        if best.as_ref().is_none_or(|b| inertia < b.1) {
            best = Some((assign, inertia));
        }
    }
    let (assign, _) = best.expect("at least one restart");
    Ok(normalized_mutual_information(&batch.labels, &assign))
}

/// `KL(uniform || normalized singular values)` of the mean-centered
/// embedding matrix. Singular values are floored at 1e-12.
pub fn spectral_decay(batch: &EmbeddingBatch) -> Result<f64> {
    if batch.len() < 2 {
        return Err(NirError::EmptyBatch);
    }
    let centered = &batch.data - &batch.data.mean_axis(Axis(0)).expect("non-empty");
    let m = nalgebra::DMatrix::from_row_iterator(centered.nrows(), centered.ncols(), centered.iter().copied());
    let sv = m.singular_values();
    if sv.iter().all(|&s| s < SPECTRUM_FLOOR) {
        return Err(NirError::DegenerateSpectrum);
    }
    Ok(kl_uniform(&sv.iter().copied().collect::<Vec<_>>()))
}

/// `KL(U || p)` where `p` is the floored, sum-normalized spectrum.
fn kl_uniform(spectrum: &[f64]) -> f64 {
    let floored: Vec<f64> = spectrum.iter().map(|s| s.max(SPECTRUM_FLOOR)).collect();
    let total: f64 = floored.iter().sum();
    let u = 1.0 / floored.len() as f64;
    floored.iter().map(|s| u * (u / (s / total)).ln()).sum()
}

/// Rows grouped by label, in label order.
fn classes(batch: &EmbeddingBatch) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in batch.labels.iter().enumerate() {
        out.entry(y).or_default().push(i);
    }
    out
}

fn dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn centers(batch: &EmbeddingBatch, groups: &BTreeMap<usize, Vec<usize>>) -> Vec<Array1<f64>> {
    groups
        .values()
        .map(|rows| batch.data.select(Axis(0), rows).mean_axis(Axis(0)).expect("non-empty class"))
        .collect()
}

/// Mean pairwise Euclidean distance between class centers of mass.
fn inter_center_distance(cs: &[Array1<f64>]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..cs.len() {
        for j in i + 1..cs.len() {
            total += dist(cs[i].view(), cs[j].view());
            pairs += 1;
        }
    }
    total / pairs as f64
}

/// Mean intraclass pairwise distance over mean inter-center distance.
pub fn pi_density(batch: &EmbeddingBatch) -> Result<f64> {
    let groups = classes(batch);
    if groups.len() < 2 {
        return Err(NirError::InsufficientSamples("pi_density needs at least 2 classes".into()));
    }
    if let Some((y, _)) = groups.iter().find(|(_, rows)| rows.len() < 2) {
        return Err(NirError::InsufficientSamples(format!("class {y} has fewer than 2 samples")));
    }
    let intra: f64 = groups
        .values()
        .map(|rows| {
            let mut total = 0.0;
            let mut pairs = 0usize;
            for (a, &i) in rows.iter().enumerate() {
                for &j in &rows[a + 1..] {
                    total += dist(batch.data.row(i), batch.data.row(j));
                    pairs += 1;
                }
            }
            total / pairs as f64
        })
        .sum::<f64>()
        / groups.len() as f64;
    let inter = inter_center_distance(&centers(batch, &groups));
    Ok(intra / inter)
}

/// Mean Gaussian potential `exp(-2 |u - v|^2)` over distinct pairs.
pub fn uniformity_g2(batch: &EmbeddingBatch) -> Result<f64> {
    let n = batch.len();
    if n < 2 {
        return Err(NirError::EmptyBatch);
    }
    let per_row: Vec<(f64, usize)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut s = 0.0;
            for j in i + 1..n {
                let d = dist(batch.data.row(i), batch.data.row(j));
                s += (-2.0 * d * d).exp();
            }
            (s, n - i - 1)
        })
        .collect();
    let (total, pairs) = per_row.iter().fold((0.0, 0usize), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(total / pairs as f64)
}

/// Population variance over classes of the mean distance to the class
/// center, each divided by the mean inter-center distance.
pub fn concentration_variance(batch: &EmbeddingBatch) -> Result<f64> {
    let groups = classes(batch);
    if groups.len() < 2 {
        return Err(NirError::InsufficientSamples(
            "concentration_variance needs at least 2 classes".into(),
        ));
    }
    let cs = centers(batch, &groups);
    let inter = inter_center_distance(&cs);
    let kappas: Vec<f64> = groups
        .values()
        .zip(&cs)
        .map(|(rows, c)| {
            rows.iter().map(|&i| dist(batch.data.row(i), c.view())).sum::<f64>() / rows.len() as f64 / inter
        })
        .collect();
    let mean = kappas.iter().sum::<f64>() / kappas.len() as f64;
    Ok(kappas.iter().map(|k| (k - mean) * (k - mean)).sum::<f64>() / kappas.len() as f64)
}
