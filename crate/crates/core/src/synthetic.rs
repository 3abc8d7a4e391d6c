//! Desk-scale benchmark generator: classes made of several vMF submodes on
//! a low-dimensional sphere, lifted linearly into a raw feature space and
//! split into disjoint train/test classes.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::l2_normalize;
use crate::error::{NirError, Result};

/// Draws `n` samples from vMF(`mu`, `kappa`) using Wood's rejection
/// scheme for the cosine and a uniform tangent direction.
pub fn sample_vmf_with<R: Rng + ?Sized>(
    mu: ArrayView1<f64>,
    kappa: f64,
    n: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let d = mu.len();
    if d < 2 {
        return Err(NirError::InvalidSpec(format!("vMF dimension {d} < 2")));
    }
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(NirError::InvalidSpec(format!("vMF kappa {kappa} must be positive")));
    }
    let mu = l2_normalize(mu)?;
    let dm1 = (d - 1) as f64;
    let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + dm1 * (1.0 - x0 * x0).ln();
    let beta = Beta::new(dm1 / 2.0, dm1 / 2.0).expect("valid beta parameters");

    let mut out = Array2::zeros((n, d));
    for mut row in out.rows_mut() {
        let w = loop {
            let z: f64 = beta.sample(rng);
            let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
            let u: f64 = rng.random();
            if kappa * w + dm1 * (1.0 - x0 * w).ln() - c >= u.ln() {
                break w;
            }
        };
        let tangent = loop {
            let g: Array1<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let t = &g - &(&mu * g.dot(&mu));
            if let Ok(t) = l2_normalize(t.view()) {
                break t;
            }
        };
        let x = &mu * w + &tangent * (1.0 - w * w).max(0.0).sqrt();
        row.assign(&l2_normalize(x.view())?);
    }
    Ok(out)
}

pub fn sample_vmf(mu: ArrayView1<f64>, kappa: f64, n: usize, seed: u64) -> Result<Array2<f64>> {
    sample_vmf_with(mu, kappa, n, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn random_unit<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Array1<f64> {
    loop {
        let g: Array1<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        if let Ok(u) = l2_normalize(g.view()) {
            return u;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub sphere_dim: usize,
    pub ambient_dim: usize,
    pub submodes_per_class: usize,
    pub within_submode_kappa: f64,
    /// Norm of the offset between a class center and its submode means.
    pub submode_spread: f64,
    /// Fraction of classes held out for testing.
    pub split: f64,
    /// Std of the isotropic Gaussian noise added after the linear lift.
    pub feature_noise: f64,
    /// Sphere coordinates are scaled by factors spread log-uniformly over
    /// this many decades before the random lift; 0 gives an isotropic lift.
    pub lift_anisotropy: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            samples_per_class: 60,
            sphere_dim: 16,
            ambient_dim: 32,
            submodes_per_class: 3,
            within_submode_kappa: 60.0,
            submode_spread: 0.8,
            split: 0.5,
            feature_noise: 0.02,
            lift_anisotropy: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn num_test_classes(&self) -> usize {
        (self.split * self.num_classes as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NirError::InvalidSpec(m));
        if self.num_classes == 0 || self.samples_per_class == 0 || self.submodes_per_class == 0 {
            return bad("class, sample and submode counts must be positive".into());
        }
        if self.sphere_dim < 2 || self.ambient_dim == 0 {
            return bad(format!("sphere_dim {} / ambient_dim {}", self.sphere_dim, self.ambient_dim));
        }
        if !(self.within_submode_kappa > 0.0) || !(self.submode_spread >= 0.0) || !(self.feature_noise >= 0.0)
            || !(self.lift_anisotropy >= 0.0)
        {
            return bad("kappa must be positive, spread and noise non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.split) {
            return bad(format!("split {} outside [0, 1]", self.split));
        }
        let test = self.num_test_classes();
        if test == 0 || test == self.num_classes {
            return bad(format!("split {} leaves an empty train or test side", self.split));
        }
        Ok(())
    }
}

/// Raw points on the sphere before lifting, with class and submode ids.
#[derive(Debug, Clone)]
pub struct SphereSample {
    pub points: Array2<f64>,
    pub classes: Vec<usize>,
    pub submodes: Vec<usize>,
}

/// Class-major samples: class centers uniform on the sphere, submode means
/// offset from them by `submode_spread`, points vMF around the submodes
/// (assigned round robin).
pub fn sample_sphere<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<SphereSample> {
    spec.validate()?;
    let d = spec.sphere_dim;
    let n = spec.num_classes * spec.samples_per_class;
    let mut points = Array2::zeros((n, d));
    let mut classes = Vec::with_capacity(n);
    let mut submodes = Vec::with_capacity(n);
    let mut row = 0;
    for c in 0..spec.num_classes {
        let center = random_unit(d, rng);
        let means: Vec<Array1<f64>> = (0..spec.submodes_per_class)
            .map(|_| {
                let offset = random_unit(d, rng) * spec.submode_spread;
                l2_normalize((&center + &offset).view()).unwrap_or_else(|_| center.clone())
            })
            .collect();
        for i in 0..spec.samples_per_class {
            let m = i % spec.submodes_per_class;
            let x = sample_vmf_with(means[m].view(), spec.within_submode_kappa, 1, rng)?;
            points.row_mut(row).assign(&x.row(0));
            classes.push(c);
            submodes.push(c * spec.submodes_per_class + m);
            row += 1;
        }
    }
    Ok(SphereSample { points, classes, submodes })
}

/// Raw features with contiguous class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub split: String,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, split: impl Into<String>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(NirError::DimensionMismatch {
                what: "dataset labels",
                expected: features.nrows(),
                got: labels.len(),
            });
        }
        Ok(Self { features, labels, split: split.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Row indices per class id.
    pub fn class_index(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    /// Plain-text table: a header line then `label,f_0,...,f_{D-1}` rows.
    /// Floats are written in shortest round-trip form.
    pub fn to_table(&self) -> String {
        let mut s = format!("# dim={} split={}\n", self.dim(), self.split);
        for (row, y) in self.features.rows().into_iter().zip(&self.labels) {
            write!(s, "{y}").unwrap();
            for v in row {
                write!(s, ",{v:?}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_table(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| NirError::Format("empty table".into()))?;
        let header = header
            .strip_prefix('#')
            .ok_or_else(|| NirError::Format("table header must start with '#'".into()))?;
        let mut dim = None;
        let mut split = String::new();
        for field in header.split_whitespace() {
            match field.split_once('=') {
                Some(("dim", v)) => {
                    dim = Some(v.parse::<usize>().map_err(|e| NirError::Format(format!("dim: {e}")))?)
                }
                Some(("split", v)) => split = v.to_string(),
                _ => return Err(NirError::Format(format!("unexpected header field '{field}'"))),
            }
        }
        let dim = dim.ok_or_else(|| NirError::Format("header lacks dim=".into()))?;
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for (k, line) in lines.enumerate() {
            let mut fields = line.split(',').map(str::trim);
            let label = fields
                .next()
                .unwrap_or_default()
                .parse::<usize>()
                .map_err(|e| NirError::Format(format!("row {k}: label: {e}")))?;
            let before = values.len();
            for f in fields {
                values.push(f.parse::<f64>().map_err(|e| NirError::Format(format!("row {k}: {e}")))?);
            }
            if values.len() - before != dim {
                return Err(NirError::Format(format!(
                    "row {k}: {} features, header declares {dim}",
                    values.len() - before
                )));
            }
            labels.push(label);
        }
        let features = Array2::from_shape_vec((labels.len(), dim), values)
            .map_err(|e| NirError::Format(e.to_string()))?;
        Self::new(features, labels, split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_table())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_table(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub train: Dataset,
    pub test: Dataset,
    /// Generator class ids behind the contiguous labels of each side.
    pub train_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
}

/// Generates the sphere sample, lifts it through a fixed random linear map
/// plus noise, and splits classes into disjoint train and test sets.
pub fn make_benchmark(spec: &SyntheticSpec) -> Result<Benchmark> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sample = sample_sphere(spec, &mut rng)?;
    let scale = 1.0 / (spec.sphere_dim as f64).sqrt();
    let mut lift = Array2::from_shape_simple_fn((spec.sphere_dim, spec.ambient_dim), || {
        rng.sample::<f64, _>(StandardNormal) * scale
    });
    let last = (spec.sphere_dim - 1) as f64;
    for (i, mut row) in lift.rows_mut().into_iter().enumerate() {
        row *= 10f64.powf(spec.lift_anisotropy * (i as f64 / last - 0.5));
    }
    let mut raw = sample.points.dot(&lift);
    raw.mapv_inplace(|v| v + spec.feature_noise * rng.sample::<f64, _>(StandardNormal));

    let mut order: Vec<usize> = (0..spec.num_classes).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let n_train = spec.num_classes - spec.num_test_classes();
    let part = |ids: &[usize], tag: &str| -> Result<Dataset> {
        let rows: Vec<usize> = (0..raw.nrows()).filter(|&i| ids.contains(&sample.classes[i])).collect();
        let labels = rows
            .iter()
            .map(|&i| ids.iter().position(|&c| c == sample.classes[i]).expect("filtered"))
            .collect();
        Dataset::new(raw.select(ndarray::Axis(0), &rows), labels, tag)
    };
    let mut train_ids = order[..n_train].to_vec();
    let mut test_ids = order[n_train..].to_vec();
    train_ids.sort_unstable();
    test_ids.sort_unstable();
    Ok(Benchmark {
        train: part(&train_ids, "train")?,
        test: part(&test_ids, "test")?,
        train_classes: train_ids,
        test_classes: test_ids,
    })
}
