//! Optimization: Adam with per-group learning-rate multipliers,
//! class-balanced batches, warmup, ablation switches and gradient checks.

use std::ops::Range;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{l2_normalize, EmbeddingBatch};
use crate::error::{NirError, Result};
use crate::losses::{DmlLoss, LossValueWithGrads};
use crate::metrics::recall_at_k;
use crate::model::{Model, ModelConfig};
use crate::nir::{combined_objective, generate_synthetic_for, self_reg_loss, NirConfig, SelfRegMode};
use crate::synthetic::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Embedder = 0,
    Proxies = 1,
    Flow = 2,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Embedder, Group::Proxies, Group::Flow];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Embedder => "embedder",
            Group::Proxies => "proxies",
            Group::Flow => "flow",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Learning-rate multipliers indexed by [`Group`].
    pub multipliers: [f64; 3],
    /// Apply weight decay to proxies and flow as well as the embedder.
    pub decay_all: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 4e-3,
            multipliers: [1.0, 4000.0, 50.0],
            decay_all: false,
        }
    }
}

/// Parameters of one group with their gradient for a single update.
pub struct ParamGroup<'a> {
    pub group: Group,
    pub params: &'a mut [f64],
    pub grads: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    m: [Vec<f64>; 3],
    v: [Vec<f64>; 3],
    /// Per-group update counts for bias correction (groups frozen during
    /// warmup start their own count when first updated).
    t: [u64; 3],
}

impl OptimizerState {
    pub fn new(config: AdamConfig, sizes: [usize; 3]) -> Self {
        Self {
            config,
            step: 0,
            m: sizes.map(|n| vec![0.0; n]),
            v: sizes.map(|n| vec![0.0; n]),
            t: [0; 3],
        }
    }

    pub fn for_model(config: AdamConfig, model: &Model) -> Self {
        Self::new(
            config,
            [model.embedder.num_params(), model.proxies.proxies.len(), model.flow.num_params()],
        )
    }

    /// One Adam update of the given groups. All shapes and gradients are
    /// validated before any parameter changes.
    pub fn adam_step(&mut self, groups: &mut [ParamGroup]) -> Result<()> {
        for g in groups.iter() {
            let k = g.group as usize;
            if g.params.len() != g.grads.len() || g.params.len() != self.m[k].len() {
                return Err(NirError::ShapeMismatch {
                    group: g.group.as_str().into(),
                    params: g.params.len().max(self.m[k].len()),
                    grads: g.grads.len(),
                });
            }
            if let Some(i) = g.grads.iter().position(|v| !v.is_finite()) {
                return Err(NirError::NonFiniteGradient(format!("{}[{i}]", g.group.as_str())));
            }
        }
        self.step += 1;
        let c = self.config;
        for g in groups.iter_mut() {
            let k = g.group as usize;
            self.t[k] += 1;
            let t = self.t[k] as i32;
            let lr = c.lr * c.multipliers[k];
            let decay = if g.group == Group::Embedder || c.decay_all { c.weight_decay } else { 0.0 };
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..g.params.len() {
                let grad = g.grads[i] + decay * g.params[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad * grad;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                g.params[i] -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// `P_b` distinct classes with `K_b` samples each; a class with fewer than
/// `K_b` samples is drawn with replacement.
pub fn sample_batch<R: Rng + ?Sized>(
    class_index: &[Vec<usize>],
    classes_per_batch: usize,
    samples_per_class: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let eligible: Vec<&Vec<usize>> = class_index.iter().filter(|rows| !rows.is_empty()).collect();
    if eligible.len() < classes_per_batch {
        return Err(NirError::InsufficientClasses { needed: classes_per_batch, available: eligible.len() });
    }
    let mut out = Vec::with_capacity(classes_per_batch * samples_per_class);
    for c in index::sample(rng, eligible.len(), classes_per_batch) {
        let rows = eligible[c];
        if rows.len() >= samples_per_class {
            out.extend(index::sample(rng, rows.len(), samples_per_class).iter().map(|i| rows[i]));
        } else {
            out.extend((0..samples_per_class).map(|_| rows[rng.random_range(0..rows.len())]));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub classes_per_batch: usize,
    pub samples_per_class: usize,
    /// Leading epochs in which only the flow is updated.
    pub warmup_epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub model: ModelConfig,
    pub loss: DmlLoss,
    pub nir_enabled: bool,
    pub nir: NirConfig,
    pub self_reg: SelfRegMode,
    pub eval_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            classes_per_batch: 8,
            samples_per_class: 4,
            warmup_epochs: 1,
            seed: 0,
            adam: AdamConfig::default(),
            model: ModelConfig::default(),
            loss: DmlLoss::default(),
            nir_enabled: true,
            nir: NirConfig::default(),
            self_reg: SelfRegMode::Off,
            eval_every_epoch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes_per_batch * self.samples_per_class < 2 {
            return Err(NirError::InvalidConfig("batch must hold at least 2 samples".into()));
        }
        if !(self.adam.lr >= 0.0) || !(self.adam.weight_decay >= 0.0) {
            return Err(NirError::InvalidConfig("lr and weight decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(NirError::InvalidConfig("Adam betas must lie in [0, 1)".into()));
        }
        self.nir.validate()
    }
}

/// Loss components of one step (or their epoch means).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub nir: f64,
    pub pdml: f64,
    pub negative: f64,
    pub self_reg: f64,
}

impl StepLosses {
    fn add(&mut self, o: &StepLosses, w: f64) {
        self.total += w * o.total;
        self.nir += w * o.nir;
        self.pdml += w * o.pdml;
        self.negative += w * o.negative;
        self.self_reg += w * o.self_reg;
    }
}

/// Flattened gradients indexed by [`Group`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads(pub [Vec<f64>; 3]);

impl ModelGrads {
    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Rescales to global norm `max_norm` when it is exceeded.
    pub fn clip(&mut self, max_norm: f64) {
        let n = self.norm();
        if n > max_norm {
            let s = max_norm / n;
            self.0.iter_mut().flatten().for_each(|g| *g *= s);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.concat()
    }
}

pub fn model_params(model: &Model) -> [Vec<f64>; 3] {
    [
        model.embedder.params(),
        model.proxies.proxies.iter().copied().collect(),
        model.flow.params(),
    ]
}

/// Writes parameters back; proxy rows that changed are re-normalized.
pub fn set_model_params(model: &mut Model, params: &[Vec<f64>; 3], renormalize: bool) -> Result<()> {
    model.embedder.set_params(&params[0])?;
    let p = &mut model.proxies.proxies;
    if params[1].len() != p.len() {
        return Err(NirError::ShapeMismatch { group: "proxies".into(), params: p.len(), grads: params[1].len() });
    }
    let d = p.ncols();
    for (i, mut row) in p.rows_mut().into_iter().enumerate() {
        let new = &params[1][i * d..(i + 1) * d];
        if row.iter().zip(new).any(|(a, b)| a != b) {
            row.assign(&ndarray::ArrayView1::from(new));
            if renormalize {
                let unit = l2_normalize(row.view())?;
                row.assign(&unit);
            }
        }
    }
    model.flow.set_params(&params[2])
}

/// Objective of one batch and its gradients for all three groups. With
/// NIR disabled the flow is never evaluated.
pub fn step_objective<R: Rng + ?Sized>(
    model: &Model,
    cfg: &TrainConfig,
    features: ArrayView2<f64>,
    labels: &[usize],
    rng: &mut R,
) -> Result<(StepLosses, ModelGrads)> {
    let (unit, tape) = model.embedder.embed_tape(features)?;
    let batch = EmbeddingBatch::new(unit, labels.to_vec())?;
    let mut losses = StepLosses::default();
    let mut total: LossValueWithGrads;
    if cfg.nir_enabled {
        let obj = combined_objective(&batch, &model.proxies, &model.flow, &cfg.loss, &cfg.nir, rng)?;
        losses.nir = obj.nir;
        losses.pdml = obj.pdml;
        losses.negative = obj.negative;
        total = obj.total;
        if cfg.self_reg != SelfRegMode::Off {
            let mut classes = labels.to_vec();
            classes.sort_unstable();
            classes.dedup();
            let synthetic =
                generate_synthetic_for(&model.proxies, &classes, cfg.samples_per_class, &model.flow, rng)?;
            let sr = self_reg_loss(cfg.self_reg, &synthetic, &model.proxies, &model.flow, &cfg.loss)?;
            losses.self_reg = sr.value;
            let w = cfg.nir.omega;
            total.value += w * sr.value;
            total.d_proxies.scaled_add(w, &sr.d_proxies);
            if let (Some(dst), Some(src)) = (total.d_flow.as_mut(), sr.d_flow.as_ref()) {
                dst.iter_mut().zip(src).for_each(|(a, b)| *a += w * b);
            }
        }
    } else {
        total = cfg.loss.evaluate(&batch, &model.proxies)?;
        losses.pdml = total.value;
    }
    losses.total = total.value;
    let d_embedder = model.embedder.backward(&tape, &batch.data, total.d_embeddings.view());
    let d_flow = total.d_flow.unwrap_or_else(|| vec![0.0; model.flow.num_params()]);
    Ok((losses, ModelGrads([d_embedder, total.d_proxies.iter().copied().collect(), d_flow])))
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub warmup: bool,
    pub losses: StepLosses,
    pub test_recall_at_1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub steps: u64,
    /// Wall-clock seconds per epoch; not part of the deterministic record.
    pub epoch_seconds: Vec<f64>,
}

/// Embeds every row of `data` with the model's embedder.
pub fn embed_dataset(model: &Model, data: &Dataset) -> Result<EmbeddingBatch> {
    EmbeddingBatch::new(model.embedder.embed(data.features.view())?, data.labels.clone())
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Trains `model` in place on `train`; `eval` is scored after every epoch
/// when `cfg.eval_every_epoch` is set.
pub fn train(train: &Dataset, eval: Option<&Dataset>, model: &mut Model, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if train.dim() != model.embedder.input_dim() {
        return Err(NirError::DimensionMismatch {
            what: "training features",
            expected: model.embedder.input_dim(),
            got: train.dim(),
        });
    }
    if train.num_classes() > model.proxies.len() {
        return Err(NirError::MissingProxy(train.num_classes() - 1));
    }
    let class_index = train.class_index();
    let batch_size = cfg.classes_per_batch * cfg.samples_per_class;
    let steps_per_epoch = train.len().div_ceil(batch_size).max(1);
    let mut batch_rng = rng_stream(cfg.seed, 1);
    let mut loss_rng = rng_stream(cfg.seed, 2);
    let mut opt = OptimizerState::for_model(cfg.adam, model);
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let warmup = cfg.nir_enabled && epoch < cfg.warmup_epochs;
        let mut mean = StepLosses::default();
        for _ in 0..steps_per_epoch {
            let idx = sample_batch(&class_index, cfg.classes_per_batch, cfg.samples_per_class, &mut batch_rng)?;
            let x = train.features.select(Axis(0), &idx);
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let (losses, mut grads) = step_objective(model, cfg, x.view(), &labels, &mut loss_rng)?;
            if !losses.total.is_finite() {
                return Err(NirError::NonFiniteLoss { step: log.steps as usize });
            }
            if warmup {
                grads.0[Group::Embedder as usize].fill(0.0);
                grads.0[Group::Proxies as usize].fill(0.0);
            }
            if let Some(max_norm) = cfg.nir.grad_clip {
                grads.clip(max_norm);
            }
            apply_update(model, &mut opt, &grads, if warmup { &[Group::Flow] } else { &Group::ALL })?;
            mean.add(&losses, 1.0 / steps_per_epoch as f64);
            log.steps += 1;
        }
        let test_recall_at_1 = match (cfg.eval_every_epoch, eval) {
            (true, Some(data)) => Some(recall_at_k(&embed_dataset(model, data)?, &[1])?[&1]),
            _ => None,
        };
        log.epochs.push(EpochRecord { epoch, warmup, losses: mean, test_recall_at_1 });
        log.epoch_seconds.push(started.elapsed().as_secs_f64());
    }
    Ok(log)
}

/// Adam update of the selected groups followed by proxy re-normalization.
pub fn apply_update(model: &mut Model, opt: &mut OptimizerState, grads: &ModelGrads, groups: &[Group]) -> Result<()> {
    let mut params = model_params(model);
    let [p0, p1, p2] = &mut params;
    let mut slots: Vec<ParamGroup> = vec![
        ParamGroup { group: Group::Embedder, params: p0, grads: &grads.0[0] },
        ParamGroup { group: Group::Proxies, params: p1, grads: &grads.0[1] },
        ParamGroup { group: Group::Flow, params: p2, grads: &grads.0[2] },
    ];
    slots.retain(|s| groups.contains(&s.group));
    opt.adam_step(&mut slots)?;
    set_model_params(model, &params, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Coordinates sitting on a kink (see [`grad_check`]), excluded from
    /// `max_rel_error`.
    pub kinks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub max_rel_error: f64,
}

/// Denominator floor so that vanishing gradients compare absolutely.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central differences on a random subsample of at least `min_coords`
/// coordinates per group (all of them for smaller groups). `f` returns the
/// loss and its analytic gradient.
///
/// On a smooth function the forward and backward differences straddle the
/// derivative symmetrically. When they disagree and the analytic value
/// instead coincides with one of them, a ReLU kink lies within `step`; such
/// coordinates are counted as kinks rather than scored.
///
/// The central difference of a loss of size |f| cannot resolve better than
/// about eps * |f| / step; discrepancies below that bound are not scored.
pub fn grad_check<F>(
    mut f: F,
    params: &[f64],
    groups: &[(&str, Range<usize>)],
    step: f64,
    min_coords: usize,
    seed: u64,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (base, analytic) = f(params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = params.to_vec();
    let mut out = Vec::with_capacity(groups.len());
    for (name, range) in groups {
        let len = range.len();
        let coords: Vec<usize> = if len <= min_coords {
            range.clone().collect()
        } else {
            let mut picked: Vec<usize> = index::sample(&mut rng, len, min_coords).iter().map(|i| range.start + i).collect();
            picked.sort_unstable();
            picked
        };
        let mut worst = 0.0f64;
        let mut kinks = 0;
        for &i in &coords {
            let orig = x[i];
            x[i] = orig + step;
            let up = f(&x).0;
            x[i] = orig - step;
            let down = f(&x).0;
            x[i] = orig;
            let (fwd, bwd) = ((up - base) / step, (base - down) / step);
            let nearest = (analytic[i] - fwd).abs().min((analytic[i] - bwd).abs());
            if relative_error(fwd, bwd) > 1e-4 && nearest < 0.1 * (fwd - bwd).abs() {
                kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * step);
            let resolution = f64::EPSILON * (up.abs() + down.abs()) / step;
            let excess = ((analytic[i] - numeric).abs() - resolution).max(0.0);
            worst = worst.max(excess / analytic[i].abs().max(numeric.abs()).max(REL_FLOOR));
        }
        out.push(GroupCheck { group: name.to_string(), coordinates: coords.len(), max_rel_error: worst, kinks });
    }
    let max_rel_error = out.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    GradCheckReport { groups: out, max_rel_error }
}

/// Gradient check of the full training objective with respect to the
/// embedder, proxies and flow on one batch.
pub fn model_grad_check(
    model: &Model,
    cfg: &TrainConfig,
    features: ArrayView2<f64>,
    labels: &[usize],
    seed: u64,
    step: f64,
) -> Result<GradCheckReport> {
    let groups_params = model_params(model);
    let sizes: Vec<usize> = groups_params.iter().map(Vec::len).collect();
    let flat = groups_params.concat();
    let mut scratch = model.clone();
    let mut failure = None;
    let mut f = |p: &[f64]| -> (f64, Vec<f64>) {
        let split = [
            p[..sizes[0]].to_vec(),
            p[sizes[0]..sizes[0] + sizes[1]].to_vec(),
            p[sizes[0] + sizes[1]..].to_vec(),
        ];
        let r = set_model_params(&mut scratch, &split, false)
            .and_then(|_| step_objective(&scratch, cfg, features, labels, &mut rng_stream(seed, 3)));
        match r {
            Ok((l, g)) => (l.total, g.flat()),
            Err(e) => {
                failure.get_or_insert(e);
                (f64::NAN, vec![f64::NAN; p.len()])
            }
        }
    };
    let b0 = sizes[0];
    let b1 = b0 + sizes[1];
    let mut ranges = vec![("embedder", 0..b0), ("proxies", b0..b1)];
    if cfg.nir_enabled {
        ranges.push(("flow", b1..b1 + sizes[2]));
    }
    let report = grad_check(&mut f, &flat, &ranges, step, 200, seed);
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Train-set batch of `n` random rows, used by gradient checks.
pub fn probe_batch(data: &Dataset, n: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..data.len())).collect();
    (data.features.select(Axis(0), &idx), idx.iter().map(|&i| data.labels[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::ConditioningPlacement;
    use crate::losses::ProxyLossKind;
    use crate::synthetic::{make_benchmark, SyntheticSpec};
    use proptest::prelude::*;

    #[test]
    fn adam_first_step() {
        let cfg = AdamConfig { lr: 0.1, weight_decay: 0.0, multipliers: [1.0; 3], ..Default::default() };
        let mut opt = OptimizerState::new(cfg, [1, 0, 0]);
        let mut p = [0.0];
        opt.adam_step(&mut [ParamGroup { group: Group::Embedder, params: &mut p, grads: &[1.0] }]).unwrap();
        assert!((p[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adam_matches_reference_trajectory() {
        // independent scalar recursion over a varying gradient sequence
        let cfg = AdamConfig { lr: 0.01, weight_decay: 0.1, multipliers: [1.0; 3], ..Default::default() };
        let mut opt = OptimizerState::new(cfg, [1, 0, 0]);
        let mut p = [0.7];
        let (mut theta, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        for t in 1..=20 {
            let g = (t as f64 * 0.3).sin();
            opt.adam_step(&mut [ParamGroup { group: Group::Embedder, params: &mut p, grads: &[g] }]).unwrap();
            let g = g + 0.1 * theta;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            theta -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert!((p[0] - theta).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let cfg = AdamConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = OptimizerState::new(cfg, [3, 0, 0]);
        let mut p = [0.3, -1.2, 5.0];
        let before = p;
        opt.adam_step(&mut [ParamGroup { group: Group::Embedder, params: &mut p, grads: &[0.0; 3] }]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn lr_multipliers() {
        let cfg = AdamConfig { lr: 1e-6, weight_decay: 0.0, ..Default::default() };
        let mut opt = OptimizerState::new(cfg, [2, 2, 2]);
        let (mut a, mut b, mut c) = ([0.0; 2], [0.0; 2], [0.0; 2]);
        let ones = [1.0; 2];
        opt.adam_step(&mut [
            ParamGroup { group: Group::Embedder, params: &mut a, grads: &ones },
            ParamGroup { group: Group::Proxies, params: &mut b, grads: &ones },
            ParamGroup { group: Group::Flow, params: &mut c, grads: &ones },
        ])
        .unwrap();
        assert!((b[0] / a[0] - 4000.0).abs() < 1e-9);
        assert!((c[0] / a[0] - 50.0).abs() < 1e-9);
    }

    #[test]
    fn bad_gradients_leave_state_untouched() {
        let mut opt = OptimizerState::new(AdamConfig::default(), [2, 1, 0]);
        let mut a = [1.0, 2.0];
        let mut b = [3.0];
        let before = opt.clone();
        let err = opt
            .adam_step(&mut [
                ParamGroup { group: Group::Embedder, params: &mut a, grads: &[1.0, 1.0] },
                ParamGroup { group: Group::Proxies, params: &mut b, grads: &[f64::NAN] },
            ])
            .unwrap_err();
        assert!(matches!(err, NirError::NonFiniteGradient(_)));
        assert_eq!((a, b), ([1.0, 2.0], [3.0]));
        assert_eq!(opt, before);
        let err = opt
            .adam_step(&mut [ParamGroup { group: Group::Embedder, params: &mut a, grads: &[1.0] }])
            .unwrap_err();
        assert!(matches!(err, NirError::ShapeMismatch { .. }));
    }

    fn index_of(labels: &[usize]) -> Vec<Vec<usize>> {
        let c = labels.iter().max().unwrap() + 1;
        let mut out = vec![Vec::new(); c];
        for (i, &y) in labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    #[test]
    fn batch_composition() {
        let idx = index_of(&[0, 0, 1, 1, 1, 2, 3, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_batch(&idx, 2, 2, &mut rng).unwrap();
        assert_eq!(b.len(), 4);
        let labels = [0, 0, 1, 1, 1, 2, 3, 3];
        let mut classes: Vec<usize> = b.iter().map(|&i| labels[i]).collect();
        classes.dedup();
        assert_eq!(classes.len(), 2);
        let again = sample_batch(&idx, 2, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b, again);
        assert!(matches!(
            sample_batch(&idx, 5, 1, &mut rng),
            Err(NirError::InsufficientClasses { needed: 5, available: 4 })
        ));
        // class 2 has one sample: drawn with replacement
        let b = sample_batch(&index_of(&[0, 1]), 2, 3, &mut rng).unwrap();
        assert_eq!(b.len(), 6);
    }

    #[test]
    fn class_frequencies_uniform() {
        let c = 10;
        let idx: Vec<Vec<usize>> = (0..c).map(|k| vec![k]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 10_000;
        let mut counts = vec![0usize; c];
        for _ in 0..draws {
            for i in sample_batch(&idx, 3, 1, &mut rng).unwrap() {
                counts[i] += 1;
            }
        }
        let p = 3.0 / c as f64;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for n in counts {
            assert!((n as f64 - mean).abs() < 3.0 * sd, "{n} vs {mean} ± {sd}");
        }
    }

    fn small_setup() -> (Dataset, Dataset, TrainConfig) {
        let spec = SyntheticSpec { samples_per_class: 12, ..Default::default() };
        let b = make_benchmark(&spec).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            classes_per_batch: 4,
            samples_per_class: 3,
            adam: AdamConfig { lr: 1e-3, ..Default::default() },
            model: ModelConfig { embed_dim: 8, hidden: 16, flow_depth: 2, flow_width: 16, ..Default::default() },
            ..Default::default()
        };
        (b.train, b.test, cfg)
    }

    fn model_for(data: &Dataset, cfg: &TrainConfig) -> Model {
        Model::new(&cfg.model, data.dim(), data.num_classes(), cfg.seed).unwrap()
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let (train_set, _, mut cfg) = small_setup();
        cfg.adam.lr = 0.0;
        let mut m = model_for(&train_set, &cfg);
        let before = m.clone();
        train(&train_set, None, &mut m, &cfg).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn warmup_freezes_embedder_and_proxies() {
        let (train_set, _, mut cfg) = small_setup();
        cfg.epochs = 1;
        cfg.warmup_epochs = 1;
        let mut m = model_for(&train_set, &cfg);
        let before = m.clone();
        let log = train(&train_set, None, &mut m, &cfg).unwrap();
        assert!(log.epochs[0].warmup);
        assert_eq!(m.embedder, before.embedder);
        assert_eq!(m.proxies, before.proxies);
        assert_ne!(m.flow, before.flow);
    }

    #[test]
    fn nir_off_never_touches_flow() {
        let (train_set, _, mut cfg) = small_setup();
        cfg.nir_enabled = false;
        let mut m = model_for(&train_set, &cfg);
        let before = m.clone();
        let log = train(&train_set, None, &mut m, &cfg).unwrap();
        assert_eq!(m.flow, before.flow);
        assert_ne!(m.embedder, before.embedder);
        assert!(log.epochs.iter().all(|e| !e.warmup && e.losses.nir == 0.0));
    }

    #[test]
    fn training_is_deterministic() {
        let (train_set, test_set, mut cfg) = small_setup();
        cfg.eval_every_epoch = true;
        cfg.self_reg = SelfRegMode::GenerateAndMatch;
        cfg.nir.negative_pairs = Some(0.1);
        let run = || {
            let mut m = model_for(&train_set, &cfg);
            let log = train(&train_set, Some(&test_set), &mut m, &cfg).unwrap();
            (m, log.epochs)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn toy_problem_objective_decreases() {
        let spec = SyntheticSpec {
            num_classes: 4,
            samples_per_class: 20,
            submodes_per_class: 1,
            within_submode_kappa: 200.0,
            ..Default::default()
        };
        let b = make_benchmark(&spec).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            classes_per_batch: 2,
            samples_per_class: 4,
            warmup_epochs: 0,
            adam: AdamConfig { lr: 1e-3, multipliers: [1.0, 40.0, 1.0], ..Default::default() },
            model: ModelConfig { embed_dim: 4, hidden: 16, flow_depth: 2, flow_width: 16, ..Default::default() },
            ..Default::default()
        };
        let mut m = model_for(&b.train, &cfg);
        let log = train(&b.train, None, &mut m, &cfg).unwrap();
        let first = log.epochs[0].losses.total;
        let last = log.epochs.last().unwrap().losses.total;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn nonfinite_loss_reports_step() {
        let (train_set, _, mut cfg) = small_setup();
        cfg.warmup_epochs = 0;
        let mut m = model_for(&train_set, &cfg);
        m.flow.blocks[0].subnet1.layers[2].bias.fill(f64::NAN);
        let err = train(&train_set, None, &mut m, &cfg).unwrap_err();
        assert!(matches!(err, NirError::NonFiniteLoss { step: 0 }));
    }

    #[test]
    fn grad_check_detects() {
        // small parameters keep |f| and hence the roundoff of f(x±h) small
        let params: Vec<f64> = (0..300).map(|i| 0.015 + 0.005 * (i as f64 * 0.1).sin()).collect();
        let quad = |p: &[f64]| {
            let v = p.iter().enumerate().map(|(i, x)| (i as f64 + 1.0) * x * x).sum::<f64>();
            let g = p.iter().enumerate().map(|(i, x)| 2.0 * (i as f64 + 1.0) * x).collect();
            (v, g)
        };
        let r = grad_check(quad, &params, &[("all", 0..300)], 1e-5, 200, 0);
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
        assert_eq!(r.groups[0].coordinates, 200);

        let corrupt = |p: &[f64]| {
            let (v, mut g): (f64, Vec<f64>) = quad(p);
            g[7] *= 2.0;
            (v, g)
        };
        let r = grad_check(corrupt, &params, &[("all", 0..10)], 1e-5, 200, 0);
        assert!(r.max_rel_error > 0.4);
    }

    #[test]
    fn grad_check_kinks() {
        // relu with its kink inside the difference stencil
        let relu = |p: &[f64]| ((p[0] - 2e-6).max(0.0), vec![if p[0] > 2e-6 { 1.0 } else { 0.0 }]);
        let r = grad_check(relu, &[0.0], &[("x", 0..1)], 1e-5, 1, 0);
        assert_eq!((r.groups[0].kinks, r.max_rel_error), (1, 0.0));
        // a gradient outside the one-sided slopes is still reported
        let wrong = |p: &[f64]| ((p[0] - 2e-6).max(0.0), vec![3.0]);
        let r = grad_check(wrong, &[0.0], &[("x", 0..1)], 1e-5, 1, 0);
        assert_eq!(r.groups[0].kinks, 0);
        assert!(r.max_rel_error > 0.5);
    }

    #[test]
    fn grad_check_roundoff_allowance() {
        // a large offset limits the difference resolution to ~1e-8
        let f = |p: &[f64]| (1e3 + 1e-3 * p[0] * p[0], vec![2e-3 * p[0] * 1.001]);
        let r = grad_check(f, &[0.5], &[("x", 0..1)], 1e-5, 1, 0);
        assert!(r.max_rel_error > 5e-4 && r.max_rel_error < 2e-3, "{}", r.max_rel_error);
        let exact = |p: &[f64]| (1e3 + 1e-3 * p[0] * p[0], vec![2e-3 * p[0]]);
        assert_eq!(grad_check(exact, &[0.5], &[("x", 0..1)], 1e-5, 1, 0).max_rel_error, 0.0);
    }

    #[test]
    fn full_objective_gradients() {
        let (train_set, _, mut cfg) = small_setup();
        cfg.nir.negative_pairs = Some(0.2);
        cfg.self_reg = SelfRegMode::GenerateAndMatch;
        cfg.model.placement = ConditioningPlacement::Mid;
        for kind in ProxyLossKind::ALL {
            cfg.loss.kind = kind;
            let mut m = model_for(&train_set, &cfg);
            // move the flow away from the identity so every path is exercised
            let p: Vec<f64> = m.flow.params().iter().enumerate().map(|(i, v)| v + 0.01 * (i as f64).sin()).collect();
            m.flow.set_params(&p).unwrap();
            let (x, y) = probe_batch(&train_set, 8, 4);
            let r = model_grad_check(&m, &cfg, x.view(), &y, 5, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-4, "{kind}: {r:?}");
            assert!(r.groups.iter().all(|g| g.kinks * 20 <= g.coordinates), "{kind}: {r:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn clipping_bounds_norm(values in proptest::collection::vec(-100.0f64..100.0, 1..40), bound in 0.01f64..10.0) {
            let k = values.len() / 3;
            let mut g = ModelGrads([values[..k].to_vec(), values[k..2 * k].to_vec(), values[2 * k..].to_vec()]);
            let before = g.clone();
            g.clip(bound);
            prop_assert!(g.norm() <= bound + 1e-9);
            if before.norm() <= bound {
                prop_assert_eq!(g, before);
            }
        }
    }
}
