//! Trainable model: a small dense embedder, the class proxies and the
//! conditional flow, plus their on-disk checkpoint format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::embedding::{normalize_rows, normalize_rows_backward, ProxySet};
use crate::error::{NirError, Result};
use crate::flow::{read_u32, ConditionalFlow, ConditioningPlacement, Dense, FlowConfig, Mlp, MlpTape};

/// `input -> hidden -> hidden -> dim` ReLU network with l2-normalized output.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    pub mlp: Mlp,
}

/// Intermediate values of an embedder forward pass needed for backward.
#[derive(Debug, Clone)]
pub struct EmbedTape {
    mlp: MlpTape,
    raw: Array2<f64>,
}

impl Embedder {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, dim: usize, rng: &mut R) -> Self {
        Self::from_sizes(&[input, hidden, hidden, dim], rng)
    }

    pub fn from_sizes<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        let layers = sizes.windows(2).map(|w| Dense::he(w[0], w[1], rng)).collect();
        Self { mlp: Mlp { layers } }
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.mlp.layers.last().expect("non-empty").weight.nrows()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.mlp.layers.iter().map(|l| l.weight.nrows()));
        s
    }

    fn check(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(NirError::DimensionMismatch {
                what: "embedder input dimension",
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    pub fn embed(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.embed_tape(x)?.0)
    }

    pub fn embed_tape(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, EmbedTape)> {
        self.check(x)?;
        let (raw, mlp) = self.mlp.forward_tape(x);
        let mut unit = raw.clone();
        normalize_rows(&mut unit)?;
        Ok((unit, EmbedTape { mlp, raw }))
    }

    /// Parameter gradient (flattened) for `dL/d unit`.
    pub fn backward(&self, tape: &EmbedTape, unit: &Array2<f64>, g_unit: ArrayView2<f64>) -> Vec<f64> {
        let g_raw = normalize_rows_backward(tape.raw.view(), unit.view(), g_unit);
        let mut grad = self.mlp.zeros_like();
        self.mlp.backward(&tape.mlp, g_raw.view(), &mut grad);
        let mut out = Vec::with_capacity(grad.num_params());
        grad.push_params(&mut out);
        out
    }

    pub fn num_params(&self) -> usize {
        self.mlp.num_params()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.mlp.push_params(&mut out);
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(NirError::ShapeMismatch {
                group: "embedder".into(),
                params: self.num_params(),
                grads: params.len(),
            });
        }
        self.mlp.pull_params(params);
        Ok(())
    }
}

/// Architecture of the trainable model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub flow_depth: usize,
    pub flow_width: usize,
    pub placement: ConditioningPlacement,
    pub clamp_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            hidden: 64,
            flow_depth: 8,
            flow_width: 128,
            placement: ConditioningPlacement::All,
            clamp_scale: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub embedder: Embedder,
    pub proxies: ProxySet,
    pub flow: ConditionalFlow,
}

impl Model {
    pub fn new(cfg: &ModelConfig, input_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if cfg.embed_dim < 2 || cfg.hidden == 0 || input_dim == 0 {
            return Err(NirError::InvalidConfig(format!(
                "model sizes: input {input_dim}, hidden {}, embed {}",
                cfg.hidden, cfg.embed_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut embedder = Embedder::new(input_dim, cfg.hidden, cfg.embed_dim, &mut rng);
        // A small random output bias keeps the raw embedding away from exact
        // zero when every ReLU of a narrow network is inactive. It is drawn
        // from its own stream so the remaining initialization is unchanged.
        let mut bias_rng = ChaCha8Rng::seed_from_u64(seed);
        bias_rng.set_stream(1);
        let last = embedder.mlp.layers.last_mut().expect("non-empty");
        last.bias.mapv_inplace(|_| 1e-3 * bias_rng.sample::<f64, _>(StandardNormal));
        let proxies = ProxySet::random(num_classes, cfg.embed_dim, &mut rng)?;
        let flow = ConditionalFlow::new(FlowConfig {
            dim: cfg.embed_dim,
            depth: cfg.flow_depth,
            width: cfg.flow_width,
            placement: cfg.placement,
            clamp_scale: cfg.clamp_scale,
            seed: rng.random(),
        })?;
        Ok(Self { embedder, proxies, flow })
    }

    /// Rounds all parameters to `f32`, the precision kept by checkpoints.
    pub fn quantize(&mut self) {
        let p: Vec<f64> = self.embedder.params().iter().map(|&v| v as f32 as f64).collect();
        self.embedder.set_params(&p).expect("same architecture");
        self.proxies.proxies.mapv_inplace(|v| v as f32 as f64);
        self.flow.quantize();
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join(EMBEDDER_FILE))?);
        write_array(&mut w, KIND_EMBEDDER, &self.embedder.sizes(), &self.embedder.params())?;
        w.flush()?;
        let p = &self.proxies.proxies;
        let mut w = BufWriter::new(File::create(dir.join(PROXIES_FILE))?);
        write_array(&mut w, KIND_PROXIES, &[p.nrows(), p.ncols()], p.as_slice().expect("standard layout"))?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join(FLOW_FILE))?);
        self.flow.write_blob(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (sizes, params) = read_array(&mut BufReader::new(File::open(dir.join(EMBEDDER_FILE))?), KIND_EMBEDDER)?;
        if sizes.len() < 2 {
            return Err(NirError::Format("embedder needs at least one layer".into()));
        }
        let mut embedder = Embedder {
            mlp: Mlp { layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect() },
        };
        embedder
            .set_params(&params)
            .map_err(|_| NirError::Format("embedder parameter count does not match its layer sizes".into()))?;

        let (shape, values) = read_array(&mut BufReader::new(File::open(dir.join(PROXIES_FILE))?), KIND_PROXIES)?;
        let [c, d] = shape[..] else {
            return Err(NirError::Format("proxy array must be two-dimensional".into()));
        };
        let proxies = ProxySet::new(
            Array2::from_shape_vec((c, d), values).map_err(|e| NirError::Format(e.to_string()))?,
        )?;
        let flow = ConditionalFlow::read_blob(BufReader::new(File::open(dir.join(FLOW_FILE))?))?;
        if embedder.output_dim() != d || flow.dim() != d {
            return Err(NirError::Format(format!(
                "checkpoint dims disagree: embedder {}, proxies {d}, flow {}",
                embedder.output_dim(),
                flow.dim()
            )));
        }
        Ok(Self { embedder, proxies, flow })
    }
}

pub const EMBEDDER_FILE: &str = "embedder.bin";
pub const PROXIES_FILE: &str = "proxies.bin";
pub const FLOW_FILE: &str = "flow.bin";

const ARRAY_MAGIC: &[u8; 8] = b"NIRARRY\0";
pub const ARRAY_VERSION: u32 = 1;
const KIND_EMBEDDER: u32 = 1;
const KIND_PROXIES: u32 = 2;

/// Header (magic, version, kind, rank, u64 dims, u64 count) then `f32` values.
fn write_array<W: Write>(w: &mut W, kind: u32, dims: &[usize], values: &[f64]) -> Result<()> {
    w.write_all(ARRAY_MAGIC)?;
    for v in [ARRAY_VERSION, kind, dims.len() as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for &d in dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(&(values.len() as u64).to_le_bytes())?;
    for &v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_array<R: Read>(r: &mut R, kind: u32) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != ARRAY_MAGIC {
        return Err(NirError::Format("not an array blob".into()));
    }
    let version = read_u32(r)?;
    if version != ARRAY_VERSION {
        return Err(NirError::VersionMismatch { expected: ARRAY_VERSION, found: version });
    }
    let found = read_u32(r)?;
    if found != kind {
        return Err(NirError::Format(format!("array kind {found}, expected {kind}")));
    }
    let rank = read_u32(r)? as usize;
    let dims = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let count = read_u64(r)? as usize;
    let mut values = Vec::with_capacity(count.min(1 << 24));
    let mut b4 = [0u8; 4];
    for _ in 0..count {
        r.read_exact(&mut b4)?;
        values.push(f32::from_le_bytes(b4) as f64);
    }
    Ok((dims, values))
}
