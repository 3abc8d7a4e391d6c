//! Conditional normalizing flow built from affine coupling blocks.
//!
//! The forward direction maps residuals to embeddings, `psi = tau(zeta | rho)`;
//! the inverse maps embeddings back to residuals. Each block permutes the
//! coordinates, splits them in half, applies
//!
//! ```text
//! y2 = x2 * exp(s1(x1)) + t1(x1)
//! y1 = x1 * exp(s2(y2)) + t2(y2)
//! ```
//!
//! and scatters the result back to the original coordinate order. The
//! subnets optionally see the proxy condition concatenated to
//! their input. Scales are soft-clamped with `c * tanh(s / c)`.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{NirError, Result};

/// Where the proxy condition enters the flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditioningPlacement {
    All,
    Start,
    Mid,
    End,
    /// Unconditional flow.
    None,
}

impl ConditioningPlacement {
    pub const ALL: [ConditioningPlacement; 5] = [
        ConditioningPlacement::All,
        ConditioningPlacement::Start,
        ConditioningPlacement::Mid,
        ConditioningPlacement::End,
        ConditioningPlacement::None,
    ];

    /// Whether block `index` of a `depth`-block flow sees the condition.
    /// `Mid` conditions the ceil(depth / 2)-th block (1-based).
    pub fn conditions(self, index: usize, depth: usize) -> bool {
        match self {
            ConditioningPlacement::All => true,
            ConditioningPlacement::Start => index == 0,
            ConditioningPlacement::Mid => index + 1 == depth.div_ceil(2),
            ConditioningPlacement::End => index + 1 == depth,
            ConditioningPlacement::None => false,
        }
    }

    fn code(self) -> u32 {
        match self {
            ConditioningPlacement::All => 0,
            ConditioningPlacement::Start => 1,
            ConditioningPlacement::Mid => 2,
            ConditioningPlacement::End => 3,
            ConditioningPlacement::None => 4,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.code() == code)
            .ok_or_else(|| NirError::Format(format!("unknown placement code {code}")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConditioningPlacement::All => "all",
            ConditioningPlacement::Start => "start",
            ConditioningPlacement::Mid => "mid",
            ConditioningPlacement::End => "end",
            ConditioningPlacement::None => "none",
        }
    }
}

impl fmt::Display for ConditioningPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditioningPlacement {
    type Err = NirError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| NirError::InvalidConfig(format!("unknown conditioning placement '{s}'")))
    }
}

/// Architecture of a [`ConditionalFlow`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConfig {
    pub dim: usize,
    pub depth: usize,
    pub width: usize,
    pub placement: ConditioningPlacement,
    pub clamp_scale: f64,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            depth: 8,
            width: 128,
            placement: ConditioningPlacement::All,
            clamp_scale: 2.0,
            seed: 0,
        }
    }
}

/// Affine layer `y = x W^T + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    /// He-normal weights, zero bias.
    pub fn he<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let std = (2.0 / input as f64).sqrt();
        Self {
            weight: Array2::from_shape_simple_fn((output, input), || {
                std * rng.sample::<f64, _>(StandardNormal)
            }),
            bias: Array1::zeros(output),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, g_out: ArrayView2<f64>, grad: &mut Dense) -> Array2<f64> {
        grad.weight += &g_out.t().dot(&x);
        grad.bias += &g_out.sum_axis(Axis(0));
        g_out.dot(&self.weight)
    }

    fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Dense network with ReLU between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Layer inputs recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct MlpTape {
    inputs: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.forward_tape(x).0
    }

    pub fn forward_tape(&self, x: ArrayView2<f64>) -> (Array2<f64>, MlpTape) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(a.view());
            inputs.push(a);
            a = if l < last { z.mapv(|v| v.max(0.0)) } else { z };
        }
        (a, MlpTape { inputs })
    }

    pub fn backward(&self, tape: &MlpTape, g_out: ArrayView2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let mut g = g_out.to_owned();
        for l in (0..self.layers.len()).rev() {
            let x = &tape.inputs[l];
            g = self.layers[l].backward(x.view(), g.view(), &mut grad.layers[l]);
            if l > 0 {
                g.zip_mut_with(x, |gi, &xi| {
                    if xi <= 0.0 {
                        *gi = 0.0
                    }
                });
            }
        }
        g
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.weight.ncols(), l.weight.nrows()))
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    pub fn push_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
    }

    /// Reads parameters from the front of `src`, returning the remainder.
    pub fn pull_params<'a>(&mut self, mut src: &'a [f64]) -> &'a [f64] {
        for l in &mut self.layers {
            for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *w = src[0];
                src = &src[1..];
            }
        }
        src
    }
}

/// One affine coupling block.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingBlock {
    pub subnet1: Mlp,
    pub subnet2: Mlp,
    pub permutation: Vec<usize>,
    pub conditional: bool,
    pub clamp_scale: f64,
}

struct BlockTape {
    cond: Array2<f64>,
    x1: Array2<f64>,
    x2: Array2<f64>,
    s1: Array2<f64>,
    s2: Array2<f64>,
    tape1: MlpTape,
    tape2: MlpTape,
}

/// Gradients of a block or flow with respect to its inputs and parameters.
#[derive(Debug, Clone)]
pub struct InputGrads {
    pub d_input: Array2<f64>,
    pub d_cond: Array2<f64>,
}

impl CouplingBlock {
    fn new<R: Rng + ?Sized>(
        dim: usize,
        width: usize,
        conditional: bool,
        clamp_scale: f64,
        rng: &mut R,
    ) -> Self {
        let half = dim / 2;
        let input = half + if conditional { dim } else { 0 };
        let subnet = |rng: &mut R| Mlp {
            layers: vec![
                Dense::he(input, width, rng),
                Dense::he(width, width, rng),
                Dense::zeros(width, 2 * half),
            ],
        };
        let subnet1 = subnet(rng);
        let subnet2 = subnet(rng);
        let mut permutation: Vec<usize> = (0..dim).collect();
        permutation.shuffle(rng);
        Self {
            subnet1,
            subnet2,
            permutation,
            conditional,
            clamp_scale,
        }
    }

    pub fn dim(&self) -> usize {
        self.permutation.len()
    }

    fn half(&self) -> usize {
        self.dim() / 2
    }

    /// Scatters columns back: `out[:, perm[i]] = m[:, i]`.
    fn unpermute(&self, m: Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(m.raw_dim());
        for (i, &p) in self.permutation.iter().enumerate() {
            out.column_mut(p).assign(&m.column(i));
        }
        out
    }

    fn subnet_input(&self, half: ArrayView2<f64>, cond: ArrayView2<f64>) -> Array2<f64> {
        if self.conditional {
            concatenate![Axis(1), half, cond]
        } else {
            half.to_owned()
        }
    }

    /// Runs a subnet and splits its output into clamped scale and translation.
    fn scale_shift(&self, net: &Mlp, input: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>, MlpTape) {
        let h = self.half();
        let (out, tape) = net.forward_tape(input);
        let c = self.clamp_scale;
        let s = out.slice(s![.., ..h]).mapv(|r| c * (r / c).tanh());
        let t = out.slice(s![.., h..]).to_owned();
        (s, t, tape)
    }

    /// Backprop of `(ds, dt)` through the clamp and a subnet. Returns the
    /// gradient split into (half input, condition).
    fn scale_shift_backward(
        &self,
        net: &Mlp,
        tape: &MlpTape,
        s: &Array2<f64>,
        g_s: Array2<f64>,
        g_t: Array2<f64>,
        grad: &mut Mlp,
    ) -> (Array2<f64>, Option<Array2<f64>>) {
        let c = self.clamp_scale;
        let g_raw = g_s * &s.mapv(|v| 1.0 - (v / c) * (v / c));
        let g_out = concatenate![Axis(1), g_raw, g_t];
        let g_in = net.backward(tape, g_out.view(), grad);
        let h = self.half();
        let g_half = g_in.slice(s![.., ..h]).to_owned();
        let g_cond = self.conditional.then(|| g_in.slice(s![.., h..]).to_owned());
        (g_half, g_cond)
    }

    fn check(&self, x: ArrayView2<f64>, cond: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(NirError::DimensionMismatch {
                what: "flow input dimension",
                expected: self.dim(),
                got: x.ncols(),
            });
        }
        if self.conditional && (cond.ncols() != self.dim() || cond.nrows() != x.nrows()) {
            return Err(NirError::DimensionMismatch {
                what: "flow condition shape",
                expected: self.dim(),
                got: cond.ncols(),
            });
        }
        Ok(())
    }

    fn forward_tape(&self, x: ArrayView2<f64>, cond: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>, BlockTape) {
        let h = self.half();
        let xp = x.select(Axis(1), &self.permutation);
        let x1 = xp.slice(s![.., ..h]).to_owned();
        let x2 = xp.slice(s![.., h..]).to_owned();
        let (s1, t1, tape1) = self.scale_shift(&self.subnet1, self.subnet_input(x1.view(), cond).view());
        let y2 = &x2 * &s1.mapv(f64::exp) + &t1;
        let (s2, t2, tape2) = self.scale_shift(&self.subnet2, self.subnet_input(y2.view(), cond).view());
        let y1 = &x1 * &s2.mapv(f64::exp) + &t2;
        let logdet = s1.sum_axis(Axis(1)) + s2.sum_axis(Axis(1));
        let y = self.unpermute(concatenate![Axis(1), y1, y2]);
        let tape = BlockTape {
            cond: cond.to_owned(),
            x1,
            x2,
            s1,
            s2,
            tape1,
            tape2,
        };
        (y, logdet, tape)
    }

    fn inverse_tape(&self, y: ArrayView2<f64>, cond: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>, BlockTape) {
        let h = self.half();
        let yp = y.select(Axis(1), &self.permutation);
        let y1 = yp.slice(s![.., ..h]);
        let y2 = yp.slice(s![.., h..]);
        let (s2, t2, tape2) = self.scale_shift(&self.subnet2, self.subnet_input(y2, cond).view());
        let x1 = (&y1 - &t2) * &s2.mapv(|v| (-v).exp());
        let (s1, t1, tape1) = self.scale_shift(&self.subnet1, self.subnet_input(x1.view(), cond).view());
        let x2 = (&y2 - &t1) * &s1.mapv(|v| (-v).exp());
        let logdet_inv = -(s1.sum_axis(Axis(1)) + s2.sum_axis(Axis(1)));
        let x = self.unpermute(concatenate![Axis(1), x1, x2]);
        let tape = BlockTape {
            cond: cond.to_owned(),
            x1,
            x2,
            s1,
            s2,
            tape1,
            tape2,
        };
        (x, logdet_inv, tape)
    }

    /// Backprop through the forward map given `dL/dy` and the per-row
    /// weight `dL/dlogdet`.
    fn forward_backward(
        &self,
        tape: &BlockTape,
        g_y: ArrayView2<f64>,
        g_logdet: ArrayView1<f64>,
        grad: &mut CouplingBlock,
    ) -> InputGrads {
        let h = self.half();
        let gld = g_logdet.insert_axis(Axis(1));
        let g_yp = g_y.select(Axis(1), &self.permutation);
        let g_y1 = g_yp.slice(s![.., ..h]);
        let mut g_y2 = g_yp.slice(s![.., h..]).to_owned();
        let mut g_cond = Array2::zeros(tape.cond.raw_dim());

        let e2 = tape.s2.mapv(f64::exp);
        let mut g_x1 = &g_y1 * &e2;
        let g_s2 = &g_y1 * &tape.x1 * &e2 + &gld;
        let (g_half, g_c) = self.scale_shift_backward(
            &self.subnet2,
            &tape.tape2,
            &tape.s2,
            g_s2,
            g_y1.to_owned(),
            &mut grad.subnet2,
        );
        g_y2 += &g_half;
        if let Some(gc) = g_c {
            g_cond += &gc;
        }

        let e1 = tape.s1.mapv(f64::exp);
        let g_x2 = &g_y2 * &e1;
        let g_s1 = &g_y2 * &tape.x2 * &e1 + &gld;
        let (g_half, g_c) =
            self.scale_shift_backward(&self.subnet1, &tape.tape1, &tape.s1, g_s1, g_y2, &mut grad.subnet1);
        g_x1 += &g_half;
        if let Some(gc) = g_c {
            g_cond += &gc;
        }

        InputGrads {
            d_input: self.unpermute(concatenate![Axis(1), g_x1, g_x2]),
            d_cond: g_cond,
        }
    }

    /// Backprop through the inverse map given `dL/dx` and the per-row
    /// weight `dL/dlogdet_inv`.
    fn inverse_backward(
        &self,
        tape: &BlockTape,
        g_x: ArrayView2<f64>,
        g_logdet: ArrayView1<f64>,
        grad: &mut CouplingBlock,
    ) -> InputGrads {
        let h = self.half();
        let gld = g_logdet.insert_axis(Axis(1));
        let g_xp = g_x.select(Axis(1), &self.permutation);
        let mut g_x1 = g_xp.slice(s![.., ..h]).to_owned();
        let g_x2 = g_xp.slice(s![.., h..]);
        let mut g_cond = Array2::zeros(tape.cond.raw_dim());

        let e1 = tape.s1.mapv(|v| (-v).exp());
        let mut g_y2 = &g_x2 * &e1;
        let g_t1 = -&g_y2;
        let g_s1 = -(&g_x2 * &tape.x2) - &gld;
        let (g_half, g_c) =
            self.scale_shift_backward(&self.subnet1, &tape.tape1, &tape.s1, g_s1, g_t1, &mut grad.subnet1);
        g_x1 += &g_half;
        if let Some(gc) = g_c {
            g_cond += &gc;
        }

        let e2 = tape.s2.mapv(|v| (-v).exp());
        let g_y1 = &g_x1 * &e2;
        let g_t2 = -&g_y1;
        let g_s2 = -(&g_x1 * &tape.x1) - &gld;
        let (g_half, g_c) =
            self.scale_shift_backward(&self.subnet2, &tape.tape2, &tape.s2, g_s2, g_t2, &mut grad.subnet2);
        g_y2 += &g_half;
        if let Some(gc) = g_c {
            g_cond += &gc;
        }

        InputGrads {
            d_input: self.unpermute(concatenate![Axis(1), g_y1, g_y2]),
            d_cond: g_cond,
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>, cond: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        self.check(x, cond)?;
        let (y, ld, _) = self.forward_tape(x, cond);
        Ok((y, ld))
    }

    pub fn inverse(&self, y: ArrayView2<f64>, cond: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        self.check(y, cond)?;
        let (x, ld, _) = self.inverse_tape(y, cond);
        Ok((x, ld))
    }

    fn zeros_like(&self) -> Self {
        Self {
            subnet1: self.subnet1.zeros_like(),
            subnet2: self.subnet2.zeros_like(),
            permutation: self.permutation.clone(),
            conditional: self.conditional,
            clamp_scale: self.clamp_scale,
        }
    }
}

/// Single-vector forward pass of one block.
pub fn coupling_forward(
    x: ArrayView1<f64>,
    cond: ArrayView1<f64>,
    block: &CouplingBlock,
) -> Result<(Array1<f64>, f64)> {
    let (y, ld) = block.forward(x.insert_axis(Axis(0)), cond.insert_axis(Axis(0)))?;
    Ok((y.row(0).to_owned(), ld[0]))
}

/// Single-vector inverse pass of one block.
pub fn coupling_inverse(
    y: ArrayView1<f64>,
    cond: ArrayView1<f64>,
    block: &CouplingBlock,
) -> Result<(Array1<f64>, f64)> {
    let (x, ld) = block.inverse(y.insert_axis(Axis(0)), cond.insert_axis(Axis(0)))?;
    Ok((x.row(0).to_owned(), ld[0]))
}

/// Gradients of a scalar objective through a flow pass.
#[derive(Debug, Clone)]
pub struct FlowGrads {
    pub d_input: Array2<f64>,
    pub d_cond: Array2<f64>,
    /// Flat parameter gradient in [`ConditionalFlow::params`] order.
    pub d_params: Vec<f64>,
}

/// Result of [`flow_grad`]: `sum_i (|zeta_i|^2 - logdet_inv_i)` and its
/// gradients with respect to `psi`, `rho` and the flow parameters.
#[derive(Debug, Clone)]
pub struct FlowObjective {
    pub value: f64,
    pub zeta: Array2<f64>,
    pub logdet_inv: Array1<f64>,
    pub grads: FlowGrads,
}

/// A stack of coupling blocks conditioned on class proxies.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalFlow {
    pub config: FlowConfig,
    pub blocks: Vec<CouplingBlock>,
}

impl ConditionalFlow {
    pub fn new(config: FlowConfig) -> Result<Self> {
        if config.dim < 2 || config.dim % 2 != 0 {
            return Err(NirError::InvalidConfig(format!(
                "flow dimension must be even and at least 2, got {}",
                config.dim
            )));
        }
        if config.depth > 0 && config.width == 0 {
            return Err(NirError::InvalidConfig("flow width must be positive".into()));
        }
        if !(config.clamp_scale > 0.0) {
            return Err(NirError::InvalidConfig(format!(
                "clamp_scale must be positive, got {}",
                config.clamp_scale
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let blocks = (0..config.depth)
            .map(|k| {
                CouplingBlock::new(
                    config.dim,
                    config.width,
                    config.placement.conditions(k, config.depth),
                    config.clamp_scale,
                    &mut rng,
                )
            })
            .collect();
        Ok(Self { config, blocks })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    fn check(&self, x: ArrayView2<f64>, cond: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(NirError::DimensionMismatch {
                what: "flow input dimension",
                expected: self.dim(),
                got: x.ncols(),
            });
        }
        if cond.nrows() != x.nrows() {
            return Err(NirError::DimensionMismatch {
                what: "flow condition rows",
                expected: x.nrows(),
                got: cond.nrows(),
            });
        }
        if cond.ncols() != self.dim() {
            return Err(NirError::DimensionMismatch {
                what: "flow condition dimension",
                expected: self.dim(),
                got: cond.ncols(),
            });
        }
        Ok(())
    }

    /// `psi = tau(zeta | rho)` with the per-row log-determinant.
    pub fn forward(&self, zeta: ArrayView2<f64>, rho: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        let (y, per_block) = self.forward_per_block(zeta, rho)?;
        let mut total = Array1::zeros(zeta.nrows());
        for ld in per_block {
            total += &ld;
        }
        Ok((y, total))
    }

    /// Forward pass that also reports each block's log-determinant.
    pub fn forward_per_block(
        &self,
        zeta: ArrayView2<f64>,
        rho: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Vec<Array1<f64>>)> {
        self.check(zeta, rho)?;
        let mut x = zeta.to_owned();
        let mut lds = Vec::with_capacity(self.depth());
        for b in &self.blocks {
            let (y, ld, _) = b.forward_tape(x.view(), rho);
            x = y;
            lds.push(ld);
        }
        Ok((x, lds))
    }

    /// `zeta = tau^{-1}(psi | rho)` with `log|det J_{tau^{-1}}|` per row.
    pub fn inverse(&self, psi: ArrayView2<f64>, rho: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        self.check(psi, rho)?;
        let mut x = psi.to_owned();
        let mut total = Array1::zeros(psi.nrows());
        for b in self.blocks.iter().rev() {
            let (y, ld, _) = b.inverse_tape(x.view(), rho);
            x = y;
            total += &ld;
        }
        Ok((x, total))
    }

    /// Inverse pass followed by reverse-mode differentiation of
    /// `sum_i <g_zeta_i, zeta_i> + g_logdet_i * logdet_inv_i`.
    pub fn inverse_backward(
        &self,
        psi: ArrayView2<f64>,
        rho: ArrayView2<f64>,
        g_zeta: impl FnOnce(&Array2<f64>, &Array1<f64>) -> (Array2<f64>, Array1<f64>),
    ) -> Result<(Array2<f64>, Array1<f64>, FlowGrads)> {
        self.check(psi, rho)?;
        let mut x = psi.to_owned();
        let mut total = Array1::zeros(psi.nrows());
        let mut tapes = Vec::with_capacity(self.depth());
        for b in self.blocks.iter().rev() {
            let (y, ld, tape) = b.inverse_tape(x.view(), rho);
            x = y;
            total += &ld;
            tapes.push(tape);
        }
        let (mut g, g_ld) = g_zeta(&x, &total);
        let mut grad = self.zeros_like();
        let mut g_cond = Array2::zeros(rho.raw_dim());
        // tapes were pushed in reverse block order
        for (k, tape) in tapes.iter().enumerate().rev() {
            let bi = self.depth() - 1 - k;
            let ig = self.blocks[bi].inverse_backward(tape, g.view(), g_ld.view(), &mut grad.blocks[bi]);
            g = ig.d_input;
            g_cond += &ig.d_cond;
        }
        Ok((
            x,
            total,
            FlowGrads {
                d_input: g,
                d_cond: g_cond,
                d_params: grad.params(),
            },
        ))
    }

    /// Forward pass followed by reverse-mode differentiation of
    /// `sum_i <g_psi_i, psi_i> + g_logdet_i * logdet_i`.
    pub fn forward_backward(
        &self,
        zeta: ArrayView2<f64>,
        rho: ArrayView2<f64>,
        g_psi: impl FnOnce(&Array2<f64>, &Array1<f64>) -> (Array2<f64>, Array1<f64>),
    ) -> Result<(Array2<f64>, Array1<f64>, FlowGrads)> {
        self.check(zeta, rho)?;
        let mut x = zeta.to_owned();
        let mut total = Array1::zeros(zeta.nrows());
        let mut tapes = Vec::with_capacity(self.depth());
        for b in &self.blocks {
            let (y, ld, tape) = b.forward_tape(x.view(), rho);
            x = y;
            total += &ld;
            tapes.push(tape);
        }
        let (mut g, g_ld) = g_psi(&x, &total);
        let mut grad = self.zeros_like();
        let mut g_cond = Array2::zeros(rho.raw_dim());
        for (bi, tape) in tapes.iter().enumerate().rev() {
            let ig = self.blocks[bi].forward_backward(tape, g.view(), g_ld.view(), &mut grad.blocks[bi]);
            g = ig.d_input;
            g_cond += &ig.d_cond;
        }
        Ok((
            x,
            total,
            FlowGrads {
                d_input: g,
                d_cond: g_cond,
                d_params: grad.params(),
            },
        ))
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            blocks: self.blocks.iter().map(CouplingBlock::zeros_like).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.subnet1.num_params() + b.subnet2.num_params())
            .sum()
    }

    /// All subnet parameters flattened block by block.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for b in &self.blocks {
            b.subnet1.push_params(&mut out);
            b.subnet2.push_params(&mut out);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(NirError::ShapeMismatch {
                group: "flow".into(),
                params: self.num_params(),
                grads: params.len(),
            });
        }
        let mut rest = params;
        for b in &mut self.blocks {
            rest = b.subnet1.pull_params(rest);
            rest = b.subnet2.pull_params(rest);
        }
        Ok(())
    }

    /// Writes the versioned little-endian checkpoint blob.
    pub fn write_blob<W: Write>(&self, mut w: W) -> Result<()> {
        let c = &self.config;
        w.write_all(FLOW_MAGIC)?;
        w.write_all(&FLOW_VERSION.to_le_bytes())?;
        for v in [c.depth as u32, c.width as u32, c.dim as u32, c.placement.code()] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&c.clamp_scale.to_le_bytes())?;
        w.write_all(&c.seed.to_le_bytes())?;
        let params = self.params();
        w.write_all(&(params.len() as u64).to_le_bytes())?;
        for p in params {
            w.write_all(&(p as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_blob<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != FLOW_MAGIC {
            return Err(NirError::Format("not a flow blob".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FLOW_VERSION {
            return Err(NirError::VersionMismatch {
                expected: FLOW_VERSION,
                found: version,
            });
        }
        let depth = read_u32(&mut r)? as usize;
        let width = read_u32(&mut r)? as usize;
        let dim = read_u32(&mut r)? as usize;
        let placement = ConditioningPlacement::from_code(read_u32(&mut r)?)?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let clamp_scale = f64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let seed = u64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        let mut flow = ConditionalFlow::new(FlowConfig {
            dim,
            depth,
            width,
            placement,
            clamp_scale,
            seed,
        })?;
        if count != flow.num_params() {
            return Err(NirError::Format(format!(
                "flow blob holds {count} parameters, architecture needs {}",
                flow.num_params()
            )));
        }
        let mut params = Vec::with_capacity(count);
        let mut b4 = [0u8; 4];
        for _ in 0..count {
            r.read_exact(&mut b4)?;
            params.push(f32::from_le_bytes(b4) as f64);
        }
        flow.set_params(&params)?;
        Ok(flow)
    }

    /// Rounds every parameter to the nearest `f32`, matching what a blob
    /// round trip preserves.
    pub fn quantize(&mut self) {
        let p: Vec<f64> = self.params().into_iter().map(|v| v as f32 as f64).collect();
        self.set_params(&p).expect("same architecture");
    }
}

const FLOW_MAGIC: &[u8; 8] = b"NIRFLOW\0";
pub const FLOW_VERSION: u32 = 1;

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Batched forward pass; see [`ConditionalFlow::forward`].
pub fn flow_forward(
    zeta: ArrayView2<f64>,
    rho: ArrayView2<f64>,
    flow: &ConditionalFlow,
) -> Result<(Array2<f64>, Array1<f64>)> {
    flow.forward(zeta, rho)
}

/// Batched inverse pass; see [`ConditionalFlow::inverse`].
pub fn flow_inverse(
    psi: ArrayView2<f64>,
    rho: ArrayView2<f64>,
    flow: &ConditionalFlow,
) -> Result<(Array2<f64>, Array1<f64>)> {
    flow.inverse(psi, rho)
}

/// Value and gradients of `sum_i (|zeta_i|^2 - logdet_inv_i)` where
/// `zeta = tau^{-1}(psi | rho)`.
pub fn flow_grad(psi: ArrayView2<f64>, rho: ArrayView2<f64>, flow: &ConditionalFlow) -> Result<FlowObjective> {
    let (zeta, logdet_inv, grads) =
        flow.inverse_backward(psi, rho, |z, ld| (z * 2.0, Array1::from_elem(ld.len(), -1.0)))?;
    let value = zeta.iter().map(|v| v * v).sum::<f64>() - logdet_inv.sum();
    Ok(FlowObjective {
        value,
        zeta,
        logdet_inv,
        grads,
    })
}

/// Standard normal prior over residuals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ResidualPrior;

impl ResidualPrior {
    /// Per-row log-density of `N(0, I)`.
    pub fn log_prob(&self, zeta: ArrayView2<f64>) -> Array1<f64> {
        let d = zeta.ncols() as f64;
        let c = -0.5 * d * (2.0 * std::f64::consts::PI).ln();
        zeta.map_axis(Axis(1), |r| c - 0.5 * r.dot(&r))
    }

    pub fn sample(&self, n: usize, d: usize, seed: u64) -> Array2<f64> {
        sample_residual(n, d, seed)
    }
}

/// I.i.d. standard normal `n x d` matrix, deterministic in `seed`.
pub fn sample_residual(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_residual_with(n, d, &mut rng)
}

pub fn sample_residual_with<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal))
}
