//! Flat parameter layout and the per-step subnetworks.
//!
//! All trainable scalars live in one vector `θ`. With two hidden layers of
//! width `d` the blocks sit at the canonical offsets:
//!
//! | block | offset (0-based) | shape |
//! |---|---|---|
//! | `Y0` | `0` | scalar |
//! | `Z0` | `1` | `d` |
//! | `G0` | `d + 1` | `d × d`, row-major |
//! | `A0` | `d² + d + 1` | `d` |
//! | `A_n` layers | `(nd+1)(d+1)`, `((N+n)d+1)(d+1)`, `((2N+n)d+1)(d+1)` | `d × d` + bias |
//! | `G_n` layers | `((3N+n)d+1)(d+1)`, `((4N+n)d+1)(d+1)`, `(5Nd+nd²+1)(d+1)` | last is `d² × d` + bias |
//!
//! for `n = 1..N-1`, giving `ν = (5Nd + Nd² + 1)(d + 1)`. Any other
//! architecture is packed sequentially after the heads. Batch-norm scales
//! and shifts, and network heads, are appended after the base layout.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tensor::{Gradients, NodeId, Tape, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayoutError {
    #[error("block {block} at offset {offset} with length {len} exceeds nu = {nu}")]
    Overflow {
        block: String,
        offset: usize,
        len: usize,
        nu: usize,
    },
    #[error("blocks {first} and {second} overlap")]
    Overlap { first: String, second: String },
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("parameter vector has length {got}, layout needs {expected}")]
    Length { expected: usize, got: usize },
    #[error("no subnetwork {0}")]
    MissingSubnet(String),
    #[error("input has dimension {got}, expected {expected}")]
    Input { expected: usize, got: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Free parameters `Y0, Z0, G0, A0`.
    Constant,
    /// Subnetworks of the start point for `Y0`, `Z0` and for `A`, `G` at step 0.
    Network,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    /// Interval for the initial value head.
    pub y0_range: (f64, f64),
    /// Half-width of the uniform law for the other constant heads.
    pub head_scale: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            y0_range: (0.0, 1.0),
            head_scale: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub dim: usize,
    pub steps: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub use_batchnorm: bool,
    /// Fixed factor on every `A_n` and `G_n` output, including the `A_0`, `G_0` heads.
    #[serde(default = "unit_gain")]
    pub output_gain: f64,
    /// Batch-normalize the raw state before the first affine layer.
    pub normalize_input: bool,
    pub heads: HeadKind,
    pub init: InitConfig,
}

impl NetworkConfig {
    /// Two hidden layers of width `d`, constant heads, no batch norm.
    pub fn canonical(dim: usize, steps: usize) -> Self {
        Self {
            dim,
            steps,
            hidden_layers: 2,
            hidden_width: dim,
            use_batchnorm: false,
            output_gain: 1.0,
            normalize_input: false,
            heads: HeadKind::Constant,
            init: InitConfig::default(),
        }
    }

    pub fn is_canonical(&self) -> bool {
        self.hidden_layers == 2 && self.hidden_width == self.dim
    }

    fn validate(&self) -> Result<(), LayoutError> {
        if self.dim == 0 {
            return Err(LayoutError::Config("dimension must be positive".into()));
        }
        if self.steps == 0 {
            return Err(LayoutError::Config("need at least one time step".into()));
        }
        if self.hidden_width == 0 {
            return Err(LayoutError::Config("hidden width must be positive".into()));
        }
        let (lo, hi) = self.init.y0_range;
        if !(lo <= hi) || !self.init.head_scale.is_finite() || self.init.head_scale < 0.0 {
            return Err(LayoutError::Config("bad initialization ranges".into()));
        }
        if !(self.output_gain.is_finite() && self.output_gain > 0.0) {
            return Err(LayoutError::Config("output gain must be positive".into()));
        }
        Ok(())
    }
}

/// `x ↦ Wx + b` with `W` (`out × inp`) row-major at `offset`, then `b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Affine {
    pub offset: usize,
    pub out_dim: usize,
    pub in_dim: usize,
    /// Batch-norm slot applied to this layer's output.
    pub bn: Option<usize>,
}

impl Affine {
    pub fn len(&self) -> usize {
        self.out_dim * (self.in_dim + 1)
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Subnet {
    pub input_bn: Option<usize>,
    pub layers: Vec<Affine>,
}

impl Subnet {
    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }
}

/// Learned scale at `offset`, shift at `offset + width`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnSlot {
    pub offset: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubnetId {
    A(usize),
    G(usize),
    /// Initial value head.
    U,
    /// Initial gradient head.
    V,
}

impl fmt::Display for SubnetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubnetId::A(n) => write!(f, "A[{n}]"),
            SubnetId::G(n) => write!(f, "G[{n}]"),
            SubnetId::U => write!(f, "U"),
            SubnetId::V => write!(f, "V"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub dim: usize,
    pub steps: usize,
    pub nu: usize,
    pub canonical: bool,
    pub constant_heads: bool,
    /// Indexed by step; `None` where the constant head is used.
    pub a: Vec<Option<Subnet>>,
    pub g: Vec<Option<Subnet>>,
    pub u: Option<Subnet>,
    pub v: Option<Subnet>,
    pub bn_slots: Vec<BnSlot>,
}

struct Packer {
    next: usize,
    slots: Vec<BnSlot>,
}

impl Packer {
    fn affine(&mut self, out_dim: usize, in_dim: usize) -> Affine {
        let a = Affine {
            offset: self.next,
            out_dim,
            in_dim,
            bn: None,
        };
        self.next += a.len();
        a
    }

    fn subnet(&mut self, widths: &[usize]) -> Subnet {
        let layers = widths.windows(2).map(|w| self.affine(w[1], w[0])).collect();
        Subnet {
            input_bn: None,
            layers,
        }
    }

    fn slot(&mut self, width: usize) -> usize {
        self.slots.push(BnSlot {
            offset: self.next,
            width,
        });
        self.next += 2 * width;
        self.slots.len() - 1
    }

    fn attach_bn(&mut self, net: &mut Subnet, hidden: bool, input: bool) {
        if input {
            net.input_bn = Some(self.slot(net.in_dim()));
        }
        if hidden {
            let count = net.layers.len() - 1;
            for layer in &mut net.layers[..count] {
                layer.bn = Some(self.slot(layer.out_dim));
            }
        }
    }
}

impl Layout {
    pub fn build(cfg: &NetworkConfig) -> Result<Self, LayoutError> {
        cfg.validate()?;
        let (d, big_n) = (cfg.dim, cfg.steps);
        let mut widths = vec![d];
        widths.extend(std::iter::repeat_n(cfg.hidden_width, cfg.hidden_layers));
        let a_widths = [widths.clone(), vec![d]].concat();
        let g_widths = [widths.clone(), vec![d * d]].concat();

        let mut a: Vec<Option<Subnet>> = vec![None; big_n];
        let mut g: Vec<Option<Subnet>> = vec![None; big_n];
        let heads = (d + 1) * (d + 1);
        let canonical = cfg.is_canonical();
        let mut packer = Packer {
            next: heads,
            slots: Vec::new(),
        };
        if canonical {
            let at = |k: usize, out: usize| Affine {
                offset: k * (d + 1),
                out_dim: out,
                in_dim: d,
                bn: None,
            };
            for n in 1..big_n {
                a[n] = Some(Subnet {
                    input_bn: None,
                    layers: vec![
                        at(n * d + 1, d),
                        at((big_n + n) * d + 1, d),
                        at((2 * big_n + n) * d + 1, d),
                    ],
                });
                g[n] = Some(Subnet {
                    input_bn: None,
                    layers: vec![
                        at((3 * big_n + n) * d + 1, d),
                        at((4 * big_n + n) * d + 1, d),
                        at(5 * big_n * d + n * d * d + 1, d * d),
                    ],
                });
            }
            packer.next = (5 * big_n * d + big_n * d * d + 1) * (d + 1);
        } else {
            for n in 1..big_n {
                a[n] = Some(packer.subnet(&a_widths));
            }
            for n in 1..big_n {
                g[n] = Some(packer.subnet(&g_widths));
            }
        }
        let (mut u, mut v) = (None, None);
        if cfg.heads == HeadKind::Network {
            u = Some(packer.subnet(&[widths.clone(), vec![1]].concat()));
            v = Some(packer.subnet(&[widths.clone(), vec![d]].concat()));
            a[0] = Some(packer.subnet(&a_widths));
            g[0] = Some(packer.subnet(&g_widths));
        }
        // Step 0 sees a single start point, so its nets never get batch norm.
        for n in 1..big_n {
            for net in [&mut a[n], &mut g[n]] {
                if let Some(net) = net.as_mut() {
                    packer.attach_bn(net, cfg.use_batchnorm, cfg.normalize_input);
                }
            }
        }
        let layout = Layout {
            dim: d,
            steps: big_n,
            nu: packer.next,
            canonical,
            constant_heads: cfg.heads == HeadKind::Constant,
            a,
            g,
            u,
            v,
            bn_slots: packer.slots,
        };
        layout.check()?;
        Ok(layout)
    }

    pub fn subnet(&self, id: SubnetId) -> Option<&Subnet> {
        match id {
            SubnetId::A(n) => self.a.get(n)?.as_ref(),
            SubnetId::G(n) => self.g.get(n)?.as_ref(),
            SubnetId::U => self.u.as_ref(),
            SubnetId::V => self.v.as_ref(),
        }
    }

    /// Every named block with its index range in `θ`.
    pub fn blocks(&self) -> Vec<(String, Range<usize>)> {
        let d = self.dim;
        let mut out = Vec::new();
        if self.constant_heads {
            out.push(("Y0".to_string(), 0..1));
            out.push(("Z0".to_string(), 1..d + 1));
            out.push(("G0".to_string(), d + 1..d * d + d + 1));
            out.push(("A0".to_string(), d * d + d + 1..(d + 1) * (d + 1)));
        }
        let mut ids: Vec<SubnetId> = (0..self.steps).map(SubnetId::A).collect();
        ids.extend((0..self.steps).map(SubnetId::G));
        ids.extend([SubnetId::U, SubnetId::V]);
        for id in ids {
            if let Some(net) = self.subnet(id) {
                for (i, layer) in net.layers.iter().enumerate() {
                    out.push((format!("{id}.layer{i}"), layer.range()));
                }
            }
        }
        for (i, s) in self.bn_slots.iter().enumerate() {
            out.push((format!("bn{i}.scale"), s.offset..s.offset + s.width));
            out.push((
                format!("bn{i}.shift"),
                s.offset + s.width..s.offset + 2 * s.width,
            ));
        }
        out
    }

    /// Checks that every block fits inside `θ` and that no two overlap.
    pub fn check(&self) -> Result<(), LayoutError> {
        let mut blocks = self.blocks();
        for (name, r) in &blocks {
            if r.end > self.nu {
                return Err(LayoutError::Overflow {
                    block: name.clone(),
                    offset: r.start,
                    len: r.len(),
                    nu: self.nu,
                });
            }
        }
        blocks.sort_by_key(|(_, r)| (r.start, r.end));
        for w in blocks.windows(2) {
            if w[1].1.start < w[0].1.end {
                return Err(LayoutError::Overlap {
                    first: w[0].0.clone(),
                    second: w[1].0.clone(),
                });
            }
        }
        Ok(())
    }

    /// Maximal index ranges of `θ` not covered by any block.
    pub fn unused(&self) -> Vec<Range<usize>> {
        let mut ranges: Vec<Range<usize>> = self.blocks().into_iter().map(|(_, r)| r).collect();
        ranges.sort_by_key(|r| r.start);
        let mut gaps = Vec::new();
        let mut pos = 0;
        for r in ranges {
            if r.start > pos {
                gaps.push(pos..r.start);
            }
            pos = pos.max(r.end);
        }
        if pos < self.nu {
            gaps.push(pos..self.nu);
        }
        gaps
    }
}

/// Canonical parameter count `(5Nd + Nd² + 1)(d + 1)`.
fn unit_gain() -> f64 {
    1.0
}

pub fn canonical_nu(dim: usize, steps: usize) -> usize {
    (5 * steps * dim + steps * dim * dim + 1) * (dim + 1)
}

/// The flat vector `θ ∈ R^ν`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    theta: Vec<f64>,
}

impl ParamVector {
    pub fn new(theta: Vec<f64>) -> Self {
        Self { theta }
    }

    pub fn zeros(nu: usize) -> Self {
        Self {
            theta: vec![0.0; nu],
        }
    }

    pub fn nu(&self) -> usize {
        self.theta.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.theta
    }
}

/// `W x + b` with the block starting at 0-based offset `v`.
pub fn affine_apply(
    theta: &[f64],
    v: usize,
    k: usize,
    l: usize,
    x: &[f64],
) -> Result<Vec<f64>, LayoutError> {
    if v + k * (l + 1) > theta.len() {
        return Err(LayoutError::Overflow {
            block: "affine".into(),
            offset: v,
            len: k * (l + 1),
            nu: theta.len(),
        });
    }
    if x.len() != l {
        return Err(LayoutError::Input {
            expected: l,
            got: x.len(),
        });
    }
    let w = &theta[v..v + k * l];
    let b = &theta[v + k * l..v + k * l + k];
    Ok((0..k)
        .map(|i| {
            b[i] + w[i * l..(i + 1) * l]
                .iter()
                .zip(x)
                .map(|(a, c)| a * c)
                .sum::<f64>()
        })
        .collect())
}

pub fn rectifier(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Running batch-norm statistics, one pair of vectors per slot.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub momentum: f64,
    pub epsilon: f64,
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
}

impl BatchNormState {
    pub const MOMENTUM: f64 = 0.99;
    pub const EPSILON: f64 = 1e-6;

    pub fn new(layout: &Layout) -> Self {
        Self {
            momentum: Self::MOMENTUM,
            epsilon: Self::EPSILON,
            mean: layout.bn_slots.iter().map(|s| vec![0.0; s.width]).collect(),
            var: layout.bn_slots.iter().map(|s| vec![1.0; s.width]).collect(),
        }
    }

    /// `running ← momentum·running + (1 − momentum)·batch`.
    pub fn update(&mut self, slot: usize, batch_mean: &[f64], batch_var: &[f64]) {
        let m = self.momentum;
        for (r, b) in self.mean[slot].iter_mut().zip(batch_mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.var[slot].iter_mut().zip(batch_var) {
            *r = (m * *r + (1.0 - m) * b).max(0.0);
        }
    }

    fn apply_eval(&self, slot: usize, theta: &[f64], s: &BnSlot, x: &mut [f64]) {
        for (c, v) in x.iter_mut().enumerate() {
            let inv = 1.0 / (self.var[slot][c] + self.epsilon).sqrt();
            *v = (*v - self.mean[slot][c]) * inv * theta[s.offset + c]
                + theta[s.offset + s.width + c];
        }
    }
}

/// Whether batch norm uses batch statistics (and updates the running ones).
pub enum BnMode<'a> {
    Train(&'a mut BatchNormState),
    Eval(&'a BatchNormState),
}

/// Initial values read off the constant heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Heads {
    pub y0: f64,
    pub z0: Vec<f64>,
    pub g0: Tensor,
    pub a0: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    layout: Layout,
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self, LayoutError> {
        let layout = Layout::build(&config)?;
        Ok(Self { config, layout })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn nu(&self) -> usize {
        self.layout.nu
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    fn check_len(&self, theta: &ParamVector) -> Result<(), LayoutError> {
        if theta.nu() < self.layout.nu {
            return Err(LayoutError::Length {
                expected: self.layout.nu,
                got: theta.nu(),
            });
        }
        Ok(())
    }

    /// Glorot-uniform weights, zero biases, unit batch-norm scales.
    pub fn init(&self, seed: u64) -> ParamVector {
        let mut rng = rng::stream(rng::derive(seed, &[0x1417]), 0);
        let mut theta = vec![0.0; self.layout.nu];
        let d = self.layout.dim;
        let init = &self.config.init;
        if self.layout.constant_heads {
            let (lo, hi) = init.y0_range;
            theta[0] = lo + (hi - lo) * rng.random::<f64>();
            let s = init.head_scale;
            for v in &mut theta[1..(d + 1) * (d + 1)] {
                *v = s * (2.0 * rng.random::<f64>() - 1.0);
            }
        }
        let nets = self
            .layout
            .a
            .iter()
            .chain(&self.layout.g)
            .chain([&self.layout.u, &self.layout.v]);
        for net in nets.flatten() {
            for layer in &net.layers {
                let bound = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
                let w = layer.offset..layer.offset + layer.in_dim * layer.out_dim;
                for v in &mut theta[w] {
                    *v = bound * (2.0 * rng.random::<f64>() - 1.0);
                }
            }
        }
        for s in &self.layout.bn_slots {
            theta[s.offset..s.offset + s.width].fill(1.0);
        }
        ParamVector::new(theta)
    }

    /// `Y0 = θ_1`, `Z0 = θ_2..θ_{d+1}`, `G0`, `A0` from the constant heads.
    pub fn head_initial_values(&self, theta: &ParamVector) -> Result<Heads, LayoutError> {
        let d = self.layout.dim;
        let need = (d + 1) * (d + 1);
        if theta.nu() < need {
            return Err(LayoutError::Length {
                expected: need,
                got: theta.nu(),
            });
        }
        let t = theta.as_slice();
        let k = self.config.output_gain;
        let scaled = |r: std::ops::Range<usize>| t[r].iter().map(|v| k * v).collect::<Vec<_>>();
        Ok(Heads {
            y0: t[0],
            z0: t[1..d + 1].to_vec(),
            g0: Tensor::new(d, d, scaled(d + 1..d * d + d + 1)).expect("d*d entries"),
            a0: scaled(d * d + d + 1..need),
        })
    }

    /// Plain evaluation of a subnetwork at one point.
    ///
    /// Batch norm, if configured, uses the running statistics in `bn`
    /// (fresh statistics when `None`).
    pub fn eval(
        &self,
        theta: &ParamVector,
        id: SubnetId,
        x: &[f64],
        bn: Option<&BatchNormState>,
    ) -> Result<Vec<f64>, LayoutError> {
        self.check_len(theta)?;
        let net = self
            .layout
            .subnet(id)
            .ok_or_else(|| LayoutError::MissingSubnet(id.to_string()))?;
        let fresh;
        let bn = match bn {
            Some(b) => b,
            None => {
                fresh = BatchNormState::new(&self.layout);
                &fresh
            }
        };
        let t = theta.as_slice();
        let mut h = x.to_vec();
        if let Some(slot) = net.input_bn {
            bn.apply_eval(slot, t, &self.layout.bn_slots[slot], &mut h);
        }
        let last = net.layers.len() - 1;
        for (i, layer) in net.layers.iter().enumerate() {
            h = affine_apply(t, layer.offset, layer.out_dim, layer.in_dim, &h)?;
            if let Some(slot) = layer.bn {
                bn.apply_eval(slot, t, &self.layout.bn_slots[slot], &mut h);
            }
            if i < last {
                h = rectifier(&h);
            }
        }
        let k = self.gain(id);
        Ok(h.into_iter().map(|v| k * v).collect())
    }

    /// `𝒜_n(x) ∈ R^d`.
    pub fn subnet_a(
        &self,
        theta: &ParamVector,
        n: usize,
        x: &[f64],
    ) -> Result<Vec<f64>, LayoutError> {
        self.eval(theta, SubnetId::A(n), x, None)
    }

    /// `𝒢_n(x) ∈ R^{d×d}`, the `d²` outputs reshaped row-major.
    pub fn subnet_g(
        &self,
        theta: &ParamVector,
        n: usize,
        x: &[f64],
    ) -> Result<Tensor, LayoutError> {
        let d = self.layout.dim;
        let out = self.eval(theta, SubnetId::G(n), x, None)?;
        Ok(Tensor::new(d, d, out).expect("d*d outputs"))
    }

    /// Registers every block of `θ` as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape, theta: &ParamVector) -> Result<Bound, LayoutError> {
        self.check_len(theta)?;
        let t = theta.as_slice();
        let mut leaves = Vec::new();
        let mut leaf = |tape: &mut Tape, offset: usize, rows: usize, cols: usize| {
            let data = t[offset..offset + rows * cols].to_vec();
            let id = tape.parameter(Tensor::new(rows, cols, data).expect("slice length"));
            leaves.push((id, offset));
            id
        };
        let d = self.layout.dim;
        let heads = if self.layout.constant_heads {
            Some(BoundHeads {
                y0: leaf(tape, 0, 1, 1),
                z0: leaf(tape, 1, 1, d),
                g0: leaf(tape, d + 1, 1, d * d),
                a0: leaf(tape, d * d + d + 1, 1, d),
            })
        } else {
            None
        };
        let mut bind_net = |tape: &mut Tape, net: &Option<Subnet>| {
            net.as_ref().map(|net| {
                net.layers
                    .iter()
                    .map(|l| {
                        let w = leaf(tape, l.offset, l.out_dim, l.in_dim);
                        let b = leaf(tape, l.offset + l.out_dim * l.in_dim, 1, l.out_dim);
                        (w, b)
                    })
                    .collect::<Vec<_>>()
            })
        };
        let a = self.layout.a.iter().map(|n| bind_net(tape, n)).collect();
        let g = self.layout.g.iter().map(|n| bind_net(tape, n)).collect();
        let u = bind_net(tape, &self.layout.u);
        let v = bind_net(tape, &self.layout.v);
        let bn = self
            .layout
            .bn_slots
            .iter()
            .map(|s| {
                (
                    leaf(tape, s.offset, 1, s.width),
                    leaf(tape, s.offset + s.width, 1, s.width),
                )
            })
            .collect();
        Ok(Bound {
            nu: self.layout.nu,
            heads,
            a,
            g,
            u,
            v,
            bn,
            leaves,
        })
    }

    /// Evaluates a subnetwork on the tape for a batch `x` (`rows × d`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        id: SubnetId,
        x: NodeId,
        bn: &mut BnMode<'_>,
    ) -> Result<NodeId, LayoutError> {
        let net = self
            .layout
            .subnet(id)
            .ok_or_else(|| LayoutError::MissingSubnet(id.to_string()))?;
        let params = match id {
            SubnetId::A(n) => bound.a[n].as_ref(),
            SubnetId::G(n) => bound.g[n].as_ref(),
            SubnetId::U => bound.u.as_ref(),
            SubnetId::V => bound.v.as_ref(),
        }
        .ok_or_else(|| LayoutError::MissingSubnet(id.to_string()))?;
        let mut h = x;
        if let Some(slot) = net.input_bn {
            h = apply_bn(tape, bound, slot, h, bn)?;
        }
        let last = net.layers.len() - 1;
        for (i, (layer, &(w, b))) in net.layers.iter().zip(params).enumerate() {
            let lin = tape.mat_vec(w, h)?;
            h = tape.add(lin, b)?;
            if let Some(slot) = layer.bn {
                h = apply_bn(tape, bound, slot, h, bn)?;
            }
            if i < last {
                h = tape.relu(h)?;
            }
        }
        match self.gain(id) {
            1.0 => Ok(h),
            k => Ok(tape.scale(h, k)?),
        }
    }

    /// Factor applied to the raw output of subnetwork `id`.
    pub fn gain(&self, id: SubnetId) -> f64 {
        match id {
            SubnetId::A(_) | SubnetId::G(_) => self.config.output_gain,
            SubnetId::U | SubnetId::V => 1.0,
        }
    }

    pub fn save(&self, theta: &ParamVector, path: &Path) -> Result<(), crate::Error> {
        self.check_len(theta)?;
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(f, "{}", self.header())?;
        for v in theta.as_slice() {
            writeln!(f, "{v}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(&self, path: &Path) -> Result<ParamVector, crate::Error> {
        let f = BufReader::new(fs::File::open(path)?);
        let mut lines = f.lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| LayoutError::Checkpoint("empty file".into()))?;
        if header.trim() != self.header() {
            return Err(LayoutError::Checkpoint(format!(
                "header `{}` does not match `{}`",
                header.trim(),
                self.header()
            ))
            .into());
        }
        let mut theta = Vec::with_capacity(self.layout.nu);
        for (i, line) in lines.enumerate() {
            let line = line?;
            let v: f64 = line.trim().parse().map_err(|_| {
                LayoutError::Checkpoint(format!(
                    "line {}: `{}` is not a number",
                    i + 2,
                    line.trim()
                ))
            })?;
            theta.push(v);
        }
        if theta.len() != self.layout.nu {
            return Err(LayoutError::Length {
                expected: self.layout.nu,
                got: theta.len(),
            }
            .into());
        }
        Ok(ParamVector::new(theta))
    }

    fn header(&self) -> String {
        let c = &self.config;
        format!(
            "# deep2bsde-params d={} N={} hidden_layers={} hidden_width={} batchnorm={} normalize_input={} output_gain={} heads={:?} nu={}",
            c.dim,
            c.steps,
            c.hidden_layers,
            c.hidden_width,
            c.use_batchnorm,
            c.normalize_input,
            c.output_gain,
            c.heads,
            self.layout.nu
        )
    }
}

fn apply_bn(
    tape: &mut Tape,
    bound: &Bound,
    slot: usize,
    h: NodeId,
    mode: &mut BnMode<'_>,
) -> Result<NodeId, TensorError> {
    let (scale, shift) = bound.bn[slot];
    match mode {
        BnMode::Train(state) => {
            let eps = state.epsilon;
            let (out, mean, var) = tape.batch_norm(h, scale, shift, eps)?;
            state.update(slot, &mean, &var);
            Ok(out)
        }
        BnMode::Eval(state) => {
            let mean = tape.constant(Tensor::row(state.mean[slot].clone()));
            let inv = tape.constant(Tensor::row(
                state.var[slot]
                    .iter()
                    .map(|v| 1.0 / (v + state.epsilon).sqrt())
                    .collect(),
            ));
            let centered = tape.sub(h, mean)?;
            let normalized = tape.mul(centered, inv)?;
            let scaled = tape.mul(normalized, scale)?;
            tape.add(scaled, shift)
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundHeads {
    /// `1 × 1`.
    pub y0: NodeId,
    /// `1 × d`.
    pub z0: NodeId,
    /// `1 × d²`, row-major.
    pub g0: NodeId,
    /// `1 × d`.
    pub a0: NodeId,
}

/// Tape leaves for one binding of `θ`.
#[derive(Clone, Debug)]
pub struct Bound {
    nu: usize,
    pub heads: Option<BoundHeads>,
    a: Vec<Option<Vec<(NodeId, NodeId)>>>,
    g: Vec<Option<Vec<(NodeId, NodeId)>>>,
    u: Option<Vec<(NodeId, NodeId)>>,
    v: Option<Vec<(NodeId, NodeId)>>,
    bn: Vec<(NodeId, NodeId)>,
    leaves: Vec<(NodeId, usize)>,
}

impl Bound {
    /// Scatters leaf gradients back into a flat vector of length `ν`.
    pub fn flat_gradient(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = vec![0.0; self.nu];
        self.flat_gradient_into(grads, &mut out);
        out
    }

    /// As [`Bound::flat_gradient`], overwriting `out` (resized to `ν`).
    pub fn flat_gradient_into(&self, grads: &Gradients, out: &mut Vec<f64>) {
        out.clear();
        out.resize(self.nu, 0.0);
        let mut by_leaf: Vec<(NodeId, &Tensor)> = grads.iter().collect();
        by_leaf.sort_by_key(|(id, _)| id.index());
        for &(id, offset) in &self.leaves {
            if let Ok(i) = by_leaf.binary_search_by_key(&id.index(), |(l, _)| l.index()) {
                let g = by_leaf[i].1.data();
                out[offset..offset + g.len()].copy_from_slice(g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn affine_examples() {
        let id = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        assert_eq!(
            affine_apply(&id, 0, 2, 2, &[5.0, 7.0]).unwrap(),
            vec![5.0, 7.0]
        );
        assert_eq!(
            affine_apply(&[1.0, 2.0, 3.0], 0, 1, 2, &[4.0, 5.0]).unwrap(),
            vec![17.0]
        );
        assert_eq!(
            affine_apply(&[0.0; 6], 0, 2, 2, &[3.0, -8.0]).unwrap(),
            vec![0.0, 0.0]
        );
        assert!(matches!(
            affine_apply(&[0.0; 5], 0, 2, 2, &[1.0, 1.0]),
            Err(LayoutError::Overflow { .. })
        ));
    }

    #[test]
    fn rectifier_examples() {
        assert_eq!(rectifier(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert_eq!(rectifier(&[0.5, 3.0]), vec![0.5, 3.0]);
        assert_eq!(rectifier(&[-3.5]), vec![0.0]);
    }

    #[test]
    fn canonical_offsets_and_nu() {
        let net = Network::new(NetworkConfig::canonical(1, 2)).unwrap();
        let l = net.layout();
        assert_eq!(l.nu, 26);
        assert_eq!(l.nu, canonical_nu(1, 2));
        let a1: Vec<usize> = l.a[1]
            .as_ref()
            .unwrap()
            .layers
            .iter()
            .map(|x| x.offset)
            .collect();
        let g1: Vec<usize> = l.g[1]
            .as_ref()
            .unwrap()
            .layers
            .iter()
            .map(|x| x.offset)
            .collect();
        assert_eq!(a1, vec![4, 8, 12]);
        assert_eq!(g1, vec![16, 20, 24]);
    }

    #[test]
    fn hand_composition_d1() {
        let net = Network::new(NetworkConfig::canonical(1, 2)).unwrap();
        let mut theta = ParamVector::zeros(net.nu());
        for layer in &net.layout().a[1].as_ref().unwrap().layers {
            theta.as_mut_slice()[layer.offset] = 1.0;
        }
        assert_eq!(net.subnet_a(&theta, 1, &[2.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn zero_theta_gives_zero_outputs() {
        let net = Network::new(NetworkConfig::canonical(3, 4)).unwrap();
        let theta = ParamVector::zeros(net.nu());
        assert_eq!(
            net.subnet_a(&theta, 2, &[1.0, -2.0, 0.5]).unwrap(),
            vec![0.0; 3]
        );
        assert_eq!(
            net.subnet_g(&theta, 3, &[1.0, -2.0, 0.5]).unwrap(),
            Tensor::zeros(3, 3)
        );
        let h = net.head_initial_values(&theta).unwrap();
        assert_eq!(h.y0, 0.0);
        assert_eq!(h.z0, vec![0.0; 3]);
        assert_eq!(h.a0, vec![0.0; 3]);
        assert_eq!(h.g0, Tensor::zeros(3, 3));
    }

    #[test]
    fn heads_read_directly() {
        let net = Network::new(NetworkConfig::canonical(2, 3)).unwrap();
        let mut theta = ParamVector::zeros(net.nu());
        theta.as_mut_slice()[..3].copy_from_slice(&[7.0, 1.0, 2.0]);
        let h = net.head_initial_values(&theta).unwrap();
        assert_eq!(h.y0, 7.0);
        assert_eq!(h.z0, vec![1.0, 2.0]);
    }

    #[test]
    fn output_gain_scales_coefficients_only() {
        let plain = Network::new(NetworkConfig::canonical(2, 3)).unwrap();
        let cfg = NetworkConfig {
            output_gain: 0.25,
            ..NetworkConfig::canonical(2, 3)
        };
        let scaled = Network::new(cfg).unwrap();
        let theta = plain.init(9);
        let x = [0.3, -1.2];
        let a = plain.subnet_a(&theta, 1, &x).unwrap();
        let a4 = scaled.subnet_a(&theta, 1, &x).unwrap();
        for (u, v) in a.iter().zip(&a4) {
            assert_relative_eq!(0.25 * u, *v, epsilon = 1e-15);
        }
        let (h, h4) = (
            plain.head_initial_values(&theta).unwrap(),
            scaled.head_initial_values(&theta).unwrap(),
        );
        assert_eq!(h.y0, h4.y0);
        assert_eq!(h.z0, h4.z0);
        assert_eq!(h.g0.map(|v| 0.25 * v), h4.g0);
        let bad = NetworkConfig {
            output_gain: 0.0,
            ..NetworkConfig::canonical(2, 3)
        };
        assert!(Network::new(bad).is_err());
    }

    #[test]
    fn g_at_d1_is_scalar_net() {
        let net = Network::new(NetworkConfig::canonical(1, 3)).unwrap();
        let theta = net.init(5);
        let g = net.subnet_g(&theta, 2, &[0.7]).unwrap();
        let s = net.eval(&theta, SubnetId::G(2), &[0.7], None).unwrap();
        assert_eq!(g.shape(), (1, 1));
        assert_eq!(g.get(0, 0), s[0]);
    }

    #[test]
    fn g_depends_only_on_its_slice() {
        let net = Network::new(NetworkConfig::canonical(2, 3)).unwrap();
        let mut theta = net.init(9);
        let x = [0.3, -1.2];
        let before = net.subnet_g(&theta, 1, &x).unwrap();
        let own: Vec<Range<usize>> = net.layout().g[1]
            .as_ref()
            .unwrap()
            .layers
            .iter()
            .map(|l| l.range())
            .collect();
        for i in 0..net.nu() {
            if !own.iter().any(|r| r.contains(&i)) {
                theta.as_mut_slice()[i] += 1.0;
            }
        }
        assert_eq!(net.subnet_g(&theta, 1, &x).unwrap(), before);
    }

    #[test]
    fn unused_blocks_are_reported() {
        let net = Network::new(NetworkConfig::canonical(2, 3)).unwrap();
        let gaps = net.layout().unused();
        let total: usize = gaps.iter().map(|r| r.len()).sum();
        let used: usize = net.layout().blocks().iter().map(|(_, r)| r.len()).sum();
        assert_eq!(total + used, net.nu());
        // step-0 middle/outer A layers and all three step-0 G layers
        let d = 2;
        assert_eq!(total, 4 * d * (d + 1) + d * d * (d + 1));
    }

    #[test]
    fn batchnorm_running_update() {
        let mut cfg = NetworkConfig::canonical(2, 2);
        cfg.use_batchnorm = true;
        let net = Network::new(cfg).unwrap();
        let mut st = BatchNormState::new(net.layout());
        st.mean[0] = vec![1.0, 2.0];
        st.var[0] = vec![4.0, 1.0];
        st.update(0, &[3.0, -2.0], &[0.0, 2.0]);
        assert_relative_eq!(st.mean[0][0], 0.99 * 1.0 + 0.01 * 3.0);
        assert_relative_eq!(st.mean[0][1], 0.99 * 2.0 - 0.01 * 2.0);
        assert_relative_eq!(st.var[0][0], 0.99 * 4.0);
        assert_relative_eq!(st.var[0][1], 0.99 + 0.02);
    }

    #[test]
    fn batchnorm_layout_extends_canonical() {
        let mut cfg = NetworkConfig::canonical(3, 4);
        cfg.use_batchnorm = true;
        let net = Network::new(cfg).unwrap();
        assert_eq!(net.layout().bn_slots.len(), 2 * 2 * 3);
        assert_eq!(net.nu(), canonical_nu(3, 4) + 12 * 2 * 3);
        assert!(net.layout().canonical);
    }

    #[test]
    fn tape_forward_matches_plain_eval() {
        let mut cfg = NetworkConfig::canonical(3, 3);
        cfg.hidden_width = 5;
        let net = Network::new(cfg).unwrap();
        assert!(!net.layout().canonical);
        let theta = net.init(3);
        let xs = Tensor::new(2, 3, vec![0.1, -0.4, 1.0, 2.0, 0.3, -0.7]).unwrap();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, &theta).unwrap();
        let x = tape.constant(xs.clone());
        let st = BatchNormState::new(net.layout());
        let out = net
            .forward(&mut tape, &bound, SubnetId::G(2), x, &mut BnMode::Eval(&st))
            .unwrap();
        for r in 0..2 {
            let plain = net
                .eval(&theta, SubnetId::G(2), xs.row_slice(r), None)
                .unwrap();
            for (a, b) in tape.value(out).row_slice(r).iter().zip(&plain) {
                assert_relative_eq!(*a, *b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn flat_gradient_places_leaves() {
        let net = Network::new(NetworkConfig::canonical(2, 2)).unwrap();
        let theta = net.init(1);
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, &theta).unwrap();
        let y0 = bound.heads.unwrap().y0;
        let root = tape.square(y0).unwrap();
        let grads = tape.backward(root).unwrap();
        let flat = bound.flat_gradient(&grads);
        assert_eq!(flat.len(), net.nu());
        assert_relative_eq!(flat[0], 2.0 * theta.as_slice()[0]);
        assert!(flat[1..].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let net = Network::new(NetworkConfig::canonical(2, 3)).unwrap();
        let theta = net.init(17);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("theta.txt");
        net.save(&theta, &path).unwrap();
        assert_eq!(net.load(&path).unwrap(), theta);
        let other = Network::new(NetworkConfig::canonical(2, 4)).unwrap();
        assert!(other.load(&path).is_err());
    }

    #[test]
    fn network_heads_layout() {
        let mut cfg = NetworkConfig::canonical(2, 3);
        cfg.heads = HeadKind::Network;
        let net = Network::new(cfg).unwrap();
        let l = net.layout();
        assert!(l.u.is_some() && l.v.is_some() && l.a[0].is_some() && l.g[0].is_some());
        assert!(l.unused().iter().any(|r| r.start == 0));
        let theta = net.init(2);
        assert_eq!(
            net.eval(&theta, SubnetId::U, &[1.0, 0.5], None)
                .unwrap()
                .len(),
            1
        );
    }

    proptest! {
        #[test]
        fn zero_bias_nets_are_positively_homogeneous(seed in 0u64..1000, lambda in 0.1f64..5.0) {
            let net = Network::new(NetworkConfig::canonical(3, 3)).unwrap();
            let mut theta = net.init(seed);
            for layer in &net.layout().a[1].as_ref().unwrap().layers {
                let b = layer.offset + layer.in_dim * layer.out_dim;
                theta.as_mut_slice()[b..b + layer.out_dim].fill(0.0);
            }
            let x = [0.4, -1.1, 0.9];
            let base = net.subnet_a(&theta, 1, &x).unwrap();
            let scaled = ParamVector::new(theta.as_slice().iter().map(|v| v * lambda).collect());
            let out = net.subnet_a(&scaled, 1, &x).unwrap();
            for (o, b) in out.iter().zip(&base) {
                prop_assert!((o - lambda.powi(3) * b).abs() <= 1e-10 * (1.0 + b.abs()));
            }
        }
    }
}
