//! A small differentiable model engine: dense and convolution layers (frozen,
//! fully trainable, or LoRA-adapted), ReLU/tanh, average pooling, flatten and a
//! softmax head.
//!
//! The engine evaluates `ŷ = h(x, θ̃)` for a flat trainable vector `θ̃` and
//! returns the exact Jacobian `∂ŷ/∂θ̃` by one reverse sweep per output row.
//! Frozen weights live inside the [`Model`]; only `θ̃` changes during training.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Matrix};
use crate::lora::{gaussian_vec, im2col_patch};

/// Activation tensor shape `[channels, height, width]`; vectors are `[n, 1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn image(channels: usize, height: usize, width: usize) -> Self {
        Shape {
            channels,
            height,
            width,
        }
    }

    pub fn flat(n: usize) -> Self {
        Shape::image(n, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}]", self.channels, self.height, self.width)
    }
}

/// How a weight-carrying layer exposes its parameters to the optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ParamMode {
    /// Weights and bias stay fixed.
    Frozen,
    /// Weight matrix then bias, all trainable.
    Full,
    /// `W₀ + B·A` with `A`, `B` trainable and `W₀`, bias frozen.
    Lora { rank: usize, sigma: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    XavierUniform,
    XavierNormal,
    KaimingUniform,
    KaimingNormal,
    /// `U(−1/√fan_in, 1/√fan_in)`.
    FanInUniform,
}

impl InitScheme {
    pub const SWEEP: [InitScheme; 4] = [
        InitScheme::XavierUniform,
        InitScheme::XavierNormal,
        InitScheme::KaimingUniform,
        InitScheme::KaimingNormal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InitScheme::XavierUniform => "xavier_uniform",
            InitScheme::XavierNormal => "xavier_normal",
            InitScheme::KaimingUniform => "kaiming_uniform",
            InitScheme::KaimingNormal => "kaiming_normal",
            InitScheme::FanInUniform => "fan_in_uniform",
        }
    }

    fn sample(self, rng: &mut ChaCha8Rng, count: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
        let fi = fan_in.max(1) as f64;
        let fo = fan_out.max(1) as f64;
        let uniform = |rng: &mut ChaCha8Rng, bound: f64| -> Vec<f64> {
            (0..count).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let normal = |rng: &mut ChaCha8Rng, std: f64| -> Vec<f64> {
            let n = Normal::new(0.0, std).expect("positive std");
            (0..count).map(|_| n.sample(rng)).collect()
        };
        match self {
            InitScheme::XavierUniform => uniform(rng, (6.0 / (fi + fo)).sqrt()),
            InitScheme::XavierNormal => normal(rng, (2.0 / (fi + fo)).sqrt()),
            InitScheme::KaimingUniform => uniform(rng, (6.0 / fi).sqrt()),
            InitScheme::KaimingNormal => normal(rng, (2.0 / fi).sqrt()),
            InitScheme::FanInUniform => uniform(rng, 1.0 / fi.sqrt()),
        }
    }
}

/// Weights for one weight-carrying layer: `rows × cols` matrix plus `rows` biases.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug)]
struct ParamBlock {
    /// Output units (dense) or output channels (conv).
    rows: usize,
    /// Input length (dense) or patch length `in_ch·k·k` (conv).
    cols: usize,
    fan_out: usize,
    w0: Vec<f64>,
    bias: Vec<f64>,
    mode: ParamMode,
    offset: usize,
    /// Initial trainable slice (`W` then bias for full, `A` then `B` for LoRA).
    theta0: Vec<f64>,
}

impl ParamBlock {
    fn trainable_len(&self) -> usize {
        match self.mode {
            ParamMode::Frozen => 0,
            ParamMode::Full => self.rows * self.cols + self.rows,
            ParamMode::Lora { rank, .. } => rank * (self.rows + self.cols),
        }
    }

    fn reset_theta0(&mut self, lora_seed: u64) {
        self.theta0 = match self.mode {
            ParamMode::Frozen => Vec::new(),
            ParamMode::Full => {
                let mut t = self.w0.clone();
                t.extend_from_slice(&self.bias);
                t
            }
            ParamMode::Lora { rank, sigma } => {
                let mut t = gaussian_vec(rank * self.cols, sigma, lora_seed);
                t.resize(rank * (self.rows + self.cols), 0.0);
                t
            }
        };
    }
}

#[derive(Clone, Debug)]
enum LayerKind {
    Dense(ParamBlock),
    Conv {
        block: ParamBlock,
        kernel: usize,
        padding: usize,
    },
    Relu,
    Tanh,
    AvgPool {
        size: usize,
    },
    Flatten,
    Softmax,
}

#[derive(Clone, Debug)]
struct Node {
    kind: LayerKind,
    input: Shape,
    output: Shape,
}

/// Immutable model graph. Forward and Jacobian evaluation are reentrant.
#[derive(Clone, Debug)]
pub struct Model {
    input: Shape,
    nodes: Vec<Node>,
    n_trainable: usize,
    /// Index of the first node carrying trainable parameters; reverse sweeps stop there.
    first_trainable: Option<usize>,
}

/// Layer-by-layer builder that infers shapes.
pub struct ModelBuilder {
    input: Shape,
    current: Shape,
    nodes: Vec<Node>,
    error: Option<Error>,
}

impl ModelBuilder {
    pub fn new(input: Shape) -> Self {
        ModelBuilder {
            input,
            current: input,
            nodes: Vec::new(),
            error: None,
        }
    }

    fn push(mut self, kind: LayerKind, output: Shape) -> Self {
        self.nodes.push(Node {
            kind,
            input: self.current,
            output,
        });
        self.current = output;
        self
    }

    fn fail(mut self, detail: String) -> Self {
        if self.error.is_none() {
            self.error = Some(Error::dims("ModelBuilder", detail));
        }
        self
    }

    fn block(rows: usize, cols: usize, fan_out: usize, mode: ParamMode) -> ParamBlock {
        ParamBlock {
            rows,
            cols,
            fan_out,
            w0: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
            mode,
            offset: 0,
            theta0: Vec::new(),
        }
    }

    pub fn dense(self, outputs: usize, mode: ParamMode) -> Self {
        let inputs = self.current.len();
        if let ParamMode::Lora { rank, .. } = mode {
            if rank == 0 || rank > inputs.min(outputs) {
                return self.fail(format!("dense LoRA rank {rank} for {outputs}x{inputs}"));
            }
        }
        let block = Self::block(outputs, inputs, outputs, mode);
        self.push(LayerKind::Dense(block), Shape::flat(outputs))
    }

    /// Stride-1 convolution with a square `kernel` and symmetric zero padding.
    pub fn conv2d(self, out_channels: usize, kernel: usize, padding: usize, mode: ParamMode) -> Self {
        let s = self.current;
        if s.height + 2 * padding < kernel || s.width + 2 * padding < kernel {
            return self.fail(format!("kernel {kernel} larger than padded input {s}"));
        }
        let patch = s.channels * kernel * kernel;
        if let ParamMode::Lora { rank, .. } = mode {
            if rank == 0 || rank > out_channels.min(patch) {
                return self.fail(format!("conv LoRA rank {rank} for {out_channels}x{patch}"));
            }
        }
        let out = Shape::image(
            out_channels,
            s.height + 2 * padding + 1 - kernel,
            s.width + 2 * padding + 1 - kernel,
        );
        let block = Self::block(out_channels, patch, out_channels * kernel * kernel, mode);
        self.push(LayerKind::Conv { block, kernel, padding }, out)
    }

    pub fn relu(self) -> Self {
        let s = self.current;
        self.push(LayerKind::Relu, s)
    }

    pub fn tanh(self) -> Self {
        let s = self.current;
        self.push(LayerKind::Tanh, s)
    }

    pub fn activation(self, act: Activation) -> Self {
        match act {
            Activation::Relu => self.relu(),
            Activation::Tanh => self.tanh(),
        }
    }

    /// Non-overlapping `size×size` average pooling; trailing rows/columns are dropped.
    pub fn avg_pool(self, size: usize) -> Self {
        let s = self.current;
        if size == 0 || s.height < size || s.width < size {
            return self.fail(format!("pool size {size} for {s}"));
        }
        let out = Shape::image(s.channels, s.height / size, s.width / size);
        self.push(LayerKind::AvgPool { size }, out)
    }

    pub fn flatten(self) -> Self {
        let n = self.current.len();
        self.push(LayerKind::Flatten, Shape::flat(n))
    }

    pub fn softmax(self) -> Self {
        let n = self.current.len();
        self.push(LayerKind::Softmax, Shape::flat(n))
    }

    /// Finalizes offsets and draws frozen/initial weights with `scheme`.
    ///
    /// All weight-carrying layers draw from one stream seeded by `seed`; LoRA
    /// `A` factors use per-layer seeds derived from it.
    pub fn build(self, scheme: InitScheme, seed: u64) -> Result<Model> {
        if let Some(e) = self.error {
            return Err(e);
        }
        if self.current.is_empty() {
            return Err(Error::dims("ModelBuilder", "model output dimension is zero"));
        }
        let mut nodes = self.nodes;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offset = 0;
        let mut first_trainable = None;
        for (idx, node) in nodes.iter_mut().enumerate() {
            if let Some(block) = node.kind.block_mut() {
                block.w0 = scheme.sample(&mut rng, block.rows * block.cols, block.cols, block.fan_out);
                block.bias = vec![0.0; block.rows];
                block.offset = offset;
                block.reset_theta0(lora_seed(seed, idx));
                offset += block.trainable_len();
                if block.trainable_len() > 0 && first_trainable.is_none() {
                    first_trainable = Some(idx);
                }
            }
        }
        Ok(Model {
            input: self.input,
            nodes,
            n_trainable: offset,
            first_trainable,
        })
    }
}

fn lora_seed(seed: u64, layer: usize) -> u64 {
    seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(layer as u64 + 1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl LayerKind {
    fn block(&self) -> Option<&ParamBlock> {
        match self {
            LayerKind::Dense(b) | LayerKind::Conv { block: b, .. } => Some(b),
            _ => None,
        }
    }

    fn block_mut(&mut self) -> Option<&mut ParamBlock> {
        match self {
            LayerKind::Dense(b) | LayerKind::Conv { block: b, .. } => Some(b),
            _ => None,
        }
    }
}

/// Intermediate values recorded by a forward pass.
pub struct Tape {
    /// `acts[i]` is the input of node `i`; the last entry is the model output.
    acts: Vec<Vec<f64>>,
    /// Per node: im2col patches (`P × q`, conv only).
    patches: Vec<Vec<f64>>,
    /// Per node: LoRA low-rank activations `A·x` (dense: `r`, conv: `r × P`).
    low_rank: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("tape always holds the input")
    }
}

/// Weights of a block as used at evaluation time.
enum Effective<'a> {
    Plain {
        w: &'a [f64],
        b: &'a [f64],
    },
    Lora {
        w0: &'a [f64],
        b: &'a [f64],
        a: &'a [f64],
        bf: &'a [f64],
        rank: usize,
    },
}

impl Model {
    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn input_len(&self) -> usize {
        self.input.len()
    }

    pub fn output_dim(&self) -> usize {
        self.nodes.last().map_or(self.input.len(), |n| n.output.len())
    }

    pub fn n_trainable(&self) -> usize {
        self.n_trainable
    }

    pub fn has_softmax_head(&self) -> bool {
        matches!(self.nodes.last().map(|n| &n.kind), Some(LayerKind::Softmax))
    }

    /// The initial trainable vector `θ̃₀`.
    pub fn initial_params(&self) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.n_trainable);
        for block in self.blocks() {
            theta.extend_from_slice(&block.theta0);
        }
        theta
    }

    /// Trainable `(offset, length)` slices, one per weight-carrying layer, in layer order.
    pub fn trainable_slices(&self) -> Vec<(usize, usize)> {
        self.blocks().map(|b| (b.offset, b.trainable_len())).collect()
    }

    /// Human-readable layer summary.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let name = match &n.kind {
                LayerKind::Dense(b) => format!("dense {:?} trainable={}", b.mode, b.trainable_len()),
                LayerKind::Conv { block, kernel, padding } => format!(
                    "conv k={kernel} pad={padding} {:?} trainable={}",
                    block.mode,
                    block.trainable_len()
                ),
                LayerKind::Relu => "relu".into(),
                LayerKind::Tanh => "tanh".into(),
                LayerKind::AvgPool { size } => format!("avg_pool {size}"),
                LayerKind::Flatten => "flatten".into(),
                LayerKind::Softmax => "softmax".into(),
            };
            s.push_str(&format!("{i:2}: {} -> {} {name}\n", n.input, n.output));
        }
        s
    }

    fn blocks(&self) -> impl Iterator<Item = &ParamBlock> {
        self.nodes.iter().filter_map(|n| n.kind.block())
    }

    fn check(&self, x: &[f64], theta: &[f64]) -> Result<()> {
        if x.len() != self.input.len() {
            return Err(Error::dims(
                "forward",
                format!("input length {} for shape {}", x.len(), self.input),
            ));
        }
        if theta.len() != self.n_trainable {
            return Err(Error::dims(
                "forward",
                format!("theta length {} for {} trainable", theta.len(), self.n_trainable),
            ));
        }
        Ok(())
    }

    fn effective<'a>(&'a self, block: &'a ParamBlock, theta: &'a [f64]) -> Effective<'a> {
        let slice = &theta[block.offset..block.offset + block.trainable_len()];
        match block.mode {
            ParamMode::Frozen => Effective::Plain {
                w: &block.w0,
                b: &block.bias,
            },
            ParamMode::Full => {
                let (w, b) = slice.split_at(block.rows * block.cols);
                Effective::Plain { w, b }
            }
            ParamMode::Lora { rank, .. } => {
                let (a, bf) = slice.split_at(rank * block.cols);
                Effective::Lora {
                    w0: &block.w0,
                    b: &block.bias,
                    a,
                    bf,
                    rank,
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_tape(x, theta)?.acts.pop().expect("non-empty tape"))
    }

    /// Forward pass recording everything the reverse sweep needs.
    pub fn forward_tape(&self, x: &[f64], theta: &[f64]) -> Result<Tape> {
        self.check(x, theta)?;
        let n = self.nodes.len();
        let mut tape = Tape {
            acts: Vec::with_capacity(n + 1),
            patches: vec![Vec::new(); n],
            low_rank: vec![Vec::new(); n],
        };
        tape.acts.push(x.to_vec());
        for (idx, node) in self.nodes.iter().enumerate() {
            let input = tape.acts.last().expect("non-empty");
            let out = match &node.kind {
                LayerKind::Dense(block) => {
                    let (out, u) = self.dense_forward(block, theta, input);
                    tape.low_rank[idx] = u;
                    out
                }
                LayerKind::Conv { block, kernel, padding } => {
                    let patches = im2col(input, node.input, node.output, *kernel, *padding);
                    let (out, u) = self.conv_forward(block, theta, &patches, node.output);
                    tape.patches[idx] = patches;
                    tape.low_rank[idx] = u;
                    out
                }
                LayerKind::Relu => input.iter().map(|&v| v.max(0.0)).collect(),
                LayerKind::Tanh => input.iter().map(|v| v.tanh()).collect(),
                LayerKind::AvgPool { size } => avg_pool(input, node.input, node.output, *size),
                LayerKind::Flatten => input.clone(),
                LayerKind::Softmax => softmax(input),
            };
            if !out.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteActivation { layer: idx });
            }
            tape.acts.push(out);
        }
        Ok(tape)
    }

    fn dense_forward(&self, block: &ParamBlock, theta: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (d, q) = (block.rows, block.cols);
        match self.effective(block, theta) {
            Effective::Plain { w, b } => {
                let out = (0..d).map(|o| dot(&w[o * q..(o + 1) * q], x) + b[o]).collect();
                (out, Vec::new())
            }
            Effective::Lora { w0, b, a, bf, rank } => {
                let u: Vec<f64> = (0..rank).map(|k| dot(&a[k * q..(k + 1) * q], x)).collect();
                let out = (0..d)
                    .map(|o| dot(&w0[o * q..(o + 1) * q], x) + dot(&bf[o * rank..(o + 1) * rank], &u) + b[o])
                    .collect();
                (out, u)
            }
        }
    }

    fn conv_forward(
        &self,
        block: &ParamBlock,
        theta: &[f64],
        patches: &[f64],
        out_shape: Shape,
    ) -> (Vec<f64>, Vec<f64>) {
        let (d, q) = (block.rows, block.cols);
        let positions = out_shape.height * out_shape.width;
        let mut out = vec![0.0; d * positions];
        match self.effective(block, theta) {
            Effective::Plain { w, b } => {
                for o in 0..d {
                    let wo = &w[o * q..(o + 1) * q];
                    let row = &mut out[o * positions..(o + 1) * positions];
                    for (p, z) in row.iter_mut().enumerate() {
                        *z = dot(wo, &patches[p * q..(p + 1) * q]) + b[o];
                    }
                }
                (out, Vec::new())
            }
            Effective::Lora { w0, b, a, bf, rank } => {
                // u = A·patches, laid out rank × positions
                let mut u = vec![0.0; rank * positions];
                for k in 0..rank {
                    let ak = &a[k * q..(k + 1) * q];
                    for p in 0..positions {
                        u[k * positions + p] = dot(ak, &patches[p * q..(p + 1) * q]);
                    }
                }
                for o in 0..d {
                    let wo = &w0[o * q..(o + 1) * q];
                    let row = &mut out[o * positions..(o + 1) * positions];
                    for (p, z) in row.iter_mut().enumerate() {
                        *z = dot(wo, &patches[p * q..(p + 1) * q]) + b[o];
                    }
                    for k in 0..rank {
                        axpy(bf[o * rank + k], &u[k * positions..(k + 1) * positions], row);
                    }
                }
                (out, u)
            }
        }
    }

    /// Vector–Jacobian product: `grad = (∂ŷ/∂θ̃)ᵀ · cotangent`, written into `grad` (length `ñ`).
    pub fn vjp(&self, tape: &Tape, theta: &[f64], cotangent: &[f64], grad: &mut [f64]) -> Result<()> {
        if cotangent.len() != self.output_dim() || grad.len() != self.n_trainable {
            return Err(Error::dims(
                "vjp",
                format!(
                    "cotangent[{}] grad[{}] for m = {}, ñ = {}",
                    cotangent.len(),
                    grad.len(),
                    self.output_dim(),
                    self.n_trainable
                ),
            ));
        }
        self.sweep(tape, theta, cotangent.to_vec(), self.nodes.len(), grad);
        Ok(())
    }

    /// Gradient of `−Σ yⱼ ln ŷⱼ` for a one-hot (or any probability) `target`.
    ///
    /// With a softmax head the sweep starts at the logits with cotangent
    /// `ŷ − y`, which stays finite even when `ŷ` underflows.
    pub fn cross_entropy_gradient(&self, tape: &Tape, theta: &[f64], target: &[f64], grad: &mut [f64]) -> Result<()> {
        let pred = tape.output();
        if target.len() != pred.len() || grad.len() != self.n_trainable {
            return Err(Error::dims(
                "cross_entropy_gradient",
                format!("target[{}] grad[{}]", target.len(), grad.len()),
            ));
        }
        if self.has_softmax_head() {
            let total: f64 = target.iter().sum();
            let g = pred.iter().zip(target).map(|(p, y)| total * p - y).collect();
            self.sweep(tape, theta, g, self.nodes.len() - 1, grad);
            Ok(())
        } else {
            let g: Vec<f64> = pred
                .iter()
                .zip(target)
                .map(|(p, y)| if *y == 0.0 { 0.0 } else { -y / p })
                .collect();
            self.vjp(tape, theta, &g, grad)
        }
    }

    /// Reverse sweep from just below node `end` down to the lowest trainable layer.
    fn sweep(&self, tape: &Tape, theta: &[f64], mut g: Vec<f64>, end: usize, grad: &mut [f64]) {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let Some(stop) = self.first_trainable else {
            return;
        };
        for idx in (stop..end).rev() {
            let node = &self.nodes[idx];
            let input = &tape.acts[idx];
            let output = &tape.acts[idx + 1];
            let need_input_grad = idx > stop;
            g = match &node.kind {
                LayerKind::Softmax => {
                    let s = dot(&g, output);
                    output.iter().zip(&g).map(|(y, gi)| y * (gi - s)).collect()
                }
                LayerKind::Relu => input
                    .iter()
                    .zip(&g)
                    .map(|(&x, &gi)| if x > 0.0 { gi } else { 0.0 })
                    .collect(),
                LayerKind::Tanh => output.iter().zip(&g).map(|(y, gi)| gi * (1.0 - y * y)).collect(),
                LayerKind::AvgPool { size } => avg_pool_back(&g, node.input, node.output, *size),
                LayerKind::Flatten => g,
                LayerKind::Dense(block) => {
                    self.dense_back(block, theta, input, &tape.low_rank[idx], &g, grad, need_input_grad)
                }
                LayerKind::Conv { block, kernel, padding } => {
                    let dpatches = self.conv_back(
                        block,
                        theta,
                        &tape.patches[idx],
                        &tape.low_rank[idx],
                        node.output,
                        &g,
                        grad,
                        need_input_grad,
                    );
                    if need_input_grad {
                        col2im(&dpatches, node.input, node.output, *kernel, *padding)
                    } else {
                        Vec::new()
                    }
                }
            };
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn dense_back(
        &self,
        block: &ParamBlock,
        theta: &[f64],
        x: &[f64],
        u: &[f64],
        g: &[f64],
        grad: &mut [f64],
        need_input_grad: bool,
    ) -> Vec<f64> {
        let (d, q) = (block.rows, block.cols);
        let gslice = &mut grad[block.offset..block.offset + block.trainable_len()];
        let mut gx = if need_input_grad { vec![0.0; q] } else { Vec::new() };
        match self.effective(block, theta) {
            Effective::Plain { w, .. } => {
                let trainable = block.mode == ParamMode::Full;
                for (o, &go) in g.iter().enumerate() {
                    if go == 0.0 {
                        continue;
                    }
                    if trainable {
                        axpy(go, x, &mut gslice[o * q..(o + 1) * q]);
                        gslice[d * q + o] += go;
                    }
                    if need_input_grad {
                        axpy(go, &w[o * q..(o + 1) * q], &mut gx);
                    }
                }
            }
            Effective::Lora { w0, a, bf, rank, .. } => {
                let (ga, gb) = gslice.split_at_mut(rank * q);
                // du = Bᵀ g
                let mut du = vec![0.0; rank];
                for (o, &go) in g.iter().enumerate() {
                    if go == 0.0 {
                        continue;
                    }
                    axpy(go, u, &mut gb[o * rank..(o + 1) * rank]);
                    axpy(go, &bf[o * rank..(o + 1) * rank], &mut du);
                    if need_input_grad {
                        axpy(go, &w0[o * q..(o + 1) * q], &mut gx);
                    }
                }
                for (k, &duk) in du.iter().enumerate() {
                    if duk == 0.0 {
                        continue;
                    }
                    axpy(duk, x, &mut ga[k * q..(k + 1) * q]);
                    if need_input_grad {
                        axpy(duk, &a[k * q..(k + 1) * q], &mut gx);
                    }
                }
            }
        }
        gx
    }

    /// Returns the patch-space input gradient (`P × q`) when requested.
    #[allow(clippy::too_many_arguments)]
    fn conv_back(
        &self,
        block: &ParamBlock,
        theta: &[f64],
        patches: &[f64],
        u: &[f64],
        out_shape: Shape,
        g: &[f64],
        grad: &mut [f64],
        need_input_grad: bool,
    ) -> Vec<f64> {
        let (d, q) = (block.rows, block.cols);
        let positions = out_shape.height * out_shape.width;
        let gslice = &mut grad[block.offset..block.offset + block.trainable_len()];
        let mut dpatches = if need_input_grad {
            vec![0.0; positions * q]
        } else {
            Vec::new()
        };
        match self.effective(block, theta) {
            Effective::Plain { w, .. } => {
                let trainable = block.mode == ParamMode::Full;
                for o in 0..d {
                    let go = &g[o * positions..(o + 1) * positions];
                    let wo = &w[o * q..(o + 1) * q];
                    let mut bias_grad = 0.0;
                    for (p, &gp) in go.iter().enumerate() {
                        if gp == 0.0 {
                            continue;
                        }
                        bias_grad += gp;
                        if trainable {
                            axpy(gp, &patches[p * q..(p + 1) * q], &mut gslice[o * q..(o + 1) * q]);
                        }
                        if need_input_grad {
                            axpy(gp, wo, &mut dpatches[p * q..(p + 1) * q]);
                        }
                    }
                    if trainable {
                        gslice[d * q + o] += bias_grad;
                    }
                }
            }
            Effective::Lora { w0, a, bf, rank, .. } => {
                let (ga, gb) = gslice.split_at_mut(rank * q);
                // dU = Bᵀ G  (rank × positions); dB = G Uᵀ
                let mut du = vec![0.0; rank * positions];
                for o in 0..d {
                    let go = &g[o * positions..(o + 1) * positions];
                    for k in 0..rank {
                        gb[o * rank + k] += dot(go, &u[k * positions..(k + 1) * positions]);
                        axpy(bf[o * rank + k], go, &mut du[k * positions..(k + 1) * positions]);
                    }
                    if need_input_grad {
                        let wo = &w0[o * q..(o + 1) * q];
                        for (p, &gp) in go.iter().enumerate() {
                            if gp != 0.0 {
                                axpy(gp, wo, &mut dpatches[p * q..(p + 1) * q]);
                            }
                        }
                    }
                }
                // dA = dU · patches
                for k in 0..rank {
                    let duk = &du[k * positions..(k + 1) * positions];
                    let ak = &a[k * q..(k + 1) * q];
                    for (p, &dv) in duk.iter().enumerate() {
                        if dv == 0.0 {
                            continue;
                        }
                        axpy(dv, &patches[p * q..(p + 1) * q], &mut ga[k * q..(k + 1) * q]);
                        if need_input_grad {
                            axpy(dv, ak, &mut dpatches[p * q..(p + 1) * q]);
                        }
                    }
                }
            }
        }
        dpatches
    }

    /// Exact Jacobian `H[j,i] = ∂ŷ_j/∂θ̃_i`, one reverse sweep per output row.
    ///
    /// Rows are computed in parallel and land at their own row index, so the
    /// result does not depend on thread scheduling.
    pub fn jacobian(&self, x: &[f64], theta: &[f64]) -> Result<Matrix> {
        let tape = self.forward_tape(x, theta)?;
        self.jacobian_from_tape(&tape, theta)
    }

    pub fn jacobian_from_tape(&self, tape: &Tape, theta: &[f64]) -> Result<Matrix> {
        let m = self.output_dim();
        let n = self.n_trainable;
        let mut h = Matrix::zeros(m, n);
        if n == 0 {
            return Ok(h);
        }
        h.as_mut_slice()
            .par_chunks_mut(n)
            .enumerate()
            .try_for_each(|(j, row)| {
                let mut seed = vec![0.0; m];
                seed[j] = 1.0;
                self.vjp(tape, theta, &seed, row)
            })?;
        Ok(h)
    }

    /// Central-difference Jacobian, column by column. Test oracle only.
    pub fn finite_diff_jacobian(&self, x: &[f64], theta: &[f64], step: f64) -> Result<Matrix> {
        if !(step > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "finite-difference step must be > 0, got {step}"
            )));
        }
        self.check(x, theta)?;
        let m = self.output_dim();
        let n = self.n_trainable;
        let mut h = Matrix::zeros(m, n);
        let mut probe = theta.to_vec();
        for i in 0..n {
            let delta = step * theta[i].abs().max(1.0);
            probe[i] = theta[i] + delta;
            let plus = self.forward(x, &probe)?;
            probe[i] = theta[i] - delta;
            let minus = self.forward(x, &probe)?;
            probe[i] = theta[i];
            for j in 0..m {
                h[(j, i)] = (plus[j] - minus[j]) / (2.0 * delta);
            }
        }
        Ok(h)
    }

    /// Effective weights of every weight-carrying layer at `theta` (LoRA factors merged).
    pub fn export_weights(&self, theta: &[f64]) -> Result<Vec<LayerWeights>> {
        if theta.len() != self.n_trainable {
            return Err(Error::dims("export_weights", format!("theta length {}", theta.len())));
        }
        Ok(self
            .blocks()
            .map(|block| {
                let (weight, bias) = match self.effective(block, theta) {
                    Effective::Plain { w, b } => (w.to_vec(), b.to_vec()),
                    Effective::Lora { w0, b, a, bf, rank } => {
                        let (d, q) = (block.rows, block.cols);
                        let mut w = w0.to_vec();
                        for o in 0..d {
                            for k in 0..rank {
                                axpy(bf[o * rank + k], &a[k * q..(k + 1) * q], &mut w[o * q..(o + 1) * q]);
                            }
                        }
                        (w, b.to_vec())
                    }
                };
                LayerWeights {
                    rows: block.rows,
                    cols: block.cols,
                    weight,
                    bias,
                }
            })
            .collect())
    }

    /// Replaces frozen weights (and the initial values of fully trainable layers).
    /// LoRA factors keep their initialization, so the adapted model starts equal to
    /// the loaded one.
    pub fn load_weights(&mut self, weights: &[LayerWeights]) -> Result<()> {
        let count = self.blocks().count();
        if weights.len() != count {
            return Err(Error::dims(
                "load_weights",
                format!("{} layers in file, {count} in model", weights.len()),
            ));
        }
        let mut it = weights.iter();
        for node in self.nodes.iter_mut() {
            if let Some(block) = node.kind.block_mut() {
                let lw = it.next().expect("count checked");
                if (lw.rows, lw.cols) != (block.rows, block.cols) || lw.bias.len() != block.rows {
                    return Err(Error::dims(
                        "load_weights",
                        format!(
                            "file layer {}x{} vs model {}x{}",
                            lw.rows, lw.cols, block.rows, block.cols
                        ),
                    ));
                }
                block.w0.copy_from_slice(&lw.weight);
                block.bias.copy_from_slice(&lw.bias);
                if block.mode == ParamMode::Full {
                    let mut t = block.w0.clone();
                    t.extend_from_slice(&block.bias);
                    block.theta0 = t;
                }
            }
        }
        Ok(())
    }
}

fn im2col(input: &[f64], ins: Shape, outs: Shape, kernel: usize, padding: usize) -> Vec<f64> {
    let q = ins.channels * kernel * kernel;
    let positions = outs.height * outs.width;
    let mut patches = vec![0.0; positions * q];
    for oy in 0..outs.height {
        for ox in 0..outs.width {
            let p = oy * outs.width + ox;
            im2col_patch(
                input,
                ins.channels,
                ins.height,
                ins.width,
                kernel,
                kernel,
                padding,
                oy,
                ox,
                &mut patches[p * q..(p + 1) * q],
            );
        }
    }
    patches
}

fn col2im(dpatches: &[f64], ins: Shape, outs: Shape, kernel: usize, padding: usize) -> Vec<f64> {
    let q = ins.channels * kernel * kernel;
    let (h, w) = (ins.height as isize, ins.width as isize);
    let mut gx = vec![0.0; ins.len()];
    for oy in 0..outs.height {
        for ox in 0..outs.width {
            let p = oy * outs.width + ox;
            let patch = &dpatches[p * q..(p + 1) * q];
            let mut idx = 0;
            for c in 0..ins.channels {
                for ky in 0..kernel {
                    let iy = (oy + ky) as isize - padding as isize;
                    for kx in 0..kernel {
                        let ix = (ox + kx) as isize - padding as isize;
                        if iy >= 0 && ix >= 0 && iy < h && ix < w {
                            gx[(c * ins.height + iy as usize) * ins.width + ix as usize] += patch[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
    gx
}

fn avg_pool(input: &[f64], ins: Shape, outs: Shape, size: usize) -> Vec<f64> {
    let scale = 1.0 / (size * size) as f64;
    let mut out = vec![0.0; outs.len()];
    for c in 0..outs.channels {
        for oy in 0..outs.height {
            for ox in 0..outs.width {
                let mut s = 0.0;
                for dy in 0..size {
                    let row = (c * ins.height + oy * size + dy) * ins.width + ox * size;
                    s += input[row..row + size].iter().sum::<f64>();
                }
                out[(c * outs.height + oy) * outs.width + ox] = s * scale;
            }
        }
    }
    out
}

fn avg_pool_back(g: &[f64], ins: Shape, outs: Shape, size: usize) -> Vec<f64> {
    let scale = 1.0 / (size * size) as f64;
    let mut gx = vec![0.0; ins.len()];
    for c in 0..outs.channels {
        for oy in 0..outs.height {
            for ox in 0..outs.width {
                let v = g[(c * outs.height + oy) * outs.width + ox] * scale;
                for dy in 0..size {
                    let row = (c * ins.height + oy * size + dy) * ins.width + ox * size;
                    gx[row..row + size].iter_mut().for_each(|x| *x += v);
                }
            }
        }
    }
    gx
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

const WEIGHTS_MAGIC: &[u8; 8] = b"LOKOWGT1";

/// Writes layer weights in the flat binary format:
///
/// ```text
/// magic   8 bytes  "LOKOWGT1"
/// count   u32 LE   number of weight-carrying layers
/// shapes  count × (u64 LE rows, u64 LE cols)
/// data    per layer: rows·cols f64 LE (row-major weight), then rows f64 LE (bias)
/// ```
pub fn write_weights(path: &Path, weights: &[LayerWeights]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&(weights.len() as u32).to_le_bytes());
    for w in weights {
        buf.extend_from_slice(&(w.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(w.cols as u64).to_le_bytes());
    }
    for w in weights {
        for v in w.weight.iter().chain(&w.bias) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_weights(path: &Path) -> Result<Vec<LayerWeights>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let truncated = |needed: usize| Error::TruncatedFile {
        path: path.to_path_buf(),
        needed,
        found: buf.len(),
    };
    if buf.len() < 12 {
        return Err(truncated(12));
    }
    if &buf[..8] != WEIGHTS_MAGIC {
        return Err(Error::Format {
            what: "weights file",
            detail: format!("bad magic in {path:?}"),
        });
    }
    let count = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes")) as usize;
    let header = 12 + 16 * count;
    if buf.len() < header {
        return Err(truncated(header));
    }
    let mut shapes = Vec::with_capacity(count);
    for i in 0..count {
        let at = 12 + 16 * i;
        let rows = u64::from_le_bytes(buf[at..at + 8].try_into().expect("8 bytes")) as usize;
        let cols = u64::from_le_bytes(buf[at + 8..at + 16].try_into().expect("8 bytes")) as usize;
        shapes.push((rows, cols));
    }
    let needed = header + 8 * shapes.iter().map(|(r, c)| r * c + r).sum::<usize>();
    if buf.len() != needed {
        return Err(truncated(needed));
    }
    let mut at = header;
    let mut read = |n: usize| -> Vec<f64> {
        let v = buf[at..at + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        at += 8 * n;
        v
    };
    Ok(shapes
        .into_iter()
        .map(|(rows, cols)| {
            let weight = read(rows * cols);
            let bias = read(rows);
            LayerWeights {
                rows,
                cols,
                weight,
                bias,
            }
        })
        .collect())
}
