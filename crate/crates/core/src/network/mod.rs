//! Five-level encoder-decoder depth network with depth-weighted skip
//! concatenations at the two deepest decoder levels only.
//!
//! ```text
//! E1 -> E2 -> E3 -> E4 -> E5 -> BN
//!                |     |     |     |
//!                +-----+-----+-----+--> D5 (E3, E4, E5, BN)
//!                +-----+-----------+--> D4 (E3, E4, BN, D5)
//!                                        D3 -> D2 -> D1 -> 1x1 conv -> sigmoid
//! ```
//!
//! Every level is `[conv3x3 -> ReLU -> BN] x 2`. Encoder levels are followed
//! by a 2x2 max-pool, decoder levels are preceded by a 2x bilinear upsample.
//! Skip sources are brought to the decoder scale with max-pooling (finer to
//! coarser) or bilinear upsampling (coarser to finer).

mod checkpoint;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{DepthMap, GrayImage};
use crate::tensor::{Graph, RunningStats, Tensor, Var};

/// Feature maps that can feed a decoder concatenation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureSource {
    E1,
    E2,
    E3,
    E4,
    E5,
    Bottleneck,
    D5,
}

impl FeatureSource {
    /// Spatial scale as a power-of-two divisor of the input resolution.
    pub fn scale_log2(self) -> u32 {
        match self {
            FeatureSource::E1 => 0,
            FeatureSource::E2 => 1,
            FeatureSource::E3 => 2,
            FeatureSource::E4 => 3,
            FeatureSource::E5 | FeatureSource::D5 => 4,
            FeatureSource::Bottleneck => 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecoderLevel {
    D5,
    D4,
}

impl DecoderLevel {
    pub fn scale_log2(self) -> u32 {
        match self {
            DecoderLevel::D5 => 4,
            DecoderLevel::D4 => 3,
        }
    }
}

/// Weights applied to each concatenated part, in concatenation order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkipWeights {
    /// D5 parts: E3, E4, E5, BN.
    pub d5: [f64; 4],
    /// D4 parts: E3, E4, BN, D5.
    pub d4: [f64; 4],
}

impl Default for SkipWeights {
    fn default() -> Self {
        Self {
            d5: [0.1, 0.8, 1.0, 1.0],
            d4: [0.2, 0.5, 0.8, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub input_resolution: usize,
    pub dropout_p: f64,
    #[serde(default)]
    pub skip_weights: SkipWeights,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            input_resolution: 64,
            dropout_p: 0.5,
            skip_weights: SkipWeights::default(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let r = self.input_resolution;
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if !r.is_power_of_two() || r < 32 {
            return Err(Error::Config(format!(
                "input_resolution {r} must be a power of two >= 32"
            )));
        }
        if r >> 6 == 0 {
            return Err(Error::Config(format!(
                "input_resolution {r} is too small for six halvings"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        let all = self.skip_weights.d5.iter().chain(&self.skip_weights.d4);
        if !all.clone().all(|w| w.is_finite()) {
            return Err(Error::Config("skip weights must be finite".into()));
        }
        Ok(())
    }

    /// Encoder level `i` (1-based) width.
    pub fn encoder_channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << 5
    }

    fn source_channels(&self, s: FeatureSource) -> usize {
        match s {
            FeatureSource::E1 => self.encoder_channels(1),
            FeatureSource::E2 => self.encoder_channels(2),
            FeatureSource::E3 => self.encoder_channels(3),
            FeatureSource::E4 => self.encoder_channels(4),
            FeatureSource::E5 | FeatureSource::D5 => self.encoder_channels(5),
            FeatureSource::Bottleneck => self.bottleneck_channels(),
        }
    }

    /// `(in_channels, out_channels)` of every conv block in declaration
    /// order: E1..E5, BN, D5, D4, D3, D2, D1.
    pub fn block_channels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(11);
        let mut cin = 1;
        for level in 1..=5 {
            let c = self.encoder_channels(level);
            out.push((cin, c));
            cin = c;
        }
        out.push((cin, self.bottleneck_channels()));
        for level in [DecoderLevel::D5, DecoderLevel::D4] {
            let cin: usize = concat_edges(self)
                .iter()
                .filter(|e| e.target == level)
                .map(|e| self.source_channels(e.source))
                .sum();
            let cout = match level {
                DecoderLevel::D5 => self.encoder_channels(5),
                DecoderLevel::D4 => self.encoder_channels(4),
            };
            out.push((cin, cout));
        }
        for level in (1..=3).rev() {
            out.push((
                self.encoder_channels(level + 1),
                self.encoder_channels(level),
            ));
        }
        out
    }
}

/// One weighted edge into a decoder concatenation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcatEdge {
    pub target: DecoderLevel,
    pub source: FeatureSource,
    pub weight: f64,
}

/// All concatenation edges of the architecture, in concatenation order.
pub fn concat_edges(config: &NetworkConfig) -> Vec<ConcatEdge> {
    use FeatureSource::*;
    let w = config.skip_weights;
    let d5 = [E3, E4, E5, Bottleneck]
        .into_iter()
        .zip(w.d5)
        .map(|(source, weight)| ConcatEdge {
            target: DecoderLevel::D5,
            source,
            weight,
        });
    let d4 = [E3, E4, Bottleneck, D5]
        .into_iter()
        .zip(w.d4)
        .map(|(source, weight)| ConcatEdge {
            target: DecoderLevel::D4,
            source,
            weight,
        });
    d5.chain(d4).collect()
}

/// Exact number of trainable scalars: conv weights and biases plus
/// batch-norm scale and shift.
pub fn parameter_count(config: &NetworkConfig) -> usize {
    let blocks: usize = config
        .block_channels()
        .iter()
        .map(|&(cin, cout)| unit_params(cin, cout) + unit_params(cout, cout))
        .sum();
    blocks + config.base_channels + 1
}

fn unit_params(cin: usize, cout: usize) -> usize {
    9 * cin * cout + cout + 2 * cout
}

/// Smallest-error base width whose parameter count lies within
/// `target * (1 +- rel_tol)`. Returns `(base_channels, count)`.
pub fn search_base_channels(
    target: usize,
    rel_tol: f64,
    input_resolution: usize,
) -> Option<(usize, usize)> {
    let lo = target as f64 * (1.0 - rel_tol);
    let hi = target as f64 * (1.0 + rel_tol);
    let mut best: Option<(usize, usize)> = None;
    for base in 1.. {
        let cfg = NetworkConfig {
            base_channels: base,
            input_resolution,
            ..NetworkConfig::default()
        };
        let count = parameter_count(&cfg);
        if count as f64 > hi {
            break;
        }
        if count as f64 >= lo {
            let err = (count as f64 - target as f64).abs();
            if best.is_none_or(|(_, c)| err < (c as f64 - target as f64).abs()) {
                best = Some((base, count));
            }
        }
    }
    best
}

/// conv3x3 -> ReLU -> BN.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit {
    pub weight: Tensor,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: RunningStats,
}

impl ConvUnit {
    fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: he_normal(&[cout, cin, 3, 3], rng),
            bias: Tensor::zeros(&[cout]).with_grad(),
            gamma: Tensor::full(&[cout], 1.0).with_grad(),
            beta: Tensor::zeros(&[cout]).with_grad(),
            stats: RunningStats::new(cout),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub units: [ConvUnit; 2],
}

impl ConvBlock {
    fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let first = ConvUnit::new(cin, cout, rng);
        let second = ConvUnit::new(cout, cout, rng);
        Self {
            units: [first, second],
        }
    }
}

fn he_normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let data = (0..shape.iter().product::<usize>())
        .map(|_| normal.sample(rng))
        .collect();
    Tensor::new(shape.to_vec(), data)
        .expect("consistent shape")
        .with_grad()
}

/// Hook that may rewrite a resampled skip tensor right before it is
/// concatenated. Used to probe the effect of individual skip edges.
pub type SkipTap<'a> = dyn FnMut(ConcatEdge, &mut Tensor) + 'a;

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub output: Var,
    /// Parameter leaves in declaration order.
    pub params: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: NetworkConfig,
    /// E1..E5
    pub encoder: Vec<ConvBlock>,
    pub bottleneck: ConvBlock,
    /// D5, D4, D3, D2, D1
    pub decoder: Vec<ConvBlock>,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

impl Model {
    /// He-normal weights, zero biases, unit BN scale; deterministic per seed.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = config
            .block_channels()
            .into_iter()
            .map(|(cin, cout)| ConvBlock::new(cin, cout, &mut rng))
            .collect::<Vec<_>>();
        let decoder = blocks.split_off(6);
        let bottleneck = blocks.pop().expect("six encoder-side blocks");
        Ok(Self {
            config,
            encoder: blocks,
            bottleneck,
            decoder,
            head_weight: he_normal(&[1, config.base_channels, 1, 1], &mut rng),
            head_bias: Tensor::zeros(&[1]).with_grad(),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    fn blocks(&self) -> impl Iterator<Item = &ConvBlock> {
        self.encoder
            .iter()
            .chain(std::iter::once(&self.bottleneck))
            .chain(&self.decoder)
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut ConvBlock> {
        self.encoder
            .iter_mut()
            .chain(std::iter::once(&mut self.bottleneck))
            .chain(&mut self.decoder)
    }

    /// Trainable tensors in declaration order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for block in self.blocks() {
            for u in &block.units {
                out.extend([&u.weight, &u.bias, &u.gamma, &u.beta]);
            }
        }
        out.extend([&self.head_weight, &self.head_bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        let blocks = self
            .encoder
            .iter_mut()
            .chain(std::iter::once(&mut self.bottleneck))
            .chain(&mut self.decoder);
        for block in blocks {
            for u in &mut block.units {
                out.extend([&mut u.weight, &mut u.bias, &mut u.gamma, &mut u.beta]);
            }
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    /// Names matching [`Model::params`].
    pub fn param_names(&self) -> Vec<String> {
        let labels = [
            "e1", "e2", "e3", "e4", "e5", "bn", "d5", "d4", "d3", "d2", "d1",
        ];
        let mut out = Vec::new();
        for label in labels {
            for u in 0..2 {
                for p in ["weight", "bias", "gamma", "beta"] {
                    out.push(format!("{label}.{u}.{p}"));
                }
            }
        }
        out.push("head.weight".into());
        out.push("head.bias".into());
        out
    }

    pub fn running_stats(&self) -> Vec<&RunningStats> {
        self.blocks()
            .flat_map(|b| b.units.iter().map(|u| &u.stats))
            .collect()
    }

    pub fn running_stats_mut(&mut self) -> Vec<&mut RunningStats> {
        self.blocks_mut()
            .flat_map(|b| b.units.iter_mut().map(|u| &mut u.stats))
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        graph: &mut Graph,
        input: &Tensor,
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardPass> {
        self.forward_tapped(graph, input, training, rng, None)
    }

    /// Forward pass with an optional hook on every skip tensor.
    pub fn forward_tapped<R: Rng + ?Sized>(
        &mut self,
        graph: &mut Graph,
        input: &Tensor,
        training: bool,
        rng: &mut R,
        tap: Option<&mut SkipTap<'_>>,
    ) -> Result<ForwardPass> {
        let (pass, stats) = self.forward_impl(graph, input, training, rng, tap)?;
        if training {
            for (dst, src) in self.running_stats_mut().into_iter().zip(stats) {
                *dst = src;
            }
        }
        Ok(pass)
    }

    /// Runs the network without touching `self`; batch-norm statistics are
    /// updated on copies that are returned in declaration order.
    fn forward_impl<R: Rng + ?Sized>(
        &self,
        graph: &mut Graph,
        input: &Tensor,
        training: bool,
        rng: &mut R,
        mut tap: Option<&mut SkipTap<'_>>,
    ) -> Result<(ForwardPass, Vec<RunningStats>)> {
        let (_, c, h, w) = input.dims4()?;
        if c != 1 {
            return Err(Error::Shape(format!(
                "network takes a single (red) input channel, got {c}"
            )));
        }
        let r = self.config.input_resolution;
        if h != r || w != r {
            return Err(Error::Shape(format!(
                "network built for {r}x{r} input, got {h}x{w}"
            )));
        }
        let cfg = self.config;
        let mut params = Vec::new();
        let mut stats = Vec::new();
        let x = graph.leaf(input.clone());

        let mut feats: Vec<Var> = Vec::with_capacity(5);
        let mut cur = x;
        for (i, block) in self.encoder.iter().enumerate() {
            if i > 0 {
                cur = graph.maxpool2d(cur, 2, 2)?;
            }
            cur = run_block(graph, block, cur, training, &mut params, &mut stats)?;
            feats.push(cur);
        }
        let e5 = graph.dropout(feats[4], cfg.dropout_p, training, rng)?;
        feats[4] = e5;
        let pooled = graph.maxpool2d(e5, 2, 2)?;
        let bn = run_block(
            graph,
            &self.bottleneck,
            pooled,
            training,
            &mut params,
            &mut stats,
        )?;
        let bn = graph.dropout(bn, cfg.dropout_p, training, rng)?;

        let edges = concat_edges(&cfg);
        let mut cur = bn;
        let mut d5 = None;
        for (i, block) in self.decoder.iter().enumerate() {
            let up = graph.upsample_bilinear(cur, 2)?;
            let level = match i {
                0 => Some(DecoderLevel::D5),
                1 => Some(DecoderLevel::D4),
                _ => None,
            };
            let block_in = match level {
                Some(level) => {
                    let mut parts = Vec::with_capacity(4);
                    for edge in edges.iter().filter(|e| e.target == level) {
                        let src = match edge.source {
                            FeatureSource::E1 => feats[0],
                            FeatureSource::E2 => feats[1],
                            FeatureSource::E3 => feats[2],
                            FeatureSource::E4 => feats[3],
                            FeatureSource::E5 => feats[4],
                            FeatureSource::Bottleneck => bn,
                            FeatureSource::D5 => d5.expect("D5 precedes D4"),
                        };
                        // the previous decoder output is already upsampled
                        let is_previous = matches!(
                            (level, edge.source),
                            (DecoderLevel::D5, FeatureSource::Bottleneck)
                                | (DecoderLevel::D4, FeatureSource::D5)
                        );
                        let mut part = if is_previous {
                            up
                        } else {
                            resample(graph, src, edge.source.scale_log2(), level.scale_log2())?
                        };
                        if let Some(tap) = tap.as_deref_mut() {
                            let mut t = graph.value(part).clone();
                            t.set_grad(None);
                            tap(*edge, &mut t);
                            let rg = graph.value(part).requires_grad();
                            t.set_requires_grad(rg);
                            part = graph.leaf(t);
                        }
                        parts.push((part, edge.weight));
                    }
                    graph.weighted_concat(&parts)?
                }
                None => up,
            };
            cur = run_block(graph, block, block_in, training, &mut params, &mut stats)?;
            if i == 0 {
                d5 = Some(cur);
            }
        }
        let hw = graph.leaf(self.head_weight.clone());
        let hb = graph.leaf(self.head_bias.clone());
        params.extend([hw, hb]);
        let logits = graph.conv2d(cur, hw, Some(hb), 1, 0)?;
        let output = graph.sigmoid(logits);
        Ok((ForwardPass { output, params }, stats))
    }

    /// Copies gradients from a finished backward pass into the parameter
    /// tensors.
    pub fn absorb_grads(&mut self, graph: &mut Graph, pass: &ForwardPass) {
        let grads: Vec<Option<Vec<f64>>> =
            pass.params.iter().map(|&v| graph.take_grad(v)).collect();
        for (p, g) in self.params_mut().into_iter().zip(grads) {
            let len = p.numel();
            p.set_grad(Some(g.unwrap_or_else(|| vec![0.0; len])));
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.set_grad(None);
        }
    }

    /// Eval-mode prediction of normalized depth for a `[N, 1, R, R]` batch.
    pub fn predict_tensor(&self, input: &Tensor) -> Result<Tensor> {
        let mut graph = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (pass, _) = self.forward_impl(&mut graph, input, false, &mut rng, None)?;
        Ok(graph.value(pass.output).clone())
    }

    /// Predicts a millimetre depth map for one image.
    pub fn predict(&self, image: &GrayImage) -> Result<DepthMap> {
        let out = self.predict_tensor(&image.to_tensor())?;
        DepthMap::from_normalized(&out)
    }
}

fn run_block(
    graph: &mut Graph,
    block: &ConvBlock,
    input: Var,
    training: bool,
    params: &mut Vec<Var>,
    stats: &mut Vec<RunningStats>,
) -> Result<Var> {
    let mut cur = input;
    for unit in &block.units {
        let w = graph.leaf(unit.weight.clone());
        let b = graph.leaf(unit.bias.clone());
        let g = graph.leaf(unit.gamma.clone());
        let be = graph.leaf(unit.beta.clone());
        params.extend([w, b, g, be]);
        cur = graph.conv2d(cur, w, Some(b), 1, 1)?;
        cur = graph.relu(cur);
        let mut st = unit.stats.clone();
        cur = graph.batchnorm(cur, g, be, &mut st, training)?;
        stats.push(st);
    }
    Ok(cur)
}

fn resample(graph: &mut Graph, v: Var, from_log2: u32, to_log2: u32) -> Result<Var> {
    use std::cmp::Ordering;
    match from_log2.cmp(&to_log2) {
        Ordering::Equal => Ok(v),
        Ordering::Less => {
            let k = 1 << (to_log2 - from_log2);
            graph.maxpool2d(v, k, k)
        }
        Ordering::Greater => graph.upsample_bilinear(v, 1 << (from_log2 - to_log2)),
    }
}
