//! 2-D U-Net split into a feature extractor (encoder) and a segmentation
//! head (decoder).
//!
//! Layer layout for depth `D` and width multiplier `c` (channels at level
//! `l` are `c * 2^l`):
//!
//! ```text
//! enc0.a  conv3x3 s1  in -> c      IN ReLU
//! enc0.b  conv3x3 s1  c  -> c      IN ReLU          (skip, level 0)
//! encL.a  conv3x3 s2              IN ReLU          L = 1..=D
//! encL.b  conv3x3 s1              IN ReLU          (skip, level L; L = D is the bottleneck)
//! decL.up transconv2x2 s2 + concat skip L          L = D-1..=0
//! decL.a  conv3x3 s1  2ch -> ch   IN ReLU
//! decL.b  conv3x3 s1  ch  -> ch   IN ReLU          (feature tap, level L)
//! headL   conv1x1     ch  -> n                     (logits, level L)
//! ```
//!
//! `head0` is the output layer; the other heads are deep-supervision side
//! outputs. Softmax is applied by the loss, not by the network.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ParamVars, Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    /// Number of down/up blocks.
    pub depth: usize,
    /// Starting channel width multiplier.
    pub base_channels: usize,
    /// Output classes, background included.
    pub classes: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { in_channels: 1, depth: 3, base_channels: 8, classes: 4 }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::InvalidArgument("network depth must be at least 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::InvalidArgument("channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Pyramid scales (one per decoder block).
    pub fn scales(&self) -> usize {
        self.depth
    }

    pub fn stride(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// 3x3 convolution without bias followed by instance norm and ReLU.
    ConvNormRelu { in_ch: usize, out_ch: usize, stride: usize },
    /// 2x2 stride-2 transposed convolution with bias.
    Up { in_ch: usize, out_ch: usize },
    /// 1x1 convolution with bias.
    Head { in_ch: usize, out_ch: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Index of the owning block in `UNet::blocks`.
    pub block: usize,
}

impl LayerSpec {
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let n = &self.name;
        match self.kind {
            LayerKind::ConvNormRelu { in_ch, out_ch, .. } => vec![
                (format!("{n}.w"), vec![out_ch, in_ch, 3, 3]),
                (format!("{n}.gamma"), vec![out_ch]),
                (format!("{n}.beta"), vec![out_ch]),
            ],
            LayerKind::Up { in_ch, out_ch } => {
                vec![(format!("{n}.w"), vec![in_ch, out_ch, 2, 2]), (format!("{n}.b"), vec![out_ch])]
            }
            LayerKind::Head { in_ch, out_ch } => {
                vec![(format!("{n}.w"), vec![out_ch, in_ch, 1, 1]), (format!("{n}.b"), vec![out_ch])]
            }
        }
    }

    pub fn param_ids(&self) -> Vec<String> {
        self.param_shapes().into_iter().map(|(id, _)| id).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    /// Indices into `UNet::layers`.
    pub layers: Vec<usize>,
    pub encoder: bool,
}

/// Which head layers are updated during few-shot fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneMask {
    None,
    /// Every head parameter.
    All,
    /// The last `k` up blocks (each: transposed conv, two convs, and its
    /// output conv). `UpBlocks(1)` is the "last three layers" setting.
    UpBlocks(usize),
}

impl FinetuneMask {
    pub const LAST_THREE_LAYERS: FinetuneMask = FinetuneMask::UpBlocks(1);

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "none" | "0" => Ok(FinetuneMask::None),
            "all" => Ok(FinetuneMask::All),
            "last3" => Ok(FinetuneMask::LAST_THREE_LAYERS),
            other => other
                .strip_prefix("up:")
                .and_then(|k| k.parse().ok())
                .map(FinetuneMask::UpBlocks)
                .ok_or_else(|| Error::Config(format!("unknown fine-tune mask `{other}`"))),
        }
    }

    pub fn label(&self) -> String {
        match self {
            FinetuneMask::None => "none".into(),
            FinetuneMask::All => "all".into(),
            FinetuneMask::UpBlocks(k) => format!("up:{k}"),
        }
    }
}

/// Id-level split of the network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamPartition {
    /// Feature-extractor (meta-learner) parameter ids.
    pub theta: BTreeSet<String>,
    /// Segmentation-head (base-learner) parameter ids; φ shares these ids.
    pub omega: BTreeSet<String>,
    /// Head layer names in forward order.
    pub head_layers: Vec<String>,
    /// Main-sequence index of the first head layer.
    pub split_point: usize,
}

impl ParamPartition {
    /// Splits a full parameter set into (θ, ω).
    pub fn split(&self, full: &ParamSet) -> Result<(ParamSet, ParamSet)> {
        let theta = full.filter(|id| self.theta.contains(id));
        let omega = full.filter(|id| self.omega.contains(id));
        if theta.len() != self.theta.len() || omega.len() != self.omega.len() {
            return Err(Error::InvalidArgument("parameter set does not cover the partition".into()));
        }
        Ok((theta, omega))
    }

    pub fn is_omega(&self, id: &str) -> bool {
        self.omega.contains(id)
    }
}

/// Per-scale outputs of one forward pass, ordered coarse to fine.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    /// `(feature tap, logits)` per scale; the last entry is full resolution.
    pub scales: Vec<ScaleOutput>,
}

#[derive(Clone, Copy, Debug)]
pub struct ScaleOutput {
    /// Resolution level: extents are the input's divided by `2^level`.
    pub level: usize,
    pub features: Var,
    pub logits: Var,
}

impl FeaturePyramid {
    pub fn final_logits(&self) -> Var {
        self.scales.last().expect("pyramid has at least one scale").logits
    }

    pub fn logits(&self) -> Vec<Var> {
        self.scales.iter().map(|s| s.logits).collect()
    }
}

#[derive(Clone, Debug)]
pub struct UNet {
    config: NetworkConfig,
    layers: Vec<LayerSpec>,
    blocks: Vec<Block>,
    /// Layers in main-sequence order (side heads excluded).
    sequence: Vec<usize>,
}

impl UNet {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut blocks = Vec::new();
        let mut sequence = Vec::new();
        let d = config.depth;
        for level in 0..=d {
            let block = blocks.len();
            let in_ch = if level == 0 { config.in_channels } else { config.channels_at(level - 1) };
            let ch = config.channels_at(level);
            let stride = if level == 0 { 1 } else { 2 };
            let a = layers.len();
            layers.push(LayerSpec {
                name: format!("enc{level}.a"),
                kind: LayerKind::ConvNormRelu { in_ch, out_ch: ch, stride },
                block,
            });
            layers.push(LayerSpec {
                name: format!("enc{level}.b"),
                kind: LayerKind::ConvNormRelu { in_ch: ch, out_ch: ch, stride: 1 },
                block,
            });
            sequence.extend([a, a + 1]);
            blocks.push(Block { name: format!("enc{level}"), layers: vec![a, a + 1], encoder: true });
        }
        for level in (0..d).rev() {
            let block = blocks.len();
            let ch = config.channels_at(level);
            let up = layers.len();
            layers.push(LayerSpec {
                name: format!("dec{level}.up"),
                kind: LayerKind::Up { in_ch: config.channels_at(level + 1), out_ch: ch },
                block,
            });
            layers.push(LayerSpec {
                name: format!("dec{level}.a"),
                kind: LayerKind::ConvNormRelu { in_ch: 2 * ch, out_ch: ch, stride: 1 },
                block,
            });
            layers.push(LayerSpec {
                name: format!("dec{level}.b"),
                kind: LayerKind::ConvNormRelu { in_ch: ch, out_ch: ch, stride: 1 },
                block,
            });
            layers.push(LayerSpec {
                name: format!("head{level}"),
                kind: LayerKind::Head { in_ch: ch, out_ch: config.classes },
                block,
            });
            sequence.extend([up, up + 1, up + 2]);
            if level == 0 {
                sequence.push(up + 3);
            }
            blocks.push(Block { name: format!("dec{level}"), layers: vec![up, up + 1, up + 2, up + 3], encoder: false });
        }
        Ok(Self { config, layers, blocks, sequence })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Main-sequence layer names (deep-supervision side heads excluded).
    pub fn sequence(&self) -> Vec<&str> {
        self.sequence.iter().map(|&i| self.layers[i].name.as_str()).collect()
    }

    fn layer(&self, name: &str) -> &LayerSpec {
        self.layers.iter().find(|l| l.name == name).expect("layer names are fixed at construction")
    }

    /// Parameter shapes for every layer, in layer order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers.iter().flat_map(LayerSpec::param_shapes).collect()
    }

    /// He-normal convolution weights, unit gain, zero shifts and biases.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for layer in &self.layers {
            for (id, shape) in layer.param_shapes() {
                let numel: usize = shape.iter().product();
                let tensor = if id.ends_with(".gamma") {
                    Tensor::full(&shape, 1.0)
                } else if id.ends_with(".beta") || id.ends_with(".b") {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in = match layer.kind {
                        LayerKind::ConvNormRelu { in_ch, .. } => in_ch * 9,
                        LayerKind::Up { in_ch, .. } => in_ch,
                        LayerKind::Head { in_ch, .. } => in_ch,
                    };
                    let gain = if matches!(layer.kind, LayerKind::Head { .. }) { 1.0 } else { 2.0 };
                    let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
                    let data = (0..numel).map(|_| normal.sample(&mut rng)).collect();
                    Tensor::from_parts_unchecked(shape, data)
                };
                params.insert(id, tensor);
            }
        }
        params
    }

    /// Default split: the encoder blocks (down blocks and bottleneck)
    /// form θ, the decoder blocks form ω.
    pub fn default_split_point(&self) -> usize {
        2 * (self.config.depth + 1)
    }

    /// Splits at a main-sequence layer index, which must start a block.
    pub fn split_params(&self, split_point: usize) -> Result<ParamPartition> {
        if split_point == 0 || split_point >= self.sequence.len() {
            return Err(Error::InvalidArgument(format!(
                "split point {split_point} leaves one side empty (valid: 1..{})",
                self.sequence.len()
            )));
        }
        let layer = &self.layers[self.sequence[split_point]];
        let block = &self.blocks[layer.block];
        if block.layers[0] != self.sequence[split_point] {
            return Err(Error::InvalidArgument(format!(
                "split point {split_point} (`{}`) falls inside block `{}`",
                layer.name, block.name
            )));
        }
        let first_head_block = layer.block;
        let mut theta = BTreeSet::new();
        let mut omega = BTreeSet::new();
        let mut head_layers = Vec::new();
        for l in &self.layers {
            if l.block < first_head_block {
                theta.extend(l.param_ids());
            } else {
                omega.extend(l.param_ids());
                head_layers.push(l.name.clone());
            }
        }
        Ok(ParamPartition { theta, omega, head_layers, split_point })
    }

    /// Parameter ids updated under `mask`; always a subset of ω.
    pub fn finetune_ids(&self, partition: &ParamPartition, mask: FinetuneMask) -> Result<BTreeSet<String>> {
        let names: Vec<&str> = match mask {
            FinetuneMask::None => Vec::new(),
            FinetuneMask::All => partition.head_layers.iter().map(String::as_str).collect(),
            FinetuneMask::UpBlocks(k) => {
                if k > self.config.depth {
                    return Err(Error::InvalidArgument(format!(
                        "cannot fine-tune {k} up blocks of a depth-{} network",
                        self.config.depth
                    )));
                }
                self.blocks
                    .iter()
                    .rev()
                    .take(k)
                    .flat_map(|b| b.layers.iter().map(|&i| self.layers[i].name.as_str()))
                    .collect()
            }
        };
        let mut ids = BTreeSet::new();
        for name in names {
            for id in self.layer(name).param_ids() {
                if !partition.is_omega(&id) {
                    return Err(Error::InvalidArgument(format!(
                        "fine-tune mask reaches `{id}` outside the head partition"
                    )));
                }
                ids.insert(id);
            }
        }
        Ok(ids)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape else {
            return Err(Error::Shape(format!("network input must be NCHW, got {shape:?}")));
        };
        let stride = self.config.stride();
        if *c != self.config.in_channels || h % stride != 0 || w % stride != 0 {
            return Err(Error::Shape(format!(
                "input {shape:?} incompatible with {} channel(s) and stride {stride}",
                self.config.in_channels
            )));
        }
        Ok(())
    }

    fn conv_norm_relu(&self, tape: &mut Tape, p: &ParamVars, name: &str, x: Var) -> Result<Var> {
        let LayerKind::ConvNormRelu { stride, .. } = self.layer(name).kind else {
            unreachable!("{name} is a conv layer")
        };
        let w = p.get(&format!("{name}.w"))?;
        let y = tape.conv2d(x, w, None, stride, 1)?;
        let y = tape.instance_norm(y, p.get(&format!("{name}.gamma"))?, p.get(&format!("{name}.beta"))?, NORM_EPS)?;
        tape.relu(y)
    }

    /// Records a forward pass. `params` must bind every network parameter.
    pub fn forward(&self, tape: &mut Tape, params: &ParamVars, input: Var) -> Result<FeaturePyramid> {
        self.check_input(tape.value(input).shape())?;
        let d = self.config.depth;
        let mut skips = Vec::with_capacity(d + 1);
        let mut x = input;
        for level in 0..=d {
            x = self.conv_norm_relu(tape, params, &format!("enc{level}.a"), x)?;
            x = self.conv_norm_relu(tape, params, &format!("enc{level}.b"), x)?;
            skips.push(x);
        }
        let mut scales = Vec::with_capacity(d);
        for level in (0..d).rev() {
            let up = tape.conv_transpose2d(
                x,
                params.get(&format!("dec{level}.up.w"))?,
                Some(params.get(&format!("dec{level}.up.b"))?),
            )?;
            let cat = tape.concat_channels(up, skips[level])?;
            x = self.conv_norm_relu(tape, params, &format!("dec{level}.a"), cat)?;
            x = self.conv_norm_relu(tape, params, &format!("dec{level}.b"), x)?;
            let logits = tape.conv2d(
                x,
                params.get(&format!("head{level}.w"))?,
                Some(params.get(&format!("head{level}.b"))?),
                1,
                0,
            )?;
            scales.push(ScaleOutput { level, features: x, logits });
        }
        Ok(FeaturePyramid { scales })
    }

    /// Forward pass without gradients; returns full-resolution logits.
    pub fn predict(&self, params: &ParamSet, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = tape.register(params)?;
        let x = tape.constant(input.clone())?;
        let pyramid = self.forward(&mut tape, &vars, x)?;
        Ok(tape.value(pyramid.final_logits()).clone())
    }
}
