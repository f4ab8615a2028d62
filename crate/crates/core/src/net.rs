//! Declarative configuration and construction of quantized 1D-CNN
//! basecallers, forward inference to frame posteriors, parameter
//! counting, per-layer cost rows, and skip-connection surgery.
//!
//! A block is `repeats` copies of: grouped spatial conv -> pointwise
//! conv -> batch norm -> quantized ReLU. A skip connection adds the
//! block input to the block output, through a pointwise projection
//! conv + batch norm when the channel counts differ. The head is a
//! pointwise conv to 5 classes followed by log-softmax.

use crate::ctc::{FramePosterior, CLASSES};
use crate::error::{Error, Result};
use crate::quant::{FakeQuantizer, LayerCost, LayerKind, QuantSpec};
use crate::tensor::{BnState, Mode, Real, Tape, Tensor, Value};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One block of the network. `groups: None` means fully depthwise
/// spatial convolutions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub kernel_size: usize,
    pub channels_out: usize,
    #[serde(default = "one")]
    pub repeats: usize,
    #[serde(default)]
    pub groups: Option<usize>,
    #[serde(default)]
    pub has_skip: bool,
    /// Explicit projection override; `None` means a projection exists
    /// exactly when the channel counts differ.
    #[serde(default)]
    pub skip_projection: Option<bool>,
    pub quant: QuantSpec,
    #[serde(default)]
    pub is_identity: bool,
}

fn one() -> usize {
    1
}

impl BlockConfig {
    pub fn new(kernel_size: usize, channels_out: usize, quant: QuantSpec) -> Self {
        BlockConfig {
            kernel_size,
            channels_out,
            repeats: 1,
            groups: None,
            has_skip: false,
            skip_projection: None,
            quant,
            is_identity: false,
        }
    }

    pub fn with_skip(mut self) -> Self {
        self.has_skip = true;
        self
    }

    pub fn with_repeats(mut self, repeats: usize) -> Self {
        self.repeats = repeats;
        self
    }

    pub fn identity() -> Self {
        BlockConfig {
            kernel_size: 1,
            channels_out: 0,
            repeats: 1,
            groups: None,
            has_skip: false,
            skip_projection: None,
            quant: QuantSpec::FLOAT,
            is_identity: true,
        }
    }

    fn validate(&self, channels_in: usize) -> Result<()> {
        if self.is_identity {
            return Ok(());
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel size {} must be odd for length-preserving padding",
                self.kernel_size
            )));
        }
        if self.channels_out == 0 || self.repeats == 0 {
            return Err(Error::Config("channels_out and repeats must be >= 1".into()));
        }
        self.quant.validate()?;
        if let Some(g) = self.groups {
            if g == 0 || channels_in % g != 0 || self.channels_out % g != 0 {
                return Err(Error::Config(format!(
                    "groups {g} must divide channels_in {channels_in} and channels_out {}",
                    self.channels_out
                )));
            }
        }
        Ok(())
    }
}

/// Full network description: stem conv, blocks, and the 5-class head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub stem: BlockConfig,
    #[serde(default = "one")]
    pub stem_stride: usize,
    pub blocks: Vec<BlockConfig>,
    pub head_quant: QuantSpec,
    #[serde(default = "one")]
    pub input_features: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_features != 1 {
            return Err(Error::Config("input_features must be 1 (raw signal)".into()));
        }
        if self.stem.is_identity || self.stem.has_skip || self.stem.repeats != 1 {
            return Err(Error::Config(
                "stem must be a single non-identity, non-skip conv".into(),
            ));
        }
        if self.stem_stride == 0 {
            return Err(Error::Config("stem stride must be >= 1".into()));
        }
        self.stem.validate(self.input_features)?;
        let mut channels = self.stem.channels_out;
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate(channels)
                .map_err(|e| Error::Config(format!("block {i}: {e}")))?;
            if !b.is_identity {
                channels = b.channels_out;
            }
        }
        self.head_quant.validate()?;
        Ok(())
    }

    /// Channel count entering the head.
    pub fn final_channels(&self) -> usize {
        self.blocks
            .iter()
            .filter(|b| !b.is_identity)
            .next_back()
            .map(|b| b.channels_out)
            .unwrap_or(self.stem.channels_out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Closed-form parameter count (weights, biases, batch-norm
    /// affine), matching what `Model::build` realizes.
    pub fn count_params(&self) -> usize {
        let mut total = 0usize;
        // stem conv + bn
        total += self.stem.channels_out * self.input_features * self.stem.kernel_size;
        total += 2 * self.stem.channels_out;
        let mut c_in = self.stem.channels_out;
        for b in &self.blocks {
            if b.is_identity {
                continue;
            }
            let c_out = b.channels_out;
            let mut c = c_in;
            for _ in 0..b.repeats {
                let g = b.groups.unwrap_or(c);
                total += c * (c / g) * b.kernel_size; // spatial
                total += c_out * c; // pointwise
                total += 2 * c_out; // bn
                c = c_out;
            }
            if b.has_skip && b.skip_projection.unwrap_or(c_in != c_out) {
                total += c_out * c_in + 2 * c_out; // projection + bn
            }
            c_in = c_out;
        }
        total += CLASSES * c_in + CLASSES; // head conv with bias
        total
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ConvLayer<T: Real> {
    pub name: String,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub wq: FakeQuantizer<T>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl<T: Real> ConvLayer<T> {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        name: String,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
        weight_bits: u8,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (c_in / groups) * kernel;
        let bound = T::from_f64(1.0 / (fan_in as f64).sqrt());
        let weight =
            Tensor::uniform(&[c_out, c_in / groups, kernel], bound, rng).requires_grad(true);
        let bias = bias.then(|| Tensor::zeros(&[c_out]).requires_grad(true));
        ConvLayer {
            name,
            weight,
            bias,
            stride,
            padding,
            groups,
            wq: FakeQuantizer::weights(weight_bits),
            c_in,
            c_out,
            kernel,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map(|b| b.numel()).unwrap_or(0)
    }

    /// Leaf order must match `params_mut`: weight, then bias.
    pub(crate) fn forward_tracked(
        &mut self,
        tape: &mut Tape<T>,
        x: Value,
        mode: Mode,
        leaves: &mut Vec<Value>,
    ) -> Result<Value> {
        let w = tape.leaf(&self.weight);
        leaves.push(w);
        let wq = self.wq.apply(tape, w, mode)?;
        let b = self.bias.as_ref().map(|b| {
            let v = tape.leaf(b);
            leaves.push(v);
            v
        });
        tape.conv1d(x, wq, b, self.stride, self.padding, self.groups)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct NormLayer<T: Real> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub state: BnState<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Real> NormLayer<T> {
    pub(crate) fn new(channels: usize) -> Self {
        NormLayer {
            gamma: Tensor::from_vec(&[channels], vec![T::one(); channels])
                .unwrap()
                .requires_grad(true),
            beta: Tensor::zeros(&[channels]).requires_grad(true),
            state: BnState::new(channels),
            momentum: T::from_f64(0.1),
            eps: T::from_f64(1e-5),
        }
    }

    pub(crate) fn forward_tracked(
        &mut self,
        tape: &mut Tape<T>,
        x: Value,
        mode: Mode,
        leaves: &mut Vec<Value>,
    ) -> Result<Value> {
        let g = tape.leaf(&self.gamma);
        let b = tape.leaf(&self.beta);
        leaves.push(g);
        leaves.push(b);
        tape.batch_norm1d(x, g, b, &mut self.state, mode, self.momentum, self.eps)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct RepeatUnit<T: Real> {
    pub(crate) spatial: ConvLayer<T>,
    pub(crate) pointwise: ConvLayer<T>,
    pub(crate) norm: NormLayer<T>,
    pub(crate) act: FakeQuantizer<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct SkipPath<T: Real> {
    pub(crate) proj: Option<(ConvLayer<T>, NormLayer<T>)>,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockNet<T: Real> {
    pub(crate) units: Vec<RepeatUnit<T>>,
    pub(crate) skip: Option<SkipPath<T>>,
    pub(crate) identity: bool,
}

/// Realized network with tensors, quantizers, and batch-norm state.
#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub(crate) stem_conv: ConvLayer<T>,
    pub(crate) stem_norm: NormLayer<T>,
    pub(crate) stem_act: FakeQuantizer<T>,
    pub(crate) blocks: Vec<BlockNet<T>>,
    pub(crate) head: ConvLayer<T>,
}

/// Tape handles from one forward pass.
pub struct ForwardOut {
    /// Head output before normalization, `[batch, 5, frames]`.
    pub logits: Value,
    /// Log-softmax over classes, `[batch, 5, frames]`.
    pub log_probs: Value,
    /// Leaves aligned with `Model::params_mut` order.
    pub leaves: Vec<Value>,
    pub frames: usize,
}

impl<T: Real> Model<T> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem_conv = ConvLayer::new(
            "stem.conv".into(),
            config.input_features,
            config.stem.channels_out,
            config.stem.kernel_size,
            config.stem_stride,
            (config.stem.kernel_size - 1) / 2,
            1,
            false,
            config.stem.quant.weight_bits,
            &mut rng,
        );
        let stem_norm = NormLayer::new(config.stem.channels_out);
        let stem_act = FakeQuantizer::activations(config.stem.quant.act_bits);

        let mut blocks = Vec::new();
        let mut c_in = config.stem.channels_out;
        for (bi, bc) in config.blocks.iter().enumerate() {
            if bc.is_identity {
                blocks.push(BlockNet {
                    units: Vec::new(),
                    skip: None,
                    identity: true,
                });
                continue;
            }
            let c_out = bc.channels_out;
            let mut units = Vec::new();
            let mut c = c_in;
            for u in 0..bc.repeats {
                let g = bc.groups.unwrap_or(c);
                let spatial = ConvLayer::new(
                    format!("block{bi}.unit{u}.spatial"),
                    c,
                    c,
                    bc.kernel_size,
                    1,
                    (bc.kernel_size - 1) / 2,
                    g,
                    false,
                    bc.quant.weight_bits,
                    &mut rng,
                );
                let pointwise = ConvLayer::new(
                    format!("block{bi}.unit{u}.pointwise"),
                    c,
                    c_out,
                    1,
                    1,
                    0,
                    1,
                    false,
                    bc.quant.weight_bits,
                    &mut rng,
                );
                units.push(RepeatUnit {
                    spatial,
                    pointwise,
                    norm: NormLayer::new(c_out),
                    act: FakeQuantizer::activations(bc.quant.act_bits),
                });
                c = c_out;
            }
            let needs_proj = bc.skip_projection.unwrap_or(c_in != c_out);
            let skip = bc.has_skip.then(|| SkipPath {
                proj: needs_proj.then(|| {
                    (
                        ConvLayer::new(
                            format!("block{bi}.skip.proj"),
                            c_in,
                            c_out,
                            1,
                            1,
                            0,
                            1,
                            false,
                            bc.quant.weight_bits,
                            &mut rng,
                        ),
                        NormLayer::new(c_out),
                    )
                }),
            });
            blocks.push(BlockNet {
                units,
                skip,
                identity: false,
            });
            c_in = c_out;
        }

        let head = ConvLayer::new(
            "head.conv".into(),
            c_in,
            CLASSES,
            1,
            1,
            0,
            1,
            true,
            config.head_quant.weight_bits,
            &mut rng,
        );
        Ok(Model {
            config: config.clone(),
            stem_conv,
            stem_norm,
            stem_act,
            blocks,
            head,
        })
    }

    /// Forward to logits and log probabilities. `x` is `[batch, 1, L]`.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Value, mode: Mode) -> Result<ForwardOut> {
        let mut leaves = Vec::new();
        let mut h = self
            .stem_conv
            .forward_tracked(tape, x, mode, &mut leaves)?;
        h = self.stem_norm.forward_tracked(tape, h, mode, &mut leaves)?;
        h = quant_relu(tape, h, &mut self.stem_act, mode)?;

        for block in &mut self.blocks {
            if block.identity {
                continue;
            }
            let block_in = h;
            for unit in &mut block.units {
                h = unit.spatial.forward_tracked(tape, h, mode, &mut leaves)?;
                h = unit
                    .pointwise
                    .forward_tracked(tape, h, mode, &mut leaves)?;
                h = unit.norm.forward_tracked(tape, h, mode, &mut leaves)?;
                h = quant_relu(tape, h, &mut unit.act, mode)?;
            }
            if let Some(skip) = &mut block.skip {
                let residual = match &mut skip.proj {
                    Some((conv, norm)) => {
                        let p = conv.forward_tracked(tape, block_in, mode, &mut leaves)?;
                        norm.forward_tracked(tape, p, mode, &mut leaves)?
                    }
                    None => block_in,
                };
                h = tape.add(h, residual)?;
            }
        }

        let logits = self.head.forward_tracked(tape, h, mode, &mut leaves)?;
        let log_probs = tape.log_softmax(logits, 1)?;
        let frames = tape.shape(logits)[2];
        Ok(ForwardOut {
            logits,
            log_probs,
            leaves,
            frames,
        })
    }

    /// Inference helper: stack equal-length signals into a batch and
    /// return frame posteriors. Uses eval mode (frozen statistics).
    pub fn posteriors(&mut self, signals: &[&[T]]) -> Result<FramePosterior<T>> {
        if signals.is_empty() {
            return Err(Error::Shape("posteriors: empty batch".into()));
        }
        let len = signals[0].len();
        if signals.iter().any(|s| s.len() != len) {
            return Err(Error::Shape("posteriors: ragged batch".into()));
        }
        let batch = signals.len();
        let mut data = Vec::with_capacity(batch * len);
        for s in signals {
            data.extend_from_slice(s);
        }
        let input = Tensor::from_vec(&[batch, 1, len], data)?;
        let mut tape = Tape::new();
        let x = tape.leaf(&input);
        let out = self.forward(&mut tape, x, Mode::Eval)?;
        FramePosterior::from_batch_major(tape.data(out.log_probs), batch, out.frames)
    }

    /// Trainable parameters in a stable order, aligned with
    /// `ForwardOut::leaves`.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        out.push(&mut self.stem_conv.weight);
        if let Some(b) = &mut self.stem_conv.bias {
            out.push(b);
        }
        out.push(&mut self.stem_norm.gamma);
        out.push(&mut self.stem_norm.beta);
        for block in &mut self.blocks {
            for unit in &mut block.units {
                out.push(&mut unit.spatial.weight);
                out.push(&mut unit.pointwise.weight);
                out.push(&mut unit.norm.gamma);
                out.push(&mut unit.norm.beta);
            }
            if let Some(SkipPath {
                proj: Some((conv, norm)),
            }) = &mut block.skip
            {
                out.push(&mut conv.weight);
                out.push(&mut norm.gamma);
                out.push(&mut norm.beta);
            }
        }
        out.push(&mut self.head.weight);
        if let Some(b) = &mut self.head.bias {
            out.push(b);
        }
        out
    }

    pub fn param_lens(&mut self) -> Vec<usize> {
        self.params_mut().iter().map(|p| p.numel()).collect()
    }

    pub fn count_params(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.numel()).sum()
    }

    /// Freeze every parameter (teacher networks, pure inference).
    pub fn freeze(&mut self) {
        for p in self.params_mut() {
            p.set_requires_grad(false);
        }
    }

    /// FNV-1a over the exact parameter bytes, for immutability checks.
    pub fn weights_checksum(&mut self) -> u64 {
        let mut hash = 0xcbf29ce484222325u64;
        for p in self.params_mut() {
            for &v in p.data() {
                for byte in v.as_f64().to_le_bytes() {
                    hash ^= byte as u64;
                    hash = hash.wrapping_mul(0x100000001b3);
                }
            }
        }
        hash
    }

    /// Block indices that still carry a skip connection.
    pub fn skip_indices(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.skip.is_some())
            .map(|(i, _)| i)
            .collect()
    }

    /// Delete a block's residual add (and projection, if any). The
    /// remaining weights are untouched.
    pub fn remove_skip(&mut self, block_index: usize) -> Result<()> {
        let block = self
            .blocks
            .get_mut(block_index)
            .ok_or_else(|| Error::Config(format!("no block {block_index}")))?;
        if block.skip.take().is_none() {
            return Err(Error::Config(format!(
                "block {block_index} has no skip connection"
            )));
        }
        self.config.blocks[block_index].has_skip = false;
        self.config.blocks[block_index].skip_projection = None;
        Ok(())
    }

    /// Remove every remaining skip connection at once.
    pub fn remove_all_skips(&mut self) {
        let indices = self.skip_indices();
        for i in indices {
            self.remove_skip(i).expect("index came from skip_indices");
        }
    }

    /// Per-layer cost rows for an input of `input_len` samples. Batch
    /// norm and bias parameters ride along at their layer's quant spec
    /// with zero MACs.
    pub fn per_layer_costs(&self, input_len: usize) -> Vec<LayerCost> {
        let mut rows = Vec::new();
        let k = self.stem_conv.kernel;
        let len_out = (input_len + 2 * self.stem_conv.padding - k) / self.stem_conv.stride + 1;
        let stem_quant = self.config.stem.quant;
        rows.push(LayerCost {
            name: self.stem_conv.name.clone(),
            kind: LayerKind::Conv {
                c_in: self.stem_conv.c_in,
                c_out: self.stem_conv.c_out,
                kernel: k,
                groups: self.stem_conv.groups,
                len_out,
            },
            params: self.stem_conv.param_count(),
            quant: stem_quant,
        });
        rows.push(LayerCost {
            name: "stem.norm".into(),
            kind: LayerKind::Identity,
            params: self.stem_norm.gamma.numel() + self.stem_norm.beta.numel(),
            quant: stem_quant,
        });
        for (bi, block) in self.blocks.iter().enumerate() {
            let quant = self.config.blocks[bi].quant;
            if block.identity {
                rows.push(LayerCost {
                    name: format!("block{bi}.identity"),
                    kind: LayerKind::Identity,
                    params: 0,
                    quant,
                });
                continue;
            }
            for (ui, unit) in block.units.iter().enumerate() {
                for conv in [&unit.spatial, &unit.pointwise] {
                    rows.push(LayerCost {
                        name: conv.name.clone(),
                        kind: LayerKind::Conv {
                            c_in: conv.c_in,
                            c_out: conv.c_out,
                            kernel: conv.kernel,
                            groups: conv.groups,
                            len_out,
                        },
                        params: conv.param_count(),
                        quant,
                    });
                }
                rows.push(LayerCost {
                    name: format!("block{bi}.unit{ui}.norm"),
                    kind: LayerKind::Identity,
                    params: unit.norm.gamma.numel() + unit.norm.beta.numel(),
                    quant,
                });
            }
            if let Some(SkipPath {
                proj: Some((conv, norm)),
            }) = &block.skip
            {
                rows.push(LayerCost {
                    name: conv.name.clone(),
                    kind: LayerKind::Conv {
                        c_in: conv.c_in,
                        c_out: conv.c_out,
                        kernel: conv.kernel,
                        groups: conv.groups,
                        len_out,
                    },
                    params: conv.param_count(),
                    quant,
                });
                rows.push(LayerCost {
                    name: format!("block{bi}.skip.norm"),
                    kind: LayerKind::Identity,
                    params: norm.gamma.numel() + norm.beta.numel(),
                    quant,
                });
            }
        }
        rows.push(LayerCost {
            name: self.head.name.clone(),
            kind: LayerKind::Conv {
                c_in: self.head.c_in,
                c_out: self.head.c_out,
                kernel: 1,
                groups: 1,
                len_out,
            },
            params: self.head.param_count(),
            quant: self.config.head_quant,
        });
        rows
    }

    /// Copy all parameter data from another model with identical
    /// architecture.
    pub fn copy_weights_from(&mut self, other: &mut Model<T>) -> Result<()> {
        let src: Vec<Tensor<T>> = other.params_mut().iter().map(|p| (**p).clone()).collect();
        let dst = self.params_mut();
        if src.len() != dst.len() {
            return Err(Error::Shape("copy_weights_from: mismatched models".into()));
        }
        for (d, s) in dst.into_iter().zip(src) {
            if d.shape() != s.shape() {
                return Err(Error::Shape("copy_weights_from: mismatched shapes".into()));
            }
            d.data_mut().copy_from_slice(s.data());
        }
        Ok(())
    }

    /// Snapshot of every parameter buffer (for weight-sharing checks).
    pub fn snapshot(&mut self) -> Vec<Vec<T>> {
        self.params_mut()
            .iter()
            .map(|p| p.data().to_vec())
            .collect()
    }

    fn visit_state(&mut self, f: &mut dyn FnMut(StateItem<'_, T>)) {
        fn conv<'a, T: Real>(c: &'a mut ConvLayer<T>, f: &mut dyn FnMut(StateItem<'a, T>)) {
            let name = c.name.clone();
            f(StateItem::Param(format!("{name}.weight"), &mut c.weight));
            if let Some(b) = &mut c.bias {
                f(StateItem::Param(format!("{name}.bias"), b));
            }
            f(StateItem::Quant(name, &mut c.wq));
        }
        fn norm<'a, T: Real>(
            name: &str,
            n: &'a mut NormLayer<T>,
            f: &mut dyn FnMut(StateItem<'a, T>),
        ) {
            f(StateItem::Param(format!("{name}.gamma"), &mut n.gamma));
            f(StateItem::Param(format!("{name}.beta"), &mut n.beta));
            f(StateItem::Norm(name.to_string(), &mut n.state));
        }
        conv(&mut self.stem_conv, f);
        norm("stem.norm", &mut self.stem_norm, f);
        f(StateItem::Quant("stem.act".into(), &mut self.stem_act));
        for (bi, block) in self.blocks.iter_mut().enumerate() {
            for (ui, unit) in block.units.iter_mut().enumerate() {
                conv(&mut unit.spatial, f);
                conv(&mut unit.pointwise, f);
                norm(&format!("block{bi}.unit{ui}.norm"), &mut unit.norm, f);
                f(StateItem::Quant(
                    format!("block{bi}.unit{ui}.act"),
                    &mut unit.act,
                ));
            }
            if let Some(SkipPath {
                proj: Some((c, n)),
            }) = &mut block.skip
            {
                conv(c, f);
                norm(&format!("block{bi}.skip.norm"), n, f);
            }
        }
        conv(&mut self.head, f);
    }

    /// Full serializable state: named parameter/statistics tensors and
    /// quantizer calibration, in a stable walk order.
    pub fn export_state(&mut self) -> ModelState<T> {
        let mut tensors = Vec::new();
        let mut quants = Vec::new();
        self.visit_state(&mut |item| match item {
            StateItem::Param(name, t) => tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            }),
            StateItem::Norm(name, state) => {
                if state.initialized {
                    tensors.push(TensorEntry {
                        name: format!("{name}.running_mean"),
                        shape: vec![state.running_mean.len()],
                        data: state.running_mean.clone(),
                    });
                    tensors.push(TensorEntry {
                        name: format!("{name}.running_var"),
                        shape: vec![state.running_var.len()],
                        data: state.running_var.clone(),
                    });
                }
            }
            StateItem::Quant(name, q) => quants.push(QuantState {
                name,
                scale: q.scale().map(|s| s.as_f64()),
                tracked_max: q.tracked_max().map(|m| m.as_f64()),
            }),
        });
        ModelState { tensors, quants }
    }

    /// Restore state exported by [`Model::export_state`] from a model
    /// built with the same config.
    pub fn import_state(&mut self, state: &ModelState<T>) -> Result<()> {
        use std::collections::BTreeMap;
        let by_name: BTreeMap<&str, &TensorEntry<T>> = state
            .tensors
            .iter()
            .map(|t| (t.name.as_str(), t))
            .collect();
        let quant_by_name: BTreeMap<&str, &QuantState> = state
            .quants
            .iter()
            .map(|q| (q.name.as_str(), q))
            .collect();
        let mut missing: Vec<String> = Vec::new();
        self.visit_state(&mut |item| match item {
            StateItem::Param(name, t) => match by_name.get(name.as_str()) {
                Some(entry) if entry.shape == t.shape() => {
                    t.data_mut().copy_from_slice(&entry.data);
                }
                _ => missing.push(name),
            },
            StateItem::Norm(name, st) => {
                let mean = by_name.get(format!("{name}.running_mean").as_str());
                let var = by_name.get(format!("{name}.running_var").as_str());
                if let (Some(mean), Some(var)) = (mean, var) {
                    st.running_mean.copy_from_slice(&mean.data);
                    st.running_var.copy_from_slice(&var.data);
                    st.initialized = true;
                } else {
                    st.initialized = false;
                }
            }
            StateItem::Quant(name, q) => {
                if let Some(s) = quant_by_name.get(name.as_str()) {
                    q.set_state(
                        s.scale.map(T::from_f64),
                        s.tracked_max.map(T::from_f64),
                    );
                }
            }
        });
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "state is missing tensors: {missing:?}"
            )))
        }
    }
}

/// Named tensor in a model state dict.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry<T: Real> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Persisted quantizer calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantState {
    pub name: String,
    pub scale: Option<f64>,
    pub tracked_max: Option<f64>,
}

/// Everything a checkpoint stores about a model besides its config.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T: Real> {
    pub tensors: Vec<TensorEntry<T>>,
    pub quants: Vec<QuantState>,
}

enum StateItem<'a, T: Real> {
    Param(String, &'a mut Tensor<T>),
    Norm(String, &'a mut BnState<T>),
    Quant(String, &'a mut FakeQuantizer<T>),
}

/// Clamped, quantized activation: relu then quantize-dequantize with
/// an EMA-tracked range. 32-bit acts are a plain relu.
pub(crate) fn quant_relu<T: Real>(
    tape: &mut Tape<T>,
    x: Value,
    q: &mut FakeQuantizer<T>,
    mode: Mode,
) -> Result<Value> {
    let r = tape.relu(x);
    q.apply(tape, r, mode)
}
