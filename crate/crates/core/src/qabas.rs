//! Quantization-aware differentiable architecture search: a
//! weight-sharing supernet over kernel/precision candidates per layer
//! slot, alternating weight and architecture-parameter updates under a
//! latency-regularized objective, and derivation of the final network
//! config.
//!
//! Each iteration takes (a) a weight step on the training split with
//! one candidate per slot sampled from softmax(alpha) (binarized
//! path), updating only the sampled candidates' weights, and (b) an
//! alpha step on the held-out split through the full softmax mixture,
//! minimizing `ctc + lambda * (E[latency] - target) / target` and
//! updating only alpha.

use crate::ctc::{self, CLASSES};
use crate::error::{Error, Result};
use crate::net::{BlockConfig, ConvLayer, Model, ModelConfig, NormLayer};
use crate::quant::{self, FakeQuantizer, LayerCost, LayerKind, QuantSpec};
use crate::sim::Chunk;
use crate::tensor::{AdamW, AdamWConfig, Mode, Real, Tape, Tensor, Value};
use crate::train::{batch_tensor, frames_for};
use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Candidate operation for one slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpOption {
    Conv { kernel_size: usize },
    Identity,
}

/// The searchable space: `depth` sequential slots, each choosing a
/// (kernel, precision) convolution unit or the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpace {
    pub depth: usize,
    pub kernel_options: Vec<usize>,
    pub quant_options: Vec<QuantSpec>,
    pub channel_options: Vec<usize>,
    /// Which channel option the supernet is built at.
    #[serde(default)]
    pub width_index: usize,
    /// Independently chosen channel stages for space counting; 0 means
    /// the channel progression is fixed as configured.
    #[serde(default)]
    pub channel_stages: usize,
    #[serde(default = "default_stem_kernel")]
    pub stem_kernel: usize,
    #[serde(default = "one")]
    pub repeats: usize,
}

fn default_stem_kernel() -> usize {
    9
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            depth: 2,
            kernel_options: vec![3, 5],
            quant_options: vec![QuantSpec::new(8, 8), QuantSpec::new(16, 16)],
            channel_options: vec![12],
            width_index: 0,
            channel_stages: 0,
            stem_kernel: 9,
            repeats: 1,
        }
    }
}

fn one() -> usize {
    1
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("search space needs at least one slot".into()));
        }
        if self.kernel_options.is_empty() && self.quant_options.is_empty() {
            // identity-only space is legal; conv candidates need both lists
        } else if self.kernel_options.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config("kernel options must be odd".into()));
        }
        for q in &self.quant_options {
            q.validate()?;
        }
        if self.channel_options.is_empty() {
            return Err(Error::Config("at least one channel option".into()));
        }
        if self.width_index >= self.channel_options.len() {
            return Err(Error::Config("width_index out of range".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.channel_options[self.width_index]
    }

    /// Conv candidates per slot plus the identity.
    pub fn candidates_per_slot(&self) -> usize {
        self.kernel_options.len() * self.quant_options.len() + 1
    }

    /// Candidate list in a fixed order: conv options (kernel-major,
    /// then precision), identity last.
    pub fn candidate_kinds(&self) -> Vec<(OpOption, Option<QuantSpec>)> {
        let mut out = Vec::new();
        for &k in &self.kernel_options {
            for &q in &self.quant_options {
                out.push((OpOption::Conv { kernel_size: k }, Some(q)));
            }
        }
        out.push((OpOption::Identity, None));
        out
    }
}

/// Distinct sub-architectures in the space: per-slot candidate count
/// to the power of the depth, times the channel combinatorics when
/// channel stages are searched independently.
pub fn count_space(space: &SearchSpace) -> BigUint {
    let per_slot = BigUint::from(space.candidates_per_slot());
    let mut total = per_slot.pow(space.depth as u32);
    if space.channel_stages > 0 {
        total *= BigUint::from(space.channel_options.len()).pow(space.channel_stages as u32);
    }
    total
}

/// Key for latency lookups: one convolution with its precision.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OpSignature {
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub groups: usize,
    pub len_out: usize,
    pub quant: QuantSpec,
}

/// Profiled latencies per op signature. Lookups must hit: a missing
/// entry is an error, never a silent default. Identity ops cost zero
/// by definition and are not stored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyTable {
    entries: BTreeMap<OpSignature, f64>,
}

impl LatencyTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, sig: OpSignature, latency: f64) {
        self.entries.insert(sig, latency);
    }

    pub fn get(&self, sig: &OpSignature) -> Result<f64> {
        self.entries
            .get(sig)
            .copied()
            .ok_or_else(|| Error::LatencyMiss(format!("{sig:?}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// MACs executed per latency unit at a given precision. Anchored at
/// 512 MACs/cycle for the 4x8-bit operand pair and 64 for 16x16;
/// interior points halve per doubling of the bit product.
pub fn mac_throughput(quant: QuantSpec) -> f64 {
    16384.0 / (quant.weight_bits as f64 * quant.act_bits as f64)
}

/// Latency of one layer under the throughput model: MACs divided by
/// the precision's throughput. Identity layers cost zero.
pub fn op_latency(cost: &LayerCost) -> f64 {
    match cost.kind {
        LayerKind::Identity => 0.0,
        _ => quant::macs(&cost.kind) as f64 / mac_throughput(cost.quant),
    }
}

fn conv_sig(kernel: usize, c_in: usize, c_out: usize, groups: usize, len_out: usize, quant: QuantSpec) -> OpSignature {
    OpSignature {
        kernel,
        c_in,
        c_out,
        groups,
        len_out,
        quant,
    }
}

fn sig_latency(sig: &OpSignature) -> f64 {
    let macs = (sig.len_out * sig.c_out * (sig.c_in / sig.groups) * sig.kernel) as f64;
    macs / mac_throughput(sig.quant)
}

/// Latency of one slot candidate: its depthwise spatial conv plus its
/// pointwise conv, looked up at whatever output length the table was
/// profiled at.
fn candidate_latency(table: &LatencyTable, kernel: usize, width: usize, q: QuantSpec) -> Result<f64> {
    let spatial = table
        .entries
        .iter()
        .find(|(sig, _)| {
            sig.kernel == kernel && sig.quant == q && sig.groups == width && sig.c_in == width
        })
        .ok_or_else(|| Error::LatencyMiss(format!("kernel {kernel} at {q}, width {width}")))?;
    let len_out = spatial.0.len_out;
    let pw = table.get(&conv_sig(1, width, width, 1, len_out, q))?;
    Ok(spatial.1 + pw)
}

/// Build the default table covering every candidate of the space at
/// its configured width: depthwise spatial convs and pointwise convs
/// for each (kernel, precision) pair.
pub fn default_latency_table(space: &SearchSpace, chunk_len: usize) -> LatencyTable {
    let mut table = LatencyTable::new();
    let w = space.width();
    for &q in &space.quant_options {
        for &k in &space.kernel_options {
            let sig = conv_sig(k, w, w, w, chunk_len, q);
            let lat = sig_latency(&sig);
            table.insert(sig, lat);
        }
        let pw = conv_sig(1, w, w, 1, chunk_len, q);
        let lat = sig_latency(&pw);
        table.insert(pw, lat);
    }
    table
}

/// Latency of a derived architecture's searched layers (the block
/// convolutions; the fixed stem and head are outside the model).
pub fn arch_latency(config: &ModelConfig, table: &LatencyTable, chunk_len: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut c_in = config.stem.channels_out;
    for b in &config.blocks {
        if b.is_identity {
            continue;
        }
        let mut c = c_in;
        for _ in 0..b.repeats {
            let g = b.groups.unwrap_or(c);
            total += table.get(&conv_sig(b.kernel_size, c, c, g, chunk_len, b.quant))?;
            total += table.get(&conv_sig(1, c, b.channels_out, 1, chunk_len, b.quant))?;
            c = b.channels_out;
        }
        if b.has_skip && c_in != b.channels_out {
            total += table.get(&conv_sig(1, c_in, b.channels_out, 1, chunk_len, b.quant))?;
        }
        c_in = b.channels_out;
    }
    Ok(total)
}

/// Optimization settings for the search. The alpha step uses its own
/// learning rate: architecture parameters need larger steps than
/// weights to commit within a short desk-scale schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub lambda: f64,
    pub target_latency: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_lr: f64,
    pub alpha_lr: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            lambda: 0.6,
            target_latency: 1.0,
            epochs: 3,
            batch_size: 64,
            weight_lr: 2e-3,
            alpha_lr: 0.05,
            beta2: 0.999,
            weight_decay: 0.01,
            eps: 1e-8,
            seed: 1,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if self.target_latency <= 0.0 {
            return Err(Error::Config("target latency must be > 0".into()));
        }
        Ok(())
    }

    fn weight_opt(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.weight_lr,
            beta1: 0.9,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            eps: self.eps,
        }
    }

    fn alpha_opt(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.alpha_lr,
            beta1: 0.9,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            eps: self.eps,
        }
    }
}

struct SlotUnit<T: Real> {
    spatial: ConvLayer<T>,
    pointwise: ConvLayer<T>,
    norm: NormLayer<T>,
    act: FakeQuantizer<T>,
}

/// One candidate op with its (unshared) weights.
pub struct Candidate<T: Real> {
    pub op: OpOption,
    pub quant: Option<QuantSpec>,
    unit: Option<SlotUnit<T>>,
    pub latency: f64,
}

/// One searchable layer slot: candidates plus architecture parameters.
pub struct Slot<T: Real> {
    pub alpha: Tensor<T>,
    pub candidates: Vec<Candidate<T>>,
}

impl<T: Real> Slot<T> {
    /// softmax(alpha) as plain floats.
    pub fn weights(&self) -> Vec<f64> {
        let a: Vec<f64> = self.alpha.data().iter().map(|&v| v.as_f64()).collect();
        let mx = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = a.iter().map(|v| (v - mx).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.iter().map(|e| e / sum).collect()
    }
}

/// Over-parameterized network holding every candidate with shared
/// activations per slot.
pub struct Supernet<T: Real> {
    pub space: SearchSpace,
    stem_conv: ConvLayer<T>,
    stem_norm: NormLayer<T>,
    stem_act: FakeQuantizer<T>,
    pub slots: Vec<Slot<T>>,
    head: ConvLayer<T>,
}

/// Build the supernet: alpha at zero (uniform softmax), candidate
/// weights drawn per the usual fan-in rule, no weight sharing across
/// slots.
pub fn build_supernet<T: Real>(
    space: &SearchSpace,
    table: &LatencyTable,
    seed: u64,
) -> Result<Supernet<T>> {
    space.validate()?;
    let w = space.width();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stem_conv = ConvLayer::new(
        "stem.conv".into(),
        1,
        w,
        space.stem_kernel,
        1,
        (space.stem_kernel - 1) / 2,
        1,
        false,
        32,
        &mut rng,
    );
    let stem_norm = NormLayer::new(w);
    let stem_act = FakeQuantizer::activations(32);

    let mut slots = Vec::new();
    for si in 0..space.depth {
        let mut candidates = Vec::new();
        for (op, quant) in space.candidate_kinds() {
            let (unit, latency) = match op {
                OpOption::Identity => (None, 0.0),
                OpOption::Conv { kernel_size } => {
                    let q = quant.expect("conv candidates carry a precision");
                    let latency = candidate_latency(table, kernel_size, w, q)?;
                    let unit = SlotUnit {
                        spatial: ConvLayer::new(
                            format!("slot{si}.k{kernel_size}w{}a{}.spatial", q.weight_bits, q.act_bits),
                            w,
                            w,
                            kernel_size,
                            1,
                            (kernel_size - 1) / 2,
                            w,
                            false,
                            q.weight_bits,
                            &mut rng,
                        ),
                        pointwise: ConvLayer::new(
                            format!("slot{si}.k{kernel_size}w{}a{}.pointwise", q.weight_bits, q.act_bits),
                            w,
                            w,
                            1,
                            1,
                            0,
                            1,
                            false,
                            q.weight_bits,
                            &mut rng,
                        ),
                        norm: NormLayer::new(w),
                        act: FakeQuantizer::activations(q.act_bits),
                    };
                    (Some(unit), latency)
                }
            };
            candidates.push(Candidate {
                op,
                quant,
                unit,
                latency,
            });
        }
        slots.push(Slot {
            alpha: Tensor::zeros(&[candidates.len()]).requires_grad(true),
            candidates,
        });
    }

    let head = ConvLayer::new("head.conv".into(), w, CLASSES, 1, 1, 0, 1, true, 32, &mut rng);
    Ok(Supernet {
        space: space.clone(),
        stem_conv,
        stem_norm,
        stem_act,
        slots,
        head,
    })
}

impl<T: Real> Supernet<T> {
    /// Stable parameter order: stem, every candidate of every slot,
    /// head, then the alpha vectors.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = vec![
            &mut self.stem_conv.weight,
            &mut self.stem_norm.gamma,
            &mut self.stem_norm.beta,
        ];
        let mut alphas: Vec<&mut Tensor<T>> = Vec::new();
        for slot in &mut self.slots {
            let Slot { alpha, candidates } = slot;
            for cand in candidates {
                if let Some(unit) = &mut cand.unit {
                    out.push(&mut unit.spatial.weight);
                    out.push(&mut unit.pointwise.weight);
                    out.push(&mut unit.norm.gamma);
                    out.push(&mut unit.norm.beta);
                }
            }
            alphas.push(alpha);
        }
        out.push(&mut self.head.weight);
        if let Some(b) = &mut self.head.bias {
            out.push(b);
        }
        out.extend(alphas);
        out
    }

    pub fn param_lens(&mut self) -> Vec<usize> {
        self.params_mut().iter().map(|p| p.numel()).collect()
    }

    fn alpha_param_indices(&mut self) -> Vec<usize> {
        let total = self.params_mut().len();
        (total - self.slots.len()..total).collect()
    }

    /// Sample one candidate per slot from softmax(alpha).
    pub fn sample_path(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        self.slots
            .iter()
            .map(|slot| {
                let w = slot.weights();
                let draw: f64 = rng.gen();
                let mut acc = 0.0;
                for (i, &p) in w.iter().enumerate() {
                    acc += p;
                    if draw < acc {
                        return i;
                    }
                }
                w.len() - 1
            })
            .collect()
    }

    /// Forward through one sampled path. Returns log-probs and the
    /// (param index, leaf) pairs for every parameter that was touched.
    fn forward_sampled(
        &mut self,
        tape: &mut Tape<T>,
        x: Value,
        sampled: &[usize],
        mode: Mode,
    ) -> Result<(Value, Vec<(usize, Value)>)> {
        let mut touched = Vec::new();
        let mut leaves = Vec::new();
        let mut h = self.stem_conv.forward_tracked(tape, x, mode, &mut leaves)?;
        h = self.stem_norm.forward_tracked(tape, h, mode, &mut leaves)?;
        touched.extend([(0, leaves[0]), (1, leaves[1]), (2, leaves[2])]);
        h = crate::net::quant_relu(tape, h, &mut self.stem_act, mode)?;

        let mut idx = 3;
        for (si, slot) in self.slots.iter_mut().enumerate() {
            for (ci, cand) in slot.candidates.iter_mut().enumerate() {
                if let Some(unit) = &mut cand.unit {
                    if sampled[si] == ci {
                        let mut ls = Vec::new();
                        h = unit.spatial.forward_tracked(tape, h, mode, &mut ls)?;
                        h = unit.pointwise.forward_tracked(tape, h, mode, &mut ls)?;
                        h = unit.norm.forward_tracked(tape, h, mode, &mut ls)?;
                        h = crate::net::quant_relu(tape, h, &mut unit.act, mode)?;
                        touched.extend(
                            ls.into_iter()
                                .enumerate()
                                .map(|(o, leaf)| (idx + o, leaf)),
                        );
                    }
                    idx += 4;
                }
            }
        }
        let mut head_leaves = Vec::new();
        let logits = self
            .head
            .forward_tracked(tape, h, mode, &mut head_leaves)?;
        touched.extend([(idx, head_leaves[0]), (idx + 1, head_leaves[1])]);
        let log_probs = tape.log_softmax(logits, 1)?;
        Ok((log_probs, touched))
    }

    /// Forward through the full softmax mixture, also building the
    /// expected-latency node. Returns (log_probs, expected_latency,
    /// alpha leaves).
    fn forward_mixture(
        &mut self,
        tape: &mut Tape<T>,
        x: Value,
        mode: Mode,
    ) -> Result<(Value, Value, Vec<Value>)> {
        let mut scratch = Vec::new();
        let mut h = self
            .stem_conv
            .forward_tracked(tape, x, mode, &mut scratch)?;
        h = self.stem_norm.forward_tracked(tape, h, mode, &mut scratch)?;
        h = crate::net::quant_relu(tape, h, &mut self.stem_act, mode)?;

        let mut alpha_leaves = Vec::new();
        let mut expected: Option<Value> = None;
        for slot in &mut self.slots {
            let a = tape.leaf(&slot.alpha);
            alpha_leaves.push(a);
            let ls = tape.log_softmax(a, 0)?;
            let w = tape.exp(ls)?;

            // expected latency contribution: sum(w * latencies)
            let lats: Vec<T> = slot
                .candidates
                .iter()
                .map(|c| T::from_f64(c.latency))
                .collect();
            let lat_const = tape.constant(&[lats.len()], lats)?;
            let weighted = tape.mul(w, lat_const)?;
            let slot_e = tape.sum(weighted);
            expected = Some(match expected {
                Some(e) => tape.add(e, slot_e)?,
                None => slot_e,
            });

            // output mixture
            let mut mixed: Option<Value> = None;
            for (ci, cand) in slot.candidates.iter_mut().enumerate() {
                let out_c = match &mut cand.unit {
                    None => h,
                    Some(unit) => {
                        let mut ls2 = Vec::new();
                        let mut o = unit.spatial.forward_tracked(tape, h, mode, &mut ls2)?;
                        o = unit.pointwise.forward_tracked(tape, o, mode, &mut ls2)?;
                        o = unit.norm.forward_tracked(tape, o, mode, &mut ls2)?;
                        crate::net::quant_relu(tape, o, &mut unit.act, mode)?
                    }
                };
                let wc = tape.index(w, ci)?;
                let scaled = tape.scale_by(out_c, wc)?;
                mixed = Some(match mixed {
                    Some(m) => tape.add(m, scaled)?,
                    None => scaled,
                });
            }
            h = mixed.expect("slot has at least the identity candidate");
        }

        let mut head_leaves = Vec::new();
        let logits = self
            .head
            .forward_tracked(tape, h, mode, &mut head_leaves)?;
        let log_probs = tape.log_softmax(logits, 1)?;
        let expected = expected.expect("at least one slot");
        Ok((log_probs, expected, alpha_leaves))
    }

    /// Expected latency under the current alpha, as a plain number.
    pub fn expected_latency(&self) -> f64 {
        self.slots
            .iter()
            .map(|slot| {
                slot.weights()
                    .iter()
                    .zip(&slot.candidates)
                    .map(|(&w, c)| w * c.latency)
                    .sum::<f64>()
            })
            .sum()
    }

    /// Config for an explicit per-slot candidate selection.
    pub fn config_for_selection(&self, selection: &[usize], with_skips: bool) -> ModelConfig {
        let w = self.space.width();
        let mut blocks = Vec::new();
        for (slot, &ci) in self.slots.iter().zip(selection) {
            let cand = &slot.candidates[ci];
            match cand.op {
                OpOption::Identity => {}
                OpOption::Conv { kernel_size } => {
                    let mut b = BlockConfig::new(
                        kernel_size,
                        w,
                        cand.quant.expect("conv candidate has a precision"),
                    );
                    b.has_skip = with_skips;
                    blocks.push(b);
                }
            }
        }
        ModelConfig {
            stem: BlockConfig::new(self.space.stem_kernel, w, QuantSpec::FLOAT),
            stem_stride: 1,
            blocks,
            head_quant: QuantSpec::FLOAT,
            input_features: 1,
        }
    }

    /// Per-slot argmax of alpha; ties break toward the lower latency,
    /// then the smaller kernel. Identity selections delete the slot.
    pub fn derive_architecture(&self, with_skips: bool) -> ModelConfig {
        let selection: Vec<usize> = self
            .slots
            .iter()
            .map(|slot| {
                let w = slot.weights();
                let mut best = 0usize;
                for i in 1..w.len() {
                    let better = w[i] > w[best] + 1e-12;
                    let tied = (w[i] - w[best]).abs() <= 1e-12;
                    let c = &slot.candidates[i];
                    let b = &slot.candidates[best];
                    let cheaper = c.latency < b.latency - 1e-12;
                    let same_lat = (c.latency - b.latency).abs() <= 1e-12;
                    let smaller_kernel = match (c.op, b.op) {
                        (OpOption::Conv { kernel_size: ka }, OpOption::Conv { kernel_size: kb }) => {
                            ka < kb
                        }
                        (OpOption::Identity, _) => true,
                        _ => false,
                    };
                    if better || (tied && (cheaper || (same_lat && smaller_kernel))) {
                        best = i;
                    }
                }
                best
            })
            .collect();
        self.config_for_selection(&selection, with_skips)
    }

    /// Largest softmax weight currently on each slot's candidates.
    pub fn alpha_summary(&self) -> Vec<Vec<f64>> {
        self.slots.iter().map(|s| s.weights()).collect()
    }

    /// Zero every conv candidate's weights, making all candidates
    /// function-identical (they emit exactly zero). Used to isolate
    /// the latency term in controlled experiments.
    pub fn zero_candidate_weights(&mut self) {
        for slot in &mut self.slots {
            for cand in &mut slot.candidates {
                if let Some(unit) = &mut cand.unit {
                    unit.spatial.weight.data_mut().fill(T::zero());
                    unit.pointwise.weight.data_mut().fill(T::zero());
                }
            }
        }
    }
}

/// One alternating iteration: a weight step on the training batch over
/// a sampled path, then an alpha step on the validation batch through
/// the mixture.
pub struct SearchStepOutcome {
    pub train_loss: f64,
    pub val_loss: f64,
    pub expected_latency: f64,
    pub sampled: Vec<usize>,
}

#[allow(clippy::too_many_arguments)]
pub fn search_step<T: Real>(
    supernet: &mut Supernet<T>,
    train_batch: &[&Chunk],
    val_batch: &[&Chunk],
    cfg: &SearchConfig,
    opt_w: &mut AdamW<T>,
    opt_a: &mut AdamW<T>,
    rng: &mut ChaCha8Rng,
) -> Result<SearchStepOutcome> {
    cfg.validate()?;
    // (a) weight step on the sampled (binarized) path
    let sampled = supernet.sample_path(rng);
    let train_loss = {
        let (x, targets, lens) = batch_chunks(train_batch);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let (log_probs, touched) = supernet.forward_sampled(&mut tape, xv, &sampled, Mode::Train)?;
        let loss = ctc::ctc_loss(&mut tape, log_probs, &targets, &lens)?;
        tape.backward(loss)?;
        let mut params = supernet.params_mut();
        let mut active = Vec::with_capacity(touched.len());
        for (pi, leaf) in touched {
            params[pi].accumulate_grad(tape.grad(leaf))?;
            active.push(pi);
        }
        opt_w.step_subset(&mut params, &active)?;
        tape.item(loss).as_f64()
    };

    // (b) alpha step on the held-out batch through the mixture
    let (val_loss, expected_latency) = {
        let (x, targets, lens) = batch_chunks(val_batch);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let (log_probs, exp_lat, alpha_leaves) =
            supernet.forward_mixture(&mut tape, xv, Mode::Train)?;
        let val = ctc::ctc_loss(&mut tape, log_probs, &targets, &lens)?;
        // lambda * (E - target) / target, applied unclamped
        let neg_target = tape.scalar(T::from_f64(-cfg.target_latency));
        let diff = tape.add(exp_lat, neg_target)?;
        let reg = tape.scale(diff, T::from_f64(1.0 / cfg.target_latency));
        let reg = tape.scale(reg, T::from_f64(cfg.lambda));
        let total = tape.add(val, reg)?;
        tape.backward(total)?;

        let alpha_indices = supernet.alpha_param_indices();
        let mut params = supernet.params_mut();
        for (&pi, &leaf) in alpha_indices.iter().zip(&alpha_leaves) {
            params[pi].accumulate_grad(tape.grad(leaf))?;
        }
        opt_a.step_subset(&mut params, &alpha_indices)?;
        (tape.item(val).as_f64(), tape.item(exp_lat).as_f64())
    };

    Ok(SearchStepOutcome {
        train_loss,
        val_loss,
        expected_latency,
        sampled,
    })
}

fn batch_chunks<T: Real>(chunks: &[&Chunk]) -> (Tensor<T>, Vec<ctc::CtcTarget>, Vec<usize>) {
    let (x32, targets, lens) = batch_tensor(chunks);
    let data: Vec<T> = x32.data().iter().map(|&v| T::from_f64(v as f64)).collect();
    let x = Tensor::from_vec(x32.shape(), data).expect("same shape");
    let frame_lens = lens.iter().map(|&v| frames_for(1, v)).collect();
    (x, targets, frame_lens)
}

/// Full search: alternating steps over paired train/eval batches, with
/// a CSV trajectory log (step, slot, candidate, softmax weight,
/// expected latency, train/val loss).
pub struct SearchOutcome {
    pub config: ModelConfig,
    pub log_csv: String,
    pub final_weights: Vec<Vec<f64>>,
}

pub fn search<T: Real>(
    supernet: &mut Supernet<T>,
    train: &[Chunk],
    eval: &[Chunk],
    cfg: &SearchConfig,
    with_skips: bool,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Config("search needs non-empty train and eval splits".into()));
    }
    let lens = supernet.param_lens();
    let mut opt_w = AdamW::new(cfg.weight_opt(), &lens);
    let mut opt_a = AdamW::new(cfg.alpha_opt(), &lens);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut csv = String::from("step,slot,candidate,weight,expected_latency,train_loss,val_loss\n");
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        let n_batches = (train.len() / cfg.batch_size).max(1);
        for bi in 0..n_batches {
            let tb: Vec<&Chunk> = train
                .iter()
                .cycle()
                .skip(bi * cfg.batch_size)
                .take(cfg.batch_size.min(train.len()))
                .collect();
            let vb: Vec<&Chunk> = eval
                .iter()
                .cycle()
                .skip(bi * cfg.batch_size % eval.len())
                .take(cfg.batch_size.min(eval.len()))
                .collect();
            let out = search_step(supernet, &tb, &vb, cfg, &mut opt_w, &mut opt_a, &mut rng)?;
            for (si, ws) in supernet.alpha_summary().iter().enumerate() {
                for (ci, w) in ws.iter().enumerate() {
                    csv.push_str(&format!(
                        "{step},{si},{ci},{w:.6},{:.6},{:.6},{:.6}\n",
                        out.expected_latency, out.train_loss, out.val_loss
                    ));
                }
            }
            step += 1;
        }
    }
    Ok(SearchOutcome {
        config: supernet.derive_architecture(with_skips),
        log_csv: csv,
        final_weights: supernet.alpha_summary(),
    })
}

/// Mean validation CTC loss of a trained model over an eval split.
pub fn validation_loss(model: &mut Model<f32>, eval: &[Chunk], batch_size: usize) -> Result<f64> {
    let stride = model.config.stem_stride;
    let mut total = 0.0;
    let mut batches = 0usize;
    for ids in (0..eval.len()).collect::<Vec<_>>().chunks(batch_size) {
        let batch: Vec<&Chunk> = ids.iter().map(|&i| &eval[i]).collect();
        let (x, targets, lens) = batch_tensor(&batch);
        let frame_lens: Vec<usize> = lens.iter().map(|&v| frames_for(stride, v)).collect();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let out = model.forward(&mut tape, xv, Mode::Eval)?;
        let loss = ctc::ctc_loss(&mut tape, out.log_probs, &targets, &frame_lens)?;
        total += tape.item(loss) as f64;
        batches += 1;
    }
    Ok(total / batches.max(1) as f64)
}

/// Retrain a derived architecture from scratch and report the joint
/// objective: retrained validation CTC loss plus the latency
/// regularizer. `table_len` is the output length the table was
/// profiled at (latency units must match `target_latency`).
pub fn joint_objective(
    config: &ModelConfig,
    table: &LatencyTable,
    table_len: usize,
    train: &[Chunk],
    eval: &[Chunk],
    train_cfg: &crate::train::TrainConfig,
    search_cfg: &SearchConfig,
) -> Result<(f64, Model<f32>)> {
    let mut model = Model::<f32>::build(config, train_cfg.seed)?;
    crate::train::train_ctc(&mut model, train, train_cfg, |_| {}, |_, _| {})?;
    let val = validation_loss(&mut model, eval, train_cfg.batch_size)?;
    let lat = arch_latency(config, table, table_len)?;
    let objective =
        val + search_cfg.lambda * (lat - search_cfg.target_latency) / search_cfg.target_latency;
    Ok((objective, model))
}
