//! One-shot magnitude pruning: unstructured element pruning with
//! masks enforced through fine-tuning, and structured channel pruning
//! that compacts tensors to a dense smaller network. Ranking is by L1
//! magnitude; batch-norm and bias parameters are never pruned.

use crate::error::{Error, Result};
use crate::net::Model;
use crate::sim::{Chunk, Read};
use crate::train::{self, TrainConfig};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PruneMethod {
    Element,
    Channel,
}

/// Keep/zero flags per pruned parameter tensor, keyed by the tensor's
/// position in `Model::params_mut` order.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    masks: BTreeMap<usize, Vec<bool>>,
    pub sparsity: f64,
}

impl PruneMask {
    /// Re-zero masked weights (run after every optimizer step).
    pub fn apply(&self, model: &mut Model<f32>) {
        let mut params = model.params_mut();
        for (&idx, mask) in &self.masks {
            for (w, &keep) in params[idx].data_mut().iter_mut().zip(mask) {
                if !keep {
                    *w = 0.0;
                }
            }
        }
    }

    pub fn zero_count(&self) -> usize {
        self.masks
            .values()
            .map(|m| m.iter().filter(|&&k| !k).count())
            .sum()
    }
}

/// Indices of prunable tensors (conv weights) in `params_mut` order,
/// mirroring the parameter walk in the network module.
fn prunable_indices(model: &mut Model<f32>) -> Vec<usize> {
    let mut out = Vec::new();
    let params = model.params_mut();
    for (i, p) in params.iter().enumerate() {
        // conv weights are the only 3-D parameters
        if p.shape().len() == 3 {
            out.push(i);
        }
    }
    out
}

/// Globally rank prunable weights by |w| and zero the smallest
/// `sparsity` fraction. Ties break deterministically by position.
pub fn prune_unstructured(model: &mut Model<f32>, sparsity: f64) -> Result<PruneMask> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Config(format!(
            "sparsity {sparsity} outside [0, 1)"
        )));
    }
    let prunable = prunable_indices(model);
    let mut entries: Vec<(f32, usize, usize)> = Vec::new();
    {
        let params = model.params_mut();
        for &pi in &prunable {
            for (ei, &w) in params[pi].data().iter().enumerate() {
                entries.push((w.abs(), pi, ei));
            }
        }
    }
    entries.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let total = entries.len();
    let k = (sparsity * total as f64).round() as usize;

    let mut masks: BTreeMap<usize, Vec<bool>> = BTreeMap::new();
    {
        let params = model.params_mut();
        for &pi in &prunable {
            masks.insert(pi, vec![true; params[pi].numel()]);
        }
    }
    for &(_, pi, ei) in entries.iter().take(k) {
        masks.get_mut(&pi).unwrap()[ei] = false;
    }
    let mask = PruneMask {
        masks,
        sparsity: k as f64 / total as f64,
    };
    mask.apply(model);
    Ok(mask)
}

/// Exact zero fraction among prunable weights.
pub fn sparsity(model: &mut Model<f32>) -> f64 {
    let prunable = prunable_indices(model);
    let params = model.params_mut();
    let mut zeros = 0usize;
    let mut total = 0usize;
    for &pi in &prunable {
        zeros += params[pi].data().iter().filter(|&&w| w == 0.0).count();
        total += params[pi].numel();
    }
    zeros as f64 / total.max(1) as f64
}

/// Prunable weight storage in bytes at each layer's weight precision:
/// (nonzero-values-only, dense).
pub fn weight_storage(model: &mut Model<f32>) -> (f64, f64) {
    let mut nonzero = 0.0;
    let mut dense = 0.0;
    let mut add = |count_nonzero: usize, count_total: usize, bits: u8| {
        nonzero += count_nonzero as f64 * bits as f64 / 8.0;
        dense += count_total as f64 * bits as f64 / 8.0;
    };
    let nz = |t: &crate::tensor::Tensor<f32>| t.data().iter().filter(|&&w| w != 0.0).count();
    let stem = &model.stem_conv;
    add(nz(&stem.weight), stem.weight.numel(), stem.wq.bits);
    for block in &model.blocks {
        for unit in &block.units {
            add(nz(&unit.spatial.weight), unit.spatial.weight.numel(), unit.spatial.wq.bits);
            add(nz(&unit.pointwise.weight), unit.pointwise.weight.numel(), unit.pointwise.wq.bits);
        }
        if let Some(crate::net::SkipPath { proj: Some((c, _)) }) = &block.skip {
            add(nz(&c.weight), c.weight.numel(), c.wq.bits);
        }
    }
    add(nz(&model.head.weight), model.head.weight.numel(), model.head.wq.bits);
    (nonzero, dense)
}

fn l1_out_channels(weight: &crate::tensor::Tensor<f32>) -> Vec<f64> {
    let c_out = weight.shape()[0];
    let per = weight.numel() / c_out;
    (0..c_out)
        .map(|c| {
            weight.data()[c * per..(c + 1) * per]
                .iter()
                .map(|w| w.abs() as f64)
                .sum()
        })
        .collect()
}

fn kept_channels(norms: &[f64], fraction: f64) -> Vec<usize> {
    let c = norms.len();
    let drop = ((fraction * c as f64).floor() as usize).min(c - 1);
    let mut order: Vec<usize> = (0..c).collect();
    // drop the lowest-norm channels; ties keep the earlier channel
    order.sort_by(|&a, &b| norms[a].partial_cmp(&norms[b]).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<usize> = order[drop..].to_vec();
    kept.sort_unstable();
    kept
}

fn slice_rows(t: &crate::tensor::Tensor<f32>, kept: &[usize]) -> crate::tensor::Tensor<f32> {
    let shape = t.shape().to_vec();
    let per = t.numel() / shape[0];
    let mut data = Vec::with_capacity(kept.len() * per);
    for &c in kept {
        data.extend_from_slice(&t.data()[c * per..(c + 1) * per]);
    }
    let mut new_shape = shape;
    new_shape[0] = kept.len();
    crate::tensor::Tensor::from_vec(&new_shape, data)
        .expect("row slice")
        .requires_grad(t.is_grad_required())
}

fn slice_cols(t: &crate::tensor::Tensor<f32>, kept: &[usize]) -> crate::tensor::Tensor<f32> {
    // conv weight [C_out, C_in, K]: select along C_in
    let (c_out, c_in, k) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut data = Vec::with_capacity(c_out * kept.len() * k);
    for co in 0..c_out {
        for &ci in kept {
            data.extend_from_slice(&t.data()[(co * c_in + ci) * k..(co * c_in + ci + 1) * k]);
        }
    }
    crate::tensor::Tensor::from_vec(&[c_out, kept.len(), k], data)
        .expect("col slice")
        .requires_grad(t.is_grad_required())
}

fn slice_vec<TN: Copy>(v: &[TN], kept: &[usize]) -> Vec<TN> {
    kept.iter().map(|&i| v[i]).collect()
}

/// Structured channel pruning: per block, drop the lowest-L1 fraction
/// of output channels (ranked on the last pointwise conv) and rebuild
/// dense tensors, cascading the input-channel reduction into the next
/// block and the head. Blocks whose skip has no projection inherit the
/// upstream channel selection so the residual add stays aligned.
pub fn prune_structured_channels(model: &Model<f32>, fraction: f64) -> Result<Model<f32>> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("fraction {fraction} outside [0, 1)")));
    }
    for b in &model.config.blocks {
        if let Some(g) = b.groups {
            if g != 1 && !b.is_identity {
                return Err(Error::Config(
                    "structured pruning supports depthwise (groups unset) or groups=1 blocks"
                        .into(),
                ));
            }
        }
    }
    let mut compact = model.clone();
    // kept output channels per non-identity block
    let stem_width = model.config.stem.channels_out;
    let mut prev_kept: Vec<usize> = (0..stem_width).collect();

    for (bi, block) in model.blocks.iter().enumerate() {
        if block.identity {
            continue;
        }
        let cfg = &model.config.blocks[bi];
        let c_out = cfg.channels_out;
        let no_proj_skip = block.skip.as_ref().map(|s| s.proj.is_none()).unwrap_or(false);
        let kept: Vec<usize> = if no_proj_skip {
            // residual add without projection: keep alignment with the input
            prev_kept.clone()
        } else {
            let last = block.units.last().expect("non-identity block has units");
            let norms = l1_out_channels(&last.pointwise.weight);
            if norms.len() != c_out {
                return Err(Error::Config("inconsistent block width".into()));
            }
            kept_channels(&norms, fraction)
        };
        if kept.is_empty() {
            return Err(Error::Config(format!(
                "block {bi}: all channels pruned"
            )));
        }

        let cblock = &mut compact.blocks[bi];
        let mut in_kept = prev_kept.clone();
        for (ui, unit) in block.units.iter().enumerate() {
            let cunit = &mut cblock.units[ui];
            let out_kept = &kept;
            // spatial conv: depthwise [C,1,K] slices rows; ungrouped
            // [C,C,K] slices rows and columns
            if unit.spatial.groups == unit.spatial.c_in && unit.spatial.groups != 1 {
                cunit.spatial.weight = slice_rows(&unit.spatial.weight, &in_kept);
                cunit.spatial.groups = in_kept.len();
            } else {
                let rows = slice_rows(&unit.spatial.weight, &in_kept);
                cunit.spatial.weight = slice_cols(&rows, &in_kept);
            }
            cunit.spatial.c_in = in_kept.len();
            cunit.spatial.c_out = in_kept.len();

            let rows = slice_rows(&unit.pointwise.weight, out_kept);
            cunit.pointwise.weight = slice_cols(&rows, &in_kept);
            cunit.pointwise.c_in = in_kept.len();
            cunit.pointwise.c_out = out_kept.len();

            cunit.norm.gamma = crate::tensor::Tensor::from_vec(
                &[out_kept.len()],
                slice_vec(unit.norm.gamma.data(), out_kept),
            )?
            .requires_grad(true);
            cunit.norm.beta = crate::tensor::Tensor::from_vec(
                &[out_kept.len()],
                slice_vec(unit.norm.beta.data(), out_kept),
            )?
            .requires_grad(true);
            cunit.norm.state.running_mean = slice_vec(&unit.norm.state.running_mean, out_kept);
            cunit.norm.state.running_var = slice_vec(&unit.norm.state.running_var, out_kept);
            in_kept = kept.clone();
        }
        if let (
            Some(crate::net::SkipPath { proj: Some((conv, norm)) }),
            Some(crate::net::SkipPath { proj: Some((cconv, cnorm)) }),
        ) = (&block.skip, &mut cblock.skip)
        {
            let rows = slice_rows(&conv.weight, &kept);
            cconv.weight = slice_cols(&rows, &prev_kept);
            cconv.c_in = prev_kept.len();
            cconv.c_out = kept.len();
            cnorm.gamma = crate::tensor::Tensor::from_vec(
                &[kept.len()],
                slice_vec(norm.gamma.data(), &kept),
            )?
            .requires_grad(true);
            cnorm.beta = crate::tensor::Tensor::from_vec(
                &[kept.len()],
                slice_vec(norm.beta.data(), &kept),
            )?
            .requires_grad(true);
            cnorm.state.running_mean = slice_vec(&norm.state.running_mean, &kept);
            cnorm.state.running_var = slice_vec(&norm.state.running_var, &kept);
        }
        compact.config.blocks[bi].channels_out = kept.len();
        if cfg.groups == Some(1) {
            compact.config.blocks[bi].groups = Some(1);
        }
        let has_proj = compact.blocks[bi]
            .skip
            .as_ref()
            .map(|s| s.proj.is_some())
            .unwrap_or(false);
        if has_proj && prev_kept.len() == kept.len() {
            // the projection survives even though the widths now
            // coincide; the implied-by-width rule would drop it
            compact.config.blocks[bi].skip_projection = Some(true);
        }
        prev_kept = kept;
    }

    // head consumes the final kept set
    compact.head.weight = slice_cols(&model.head.weight, &prev_kept);
    compact.head.c_in = prev_kept.len();
    compact.config.validate()?;
    Ok(compact)
}

/// Fine-tune with masks (if any) re-applied after every step.
pub fn fine_tune(
    model: &mut Model<f32>,
    mask: Option<&PruneMask>,
    train: &[Chunk],
    tc: &TrainConfig,
) -> Result<Vec<train::EpochStats>> {
    train::train_ctc(
        model,
        train,
        tc,
        |m| {
            if let Some(mask) = mask {
                mask.apply(m);
            }
        },
        |_, _| {},
    )
}

/// One row of the sparsity/accuracy/size sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub sparsity: f64,
    pub identity: f64,
    pub nonzero_bytes: f64,
    pub dense_bytes: f64,
}

/// Prune + fine-tune + evaluate at each requested sparsity, starting
/// from the same baseline weights each time.
pub fn sparsity_sweep(
    baseline: &Model<f32>,
    sparsities: &[f64],
    train: &[Chunk],
    eval_reads: &[Read],
    chunk_len: usize,
    tc: &TrainConfig,
) -> Result<Vec<SweepPoint>> {
    let mut points = Vec::new();
    for &s in sparsities {
        let mut model = baseline.clone();
        let mask = if s > 0.0 {
            Some(prune_unstructured(&mut model, s)?)
        } else {
            None
        };
        fine_tune(&mut model, mask.as_ref(), train, tc)?;
        let ids = train::evaluate_identity(&mut model, eval_reads, chunk_len)?;
        let mean = ids.iter().sum::<f64>() / ids.len().max(1) as f64;
        let (nonzero, dense) = weight_storage(&mut model);
        points.push(SweepPoint {
            sparsity: s,
            identity: mean,
            nonzero_bytes: nonzero,
            dense_bytes: dense,
        });
    }
    Ok(points)
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("sparsity,identity,nonzero_bytes,dense_bytes\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.sparsity, p.identity, p.nonzero_bytes, p.dense_bytes
        ));
    }
    out
}
