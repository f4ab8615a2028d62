//! Shared CTC training loop, batching helpers, and chunked basecalling
//! of whole reads (non-overlapping windows, decoded fragments
//! concatenated in order).

use crate::ctc::{self, CtcTarget};
use crate::error::Result;
use crate::eval;
use crate::net::Model;
use crate::sim::{Chunk, Read};
use crate::tensor::{AdamW, AdamWConfig, Mode, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub seed: u64,
    /// Epoch after which the learning rate is multiplied by
    /// `decay_factor`; 0 disables the decay.
    pub decay_after: usize,
    pub decay_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            eps: 1e-8,
            seed: 1,
            decay_after: 0,
            decay_factor: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
}

/// Stack chunks into a `[batch, 1, L]` tensor with targets and valid
/// sample counts.
pub fn batch_tensor(chunks: &[&Chunk]) -> (Tensor<f32>, Vec<CtcTarget>, Vec<usize>) {
    let len = chunks[0].signal.len();
    let mut data = Vec::with_capacity(chunks.len() * len);
    for c in chunks {
        data.extend_from_slice(&c.signal);
    }
    let x = Tensor::from_vec(&[chunks.len(), 1, len], data).expect("equal-length chunks");
    let targets = chunks.iter().map(|c| c.target.clone()).collect();
    let lens = chunks.iter().map(|c| c.valid_len).collect();
    (x, targets, lens)
}

/// Output frames produced for `valid` input samples at this stride.
pub fn frames_for(stride: usize, valid: usize) -> usize {
    if valid == 0 {
        0
    } else {
        (valid - 1) / stride + 1
    }
}

/// One gradient step over a batch of chunks. Returns the batch loss.
pub fn train_step(
    model: &mut Model<f32>,
    opt: &mut AdamW<f32>,
    chunks: &[&Chunk],
    post_step: &mut dyn FnMut(&mut Model<f32>),
) -> Result<f64> {
    let stride = model.config.stem_stride;
    let (x, targets, lens) = batch_tensor(chunks);
    let frame_lens: Vec<usize> = lens.iter().map(|&v| frames_for(stride, v)).collect();
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let out = model.forward(&mut tape, xv, Mode::Train)?;
    let loss = ctc::ctc_loss(&mut tape, out.log_probs, &targets, &frame_lens)?;
    tape.backward(loss)?;

    let leaves = out.leaves;
    let mut params = model.params_mut();
    for (p, &leaf) in params.iter_mut().zip(&leaves) {
        p.accumulate_grad(tape.grad(leaf))?;
    }
    opt.step(&mut params)?;
    post_step(model);
    Ok(tape.item(loss) as f64)
}

/// Train with CTC over shuffled mini-batches. `post_step` runs after
/// every optimizer step (pruning masks hook in here).
pub fn train_ctc(
    model: &mut Model<f32>,
    train: &[Chunk],
    cfg: &TrainConfig,
    mut post_step: impl FnMut(&mut Model<f32>),
    mut on_epoch: impl FnMut(&EpochStats, &mut Model<f32>),
) -> Result<Vec<EpochStats>> {
    let stride = model.config.stem_stride;
    let usable: Vec<&Chunk> = train
        .iter()
        .filter(|c| c.target.min_frames() <= frames_for(stride, c.valid_len))
        .collect();
    let mut opt = AdamW::new(cfg.optimizer(), &model.param_lens());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut stats = Vec::new();
    for epoch in 0..cfg.epochs {
        if cfg.decay_after > 0 && epoch == cfg.decay_after {
            opt.cfg.lr = cfg.lr * cfg.decay_factor;
        }
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for ids in order.chunks(cfg.batch_size) {
            let batch: Vec<&Chunk> = ids.iter().map(|&i| usable[i]).collect();
            total += train_step(model, &mut opt, &batch, &mut post_step)?;
            batches += 1;
        }
        let s = EpochStats {
            epoch,
            train_loss: if batches > 0 { total / batches as f64 } else { 0.0 },
        };
        on_epoch(&s, model);
        stats.push(s);
    }
    Ok(stats)
}

/// Basecall one read: normalize, split into non-overlapping windows,
/// decode each, and concatenate the fragments in order.
pub fn basecall_read(model: &mut Model<f32>, signal: &[f32], chunk_len: usize) -> Result<String> {
    let normalized = crate::sim::normalize_med_mad(signal)?;
    let stride = model.config.stem_stride;
    let mut windows: Vec<Vec<f32>> = Vec::new();
    let mut valid: Vec<usize> = Vec::new();
    let mut start = 0usize;
    while start < normalized.len() {
        let end = (start + chunk_len).min(normalized.len());
        let mut w = normalized[start..end].to_vec();
        valid.push(end - start);
        w.resize(chunk_len, 0.0);
        windows.push(w);
        start = end;
    }
    let refs: Vec<&[f32]> = windows.iter().map(|w| w.as_slice()).collect();
    let post = model.posteriors(&refs)?;
    let frame_lens: Vec<usize> = valid.iter().map(|&v| frames_for(stride, v)).collect();
    let decoded = ctc::greedy_decode(&post, Some(&frame_lens));
    let mut out = String::new();
    for labels in decoded {
        out.push_str(&ctc::labels_to_bases(&labels));
    }
    Ok(out)
}

/// Basecall a read set over a worker pool, output in input order.
pub fn basecall_reads(
    model: &Model<f32>,
    reads: &[Read],
    chunk_len: usize,
    threads: usize,
) -> Result<Vec<(String, String)>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| crate::error::Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        reads
            .par_iter()
            .map_init(
                || model.clone(),
                |m, read| {
                    let seq = basecall_read(m, &read.signal, chunk_len)?;
                    Ok((read.id.clone(), seq))
                },
            )
            .collect::<Result<Vec<_>>>()
    })
}

/// Basecall and align every read, returning per-read identities.
pub fn evaluate_identity(
    model: &mut Model<f32>,
    reads: &[Read],
    chunk_len: usize,
) -> Result<Vec<f64>> {
    reads
        .iter()
        .map(|read| {
            let call = basecall_read(model, &read.signal, chunk_len)?;
            if call.is_empty() {
                return Ok(0.0);
            }
            Ok(eval::align_identity(&call, &read.sequence)?.identity)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{BlockConfig, ModelConfig};
    use crate::quant::QuantSpec;
    use crate::sim::{self, SimConfig};

    fn tiny_model(seed: u64) -> Model<f32> {
        let cfg = ModelConfig {
            stem: BlockConfig::new(9, 16, QuantSpec::FLOAT),
            stem_stride: 1,
            blocks: vec![
                BlockConfig::new(9, 24, QuantSpec::FLOAT).with_skip(),
                BlockConfig::new(9, 24, QuantSpec::FLOAT),
            ],
            head_quant: QuantSpec::FLOAT,
            input_features: 1,
        };
        Model::build(&cfg, seed).unwrap()
    }

    #[test]
    fn loss_decreases_on_tiny_task() {
        let sim_cfg = SimConfig {
            reads: 12,
            read_len: 60,
            noise_sigma: 1.0,
            chunk_len: 120,
            ..Default::default()
        };
        let reads = sim::simulate_reads(&sim_cfg).unwrap();
        let ds = sim::chunk_dataset(&reads, 120, 0, 1.0, 5).unwrap();
        let mut model = tiny_model(3);
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 16,
            seed: 9,
            ..Default::default()
        };
        let stats = train_ctc(&mut model, &ds.train, &cfg, |_| {}, |_, _| {}).unwrap();
        assert!(stats.last().unwrap().train_loss < stats[0].train_loss);
    }

    #[test]
    fn basecall_is_deterministic_and_parallel_safe() {
        let sim_cfg = SimConfig {
            reads: 6,
            read_len: 50,
            ..Default::default()
        };
        let reads = sim::simulate_reads(&sim_cfg).unwrap();
        let ds = sim::chunk_dataset(&reads, 100, 0, 1.0, 5).unwrap();
        let mut model = tiny_model(7);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            ..Default::default()
        };
        train_ctc(&mut model, &ds.train, &cfg, |_| {}, |_, _| {}).unwrap();

        let single = basecall_reads(&model, &reads, 100, 1).unwrap();
        let multi = basecall_reads(&model, &reads, 100, 4).unwrap();
        assert_eq!(single, multi);
        // ordered by input
        for (got, read) in single.iter().zip(&reads) {
            assert_eq!(got.0, read.id);
        }
    }
}
