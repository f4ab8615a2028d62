//! Gradual skip-connection removal under knowledge distillation: a
//! frozen teacher (skips intact) guides a student whose skip
//! connections are deleted one block at a time, earliest block first,
//! on a fixed epoch stride.
//!
//! The training loss mixes the student's own CTC loss with a softened
//! distillation term: `alpha * L_S + (1 - alpha) * L_D`, where `L_D`
//! rescales both networks' logits by `1/tau` before normalization and
//! is weighted by `tau^2` to keep its gradient scale comparable.

use crate::ctc::{self, CtcTarget, CLASSES};
use crate::error::{Error, Result};
use crate::net::Model;
use crate::sim::{Chunk, Read};
use crate::tensor::{AdamW, Mode, Real, Tape, Value};
use crate::train::{batch_tensor, frames_for, TrainConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Divergence used for the distillation term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistillDivergence {
    /// Kullback-Leibler divergence from teacher to student.
    Kl,
    /// Plain cross-entropy against the softened teacher distribution.
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdConfig {
    /// Weight on the student's own CTC loss, in [0, 1].
    pub alpha: f64,
    /// Softening temperature, > 0.
    pub tau: f64,
    /// Epochs between skip removals, >= 1.
    pub skip_stride: usize,
    pub divergence: DistillDivergence,
    pub epochs_total: usize,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            alpha: 0.9,
            tau: 2.0,
            skip_stride: 1,
            divergence: DistillDivergence::Kl,
            epochs_total: 10,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("kd alpha {} outside [0, 1]", self.alpha)));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("kd tau {} must be > 0", self.tau)));
        }
        if self.skip_stride == 0 {
            return Err(Error::Config("skip stride must be >= 1".into()));
        }
        Ok(())
    }
}

/// Frozen teacher and trainable student. The teacher's weights are
/// never updated; its batch statistics and quantizers stay frozen by
/// running every teacher forward in eval mode.
pub struct DistillPair {
    pub teacher: Model<f32>,
    pub student: Model<f32>,
}

impl DistillPair {
    pub fn new(mut teacher: Model<f32>, student: Model<f32>) -> Self {
        teacher.freeze();
        DistillPair { teacher, student }
    }
}

/// Softened teacher probabilities and their entropy term, computed
/// outside the tape (the teacher is constant).
fn soften_teacher<T: Real>(
    teacher_logits: &[T],
    batch: usize,
    frames: usize,
    tau: f64,
) -> (Vec<T>, f64) {
    let mut probs = vec![T::zero(); teacher_logits.len()];
    let mut entropy_sum = 0.0f64; // sum over frames of sum_k p ln p
    for b in 0..batch {
        for t in 0..frames {
            let idx = |k: usize| (b * CLASSES + k) * frames + t;
            let scaled: Vec<f64> = (0..CLASSES)
                .map(|k| teacher_logits[idx(k)].as_f64() / tau)
                .collect();
            let mx = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + scaled.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for (k, &s) in scaled.iter().enumerate() {
                let lp = s - lse;
                let p = lp.exp();
                probs[idx(k)] = T::from_f64(p);
                entropy_sum += p * lp;
            }
        }
    }
    (probs, entropy_sum)
}

/// Distillation-mixed loss on the tape: `alpha * L_S + (1 - alpha) *
/// tau^2 * D(soften(teacher) || soften(student))`, with the divergence
/// averaged over frames. `student_logits` and `teacher_logits` are
/// `[batch, 5, frames]`; the teacher side is constant.
#[allow(clippy::too_many_arguments)]
pub fn kd_loss<T: Real>(
    tape: &mut Tape<T>,
    student_logits: Value,
    teacher_logits: &[T],
    targets: &[CtcTarget],
    frame_lens: &[usize],
    cfg: &KdConfig,
) -> Result<Value> {
    cfg.validate()?;
    let shape = tape.shape(student_logits).to_vec();
    if shape.len() != 3 || shape[1] != CLASSES {
        return Err(Error::Shape(format!(
            "kd_loss wants [batch, {CLASSES}, frames], got {shape:?}"
        )));
    }
    if teacher_logits.len() != tape.data(student_logits).len() {
        return Err(Error::Shape(format!(
            "kd_loss: teacher {} values, student {}",
            teacher_logits.len(),
            tape.data(student_logits).len()
        )));
    }
    let (batch, frames) = (shape[0], shape[2]);

    // student loss
    let student_lp = tape.log_softmax(student_logits, 1)?;
    let l_s = ctc::ctc_loss(tape, student_lp, targets, frame_lens)?;

    // distillation loss over softened distributions
    let (teacher_probs, teacher_entropy) =
        soften_teacher(teacher_logits, batch, frames, cfg.tau);
    let scaled = tape.scale(student_logits, T::from_f64(1.0 / cfg.tau));
    let soft_student_lp = tape.log_softmax(scaled, 1)?;
    let pt = tape.constant(&shape, teacher_probs)?;
    let weighted = tape.mul(pt, soft_student_lp)?;
    let cross_sum = tape.sum(weighted);
    let n_frames = (batch * frames) as f64;
    // cross-entropy per frame: -sum p_T * ls_S, averaged over frames
    let ce = tape.scale(cross_sum, T::from_f64(-1.0 / n_frames));
    let l_d = match cfg.divergence {
        DistillDivergence::CrossEntropy => ce,
        DistillDivergence::Kl => {
            // KL = sum p ln p - sum p ls_S, per frame
            let ent = tape.scalar(T::from_f64(teacher_entropy / n_frames));
            tape.add(ce, ent)?
        }
    };
    let l_d = tape.scale(l_d, T::from_f64(cfg.tau * cfg.tau));

    let a = tape.scale(l_s, T::from_f64(cfg.alpha));
    let b = tape.scale(l_d, T::from_f64(1.0 - cfg.alpha));
    tape.add(a, b)
}

/// One epoch row of the distillation trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkipClipEpoch {
    pub epoch: usize,
    pub skips_remaining: usize,
    pub train_loss: f64,
    pub val_identity: Option<f64>,
}

pub fn trajectory_csv(rows: &[SkipClipEpoch]) -> String {
    let mut out = String::from("epoch,skips_remaining,train_loss,val_identity\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch,
            r.skips_remaining,
            r.train_loss,
            r.val_identity.map(|v| v.to_string()).unwrap_or_default()
        ));
    }
    out
}

/// Train the student with distillation, removing the earliest
/// remaining skip at epochs `0, stride, 2*stride, ...` until none
/// remain, then fine-tuning for the rest of the schedule. Returns the
/// skip-free student and its per-epoch trajectory.
pub fn skipclip_train(
    pair: DistillPair,
    train: &[Chunk],
    val_reads: &[Read],
    chunk_len: usize,
    kd: &KdConfig,
    tc: &TrainConfig,
) -> Result<(Model<f32>, Vec<SkipClipEpoch>)> {
    kd.validate()?;
    let DistillPair {
        mut teacher,
        mut student,
    } = pair;
    let initial_skips = student.skip_indices().len();
    if kd.epochs_total < initial_skips * kd.skip_stride {
        return Err(Error::Schedule(format!(
            "{} epochs cannot remove {initial_skips} skips at stride {}",
            kd.epochs_total, kd.skip_stride
        )));
    }
    let stride = student.config.stem_stride;
    if stride != teacher.config.stem_stride {
        return Err(Error::Config(
            "teacher and student must share the stem stride so frame counts match".into(),
        ));
    }
    let usable: Vec<&Chunk> = train
        .iter()
        .filter(|c| c.target.min_frames() <= frames_for(stride, c.valid_len))
        .collect();

    let mut opt = AdamW::new(tc.optimizer(), &student.param_lens());
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut trajectory = Vec::new();

    for epoch in 0..kd.epochs_total {
        if epoch % kd.skip_stride == 0 {
            if let Some(&block) = student.skip_indices().first() {
                student.remove_skip(block)?;
            }
        }
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for ids in order.chunks(tc.batch_size) {
            let batch: Vec<&Chunk> = ids.iter().map(|&i| usable[i]).collect();
            let (x, targets, lens) = batch_tensor(&batch);
            let frame_lens: Vec<usize> =
                lens.iter().map(|&v| frames_for(stride, v)).collect();

            // teacher pass on its own tape, eval mode, no gradients
            let teacher_logits: Vec<f32> = {
                let mut t_tape = Tape::new();
                let xv = t_tape.leaf(&x);
                let out = teacher.forward(&mut t_tape, xv, Mode::Eval)?;
                t_tape.data(out.logits).to_vec()
            };

            let mut tape = Tape::new();
            let xv = tape.leaf(&x);
            let out = student.forward(&mut tape, xv, Mode::Train)?;
            let loss = kd_loss(&mut tape, out.logits, &teacher_logits, &targets, &frame_lens, kd)?;
            tape.backward(loss)?;

            let mut params = student.params_mut();
            for (p, &leaf) in params.iter_mut().zip(&out.leaves) {
                p.accumulate_grad(tape.grad(leaf))?;
            }
            opt.step(&mut params)?;
            total += tape.item(loss) as f64;
            batches += 1;
        }

        let val_identity = if val_reads.is_empty() {
            None
        } else {
            let ids = crate::train::evaluate_identity(&mut student, val_reads, chunk_len)?;
            Some(ids.iter().sum::<f64>() / ids.len() as f64)
        };
        trajectory.push(SkipClipEpoch {
            epoch,
            skips_remaining: student.skip_indices().len(),
            train_loss: if batches > 0 { total / batches as f64 } else { 0.0 },
            val_identity,
        });
    }
    Ok((student, trajectory))
}

/// Delete every skip connection at once (the no-distillation baseline).
pub fn remove_all_skips(model: &mut Model<f32>) {
    model.remove_all_skips();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd;
    use crate::net::{BlockConfig, ModelConfig};
    use crate::quant::QuantSpec;
    use crate::sim::{self, SimConfig};
    use crate::tensor::Tensor;
    use rand::Rng;

    fn random_logits(batch: usize, frames: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..batch * CLASSES * frames)
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect()
    }

    fn kd_pieces(
        student: &[f64],
        teacher: &[f64],
        batch: usize,
        frames: usize,
        cfg: &KdConfig,
    ) -> (f64, f64, f64) {
        // returns (total, l_s, l_d) computed through the module
        let targets = vec![CtcTarget::from_bases("AC").unwrap(); batch];
        let lens = vec![frames; batch];
        let x = Tensor::from_vec(&[batch, CLASSES, frames], student.to_vec())
            .unwrap()
            .requires_grad(true);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let total = kd_loss(
            &mut tape,
            xv,
            teacher,
            &targets,
            &lens,
            cfg,
        )
        .unwrap();
        let total_v = tape.item(total);

        // l_s alone
        let mut tape2 = Tape::<f64>::new();
        let xv2 = tape2.leaf(&x);
        let lp = tape2.log_softmax(xv2, 1).unwrap();
        let ls = ctc::ctc_loss(&mut tape2, lp, &targets, &lens).unwrap();
        let l_s = tape2.item(ls);

        // l_d via an independent frame-by-frame computation
        let softmax = |logits: &[f64]| {
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.iter().map(|e| e / sum).collect::<Vec<f64>>()
        };
        let mut acc = 0.0;
        for b in 0..batch {
            for t in 0..frames {
                let idx = |k: usize| (b * CLASSES + k) * frames + t;
                let pt = softmax(&(0..CLASSES).map(|k| teacher[idx(k)] / cfg.tau).collect::<Vec<_>>());
                let ps = softmax(&(0..CLASSES).map(|k| student[idx(k)] / cfg.tau).collect::<Vec<_>>());
                acc += match cfg.divergence {
                    DistillDivergence::Kl => (0..CLASSES)
                        .map(|k| {
                            if pt[k] > 0.0 {
                                pt[k] * (pt[k].ln() - ps[k].ln())
                            } else {
                                0.0
                            }
                        })
                        .sum::<f64>(),
                    DistillDivergence::CrossEntropy => {
                        -(0..CLASSES).map(|k| pt[k] * ps[k].ln()).sum::<f64>()
                    }
                };
            }
        }
        let l_d = cfg.tau * cfg.tau * acc / (batch * frames) as f64;
        (total_v, l_s, l_d)
    }

    #[test]
    fn alpha_one_is_pure_student_loss() {
        let (batch, frames) = (2, 6);
        let s = random_logits(batch, frames, 1);
        let t = random_logits(batch, frames, 2);
        let cfg = KdConfig {
            alpha: 1.0,
            ..Default::default()
        };
        let (total, l_s, _) = kd_pieces(&s, &t, batch, frames, &cfg);
        assert!((total - l_s).abs() <= 1e-12, "{total} vs {l_s}");
    }

    #[test]
    fn identical_logits_have_zero_divergence() {
        let (batch, frames) = (2, 5);
        let s = random_logits(batch, frames, 3);
        for tau in [0.5, 1.0, 2.0, 5.0] {
            let cfg = KdConfig {
                alpha: 0.0,
                tau,
                ..Default::default()
            };
            let (total, _, _) = kd_pieces(&s, &s, batch, frames, &cfg);
            assert!(total.abs() <= 1e-9, "tau {tau}: {total}");
        }
    }

    #[test]
    fn assembled_vs_monolithic_and_temperature_softening() {
        let (batch, frames) = (2, 6);
        let s = random_logits(batch, frames, 4);
        let t = random_logits(batch, frames, 5);
        let mut unscaled = Vec::new();
        for tau in [1.0, 2.0, 5.0] {
            for divergence in [DistillDivergence::Kl, DistillDivergence::CrossEntropy] {
                let cfg = KdConfig {
                    alpha: 0.9,
                    tau,
                    divergence,
                    ..Default::default()
                };
                let (total, l_s, l_d) = kd_pieces(&s, &t, batch, frames, &cfg);
                let assembled = cfg.alpha * l_s + (1.0 - cfg.alpha) * l_d;
                assert!(
                    (total - assembled).abs() <= 1e-7,
                    "tau {tau}: {total} vs {assembled}"
                );
                if divergence == DistillDivergence::Kl {
                    unscaled.push(l_d / (tau * tau));
                }
            }
        }
        // softened distributions approach uniform: KL/tau^2 shrinks
        assert!(unscaled[0] > unscaled[1] && unscaled[1] > unscaled[2], "{unscaled:?}");
    }

    #[test]
    fn kd_gradient_matches_finite_differences() {
        for seed in 0..10u64 {
            let (batch, frames) = (1, 5);
            let s = random_logits(batch, frames, 100 + seed);
            let t = random_logits(batch, frames, 200 + seed);
            let targets = vec![CtcTarget::from_bases("AG").unwrap()];
            let lens = vec![frames];
            let cfg = KdConfig::default();

            let x = Tensor::from_vec(&[batch, CLASSES, frames], s)
                .unwrap()
                .requires_grad(true);
            let run = |xt: &Tensor<f64>| {
                let mut tape = Tape::new();
                let xv = tape.leaf(xt);
                let loss = kd_loss(&mut tape, xv, &t, &targets, &lens, &cfg).unwrap();
                (tape, xv, loss)
            };
            let (mut tape, xv, loss) = run(&x);
            tape.backward(loss).unwrap();
            let analytic = tape.grad(xv).to_vec();
            let rel = fd::max_rel_error(&x, &analytic, |p| {
                let (tape, _, loss) = run(p);
                tape.item(loss)
            });
            assert!(rel <= 1e-4, "seed {seed}: {rel}");
        }
    }

    fn student_config(skip_blocks: usize) -> ModelConfig {
        let blocks = (0..skip_blocks)
            .map(|_| BlockConfig::new(5, 12, QuantSpec::new(8, 8)).with_skip())
            .collect();
        ModelConfig {
            stem: BlockConfig::new(5, 12, QuantSpec::FLOAT),
            stem_stride: 1,
            blocks,
            head_quant: QuantSpec::FLOAT,
            input_features: 1,
        }
    }

    fn teacher_config() -> ModelConfig {
        ModelConfig {
            stem: BlockConfig::new(9, 16, QuantSpec::FLOAT),
            stem_stride: 1,
            blocks: vec![
                BlockConfig::new(9, 24, QuantSpec::FLOAT).with_skip(),
                BlockConfig::new(9, 24, QuantSpec::FLOAT).with_skip(),
            ],
            head_quant: QuantSpec::FLOAT,
            input_features: 1,
        }
    }

    fn toy_data(seed: u64) -> (Vec<Chunk>, Vec<crate::sim::Read>) {
        let cfg = SimConfig {
            reads: 10,
            read_len: 40,
            seed,
            ..Default::default()
        };
        let reads = sim::simulate_reads(&cfg).unwrap();
        let ds = sim::chunk_dataset(&reads, 80, 0, 0.8, seed).unwrap();
        let eval: Vec<crate::sim::Read> = reads
            .iter()
            .filter(|r| ds.eval_read_ids.contains(&r.id))
            .cloned()
            .collect();
        (ds.train, eval)
    }

    fn pretrained_teacher(train: &[Chunk]) -> Model<f32> {
        let mut teacher = Model::build(&teacher_config(), 5).unwrap();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 16,
            ..Default::default()
        };
        crate::train::train_ctc(&mut teacher, train, &tc, |_| {}, |_, _| {}).unwrap();
        teacher
    }

    #[test]
    fn schedule_arithmetic_and_monotone_skips() {
        let (train, _) = toy_data(31);
        let teacher = pretrained_teacher(&train);
        let student = Model::build(&student_config(2), 7).unwrap();
        let kd = KdConfig {
            skip_stride: 3,
            epochs_total: 6,
            ..Default::default()
        };
        let tc = TrainConfig {
            epochs: 0,
            batch_size: 16,
            ..Default::default()
        };
        let (final_student, traj) = skipclip_train(
            DistillPair::new(teacher, student),
            &train,
            &[],
            80,
            &kd,
            &tc,
        )
        .unwrap();
        assert!(final_student.skip_indices().is_empty());
        let skips: Vec<usize> = traj.iter().map(|r| r.skips_remaining).collect();
        assert_eq!(skips, vec![1, 1, 1, 0, 0, 0]);
        // monotone non-increasing
        assert!(skips.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn insufficient_schedule_is_an_error() {
        let (train, _) = toy_data(33);
        let teacher = pretrained_teacher(&train);
        let student = Model::build(&student_config(3), 7).unwrap();
        let kd = KdConfig {
            skip_stride: 2,
            epochs_total: 5, // needs 6
            ..Default::default()
        };
        let tc = TrainConfig::default();
        assert!(matches!(
            skipclip_train(DistillPair::new(teacher, student), &train, &[], 80, &kd, &tc),
            Err(Error::Schedule(_))
        ));
    }

    #[test]
    fn teacher_stays_bit_identical() {
        let (train, _) = toy_data(35);
        let mut teacher = pretrained_teacher(&train);
        let checksum = teacher.weights_checksum();
        let student = Model::build(&student_config(1), 7).unwrap();
        let kd = KdConfig {
            epochs_total: 2,
            ..Default::default()
        };
        let tc = TrainConfig {
            batch_size: 16,
            ..Default::default()
        };
        let pair = DistillPair::new(teacher, student);
        let teacher_copy_check = {
            let mut t2 = pair.teacher.clone();
            t2.weights_checksum()
        };
        assert_eq!(checksum, teacher_copy_check);
        // run training through the pair, then recover the teacher and
        // verify the checksum via a fresh pair construction
        let mut frozen = pair.teacher.clone();
        let (_, _) = skipclip_train(pair, &train, &[], 80, &kd, &tc).unwrap();
        assert_eq!(frozen.weights_checksum(), checksum);
    }

    #[test]
    fn alpha_one_matches_plain_ctc_training() {
        let (train, _) = toy_data(37);
        let teacher = pretrained_teacher(&train);
        // skip-free student: no removals happen, schedule is trivially
        // satisfiable
        let student = Model::build(&student_config(0), 11).unwrap();
        let kd = KdConfig {
            alpha: 1.0,
            epochs_total: 2,
            ..Default::default()
        };
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 16,
            seed: 77,
            ..Default::default()
        };
        let (mut kd_student, _) = skipclip_train(
            DistillPair::new(teacher, student),
            &train,
            &[],
            80,
            &kd,
            &tc,
        )
        .unwrap();

        let mut plain = Model::build(&student_config(0), 11).unwrap();
        crate::train::train_ctc(&mut plain, &train, &tc, |_| {}, |_, _| {}).unwrap();
        assert_eq!(plain.snapshot(), kd_student.snapshot());
    }
}
