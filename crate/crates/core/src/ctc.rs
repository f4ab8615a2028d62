//! Connectionist temporal classification: forward-backward loss over
//! the blank-interleaved extended label sequence (log space throughout)
//! and greedy decoding from per-frame nucleotide distributions.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Value};

/// Class id of the CTC blank.
pub const BLANK: u8 = 0;
/// blank + A, C, G, T.
pub const CLASSES: usize = 5;

const BASES: [char; 4] = ['A', 'C', 'G', 'T'];

/// Map label ids 1..=4 to bases.
pub fn labels_to_bases(labels: &[u8]) -> String {
    labels
        .iter()
        .map(|&l| BASES[(l - 1) as usize])
        .collect()
}

/// Map a base string to label ids.
pub fn bases_to_labels(s: &str) -> Result<Vec<u8>> {
    s.chars()
        .map(|c| match c {
            'A' => Ok(1),
            'C' => Ok(2),
            'G' => Ok(3),
            'T' => Ok(4),
            other => Err(Error::Config(format!("unknown base '{other}'"))),
        })
        .collect()
}

/// Label sequence over {1=A, 2=C, 3=G, 4=T}; never contains the blank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CtcTarget {
    labels: Vec<u8>,
}

impl CtcTarget {
    pub fn new(labels: Vec<u8>) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l == BLANK || l as usize >= CLASSES) {
            return Err(Error::Config(format!(
                "target label {bad} outside 1..={}",
                CLASSES - 1
            )));
        }
        Ok(CtcTarget { labels })
    }

    pub fn from_bases(s: &str) -> Result<Self> {
        Self::new(bases_to_labels(s)?)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Minimum number of frames that admits any alignment: the target
    /// length plus one blank per adjacent repeated pair.
    pub fn min_frames(&self) -> usize {
        let repeats = self.labels.windows(2).filter(|w| w[0] == w[1]).count();
        self.labels.len() + repeats
    }
}

fn log_sum_exp<T: Real>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    let (m, d) = if a >= b { (a, b - a) } else { (b, a - b) };
    m + d.exp().ln_1p()
}

fn log_sum_exp3<T: Real>(a: T, b: T, c: T) -> T {
    if c == T::neg_infinity() {
        return log_sum_exp(a, b);
    }
    let m = a.max(b).max(c);
    if m == T::neg_infinity() {
        return m;
    }
    // the max contributes exp(0) = 1 and is skipped
    if a == m {
        a + ((b - a).exp() + (c - a).exp()).ln_1p()
    } else if b == m {
        b + ((a - b).exp() + (c - b).exp()).ln_1p()
    } else {
        c + ((a - c).exp() + (b - c).exp()).ln_1p()
    }
}

/// Per-element CTC losses and the gradient w.r.t. the log probabilities.
///
/// `log_probs` is batch-major `[batch, CLASSES, frames]` (the natural
/// network output layout). Element `b` uses frames `0..input_lens[b]`.
/// Returns one loss per batch element plus a same-size gradient buffer
/// for the *summed* loss (callers divide for mean reduction).
pub fn ctc_loss_grad<T: Real>(
    log_probs: &[T],
    batch: usize,
    frames: usize,
    input_lens: &[usize],
    targets: &[CtcTarget],
) -> Result<(Vec<T>, Vec<T>)> {
    if input_lens.len() != batch || targets.len() != batch {
        return Err(Error::Shape(format!(
            "ctc_loss: batch {batch} vs {} input_lens / {} targets",
            input_lens.len(),
            targets.len()
        )));
    }
    if log_probs.len() != batch * CLASSES * frames {
        return Err(Error::Shape(format!(
            "ctc_loss: log_probs length {} != {batch}x{CLASSES}x{frames}",
            log_probs.len()
        )));
    }
    if log_probs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Autodiff("ctc_loss: non-finite log probabilities".into()));
    }
    // Loose normalization guard: rows are expected to come from
    // log_softmax. 1e-2 leaves room for finite-difference perturbation.
    for b in 0..batch {
        for t in 0..input_lens[b].min(frames) {
            let mut s = T::zero();
            for k in 0..CLASSES {
                s = s + log_probs[(b * CLASSES + k) * frames + t].exp();
            }
            if (s.as_f64() - 1.0).abs() > 1e-2 {
                return Err(Error::Shape(format!(
                    "ctc_loss: frame ({b},{t}) is not a normalized distribution (sum {s})"
                )));
            }
        }
    }

    let infeasible: Vec<usize> = (0..batch)
        .filter(|&b| input_lens[b] > frames || targets[b].min_frames() > input_lens[b])
        .collect();
    if !infeasible.is_empty() {
        return Err(Error::InfeasibleTarget {
            elements: infeasible,
            reason: "target needs more frames than the input provides".into(),
        });
    }

    let mut losses = vec![T::zero(); batch];
    let mut grad = vec![T::zero(); log_probs.len()];
    let neg_inf = T::neg_infinity();

    for b in 0..batch {
        let t_len = input_lens[b];
        let labels = targets[b].labels();
        let y = |t: usize, k: usize| log_probs[(b * CLASSES + k) * frames + t];

        if t_len == 0 {
            // empty target on an empty input: probability one
            continue;
        }

        // extended sequence: blank, l1, blank, l2, ..., blank
        let s_len = 2 * labels.len() + 1;
        let ext_lab: Vec<usize> = (0..s_len)
            .map(|s| {
                if s % 2 == 0 {
                    BLANK as usize
                } else {
                    labels[s / 2] as usize
                }
            })
            .collect();
        // whether position s may be entered directly from s-2
        let skip_ok: Vec<bool> = (0..s_len)
            .map(|s| s >= 2 && ext_lab[s] != BLANK as usize && ext_lab[s] != ext_lab[s - 2])
            .collect();

        let mut alpha = vec![neg_inf; t_len * s_len];
        let mut beta = vec![neg_inf; t_len * s_len];

        alpha[0] = y(0, ext_lab[0]);
        if s_len > 1 {
            alpha[1] = y(0, ext_lab[1]);
        }
        for t in 1..t_len {
            let (prev_row, row) = alpha.split_at_mut(t * s_len);
            let prev_row = &prev_row[(t - 1) * s_len..];
            let row = &mut row[..s_len];
            for (s, r) in row.iter_mut().enumerate() {
                let stay = prev_row[s];
                let prev = if s >= 1 { prev_row[s - 1] } else { neg_inf };
                let skip = if skip_ok[s] { prev_row[s - 2] } else { neg_inf };
                *r = y(t, ext_lab[s]) + log_sum_exp3(stay, prev, skip);
            }
        }

        beta[(t_len - 1) * s_len + s_len - 1] = y(t_len - 1, ext_lab[s_len - 1]);
        if s_len > 1 {
            beta[(t_len - 1) * s_len + s_len - 2] = y(t_len - 1, ext_lab[s_len - 2]);
        }
        for t in (0..t_len - 1).rev() {
            let (head, tail) = beta.split_at_mut((t + 1) * s_len);
            let row = &mut head[t * s_len..];
            let next_row = &tail[..s_len];
            for (s, r) in row.iter_mut().enumerate() {
                let stay = next_row[s];
                let next = if s + 1 < s_len { next_row[s + 1] } else { neg_inf };
                let skip = if s + 2 < s_len && skip_ok[s + 2] {
                    next_row[s + 2]
                } else {
                    neg_inf
                };
                *r = y(t, ext_lab[s]) + log_sum_exp3(stay, next, skip);
            }
        }

        let mut log_p = alpha[(t_len - 1) * s_len + s_len - 1];
        if s_len > 1 {
            log_p = log_sum_exp(log_p, alpha[(t_len - 1) * s_len + s_len - 2]);
        }
        losses[b] = -log_p;

        // dL/dy_t(k) = -exp(lse_{s: ext(s)=k}(alpha + beta) - y_t(k) - log_p)
        for t in 0..t_len {
            let mut max_k = [neg_inf; CLASSES];
            for s in 0..s_len {
                let v = alpha[t * s_len + s] + beta[t * s_len + s];
                let k = ext_lab[s];
                if v > max_k[k] {
                    max_k[k] = v;
                }
            }
            let mut sum_k = [T::zero(); CLASSES];
            for s in 0..s_len {
                let k = ext_lab[s];
                if max_k[k] > neg_inf {
                    sum_k[k] =
                        sum_k[k] + (alpha[t * s_len + s] + beta[t * s_len + s] - max_k[k]).exp();
                }
            }
            for k in 0..CLASSES {
                if max_k[k] > neg_inf {
                    let lse = max_k[k] + sum_k[k].ln();
                    grad[(b * CLASSES + k) * frames + t] = -(lse - y(t, k) - log_p).exp();
                }
            }
        }
    }

    Ok((losses, grad))
}

/// Mean-over-batch CTC loss as a tape node. `log_probs` must be shaped
/// `[batch, CLASSES, frames]`.
pub fn ctc_loss<T: Real>(
    tape: &mut Tape<T>,
    log_probs: Value,
    targets: &[CtcTarget],
    input_lens: &[usize],
) -> Result<Value> {
    let shape = tape.shape(log_probs);
    if shape.len() != 3 || shape[1] != CLASSES {
        return Err(Error::Shape(format!(
            "ctc_loss wants [batch, {CLASSES}, frames], got {shape:?}"
        )));
    }
    let (batch, frames) = (shape[0], shape[2]);
    let (losses, mut grad) =
        ctc_loss_grad(tape.data(log_probs), batch, frames, input_lens, targets)?;
    let inv_b = T::one() / T::from_f64(batch as f64);
    for g in &mut grad {
        *g = *g * inv_b;
    }
    let mean = losses.iter().fold(T::zero(), |a, &l| a + l) * inv_b;
    tape.scalar_with_grad(log_probs, mean, grad)
}

/// Log probabilities shaped `[frames][batch][CLASSES]`, rows normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePosterior<T: Real> {
    pub frames: usize,
    pub batch: usize,
    log_probs: Vec<T>,
}

impl<T: Real> FramePosterior<T> {
    pub fn new(frames: usize, batch: usize, log_probs: Vec<T>) -> Result<Self> {
        if log_probs.len() != frames * batch * CLASSES {
            return Err(Error::Shape(format!(
                "posterior length {} != {frames}x{batch}x{CLASSES}",
                log_probs.len()
            )));
        }
        let p = FramePosterior {
            frames,
            batch,
            log_probs,
        };
        p.validate()?;
        Ok(p)
    }

    /// Build from batch-major `[batch, CLASSES, frames]` data (the
    /// network output layout).
    pub fn from_batch_major(data: &[T], batch: usize, frames: usize) -> Result<Self> {
        if data.len() != batch * CLASSES * frames {
            return Err(Error::Shape(format!(
                "posterior length {} != {batch}x{CLASSES}x{frames}",
                data.len()
            )));
        }
        let mut log_probs = vec![T::zero(); data.len()];
        for t in 0..frames {
            for b in 0..batch {
                for k in 0..CLASSES {
                    log_probs[(t * batch + b) * CLASSES + k] =
                        data[(b * CLASSES + k) * frames + t];
                }
            }
        }
        Self::new(frames, batch, log_probs)
    }

    fn validate(&self) -> Result<()> {
        for t in 0..self.frames {
            for b in 0..self.batch {
                let row = self.row(t, b);
                // sum at the row's own precision, like the producer did
                let s = row
                    .iter()
                    .fold(T::zero(), |a, &v| a + v.exp())
                    .as_f64();
                if (s - 1.0).abs() > 1e-6 {
                    return Err(Error::Shape(format!(
                        "posterior frame ({t},{b}) sums to {s}, not 1"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn row(&self, t: usize, b: usize) -> &[T] {
        let base = (t * self.batch + b) * CLASSES;
        &self.log_probs[base..base + CLASSES]
    }
}

/// Greedy CTC decode: per-frame argmax (ties toward the lower class
/// id), collapse consecutive duplicates, drop blanks. `valid_frames`
/// limits each batch element to its unpadded prefix.
pub fn greedy_decode<T: Real>(
    post: &FramePosterior<T>,
    valid_frames: Option<&[usize]>,
) -> Vec<Vec<u8>> {
    (0..post.batch)
        .map(|b| {
            let t_len = valid_frames.map(|v| v[b]).unwrap_or(post.frames);
            let mut out = Vec::new();
            let mut prev = None;
            for t in 0..t_len.min(post.frames) {
                let row = post.row(t, b);
                let mut arg = 0usize;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[arg] {
                        arg = k;
                    }
                }
                if prev != Some(arg) && arg != BLANK as usize {
                    out.push(arg as u8);
                }
                prev = Some(arg);
            }
            out
        })
        .collect()
}
