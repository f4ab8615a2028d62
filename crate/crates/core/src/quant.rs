//! Fake quantization (quantize-dequantize in the float domain) for
//! quantization-aware training, plus mixed-precision cost accounting:
//! weight-storage bytes and bit operations (BOPs).

use crate::error::{Error, Result};
use crate::tensor::{Mode, Real, Tape, Value};
use serde::{Deserialize, Serialize};

/// Per-layer bit widths, written `<weight_bits, act_bits>`. 32 means
/// float passthrough.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QuantSpec {
    pub weight_bits: u8,
    pub act_bits: u8,
}

pub const ALLOWED_BITS: [u8; 4] = [4, 8, 16, 32];

impl QuantSpec {
    pub const fn new(weight_bits: u8, act_bits: u8) -> Self {
        QuantSpec {
            weight_bits,
            act_bits,
        }
    }

    pub const FLOAT: QuantSpec = QuantSpec::new(32, 32);

    pub fn validate(&self) -> Result<()> {
        for bits in [self.weight_bits, self.act_bits] {
            if !ALLOWED_BITS.contains(&bits) {
                return Err(Error::Config(format!(
                    "bit width {bits} not in {ALLOWED_BITS:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn is_float(&self) -> bool {
        self.weight_bits == 32 && self.act_bits == 32
    }
}

impl std::fmt::Display for QuantSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "<{},{}>", self.weight_bits, self.act_bits)
    }
}

/// How the quantization range is calibrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RangeTracker {
    /// Recalibrate from `max|x|` on every training forward (weights).
    StaticMax,
    /// Exponential moving average of the batch max (activations).
    EmaMax,
}

/// Quantize-dequantize onto a uniform grid `{q * scale}` with
/// round-half-to-even, clamping before rounding. Signed mode maps to
/// integers in `[-(2^(b-1)-1), 2^(b-1)-1]`, unsigned to `[0, 2^b-1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FakeQuantizer<T: Real> {
    pub bits: u8,
    pub signed: bool,
    pub tracker: RangeTracker,
    pub ema_decay: T,
    scale: Option<T>,
    tracked_max: Option<T>,
}

impl<T: Real> FakeQuantizer<T> {
    /// Symmetric signed quantizer for weights.
    pub fn weights(bits: u8) -> Self {
        FakeQuantizer {
            bits,
            signed: true,
            tracker: RangeTracker::StaticMax,
            ema_decay: T::from_f64(0.99),
            scale: None,
            tracked_max: None,
        }
    }

    /// Unsigned quantizer for post-activation values.
    pub fn activations(bits: u8) -> Self {
        FakeQuantizer {
            bits,
            signed: false,
            tracker: RangeTracker::EmaMax,
            ema_decay: T::from_f64(0.99),
            scale: None,
            tracked_max: None,
        }
    }

    /// Largest representable integer level.
    pub fn qmax(&self) -> T {
        let levels = if self.signed {
            (1u64 << (self.bits - 1)) - 1
        } else {
            (1u64 << self.bits) - 1
        };
        T::from_f64(levels as f64)
    }

    pub fn scale(&self) -> Option<T> {
        self.scale
    }

    pub fn is_calibrated(&self) -> bool {
        self.scale.is_some()
    }

    /// Restore persisted state (checkpoint load).
    pub fn set_state(&mut self, scale: Option<T>, tracked_max: Option<T>) {
        self.scale = scale;
        self.tracked_max = tracked_max;
    }

    pub fn tracked_max(&self) -> Option<T> {
        self.tracked_max
    }

    /// Update the calibration from observed data.
    pub fn observe(&mut self, data: &[T]) {
        if self.bits == 32 {
            return;
        }
        let batch_max = data
            .iter()
            .fold(T::zero(), |a, &v| a.max(if self.signed { v.abs() } else { v }));
        let m = match (self.tracker, self.tracked_max) {
            (RangeTracker::StaticMax, _) | (_, None) => batch_max,
            (RangeTracker::EmaMax, Some(prev)) => {
                self.ema_decay * prev + (T::one() - self.ema_decay) * batch_max
            }
        };
        self.tracked_max = Some(m);
        let m = if m > T::zero() { m } else { T::one() };
        self.scale = Some(m / self.qmax());
    }

    fn grid(&self) -> Result<(T, T, T)> {
        let scale = self.scale.ok_or_else(|| {
            Error::Quant("quantizer used in eval mode before calibration".into())
        })?;
        let qmax = self.qmax();
        let lo = if self.signed { -qmax * scale } else { T::zero() };
        Ok((scale, lo, qmax * scale))
    }

    /// Quantize-dequantize a plain buffer. `bits == 32` returns the
    /// input unchanged.
    pub fn quantize_dequantize(&self, data: &[T]) -> Result<Vec<T>> {
        if self.bits == 32 {
            return Ok(data.to_vec());
        }
        let (scale, lo, hi) = self.grid()?;
        Ok(data
            .iter()
            .map(|&x| {
                let c = if x < lo { lo } else if x > hi { hi } else { x };
                (c / scale).round_even() * scale
            })
            .collect())
    }

    /// Tape version with the straight-through estimator: gradient
    /// passes unchanged where the input lies inside the clamp range,
    /// zero outside. In train mode the calibration is refreshed from
    /// the tape value first.
    pub fn apply(&mut self, tape: &mut Tape<T>, x: Value, mode: Mode) -> Result<Value> {
        if self.bits == 32 {
            return Ok(x);
        }
        if mode == Mode::Train {
            self.observe(tape.data(x));
        }
        let (scale, lo, hi) = self.grid()?;
        Ok(tape.straight_through(x, lo, hi, |v| {
            let c = if v < lo { lo } else if v > hi { hi } else { v };
            (c / scale).round_even() * scale
        }))
    }
}

/// Shape of one layer for cost accounting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        groups: usize,
        len_out: usize,
    },
    Identity,
}

/// Cost-relevant description of one parameterized layer; the network
/// module emits one of these per layer for reports and search costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: LayerKind,
    pub params: usize,
    pub quant: QuantSpec,
}

/// Multiply-accumulate count of a layer.
pub fn macs(kind: &LayerKind) -> u64 {
    match kind {
        LayerKind::Conv {
            c_in,
            c_out,
            kernel,
            groups,
            len_out,
        } => (len_out * c_out * (c_in / groups) * kernel) as u64,
        LayerKind::Identity => 0,
    }
}

/// Bit operations: MACs x weight_bits x act_bits. Identity layers cost
/// nothing.
pub fn bops(layer: &LayerCost) -> u64 {
    macs(&layer.kind) * layer.quant.weight_bits as u64 * layer.quant.act_bits as u64
}

/// Weight storage in bytes at the layer's weight precision; floats
/// count as 32 bits.
pub fn layer_size_bytes(layer: &LayerCost) -> f64 {
    layer.params as f64 * layer.quant.weight_bits as f64 / 8.0
}

/// Total weight storage over all layers.
pub fn model_size_bytes(layers: &[LayerCost]) -> f64 {
    layers.iter().map(layer_size_bytes).sum()
}

/// Total BOPs over all layers.
pub fn model_bops(layers: &[LayerCost]) -> u64 {
    layers.iter().map(bops).sum()
}
