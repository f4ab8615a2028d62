//! wasm-bindgen surface for the browser demo: squiggle simulation,
//! fake quantization of the signal, and architecture cost estimates.
//! Every function returns a JSON string so the page needs no extra
//! glue types.

use rubicon_core::eval::ModelReport;
use rubicon_core::net::{BlockConfig, ModelConfig};
use rubicon_core::quant::{FakeQuantizer, QuantSpec};
use rubicon_core::{qabas, sim};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct Squiggle {
    sequence: String,
    /// med-MAD normalized samples
    signal: Vec<f32>,
    /// first sample index of each base
    boundaries: Vec<usize>,
}

#[derive(Serialize)]
struct ErrorMsg {
    error: String,
}

fn to_json(value: &impl Serialize) -> String {
    serde_json::to_string(value).unwrap_or_else(|e| format!("{{\"error\":\"{e}\"}}"))
}

fn err_json(e: impl std::fmt::Display) -> String {
    to_json(&ErrorMsg {
        error: e.to_string(),
    })
}

/// Simulate one read and return its normalized squiggle with base
/// boundaries.
#[wasm_bindgen]
pub fn simulate_squiggle(
    seed: u32,
    bases: usize,
    k: usize,
    dwell_min: usize,
    dwell_max: usize,
    noise_sigma: f32,
) -> String {
    let run = || -> rubicon_core::Result<Squiggle> {
        let pore = sim::PoreModel::with_defaults(k, seed as u64)?;
        let seq = sim::random_genome(bases.max(k), seed as u64)?;
        let read = sim::simulate_read(
            "demo",
            &seq,
            &pore,
            (dwell_min.max(1), dwell_max.max(dwell_min.max(1))),
            noise_sigma,
            seed as u64 + 1,
        )?;
        let signal = sim::normalize_med_mad(&read.signal)?;
        let mut boundaries = Vec::new();
        let mut prev = u32::MAX;
        for (i, &b) in read.sample_to_base.iter().enumerate() {
            if b != prev {
                boundaries.push(i);
                prev = b;
            }
        }
        Ok(Squiggle {
            sequence: read.sequence,
            signal,
            boundaries,
        })
    };
    match run() {
        Ok(s) => to_json(&s),
        Err(e) => err_json(e),
    }
}

#[derive(Serialize)]
struct Quantized {
    values: Vec<f32>,
    distinct_levels: usize,
    max_abs_error: f32,
    scale: f32,
}

/// Quantize-dequantize a signal at the requested bit width (signed,
/// symmetric, calibrated from the signal's own max).
#[wasm_bindgen]
pub fn quantize_signal(signal: &[f32], bits: u8) -> String {
    let run = || -> rubicon_core::Result<Quantized> {
        let mut q = FakeQuantizer::<f32>::weights(bits);
        q.observe(signal);
        let values = q.quantize_dequantize(signal)?;
        let mut levels: Vec<u32> = values.iter().map(|v| v.to_bits()).collect();
        levels.sort_unstable();
        levels.dedup();
        let max_abs_error = signal
            .iter()
            .zip(&values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        Ok(Quantized {
            distinct_levels: levels.len(),
            max_abs_error,
            scale: q.scale().unwrap_or(0.0),
            values,
        })
    };
    match run() {
        Ok(s) => to_json(&s),
        Err(e) => err_json(e),
    }
}

#[derive(Serialize)]
struct CostSummary {
    params: usize,
    weight_bytes: f64,
    float_bytes: f64,
    compression: f64,
    total_bops: u64,
    est_latency: f64,
    layers: ModelReport,
}

/// Cost report for a uniform basecaller: `depth` blocks of the given
/// kernel and width, quantized to `<weight_bits, act_bits>`, evaluated
/// at `chunk_len` samples.
#[wasm_bindgen]
pub fn architecture_cost(
    depth: usize,
    kernel: usize,
    channels: usize,
    weight_bits: u8,
    act_bits: u8,
    chunk_len: usize,
) -> String {
    let run = || -> rubicon_core::Result<CostSummary> {
        let quant = QuantSpec::new(weight_bits, act_bits);
        quant.validate()?;
        let kernel = if kernel % 2 == 0 { kernel + 1 } else { kernel };
        let cfg = ModelConfig {
            stem: BlockConfig::new(9, channels.max(1), quant),
            stem_stride: 1,
            blocks: (0..depth)
                .map(|_| BlockConfig::new(kernel, channels.max(1), quant))
                .collect(),
            head_quant: quant,
            input_features: 1,
        };
        cfg.validate()?;
        let model = rubicon_core::net::Model::<f32>::build(&cfg, 1)?;
        let layers = model.per_layer_costs(chunk_len.max(kernel));
        let latencies: Vec<f64> = layers.iter().map(qabas::op_latency).collect();
        let report = ModelReport::new(&layers, &latencies)?;
        let params = cfg.count_params();
        Ok(CostSummary {
            params,
            weight_bytes: report.total_bytes,
            float_bytes: params as f64 * 4.0,
            compression: params as f64 * 4.0 / report.total_bytes,
            total_bops: report.total_bops,
            est_latency: report.total_latency,
            layers: report,
        })
    };
    match run() {
        Ok(s) => to_json(&s),
        Err(e) => err_json(e),
    }
}

/// Size of the architecture search space for the given options
/// (kernels x precisions + identity, per slot), as a decimal string.
#[wasm_bindgen]
pub fn search_space_size(depth: usize, kernels: usize, precisions: usize) -> String {
    let space = qabas::SearchSpace {
        depth: depth.max(1),
        kernel_options: vec![3; kernels.max(1)],
        quant_options: vec![QuantSpec::new(8, 8); precisions.max(1)],
        ..Default::default()
    };
    qabas::count_space(&space).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squiggle_json_is_well_formed() {
        let out = simulate_squiggle(3, 40, 3, 8, 12, 1.0);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert!(v["error"].is_null(), "{out}");
        assert_eq!(v["sequence"].as_str().unwrap().len(), 40);
        assert_eq!(v["boundaries"].as_array().unwrap().len(), 40);
        assert!(v["signal"].as_array().unwrap().len() >= 8 * 40);
    }

    #[test]
    fn quantization_levels_shrink_with_bits() {
        let out = simulate_squiggle(5, 30, 3, 8, 12, 1.0);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        let signal: Vec<f32> = v["signal"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_f64().unwrap() as f32)
            .collect();
        let q4: serde_json::Value =
            serde_json::from_str(&quantize_signal(&signal, 4)).unwrap();
        let q8: serde_json::Value =
            serde_json::from_str(&quantize_signal(&signal, 8)).unwrap();
        assert!(q4["distinct_levels"].as_u64().unwrap() <= 16);
        assert!(
            q4["distinct_levels"].as_u64().unwrap() < q8["distinct_levels"].as_u64().unwrap()
        );
        assert!(
            q4["max_abs_error"].as_f64().unwrap() > q8["max_abs_error"].as_f64().unwrap()
        );
    }

    #[test]
    fn cost_report_tracks_precision() {
        let f32_cost: serde_json::Value =
            serde_json::from_str(&architecture_cost(4, 5, 16, 32, 32, 400)).unwrap();
        let int8: serde_json::Value =
            serde_json::from_str(&architecture_cost(4, 5, 16, 8, 8, 400)).unwrap();
        assert_eq!(f32_cost["params"], int8["params"]);
        assert_eq!(int8["compression"].as_f64().unwrap(), 4.0);
        assert!(
            int8["est_latency"].as_f64().unwrap() < f32_cost["est_latency"].as_f64().unwrap()
        );
    }

    #[test]
    fn space_size_is_exact() {
        // (2 kernels x 2 precisions + 1)^3 = 125
        assert_eq!(search_space_size(3, 2, 2), "125");
    }
}
