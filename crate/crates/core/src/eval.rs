//! Basecalling quality and efficiency metrics: global-alignment read
//! identity, throughput, batch summaries, and the per-layer model
//! report.

use crate::error::{Error, Result};
use crate::quant::{self, LayerCost};
use serde::{Deserialize, Serialize};

/// Edit breakdown of one global alignment. `identity` follows the
/// matched-bases-over-alignment-length definition, insertions and
/// deletions included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub matches: usize,
    pub mismatches: usize,
    /// Bases present in the truth but absent from the call.
    pub insertions: usize,
    /// Bases present in the call but absent from the truth.
    pub deletions: usize,
    pub alignment_length: usize,
    pub identity: f64,
}

/// Global alignment of a called sequence against its truth with unit
/// scores (match +1, mismatch -1, gap -1). Traceback ties prefer
/// match > mismatch > deletion > insertion.
pub fn align_identity(call: &str, truth: &str) -> Result<AlignmentResult> {
    let a: Vec<u8> = call.bytes().collect();
    let b: Vec<u8> = truth.bytes().collect();
    if a.is_empty() || b.is_empty() {
        return Err(Error::Config("align_identity: empty sequence".into()));
    }
    let (n, m) = (a.len(), b.len());
    let width = m + 1;
    let mut score = vec![0i64; (n + 1) * width];
    for i in 1..=n {
        score[i * width] = -(i as i64);
    }
    for j in 1..=m {
        score[j] = -(j as i64);
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = score[(i - 1) * width + j - 1]
                + if a[i - 1] == b[j - 1] { 1 } else { -1 };
            let up = score[(i - 1) * width + j] - 1; // consume call base: deletion
            let left = score[i * width + j - 1] - 1; // consume truth base: insertion
            score[i * width + j] = diag.max(up).max(left);
        }
    }

    let mut res = AlignmentResult {
        matches: 0,
        mismatches: 0,
        insertions: 0,
        deletions: 0,
        alignment_length: 0,
        identity: 0.0,
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let s = score[i * width + j];
        let is_match = i > 0 && j > 0 && a[i - 1] == b[j - 1];
        let diag_ok = i > 0
            && j > 0
            && s == score[(i - 1) * width + j - 1] + if is_match { 1 } else { -1 };
        let up_ok = i > 0 && s == score[(i - 1) * width + j] - 1;
        let left_ok = j > 0 && s == score[i * width + j - 1] - 1;
        // tie preference: match > mismatch > deletion > insertion
        if diag_ok {
            if is_match {
                res.matches += 1;
            } else {
                res.mismatches += 1;
            }
            i -= 1;
            j -= 1;
        } else if up_ok {
            res.deletions += 1;
            i -= 1;
        } else {
            debug_assert!(left_ok);
            res.insertions += 1;
            j -= 1;
        }
        res.alignment_length += 1;
    }
    res.identity = res.matches as f64 / res.alignment_length as f64;
    Ok(res)
}

/// Kilo base pairs emitted per second.
pub fn throughput_kbps(bases_emitted: usize, wall_seconds: f64) -> f64 {
    assert!(wall_seconds > 0.0, "throughput needs a positive duration");
    bases_emitted as f64 / 1000.0 / wall_seconds
}

/// Mean/min/max and interpolated quartiles of a batch of values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub p25: f64,
    pub p75: f64,
    pub median: f64,
    pub count: usize,
}

/// Linear-interpolation percentile over sorted values: rank
/// `p * (n - 1)` between neighbors.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let rank = p * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Config("summary of an empty batch".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(Summary {
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        min: sorted[0],
        max: *sorted.last().unwrap(),
        p25: percentile(&sorted, 0.25),
        p75: percentile(&sorted, 0.75),
        median: percentile(&sorted, 0.5),
        count: sorted.len(),
    })
}

/// One row of the per-layer model report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub layer: String,
    pub params: usize,
    pub weight_bits: u8,
    pub act_bits: u8,
    pub bytes: f64,
    pub bops: u64,
    pub latency: f64,
}

/// Per-layer table plus totals, cross-checked against the cost
/// accounting primitives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub rows: Vec<ReportRow>,
    pub total_params: usize,
    pub total_bytes: f64,
    pub total_bops: u64,
    pub total_latency: f64,
}

impl ModelReport {
    /// `latencies[i]` is the estimated latency of `layers[i]`.
    pub fn new(layers: &[LayerCost], latencies: &[f64]) -> Result<Self> {
        if layers.len() != latencies.len() {
            return Err(Error::Shape(format!(
                "report: {} layers vs {} latencies",
                layers.len(),
                latencies.len()
            )));
        }
        let rows: Vec<ReportRow> = layers
            .iter()
            .zip(latencies)
            .map(|(l, &lat)| ReportRow {
                layer: l.name.clone(),
                params: l.params,
                weight_bits: l.quant.weight_bits,
                act_bits: l.quant.act_bits,
                bytes: quant::layer_size_bytes(l),
                bops: quant::bops(l),
                latency: lat,
            })
            .collect();
        Ok(ModelReport {
            total_params: rows.iter().map(|r| r.params).sum(),
            total_bytes: quant::model_size_bytes(layers),
            total_bops: quant::model_bops(layers),
            total_latency: latencies.iter().sum(),
            rows,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>10} {:>8} {:>12} {:>14} {:>12}\n",
            "layer", "params", "<w,a>", "bytes", "bops", "latency"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<24} {:>10} {:>8} {:>12.1} {:>14} {:>12.3}\n",
                r.layer,
                r.params,
                format!("<{},{}>", r.weight_bits, r.act_bits),
                r.bytes,
                r.bops,
                r.latency
            ));
        }
        out.push_str(&format!(
            "{:<24} {:>10} {:>8} {:>12.1} {:>14} {:>12.3}\n",
            "total", self.total_params, "", self.total_bytes, self.total_bops, self.total_latency
        ));
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,params,weight_bits,act_bits,bytes,bops,latency\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.layer, r.params, r.weight_bits, r.act_bits, r.bytes, r.bops, r.latency
            ));
        }
        out.push_str(&format!(
            "total,{},,,{},{},{}\n",
            self.total_params, self.total_bytes, self.total_bops, self.total_latency
        ));
        out
    }
}
