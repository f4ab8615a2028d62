//! Deterministic synthetic squiggle generation: a k-mer pore model
//! with evenly separated current levels, per-base dwell, Gaussian
//! noise, med-MAD normalization, and chunked dataset construction with
//! a train/eval split by read id.

use crate::ctc::CtcTarget;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;

pub const BASES: [char; 4] = ['A', 'C', 'G', 'T'];

fn base_id(c: char) -> Result<usize> {
    match c {
        'A' => Ok(0),
        'C' => Ok(1),
        'G' => Ok(2),
        'T' => Ok(3),
        other => Err(Error::Sim(format!("unknown base '{other}'"))),
    }
}

/// k-mer current-level table. Levels are a seeded permutation of
/// evenly spaced values across `range`, so distinct k-mers are always
/// separated by exactly `(hi - lo) / (4^k - 1)`.
#[derive(Debug, Clone)]
pub struct PoreModel {
    pub k: usize,
    pub range: (f32, f32),
    levels: Vec<f32>,
    sigma_scale: Vec<f32>,
}

impl PoreModel {
    pub fn new(k: usize, seed: u64, range: (f32, f32), min_gap_fraction: f32) -> Result<Self> {
        if k == 0 || k > 8 {
            return Err(Error::Sim(format!("k={k} outside 1..=8")));
        }
        if range.1 <= range.0 {
            return Err(Error::Sim("pore level range must be increasing".into()));
        }
        let n = 4usize.pow(k as u32);
        let gap_fraction = if n > 1 { 1.0 / (n as f32 - 1.0) } else { 1.0 };
        if gap_fraction < min_gap_fraction {
            return Err(Error::Sim(format!(
                "4^{k} levels can only guarantee a gap fraction of {gap_fraction}, \
                 requested {min_gap_fraction}"
            )));
        }
        let span = range.1 - range.0;
        let mut levels: Vec<f32> = (0..n)
            .map(|i| range.0 + span * i as f32 / (n.max(2) as f32 - 1.0))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        levels.shuffle(&mut rng);
        Ok(PoreModel {
            k,
            range,
            levels,
            sigma_scale: vec![1.0; n],
        })
    }

    pub fn with_defaults(k: usize, seed: u64) -> Result<Self> {
        PoreModel::new(k, seed, (60.0, 120.0), 0.0)
    }

    fn kmer_index(&self, seq: &[usize], start: usize) -> usize {
        seq[start..start + self.k]
            .iter()
            .fold(0usize, |acc, &b| acc * 4 + b)
    }

    pub fn level(&self, kmer_index: usize) -> f32 {
        self.levels[kmer_index]
    }

    /// Guaranteed separation between any two distinct k-mer levels.
    pub fn level_gap(&self) -> f32 {
        let n = self.levels.len();
        (self.range.1 - self.range.0) / (n as f32 - 1.0).max(1.0)
    }
}

/// Simulated read: reference sequence, raw signal, and for every
/// sample the reference position it came from.
#[derive(Debug, Clone)]
pub struct Read {
    pub id: String,
    pub sequence: String,
    pub signal: Vec<f32>,
    /// sample index -> base index in `sequence`
    pub sample_to_base: Vec<u32>,
}

/// Uniform i.i.d. genome, deterministic per seed.
pub fn random_genome(length: usize, seed: u64) -> Result<String> {
    if length == 0 {
        return Err(Error::Sim("genome length must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..length).map(|_| BASES[rng.gen_range(0..4)]).collect())
}

/// Emit `dwell` samples per base at the current k-mer's level plus
/// Gaussian noise. The k-1 tail positions reuse the last full k-mer.
pub fn simulate_read(
    id: &str,
    seq: &str,
    pore: &PoreModel,
    dwell_range: (usize, usize),
    noise_sigma: f32,
    seed: u64,
) -> Result<Read> {
    let bases: Vec<usize> = seq.chars().map(base_id).collect::<Result<_>>()?;
    if bases.len() < pore.k {
        return Err(Error::Sim(format!(
            "sequence length {} shorter than k={}",
            bases.len(),
            pore.k
        )));
    }
    if dwell_range.0 == 0 || dwell_range.1 < dwell_range.0 {
        return Err(Error::Sim(format!("empty dwell range {dwell_range:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last_full = bases.len() - pore.k;
    let mut signal = Vec::new();
    let mut sample_to_base = Vec::new();
    for (i, _) in bases.iter().enumerate() {
        let kmer_start = i.min(last_full);
        let kmer = pore.kmer_index(&bases, kmer_start);
        let level = pore.level(kmer);
        let sigma = noise_sigma * pore.sigma_scale[kmer];
        let dwell = rng.gen_range(dwell_range.0..=dwell_range.1);
        for _ in 0..dwell {
            let noise = if sigma > 0.0 {
                Normal::new(0.0, sigma as f64).unwrap().sample(&mut rng) as f32
            } else {
                0.0
            };
            signal.push(level + noise);
            sample_to_base.push(i as u32);
        }
    }
    Ok(Read {
        id: id.to_string(),
        sequence: seq.to_string(),
        signal,
        sample_to_base,
    })
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Robust standardization `(x - median) / (1.4826 * MAD)`. Rejects
/// constant signals (MAD of zero).
pub fn normalize_med_mad(signal: &[f32]) -> Result<Vec<f32>> {
    if signal.is_empty() {
        return Err(Error::Sim("cannot normalize an empty signal".into()));
    }
    let mut sorted: Vec<f64> = signal.iter().map(|&v| v as f64).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = median(&sorted);
    let mut dev: Vec<f64> = signal.iter().map(|&v| (v as f64 - med).abs()).collect();
    dev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mad = median(&dev);
    if mad <= 0.0 {
        return Err(Error::Sim("constant signal: MAD is zero".into()));
    }
    let scale = 1.4826 * mad;
    Ok(signal
        .iter()
        .map(|&v| ((v as f64 - med) / scale) as f32)
        .collect())
}

/// Fixed-length window of normalized signal with its label sequence.
#[derive(Debug, Clone)]
pub struct Chunk {
    pub read_id: String,
    pub signal: Vec<f32>,
    /// Samples before tail padding.
    pub valid_len: usize,
    pub target: CtcTarget,
}

/// Chunked train/eval split. No read id appears in both sides.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Chunk>,
    pub eval: Vec<Chunk>,
    pub train_read_ids: Vec<String>,
    pub eval_read_ids: Vec<String>,
}

/// Window one read into equal-length chunks. A base labels the window
/// holding the strict majority of its dwell; an exact split goes to
/// the earlier window.
pub fn chunk_read(read: &Read, chunk_len: usize, overlap: usize) -> Result<Vec<Chunk>> {
    if overlap >= chunk_len {
        return Err(Error::Sim(format!(
            "overlap {overlap} must be smaller than chunk_len {chunk_len}"
        )));
    }
    let normalized = normalize_med_mad(&read.signal)?;
    let total = normalized.len();
    let stride = chunk_len - overlap;

    // dwell interval per base: [start, end)
    let n_bases = read.sequence.chars().count();
    let mut base_start = vec![usize::MAX; n_bases];
    let mut base_end = vec![0usize; n_bases];
    for (s, &b) in read.sample_to_base.iter().enumerate() {
        let b = b as usize;
        base_start[b] = base_start[b].min(s);
        base_end[b] = base_end[b].max(s + 1);
    }

    let labels: Vec<u8> = crate::ctc::bases_to_labels(&read.sequence)?;
    let mut chunks = Vec::new();
    let mut start = 0usize;
    while start < total {
        let end = (start + chunk_len).min(total);
        let valid_len = end - start;
        if valid_len <= overlap && start > 0 {
            break; // nothing new in this window
        }
        let mut target_labels = Vec::new();
        for b in 0..n_bases {
            let (bs, be) = (base_start[b], base_end[b]);
            if be <= start || bs >= end {
                continue;
            }
            let inside = be.min(end) - bs.max(start);
            let dwell = be - bs;
            let majority = 2 * inside > dwell || (2 * inside == dwell && bs >= start);
            if majority {
                target_labels.push(labels[b]);
            }
        }
        let target = CtcTarget::new(target_labels)?;
        if target.min_frames() <= valid_len {
            let mut signal = normalized[start..end].to_vec();
            signal.resize(chunk_len, 0.0);
            chunks.push(Chunk {
                read_id: read.id.clone(),
                signal,
                valid_len,
                target,
            });
        }
        if end == total {
            break;
        }
        start += stride;
    }
    Ok(chunks)
}

/// Chunk every read and split by read id, shuffling deterministically.
pub fn chunk_dataset(
    reads: &[Read],
    chunk_len: usize,
    overlap: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Sim(format!(
            "train fraction {train_fraction} outside [0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..reads.len()).collect();
    order.shuffle(&mut rng);
    let n_train = (train_fraction * reads.len() as f64).round() as usize;

    let mut ds = Dataset {
        train: Vec::new(),
        eval: Vec::new(),
        train_read_ids: Vec::new(),
        eval_read_ids: Vec::new(),
    };
    for (pos, &ri) in order.iter().enumerate() {
        let chunks = chunk_read(&reads[ri], chunk_len, overlap)?;
        if pos < n_train {
            ds.train_read_ids.push(reads[ri].id.clone());
            ds.train.extend(chunks);
        } else {
            ds.eval_read_ids.push(reads[ri].id.clone());
            ds.eval.extend(chunks);
        }
    }
    ds.train.shuffle(&mut rng);
    ds.eval.shuffle(&mut rng);
    ds.train_read_ids.sort();
    ds.eval_read_ids.sort();
    Ok(ds)
}

/// Everything needed to regenerate a dataset, stored in its manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub reads: usize,
    pub read_len: usize,
    pub k: usize,
    pub seed: u64,
    pub dwell_min: usize,
    pub dwell_max: usize,
    pub noise_sigma: f32,
    pub level_range: (f32, f32),
    pub min_gap_fraction: f32,
    pub chunk_len: usize,
    pub overlap: usize,
    pub train_fraction: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            reads: 200,
            read_len: 500,
            k: 3,
            seed: 1,
            dwell_min: 8,
            dwell_max: 12,
            noise_sigma: 1.5,
            level_range: (60.0, 120.0),
            min_gap_fraction: 0.0,
            chunk_len: 400,
            overlap: 0,
            train_fraction: 0.8,
        }
    }
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 step keeps per-read streams independent
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E3779B97F4A7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Simulate a full read set per the config.
pub fn simulate_reads(cfg: &SimConfig) -> Result<Vec<Read>> {
    let pore = PoreModel::new(
        cfg.k,
        derive_seed(cfg.seed, 0),
        cfg.level_range,
        cfg.min_gap_fraction,
    )?;
    (0..cfg.reads)
        .map(|i| {
            let genome = random_genome(cfg.read_len, derive_seed(cfg.seed, 1 + 2 * i as u64))?;
            simulate_read(
                &format!("read{i:05}"),
                &genome,
                &pore,
                (cfg.dwell_min, cfg.dwell_max),
                cfg.noise_sigma,
                derive_seed(cfg.seed, 2 + 2 * i as u64),
            )
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: SimConfig,
    pub train_read_ids: Vec<String>,
    pub eval_read_ids: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ReadLine {
    id: String,
    sequence: String,
    /// run-length encoding of sample_to_base: dwell count per base
    dwells: Vec<u32>,
}

/// On-disk layout: `reads.jsonl` (id, sequence, dwells), `signals.bin`
/// (length-prefixed little-endian f32 records, one per read, in
/// reads.jsonl order), `manifest.json`, and `reference.fasta`.
pub fn write_dataset(dir: &Path, reads: &[Read], manifest: &Manifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut jsonl = BufWriter::new(std::fs::File::create(dir.join("reads.jsonl"))?);
    let mut bin = BufWriter::new(std::fs::File::create(dir.join("signals.bin"))?);
    for read in reads {
        let mut dwells: Vec<u32> = Vec::new();
        let mut prev = u32::MAX;
        for &b in &read.sample_to_base {
            if b == prev {
                *dwells.last_mut().unwrap() += 1;
            } else {
                dwells.push(1);
                prev = b;
            }
        }
        let line = ReadLine {
            id: read.id.clone(),
            sequence: read.sequence.clone(),
            dwells,
        };
        serde_json::to_writer(&mut jsonl, &line)?;
        jsonl.write_all(b"\n")?;

        bin.write_all(&(read.signal.len() as u64).to_le_bytes())?;
        for &v in &read.signal {
            bin.write_all(&v.to_le_bytes())?;
        }
    }
    jsonl.flush()?;
    bin.flush()?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(manifest)?)?;
    write_fasta(
        &dir.join("reference.fasta"),
        reads.iter().map(|r| (r.id.as_str(), r.sequence.as_str())),
    )?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let bytes = std::fs::read(dir.join("manifest.json"))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn read_dataset(dir: &Path) -> Result<(Vec<Read>, Manifest)> {
    let manifest = read_manifest(dir)?;
    let jsonl = BufReader::new(std::fs::File::open(dir.join("reads.jsonl"))?);
    let mut bin = BufReader::new(std::fs::File::open(dir.join("signals.bin"))?);
    let mut reads = Vec::new();
    for line in jsonl.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rl: ReadLine = serde_json::from_str(&line)?;
        let mut len_buf = [0u8; 8];
        bin.read_exact(&mut len_buf)?;
        let n = u64::from_le_bytes(len_buf) as usize;
        let mut payload = vec![0u8; n * 4];
        bin.read_exact(&mut payload)?;
        let signal: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut sample_to_base = Vec::with_capacity(n);
        for (b, &d) in rl.dwells.iter().enumerate() {
            for _ in 0..d {
                sample_to_base.push(b as u32);
            }
        }
        if sample_to_base.len() != signal.len() {
            return Err(Error::Sim(format!(
                "read {}: dwell total {} != signal length {}",
                rl.id,
                sample_to_base.len(),
                signal.len()
            )));
        }
        reads.push(Read {
            id: rl.id,
            sequence: rl.sequence,
            signal,
            sample_to_base,
        });
    }
    Ok((reads, manifest))
}

pub fn write_fasta<'a>(
    path: &Path,
    records: impl Iterator<Item = (&'a str, &'a str)>,
) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for (id, seq) in records {
        writeln!(out, ">{id}")?;
        writeln!(out, "{seq}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_fasta(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    let mut id: Option<String> = None;
    let mut seq = String::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix('>') {
            if let Some(prev) = id.take() {
                records.push((prev, std::mem::take(&mut seq)));
            }
            id = Some(rest.trim().to_string());
        } else {
            seq.push_str(line.trim());
        }
    }
    if let Some(prev) = id {
        records.push((prev, seq));
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn genome_is_deterministic_and_rejects_zero() {
        assert!(random_genome(0, 1).is_err());
        assert_eq!(random_genome(4, 9).unwrap().len(), 4);
        assert_eq!(random_genome(64, 7).unwrap(), random_genome(64, 7).unwrap());
        assert_ne!(random_genome(64, 7).unwrap(), random_genome(64, 8).unwrap());
    }

    #[test]
    fn genome_base_frequencies_are_uniform() {
        let g = random_genome(1_000_000, 3).unwrap();
        for base in BASES {
            let count = g.chars().filter(|&c| c == base).count();
            let frac = count as f64 / 1e6;
            assert!((frac - 0.25).abs() <= 0.005, "{base}: {frac}");
        }
    }

    #[test]
    fn pore_levels_are_reproducible_and_separated() {
        let p1 = PoreModel::with_defaults(3, 5).unwrap();
        let p2 = PoreModel::with_defaults(3, 5).unwrap();
        assert_eq!(p1.levels, p2.levels);
        assert_eq!(p1.levels.len(), 64);
        let mut sorted = p1.levels.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let gap = p1.level_gap();
        for w in sorted.windows(2) {
            assert!(w[1] - w[0] >= gap - 1e-4);
        }
        // impossible separation request
        assert!(PoreModel::new(3, 5, (60.0, 120.0), 0.5).is_err());
    }

    #[test]
    fn noiseless_repeat_read_is_constant() {
        let pore = PoreModel::with_defaults(3, 1).unwrap();
        let read = simulate_read("r", "AAAAAA", &pore, (10, 10), 0.0, 2).unwrap();
        assert_eq!(read.signal.len(), 60);
        let level = read.signal[0];
        assert!(read.signal.iter().all(|&v| v == level));
    }

    #[test]
    fn signal_length_within_dwell_bounds() {
        let pore = PoreModel::with_defaults(3, 1).unwrap();
        for seed in 0..5 {
            let g = random_genome(40, seed).unwrap();
            let read = simulate_read("r", &g, &pore, (8, 12), 1.0, seed).unwrap();
            assert!(read.signal.len() >= 8 * 40 && read.signal.len() <= 12 * 40);
            assert_eq!(read.signal.len(), read.sample_to_base.len());
        }
    }

    #[test]
    fn empty_dwell_range_is_an_error() {
        let pore = PoreModel::with_defaults(3, 1).unwrap();
        assert!(simulate_read("r", "ACGTAC", &pore, (5, 4), 1.0, 1).is_err());
        assert!(simulate_read("r", "ACGTAC", &pore, (0, 0), 1.0, 1).is_err());
    }

    #[test]
    fn noise_sigma_matches_configuration() {
        let pore = PoreModel::with_defaults(3, 1).unwrap();
        let sigma = 1.5f64;
        let mut acc = 0.0f64;
        let mut count = 0usize;
        for i in 0..100 {
            let g = random_genome(60, 1000 + i).unwrap();
            let read = simulate_read("r", &g, &pore, (10, 10), sigma as f32, i).unwrap();
            // per-base segments have constant level: variance estimates noise
            for b in 0..60u32 {
                let seg: Vec<f64> = read
                    .signal
                    .iter()
                    .zip(&read.sample_to_base)
                    .filter(|(_, &sb)| sb == b)
                    .map(|(&v, _)| v as f64)
                    .collect();
                let mean = seg.iter().sum::<f64>() / seg.len() as f64;
                acc += seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                count += seg.len() - 1;
            }
        }
        let sigma_hat = (acc / count as f64).sqrt();
        assert!(
            (sigma_hat - sigma).abs() / sigma <= 0.10,
            "estimated sigma {sigma_hat} vs configured {sigma}"
        );
    }

    #[test]
    fn med_mad_hand_case() {
        // [1..5]: median 3, MAD 1
        let out = normalize_med_mad(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let want: Vec<f32> = [-2.0f32, -1.0, 0.0, 1.0, 2.0]
            .iter()
            .map(|v| v / 1.4826)
            .collect();
        for (o, w) in out.iter().zip(&want) {
            assert!((o - w).abs() <= 1e-5);
        }
    }

    #[test]
    fn med_mad_median_zero_and_scale_invariance() {
        let sig: Vec<f32> = (0..101).map(|i| ((i * 37) % 101) as f32).collect();
        let out = normalize_med_mad(&sig).unwrap();
        let mut sorted = out.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(sorted[50], 0.0);

        let scaled: Vec<f32> = sig.iter().map(|v| 3.5 * v + 11.0).collect();
        let out2 = normalize_med_mad(&scaled).unwrap();
        for (a, b) in out.iter().zip(&out2) {
            assert!((a - b).abs() <= 1e-5);
        }

        // idempotence up to tolerance
        let out3 = normalize_med_mad(&out).unwrap();
        let out4 = normalize_med_mad(&out3).unwrap();
        for (a, b) in out3.iter().zip(&out4) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn constant_signal_is_rejected() {
        assert!(normalize_med_mad(&[2.0; 10]).is_err());
    }

    #[test]
    fn chunk_labels_reconstruct_read() {
        let pore = PoreModel::with_defaults(3, 1).unwrap();
        for seed in 0..5 {
            let g = random_genome(80, 50 + seed).unwrap();
            let read = simulate_read("r", &g, &pore, (8, 12), 1.0, seed).unwrap();
            let chunks = chunk_read(&read, 100, 0).unwrap();
            let mut rebuilt = Vec::new();
            for c in &chunks {
                rebuilt.extend_from_slice(c.target.labels());
            }
            assert_eq!(crate::ctc::labels_to_bases(&rebuilt), g);
        }
    }

    #[test]
    fn chunk_count_for_exact_multiple() {
        let pore = PoreModel::with_defaults(3, 1).unwrap();
        let read = simulate_read("r", &random_genome(50, 3).unwrap(), &pore, (10, 10), 1.0, 1)
            .unwrap();
        assert_eq!(read.signal.len(), 500);
        let chunks = chunk_read(&read, 250, 0).unwrap();
        assert_eq!(chunks.len(), 2);
        assert!(chunks.iter().all(|c| c.valid_len == 250));
        assert!(chunks.iter().all(|c| c.signal.len() == 250));
    }

    #[test]
    fn split_is_disjoint_and_sized() {
        let cfg = SimConfig {
            reads: 10,
            read_len: 60,
            ..Default::default()
        };
        let reads = simulate_reads(&cfg).unwrap();
        let ds = chunk_dataset(&reads, 120, 0, 0.8, 7).unwrap();
        assert_eq!(ds.train_read_ids.len(), 8);
        assert_eq!(ds.eval_read_ids.len(), 2);
        for id in &ds.eval_read_ids {
            assert!(!ds.train_read_ids.contains(id));
        }
    }

    #[test]
    fn dataset_is_fully_deterministic() {
        let cfg = SimConfig {
            reads: 4,
            read_len: 50,
            ..Default::default()
        };
        let r1 = simulate_reads(&cfg).unwrap();
        let r2 = simulate_reads(&cfg).unwrap();
        for (a, b) in r1.iter().zip(&r2) {
            assert_eq!(a.sequence, b.sequence);
            assert_eq!(a.signal, b.signal);
        }
        let d1 = chunk_dataset(&r1, 100, 0, 0.5, 3).unwrap();
        let d2 = chunk_dataset(&r2, 100, 0, 0.5, 3).unwrap();
        assert_eq!(d1.train.len(), d2.train.len());
        for (a, b) in d1.train.iter().zip(&d2.train) {
            assert_eq!(a.signal, b.signal);
            assert_eq!(a.target, b.target);
        }
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SimConfig {
            reads: 3,
            read_len: 40,
            ..Default::default()
        };
        let reads = simulate_reads(&cfg).unwrap();
        let manifest = Manifest {
            config: cfg,
            train_read_ids: vec!["read00000".into(), "read00001".into()],
            eval_read_ids: vec!["read00002".into()],
        };
        write_dataset(dir.path(), &reads, &manifest).unwrap();
        let (back, m2) = read_dataset(dir.path()).unwrap();
        assert_eq!(m2.train_read_ids, manifest.train_read_ids);
        assert_eq!(back.len(), reads.len());
        for (a, b) in reads.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.sequence, b.sequence);
            assert_eq!(a.signal, b.signal);
            assert_eq!(a.sample_to_base, b.sample_to_base);
        }
        let fasta = read_fasta(&dir.path().join("reference.fasta")).unwrap();
        assert_eq!(fasta.len(), 3);
        assert_eq!(fasta[0].1, reads[0].sequence);
    }
}
