//! `rubicon`: simulate squiggle data, search basecaller architectures,
//! distill away skip connections, prune, basecall, and evaluate — each
//! stage a subcommand reading and writing ordinary files.

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rubicon_core::checkpoint::{load_checkpoint, save_checkpoint, TrainMeta};
use rubicon_core::config::PipelineConfig;
use rubicon_core::net::{BlockConfig, Model, ModelConfig};
use rubicon_core::prune::{self, PruneMethod};
use rubicon_core::quant::QuantSpec;
use rubicon_core::{eval, qabas, sim, skipclip, train};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "rubicon", version, about)]
struct Cli {
    /// Pipeline config (JSON); omitted sections use defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the seed of the stage being run.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Element,
    Channel,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic squiggle dataset directory.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        /// Number of reads.
        #[arg(long)]
        reads: Option<usize>,
        /// Bases per read.
        #[arg(long)]
        read_len: Option<usize>,
        #[arg(long)]
        chunk_len: Option<usize>,
        #[arg(long)]
        noise_sigma: Option<f32>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train a basecaller on a dataset's training split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Architecture file (JSON); defaults to the built-in 4-block
        /// toy network.
        #[arg(long)]
        arch: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Cap on training chunks.
        #[arg(long)]
        chunks: Option<usize>,
    },
    /// Run the architecture search and emit the chosen config.
    Search {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Trajectory CSV path.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        target_latency: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        chunks: Option<usize>,
    },
    /// Remove the student's skip connections under distillation.
    Skipclip {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// Student architecture (JSON) trained from scratch.
        #[arg(long)]
        arch: Option<PathBuf>,
        /// Or continue from a student checkpoint.
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        skip_stride: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// One-shot magnitude pruning with fine-tuning.
    Prune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sparsity: Option<f64>,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        /// Run the whole sparsity sweep and write its CSV here.
        #[arg(long)]
        sweep: Option<PathBuf>,
    },
    /// Basecall reads to FASTA and print throughput.
    Basecall {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        #[arg(long)]
        chunk_len: Option<usize>,
    },
    /// Align called reads against their truths and summarize identity.
    Evaluate {
        #[arg(long)]
        calls: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Per-read CSV output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer size/BOPs/latency report for a checkpoint.
    Report {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        chunk_len: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Built-in 4-block toy basecaller with the {16, 32, 48, 64} channel
/// progression.
fn default_arch() -> ModelConfig {
    ModelConfig {
        stem: BlockConfig::new(9, 16, QuantSpec::FLOAT),
        stem_stride: 1,
        blocks: vec![
            BlockConfig::new(9, 16, QuantSpec::FLOAT).with_skip(),
            BlockConfig::new(9, 32, QuantSpec::FLOAT).with_skip(),
            BlockConfig::new(11, 48, QuantSpec::FLOAT),
            BlockConfig::new(11, 64, QuantSpec::FLOAT),
        ],
        head_quant: QuantSpec::FLOAT,
        input_features: 1,
    }
}

fn worker_threads() -> usize {
    std::env::var("RUBI_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn load_pipeline(cli_config: &Option<PathBuf>) -> anyhow::Result<PipelineConfig> {
    match cli_config {
        Some(path) => PipelineConfig::load(path)
            .with_context(|| format!("loading config {}", path.display())),
        None => Ok(PipelineConfig::default()),
    }
}

fn load_arch(path: &Path) -> anyhow::Result<ModelConfig> {
    ModelConfig::from_json(&std::fs::read_to_string(path)?)
        .with_context(|| format!("loading architecture {}", path.display()))
}

struct LoadedData {
    reads: Vec<sim::Read>,
    manifest: sim::Manifest,
}

fn load_data(dir: &Path) -> anyhow::Result<LoadedData> {
    let (reads, manifest) =
        sim::read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    Ok(LoadedData { reads, manifest })
}

fn chunked(
    data: &LoadedData,
    chunks_cap: Option<usize>,
) -> anyhow::Result<sim::Dataset> {
    let m = &data.manifest.config;
    let mut ds = sim::chunk_dataset(
        &data.reads,
        m.chunk_len,
        m.overlap,
        m.train_fraction,
        m.seed,
    )?;
    if let Some(cap) = chunks_cap {
        ds.train.truncate(cap);
        ds.eval.truncate(cap);
    }
    Ok(ds)
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let mut pipeline = load_pipeline(&cli.config)?;

    match cli.command {
        Command::Simulate {
            out,
            reads,
            read_len,
            chunk_len,
            noise_sigma,
            k,
        } => {
            let cfg = &mut pipeline.simulate;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(v) = reads {
                cfg.reads = v;
            }
            if let Some(v) = read_len {
                cfg.read_len = v;
            }
            if let Some(v) = chunk_len {
                cfg.chunk_len = v;
            }
            if let Some(v) = noise_sigma {
                cfg.noise_sigma = v;
            }
            if let Some(v) = k {
                cfg.k = v;
            }
            let reads = sim::simulate_reads(cfg)?;
            let split = sim::chunk_dataset(
                &reads,
                cfg.chunk_len,
                cfg.overlap,
                cfg.train_fraction,
                cfg.seed,
            )?;
            let manifest = sim::Manifest {
                config: cfg.clone(),
                train_read_ids: split.train_read_ids,
                eval_read_ids: split.eval_read_ids,
            };
            sim::write_dataset(&out, &reads, &manifest)?;
            let samples: usize = reads.iter().map(|r| r.signal.len()).sum();
            println!(
                "simulated {} reads ({} samples) into {}",
                reads.len(),
                samples,
                out.display()
            );
        }

        Command::Train {
            data,
            out,
            arch,
            epochs,
            chunks,
        } => {
            let data = load_data(&data)?;
            let ds = chunked(&data, chunks)?;
            let arch = match arch {
                Some(p) => load_arch(&p)?,
                None => default_arch(),
            };
            let mut tc = pipeline.train;
            if let Some(s) = cli.seed {
                tc.seed = s;
            }
            if let Some(e) = epochs {
                tc.epochs = e;
            }
            let mut model = Model::build(&arch, tc.seed)?;
            let stats = train::train_ctc(
                &mut model,
                &ds.train,
                &tc,
                |_| {},
                |s, _| println!("epoch {:>3}  train loss {:.4}", s.epoch, s.train_loss),
            )?;
            let meta = TrainMeta {
                seed: tc.seed,
                epoch: tc.epochs,
                losses: stats.iter().map(|s| s.train_loss).collect(),
                stage: "train".into(),
            };
            save_checkpoint(&out, &mut model, &meta)?;
            println!("saved checkpoint {}", out.display());
        }

        Command::Search {
            data,
            out,
            log,
            lambda,
            target_latency,
            epochs,
            chunks,
        } => {
            let data = load_data(&data)?;
            let ds = chunked(&data, chunks)?;
            let section = &mut pipeline.search;
            if let Some(v) = lambda {
                section.config.lambda = v;
            }
            if let Some(v) = target_latency {
                section.config.target_latency = v;
            }
            if let Some(v) = epochs {
                section.config.epochs = v;
            }
            if let Some(s) = cli.seed {
                section.config.seed = s;
            }
            // per-sample latency units: table profiled at unit length
            let table = qabas::default_latency_table(&section.space, 1);
            let mut supernet =
                qabas::build_supernet::<f32>(&section.space, &table, section.config.seed)?;
            let outcome = qabas::search(
                &mut supernet,
                &ds.train,
                &ds.eval,
                &section.config,
                section.derive_with_skips,
            )?;
            std::fs::write(&out, outcome.config.to_json()?)?;
            if let Some(log) = log {
                std::fs::write(&log, &outcome.log_csv)?;
            }
            let lat = qabas::arch_latency(&outcome.config, &table, 1)?;
            println!(
                "derived architecture: {} blocks, latency {:.3}/sample -> {}",
                outcome.config.blocks.len(),
                lat,
                out.display()
            );
        }

        Command::Skipclip {
            data,
            teacher,
            arch,
            student,
            out,
            log,
            skip_stride,
            alpha,
            tau,
            epochs,
        } => {
            let data = load_data(&data)?;
            let ds = chunked(&data, None)?;
            let (teacher_model, _) = load_checkpoint(&teacher)?;
            let student_model = match (&arch, &student) {
                (Some(p), None) => Model::build(&load_arch(p)?, pipeline.skipclip.train.seed)?,
                (None, Some(p)) => load_checkpoint(p)?.0,
                _ => bail!("skipclip needs exactly one of --arch or --student"),
            };
            let mut kd = pipeline.skipclip.kd;
            let mut tc = pipeline.skipclip.train;
            if let Some(v) = skip_stride {
                kd.skip_stride = v;
            }
            if let Some(v) = alpha {
                kd.alpha = v;
            }
            if let Some(v) = tau {
                kd.tau = v;
            }
            if let Some(v) = epochs {
                kd.epochs_total = v;
            }
            if let Some(s) = cli.seed {
                tc.seed = s;
            }
            let eval_reads: Vec<sim::Read> = data
                .reads
                .iter()
                .filter(|r| data.manifest.eval_read_ids.contains(&r.id))
                .cloned()
                .collect();
            let chunk_len = data.manifest.config.chunk_len;
            let (mut student_out, trajectory) = skipclip::skipclip_train(
                skipclip::DistillPair::new(teacher_model, student_model),
                &ds.train,
                &eval_reads,
                chunk_len,
                &kd,
                &tc,
            )?;
            for row in &trajectory {
                println!(
                    "epoch {:>3}  skips {}  loss {:.4}  identity {}",
                    row.epoch,
                    row.skips_remaining,
                    row.train_loss,
                    row.val_identity
                        .map(|v| format!("{v:.4}"))
                        .unwrap_or_else(|| "-".into())
                );
            }
            if let Some(log) = log {
                std::fs::write(&log, skipclip::trajectory_csv(&trajectory))?;
            }
            let meta = TrainMeta {
                seed: tc.seed,
                epoch: kd.epochs_total,
                losses: trajectory.iter().map(|r| r.train_loss).collect(),
                stage: "skipclip".into(),
            };
            save_checkpoint(&out, &mut student_out, &meta)?;
            println!("saved skip-free checkpoint {}", out.display());
        }

        Command::Prune {
            ckpt,
            data,
            out,
            sparsity,
            method,
            sweep,
        } => {
            let data = load_data(&data)?;
            let ds = chunked(&data, None)?;
            let (mut model, meta) = load_checkpoint(&ckpt)?;
            let mut pc = pipeline.prune;
            if let Some(v) = sparsity {
                pc.sparsity = v;
            }
            if let Some(m) = method {
                pc.method = match m {
                    MethodArg::Element => PruneMethod::Element,
                    MethodArg::Channel => PruneMethod::Channel,
                };
            }
            let mut tc = pipeline.train;
            tc.epochs = pc.fine_tune_epochs;
            if let Some(s) = cli.seed {
                tc.seed = s;
            }
            let eval_reads: Vec<sim::Read> = data
                .reads
                .iter()
                .filter(|r| data.manifest.eval_read_ids.contains(&r.id))
                .cloned()
                .collect();
            let chunk_len = data.manifest.config.chunk_len;

            if let Some(sweep_path) = sweep {
                let points = prune::sparsity_sweep(
                    &model,
                    &pc.sweep,
                    &ds.train,
                    &eval_reads,
                    chunk_len,
                    &tc,
                )?;
                std::fs::write(&sweep_path, prune::sweep_csv(&points))?;
                for p in &points {
                    println!(
                        "sparsity {:.2}  identity {:.4}  nonzero {:.0} B",
                        p.sparsity, p.identity, p.nonzero_bytes
                    );
                }
                return Ok(());
            }

            let mut pruned = match pc.method {
                PruneMethod::Element => {
                    let mask = prune::prune_unstructured(&mut model, pc.sparsity)?;
                    prune::fine_tune(&mut model, Some(&mask), &ds.train, &tc)?;
                    model
                }
                PruneMethod::Channel => {
                    let mut compact = prune::prune_structured_channels(&model, pc.sparsity)?;
                    prune::fine_tune(&mut compact, None, &ds.train, &tc)?;
                    compact
                }
            };
            let (nonzero, dense) = prune::weight_storage(&mut pruned);
            println!(
                "sparsity {:.4}  nonzero storage {:.0} B (dense {:.0} B)",
                prune::sparsity(&mut pruned),
                nonzero,
                dense
            );
            let meta = TrainMeta {
                stage: "prune".into(),
                ..meta
            };
            save_checkpoint(&out, &mut pruned, &meta)?;
            println!("saved pruned checkpoint {}", out.display());
        }

        Command::Basecall {
            ckpt,
            data,
            out,
            split,
            chunk_len,
        } => {
            let started = Instant::now();
            let data = load_data(&data)?;
            let (model, _) = load_checkpoint(&ckpt)?;
            let chunk_len = chunk_len.unwrap_or(data.manifest.config.chunk_len);
            let selected: Vec<sim::Read> = data
                .reads
                .iter()
                .filter(|r| match split {
                    SplitArg::All => true,
                    SplitArg::Train => data.manifest.train_read_ids.contains(&r.id),
                    SplitArg::Eval => data.manifest.eval_read_ids.contains(&r.id),
                })
                .cloned()
                .collect();
            let calls = train::basecall_reads(&model, &selected, chunk_len, worker_threads())?;
            sim::write_fasta(&out, calls.iter().map(|(id, seq)| (id.as_str(), seq.as_str())))?;
            let bases: usize = calls.iter().map(|(_, s)| s.len()).sum();
            let secs = started.elapsed().as_secs_f64();
            println!(
                "basecalled {} reads, {} bases -> {}",
                calls.len(),
                bases,
                out.display()
            );
            println!("throughput: {:.2} kbp/s", eval::throughput_kbps(bases, secs));
        }

        Command::Evaluate { calls, truth, out } => {
            let calls = sim::read_fasta(&calls)?;
            let truths = sim::read_fasta(&truth)?;
            let truth_map: std::collections::BTreeMap<&str, &str> = truths
                .iter()
                .map(|(id, seq)| (id.as_str(), seq.as_str()))
                .collect();
            let mut rows = Vec::new();
            let mut identities = Vec::new();
            for (id, call) in &calls {
                let Some(truth_seq) = truth_map.get(id.as_str()) else {
                    bail!("no truth sequence for read {id}");
                };
                if call.is_empty() {
                    identities.push(0.0);
                    rows.push((id.clone(), 0.0));
                    continue;
                }
                let r = eval::align_identity(call, truth_seq)?;
                identities.push(r.identity);
                rows.push((id.clone(), r.identity));
            }
            let summary = eval::summarize(&identities)?;
            println!(
                "identity over {} reads: mean {:.4}  median {:.4}  min {:.4}  max {:.4}  p25 {:.4}  p75 {:.4}",
                summary.count, summary.mean, summary.median, summary.min, summary.max,
                summary.p25, summary.p75
            );
            if let Some(out) = out {
                let mut csv = String::from("read,identity\n");
                for (id, ident) in rows {
                    csv.push_str(&format!("{id},{ident}\n"));
                }
                std::fs::write(&out, csv)?;
            }
        }

        Command::Report { ckpt, chunk_len, out } => {
            let (model, meta) = load_checkpoint(&ckpt)?;
            let chunk_len = chunk_len.unwrap_or(400);
            let layers = model.per_layer_costs(chunk_len);
            let latencies: Vec<f64> = layers.iter().map(qabas::op_latency).collect();
            let report = eval::ModelReport::new(&layers, &latencies)?;
            println!(
                "stage {}  seed {}  epochs {}",
                meta.stage, meta.seed, meta.epoch
            );
            print!("{}", report.to_text());
            if let Some(out) = out {
                std::fs::write(&out, report.to_csv())?;
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
