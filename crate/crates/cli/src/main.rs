//! `cobra` — command-line front end.
//!
//! Exit codes: 0 success, 1 invalid input or usage, 2 I/O failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cobra_core::engine::{benchmark, benchmark_passes, logical_cores};
use cobra_core::graph::{self, Model, Pass};
use cobra_core::metrics::{evaluate, DEFAULT_NSD_TOLERANCE_MM};
use cobra_core::model::{self, ArchConfig, PUBLISHED_GFLOPS, PUBLISHED_PARAMS};
use cobra_core::phantom::Phantom;
use cobra_core::pipeline::{self, network_shape};
use cobra_core::preprocess::ORGAN_CLASSES;
use cobra_core::volume_io::{read_labels, read_volume, write_labels};
use cobra_core::{Error, Result};

/// Published size of the serialized model, bytes.
const PUBLISHED_MODEL_BYTES: f64 = 1.7e6;

#[derive(Parser)]
#[command(name = "cobra", version, about = "CPU-only abdominal organ segmentation")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Resample and window a scan; optionally build training targets
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Network grid, DxHxW
        #[arg(long, default_value = "96x192x192", value_parser = parse_shape)]
        shape: [usize; 3],
    },
    /// Build the network graph and write a model file
    BuildModel {
        /// Architecture file (key = value); defaults to the reference config
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// He-normal weights with zero biases (requires --seed)
        #[arg(long, requires = "seed", conflicts_with = "weights")]
        random_weights: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Weight file (.cbr weight container) with trained weights
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Override the configured input grid, DxHxW
        #[arg(long, value_parser = parse_shape)]
        input_shape: Option<[usize; 3]>,
        /// Build with cubic kernels instead of factorized ones
        #[arg(long)]
        no_factorize: bool,
    },
    /// Apply graph rewrites (fold, eliminate, fuse) until nothing changes
    Optimize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "fold,eliminate,fuse", value_delimiter = ',')]
        passes: Vec<Pass>,
    },
    /// Segment a CT scan
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        threads: Threads,
    },
    /// Time the network and the whole pipeline
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[command(flatten)]
        threads: Threads,
        /// Write the report as JSON
        #[arg(long)]
        report: Option<PathBuf>,
        /// Scan for end-to-end timing; a synthetic phantom is used otherwise
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Phantom grid when no scan is given, DxHxW
        #[arg(long, default_value = "147x512x512", value_parser = parse_shape)]
        phantom_shape: [usize; 3],
        /// Skip the end-to-end measurement
        #[arg(long)]
        network_only: bool,
        /// Skip timing the model before and after the graph passes
        #[arg(long)]
        no_pass_delta: bool,
    },
    /// Per-class DSC and NSD of a segmentation against a reference
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, default_value = "1,2,3,4", value_delimiter = ',')]
        classes: Vec<u8>,
        /// NSD tolerance in mm
        #[arg(long, default_value_t = DEFAULT_NSD_TOLERANCE_MM)]
        nsd_tol: f64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Parameter count, FLOPs and serialized size of a model
    Analyze {
        #[arg(long)]
        model: PathBuf,
        /// Grid for the FLOP count, DxHxW; defaults to the model's own
        #[arg(long, value_parser = parse_shape)]
        input_shape: Option<[usize; 3]>,
    },
}

#[derive(Args)]
struct Threads {
    /// Worker threads (default: COBRA_THREADS, else all logical cores)
    #[arg(long = "threads", env = "COBRA_THREADS")]
    count: Option<usize>,
}

impl Threads {
    fn get(&self) -> Result<usize> {
        match self.count {
            Some(0) => Err(Error::Invalid("--threads must be >= 1".into())),
            Some(n) => Ok(n),
            None => Ok(logical_cores()),
        }
    }
}

fn parse_shape(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(['x', 'X', ',']).collect();
    let v: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| format!("`{s}` is not a DxHxW shape"))?;
    match v[..] {
        [d, h, w] if d > 0 && h > 0 && w > 0 => Ok([d, h, w]),
        _ => Err(format!("`{s}` is not a DxHxW shape")),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.exists() => Err(Error::io(
            p,
            std::io::Error::new(std::io::ErrorKind::NotFound, "directory does not exist"),
        )),
        _ => Ok(()),
    }
}

fn percent(ours: f64, theirs: f64) -> String {
    format!("{:+.1}%", 100.0 * (ours / theirs - 1.0))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Preprocess {
            input,
            labels,
            out_dir,
            shape,
        } => {
            let ct = read_volume(&input)?;
            let lv = labels.map(|p| read_labels(p, ORGAN_CLASSES)).transpose()?;
            let case = pipeline::prepare_case(&ct, lv.as_ref(), shape)?;
            case.write(&out_dir)?;
            println!(
                "{:?} -> {:?}, written to {}",
                ct.shape(),
                shape,
                out_dir.display()
            );
        }
        Command::BuildModel {
            config,
            out,
            random_weights,
            seed,
            weights,
            input_shape,
            no_factorize,
        } => {
            let mut cfg = match config {
                Some(p) => ArchConfig::load(p)?,
                None => ArchConfig::reference(),
            };
            if let Some(s) = input_shape {
                cfg.input_shape = s;
            }
            if no_factorize {
                cfg.factorize = false;
            }
            let g = model::build_cobra(&cfg)?;
            let ws = match (random_weights, seed, weights) {
                (true, Some(seed), None) => model::init_weights(&g, seed)?,
                (false, _, Some(p)) => graph::read_weight_file(p)?,
                _ => {
                    return Err(Error::Invalid(
                        "choose --random-weights --seed N or --weights FILE".into(),
                    ))
                }
            };
            let m = Model::new(g, ws)?;
            ensure_parent(&out)?;
            graph::serialize(&m, &out)?;
            println!(
                "{} nodes, {} parameters, written to {}",
                m.graph.node_count(),
                model::count_params(&m.graph),
                out.display()
            );
        }
        Command::Optimize { input, out, passes } => {
            let m = graph::deserialize(&input)?;
            let (opt, report) = graph::optimize(&m, &passes)?;
            ensure_parent(&out)?;
            graph::serialize(&opt, &out)?;
            let names: Vec<String> = passes.iter().map(Pass::to_string).collect();
            println!(
                "passes {}: {} -> {} nodes in {} round(s)",
                names.join(","),
                report.nodes_before,
                report.nodes_after,
                report.iterations
            );
        }
        Command::Infer {
            model,
            input,
            out,
            threads,
        } => {
            let threads = threads.get()?;
            let m = graph::deserialize(&model)?;
            let ct = read_volume(&input)?;
            ensure_parent(&out)?;
            let seg = pipeline::infer(&m, &ct, threads)?;
            write_labels(&seg, &out)?;
            println!("segmented {:?} with {threads} thread(s) -> {}", ct.shape(), out.display());
        }
        Command::Bench {
            model,
            runs,
            threads,
            report,
            input,
            phantom_shape,
            network_only,
            no_pass_delta,
        } => {
            let threads = threads.get()?;
            let m = graph::deserialize(&model)?;
            let mut rep = if network_only {
                benchmark(&m, runs, threads, None)?
            } else {
                let ct = match input {
                    Some(p) => read_volume(p)?,
                    None => Phantom::new(phantom_shape, [2.5, 0.8, 0.8])?.ct,
                };
                pipeline::benchmark_pipeline(&m, &ct, runs, threads)?
            };
            if !no_pass_delta {
                rep.optimization = benchmark_passes(&m, &Pass::ALL, runs, threads, None)?;
            }
            println!(
                "network: median {:.3} s (min {:.3}, max {:.3}) over {} runs, {} thread(s), {} logical cores",
                rep.network.median,
                rep.network.min,
                rep.network.max,
                rep.network.samples.len(),
                rep.threads,
                rep.logical_cores
            );
            if let Some(e) = &rep.end_to_end {
                println!("end-to-end: median {:.3} s (min {:.3}, max {:.3})", e.median, e.min, e.max);
            }
            println!(
                "planned memory {:.1} MiB (unplanned {:.1} MiB); published reference ~1.6 s per scan",
                rep.peak_memory_bytes as f64 / 1048576.0,
                rep.unplanned_memory_bytes as f64 / 1048576.0
            );
            match &rep.optimization {
                Some(d) => println!(
                    "graph passes: {} -> {} nodes, network median {:.3} s -> {:.3} s ({:.2}x)",
                    d.nodes_before, d.nodes_after, d.median_before, d.median_after, d.speedup
                ),
                None if !no_pass_delta => println!("graph passes: model already at fixpoint, no delta to report"),
                None => {}
            }
            if let Some(p) = report {
                write_text(&p, &serde_json::to_string_pretty(&rep).expect("report serializes"))?;
            }
        }
        Command::Evaluate {
            pred,
            gold,
            classes,
            nsd_tol,
            report,
        } => {
            let p = read_labels(&pred, ORGAN_CLASSES)?;
            let g = read_labels(&gold, ORGAN_CLASSES)?;
            let scores = evaluate(&p, &g, &classes, nsd_tol)?;
            println!("{:<6} {:<12} {:>8} {:>8}", "class", "name", "DSC", "NSD");
            for s in &scores {
                println!("{:<6} {:<12} {:>8.4} {:>8.4}", s.class, s.name, s.dsc, s.nsd);
            }
            if let Some(r) = report {
                write_text(&r, &serde_json::to_string_pretty(&scores).expect("scores serialize"))?;
            }
        }
        Command::Analyze { model, input_shape } => {
            let mut m = graph::deserialize(&model)?;
            let bytes = graph::serialize_bytes(&m)?.len();
            if let Some([d, h, w]) = input_shape {
                let port = m
                    .graph
                    .inputs
                    .first_mut()
                    .ok_or_else(|| Error::Invalid("model has no inputs".into()))?;
                let c = port.dims[0];
                port.dims = vec![c, d, h, w];
            }
            let params = model::count_params(&m.graph);
            let flops = model::count_flops(&m.graph)?;
            let shape = network_shape(&m).map(|s| format!("{s:?}")).unwrap_or_else(|_| "?".into());
            println!(
                "parameters: {params} (published {PUBLISHED_PARAMS}, {})",
                percent(params as f64, PUBLISHED_PARAMS as f64)
            );
            println!(
                "flops: {flops} ({:.2} GFLOPs at {shape}; published {PUBLISHED_GFLOPS} GFLOPs, {}; 2 FLOPs per multiply-add)",
                flops as f64 / 1e9,
                percent(flops as f64 / 1e9, PUBLISHED_GFLOPS)
            );
            println!(
                "serialized bytes: {bytes} ({:.2} MB; published 1.7 MB, {})",
                bytes as f64 / 1e6,
                percent(bytes as f64, PUBLISHED_MODEL_BYTES)
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            log::debug!("{e:?}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
