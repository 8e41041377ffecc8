use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ccnn::arch::{build_network, Network, NetworkSpec, FINAL_HEAD, MID_A, MID_B};
use ccnn::cascade::{cascade_eval, head_eval, stats_table, trace_csv, CascadePolicy};
use ccnn::cost::{group, network_cost};
use ccnn::data::{DataSource, Dataset};
use ccnn::model_file::{load_model, save_model, ModelFile};
use ccnn::quant::{quantized_storage, QuantScheme, StoredTensor};
use ccnn::train::{train, TrainConfig, TrainStrategy};
use ccnn::error::read_file;
use ccnn::{Error, Result};

#[derive(Parser)]
#[command(name = "ccnn", version, about = "Fire-module CNN: cost model, training, cascaded inference, quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer parameters and MACs, exit totals and storage.
    CostReport {
        /// JSON network spec, or `default` (cascaded) / `baseline`.
        #[arg(long, default_value = "default")]
        spec: String,
        /// Class count for the built-in specs.
        #[arg(long, default_value_t = 3755)]
        classes: usize,
        /// Channel divisor for the built-in specs.
        #[arg(long, default_value_t = 1)]
        width_divisor: usize,
        /// Storage under a quantization scheme, e.g. `conv=8,fc=4`.
        #[arg(long)]
        quant: Option<String>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Trains a network and writes a model file.
    Train {
        /// `synth:KxN[:SEED]`, a directory with an IDX pair, or a .gnt file.
        #[arg(long)]
        data: String,
        #[arg(long, default_value = "separate")]
        strategy: TrainStrategy,
        /// TOML training config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// JSON network spec, or `default` (cascaded) / `baseline` sized to the data.
        #[arg(long, default_value = "default")]
        spec: String,
        #[arg(long, default_value_t = 1)]
        width_divisor: usize,
        /// Fraction held out for per-epoch evaluation.
        #[arg(long, default_value_t = 0.2)]
        holdout: f64,
        /// Overrides the config's seed (also seeds initialization).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Per-epoch metrics CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Standalone accuracy of each head.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long)]
        head: Option<String>,
    },
    /// Early-exit evaluation over one or more thresholds.
    Cascade {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: String,
        /// Comma-separated thresholds.
        #[arg(long, default_value = "0.98")]
        threshold: String,
        #[arg(long)]
        no_fuse: bool,
        #[arg(long, default_value = "mid-a")]
        exit_head: String,
        /// Per-sample CSV for the first threshold.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Writes a quantized copy of a model.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "conv=8,fc=4,gwap=8")]
        bits: String,
    },
    /// Prints a model's spec, parameter counts and encodings.
    Inspect {
        #[arg(long)]
        model: PathBuf,
    },
}

fn head_name(s: &str) -> Result<&'static str> {
    match s.to_ascii_lowercase().replace('_', "-").as_str() {
        "mid-a" | "mida" => Ok(MID_A),
        "mid-b" | "midb" => Ok(MID_B),
        "final" => Ok(FINAL_HEAD),
        _ => Err(Error::Usage(format!("unknown head {s:?} (mid-a|mid-b|final)"))),
    }
}

fn read_spec(path: &Path) -> Result<NetworkSpec> {
    let spec: NetworkSpec = serde_json::from_slice(&read_file(path)?)?;
    spec.validate()?;
    Ok(spec)
}

fn load_data(source: &str, size: usize) -> Result<Dataset> {
    DataSource::parse(source)?.load(size)
}

fn load_network(path: &Path) -> Result<Network<f32>> {
    load_model(path)?.to_network()
}

fn check_classes(net: &Network<f32>, data: &Dataset) -> Result<()> {
    if data.num_classes() > net.spec().num_classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, model {}",
            data.num_classes(),
            net.spec().num_classes
        )));
    }
    Ok(())
}

/// `println!` that exits quietly when stdout is closed (e.g. piped into `head`).
macro_rules! out {
    ($($arg:tt)*) => {
        if let Err(e) = writeln!(std::io::stdout().lock(), $($arg)*) {
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                std::process::exit(0);
            }
            return Err(e.into());
        }
    };
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::CostReport { spec, classes, width_divisor, quant, format } => {
            let spec = match spec.as_str() {
                "default" | "cascaded" => NetworkSpec::hccr(classes, width_divisor, true)?,
                "baseline" => NetworkSpec::hccr(classes, width_divisor, false)?,
                path => read_spec(Path::new(path))?,
            };
            let scheme = match quant {
                Some(q) => QuantScheme::parse(&q)?,
                None => QuantScheme::float32(),
            };
            let report = network_cost(&spec, Some(&scheme))?;
            match format {
                Format::Table => out!("{}", report.to_table().trim_end_matches('\n')),
                Format::Csv => out!("{}", report.to_csv().trim_end_matches('\n')),
            }
        }
        Command::Train { data, strategy, config, out, spec, width_divisor, holdout, seed, epochs, metrics } => {
            let mut cfg = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.max_epochs = e;
            }
            cfg.validate()?;
            let source = DataSource::parse(&data)?;
            let spec = match spec.as_str() {
                "default" | "cascaded" | "baseline" => {
                    let ds = source.load(64)?;
                    NetworkSpec::hccr(ds.num_classes(), width_divisor, spec != "baseline")?
                }
                path => read_spec(Path::new(path))?,
            };
            let dataset = source.load(spec.input_size)?;
            let (train_set, held) = dataset.split(holdout, cfg.seed)?;
            let mut net = build_network(&spec, cfg.seed)?;
            check_classes(&net, &dataset)?;
            let report = train(&mut net, &train_set, (!held.is_empty()).then_some(&held), &cfg, strategy)?;
            for m in &report.metrics {
                eprintln!("epoch {:>3} {:<6} loss {:.4} acc {:.4} lr {}", m.epoch, m.head, m.loss, m.accuracy, m.lr);
            }
            if let Some(p) = metrics {
                std::fs::write(p, report.to_csv())?;
            }
            save_model(&out, &net, None)?;
            out!("wrote {}", out.display());
        }
        Command::Eval { model, data, head } => {
            let net = load_network(&model)?;
            let ds = load_data(&data, net.spec().input_size)?;
            check_classes(&net, &ds)?;
            let heads: Vec<String> = match head {
                Some(h) => vec![head_name(&h)?.to_string()],
                None => net.spec().head_names(),
            };
            out!("{:<8} {:>9}", "head", "accuracy");
            for h in heads {
                out!("{:<8} {:>9.4}", h, head_eval(&ds, &net, &h)?);
            }
        }
        Command::Cascade { model, data, threshold, no_fuse, exit_head, trace } => {
            let net = load_network(&model)?;
            let ds = load_data(&data, net.spec().input_size)?;
            check_classes(&net, &ds)?;
            let thresholds: Vec<f64> = threshold
                .split(',')
                .map(|t| t.trim().parse().map_err(|_| Error::Param(format!("bad threshold {t:?}"))))
                .collect::<Result<_>>()?;
            let mut rows = Vec::new();
            for (i, &t) in thresholds.iter().enumerate() {
                let policy = CascadePolicy { threshold: t, exit_head: head_name(&exit_head)?.to_string(), fuse_late: !no_fuse };
                let (stats, tr) = cascade_eval(&ds, &net, &policy)?;
                if i == 0 {
                    if let Some(p) = &trace {
                        std::fs::write(p, trace_csv(&tr))?;
                    }
                }
                rows.push(stats);
            }
            out!("{}", stats_table(&rows).trim_end_matches('\n'));
        }
        Command::Quantize { model, out, bits } => {
            let scheme = QuantScheme::parse(&bits)?;
            let net = load_network(&model)?;
            save_model(&out, &net, Some(&scheme))?;
            let storage = quantized_storage(net.params(), &scheme)?;
            out!("wrote {} ({scheme}): {:.0} bytes of weights", out.display(), storage.total_bytes());
        }
        Command::Inspect { model } => {
            let file: ModelFile = load_model(&model)?;
            out!("{}", serde_json::to_string_pretty(&file.spec)?);
            out!("{:<40} {:>10} {:<16} encoding", "parameter", "values", "shape");
            let mut total = 0usize;
            for r in &file.records {
                let n: usize = r.tensor.shape().iter().product();
                total += n;
                let enc = match &r.tensor {
                    StoredTensor::Float(_) => "float32".to_string(),
                    StoredTensor::Quantized(q) => format!("q{} scale={:e}", q.bits, q.scale),
                };
                out!("{:<40} {:>10} {:<16} {enc}", r.name, n, format!("{:?}", r.tensor.shape()));
            }
            out!("{} tensors, {} values", file.records.len(), group(total as u64));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
