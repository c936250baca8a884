use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kwscl::cl::Algorithm;
use kwscl::dataset::{self, IndexOptions, KwsClass};
use kwscl::flops;
use kwscl::harness::{
    self, Budget, FeatureSource, HarnessError, ReportFormat, RunConfig, RunReport, ScenarioSpec,
};

#[derive(Debug, Parser)]
#[command(name = "kwscl", version, about = "Last-layer continual learning for binarized keyword spotting")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated algorithm names, or `all`.
    #[arg(long, global = true)]
    algorithms: Option<String>,
    /// Number of new classes, or explicit sets like `one,two;three`.
    #[arg(long, global = true)]
    new_classes: Option<ScenarioSpec>,
    /// Stream length in samples, or `all`.
    #[arg(long, global = true)]
    budget: Option<Budget>,
    #[arg(long, global = true)]
    feature_source: Option<FeatureSource>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    format: Option<ReportFormat>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Scan a dataset root and print per-class counts.
    Index {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Index and split a dataset, writing `manifest.tsv` to the output directory.
    Split {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Fit the 12-class head on pretrain features and write `head.json`.
    PretrainHead,
    /// Continual-learning runs over the configured scenarios.
    Run,
    /// Data-volume sweep on the four-new-class scenario.
    Sweep,
    /// Backprop FLOPs per sample for every algorithm.
    Flops {
        #[arg(long, default_value_t = 12)]
        initial_classes: u64,
        #[arg(long)]
        batch_size: Option<u64>,
    },
    /// Re-emit a JSON report in another format.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

fn config_error(msg: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(msg.to_string())
}

fn load_config(cli: &Cli) -> Result<RunConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_json_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(list) = &cli.algorithms {
        cfg.algorithms = if list == "all" {
            Algorithm::ALL.to_vec()
        } else {
            list.split(',')
                .map(|s| s.trim().parse::<Algorithm>().map_err(config_error))
                .collect::<Result<_, _>>()?
        };
    }
    if let Some(spec) = &cli.new_classes {
        cfg.scenarios = spec.clone();
    }
    if let Some(b) = cli.budget {
        cfg.budget = b;
    }
    if let Some(src) = cli.feature_source {
        cfg.feature_source = src;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn dataset_root(cfg: &RunConfig, flag: &Option<PathBuf>) -> Result<PathBuf, HarnessError> {
    flag.clone()
        .or_else(|| cfg.dataset_root.clone())
        .ok_or_else(|| config_error("no dataset root given (--dataset or dataset_root)"))
}

fn write_report(report: &RunReport, cfg: &RunConfig, stem: &str, format: Option<ReportFormat>) -> Result<(), HarnessError> {
    let formats = match format {
        Some(f) => vec![f],
        None => vec![ReportFormat::Csv, ReportFormat::Json],
    };
    for f in formats {
        let path = harness::emit_report(report, &cfg.output_dir, stem, f)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn run_report(
    cfg: &RunConfig,
    stem: &str,
    format: Option<ReportFormat>,
    job: fn(&RunConfig) -> Result<RunReport, HarnessError>,
) -> Result<(), HarnessError> {
    match job(cfg) {
        Ok(report) => write_report(&report, cfg, stem, format),
        Err(HarnessError::Partial {
            report,
            failed,
            total,
            first,
        }) => {
            write_report(&report, cfg, stem, format)?;
            eprintln!("{failed} of {total} runs failed");
            Err(*first)
        }
        Err(e) => Err(e),
    }
}

fn execute(cli: &Cli) -> Result<(), HarnessError> {
    match &cli.command {
        Command::Flops {
            initial_classes,
            batch_size,
        } => {
            let b = match batch_size {
                Some(b) => *b,
                None => load_config(cli)?.cl.batch_size as u64,
            };
            let table = flops::flop_table(*initial_classes, b).map_err(config_error)?;
            let text = match cli.format {
                Some(ReportFormat::Csv) => table.to_csv(),
                Some(ReportFormat::Json) => {
                    let rows: serde_json::Map<String, serde_json::Value> = table
                        .rows
                        .iter()
                        .map(|(a, cells)| (a.name().to_string(), serde_json::json!(cells)))
                        .collect();
                    let doc = serde_json::json!({
                        "m": table.m,
                        "batch_size": table.batch_size,
                        "new_classes": [1, 2, 3, 4],
                        "rows": rows,
                    });
                    serde_json::to_string_pretty(&doc).expect("json") + "\n"
                }
                None => table.to_text(),
            };
            print!("{text}");
            Ok(())
        }
        Command::Report { input } => {
            let report: RunReport = serde_json::from_reader(BufReader::new(File::open(input)?))
                .map_err(|e| HarnessError::Data(format!("{}: {e}", input.display())))?;
            match cli.format.unwrap_or(ReportFormat::Csv) {
                ReportFormat::Csv => print!("{}", harness::report_csv(&report)),
                ReportFormat::Json => println!("{}", harness::report_json(&report)),
            }
            Ok(())
        }
        Command::Index { dataset } => {
            let cfg = load_config(cli)?;
            let root = dataset_root(&cfg, dataset)?;
            let index = dataset::index_dataset(&root, IndexOptions {
                seed: cfg.index_seed,
                balance: true,
            })?;
            let counts: serde_json::Map<String, serde_json::Value> = index
                .class_histogram()
                .into_iter()
                .map(|(c, n)| (c.name().to_string(), n.into()))
                .collect();
            let doc = serde_json::json!({
                "entries": index.len(),
                "classes": counts,
                "balance": index.balance,
            });
            println!("{}", serde_json::to_string_pretty(&doc).expect("json"));
            Ok(())
        }
        Command::Split { dataset } => {
            let cfg = load_config(cli)?;
            let root = dataset_root(&cfg, dataset)?;
            let seed = cfg.seeds[0];
            let index = dataset::index_dataset(&root, IndexOptions {
                seed: cfg.index_seed,
                balance: true,
            })?;
            let splits = dataset::split_dataset(&index.classes(), seed, cfg.pretrain_fraction, cfg.test_fraction)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let path = cfg.output_dir.join("manifest.tsv");
            let mut w = BufWriter::new(File::create(&path)?);
            dataset::write_manifest(&index, &splits, &mut w)?;
            w.flush()?;
            eprintln!(
                "wrote {} (test {}, pretrain {}, cl pool {})",
                path.display(),
                splits.test.len(),
                splits.pretrain.len(),
                splits.cl_pool.len()
            );
            Ok(())
        }
        Command::PretrainHead => {
            let cfg = load_config(cli)?;
            cfg.validate()?;
            let seed = cfg.seeds[0];
            let table = harness::load_features(&cfg, seed)?;
            let prep = harness::prepare(&cfg, &table, seed)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let path = cfg.output_dir.join("head.json");
            write_json(&path, &prep.pretrained)?;
            eprintln!("wrote {} ({} classes)", path.display(), KwsClass::KNOWN.len());
            Ok(())
        }
        Command::Run => run_report(&load_config(cli)?, "report", cli.format, harness::run_continual),
        Command::Sweep => run_report(&load_config(cli)?, "sweep", cli.format, harness::sensitivity_sweep),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Data(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
