use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use drsfi::campaign::{self, OutputFormat};
use drsfi::inject::{apply_error_map, build_error_map, ErrorMap, InjectionConfig, TargetSelector};
use drsfi::model::{load_checkpoint, save_checkpoint, DummyModelConfig, ModelGraph};

#[derive(Parser)]
#[command(name = "drsfi", version, about = "Bit-flip fault injection for deep recommendation models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a campaign described by a config file.
    Run {
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        format: Option<OutputFormat>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Flip bits in a checkpoint and write the corrupted model.
    Inject {
        checkpoint: PathBuf,
        #[arg(long)]
        ber: f64,
        #[arg(long, default_value = "entire_model")]
        targets: TargetSelector,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Protected-bit mask, e.g. 0xFF800000.
        #[arg(long, default_value = "0", value_parser = parse_mask)]
        mask: u32,
        #[arg(long)]
        out: PathBuf,
        /// Also write the error map for later replay.
        #[arg(long)]
        map: Option<PathBuf>,
    },
    /// Re-apply a saved error map to a checkpoint.
    Replay {
        errormap: PathBuf,
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a results file.
    Report {
        results: PathBuf,
        /// Aggregate runs into figure cells.
        #[arg(long)]
        figure_table: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a freshly initialized dummy model checkpoint.
    BuildDummy {
        #[arg(long, default_value_t = 1)]
        mlp_depth: usize,
        #[arg(long, default_value_t = 64)]
        mlp_hidden: usize,
        #[arg(long, default_value_t = 64)]
        embed_dim: usize,
        #[arg(long, default_value_t = 128)]
        dense_dim: usize,
        #[arg(long, default_value_t = 8192)]
        sparse_dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mask(s: &str) -> Result<u32, String> {
    let r = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u32::from_str_radix(hex, 16),
        None => s.parse(),
    };
    r.map_err(|e| format!("bad mask `{s}`: {e}"))
}

enum Failure {
    Config(String),
    Runtime(String),
}

fn config<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Config(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config: path, output, format, runs, seed, workers } => {
            let mut spec = campaign::parse_config(&path).map_err(config)?;
            if let Some(o) = output {
                spec.output = Some(o);
            }
            if let Some(f) = format {
                spec.format = f;
            }
            if let Some(r) = runs {
                spec.runs = r;
            }
            if let Some(s) = seed {
                spec.seed = s;
            }
            if let Some(w) = workers {
                spec.workers = w;
            }
            spec.validate().map_err(config)?;
            eprintln!("running {} records", spec.record_count());
            let records = campaign::run_campaign(&spec).map_err(runtime)?;
            let errors = records.iter().filter(|r| r.error.is_some()).count();
            match &spec.output {
                Some(p) => campaign::emit_results(&records, spec.format, p, spec.wall_time).map_err(runtime)?,
                None => {
                    let out = std::io::stdout().lock();
                    match spec.format {
                        OutputFormat::Csv => campaign::output::write_csv(&records, out, spec.wall_time),
                        OutputFormat::Jsonl => campaign::output::write_jsonl(&records, out, spec.wall_time),
                    }
                    .map_err(runtime)?
                }
            }
            if errors > 0 {
                eprintln!("{errors} runs recorded errors");
            }
            Ok(())
        }
        Command::Inject { checkpoint, ber, targets, seed, mask, out, map } => {
            let mut model = load_checkpoint(&checkpoint).map_err(runtime)?;
            let cfg = InjectionConfig::new(ber, targets, seed).with_mask(mask);
            cfg.validate().map_err(config)?;
            let emap = build_error_map(&model, &cfg).map_err(config)?;
            apply_error_map(&mut model, &emap).map_err(runtime)?;
            save_checkpoint(&model, &out).map_err(runtime)?;
            if let Some(p) = map {
                let f = BufWriter::new(File::create(&p).map_err(runtime)?);
                emap.write_to(f).map_err(runtime)?;
            }
            eprintln!("flipped {} bits", emap.len());
            Ok(())
        }
        Command::Replay { errormap, checkpoint, out } => {
            let f = File::open(&errormap).map_err(runtime)?;
            let emap = ErrorMap::read_from(BufReader::new(f)).map_err(config)?;
            let mut model = load_checkpoint(&checkpoint).map_err(runtime)?;
            apply_error_map(&mut model, &emap).map_err(runtime)?;
            save_checkpoint(&model, &out).map_err(runtime)?;
            eprintln!("replayed {} bit flips", emap.len());
            Ok(())
        }
        Command::Report { results, figure_table, out } => {
            let records = campaign::load_results(&results).map_err(runtime)?;
            let sink: Box<dyn Write> = match out {
                Some(p) => Box::new(BufWriter::new(File::create(p).map_err(runtime)?)),
                None => Box::new(std::io::stdout().lock()),
            };
            if figure_table {
                campaign::write_figure_table(&campaign::figure_table(&records), sink).map_err(runtime)
            } else {
                campaign::output::write_csv(&records, sink, false).map_err(runtime)
            }
        }
        Command::BuildDummy { mlp_depth, mlp_hidden, embed_dim, dense_dim, sparse_dim, seed, out } => {
            let cfg = DummyModelConfig { mlp_depth, mlp_hidden, embed_dim, dense_dim, sparse_dim };
            let model = ModelGraph::build_dummy(&cfg, seed).map_err(config)?;
            save_checkpoint(&model, &out).map_err(runtime)?;
            eprintln!("wrote {} parameters", model.parameter_count());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
