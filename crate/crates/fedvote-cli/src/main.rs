//! Command-line front end for the fedvote library.
//!
//! Four subcommands: `run` executes an experiment described by a config
//! file and streams metrics to disk, `verify-lemmas` replays the Monte
//! Carlo suites behind the aggregation math, `partition` materializes
//! federated shards of an IDX dataset, and `opcount` reports the
//! forward-pass cost of the configured model. All output is reproducible
//! from the seeds involved; the CLI adds no randomness of its own.

use clap::{Parser, Subcommand};
use fedvote::config::ExperimentConfig;
use fedvote::data::{load_idx, partition, write_idx, PartitionKind, PartitionSpec};
use fedvote::lemmas;
use fedvote::metrics::append_json_line;
use fedvote::nn::WeightKind;
use fedvote::rng::{stream, StreamKind};
use fedvote::Error;
use serde::Serialize;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_VERIFICATION: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "fedvote", about = "Federated voting simulator", version)]
struct Cli {
    /// Override the master seed (config files carry their own).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for client training; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory, overriding the config where one applies.
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a config file.
    Run {
        /// TOML experiment description.
        config: PathBuf,
    },
    /// Re-verify the analytic results by Monte-Carlo simulation.
    VerifyLemmas {
        /// Trials per check (at least 10000).
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        /// Fault-injection hook: added to every rounding probability in the
        /// vote expectation suite. Any nonzero value must make it fail.
        #[arg(long, default_value_t = 0.0)]
        rounding_bias: f64,
    },
    /// Split an IDX dataset into per-client shard files.
    Partition {
        /// IDX image file.
        images: PathBuf,
        /// IDX label file.
        labels: PathBuf,
        /// Number of clients to split across.
        #[arg(long)]
        clients: usize,
        /// Split kind: "iid" or "dirichlet".
        #[arg(long, default_value = "iid", value_parser = parse_partition_kind)]
        kind: PartitionKind,
        /// Dirichlet concentration (ignored for iid).
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
    },
    /// Report forward-pass op counts and energy for the configured model.
    Opcount {
        /// TOML experiment description.
        config: PathBuf,
    },
}

fn parse_partition_kind(s: &str) -> Result<PartitionKind, String> {
    match s {
        "iid" => Ok(PartitionKind::Iid),
        "dirichlet" => Ok(PartitionKind::Dirichlet),
        other => Err(format!("unknown partition kind {other:?}, expected iid or dirichlet")),
    }
}

/// One line on standard error, prefixed with the failure class, plus the
/// matching exit code.
fn fail(err: &Error) -> ExitCode {
    let (code, line) = match err {
        Error::Config(m) => (EXIT_USAGE, format!("config: {m}")),
        Error::InvalidArgument(m) => (EXIT_USAGE, format!("usage: {m}")),
        Error::Domain(m) => (EXIT_USAGE, format!("domain: {m}")),
        Error::DegenerateState(m) => (EXIT_USAGE, format!("state: {m}")),
        Error::Format { offset, message } => {
            (EXIT_IO, format!("format: byte {offset}: {message}"))
        }
        Error::Io(e) => (EXIT_IO, format!("io: {e}")),
    };
    eprintln!("{line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("usage: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }

    let outcome = match cli.command {
        Command::Run { config } => cmd_run(&config, cli.seed, cli.output.as_deref()),
        Command::VerifyLemmas {
            trials,
            rounding_bias,
        } => cmd_verify_lemmas(trials, cli.seed.unwrap_or(42), rounding_bias),
        Command::Partition {
            images,
            labels,
            clients,
            kind,
            alpha,
        } => cmd_partition(
            &images,
            &labels,
            clients,
            kind,
            alpha,
            cli.seed.unwrap_or(42),
            cli.output.as_deref(),
        ),
        Command::Opcount { config } => cmd_opcount(&config),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => fail(&e),
    }
}

fn cmd_run(
    config_path: &Path,
    seed: Option<u64>,
    output: Option<&Path>,
) -> fedvote::Result<ExitCode> {
    let mut config = ExperimentConfig::load(config_path)?;
    if let Some(seed) = seed {
        config.seeds.master = seed;
    }
    if let Some(dir) = output {
        config.output.dir = dir.to_path_buf();
    }
    config.resolve();
    config.validate()?;

    let out_dir = config.output.dir.clone();
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("config.toml"), config.to_toml_string()?)?;

    let mut sim = config.build()?;
    let mut metrics = BufWriter::new(File::create(out_dir.join("metrics.jsonl"))?);
    for _ in 0..config.rounds {
        let record = sim.step()?;
        append_json_line(&mut metrics, &record)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify_lemmas(trials: usize, seed: u64, rounding_bias: f64) -> fedvote::Result<ExitCode> {
    let reports = lemmas::verify_all(trials, seed, rounding_bias)?;
    let mut all_pass = true;
    for (i, report) in reports.iter().enumerate() {
        println!("lemma {} ({})", i + 1, report.name);
        for check in &report.checks {
            println!(
                "  {}: observed {:.6} expected {:.6} -> {}",
                check.label,
                check.observed,
                check.expected,
                if check.pass { "PASS" } else { "FAIL" }
            );
        }
        let verdict = report.passed();
        all_pass &= verdict;
        println!("lemma {}: {}", i + 1, if verdict { "PASS" } else { "FAIL" });
    }
    Ok(if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_VERIFICATION)
    })
}

#[derive(Serialize)]
struct ShardEntry {
    id: usize,
    samples: usize,
    images: String,
    labels: String,
    class_histogram: Vec<usize>,
}

#[derive(Serialize)]
struct Manifest {
    classes: usize,
    total_samples: usize,
    shards: Vec<ShardEntry>,
}

fn cmd_partition(
    images: &Path,
    labels: &Path,
    clients: usize,
    kind: PartitionKind,
    alpha: f64,
    seed: u64,
    output: Option<&Path>,
) -> fedvote::Result<ExitCode> {
    let dataset = load_idx(images, labels)?;
    let spec = PartitionSpec {
        kind,
        clients,
        alpha,
    };
    let shards = partition(
        &dataset,
        &spec,
        &mut stream(seed, StreamKind::Partition, 0, 0),
    )?;

    let out_dir = output.unwrap_or(Path::new("shards")).to_path_buf();
    std::fs::create_dir_all(&out_dir)?;
    let mut entries = Vec::with_capacity(shards.len());
    for (id, shard) in shards.iter().enumerate() {
        let images_name = format!("client{id}-images.idx");
        let labels_name = format!("client{id}-labels.idx");
        write_idx(shard, &out_dir.join(&images_name), &out_dir.join(&labels_name))?;
        entries.push(ShardEntry {
            id,
            samples: shard.len(),
            images: images_name,
            labels: labels_name,
            class_histogram: shard.class_histogram(),
        });
    }
    let manifest = Manifest {
        classes: dataset.classes(),
        total_samples: dataset.len(),
        shards: entries,
    };
    let file = File::create(out_dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &manifest)
        .map_err(|e| Error::Io(e.into()))?;
    println!(
        "wrote {} shards of {} samples to {}",
        shards.len(),
        dataset.len(),
        out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_opcount(config_path: &Path) -> fedvote::Result<ExitCode> {
    let config = ExperimentConfig::load(config_path)?;
    let sim = config.build()?;
    let model = sim.model();
    let batch = config.batch_size;

    println!("forward pass, batch size {batch}");
    let mut energies = Vec::new();
    for (label, kind) in [("float", WeightKind::Float), ("binary", WeightKind::Binary)] {
        let ops = model.op_count(kind, batch);
        let energy = ops.energy_millijoules();
        println!(
            "  {label:<6} muls {:>12}  adds {:>12}  energy {:.6} mJ",
            ops.muls, ops.adds, energy
        );
        energies.push(energy);
    }
    println!("  energy ratio float/binary: {:.2}", energies[0] / energies[1]);
    Ok(ExitCode::SUCCESS)
}
