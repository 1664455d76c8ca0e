//! The `autospace` command line.
//!
//! Exit codes: 0 on success, 1 for usage and configuration errors, 2 for
//! runtime and numeric failures.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::artifacts::{from_json_bytes, round_sig9, write_atomic, TOOL_VERSION};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evolution::{run_evolution, speedup_experiment};
use crate::genome::{madds, Genes, LayerShape};
use crate::population::{SearchSpace, SpaceMeta};
use crate::search::{gradient_search, random_search, rank_test, train_final, Architecture};
use crate::supernet::WeightStore;

pub const SEARCH_SPACE_FILE: &str = "search_space.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const WEIGHTS_FILE: &str = "weights.aswt";
pub const ARCHITECTURE_FILE: &str = "architecture.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RANK_FILE: &str = "rank.csv";
pub const SPEEDUP_FILE: &str = "speedup.csv";

#[derive(Parser, Debug)]
#[command(name = "autospace", version, about = "Evolve per-layer cell search spaces and search inside them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Algo {
    Gradient,
    Random,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Evolve the search space; writes search_space.json, trace.csv, weights.aswt.
    Evolve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Search an architecture inside an evolved space; writes architecture.json.
    Search {
        #[arg(long)]
        space: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        algo: Algo,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an architecture from scratch; writes metrics.csv.
    Train {
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the MAdds of an architecture or of one cell.
    Madds {
        #[arg(long, conflicts_with_all = ["genome", "shape"], required_unless_present = "genome")]
        arch: Option<PathBuf>,
        /// Verifies the architecture against this config's channel plan.
        #[arg(long, requires = "arch")]
        config: Option<PathBuf>,
        #[arg(long, requires = "shape")]
        genome: Option<PathBuf>,
        /// Input geometry `CxHxW`.
        #[arg(long, requires = "genome")]
        shape: Option<String>,
        /// Output channels (defaults to C).
        #[arg(long, requires = "genome")]
        out_channels: Option<usize>,
        #[arg(long, requires = "genome", default_value_t = 1)]
        stride: usize,
    },
    /// Fitness ranking test; writes rank.csv.
    RankTest {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired reference-schedule comparison; writes speedup.csv.
    Speedup {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        _ => 2,
    }
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Ok(t) = std::env::var("AUTOSPACE_THREADS") {
        if t.trim() != "1" {
            eprintln!("note: AUTOSPACE_THREADS={t} ignored; execution is single-threaded");
        }
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Config files that fail to parse are configuration errors.
fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).map_err(|e| match e {
        Error::Config(_) => e,
        other => Error::Config(format!("{}: {other}", path.display())),
    })
}

fn out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

fn provenance(cfg: &RunConfig, hash: &str) -> String {
    format!("autospace {TOOL_VERSION} config_hash={hash} seed={}", cfg.seed)
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Evolve { config, out } => evolve(&config, &out),
        Command::Search {
            space,
            config,
            algo,
            out,
        } => search(&space, &config, algo, &out),
        Command::Train { arch, config, out } => train(&arch, &config, &out),
        Command::Madds {
            arch,
            config,
            genome,
            shape,
            out_channels,
            stride,
        } => madds_cmd(arch, config, genome, shape, out_channels, stride),
        Command::RankTest { config, out } => rank(&config, &out),
        Command::Speedup { config, seeds, out } => speedup(&config, seeds, &out),
    }
}

fn evolve(config: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    out_dir(out)?;
    let hash = cfg.hash();
    let data = cfg.load_data()?;
    let run = run_evolution(&cfg.evolution, &data.train, &hash)?;
    write_atomic(&out.join(SEARCH_SPACE_FILE), run.space.to_json().as_bytes())?;
    write_atomic(&out.join(TRACE_FILE), run.trace.to_csv(&provenance(&cfg, &hash)).as_bytes())?;
    write_atomic(&out.join(WEIGHTS_FILE), &run.store.to_checkpoint_bytes()?)?;
    let last = run.trace.losses.last().map_or(f64::NAN, |l| l.1);
    println!(
        "evolved {} layers x {} cells over {} iterations; final loss {}",
        run.space.layers.len(),
        run.space.k(),
        run.trace.losses.len(),
        round_sig9(last)
    );
    Ok(())
}

fn search(space_path: &Path, config: &Path, algo: Algo, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let bytes = fs::read(space_path).map_err(|e| Error::Config(format!("cannot read {}: {e}", space_path.display())))?;
    let space = SearchSpace::from_json(&bytes)?;
    out_dir(out)?;
    let hash = cfg.hash();
    let data = cfg.load_data()?;
    let plan = cfg.schedule(&data)?.plan;
    let mut store = WeightStore::<f32>::new(cfg.seed);
    let weights = space_path.with_file_name(WEIGHTS_FILE);
    if weights.is_file() {
        store.load_checkpoint(&fs::read(&weights)?)?;
    }
    let outcome = match algo {
        Algo::Gradient => gradient_search(&space, &data, &plan, &cfg.search, &mut store)?,
        Algo::Random => random_search(&space, &data, &plan, &cfg.search, &mut store)?.0,
    };
    let meta = SpaceMeta {
        seed: cfg.seed,
        iterations: outcome.losses.len() as u64,
        config_hash: hash,
        tool_version: TOOL_VERSION.to_string(),
    };
    write_atomic(&out.join(ARCHITECTURE_FILE), outcome.arch.to_json(&meta).as_bytes())?;
    println!("paths {:?}; total MAdds {}", outcome.paths, outcome.arch.total_madds);
    Ok(())
}

fn train(arch_path: &Path, config: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let bytes = fs::read(arch_path).map_err(|e| Error::Config(format!("cannot read {}: {e}", arch_path.display())))?;
    out_dir(out)?;
    let hash = cfg.hash();
    let data = cfg.load_data()?;
    let plan = cfg.schedule(&data)?.plan;
    let (arch, _) = Architecture::from_json(&bytes, &plan)?;
    let report = train_final(&arch, &plan, &data, &cfg.train)?;
    let mut csv = format!("# {}\nepoch,lr,train_loss,val_accuracy\n", provenance(&cfg, &hash));
    for m in &report.epochs {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            m.epoch,
            round_sig9(m.lr),
            round_sig9(m.train_loss),
            round_sig9(m.val_accuracy)
        );
    }
    let _ = writeln!(csv, "final,,,{}", round_sig9(report.accuracy));
    write_atomic(&out.join(METRICS_FILE), csv.as_bytes())?;
    println!("final top-1 accuracy: {}", round_sig9(report.accuracy));
    Ok(())
}

fn parse_shape(s: &str) -> Result<(usize, usize, usize)> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidArgument(format!("shape {s:?} is not CxHxW")))?;
    match dims[..] {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        _ => Err(Error::InvalidArgument(format!("shape {s:?} is not CxHxW with positive dims"))),
    }
}

fn madds_cmd(
    arch: Option<PathBuf>,
    config: Option<PathBuf>,
    genome: Option<PathBuf>,
    shape: Option<String>,
    out_channels: Option<usize>,
    stride: usize,
) -> Result<()> {
    if let Some(path) = arch {
        let bytes = fs::read(&path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let count = match config {
            Some(c) => {
                let cfg = load_config(&c)?;
                let data = cfg.load_data()?;
                Architecture::from_json(&bytes, &cfg.schedule(&data)?.plan)?.0.total_madds
            }
            None => {
                #[derive(serde::Deserialize)]
                struct Declared {
                    total_madds: u64,
                }
                let v: serde_json::Value = from_json_bytes(&bytes)?;
                serde_json::from_value::<Declared>(v)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
                    .total_madds
            }
        };
        println!("{count}");
        return Ok(());
    }
    let path = genome.expect("clap enforces --arch or --genome");
    let (c, h, w) = parse_shape(&shape.expect("clap enforces --shape with --genome"))?;
    if stride == 0 || h / stride == 0 || w / stride == 0 {
        return Err(Error::InvalidArgument(format!("stride {stride} does not fit {h}x{w}")));
    }
    let bytes = fs::read(&path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let genes: Genes = crate::genome::decode(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    println!("{}", madds(&genes, &LayerShape::new(c, out_channels.unwrap_or(c), h, w, stride)));
    Ok(())
}

fn rank(config: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    out_dir(out)?;
    let hash = cfg.hash();
    let report = rank_test(&cfg.rank)?;
    write_atomic(&out.join(RANK_FILE), report.to_csv(&provenance(&cfg, &hash)).as_bytes())?;
    if !report.valid {
        return Err(Error::Config(format!(
            "standalone accuracies {:?} are not strictly ordered; the test is invalid",
            report.standalone
        )));
    }
    println!(
        "ranking recovered within {} epochs for {}/{} seeds",
        cfg.rank.max_epochs,
        report.recovered_within(cfg.rank.max_epochs),
        report.rows.len()
    );
    Ok(())
}

fn speedup(config: &Path, seeds: usize, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    out_dir(out)?;
    let hash = cfg.hash();
    let data = cfg.load_data()?;
    let seeds: Vec<u64> = (0..seeds as u64).map(|i| cfg.seed + i).collect();
    let report = speedup_experiment(&cfg.evolution, &data.train, &seeds)?;
    write_atomic(&out.join(SPEEDUP_FILE), report.to_csv(&provenance(&cfg, &hash)).as_bytes())?;
    println!(
        "reference lower at 25%: {}/{} seeds",
        report.reference_wins(25),
        seeds.len()
    );
    Ok(())
}
