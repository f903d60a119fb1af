//! `transit-epi`: classify transit passengers, build contact networks and
//! run traced epidemic simulations from the command line.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 on data
//! errors (unreadable input, failed validation, degenerate datasets).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use transit_epi::experiment::{self, ExperimentSpec};
use transit_epi::flow::{chord_export, difference_matrix, read_matrix_csv, write_matrix_csv};
use transit_epi::mobility::DistanceModel;
use transit_epi::synth::SynthConfig;
use transit_epi::Error;

const OUT_ENV: &str = "TRANSIT_EPI_OUT";

#[derive(Parser, Debug)]
#[command(name = "transit-epi", version, about)]
struct Cli {
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic trip CSV.
    Generate(GenerateArgs),
    /// Validate a dataset and write its profile.
    Ingest(PipelineArgs),
    /// Assign every passenger a mobility group.
    Classify(PipelineArgs),
    /// Run one simulation ensemble and write traces and flow summaries.
    Simulate(PipelineArgs),
    /// Run every (beta, d_t) grid point and write flow and difference matrices.
    Sweep(PipelineArgs),
    /// Post-process matrices.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Synthetic dataset config (JSON); overrides the spec's `synth` block.
    #[arg(long)]
    synth_config: Option<PathBuf>,
    #[arg(long)]
    passengers: Option<usize>,
    #[arg(long)]
    routes: Option<usize>,
    #[arg(long)]
    stops_per_route: Option<usize>,
    #[arg(long)]
    days: Option<usize>,
    #[arg(long)]
    rng_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Experiment spec (JSON); only its `synth` block is used.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[command(flatten)]
    synth: SynthArgs,
    /// Output CSV; defaults to trips.csv in the output directory.
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long, env = OUT_ENV)]
    output_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    /// Experiment spec (JSON). Flags override its values.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Trip CSV; without one a synthetic dataset is generated.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    delimiter: Option<char>,
    #[command(flatten)]
    synth: SynthArgs,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    min_trips: Option<usize>,
    /// Treat coordinates as planar metres instead of degrees.
    #[arg(long)]
    planar: bool,
    #[arg(long)]
    beta: Option<f64>,
    /// Pathogen suspension time, minutes.
    #[arg(long)]
    dt_min: Option<i64>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    master_seed: Option<u64>,
    #[arg(long)]
    infectious_days: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    beta_grid: Option<Vec<f64>>,
    /// Suspension times in minutes, comma separated.
    #[arg(long, value_delimiter = ',')]
    dt_grid: Option<Vec<i64>>,
    #[arg(long)]
    chord_scale: Option<u32>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, env = OUT_ENV)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum AnalyzeCommand {
    /// Elementwise `variant - baseline` of two matrix CSVs.
    Diff {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        variant: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Chord-diagram JSON from a flow matrix CSV.
    Chord {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long, default_value_t = 1000)]
        scale: u32,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn load_spec(path: Option<&Path>) -> Result<ExperimentSpec> {
    match path {
        Some(p) => ExperimentSpec::from_json_file(p)
            .with_context(|| format!("cannot load spec {}", p.display())),
        None => Ok(ExperimentSpec::default()),
    }
}

fn apply_synth(args: &SynthArgs, synth: &mut SynthConfig) -> Result<()> {
    if let Some(p) = &args.synth_config {
        let file = File::open(p).with_context(|| format!("cannot open {}", p.display()))?;
        *synth = SynthConfig::from_json(BufReader::new(file))
            .with_context(|| format!("cannot load synth config {}", p.display()))?;
    }
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = args.$flag { synth.$field = v; })*
        };
    }
    set!(passengers => n_passengers, routes => n_routes, stops_per_route => stops_per_route,
         days => days, rng_seed => rng_seed);
    Ok(())
}

fn pipeline_spec(args: &PipelineArgs) -> Result<ExperimentSpec> {
    let mut spec = load_spec(args.spec.as_deref())?;
    apply_synth(&args.synth, &mut spec.synth)?;
    if args.dataset.is_some() {
        spec.dataset = args.dataset.clone();
    }
    if let Some(d) = args.delimiter {
        spec.delimiter = d;
    }
    if let Some(k) = args.k {
        spec.k = k;
    }
    if let Some(m) = args.min_trips {
        spec.min_trips = m;
    }
    if args.planar {
        spec.distance_model = DistanceModel::Planar;
    }
    let sim = &mut spec.sim;
    if let Some(b) = args.beta {
        sim.beta = b;
    }
    if let Some(d) = args.dt_min {
        sim.d_t = experiment::minutes(d);
    }
    if let Some(n) = args.seeds {
        sim.n_seeds = n;
    }
    if let Some(n) = args.runs {
        sim.n_runs = n;
    }
    if let Some(s) = args.master_seed {
        sim.master_seed = s;
    }
    if let Some(days) = args.infectious_days {
        sim.infectious_period = (days * 86_400.0).round() as i64;
    }
    if let Some(g) = &args.beta_grid {
        spec.beta_grid = g.clone();
    }
    if let Some(g) = &args.dt_grid {
        spec.dt_grid = g.clone();
    }
    if let Some(s) = args.chord_scale {
        spec.chord_scale = s;
    }
    if let Some(w) = args.workers {
        spec.workers = w;
    }
    if let Some(o) = &args.output_dir {
        spec.output_dir = o.clone();
    }
    spec.validate()?;
    Ok(spec)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(args) => {
            let mut spec = load_spec(args.spec.as_deref())?;
            apply_synth(&args.synth, &mut spec.synth)?;
            if let Some(o) = args.output_dir {
                spec.output_dir = o;
            }
            let out = args.out.unwrap_or_else(|| spec.output_dir.join("trips.csv"));
            experiment::cmd_generate(&spec, &out)?;
        }
        Command::Ingest(args) => experiment::cmd_ingest(&pipeline_spec(&args)?)?,
        Command::Classify(args) => {
            experiment::cmd_classify(&pipeline_spec(&args)?)?;
        }
        Command::Simulate(args) => {
            let point = experiment::cmd_simulate(&pipeline_spec(&args)?)?;
            info!("mean infections per run: {:.3}", point.stats.mean_infections);
        }
        Command::Sweep(args) => {
            let manifest = experiment::cmd_sweep(&pipeline_spec(&args)?)?;
            info!(
                "{} matrices, {} differences",
                manifest.matrices.len(),
                manifest.differences.len()
            );
        }
        Command::Analyze(AnalyzeCommand::Diff {
            baseline,
            variant,
            out,
        }) => {
            let a = read_matrix(&baseline)?;
            let b = read_matrix(&variant)?;
            let d = difference_matrix(&a, &b)?;
            let mut w = create(&out)?;
            write_matrix_csv(&mut w, &d)?;
            w.flush()?;
        }
        Command::Analyze(AnalyzeCommand::Chord { matrix, scale, out }) => {
            if scale == 0 {
                return Err(Error::InvalidArgument("scale must be positive".into()).into());
            }
            let chord = chord_export(&read_matrix(&matrix)?, scale)?;
            let mut w = create(&out)?;
            serde_json::to_writer_pretty(&mut w, &chord)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
    }
    Ok(())
}

fn read_matrix(path: &Path) -> Result<transit_epi::flow::FlowMatrix> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    read_matrix_csv(BufReader::new(file)).with_context(|| format!("cannot read matrix {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

/// Configuration problems are usage errors; everything else is data.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::InvalidArgument(_)) | Some(Error::Json(_)) => 1,
        _ => 2,
    }
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
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
