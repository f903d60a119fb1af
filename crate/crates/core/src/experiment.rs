//! End-to-end pipeline used by the command line tool: load or generate a
//! dataset, classify passengers, simulate, and write artifacts.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::classifier::{classify_population, group_shares, write_assignments_csv, ClassificationResult};
use crate::classifier::{MobilityGroup, GROUP_COUNT};
use crate::contact::{connected_components, degree_distribution, TripIndex};
use crate::error::{invalid, Error, Result};
use crate::flow::{
    chord_export, difference_matrix, group_flow_matrix, per_group_summary, write_matrix_csv,
    write_summary_csv, FlowMatrix, GroupIndex, GroupSummary,
};
use crate::mobility::{mobility_vectors, write_mobility_csv, DistanceModel, MobilityVector};
use crate::sim::{write_infections_csv, EnsembleStats, SimConfig, Simulation};
use crate::synth::{generate, SynthConfig};
use crate::trip_ingest::{
    filter_by_min_trips, parse_trip_records, population_vs_threshold, trip_frequency_distribution,
    write_histogram, write_trip_records, CsvFormat, IngestReport, TripRecord,
};
use crate::Seconds;

fn d_k() -> usize {
    2
}
fn d_min_trips() -> usize {
    15
}
fn d_beta_grid() -> Vec<f64> {
    vec![0.05, 0.1, 0.15, 0.25, 0.5, 0.75, 1.0]
}
fn d_dt_grid() -> Vec<i64> {
    vec![0, 15, 30, 60, 120]
}
fn d_output() -> PathBuf {
    PathBuf::from("out")
}
fn d_delimiter() -> char {
    ','
}
fn d_scale() -> u32 {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Trip CSV to ingest. When absent, `synth` is used to generate one.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default = "d_delimiter")]
    pub delimiter: char,
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default = "d_min_trips")]
    pub min_trips: usize,
    #[serde(default)]
    pub distance_model: DistanceModel,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default = "d_beta_grid")]
    pub beta_grid: Vec<f64>,
    /// Suspension times in minutes.
    #[serde(default = "d_dt_grid")]
    pub dt_grid: Vec<i64>,
    #[serde(default = "d_output")]
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses every available core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default = "d_scale")]
    pub chord_scale: u32,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl ExperimentSpec {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let spec: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.is_none() {
            self.synth.validate()?;
        }
        if self.k == 0 {
            return Err(invalid("k must be at least 1"));
        }
        if self.chord_scale == 0 {
            return Err(invalid("chord scale must be positive"));
        }
        self.sim.validate()?;
        check_grid("beta_grid", &self.beta_grid)?;
        if self.beta_grid.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(invalid("beta_grid values must lie in [0, 1]"));
        }
        let dts: Vec<f64> = self.dt_grid.iter().map(|&d| d as f64).collect();
        check_grid("dt_grid", &dts)?;
        if self.dt_grid[0] < 0 {
            return Err(invalid("dt_grid values must be non-negative"));
        }
        Ok(())
    }

    fn csv_format(&self) -> Result<CsvFormat> {
        if !self.delimiter.is_ascii() {
            return Err(invalid("delimiter must be a single ASCII character"));
        }
        Ok(CsvFormat {
            delimiter: self.delimiter as u8,
        })
    }
}

fn check_grid(name: &str, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(invalid(format!("{name} must not be empty")));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(invalid(format!("{name} must be strictly ascending")));
    }
    Ok(())
}

/// Runs `f` on a worker pool of the configured size.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| invalid(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Reads the configured dataset, or generates one when none is given.
pub fn load_records(spec: &ExperimentSpec) -> Result<(Vec<TripRecord>, IngestReport)> {
    match &spec.dataset {
        Some(path) => {
            info!("reading {}", path.display());
            let file = File::open(path)?;
            parse_trip_records(BufReader::new(file), spec.csv_format()?)
        }
        None => {
            info!(
                "generating {} synthetic passengers over {} days",
                spec.synth.n_passengers, spec.synth.days
            );
            let (_, trips) = generate(&spec.synth)?;
            let report = IngestReport {
                total_rows: trips.len(),
                accepted: trips.len(),
                rejected_by_reason: BTreeMap::new(),
            };
            Ok((trips, report))
        }
    }
}

/// Everything downstream stages need after ingest and classification.
pub struct Prepared {
    pub records: Vec<TripRecord>,
    pub report: IngestReport,
    pub index: TripIndex,
    /// Direct encounter count per passenger index.
    pub encounters: Vec<u64>,
    pub vectors: Vec<MobilityVector>,
    pub classification: ClassificationResult,
    pub groups: GroupIndex,
}

pub fn prepare(spec: &ExperimentSpec) -> Result<Prepared> {
    spec.validate()?;
    let (records, report) = load_records(spec)?;
    let records = filter_by_min_trips(records, spec.min_trips);
    let index = TripIndex::new(&records);
    if index.population() < 2 {
        return Err(Error::DataIntegrity(format!(
            "{} passengers remain after the {}-trip filter",
            index.population(),
            spec.min_trips
        )));
    }
    info!("{} passengers, {} trips", index.population(), index.trips.len());
    let encounters = Simulation::new(&index, 0)?.encounter_counts();
    let by_card: HashMap<String, u64> = index.cards.iter().cloned().zip(encounters.iter().copied()).collect();
    let vectors = mobility_vectors(&records, &by_card, spec.k, spec.distance_model)?;
    let classification = classify_population(&vectors)?;
    let groups = GroupIndex::new(&index, &classification)?;
    for g in MobilityGroup::ALL {
        if groups.sizes[g.index()] == 0 {
            warn!("group {g} is empty");
        }
    }
    Ok(Prepared {
        records,
        report,
        index,
        encounters,
        vectors,
        classification,
        groups,
    })
}

pub fn cmd_generate(spec: &ExperimentSpec, out: &Path) -> Result<()> {
    spec.synth.validate()?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let (_, trips) = generate(&spec.synth)?;
    let mut w = BufWriter::new(File::create(out)?);
    write_trip_records(&mut w, &trips)?;
    w.flush()?;
    info!("wrote {} trips to {}", trips.len(), out.display());
    Ok(())
}

const THRESHOLDS: [usize; 10] = [1, 2, 5, 10, 15, 20, 25, 30, 40, 50];

/// Dataset profile: ingest report, trip frequency and threshold curves,
/// and contact degree and component distributions of the filtered data.
pub fn cmd_ingest(spec: &ExperimentSpec) -> Result<()> {
    spec.validate()?;
    let dir = &spec.output_dir;
    fs::create_dir_all(dir)?;
    let (records, report) = load_records(spec)?;
    write_json(dir, "ingest_report.json", &report)?;
    let freq: Vec<(usize, usize)> = trip_frequency_distribution(&records).into_iter().collect();
    write_histogram(create(dir, "trip_frequency.csv")?, "trips", "passengers", freq)?;
    let curve = population_vs_threshold(&records, &THRESHOLDS)?;
    write_histogram(create(dir, "population_vs_threshold.csv")?, "min_trips", "passengers", curve)?;

    let records = filter_by_min_trips(records, spec.min_trips);
    let index = TripIndex::new(&records);
    let sim = Simulation::new(&index, 0)?;
    let degrees: Vec<(u64, usize)> = degree_distribution(&sim.exposures, index.population()).into_iter().collect();
    write_histogram(create(dir, "degree_distribution.csv")?, "degree", "passengers", degrees)?;
    let comps: Vec<(usize, usize)> = connected_components(&sim.exposures, index.population())
        .into_iter()
        .enumerate()
        .collect();
    write_histogram(create(dir, "components.csv")?, "component", "size", comps)?;
    info!(
        "{} rows read, {} rejected, {} passengers after filter",
        report.total_rows,
        report.rejected(),
        index.population()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct ClassificationSummary<'a> {
    population: usize,
    k: usize,
    min_trips: usize,
    group_sizes: BTreeMap<MobilityGroup, usize>,
    group_percent: BTreeMap<MobilityGroup, f64>,
    centroids: &'a crate::classifier::Centroids,
}

fn write_classification(spec: &ExperimentSpec, p: &Prepared) -> Result<()> {
    let dir = &spec.output_dir;
    write_mobility_csv(create(dir, "mobility.csv")?, &p.vectors)?;
    write_assignments_csv(create(dir, "classification.csv")?, &p.classification)?;
    let sizes = p.classification.group_sizes();
    let summary = ClassificationSummary {
        population: p.classification.assignments.len(),
        k: spec.k,
        min_trips: spec.min_trips,
        group_sizes: MobilityGroup::ALL.iter().map(|&g| (g, sizes[g.index()])).collect(),
        group_percent: group_shares(&p.classification),
        centroids: &p.classification.centroids,
    };
    write_json(dir, "classification_summary.json", &summary)
}

pub fn cmd_classify(spec: &ExperimentSpec) -> Result<Prepared> {
    fs::create_dir_all(&spec.output_dir)?;
    let p = prepare(spec)?;
    write_classification(spec, &p)?;
    Ok(p)
}

/// Aggregates of one ensemble at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub beta: f64,
    pub d_t_minutes: i64,
    pub stats: EnsembleStats,
    pub summary: GroupSummary,
    pub matrix: FlowMatrix,
}

fn point_config(spec: &ExperimentSpec, beta: f64, dt_min: i64) -> SimConfig {
    SimConfig {
        beta,
        d_t: minutes(dt_min),
        ..spec.sim.clone()
    }
}

fn run_point(sim: &Simulation, p: &Prepared, config: &SimConfig) -> Result<(PointResult, Vec<crate::sim::SimOutcome>)> {
    let ensemble = sim.run_ensemble(config)?;
    let summary = per_group_summary(&ensemble.outcomes, &p.groups, &p.encounters)?;
    let matrix = group_flow_matrix(&ensemble.outcomes, &p.groups)?;
    Ok((
        PointResult {
            beta: config.beta,
            d_t_minutes: config.d_t / 60,
            stats: ensemble.stats,
            summary,
            matrix,
        },
        ensemble.outcomes,
    ))
}

/// Classifies, then runs one ensemble at `spec.sim`.
pub fn cmd_simulate(spec: &ExperimentSpec) -> Result<PointResult> {
    let dir = spec.output_dir.clone();
    fs::create_dir_all(&dir)?;
    let p = prepare(spec)?;
    write_classification(spec, &p)?;
    let config = &spec.sim;
    let (point, outcomes) = with_workers(spec.workers, || -> Result<_> {
        let sim = Simulation::new(&p.index, config.d_t)?;
        info!(
            "{} exposures at d_t = {} s; {} runs",
            sim.exposures.len(),
            config.d_t,
            config.n_runs
        );
        run_point(&sim, &p, config)
    })??;
    let mut w = create(&dir, "infections.csv")?;
    write_infections_csv(&mut w, &p.index, &outcomes)?;
    w.flush()?;
    write_summary_csv(create(&dir, "group_summary.csv")?, &point.summary)?;
    write_matrix_csv(create(&dir, "flow_matrix.csv")?, &point.matrix)?;
    write_json(&dir, "chord.json", &chord_export(&point.matrix, spec.chord_scale)?)?;
    #[derive(Serialize)]
    struct Outcome<'a> {
        config: &'a SimConfig,
        population: usize,
        stats: &'a EnsembleStats,
    }
    write_json(
        &dir,
        "simulation_summary.json",
        &Outcome {
            config,
            population: p.index.population(),
            stats: &point.stats,
        },
    )?;
    Ok(point)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixEntry {
    pub file: String,
    pub beta: f64,
    pub d_t_minutes: i64,
    pub mean_infections: f64,
    pub mean_attack_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferenceEntry {
    pub file: String,
    /// `"d_t"` or `"beta"`: the parameter that changes.
    pub axis: String,
    pub baseline: GridPoint,
    pub variant: GridPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub beta: f64,
    pub d_t_minutes: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub population: usize,
    pub group_sizes: BTreeMap<MobilityGroup, usize>,
    pub sim: SimConfig,
    pub beta_grid: Vec<f64>,
    pub dt_grid: Vec<i64>,
    pub matrices: Vec<MatrixEntry>,
    pub differences: Vec<DifferenceEntry>,
}

fn matrix_name(beta: f64, dt: i64) -> String {
    format!("flow_beta{beta}_dt{dt}.csv")
}

/// Difference pairs for the grid: consecutive `d_t` values and each `d_t`
/// against the smallest, at every `beta`; consecutive `beta` values at
/// every `d_t`. Duplicates are listed once.
pub fn difference_pairs(beta_grid: &[f64], dt_grid: &[i64]) -> Vec<(String, GridPoint, GridPoint)> {
    let mut out = Vec::new();
    let pt = |beta, d_t_minutes| GridPoint { beta, d_t_minutes };
    for &b in beta_grid {
        for (i, &dt) in dt_grid.iter().enumerate().skip(1) {
            out.push(("d_t".to_string(), pt(b, dt_grid[i - 1]), pt(b, dt)));
            if i > 1 {
                out.push(("d_t".to_string(), pt(b, dt_grid[0]), pt(b, dt)));
            }
        }
    }
    for &dt in dt_grid {
        for w in beta_grid.windows(2) {
            out.push(("beta".to_string(), pt(w[0], dt), pt(w[1], dt)));
        }
    }
    out
}

/// Full grid sweep. Artifacts are staged next to `output_dir/sweep` and
/// moved into place only when every grid point succeeded.
pub fn cmd_sweep(spec: &ExperimentSpec) -> Result<Manifest> {
    fs::create_dir_all(&spec.output_dir)?;
    let target = spec.output_dir.join("sweep");
    let staging = spec.output_dir.join(".sweep.partial");
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;
    match sweep_into(spec, &staging) {
        Ok(manifest) => {
            if target.exists() {
                fs::remove_dir_all(&target)?;
            }
            fs::rename(&staging, &target)?;
            info!("sweep written to {}", target.display());
            Ok(manifest)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

fn sweep_into(spec: &ExperimentSpec, dir: &Path) -> Result<Manifest> {
    let p = prepare(spec)?;
    let total = spec.beta_grid.len() * spec.dt_grid.len();
    let mut matrices: BTreeMap<(usize, usize), FlowMatrix> = BTreeMap::new();
    let mut entries = Vec::with_capacity(total);
    with_workers(spec.workers, || -> Result<()> {
        for (j, &dt) in spec.dt_grid.iter().enumerate() {
            // One exposure stream at a time keeps memory bounded.
            let sim = Simulation::new(&p.index, minutes(dt))?;
            for (i, &beta) in spec.beta_grid.iter().enumerate() {
                let config = point_config(spec, beta, dt);
                let (point, _) = run_point(&sim, &p, &config)?;
                let file = matrix_name(beta, dt);
                write_matrix_csv(create(dir, &file)?, &point.matrix)?;
                entries.push(MatrixEntry {
                    file,
                    beta,
                    d_t_minutes: dt,
                    mean_infections: point.stats.mean_infections,
                    mean_attack_rate: point.stats.mean_attack_rate,
                });
                matrices.insert((i, j), point.matrix);
                info!("[{}/{}] beta = {beta}, d_t = {dt} min", matrices.len(), total);
            }
        }
        Ok(())
    })??;
    entries.sort_by(|a, b| {
        a.beta
            .total_cmp(&b.beta)
            .then(a.d_t_minutes.cmp(&b.d_t_minutes))
    });

    let locate = |g: &GridPoint| {
        let i = spec.beta_grid.iter().position(|&b| b == g.beta).unwrap();
        let j = spec.dt_grid.iter().position(|&d| d == g.d_t_minutes).unwrap();
        &matrices[&(i, j)]
    };
    let mut differences = Vec::new();
    for (axis, base, variant) in difference_pairs(&spec.beta_grid, &spec.dt_grid) {
        let file = format!(
            "diff_beta{}_dt{}_vs_beta{}_dt{}.csv",
            variant.beta, variant.d_t_minutes, base.beta, base.d_t_minutes
        );
        let m = difference_matrix(locate(&base), locate(&variant))?;
        write_matrix_csv(create(dir, &file)?, &m)?;
        differences.push(DifferenceEntry {
            file,
            axis,
            baseline: base,
            variant,
        });
    }

    let sizes = p.groups.sizes;
    let manifest = Manifest {
        population: p.index.population(),
        group_sizes: MobilityGroup::ALL.iter().map(|&g| (g, sizes[g.index()])).collect(),
        sim: spec.sim.clone(),
        beta_grid: spec.beta_grid.clone(),
        dt_grid: spec.dt_grid.clone(),
        matrices: entries,
        differences,
    };
    debug_assert_eq!(sizes.len(), GROUP_COUNT);
    write_json(dir, "manifest.json", &manifest)?;
    Ok(manifest)
}

/// `d_t` in seconds for a grid value in minutes.
pub fn minutes(m: i64) -> Seconds {
    m * 60
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grids() {
        let s = ExperimentSpec::default();
        assert_eq!(s.beta_grid, vec![0.05, 0.1, 0.15, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(s.dt_grid, vec![0, 15, 30, 60, 120]);
        assert_eq!(s.k, 2);
        assert_eq!(s.min_trips, 15);
        s.validate().unwrap();
    }

    #[test]
    fn unsorted_grid_rejected() {
        let s = ExperimentSpec {
            beta_grid: vec![0.5, 0.1],
            ..ExperimentSpec::default()
        };
        assert!(s.validate().is_err());
        let s = ExperimentSpec {
            dt_grid: vec![],
            ..ExperimentSpec::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn difference_pair_counts() {
        assert!(difference_pairs(&[1.0], &[0]).is_empty());
        let p = difference_pairs(&[1.0], &[0, 15]);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].1.d_t_minutes, 0);
        assert_eq!(p[0].2.d_t_minutes, 15);
        // 4 consecutive + 3 extra baseline per beta, 1 beta step per d_t
        assert_eq!(difference_pairs(&[0.5, 1.0], &[0, 15, 30, 60, 120]).len(), 2 * 7 + 5);
    }
}
