//! The two-observer experiment: sample one world twice, train one machine on
//! each trajectory through its own sensors, locate shared test stimuli in
//! both, and compare the maps.

pub mod cli;
mod config;
mod io;

use std::fmt::Display;
use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{embed_series, estimate_dimension, fit_with, EmbeddingModel, FitParams, MeasurementSeries};
use crate::exec::{self, Strategy};
use crate::geometry::{map_grid_with, AnchorFrame, ChartPoint, GeometryError, MetricField, RelativeLocation};
use crate::sensors::{measure_trajectory, SensorSuite, SuiteSpec, Truncation};
use crate::statistics::{smooth, to_metric, CovarianceAccumulator, CovarianceField, Support};
use crate::world::{sample_trajectory, segment_rng, WorldTrajectory};

pub use config::{
    Dimension, EmbeddingConfig, ExperimentConfig, GeometryConfig, Machine, MachineConfig, ProbeConfig,
    StatisticsConfig, WorldConfig, DEFAULT_CONFIG_TOML,
};
pub use io::{
    map_csv, parse_map_csv, parse_trajectory_csv, report_csv, trajectory_csv, world_csv, write_files,
    OutputFile,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error("input: {0}")]
    Input(String),
    #[error("{stage}: {message}")]
    Stage { stage: &'static str, message: String },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn at_stage<E: Display>(stage: &'static str) -> impl Fn(E) -> HarnessError {
    move |e| HarnessError::Stage {
        stage,
        message: e.to_string(),
    }
}

/// Seed of one machine's training trajectory, derived from the master seed.
pub fn trajectory_seed(seed: u64, machine: Machine) -> u64 {
    let stream = match machine {
        Machine::A => u64::MAX,
        Machine::B => u64::MAX - 1,
    };
    segment_rng(seed, stream).random()
}

/// Samples one machine's training trajectory.
pub fn simulate(cfg: &ExperimentConfig, machine: Machine, strategy: Strategy) -> Result<WorldTrajectory> {
    let w = &cfg.world;
    sample_trajectory(
        &w.surface,
        &w.law,
        &w.sampling,
        cfg.machine(machine).segments,
        trajectory_seed(cfg.seed, machine),
        strategy,
    )
    .map_err(at_stage("simulate"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Segments in the training trajectory.
    pub training_segments: usize,
    pub dimension: usize,
    pub measurement: Truncation,
    pub embedding: Truncation,
    /// Velocity samples outside the statistics grid.
    pub dropped_samples: u64,
    /// Cells with any sample.
    pub visited_cells: usize,
    /// Sampled, filled and unsupported cells after smoothing.
    pub support: [usize; 3],
    /// Visited cells with enough samples of their own.
    pub sampled_visited: usize,
    /// Visited cells with a metric node after smoothing.
    pub supported_visited: usize,
    /// Why a sparse run produced no metric.
    pub metric_note: Option<String>,
}

impl Diagnostics {
    /// Fraction of visited cells that carry a metric node.
    pub fn supported_fraction(&self) -> f64 {
        if self.visited_cells == 0 {
            0.0
        } else {
            self.supported_visited as f64 / self.visited_cells as f64
        }
    }

    /// Fewer than half the visited cells reached the support threshold on
    /// their own samples.
    pub fn sparse(&self) -> bool {
        2 * self.sampled_visited < self.visited_cells
    }
}

/// Everything one machine learns from its training trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineArtifacts {
    pub model: EmbeddingModel,
    /// Smoothed velocity covariance in the machine's chart.
    pub covariance: CovarianceField,
    /// `None` when no cell reached the support threshold.
    pub metric: Option<MetricField>,
    pub diagnostics: Diagnostics,
}

/// Measures a world trajectory through `suite` and trains on it.
pub fn run_machine(
    cfg: &MachineConfig,
    suite: &SensorSuite,
    traj: &WorldTrajectory,
    strategy: Strategy,
) -> Result<MachineArtifacts> {
    if traj.segments.is_empty() {
        return Err(HarnessError::Input("empty trajectory".into()));
    }
    let (series, truncation) = measure_trajectory(suite, traj, strategy);
    train(cfg, &series, truncation, strategy)
}

/// Trains a machine on an already measured series. `measurement` records
/// what measuring cost and is only carried into the diagnostics.
pub fn train(
    cfg: &MachineConfig,
    series: &MeasurementSeries,
    measurement: Truncation,
    strategy: Strategy,
) -> Result<MachineArtifacts> {
    if series.segments.is_empty() {
        return Err(HarnessError::Stage {
            stage: "measure",
            message: "no segment was visible to the sensors".into(),
        });
    }
    let e = &cfg.embedding;
    let d = match e.d {
        Dimension::Fixed(d) => d,
        Dimension::Auto => estimate_dimension(series, e.k).map_err(at_stage("dimension"))?,
    };
    let params = FitParams {
        k: e.k,
        d,
        reg: e.reg,
        max_training: e.max_training,
    };
    let model = fit_with(strategy, series, &params).map_err(at_stage("embed"))?;
    let (chart, embedding) = embed_series(&model, series, strategy).map_err(at_stage("embed"))?;

    let s = &cfg.statistics;
    let grid = s
        .grid_for(chart.iter().flat_map(|seg| seg.points()), d)
        .ok_or_else(|| HarnessError::Stage {
            stage: "statistics",
            message: "no embedded point survived".into(),
        })?;
    let mut acc = CovarianceAccumulator::new(grid);
    acc.add_segments(strategy, &chart, s.endpoints).map_err(at_stage("statistics"))?;
    let raw = acc.finish(s.min_support);
    let covariance = smooth(&raw, s.bandwidth).map_err(at_stage("statistics"))?;
    let visited: Vec<usize> = (0..raw.grid().n_cells()).filter(|&c| raw.count(c) > 0).collect();
    let count_visited = |keep: &dyn Fn(Support) -> bool| visited.iter().filter(|&&c| keep(covariance.support(c))).count();
    let mut diagnostics = Diagnostics {
        training_segments: measurement.input_segments,
        dimension: d,
        measurement,
        embedding,
        dropped_samples: raw.dropped(),
        visited_cells: visited.len(),
        support: covariance.support_histogram(),
        sampled_visited: count_visited(&|s| s == Support::Sampled),
        supported_visited: count_visited(&|s| s != Support::Unsupported),
        metric_note: None,
    };
    // Too little data is reported, not fatal: the run still yields its
    // chart and diagnostics.
    let metric = match to_metric(&covariance, s.shrinkage, s.cond_cap) {
        Ok(m) => Some(m),
        Err(e) if diagnostics.sparse() => {
            diagnostics.metric_note = Some(e.to_string());
            None
        }
        Err(e) => return Err(at_stage("statistics")(e)),
    };
    Ok(MachineArtifacts {
        model,
        covariance,
        metric,
        diagnostics,
    })
}

/// One test point's outcome in one machine.
#[derive(Debug, Clone, PartialEq)]
pub struct MapEntry {
    pub test_id: usize,
    /// The converged location, or the best iterate of a failed solve.
    pub location: Option<RelativeLocation>,
    pub converged: bool,
    pub residual: Option<f64>,
    /// Why the point did not converge.
    pub failure: Option<String>,
}

impl MapEntry {
    pub fn converged_location(&self) -> Option<RelativeLocation> {
        self.location.filter(|_| self.converged)
    }
}

/// Locates world points `tests` against world anchors `[A, B, C]` as seen
/// by one machine through its own suite.
pub fn locate_tests(
    art: &MachineArtifacts,
    geometry: &GeometryConfig,
    suite: &SensorSuite,
    anchors: &[[f64; 3]; 3],
    tests: &[[f64; 3]],
    strategy: Strategy,
) -> Result<Vec<MapEntry>> {
    let metric = art.metric.as_ref().ok_or_else(|| HarnessError::Stage {
        stage: "locate",
        message: "the machine has no supported cells".into(),
    })?;
    let chart = |p: &[f64; 3]| -> std::result::Result<ChartPoint, String> {
        let m = suite.measure(*p).map_err(|e| e.to_string())?;
        let x = art.model.embed(&m).map_err(|e| e.to_string())?;
        ChartPoint::new(x).map_err(|e| e.to_string())
    };
    let mut frame_points = Vec::with_capacity(3);
    for (name, p) in ["A", "B", "C"].iter().zip(anchors) {
        frame_points.push(chart(p).map_err(|m| HarnessError::Stage {
            stage: "locate",
            message: format!("anchor {name}: {m}"),
        })?);
    }
    let [a, b, c]: [ChartPoint; 3] = frame_points.try_into().expect("three anchors");
    let frame = AnchorFrame::new(a, b, c).map_err(at_stage("locate"))?;
    let settings = geometry.settings(metric.grid());

    let charted: Vec<std::result::Result<ChartPoint, String>> = tests.iter().map(chart).collect();
    let reachable: Vec<ChartPoint> = charted.iter().filter_map(|c| c.as_ref().ok().cloned()).collect();
    let located = map_grid_with(strategy, metric, &frame, &reachable, &settings).map_err(at_stage("locate"))?;
    let mut located = located.into_iter();
    let entries = charted
        .into_iter()
        .enumerate()
        .map(|(test_id, c)| match c {
            Err(m) => MapEntry {
                test_id,
                location: None,
                converged: false,
                residual: None,
                failure: Some(m),
            },
            Ok(_) => match located.next().expect("one result per reachable point") {
                Ok(l) => MapEntry {
                    test_id,
                    location: Some(l.location),
                    converged: true,
                    residual: Some(l.residual),
                    failure: None,
                },
                Err(GeometryError::NoSolution { best, residual }) => MapEntry {
                    test_id,
                    location: Some(best),
                    converged: false,
                    residual: Some(residual),
                    failure: Some("no convergence".into()),
                },
                Err(e) => MapEntry {
                    test_id,
                    location: None,
                    converged: false,
                    residual: None,
                    failure: Some(e.to_string()),
                },
            },
        })
        .collect();
    Ok(entries)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointComparison {
    pub test_id: usize,
    pub a: Option<RelativeLocation>,
    pub b: Option<RelativeLocation>,
}

impl PointComparison {
    /// `b − a` when both machines located the point.
    pub fn deviation(&self) -> Option<[f64; 2]> {
        let (a, b) = (self.a?, self.b?);
        Some([b.s1 - a.s1, b.s2 - a.s2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgreementReport {
    pub points: Vec<PointComparison>,
    /// Points both machines located.
    pub common: usize,
    pub failures_a: usize,
    pub failures_b: usize,
    /// Per-component RMS and largest absolute deviation over common points.
    pub rms: [f64; 2],
    pub max: [f64; 2],
    /// RMS of the per-point deviation length.
    pub rms_distance: f64,
    /// Per-component extent of both maps together, over common points.
    pub span: [f64; 2],
}

impl AgreementReport {
    /// RMS deviation as a fraction of the coordinate span.
    pub fn relative_rms(&self) -> [f64; 2] {
        [self.rms[0] / self.span[0], self.rms[1] / self.span[1]]
    }

    pub fn converged_fraction(&self) -> [f64; 2] {
        let n = self.points.len().max(1) as f64;
        [
            1.0 - self.failures_a as f64 / n,
            1.0 - self.failures_b as f64 / n,
        ]
    }
}

/// Compares two maps of the same test points; only converged points count.
pub fn compare_maps(r1: &[Option<RelativeLocation>], r2: &[Option<RelativeLocation>]) -> Result<AgreementReport> {
    if r1.len() != r2.len() {
        return Err(HarnessError::Input(format!(
            "maps have {} and {} test points",
            r1.len(),
            r2.len()
        )));
    }
    let points: Vec<PointComparison> = r1
        .iter()
        .zip(r2)
        .enumerate()
        .map(|(test_id, (a, b))| PointComparison { test_id, a: *a, b: *b })
        .collect();
    let mut sq = [0.0; 2];
    let mut max = [0.0f64; 2];
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut common = 0;
    for p in &points {
        let Some(dev) = p.deviation() else { continue };
        common += 1;
        let (a, b) = (p.a.unwrap(), p.b.unwrap());
        for (i, (x, y)) in [(a.s1, b.s1), (a.s2, b.s2)].into_iter().enumerate() {
            sq[i] += dev[i] * dev[i];
            max[i] = max[i].max(dev[i].abs());
            lo[i] = lo[i].min(x.min(y));
            hi[i] = hi[i].max(x.max(y));
        }
    }
    let n = common.max(1) as f64;
    let rms = [(sq[0] / n).sqrt(), (sq[1] / n).sqrt()];
    let span = if common == 0 { [0.0; 2] } else { [hi[0] - lo[0], hi[1] - lo[1]] };
    Ok(AgreementReport {
        common,
        failures_a: r1.iter().filter(|x| x.is_none()).count(),
        failures_b: r2.iter().filter(|x| x.is_none()).count(),
        rms,
        max,
        rms_distance: ((sq[0] + sq[1]) / n).sqrt(),
        span,
        points,
    })
}

/// Anchors `[A, B, C]` and test points, in lab coordinates.
pub type Probes = ([[f64; 3]; 3], Vec<[f64; 3]>);

pub fn probe_points(cfg: &ExperimentConfig) -> Result<Probes> {
    let surface = &cfg.world.surface;
    let lab = |p: [f64; 2]| surface.lab_position(p).map_err(at_stage("probes"));
    let [a, b, c] = cfg.probes.anchors(surface);
    let anchors = [lab(a)?, lab(b)?, lab(c)?];
    let tests = cfg.probes.tests(surface).into_iter().map(lab).collect::<Result<Vec<_>>>()?;
    Ok((anchors, tests))
}

/// Realizes a machine's sensor suite on the configured surface.
pub fn realize_suite(cfg: &ExperimentConfig, machine: Machine) -> Result<SensorSuite> {
    cfg.machine(machine)
        .sensors
        .realize(&cfg.world.surface)
        .map_err(at_stage("sensors"))
}

/// Everything one machine contributes to an experiment.
#[derive(Debug, Clone)]
pub struct MachineRun {
    pub trajectory: WorldTrajectory,
    pub series: MeasurementSeries,
    pub suite: SensorSuite,
    pub artifacts: MachineArtifacts,
    pub map: Vec<MapEntry>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub a: MachineRun,
    pub b: MachineRun,
    pub report: AgreementReport,
    /// Output files, in the order they are written.
    pub files: Vec<OutputFile>,
}

fn run_one(cfg: &ExperimentConfig, machine: Machine, strategy: Strategy) -> Result<MachineRun> {
    let mcfg = cfg.machine(machine);
    let suite = realize_suite(cfg, machine)?;
    let trajectory = simulate(cfg, machine, strategy)?;
    let (series, truncation) = measure_trajectory(&suite, &trajectory, strategy);
    let artifacts = train(mcfg, &series, truncation, strategy)?;
    let (anchors, tests) = probe_points(cfg)?;
    let map = locate_tests(&artifacts, &mcfg.geometry, &suite, &anchors, &tests, strategy)?;
    Ok(MachineRun {
        trajectory,
        series,
        suite,
        artifacts,
        map,
    })
}

/// Runs both machines, concurrently under a parallel strategy, and builds
/// every output file in memory. Nothing is written here.
pub fn experiment(cfg: &ExperimentConfig, strategy: Strategy) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let (a, b) = exec::join(
        strategy,
        || run_one(cfg, Machine::A, strategy),
        || run_one(cfg, Machine::B, strategy),
    );
    let (a, b) = (a?, b?);
    let report = compare_entries(&a.map, &b.map)?;
    let mut files = Vec::new();
    for (m, run) in [(Machine::A, &a), (Machine::B, &b)] {
        files.extend(machine_files(m, run)?);
    }
    files.push(io::probes_file(cfg)?);
    files.push(OutputFile::new("report.csv", report_csv(&report, Some(cfg))));
    Ok(ExperimentOutput { a, b, report, files })
}

/// Compares two machines' map entries.
pub fn compare_entries(a: &[MapEntry], b: &[MapEntry]) -> Result<AgreementReport> {
    let pick = |m: &[MapEntry]| m.iter().map(MapEntry::converged_location).collect::<Vec<_>>();
    compare_maps(&pick(a), &pick(b))
}

fn machine_files(m: Machine, run: &MachineRun) -> Result<Vec<OutputFile>> {
    let l = m.label();
    Ok(vec![
        OutputFile::new(format!("world_{l}.csv"), world_csv(&run.trajectory)),
        OutputFile::new(
            format!("trajectory_{l}.csv"),
            trajectory_csv(&run.series, &run.artifacts.diagnostics.measurement),
        ),
        suite_file(m, &run.suite)?,
        model_file(m, &run.artifacts)?,
        OutputFile::new(format!("map_{l}.csv"), map_csv(&run.map)),
    ])
}

/// `suite_{m}.toml`: the realized suite as an explicit spec.
pub fn suite_file(m: Machine, suite: &SensorSuite) -> Result<OutputFile> {
    let spec = SuiteSpec::Explicit {
        channels: suite.channels.clone(),
    };
    let text = toml::to_string(&spec).map_err(at_stage("sensors"))?;
    Ok(OutputFile::new(format!("suite_{}.toml", m.label()), text))
}

/// `model_{m}.json`: the fitted chart, statistics, metric and diagnostics.
pub fn model_file(m: Machine, art: &MachineArtifacts) -> Result<OutputFile> {
    let text = serde_json::to_string(art).map_err(at_stage("fit"))?;
    Ok(OutputFile::new(format!("model_{}.json", m.label()), text + "\n"))
}

pub fn parse_model(text: &str) -> Result<MachineArtifacts> {
    serde_json::from_str(text).map_err(|e| HarnessError::Input(format!("model: {e}")))
}

pub fn parse_suite(text: &str, cfg: &ExperimentConfig) -> Result<SensorSuite> {
    let spec: SuiteSpec = toml::from_str(text).map_err(|e| HarnessError::Input(format!("suite: {e}")))?;
    spec.realize(&cfg.world.surface).map_err(at_stage("sensors"))
}
