use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::embedding::FitParams;
use crate::geometry::{GridSpec, LocateSettings, TransportSettings};
use crate::sensors::{CameraPlacement, DistortionRanges, SuiteSpec};
use crate::statistics::{EndpointPolicy, DEFAULT_COND_CAP, DEFAULT_MIN_SUPPORT, DEFAULT_SHRINKAGE};
use crate::world::{Placement, Sampling, SurfacePatch, VelocityLaw};

use super::HarnessError;

/// The shipped default configuration, with every field documented.
pub const DEFAULT_CONFIG_TOML: &str = include_str!("../../configs/default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed for the world trajectories.
    pub seed: u64,
    pub world: WorldConfig,
    pub probes: ProbeConfig,
    pub machine_a: MachineConfig,
    pub machine_b: MachineConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 20_240_611,
            world: WorldConfig::default(),
            probes: ProbeConfig::default(),
            machine_a: MachineConfig::new(
                18_274,
                SuiteSpec::Goggle {
                    seed: 101,
                    cameras: 3,
                    placement: CameraPlacement::default(),
                    distortion: DistortionRanges::default(),
                },
            ),
            machine_b: MachineConfig::new(
                17_674,
                SuiteSpec::Fourier {
                    seed: 202,
                    cameras: 4,
                    placement: CameraPlacement::default(),
                    wave_numbers: [2.0, 6.0],
                },
            ),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or the built-in configuration for the name `default`.
    pub fn load(path: &str) -> Result<Self, HarnessError> {
        if path == "default" {
            return ExperimentConfig::from_toml(DEFAULT_CONFIG_TOML);
        }
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.into(),
            message: e.to_string(),
        })?;
        ExperimentConfig::from_toml(&text)
    }

    pub fn machine(&self, name: Machine) -> &MachineConfig {
        match name {
            Machine::A => &self.machine_a,
            Machine::B => &self.machine_b,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.world.surface.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.world.law.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.world.sampling.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        let p = &self.probes;
        if !(p.anchor_fraction > 0.0 && p.anchor_fraction < 0.5) {
            return bad(format!("probes.anchor_fraction must lie in (0, 0.5), got {}", p.anchor_fraction));
        }
        if p.grid < 2 || !(p.coverage > 0.0 && p.coverage <= 1.0) {
            return bad("probes.grid must be ≥ 2 and probes.coverage in (0, 1]".into());
        }
        for (name, m) in [("machine_a", &self.machine_a), ("machine_b", &self.machine_b)] {
            m.validate().map_err(|e| HarnessError::Config(format!("{name}: {e}")))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Machine {
    A,
    B,
}

impl Machine {
    pub fn label(self) -> &'static str {
        match self {
            Machine::A => "a",
            Machine::B => "b",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub surface: SurfacePatch,
    pub law: VelocityLaw,
    pub sampling: Sampling,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let mut surface = SurfacePatch::cylinder(1.0);
        surface.placement = Placement {
            axis: [1.0, 0.4, 0.2],
            angle_deg: 35.0,
            translation: [0.2, -0.1, 0.3],
        };
        WorldConfig {
            surface,
            law: VelocityLaw::boltzmann(0.01, 1.0),
            sampling: Sampling::default(),
        }
    }
}

/// Anchors and test points, in fractions of the patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// |AB| = |AC| as a fraction of the patch extent; A is the centre, C lies
    /// along u and B along w.
    pub anchor_fraction: f64,
    /// Test points per axis.
    pub grid: usize,
    /// Fraction of the patch the test grid spans, centred.
    pub coverage: f64,
    /// Optional extra test point, as an offset from A in patch fractions.
    pub extra: Option<[f64; 2]>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            anchor_fraction: 1.0 / 30.0,
            grid: 7,
            coverage: 0.8,
            extra: Some([0.16, 0.4]),
        }
    }
}

impl ProbeConfig {
    /// Intrinsic anchors `[A, B, C]`.
    pub fn anchors(&self, surface: &SurfacePatch) -> [[f64; 2]; 3] {
        let a = surface.centroid();
        let f = self.anchor_fraction;
        [a, [a[0], a[1] + f * surface.size[1]], [a[0] + f * surface.size[0], a[1]]]
    }

    /// Intrinsic test points: the grid row by row (u fastest), then the
    /// extra point.
    pub fn tests(&self, surface: &SurfacePatch) -> Vec<[f64; 2]> {
        let lo = 0.5 * (1.0 - self.coverage);
        let mut out = Vec::new();
        for j in 0..self.grid {
            for i in 0..self.grid {
                let fu = lo + self.coverage * i as f64 / (self.grid - 1) as f64;
                let fw = lo + self.coverage * j as f64 / (self.grid - 1) as f64;
                out.push([fu * surface.size[0], fw * surface.size[1]]);
            }
        }
        if let Some(e) = self.extra {
            let a = surface.centroid();
            out.push([a[0] + e[0] * surface.size[0], a[1] + e[1] * surface.size[1]]);
        }
        out
    }
}

/// Intrinsic dimension: a fixed value or `"auto"` for estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    Auto,
    Fixed(usize),
}

impl Serialize for Dimension {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Dimension::Auto => s.serialize_str("auto"),
            Dimension::Fixed(d) => s.serialize_u64(*d as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Dimension {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(Dimension::Fixed(n as usize)),
            Raw::S(s) if s == "auto" => Ok(Dimension::Auto),
            Raw::S(s) => Err(serde::de::Error::custom(format!("expected a number or \"auto\", got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    pub k: usize,
    pub d: Dimension,
    pub reg: f64,
    pub max_training: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        let p = FitParams::default();
        EmbeddingConfig {
            k: p.k,
            d: Dimension::Fixed(p.d),
            reg: p.reg,
            max_training: p.max_training,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatisticsConfig {
    pub cells: usize,
    /// Total fractional growth of the embedded bounding box.
    pub expand: f64,
    pub min_support: u64,
    pub shrinkage: f64,
    /// Smoothing bandwidth in cells.
    pub bandwidth: f64,
    pub cond_cap: f64,
    pub endpoints: EndpointPolicy,
}

impl Default for StatisticsConfig {
    fn default() -> Self {
        StatisticsConfig {
            cells: 24,
            expand: 0.05,
            min_support: DEFAULT_MIN_SUPPORT,
            shrinkage: DEFAULT_SHRINKAGE,
            bandwidth: 1.0,
            cond_cap: DEFAULT_COND_CAP,
            endpoints: EndpointPolicy::OneSided,
        }
    }
}

impl StatisticsConfig {
    pub fn grid_for<'a>(&self, points: impl IntoIterator<Item = &'a [f64]>, d: usize) -> Option<GridSpec> {
        GridSpec::covering(points, d, self.cells, self.expand)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    /// Finite-difference step as a fraction of the metric grid spacing.
    pub fd_fraction: f64,
    /// Largest transport substep as a fraction of the grid spacing.
    pub substep_fraction: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub count_step: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            fd_fraction: 0.5,
            substep_fraction: 0.25,
            tolerance: 1e-6,
            max_iterations: 100,
            count_step: 1e-4,
        }
    }
}

impl GeometryConfig {
    pub fn settings(&self, grid: &GridSpec) -> LocateSettings {
        LocateSettings {
            transport: TransportSettings::from_fractions(grid, self.fd_fraction, self.substep_fraction),
            tolerance: self.tolerance,
            max_iterations: self.max_iterations,
            count_step: self.count_step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineConfig {
    /// Training trajectory length in segments.
    pub segments: usize,
    pub sensors: SuiteSpec,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default)]
    pub statistics: StatisticsConfig,
    #[serde(default)]
    pub geometry: GeometryConfig,
}

impl MachineConfig {
    pub fn new(segments: usize, sensors: SuiteSpec) -> Self {
        MachineConfig {
            segments,
            sensors,
            embedding: EmbeddingConfig::default(),
            statistics: StatisticsConfig::default(),
            geometry: GeometryConfig::default(),
        }
    }

    fn validate(&self) -> Result<(), String> {
        if self.segments == 0 {
            return Err("segments must be positive".into());
        }
        let e = &self.embedding;
        if let Dimension::Fixed(d) = e.d {
            if d == 0 || e.k <= d {
                return Err(format!("embedding needs k > d ≥ 1, got k = {}, d = {d}", e.k));
            }
        }
        if !(e.reg > 0.0) {
            return Err("embedding.reg must be positive".into());
        }
        let s = &self.statistics;
        if s.cells < 2 || !(s.expand >= 0.0) || !(0.0..=1.0).contains(&s.shrinkage) || !(s.bandwidth >= 0.0) {
            return Err("statistics parameters out of range".into());
        }
        let g = &self.geometry;
        if !(g.fd_fraction > 0.0 && g.substep_fraction > 0.0 && g.tolerance > 0.0 && g.count_step > 0.0) {
            return Err("geometry steps and tolerances must be positive".into());
        }
        Ok(())
    }
}
