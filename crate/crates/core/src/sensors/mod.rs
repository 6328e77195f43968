//! Simulated observers: pinhole cameras whose focal-plane image of the
//! particle is either warped by a quadratic "goggle" distortion or read out
//! through a pair of Fourier coefficients.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{MeasurementSegment, MeasurementSeries};
use crate::exec::{self, Strategy};
use crate::world::{SurfacePatch, WorldTrajectory};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SensorError {
    #[error("point lies behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("channel {channel}: {source}")]
    Channel {
        channel: usize,
        #[source]
        source: Box<SensorError>,
    },
    #[error("invalid sensor: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, SensorError>;

/// A pinhole camera. `axes` holds the camera's x, y and viewing (z) axes in
/// laboratory coordinates, one per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinholeCamera {
    pub position: [f64; 3],
    pub axes: [[f64; 3]; 3],
    pub focal: f64,
}

impl PinholeCamera {
    pub fn new(position: [f64; 3], axes: [[f64; 3]; 3], focal: f64) -> Result<Self> {
        let r = Matrix3::from_row_slice(&axes.concat());
        if ((r * r.transpose()) - Matrix3::identity()).amax() > 1e-9 || r.determinant() < 0.0 {
            return Err(SensorError::Invalid("camera axes are not a rotation".into()));
        }
        if !(focal > 0.0) {
            return Err(SensorError::Invalid("focal length must be positive".into()));
        }
        Ok(PinholeCamera {
            position,
            axes,
            focal,
        })
    }

    /// Camera at `position` looking at `target`, rolled by `roll` radians
    /// about the viewing axis.
    pub fn looking_at(position: [f64; 3], target: [f64; 3], roll: f64, focal: f64) -> Result<Self> {
        let z = Vector3::from(target) - Vector3::from(position);
        if z.norm() == 0.0 {
            return Err(SensorError::Invalid("camera sits on its target".into()));
        }
        let z = z.normalize();
        let helper = if z.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let x0 = helper.cross(&z).normalize();
        let x = Rotation3::from_axis_angle(&Unit::new_normalize(z), roll) * x0;
        let y = z.cross(&x);
        PinholeCamera::new(position, [x.into(), y.into(), z.into()], focal)
    }

    fn rotation(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.axes.concat())
    }

    /// Camera-frame coordinates of a laboratory point.
    pub fn to_camera(&self, p: [f64; 3]) -> Vector3<f64> {
        self.rotation() * (Vector3::from(p) - Vector3::from(self.position))
    }

    pub fn project(&self, p: [f64; 3]) -> Result<[f64; 2]> {
        let c = self.to_camera(p);
        if !(c.z > 0.0) {
            return Err(SensorError::BehindCamera { depth: c.z });
        }
        Ok([self.focal * c.x / c.z, self.focal * c.y / c.z])
    }
}

/// Two bivariate quadratics; row `i` holds
/// `[c0, c1, c2, c3, c4, c5]` for `c0 + c1·y1 + c2·y2 + c3·y1² + c4·y1·y2 + c5·y2²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticDistortion {
    pub coefficients: [[f64; 6]; 2],
}

/// Ranges for randomly drawn distortions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistortionRanges {
    /// Rotation angle bound, degrees.
    pub rotation_deg: f64,
    pub scale: [f64; 2],
    pub skew: f64,
    pub translation: f64,
    /// Bound on each quadratic coefficient.
    pub quadratic: f64,
}

impl Default for DistortionRanges {
    fn default() -> Self {
        DistortionRanges {
            rotation_deg: 30.0,
            scale: [0.8, 1.25],
            skew: 0.2,
            translation: 0.3,
            quadratic: 0.3,
        }
    }
}

impl DistortionRanges {
    /// No distortion at all.
    pub fn none() -> Self {
        DistortionRanges {
            rotation_deg: 0.0,
            scale: [1.0, 1.0],
            skew: 0.0,
            translation: 0.0,
            quadratic: 0.0,
        }
    }
}

impl QuadraticDistortion {
    pub fn new(coefficients: [[f64; 6]; 2]) -> Result<Self> {
        let det = coefficients[0][1] * coefficients[1][2] - coefficients[0][2] * coefficients[1][1];
        if det.abs() < 1e-12 || coefficients.iter().flatten().any(|c| !c.is_finite()) {
            return Err(SensorError::Invalid("distortion linear part is singular".into()));
        }
        Ok(QuadraticDistortion { coefficients })
    }

    pub fn identity() -> Self {
        QuadraticDistortion {
            coefficients: [[0.0, 1.0, 0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0, 0.0, 0.0]],
        }
    }

    pub fn translation(t: [f64; 2]) -> Self {
        let mut d = QuadraticDistortion::identity();
        d.coefficients[0][0] = t[0];
        d.coefficients[1][0] = t[1];
        d
    }

    /// Rotation · scale · skew linear part, uniform translation and
    /// quadratic terms, all drawn from `ranges`.
    pub fn random(rng: &mut impl Rng, ranges: &DistortionRanges) -> Self {
        let sym = |rng: &mut dyn rand::RngCore, b: f64| if b > 0.0 { rng.random_range(-b..=b) } else { 0.0 };
        let theta = sym(rng, ranges.rotation_deg).to_radians();
        let scale = if ranges.scale[1] > ranges.scale[0] {
            rng.random_range(ranges.scale[0]..=ranges.scale[1])
        } else {
            ranges.scale[0]
        };
        let skew = sym(rng, ranges.skew);
        let (s, c) = theta.sin_cos();
        // [[c, −s], [s, c]] · scale · [[1, skew], [0, 1]]
        let a = [[scale * c, scale * (c * skew - s)], [scale * s, scale * (s * skew + c)]];
        let mut coefficients = [[0.0; 6]; 2];
        for i in 0..2 {
            coefficients[i][0] = sym(rng, ranges.translation);
            coefficients[i][1] = a[i][0];
            coefficients[i][2] = a[i][1];
            for q in 3..6 {
                coefficients[i][q] = sym(rng, ranges.quadratic);
            }
        }
        QuadraticDistortion { coefficients }
    }

    pub fn apply(&self, y: [f64; 2]) -> [f64; 2] {
        let terms = [1.0, y[0], y[1], y[0] * y[0], y[0] * y[1], y[1] * y[1]];
        let eval = |row: &[f64; 6]| row.iter().zip(&terms).map(|(c, t)| c * t).sum();
        [eval(&self.coefficients[0]), eval(&self.coefficients[1])]
    }
}

/// Reads out `(cos k1·y, sin k2·y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierProbe {
    pub k1: [f64; 2],
    pub k2: [f64; 2],
}

impl FourierProbe {
    pub fn new(k1: [f64; 2], k2: [f64; 2]) -> Result<Self> {
        let n1 = k1[0].hypot(k1[1]);
        let n2 = k2[0].hypot(k2[1]);
        let cross = k1[0] * k2[1] - k1[1] * k2[0];
        if n1 == 0.0 || n2 == 0.0 || cross.abs() <= 1e-9 * n1 * n2 {
            return Err(SensorError::Invalid("wave vectors must be nonzero and not parallel".into()));
        }
        Ok(FourierProbe { k1, k2 })
    }

    /// Magnitudes uniform in `magnitude`, directions uniform but at least
    /// 20° from parallel.
    pub fn random(rng: &mut impl Rng, magnitude: [f64; 2]) -> Self {
        let m1 = rng.random_range(magnitude[0]..=magnitude[1]);
        let m2 = rng.random_range(magnitude[0]..=magnitude[1]);
        let a1 = rng.random::<f64>() * std::f64::consts::TAU;
        let min_gap = 20f64.to_radians();
        let a2 = a1 + rng.random_range(min_gap..std::f64::consts::PI - min_gap);
        FourierProbe {
            k1: [m1 * a1.cos(), m1 * a1.sin()],
            k2: [m2 * a2.cos(), m2 * a2.sin()],
        }
    }

    pub fn measure(&self, y: [f64; 2]) -> [f64; 2] {
        let p1 = self.k1[0] * y[0] + self.k1[1] * y[1];
        let p2 = self.k2[0] * y[0] + self.k2[1] * y[1];
        [p1.cos(), p2.sin()]
    }
}

/// How a camera's focal-plane position becomes two measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "readout", rename_all = "kebab-case")]
pub enum Readout {
    Distorted { distortion: QuadraticDistortion },
    Fourier { probe: FourierProbe },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub camera: PinholeCamera,
    #[serde(flatten)]
    pub readout: Readout,
}

impl Channel {
    pub fn measure(&self, p: [f64; 3]) -> Result<[f64; 2]> {
        let y = self.camera.project(p)?;
        Ok(match &self.readout {
            Readout::Distorted { distortion } => distortion.apply(y),
            Readout::Fourier { probe } => probe.measure(y),
        })
    }
}

/// An observer's full set of channels, two measurements each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSuite {
    pub channels: Vec<Channel>,
}

impl SensorSuite {
    pub fn width(&self) -> usize {
        2 * self.channels.len()
    }

    pub fn measure(&self, p: [f64; 3]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.width());
        self.measure_into(p, &mut out)?;
        Ok(out)
    }

    fn measure_into(&self, p: [f64; 3], out: &mut Vec<f64>) -> Result<()> {
        for (channel, ch) in self.channels.iter().enumerate() {
            let m = ch.measure(p).map_err(|e| SensorError::Channel {
                channel,
                source: Box::new(e),
            })?;
            out.extend_from_slice(&m);
        }
        Ok(())
    }
}

/// Counts from measuring or embedding a segmented series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Truncation {
    pub input_segments: usize,
    pub output_segments: usize,
    pub failed_points: usize,
    /// Points dropped because their surviving run was shorter than two.
    pub dropped_points: usize,
}

/// Splits a run of per-point results at failures, keeping pieces with at
/// least two points. Returns `(start, values)` pieces.
pub(crate) fn split_runs(
    results: Vec<Option<Vec<f64>>>,
    truncation: &mut Truncation,
) -> Vec<(usize, Vec<f64>)> {
    let mut pieces = Vec::new();
    let mut current: Option<(usize, Vec<f64>, usize)> = None;
    let close = |cur: Option<(usize, Vec<f64>, usize)>, pieces: &mut Vec<(usize, Vec<f64>)>, t: &mut Truncation| {
        if let Some((start, values, n)) = cur {
            if n >= 2 {
                pieces.push((start, values));
            } else {
                t.dropped_points += n;
            }
        }
    };
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Some(v) => match current.as_mut() {
                Some((_, values, n)) => {
                    values.extend_from_slice(&v);
                    *n += 1;
                }
                None => current = Some((i, v, 1)),
            },
            None => {
                truncation.failed_points += 1;
                close(current.take(), &mut pieces, truncation);
            }
        }
    }
    close(current, &mut pieces, truncation);
    pieces
}

/// Measures every point of a trajectory. Points a channel cannot see split
/// their segment.
pub fn measure_trajectory(
    suite: &SensorSuite,
    traj: &WorldTrajectory,
    strategy: Strategy,
) -> (MeasurementSeries, Truncation) {
    let width = suite.width();
    let dt = traj.segments.first().map_or(1.0, |s| s.dt);
    let per_segment = exec::map(strategy, &traj.segments, |seg| {
        let results = seg.lab.iter().map(|p| suite.measure(*p).ok()).collect();
        let mut t = Truncation::default();
        let pieces = split_runs(results, &mut t);
        (seg.segment_id, pieces, t)
    });
    let mut truncation = Truncation {
        input_segments: traj.segments.len(),
        ..Default::default()
    };
    let mut segments = Vec::new();
    for (segment_id, pieces, t) in per_segment {
        truncation.failed_points += t.failed_points;
        truncation.dropped_points += t.dropped_points;
        for (start, values) in pieces {
            segments.push(MeasurementSegment {
                segment_id,
                start,
                width,
                values,
            });
        }
    }
    truncation.output_segments = segments.len();
    (MeasurementSeries { dt, segments }, truncation)
}

/// Recipe for a sensor suite; realized against a surface patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SuiteSpec {
    /// Cameras followed by random quadratic distortions.
    Goggle {
        seed: u64,
        cameras: usize,
        #[serde(default)]
        placement: CameraPlacement,
        #[serde(default)]
        distortion: DistortionRanges,
    },
    /// Cameras read out through random Fourier probes.
    Fourier {
        seed: u64,
        cameras: usize,
        #[serde(default)]
        placement: CameraPlacement,
        #[serde(default = "default_wave_numbers")]
        wave_numbers: [f64; 2],
    },
    /// A fully specified suite.
    Explicit { channels: Vec<Channel> },
}

fn default_wave_numbers() -> [f64; 2] {
    [2.0, 6.0]
}

/// Random camera poses around the patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraPlacement {
    /// Distance range from the patch centroid.
    pub distance: [f64; 2],
    /// Half-angle of the cone of viewing positions around the patch normal.
    pub view_cone_deg: f64,
    /// Largest angle between the viewing axis and the centroid direction.
    pub jitter_deg: f64,
}

impl Default for CameraPlacement {
    fn default() -> Self {
        CameraPlacement {
            distance: [3.0, 5.0],
            view_cone_deg: 60.0,
            jitter_deg: 15.0,
        }
    }
}

const PLACEMENT_ATTEMPTS: usize = 1000;

impl CameraPlacement {
    fn draw(&self, rng: &mut ChaCha8Rng, surface: &SurfacePatch) -> Result<PinholeCamera> {
        let centroid = Vector3::from(surface.lab_centroid());
        let normal = patch_normal(surface);
        let probes = patch_probe_points(surface);
        for _ in 0..PLACEMENT_ATTEMPTS {
            let dir = random_in_cone(rng, &normal, self.view_cone_deg.to_radians());
            let dist = if self.distance[1] > self.distance[0] {
                rng.random_range(self.distance[0]..=self.distance[1])
            } else {
                self.distance[0]
            };
            let position = centroid + dir * dist;
            let to_target = (centroid - position).normalize();
            let aim = random_in_cone(rng, &to_target, self.jitter_deg.to_radians());
            let roll = rng.random::<f64>() * std::f64::consts::TAU;
            let target = position + aim;
            let cam = PinholeCamera::looking_at(position.into(), target.into(), roll, 1.0)?;
            if probes.iter().all(|p| cam.to_camera(*p).z > 0.1 * dist) {
                return Ok(cam);
            }
        }
        Err(SensorError::Invalid("no camera pose sees the whole patch".into()))
    }
}

fn patch_normal(surface: &SurfacePatch) -> Vector3<f64> {
    let c = surface.centroid();
    let h = 1e-4 * surface.size[0].min(surface.size[1]);
    let at = |p: [f64; 2]| Vector3::from(surface.lab_position(p).expect("centroid stencil on patch"));
    let du = at([c[0] + h, c[1]]) - at([c[0] - h, c[1]]);
    let dw = at([c[0], c[1] + h]) - at([c[0], c[1] - h]);
    let n = du.cross(&dw).normalize();
    // Point away from the cylinder axis (or along +normal for planes).
    if n.dot(&(at(c) - Vector3::from(surface.lab_centroid()))) < 0.0 {
        -n
    } else {
        n
    }
}

fn patch_probe_points(surface: &SurfacePatch) -> Vec<[f64; 3]> {
    let n = 8;
    let mut out = Vec::new();
    for i in 0..=n {
        for j in 0..=n {
            let p = [i as f64 / n as f64 * surface.size[0], j as f64 / n as f64 * surface.size[1]];
            out.push(surface.lab_position(p).expect("grid on patch"));
        }
    }
    out
}

/// Unit vector within `half_angle` of `axis`, uniform over the spherical cap.
fn random_in_cone(rng: &mut ChaCha8Rng, axis: &Vector3<f64>, half_angle: f64) -> Vector3<f64> {
    let axis = axis.normalize();
    let cos_max = half_angle.cos();
    let cos_t = 1.0 - rng.random::<f64>() * (1.0 - cos_max);
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi = rng.random::<f64>() * std::f64::consts::TAU;
    let helper = if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = helper.cross(&axis).normalize();
    let e2 = axis.cross(&e1);
    axis * cos_t + (e1 * phi.cos() + e2 * phi.sin()) * sin_t
}

impl SuiteSpec {
    /// Draws the concrete suite for `surface`. The same spec and surface
    /// always give the same suite.
    pub fn realize(&self, surface: &SurfacePatch) -> Result<SensorSuite> {
        match self {
            SuiteSpec::Explicit { channels } => Ok(SensorSuite {
                channels: channels.clone(),
            }),
            SuiteSpec::Goggle {
                seed,
                cameras,
                placement,
                distortion,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let channels = (0..*cameras)
                    .map(|_| {
                        let camera = placement.draw(&mut rng, surface)?;
                        let distortion = QuadraticDistortion::random(&mut rng, distortion);
                        Ok(Channel {
                            camera,
                            readout: Readout::Distorted { distortion },
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(SensorSuite { channels })
            }
            SuiteSpec::Fourier {
                seed,
                cameras,
                placement,
                wave_numbers,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let channels = (0..*cameras)
                    .map(|_| {
                        let camera = placement.draw(&mut rng, surface)?;
                        let probe = FourierProbe::random(&mut rng, *wave_numbers);
                        Ok(Channel {
                            camera,
                            readout: Readout::Fourier { probe },
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(SensorSuite { channels })
            }
        }
    }
}
