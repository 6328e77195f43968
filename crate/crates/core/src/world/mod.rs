//! Ground-truth stimulus simulation: a particle moving freely on a surface
//! patch, observed in short independent segments whose initial conditions
//! are drawn from the equilibrium (Boltzmann) distribution.
//!
//! Patches use isometric intrinsic coordinates `(u, w)`, so the kinetic
//! energy is `½ m |ẋ|²`, free motion is a straight line in the chart and the
//! equilibrium velocity covariance is `(kT / m) I` everywhere.

use nalgebra::{DMatrix, Matrix3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Strategy};
use crate::statistics::{StatsError, TrajectorySegment};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorldError {
    #[error("point {0:?} is off the patch")]
    OffPatch([f64; 2]),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("segment {segment_id}: no usable draw after {attempts} attempts")]
    Exhausted { segment_id: u64, attempts: u32 },
}

pub type Result<T> = std::result::Result<T, WorldError>;

/// Rigid pose: `lab = rotation · local + translation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    /// Rotation axis; need not be normalized.
    pub axis: [f64; 3],
    pub angle_deg: f64,
    pub translation: [f64; 3],
}

impl Default for Placement {
    fn default() -> Self {
        Placement {
            axis: [0.0, 0.0, 1.0],
            angle_deg: 0.0,
            translation: [0.0; 3],
        }
    }
}

impl Placement {
    pub fn rotation(&self) -> Matrix3<f64> {
        let axis = Vector3::from(self.axis);
        if self.angle_deg == 0.0 || axis.norm() == 0.0 {
            return Matrix3::identity();
        }
        Rotation3::from_axis_angle(&Unit::new_normalize(axis), self.angle_deg.to_radians()).into_inner()
    }

    pub fn apply(&self, local: Vector3<f64>) -> Vector3<f64> {
        self.rotation() * local + Vector3::from(self.translation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SurfaceKind {
    Cylinder { radius: f64 },
    Plane,
}

/// A rectangular patch `[0, size₀] × [0, size₁]` of a surface in
/// isometric coordinates `(u, w)`: `u` along the cylinder axis, `w` arc
/// length around it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfacePatch {
    pub surface: SurfaceKind,
    #[serde(default = "unit_size")]
    pub size: [f64; 2],
    #[serde(default)]
    pub placement: Placement,
}

fn unit_size() -> [f64; 2] {
    [1.0, 1.0]
}

impl SurfacePatch {
    pub fn cylinder(radius: f64) -> Self {
        SurfacePatch {
            surface: SurfaceKind::Cylinder { radius },
            size: unit_size(),
            placement: Placement::default(),
        }
    }

    pub fn plane() -> Self {
        SurfacePatch {
            surface: SurfaceKind::Plane,
            size: unit_size(),
            placement: Placement::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.size.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(WorldError::InvalidParameter("patch size must be positive".into()));
        }
        if let SurfaceKind::Cylinder { radius } = self.surface {
            if !(radius > 0.0) {
                return Err(WorldError::InvalidParameter("radius must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        (0..2).all(|i| p[i] >= 0.0 && p[i] <= self.size[i])
    }

    pub fn centroid(&self) -> [f64; 2] {
        [0.5 * self.size[0], 0.5 * self.size[1]]
    }

    /// Laboratory position of an intrinsic point without the patch check.
    fn embed(&self, p: [f64; 2]) -> Vector3<f64> {
        let local = match self.surface {
            SurfaceKind::Cylinder { radius } => Vector3::new(
                radius * (p[1] / radius).cos(),
                radius * (p[1] / radius).sin(),
                p[0],
            ),
            SurfaceKind::Plane => Vector3::new(p[0], p[1], 0.0),
        };
        self.placement.apply(local)
    }

    pub fn lab_position(&self, p: [f64; 2]) -> Result<[f64; 3]> {
        if !self.contains(p) || !p.iter().all(|x| x.is_finite()) {
            return Err(WorldError::OffPatch(p));
        }
        Ok(self.embed(p).into())
    }

    /// Laboratory centroid of the patch surface (mean over a fine grid),
    /// which cameras aim at.
    pub fn lab_centroid(&self) -> [f64; 3] {
        let n = 16;
        let mut acc = Vector3::zeros();
        for i in 0..n {
            for j in 0..n {
                let p = [
                    (i as f64 + 0.5) / n as f64 * self.size[0],
                    (j as f64 + 0.5) / n as f64 * self.size[1],
                ];
                acc += self.embed(p);
            }
        }
        (acc / (n * n) as f64).into()
    }
}

/// External potential. Only free motion is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Potential {
    #[default]
    Zero,
}

/// Distribution of initial velocities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "kebab-case")]
pub enum VelocityLaw {
    /// Gaussian with covariance `(kT / mass) I`.
    Boltzmann {
        kt: f64,
        mass: f64,
        #[serde(default)]
        potential: Potential,
    },
    /// Fixed speed, uniformly random direction.
    ConstantSpeed { speed: f64 },
}

impl VelocityLaw {
    pub fn boltzmann(kt: f64, mass: f64) -> Self {
        VelocityLaw::Boltzmann {
            kt,
            mass,
            potential: Potential::Zero,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            VelocityLaw::Boltzmann { kt, mass, .. } => kt > 0.0 && mass > 0.0,
            VelocityLaw::ConstantSpeed { speed } => speed >= 0.0 && speed.is_finite(),
        };
        if !ok {
            return Err(WorldError::InvalidParameter(format!("{self:?}")));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut impl Rng) -> [f64; 2] {
        match *self {
            VelocityLaw::Boltzmann { kt, mass, .. } => {
                let s = (kt / mass).sqrt();
                [s * rng.sample::<f64, _>(StandardNormal), s * rng.sample::<f64, _>(StandardNormal)]
            }
            VelocityLaw::ConstantSpeed { speed } => {
                let phi = rng.random::<f64>() * std::f64::consts::TAU;
                [speed * phi.cos(), speed * phi.sin()]
            }
        }
    }

    /// Largest speed worth simulating for the start-region margin.
    fn speed_bound(&self) -> f64 {
        match *self {
            VelocityLaw::Boltzmann { kt, mass, .. } => 6.0 * (kt / mass).sqrt(),
            VelocityLaw::ConstantSpeed { speed } => speed,
        }
    }
}

/// Closed-form equilibrium statistics in the isometric chart.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticCovariance {
    pub c: DMatrix<f64>,
    pub g: DMatrix<f64>,
}

impl AnalyticCovariance {
    /// The same statistics in the chart `y = J x`.
    pub fn transformed(&self, j: &DMatrix<f64>) -> Self {
        let c = j * &self.c * j.transpose();
        let g = c.clone().try_inverse().expect("invertible chart map");
        AnalyticCovariance { c, g }
    }
}

/// `c = kT μ⁻¹` and `g = μ / kT` for the Boltzmann law (`μ = m I` here);
/// `c = v²/2 I` for constant speed in random directions.
pub fn analytic_covariance(law: &VelocityLaw) -> AnalyticCovariance {
    let scale = match *law {
        VelocityLaw::Boltzmann { kt, mass, .. } => kt / mass,
        VelocityLaw::ConstantSpeed { speed } => 0.5 * speed * speed,
    };
    AnalyticCovariance {
        c: DMatrix::identity(2, 2) * scale,
        g: DMatrix::identity(2, 2) / scale,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub duration: f64,
    pub dt: f64,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling {
            duration: 0.5,
            dt: 0.05,
        }
    }
}

impl Sampling {
    fn steps(&self) -> usize {
        (self.duration / self.dt + 1e-9).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.duration >= 2.0 * self.dt) {
            return Err(WorldError::InvalidParameter(
                "need dt > 0 and duration ≥ 2·dt".into(),
            ));
        }
        Ok(())
    }
}

/// One recorded run of the particle on the patch.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldSegment {
    pub segment_id: u64,
    pub dt: f64,
    /// Flat `(u, w)` pairs.
    pub intrinsic: Vec<f64>,
    pub lab: Vec<[f64; 3]>,
    /// Index on the segment's full time lattice of the first recorded point;
    /// zero when the particle started on the patch.
    pub first_index: usize,
}

impl WorldSegment {
    pub fn len(&self) -> usize {
        self.lab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lab.is_empty()
    }

    pub fn intrinsic_point(&self, i: usize) -> [f64; 2] {
        [self.intrinsic[2 * i], self.intrinsic[2 * i + 1]]
    }

    pub fn to_trajectory(&self) -> std::result::Result<TrajectorySegment, StatsError> {
        TrajectorySegment::new(self.segment_id, self.dt, 2, self.intrinsic.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WorldTrajectory {
    pub segments: Vec<WorldSegment>,
    /// Draws rejected because fewer than two samples fell on the patch.
    pub discarded: u64,
}

impl WorldTrajectory {
    pub fn n_points(&self) -> usize {
        self.segments.iter().map(|s| s.len()).sum()
    }

    /// The intrinsic-chart trajectory.
    pub fn intrinsic_segments(&self) -> Vec<TrajectorySegment> {
        self.segments
            .iter()
            .map(|s| s.to_trajectory().expect("world segments are valid"))
            .collect()
    }

    /// The same paths with every time step multiplied by `factor`.
    pub fn with_time_scale(&self, factor: f64) -> WorldTrajectory {
        let mut out = self.clone();
        for s in &mut out.segments {
            s.dt *= factor;
        }
        out
    }
}

const MAX_ATTEMPTS: u32 = 10_000;

/// The random stream for one segment.
pub fn segment_rng(seed: u64, segment_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(segment_id);
    rng
}

/// Samples one segment. The particle starts uniformly over the patch grown
/// by the farthest distance it can plausibly travel, moves in a straight
/// line, and only its contiguous run on the patch is recorded; at every
/// recorded time the positions are uniform over the patch. Draws with fewer
/// than two recorded samples are rejected; the second value is the number
/// of rejections.
pub fn sample_segment(
    surface: &SurfacePatch,
    law: &VelocityLaw,
    sampling: &Sampling,
    seed: u64,
    segment_id: u64,
) -> Result<(WorldSegment, u32)> {
    surface.validate()?;
    law.validate()?;
    sampling.validate()?;
    let mut rng = segment_rng(seed, segment_id);
    let steps = sampling.steps();
    let margin = law.speed_bound() * steps as f64 * sampling.dt;
    for attempt in 0..MAX_ATTEMPTS {
        let x0 = [
            -margin + rng.random::<f64>() * (surface.size[0] + 2.0 * margin),
            -margin + rng.random::<f64>() * (surface.size[1] + 2.0 * margin),
        ];
        let v = law.draw(&mut rng);
        let mut first = None;
        let mut intrinsic = Vec::new();
        for i in 0..=steps {
            let t = i as f64 * sampling.dt;
            let p = [x0[0] + v[0] * t, x0[1] + v[1] * t];
            if surface.contains(p) {
                first.get_or_insert(i);
                intrinsic.extend_from_slice(&p);
            } else if first.is_some() {
                break;
            }
        }
        if intrinsic.len() >= 4 {
            let lab = intrinsic
                .chunks_exact(2)
                .map(|p| surface.embed([p[0], p[1]]).into())
                .collect();
            return Ok((
                WorldSegment {
                    segment_id,
                    dt: sampling.dt,
                    intrinsic,
                    lab,
                    first_index: first.unwrap_or(0),
                },
                attempt,
            ));
        }
    }
    Err(WorldError::Exhausted {
        segment_id,
        attempts: MAX_ATTEMPTS,
    })
}

/// Samples segments `0..n_segments`, each from its own random stream, so the
/// result is identical for every strategy.
pub fn sample_trajectory(
    surface: &SurfacePatch,
    law: &VelocityLaw,
    sampling: &Sampling,
    n_segments: usize,
    seed: u64,
    strategy: Strategy,
) -> Result<WorldTrajectory> {
    if n_segments == 0 {
        return Err(WorldError::InvalidParameter("need at least one segment".into()));
    }
    let parts = exec::map_range(strategy, n_segments, |id| {
        sample_segment(surface, law, sampling, seed, id as u64)
    });
    let mut out = WorldTrajectory::default();
    for part in parts {
        let (seg, rejected) = part?;
        out.discarded += rejected as u64;
        out.segments.push(seg);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn close3(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
        (0..3).all(|i| (a[i] - b[i]).abs() <= tol)
    }

    #[test]
    fn cylinder_lab_positions() {
        let mut patch = SurfacePatch::cylinder(1.0);
        assert!(close3(patch.lab_position([0.0, 0.0]).unwrap(), [1.0, 0.0, 0.0], 1e-15));
        patch.size = [1.0, 2.0];
        assert!(close3(patch.lab_position([0.0, FRAC_PI_2]).unwrap(), [0.0, 1.0, 0.0], 1e-15));
        assert!(patch.lab_position([0.0, 2.5]).is_err());
    }

    #[test]
    fn plane_lab_positions_and_placement() {
        let mut patch = SurfacePatch::plane();
        assert_eq!(patch.lab_position([0.3, 0.4]).unwrap(), [0.3, 0.4, 0.0]);
        patch.placement = Placement {
            axis: [0.0, 0.0, 1.0],
            angle_deg: 90.0,
            translation: [1.0, 2.0, 3.0],
        };
        assert!(close3(patch.lab_position([0.3, 0.4]).unwrap(), [0.6, 2.3, 3.0], 1e-12));
        assert!(patch.lab_position([-0.1, 0.4]).is_err());
    }

    #[test]
    fn lab_points_lie_on_the_cylinder() {
        let mut patch = SurfacePatch::cylinder(1.0);
        patch.placement = Placement {
            axis: [1.0, 2.0, -0.5],
            angle_deg: 37.0,
            translation: [0.5, -1.0, 2.0],
        };
        let traj = sample_trajectory(&patch, &VelocityLaw::boltzmann(0.01, 1.0), &Sampling::default(), 200, 1, Strategy::Sequential).unwrap();
        let rot = patch.placement.rotation();
        let t = Vector3::from(patch.placement.translation);
        for seg in &traj.segments {
            for (i, lab) in seg.lab.iter().enumerate() {
                let local = rot.transpose() * (Vector3::from(*lab) - t);
                assert!(((local.x * local.x + local.y * local.y).sqrt() - 1.0).abs() < 1e-12);
                assert!((local.z - seg.intrinsic_point(i)[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chord_lengths_match_the_arc_parameterization() {
        // Chord between (u, w) and (u + du, w + dw) on a unit cylinder:
        // sqrt(du² + (2 sin(dw / 2))²), which tends to the intrinsic distance.
        let patch = SurfacePatch::cylinder(1.0);
        for h in [1e-1, 1e-2, 1e-3] {
            let a = patch.lab_position([0.2, 0.3]).unwrap();
            let b = patch.lab_position([0.2 + h * 0.6, 0.3 + h * 0.8]).unwrap();
            let chord = (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt();
            let expect = ((h * 0.6).powi(2) + (2.0 * (h * 0.4).sin()).powi(2)).sqrt();
            assert!((chord - expect).abs() < 1e-14);
            assert!((chord - h).abs() <= h * h * h);
        }
    }

    #[test]
    fn analytic_oracle() {
        let a = analytic_covariance(&VelocityLaw::boltzmann(0.01, 1.0));
        assert!((a.c.clone() - DMatrix::identity(2, 2) * 0.01).amax() < 1e-18);
        assert!((a.g.clone() - DMatrix::identity(2, 2) * 100.0).amax() < 1e-12);
        assert_eq!(analytic_covariance(&VelocityLaw::boltzmann(1.0, 1.0)).c, DMatrix::identity(2, 2));
        let j = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0]);
        let t = a.transformed(&j);
        assert!((t.c[(0, 0)] - 0.09).abs() < 1e-15);
        assert!((t.c[(1, 1)] - 0.01).abs() < 1e-15);
        let v = analytic_covariance(&VelocityLaw::ConstantSpeed { speed: 1.0 });
        assert_eq!(v.c, DMatrix::identity(2, 2) * 0.5);
        assert_eq!(v.g, DMatrix::identity(2, 2) * 2.0);
    }

    #[test]
    fn frozen_particle_barely_moves() {
        let law = VelocityLaw::boltzmann(1e-12, 1.0);
        let sampling = Sampling { duration: 1.0, dt: 0.1 };
        for id in 0..50 {
            let (seg, _) = sample_segment(&SurfacePatch::plane(), &law, &sampling, 3, id).unwrap();
            let a = seg.intrinsic_point(0);
            let b = seg.intrinsic_point(seg.len() - 1);
            assert!(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() <= 1e-5);
        }
    }

    #[test]
    fn free_motion_is_straight_with_constant_speed() {
        let law = VelocityLaw::boltzmann(0.01, 1.0);
        for id in 0..200 {
            let (seg, _) = sample_segment(&SurfacePatch::plane(), &law, &Sampling::default(), 9, id).unwrap();
            let p0 = seg.intrinsic_point(0);
            let p1 = seg.intrinsic_point(1);
            let step = [p1[0] - p0[0], p1[1] - p0[1]];
            for i in 1..seg.len() {
                let a = seg.intrinsic_point(i - 1);
                let b = seg.intrinsic_point(i);
                assert!(((b[0] - a[0]) - step[0]).abs() < 1e-12);
                assert!(((b[1] - a[1]) - step[1]).abs() < 1e-12);
                let q = [b[0] - p0[0], b[1] - p0[1]];
                assert!((q[0] * step[1] - q[1] * step[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_and_strategy_independent() {
        let patch = SurfacePatch::cylinder(1.0);
        let law = VelocityLaw::boltzmann(0.01, 1.0);
        let a = sample_trajectory(&patch, &law, &Sampling::default(), 300, 42, Strategy::Sequential).unwrap();
        let b = sample_trajectory(&patch, &law, &Sampling::default(), 300, 42, Strategy::Parallel).unwrap();
        assert_eq!(a, b);
        let c = sample_trajectory(&patch, &law, &Sampling::default(), 300, 43, Strategy::Sequential).unwrap();
        assert_ne!(a, c);
        let one = sample_trajectory(&patch, &law, &Sampling::default(), 1, 42, Strategy::Sequential).unwrap();
        assert_eq!(one.segments.len(), 1);
        assert!(sample_trajectory(&patch, &law, &Sampling::default(), 0, 42, Strategy::Sequential).is_err());
    }

    #[test]
    fn invalid_parameters() {
        let law = VelocityLaw::boltzmann(-1.0, 1.0);
        assert!(sample_segment(&SurfacePatch::plane(), &law, &Sampling::default(), 0, 0).is_err());
        let short = Sampling { duration: 0.05, dt: 0.05 };
        let law = VelocityLaw::boltzmann(0.01, 1.0);
        assert!(sample_segment(&SurfacePatch::plane(), &law, &short, 0, 0).is_err());
    }
}
