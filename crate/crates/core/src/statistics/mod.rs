//! Local velocity statistics of chart trajectories and the metric they induce.
//!
//! The velocity covariance `c^kl(x) = ⟨ẋ^k ẋ^l⟩` near `x` transforms as a
//! contravariant tensor, so its inverse is a metric `g_kl` in whatever chart
//! the trajectory was recorded in.

mod covariance;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{ChartPoint, GeometryError};

pub use covariance::{
    accumulate, accumulate_segments, accumulate_segments_with, smooth, to_metric,
    CovarianceAccumulator, CovarianceField, Support, DEFAULT_COND_CAP, DEFAULT_MIN_SUPPORT,
    DEFAULT_SHRINKAGE,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("invalid segment {segment_id}: {reason}")]
    InvalidSegment { segment_id: u64, reason: String },
    #[error("covariance in cell {cell} cannot be inverted (condition number {condition:e})")]
    SingularCovariance { cell: usize, condition: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, StatsError>;

/// A uniformly sampled path in chart coordinates. Points are stored flat,
/// `dim` values per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySegment {
    pub segment_id: u64,
    pub dt: f64,
    pub dim: usize,
    pub coords: Vec<f64>,
}

impl TrajectorySegment {
    pub fn new(segment_id: u64, dt: f64, dim: usize, coords: Vec<f64>) -> Result<Self> {
        let invalid = |reason: &str| StatsError::InvalidSegment {
            segment_id,
            reason: reason.into(),
        };
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(invalid("dt must be positive"));
        }
        if dim == 0 || !coords.len().is_multiple_of(dim) {
            return Err(invalid("coordinate count is not a multiple of the dimension"));
        }
        if coords.len() < 2 * dim {
            return Err(invalid("needs at least two points"));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(invalid("non-finite coordinate"));
        }
        Ok(TrajectorySegment {
            segment_id,
            dt,
            dim,
            coords,
        })
    }

    pub fn from_points(segment_id: u64, dt: f64, points: &[ChartPoint]) -> Result<Self> {
        let dim = points.first().map_or(0, |p| p.dim());
        if points.iter().any(|p| p.dim() != dim) {
            return Err(StatsError::InvalidSegment {
                segment_id,
                reason: "points of mixed dimension".into(),
            });
        }
        let coords = points.iter().flat_map(|p| p.coords().iter().copied()).collect();
        TrajectorySegment::new(segment_id, dt, dim, coords)
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim)
    }
}

/// How run ends are treated when differencing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EndpointPolicy {
    /// Central differences only; the first and last samples get no velocity.
    #[default]
    Omit,
    /// Central differences inside, forward/backward differences at the ends.
    OneSided,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocitySample {
    pub at: ChartPoint,
    pub velocity: Vec<f64>,
}

/// Central-difference velocities at interior samples.
pub fn estimate_velocities(seg: &TrajectorySegment) -> Result<Vec<VelocitySample>> {
    estimate_velocities_with(seg, EndpointPolicy::Omit)
}

pub fn estimate_velocities_with(
    seg: &TrajectorySegment,
    policy: EndpointPolicy,
) -> Result<Vec<VelocitySample>> {
    check_dt(seg)?;
    let mut out = Vec::new();
    let mut err = None;
    for_each_velocity(seg, policy, |at, v| {
        if err.is_some() {
            return;
        }
        match ChartPoint::new(at.to_vec()) {
            Ok(at) => out.push(VelocitySample {
                at,
                velocity: v.to_vec(),
            }),
            Err(e) => err = Some(e),
        }
    });
    match err {
        Some(e) => Err(e.into()),
        None => Ok(out),
    }
}

fn check_dt(seg: &TrajectorySegment) -> Result<()> {
    if !(seg.dt > 0.0) || !seg.dt.is_finite() {
        return Err(StatsError::InvalidSegment {
            segment_id: seg.segment_id,
            reason: "dt must be positive".into(),
        });
    }
    Ok(())
}

/// Calls `f(position, velocity)` for every difference the policy produces.
/// Two-point segments yield one forward difference, attributed to their
/// midpoint under [`EndpointPolicy::Omit`] and to both ends otherwise.
pub(crate) fn for_each_velocity(
    seg: &TrajectorySegment,
    policy: EndpointPolicy,
    mut f: impl FnMut(&[f64], &[f64]),
) {
    let d = seg.dim;
    let n = seg.len();
    let mut v = vec![0.0; d];
    let mut at = vec![0.0; d];
    let diff = |v: &mut [f64], a: &[f64], b: &[f64], span: f64| {
        for k in 0..d {
            v[k] = (b[k] - a[k]) / span;
        }
    };
    if n < 2 {
        return;
    }
    if n == 2 {
        diff(&mut v, seg.point(0), seg.point(1), seg.dt);
        match policy {
            EndpointPolicy::Omit => {
                for k in 0..d {
                    at[k] = 0.5 * (seg.point(0)[k] + seg.point(1)[k]);
                }
                f(&at, &v);
            }
            EndpointPolicy::OneSided => {
                f(seg.point(0), &v);
                f(seg.point(1), &v);
            }
        }
        return;
    }
    if policy == EndpointPolicy::OneSided {
        diff(&mut v, seg.point(0), seg.point(1), seg.dt);
        f(seg.point(0), &v);
    }
    for i in 1..n - 1 {
        diff(&mut v, seg.point(i - 1), seg.point(i + 1), 2.0 * seg.dt);
        f(seg.point(i), &v);
    }
    if policy == EndpointPolicy::OneSided {
        diff(&mut v, seg.point(n - 2), seg.point(n - 1), seg.dt);
        f(seg.point(n - 1), &v);
    }
}
