//! Coordinate-free geometry on a chart: metric fields, the induced affine
//! connection, parallel transport, and anchor-relative locations.
//!
//! Everything here works in whatever chart the metric field is expressed in.
//! The connection is the torsion-free metric connection
//!
//! ```text
//! Γ^k_lm = ½ g^kn (∂_l g_mn + ∂_m g_nl − ∂_n g_lm)
//! ```
//!
//! and transporting a vector `V` along a short step `δx` changes it by
//! `δV^k = −Γ^k_lm V^l δx^m`.

mod connection;
mod field;
mod grid;
mod locate;
mod transport;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use connection::{christoffel_at, ChristoffelSymbols};
pub use field::{AnalyticMetric, MetricField, MetricSource, MetricTensor};
pub use grid::GridSpec;
pub use locate::{
    locate, map_grid, map_grid_with, AnchorFrame, LocateSettings, Located, RelativeLocation,
    ResolvedFrame,
};
pub use transport::{co_transport, self_transport, transport_step, SelfTransport, TransportSettings};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("point {point:?} lies outside the metric field's domain")]
    OutsideDomain { point: Vec<f64> },
    #[error("metric at {point:?} is not invertible")]
    SingularMetric { point: Vec<f64> },
    #[error("transport left the domain; last valid point {:?}", last_valid.coords())]
    DomainExit { last_valid: ChartPoint },
    #[error("no location found; best {best:?} with residual {residual:e}")]
    NoSolution { best: RelativeLocation, residual: f64 },
    #[error("invalid anchor frame: {0}")]
    InvalidFrame(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid metric tensor: {0}")]
    InvalidMetric(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// A location in some machine-specific chart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartPoint(Vec<f64>);

impl ChartPoint {
    pub fn new(coords: impl Into<Vec<f64>>) -> Result<Self> {
        let coords = coords.into();
        if coords.is_empty() {
            return Err(GeometryError::InvalidArgument("empty chart point".into()));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(GeometryError::NonFinite("chart point"));
        }
        Ok(ChartPoint(coords))
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Euclidean distance in chart coordinates.
    pub fn chart_distance(&self, other: &ChartPoint) -> f64 {
        norm(&sub(&self.0, &other.0))
    }
}

/// A vector attached to a chart point.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    pub base: ChartPoint,
    pub components: Vec<f64>,
}

impl TangentVector {
    pub fn new(base: ChartPoint, components: impl Into<Vec<f64>>) -> Result<Self> {
        let components = components.into();
        if components.len() != base.dim() {
            return Err(GeometryError::DimensionMismatch {
                expected: base.dim(),
                got: components.len(),
            });
        }
        if components.iter().any(|c| !c.is_finite()) {
            return Err(GeometryError::NonFinite("tangent vector"));
        }
        Ok(TangentVector { base, components })
    }

    /// Squared length `g_kl V^k V^l` under the given metric.
    pub fn squared_length(&self, g: &MetricTensor) -> f64 {
        let m = g.matrix();
        let v = &self.components;
        let mut acc = 0.0;
        for k in 0..v.len() {
            for l in 0..v.len() {
                acc += m[(k, l)] * v[k] * v[l];
            }
        }
        acc
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub(crate) fn add_scaled(a: &[f64], b: &[f64], s: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + s * y).collect()
}
