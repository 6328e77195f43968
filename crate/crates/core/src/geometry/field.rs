use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{GeometryError, GridSpec, Result};
use crate::linalg::{matrix_from_flat, matrix_to_flat, symmetrize};

const SYMMETRY_TOL: f64 = 1e-12;
const EDGE_TOL: f64 = 1e-9;

/// A symmetric positive-definite metric tensor `g_kl`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTensor(DMatrix<f64>);

impl MetricTensor {
    pub fn new(g: DMatrix<f64>) -> Result<Self> {
        if !g.is_square() || g.nrows() == 0 {
            return Err(GeometryError::InvalidMetric("not square".into()));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(GeometryError::NonFinite("metric tensor"));
        }
        let scale = g.amax().max(1.0);
        let d = g.nrows();
        for i in 0..d {
            for j in (i + 1)..d {
                if (g[(i, j)] - g[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(GeometryError::InvalidMetric("not symmetric".into()));
                }
            }
        }
        if g.clone().cholesky().is_none() {
            return Err(GeometryError::InvalidMetric("not positive definite".into()));
        }
        Ok(MetricTensor(g))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let mut inv = self
            .0
            .clone()
            .cholesky()
            .expect("validated positive definite")
            .inverse();
        symmetrize(&mut inv);
        inv
    }
}

/// Anything that can report a metric tensor at a chart point.
pub trait MetricSource: Sync {
    fn dim(&self) -> usize;

    /// The metric at `p`, or [`GeometryError::OutsideDomain`].
    fn metric_at(&self, p: &[f64]) -> Result<DMatrix<f64>>;

    fn contains(&self, p: &[f64]) -> bool {
        self.metric_at(p).is_ok()
    }
}

/// Grid-backed metric estimate with multilinear interpolation between cell
/// centers. Nodes without an estimate are `None`; any interpolation that
/// needs one of them is outside the domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricField {
    grid: GridSpec,
    nodes: Vec<Option<Vec<f64>>>,
}

impl MetricField {
    pub fn new(grid: GridSpec, nodes: Vec<Option<MetricTensor>>) -> Result<Self> {
        if nodes.len() != grid.n_cells() {
            return Err(GeometryError::DimensionMismatch {
                expected: grid.n_cells(),
                got: nodes.len(),
            });
        }
        if grid.cells.iter().any(|&c| c < 2) {
            return Err(GeometryError::InvalidArgument(
                "metric grid needs at least two nodes per axis".into(),
            ));
        }
        let d = grid.dim();
        let mut flat = Vec::with_capacity(nodes.len());
        for node in nodes {
            match node {
                Some(g) if g.dim() != d => {
                    return Err(GeometryError::DimensionMismatch {
                        expected: d,
                        got: g.dim(),
                    })
                }
                Some(g) => flat.push(Some(matrix_to_flat(g.matrix()))),
                None => flat.push(None),
            }
        }
        Ok(MetricField { grid, nodes: flat })
    }

    /// Samples `f` at every cell center.
    pub fn from_fn(grid: GridSpec, f: impl Fn(&[f64]) -> DMatrix<f64>) -> Result<Self> {
        let nodes = (0..grid.n_cells())
            .map(|i| MetricTensor::new(f(&grid.center(i))).map(Some))
            .collect::<Result<Vec<_>>>()?;
        MetricField::new(grid, nodes)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn node(&self, flat: usize) -> Option<MetricTensor> {
        self.nodes[flat]
            .as_ref()
            .map(|g| MetricTensor(matrix_from_flat(self.grid.dim(), g)))
    }

    pub fn defined_nodes(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_some()).count()
    }

    fn interpolate(&self, p: &[f64]) -> Result<DMatrix<f64>> {
        let d = self.grid.dim();
        if p.len() != d {
            return Err(GeometryError::DimensionMismatch {
                expected: d,
                got: p.len(),
            });
        }
        let outside = || GeometryError::OutsideDomain { point: p.to_vec() };
        let mut base = vec![0usize; d];
        let mut frac = vec![0.0; d];
        for i in 0..d {
            let t = (p[i] - self.grid.lower[i]) / self.grid.spacing(i) - 0.5;
            let last = (self.grid.cells[i] - 1) as f64;
            if !(t >= -EDGE_TOL) || t > last + EDGE_TOL {
                return Err(outside());
            }
            let t = t.clamp(0.0, last);
            let i0 = (t.floor() as usize).min(self.grid.cells[i] - 2);
            base[i] = i0;
            frac[i] = t - i0 as f64;
        }
        let mut acc = vec![0.0; d * d];
        let mut idx = vec![0usize; d];
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            for i in 0..d {
                let bit = (corner >> i) & 1;
                idx[i] = base[i] + bit;
                w *= if bit == 1 { frac[i] } else { 1.0 - frac[i] };
            }
            if w == 0.0 {
                continue;
            }
            let node = self.nodes[self.grid.ravel(&idx)]
                .as_ref()
                .ok_or_else(outside)?;
            for (a, g) in acc.iter_mut().zip(node) {
                *a += w * g;
            }
        }
        let mut m = matrix_from_flat(d, &acc);
        symmetrize(&mut m);
        Ok(m)
    }
}

impl MetricSource for MetricField {
    fn dim(&self) -> usize {
        self.grid.dim()
    }

    fn metric_at(&self, p: &[f64]) -> Result<DMatrix<f64>> {
        self.interpolate(p)
    }
}

type MetricFn = dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync;

/// A closed-form metric over an axis-aligned box; used as an oracle.
#[derive(Clone)]
pub struct AnalyticMetric {
    lower: Vec<f64>,
    upper: Vec<f64>,
    f: Arc<MetricFn>,
}

impl AnalyticMetric {
    pub fn new(
        lower: Vec<f64>,
        upper: Vec<f64>,
        f: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        assert_eq!(lower.len(), upper.len());
        AnalyticMetric {
            lower,
            upper,
            f: Arc::new(f),
        }
    }

    /// Constant metric over a box.
    pub fn constant(lower: Vec<f64>, upper: Vec<f64>, g: DMatrix<f64>) -> Self {
        AnalyticMetric::new(lower, upper, move |_| g.clone())
    }

    /// `g = diag(1, r²)` in (r, θ) coordinates: the Euclidean plane in polar form.
    pub fn polar_plane(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        AnalyticMetric::new(lower, upper, |p| {
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, p[0] * p[0]])
        })
    }

    /// The same metric multiplied by a constant.
    pub fn scaled(&self, factor: f64) -> Self {
        let f = Arc::clone(&self.f);
        AnalyticMetric::new(self.lower.clone(), self.upper.clone(), move |p| f(p) * factor)
    }
}

impl fmt::Debug for AnalyticMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AnalyticMetric")
            .field("lower", &self.lower)
            .field("upper", &self.upper)
            .finish_non_exhaustive()
    }
}

impl MetricSource for AnalyticMetric {
    fn dim(&self) -> usize {
        self.lower.len()
    }

    fn metric_at(&self, p: &[f64]) -> Result<DMatrix<f64>> {
        if p.len() != self.dim() {
            return Err(GeometryError::DimensionMismatch {
                expected: self.dim(),
                got: p.len(),
            });
        }
        let inside = p
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(x, (l, u))| *x >= *l && *x <= *u);
        if !inside {
            return Err(GeometryError::OutsideDomain { point: p.to_vec() });
        }
        Ok((self.f)(p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(a: f64, b: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[a, 0.0, 0.0, b])
    }

    #[test]
    fn metric_tensor_validation() {
        assert!(MetricTensor::new(diag(1.0, 2.0)).is_ok());
        assert!(MetricTensor::new(diag(1.0, -2.0)).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.2, 1.0]);
        assert!(MetricTensor::new(asym).is_err());
    }

    #[test]
    fn interpolation_is_exact_for_linear_fields() {
        let grid = GridSpec::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![5, 5]);
        let field = MetricField::from_fn(grid, |p| diag(1.0 + p[0], 2.0 + p[1])).unwrap();
        let g = field.metric_at(&[0.37, 0.61]).unwrap();
        assert!((g[(0, 0)] - 1.37).abs() < 1e-14);
        assert!((g[(1, 1)] - 2.61).abs() < 1e-14);
    }

    #[test]
    fn domain_is_the_box_of_cell_centers() {
        let grid = GridSpec::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![4, 4]);
        let field = MetricField::from_fn(grid, |_| diag(1.0, 1.0)).unwrap();
        assert!(field.metric_at(&[0.125, 0.875]).is_ok());
        assert!(matches!(
            field.metric_at(&[0.1, 0.5]),
            Err(GeometryError::OutsideDomain { .. })
        ));
    }

    #[test]
    fn missing_node_makes_neighbourhood_unavailable() {
        let grid = GridSpec::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![4, 4]);
        let mut nodes: Vec<Option<MetricTensor>> = (0..16)
            .map(|_| Some(MetricTensor::new(diag(1.0, 1.0)).unwrap()))
            .collect();
        nodes[grid.ravel(&[1, 1])] = None;
        let field = MetricField::new(grid, nodes).unwrap();
        assert!(field.metric_at(&[0.3, 0.3]).is_err());
        assert!(field.metric_at(&[0.8, 0.8]).is_ok());
        // Exactly on a defined node, the missing neighbour carries zero weight.
        assert!(field.metric_at(&[0.625, 0.375]).is_ok());
    }

    #[test]
    fn analytic_metric_checks_box() {
        let m = AnalyticMetric::polar_plane(vec![0.5, 0.0], vec![2.0, 1.0]);
        assert!(m.metric_at(&[0.4, 0.5]).is_err());
        let g = m.metric_at(&[2.0, 0.5]).unwrap();
        assert_eq!(g[(1, 1)], 4.0);
    }
}
