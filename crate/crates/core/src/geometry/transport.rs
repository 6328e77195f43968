use super::connection::christoffel_raw;
use super::{
    add_scaled, norm, sub, ChartPoint, ChristoffelSymbols, GeometryError, GridSpec, MetricSource,
    Result, TangentVector,
};

/// Step sizes for the connection stencil and the transport integrator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransportSettings {
    /// Central-difference step for the connection.
    pub fd_step: f64,
    /// Largest chart-length of a single transport substep.
    pub max_substep: f64,
}

impl TransportSettings {
    pub fn new(fd_step: f64, max_substep: f64) -> Self {
        TransportSettings {
            fd_step,
            max_substep,
        }
    }

    /// Half the grid spacing for differences, a quarter for substeps.
    pub fn for_grid(grid: &GridSpec) -> Self {
        Self::from_fractions(grid, 0.5, 0.25)
    }

    pub fn from_fractions(grid: &GridSpec, fd_fraction: f64, substep_fraction: f64) -> Self {
        let h = grid.min_spacing();
        TransportSettings::new(fd_fraction * h, substep_fraction * h)
    }

    fn validate(&self) -> Result<()> {
        if !(self.fd_step > 0.0) || !(self.max_substep > 0.0) {
            return Err(GeometryError::InvalidArgument(format!(
                "transport steps must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// One Euler update of the transport rule: `V^k ← V^k − Γ^k_lm V^l δx^m`,
/// with the base moved by `delta`. `gamma` should be evaluated at `v.base`.
pub fn transport_step(
    v: &TangentVector,
    delta: &[f64],
    gamma: &ChristoffelSymbols,
) -> Result<TangentVector> {
    if delta.len() != v.components.len() {
        return Err(GeometryError::DimensionMismatch {
            expected: v.components.len(),
            got: delta.len(),
        });
    }
    let change = gamma.contract(&v.components, delta);
    let components = sub(&v.components, &change);
    let base = ChartPoint::new(add_scaled(v.base.coords(), delta, 1.0))?;
    TangentVector::new(base, components)
}

/// Result of transporting an increment along itself.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfTransport {
    pub end: ChartPoint,
    pub carried: TangentVector,
    /// Every substep vertex, starting with the base of the increment.
    pub path: Vec<ChartPoint>,
}

/// Moves from `increment.base` by the increment, transporting it along
/// itself, `count` times. A fractional remainder takes a proportionally
/// shorter final step. Each whole step is split into the same number of
/// substeps as the fractional one, so the end point is continuous in `count`.
pub fn self_transport<M: MetricSource + ?Sized>(
    field: &M,
    increment: &TangentVector,
    count: f64,
    settings: &TransportSettings,
) -> Result<SelfTransport> {
    if !(count >= 0.0) || !count.is_finite() {
        return Err(GeometryError::InvalidArgument(format!(
            "transport count must be finite and non-negative, got {count}"
        )));
    }
    let stepper = Stepper::new(field, settings)?;
    let walk = stepper.walk(increment.base.coords(), &increment.components, count)?;
    let end = ChartPoint::new(walk.end)?;
    let carried = TangentVector::new(end.clone(), walk.carried)?;
    let path = walk
        .path
        .into_iter()
        .map(ChartPoint::new)
        .collect::<Result<Vec<_>>>()?;
    Ok(SelfTransport { end, carried, path })
}

/// Transports `v` along the polyline `path`, which should start at `v.base`.
pub fn co_transport<M: MetricSource + ?Sized>(
    field: &M,
    v: &TangentVector,
    path: &[ChartPoint],
    settings: &TransportSettings,
) -> Result<TangentVector> {
    if path.is_empty() {
        return Ok(v.clone());
    }
    let stepper = Stepper::new(field, settings)?;
    let raw: Vec<Vec<f64>> = path.iter().map(|p| p.coords().to_vec()).collect();
    let carried = stepper.along(&raw, &v.components)?;
    TangentVector::new(path[path.len() - 1].clone(), carried)
}

pub(crate) struct Walk {
    pub end: Vec<f64>,
    pub carried: Vec<f64>,
    pub path: Vec<Vec<f64>>,
}

/// Second-order (explicit midpoint) integrator for the transport equations.
pub(crate) struct Stepper<'a, M: ?Sized> {
    field: &'a M,
    settings: TransportSettings,
}

impl<'a, M: MetricSource + ?Sized> Stepper<'a, M> {
    pub fn new(field: &'a M, settings: &TransportSettings) -> Result<Self> {
        settings.validate()?;
        Ok(Stepper {
            field,
            settings: *settings,
        })
    }

    fn gamma(&self, x: &[f64], last_valid: &[f64]) -> Result<ChristoffelSymbols> {
        christoffel_raw(self.field, x, self.settings.fd_step).map_err(|e| match e {
            GeometryError::OutsideDomain { .. } => GeometryError::DomainExit {
                last_valid: ChartPoint(last_valid.to_vec()),
            },
            other => other,
        })
    }

    /// Moves by `tau · v` along the geodesic, carrying `v` and every vector
    /// in `extra` with the same midpoint stencil.
    fn geodesic_substep(
        &self,
        x: &[f64],
        v: &[f64],
        tau: f64,
        extra: &mut [Vec<f64>],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let g0 = self.gamma(x, x)?;
        let half: Vec<f64> = v.iter().map(|c| 0.5 * tau * c).collect();
        let v_half = sub(v, &g0.contract(v, &half));
        let x_half = add_scaled(x, &half, 1.0);
        let g1 = self.gamma(&x_half, x)?;
        let step: Vec<f64> = v_half.iter().map(|c| tau * c).collect();
        let v_new = sub(v, &g1.contract(&v_half, &step));
        let x_new = add_scaled(x, &step, 1.0);
        for w in extra.iter_mut() {
            let w_half = sub(w, &g0.contract(w, &half));
            *w = sub(w, &g1.contract(&w_half, &step));
        }
        Ok((x_new, v_new))
    }

    /// Carries `v` from `x` to `x + delta` along the straight chord.
    fn parallel_substep(&self, x: &[f64], v: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
        let g0 = self.gamma(x, x)?;
        let half: Vec<f64> = delta.iter().map(|c| 0.5 * c).collect();
        let v_half = sub(v, &g0.contract(v, &half));
        let g1 = self.gamma(&add_scaled(x, &half, 1.0), x)?;
        Ok(sub(v, &g1.contract(&v_half, delta)))
    }

    fn substeps_for(&self, length: f64) -> usize {
        ((length / self.settings.max_substep).ceil() as usize).max(1)
    }

    fn check_end(&self, x: &[f64], last_valid: &[f64]) -> Result<()> {
        match self.field.metric_at(x) {
            Ok(_) => Ok(()),
            Err(GeometryError::OutsideDomain { .. }) => Err(GeometryError::DomainExit {
                last_valid: ChartPoint(last_valid.to_vec()),
            }),
            Err(e) => Err(e),
        }
    }

    /// Self-transport with a signed count: negative counts walk the negated
    /// increment and return the carried vector in the original orientation.
    pub fn walk(&self, start: &[f64], increment: &[f64], count: f64) -> Result<Walk> {
        self.walk_carrying(start, increment, count, &mut [])
    }

    /// As [`Stepper::walk`], also parallel-transporting `extra` along the
    /// traversed path in lock step with the increment.
    pub fn walk_carrying(
        &self,
        start: &[f64],
        increment: &[f64],
        count: f64,
        extra: &mut [Vec<f64>],
    ) -> Result<Walk> {
        if count < 0.0 {
            let neg: Vec<f64> = increment.iter().map(|c| -c).collect();
            let mut w = self.walk_carrying(start, &neg, -count, extra)?;
            w.carried.iter_mut().for_each(|c| *c = -*c);
            return Ok(w);
        }
        let mut x = start.to_vec();
        let mut v = increment.to_vec();
        let mut path = vec![x.clone()];
        let whole = count.floor() as usize;
        let frac = count - whole as f64;
        let legs = (0..whole).map(|_| 1.0).chain((frac > 0.0).then_some(frac));
        for length in legs {
            let n = self.substeps_for(norm(&v));
            let tau = length / n as f64;
            for _ in 0..n {
                let (xn, vn) = self.geodesic_substep(&x, &v, tau, extra)?;
                x = xn;
                v = vn;
                path.push(x.clone());
            }
        }
        if path.len() > 1 {
            self.check_end(&x, &path[path.len() - 2])?;
        }
        Ok(Walk {
            end: x,
            carried: v,
            path,
        })
    }

    /// Parallel transport of `v` along a polyline.
    pub fn along(&self, path: &[Vec<f64>], v: &[f64]) -> Result<Vec<f64>> {
        let mut v = v.to_vec();
        for pair in path.windows(2) {
            let chord = sub(&pair[1], &pair[0]);
            let n = self.substeps_for(norm(&chord));
            let delta: Vec<f64> = chord.iter().map(|c| c / n as f64).collect();
            let mut x = pair[0].clone();
            for _ in 0..n {
                v = self.parallel_substep(&x, &v, &delta)?;
                x = add_scaled(&x, &delta, 1.0);
            }
        }
        if path.len() > 1 {
            let last = &path[path.len() - 1];
            self.check_end(last, &path[path.len() - 2])?;
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{christoffel_at, AnalyticMetric};
    use nalgebra::DMatrix;

    fn pt(x: f64, y: f64) -> ChartPoint {
        ChartPoint::new(vec![x, y]).unwrap()
    }

    fn flat(lo: f64, hi: f64) -> AnalyticMetric {
        AnalyticMetric::constant(vec![lo, lo], vec![hi, hi], DMatrix::identity(2, 2))
    }

    #[test]
    fn flat_step_is_identity() {
        let v = TangentVector::new(pt(0.0, 0.0), vec![1.0, 0.0]).unwrap();
        let out = transport_step(&v, &[0.0, 0.1], &ChristoffelSymbols::zeros(2)).unwrap();
        assert_eq!(out.components, vec![1.0, 0.0]);
        assert_eq!(out.base.coords(), &[0.0, 0.1]);
    }

    #[test]
    fn polar_step_matches_hand_evaluation() {
        // At r = 1: Γ^r_θθ = −1, Γ^θ_rθ = 1, so δV^r = 0.01 and δV^θ = 0.
        let m = AnalyticMetric::polar_plane(vec![0.5, -1.0], vec![2.0, 1.0]);
        let gamma = christoffel_at(&m, &pt(1.0, 0.0), 1e-5).unwrap();
        let v = TangentVector::new(pt(1.0, 0.0), vec![0.0, 1.0]).unwrap();
        let out = transport_step(&v, &[0.0, 0.01], &gamma).unwrap();
        assert!((out.components[0] - 0.01).abs() < 1e-9);
        assert!((out.components[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_vector_stays_zero() {
        let m = AnalyticMetric::polar_plane(vec![0.5, -1.0], vec![2.0, 1.0]);
        let gamma = christoffel_at(&m, &pt(1.2, 0.3), 1e-5).unwrap();
        let v = TangentVector::new(pt(1.2, 0.3), vec![0.0, 0.0]).unwrap();
        let out = transport_step(&v, &[0.05, -0.02], &gamma).unwrap();
        assert_eq!(out.components, vec![0.0, 0.0]);
    }

    #[test]
    fn flat_self_transport_with_fraction() {
        let field = flat(-1.0, 10.0);
        let inc = TangentVector::new(pt(0.0, 0.0), vec![1.0, 0.0]).unwrap();
        let s = TransportSettings::new(1e-3, 0.1);
        let out = self_transport(&field, &inc, 3.5, &s).unwrap();
        assert!((out.end.coords()[0] - 3.5).abs() < 1e-12);
        assert!(out.end.coords()[1].abs() < 1e-12);
        assert_eq!(out.carried.components, vec![1.0, 0.0]);
    }

    #[test]
    fn zero_count_returns_start() {
        let field = AnalyticMetric::polar_plane(vec![0.5, -1.0], vec![2.0, 1.0]);
        let inc = TangentVector::new(pt(1.0, 0.0), vec![0.1, 0.2]).unwrap();
        let out = self_transport(&field, &inc, 0.0, &TransportSettings::new(1e-5, 0.01)).unwrap();
        assert_eq!(out.end, inc.base);
        assert_eq!(out.carried.components, inc.components);
        assert_eq!(out.path, vec![inc.base.clone()]);
    }

    #[test]
    fn negative_count_is_rejected() {
        let field = flat(-1.0, 1.0);
        let inc = TangentVector::new(pt(0.0, 0.0), vec![0.1, 0.0]).unwrap();
        assert!(self_transport(&field, &inc, -1.0, &TransportSettings::new(1e-3, 0.1)).is_err());
    }

    #[test]
    fn cylinder_intrinsic_chart_unrolls() {
        // The cylinder's (u, w) chart is isometric, so its metric is constant.
        let field = AnalyticMetric::constant(
            vec![-1.0, -1.0],
            vec![1.0, 1.0],
            DMatrix::identity(2, 2) * 100.0,
        );
        let inc = TangentVector::new(pt(0.0, 0.0), vec![0.1, 0.0]).unwrap();
        let out = self_transport(&field, &inc, 5.0, &TransportSettings::new(1e-3, 0.02)).unwrap();
        assert!((out.end.coords()[0] - 0.5).abs() < 1e-12);
        assert!(out.end.coords()[1].abs() < 1e-15);
    }

    #[test]
    fn leaving_the_domain_reports_last_valid_point() {
        let field = flat(-1.0, 1.0);
        let inc = TangentVector::new(pt(0.0, 0.0), vec![0.3, 0.0]).unwrap();
        let err = self_transport(&field, &inc, 10.0, &TransportSettings::new(1e-3, 0.1)).unwrap_err();
        match err {
            GeometryError::DomainExit { last_valid } => {
                assert!(last_valid.coords()[0] <= 1.0 && last_valid.coords()[0] > 0.8);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn flat_co_transport_and_empty_path() {
        let field = flat(-2.0, 2.0);
        let v = TangentVector::new(pt(0.0, 0.0), vec![0.3, -0.7]).unwrap();
        let path = vec![pt(0.0, 0.0), pt(1.0, 0.5), pt(-1.0, 1.5)];
        let s = TransportSettings::new(1e-3, 0.05);
        let out = co_transport(&field, &v, &path, &s).unwrap();
        assert!((out.components[0] - 0.3).abs() < 1e-14);
        assert!((out.components[1] + 0.7).abs() < 1e-14);
        assert_eq!(co_transport(&field, &v, &[], &s).unwrap(), v);
    }

    /// Cartesian components of a polar-chart vector at (r, θ).
    fn to_cartesian(r: f64, theta: f64, v: &[f64]) -> [f64; 2] {
        [
            theta.cos() * v[0] - r * theta.sin() * v[1],
            theta.sin() * v[0] + r * theta.cos() * v[1],
        ]
    }

    #[test]
    fn square_loop_in_polar_plane_closes() {
        let field = AnalyticMetric::polar_plane(vec![0.5, -1.0], vec![2.0, 1.0]);
        let path = vec![
            pt(1.0, 0.0),
            pt(1.5, 0.0),
            pt(1.5, 0.5),
            pt(1.0, 0.5),
            pt(1.0, 0.0),
        ];
        let v = TangentVector::new(pt(1.0, 0.0), vec![0.2, 0.7]).unwrap();
        let mut errs = Vec::new();
        for step in [0.02, 0.01] {
            let s = TransportSettings::new(1e-5, step);
            // Halfway round, the Cartesian vector must be unchanged.
            let mid = co_transport(&field, &v, &path[..3], &s).unwrap();
            let a = to_cartesian(1.0, 0.0, &v.components);
            let b = to_cartesian(1.5, 0.5, &mid.components);
            assert!((a[0] - b[0]).abs() < 1e-3 && (a[1] - b[1]).abs() < 1e-3);
            let out = co_transport(&field, &v, &path, &s).unwrap();
            errs.push(norm(&sub(&out.components, &v.components)));
        }
        assert!(errs[0] < 1e-4, "{errs:?}");
        // Second order: halving the substep cuts the error about four-fold.
        assert!(errs[1] < errs[0] / 3.0, "{errs:?}");
    }
}
