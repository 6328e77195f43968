use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::transport::Stepper;
use super::{
    norm, sub, ChartPoint, GeometryError, GridSpec, MetricSource, Result, TransportSettings,
};
use crate::exec::{self, Strategy};

/// Three anchor points: the origin `a`, and the ends `b`, `c` of the two
/// defining increments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorFrame {
    pub a: ChartPoint,
    pub b: ChartPoint,
    pub c: ChartPoint,
}

impl AnchorFrame {
    pub fn new(a: ChartPoint, b: ChartPoint, c: ChartPoint) -> Result<Self> {
        let frame = AnchorFrame { a, b, c };
        frame.validate()?;
        Ok(frame)
    }

    pub fn dim(&self) -> usize {
        self.a.dim()
    }

    fn validate(&self) -> Result<()> {
        let d = self.a.dim();
        for p in [&self.b, &self.c] {
            if p.dim() != d {
                return Err(GeometryError::DimensionMismatch {
                    expected: d,
                    got: p.dim(),
                });
            }
        }
        if d < 2 {
            return Err(GeometryError::InvalidFrame(
                "a frame needs at least two chart dimensions".into(),
            ));
        }
        let ab = sub(self.b.coords(), self.a.coords());
        let ac = sub(self.c.coords(), self.a.coords());
        if norm(&ab) == 0.0 || norm(&ac) == 0.0 || self.b == self.c {
            return Err(GeometryError::InvalidFrame("anchors coincide".into()));
        }
        if !independent(&ac, &ab) {
            return Err(GeometryError::InvalidFrame(
                "increments A→B and A→C are parallel".into(),
            ));
        }
        Ok(())
    }
}

fn independent(u: &[f64], v: &[f64]) -> bool {
    let uu: f64 = u.iter().map(|x| x * x).sum();
    let vv: f64 = v.iter().map(|x| x * x).sum();
    let uv: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
    let gram = uu * vv - uv * uv;
    gram > 1e-12 * uu * vv
}

/// Transport-count coordinates of a point relative to an anchor frame:
/// `s1` self-transports of the A→C increment, then `s2` of the A→B
/// increment carried along the first leg.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeLocation {
    pub s1: f64,
    pub s2: f64,
}

impl RelativeLocation {
    pub fn new(s1: f64, s2: f64) -> Self {
        RelativeLocation { s1, s2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocateSettings {
    pub transport: TransportSettings,
    /// Convergence threshold on the chart distance to the target.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Forward-difference step in count space for the Jacobian.
    pub count_step: f64,
}

impl LocateSettings {
    pub fn new(transport: TransportSettings) -> Self {
        LocateSettings {
            transport,
            tolerance: 1e-6,
            max_iterations: 100,
            count_step: 1e-4,
        }
    }

    pub fn for_grid(grid: &GridSpec) -> Self {
        LocateSettings::new(TransportSettings::for_grid(grid))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Located {
    pub location: RelativeLocation,
    pub residual: f64,
    pub iterations: usize,
}

/// An anchor frame with the tangent increments at A resolved: the A→C
/// increment is the vector whose single self-transport from A lands on C,
/// likewise for A→B.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedFrame {
    pub frame: AnchorFrame,
    pub ac: Vec<f64>,
    pub ab: Vec<f64>,
}

const SHOOT_MAX_ITER: usize = 50;

impl ResolvedFrame {
    pub fn new<M: MetricSource + ?Sized>(
        field: &M,
        frame: &AnchorFrame,
        settings: &LocateSettings,
    ) -> Result<Self> {
        frame.validate()?;
        if frame.dim() != field.dim() {
            return Err(GeometryError::DimensionMismatch {
                expected: field.dim(),
                got: frame.dim(),
            });
        }
        let stepper = Stepper::new(field, &settings.transport)?;
        let ac = shoot(&stepper, frame.a.coords(), frame.c.coords())?;
        let ab = shoot(&stepper, frame.a.coords(), frame.b.coords())?;
        if !independent(&ac, &ab) {
            return Err(GeometryError::InvalidFrame(
                "resolved increments are parallel".into(),
            ));
        }
        Ok(ResolvedFrame {
            frame: frame.clone(),
            ac,
            ab,
        })
    }

    /// End point of the two-leg transport for counts `s`.
    fn reach<M: MetricSource + ?Sized>(&self, stepper: &Stepper<M>, s: [f64; 2]) -> Result<Vec<f64>> {
        let mut carried = [self.ab.clone()];
        let first = stepper.walk_carrying(self.frame.a.coords(), &self.ac, s[0], &mut carried)?;
        let [ab_here] = carried;
        Ok(stepper.walk(&first.end, &ab_here, s[1])?.end)
    }

    /// Solves for the counts that carry A onto `e`.
    pub fn locate<M: MetricSource + ?Sized>(
        &self,
        field: &M,
        e: &ChartPoint,
        settings: &LocateSettings,
    ) -> Result<Located> {
        if e.dim() != self.frame.dim() {
            return Err(GeometryError::DimensionMismatch {
                expected: self.frame.dim(),
                got: e.dim(),
            });
        }
        field.metric_at(e.coords())?;
        let stepper = Stepper::new(field, &settings.transport)?;
        let target = e.coords();
        let eval = |s: [f64; 2]| -> Result<Vec<f64>> { Ok(sub(&self.reach(&stepper, s)?, target)) };

        // Flat-frame guess: least squares of E − A over the tangent increments.
        let mut s = affine_coordinates(&self.ac, &self.ab, &sub(target, self.frame.a.coords()));
        let mut r = None;
        for _ in 0..30 {
            match eval(s) {
                Ok(res) => {
                    r = Some(res);
                    break;
                }
                Err(e) if is_domain(&e) => s = [0.5 * s[0], 0.5 * s[1]],
                Err(e) => return Err(e),
            }
        }
        let mut r = match r {
            Some(r) => r,
            None => eval([0.0, 0.0])?,
        };
        let mut res_norm = norm(&r);
        let mut damping = 1.0;
        let h = settings.count_step;
        for iteration in 0..settings.max_iterations {
            if res_norm < settings.tolerance {
                return Ok(Located {
                    location: RelativeLocation::new(s[0], s[1]),
                    residual: res_norm,
                    iterations: iteration,
                });
            }
            let mut jac = DMatrix::zeros(r.len(), 2);
            for j in 0..2 {
                let mut sp = s;
                sp[j] += h;
                let (rp, step) = match eval(sp) {
                    Ok(rp) => (rp, h),
                    Err(e) if is_domain(&e) => {
                        sp[j] = s[j] - h;
                        (eval(sp)?, -h)
                    }
                    Err(e) => return Err(e),
                };
                for i in 0..r.len() {
                    jac[(i, j)] = (rp[i] - r[i]) / step;
                }
            }
            let rv = DVector::from_column_slice(&r);
            let normal = jac.transpose() * &jac;
            let rhs = -(jac.transpose() * rv);
            let Some(delta) = normal.lu().solve(&rhs) else {
                break;
            };
            let trial = [s[0] + damping * delta[0], s[1] + damping * delta[1]];
            match eval(trial) {
                Ok(rt) if norm(&rt) < res_norm => {
                    s = trial;
                    res_norm = norm(&rt);
                    r = rt;
                    damping = (2.0 * damping).min(1.0);
                }
                Ok(_) => damping *= 0.5,
                Err(e) if is_domain(&e) => damping *= 0.5,
                Err(e) => return Err(e),
            }
            if damping < 1e-12 {
                break;
            }
        }
        if res_norm < settings.tolerance {
            return Ok(Located {
                location: RelativeLocation::new(s[0], s[1]),
                residual: res_norm,
                iterations: settings.max_iterations,
            });
        }
        Err(GeometryError::NoSolution {
            best: RelativeLocation::new(s[0], s[1]),
            residual: res_norm,
        })
    }
}

fn is_domain(e: &GeometryError) -> bool {
    matches!(
        e,
        GeometryError::DomainExit { .. } | GeometryError::OutsideDomain { .. }
    )
}

/// Least-squares `(s1, s2)` with `x ≈ s1·u + s2·v`.
fn affine_coordinates(u: &[f64], v: &[f64], x: &[f64]) -> [f64; 2] {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let (uu, uv, vv) = (dot(u, u), dot(u, v), dot(v, v));
    let (ux, vx) = (dot(u, x), dot(v, x));
    let det = uu * vv - uv * uv;
    [(vv * ux - uv * vx) / det, (uu * vx - uv * ux) / det]
}

/// Newton shooting for the increment at `from` whose single self-transport
/// ends at `to`.
fn shoot<M: MetricSource + ?Sized>(stepper: &Stepper<M>, from: &[f64], to: &[f64]) -> Result<Vec<f64>> {
    let chord = sub(to, from);
    let scale = norm(&chord);
    let tol = 1e-10 * scale;
    let d = chord.len();
    let eval = |v: &[f64]| -> Result<Vec<f64>> { Ok(sub(&stepper.walk(from, v, 1.0)?.end, to)) };
    let mut v = chord.clone();
    let mut r = eval(&v)?;
    let mut res = norm(&r);
    let mut damping = 1.0;
    for _ in 0..SHOOT_MAX_ITER {
        if res < tol {
            break;
        }
        let eps = 1e-7 * scale;
        let mut jac = DMatrix::zeros(d, d);
        for j in 0..d {
            let mut vp = v.clone();
            vp[j] += eps;
            let rp = eval(&vp)?;
            for i in 0..d {
                jac[(i, j)] = (rp[i] - r[i]) / eps;
            }
        }
        let Some(delta) = jac.lu().solve(&(-DVector::from_column_slice(&r))) else {
            break;
        };
        let trial: Vec<f64> = v.iter().zip(delta.iter()).map(|(a, b)| a + damping * b).collect();
        match eval(&trial) {
            Ok(rt) if norm(&rt) < res => {
                v = trial;
                res = norm(&rt);
                r = rt;
                damping = (2.0 * damping).min(1.0);
            }
            Ok(_) => damping *= 0.5,
            Err(e) if is_domain(&e) => damping *= 0.5,
            Err(e) => return Err(e),
        }
        if damping < 1e-8 {
            break;
        }
    }
    if res > 1e-6 * scale {
        return Err(GeometryError::InvalidFrame(format!(
            "could not resolve anchor increment (residual {res:e})"
        )));
    }
    Ok(v)
}

/// Locates `e` relative to `frame` in `field`.
pub fn locate<M: MetricSource + ?Sized>(
    field: &M,
    frame: &AnchorFrame,
    e: &ChartPoint,
    settings: &LocateSettings,
) -> Result<Located> {
    ResolvedFrame::new(field, frame, settings)?.locate(field, e, settings)
}

/// Locates every test point against one frame; per-point failures are kept
/// in place. Fails only if the frame itself cannot be resolved.
pub fn map_grid<M: MetricSource + ?Sized>(
    field: &M,
    frame: &AnchorFrame,
    tests: &[ChartPoint],
    settings: &LocateSettings,
) -> Result<Vec<Result<Located>>> {
    map_grid_with(Strategy::default(), field, frame, tests, settings)
}

pub fn map_grid_with<M: MetricSource + ?Sized>(
    strategy: Strategy,
    field: &M,
    frame: &AnchorFrame,
    tests: &[ChartPoint],
    settings: &LocateSettings,
) -> Result<Vec<Result<Located>>> {
    let resolved = ResolvedFrame::new(field, frame, settings)?;
    Ok(exec::map(strategy, tests, |e| resolved.locate(field, e, settings)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::AnalyticMetric;

    fn pt(x: f64, y: f64) -> ChartPoint {
        ChartPoint::new(vec![x, y]).unwrap()
    }

    fn flat() -> AnalyticMetric {
        AnalyticMetric::constant(vec![-5.0, -5.0], vec![5.0, 5.0], DMatrix::identity(2, 2))
    }

    fn unit_frame() -> AnchorFrame {
        AnchorFrame::new(pt(0.0, 0.0), pt(0.0, 1.0), pt(1.0, 0.0)).unwrap()
    }

    fn settings() -> LocateSettings {
        LocateSettings::new(TransportSettings::new(1e-4, 0.05))
    }

    #[test]
    fn degenerate_frames_are_rejected() {
        assert!(AnchorFrame::new(pt(0.0, 0.0), pt(0.0, 0.0), pt(1.0, 0.0)).is_err());
        assert!(AnchorFrame::new(pt(0.0, 0.0), pt(2.0, 0.0), pt(1.0, 0.0)).is_err());
        assert!(AnchorFrame::new(pt(0.0, 0.0), pt(1.0, 1.0), pt(1.0, 1.0)).is_err());
    }

    #[test]
    fn anchors_locate_to_unit_counts() {
        let field = flat();
        let frame = unit_frame();
        let tests = vec![frame.a.clone(), frame.b.clone(), frame.c.clone()];
        let out = map_grid(&field, &frame, &tests, &settings()).unwrap();
        let expect = [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0)];
        for (got, (s1, s2)) in out.iter().zip(expect) {
            let l = got.as_ref().unwrap().location;
            assert!((l.s1 - s1).abs() < 1e-9 && (l.s2 - s2).abs() < 1e-9, "{l:?}");
        }
    }

    #[test]
    fn flat_field_gives_affine_coordinates() {
        let out = locate(&flat(), &unit_frame(), &pt(3.5, 2.25), &settings()).unwrap();
        assert!((out.location.s1 - 3.5).abs() < 1e-9);
        assert!((out.location.s2 - 2.25).abs() < 1e-9);
        // Negative counts walk the other way.
        let out = locate(&flat(), &unit_frame(), &pt(-1.5, -0.5), &settings()).unwrap();
        assert!((out.location.s1 + 1.5).abs() < 1e-9);
        assert!((out.location.s2 + 0.5).abs() < 1e-9);
    }

    #[test]
    fn skewed_flat_frame() {
        let frame = AnchorFrame::new(pt(0.5, 0.5), pt(0.7, 0.9), pt(1.0, 0.4)).unwrap();
        // E = A + 2·(C − A) − 1.5·(B − A)
        let e = pt(0.5 + 2.0 * 0.5 - 1.5 * 0.2, 0.5 + 2.0 * -0.1 - 1.5 * 0.4);
        let out = locate(&flat(), &frame, &e, &settings()).unwrap();
        assert!((out.location.s1 - 2.0).abs() < 1e-8);
        assert!((out.location.s2 + 1.5).abs() < 1e-8);
    }

    #[test]
    fn flat_grid_of_tests() {
        let field = flat();
        let frame = unit_frame();
        let mut tests = Vec::new();
        for i in -1..=1 {
            for j in -1..=1 {
                tests.push(pt(i as f64, j as f64));
            }
        }
        let seq = map_grid_with(Strategy::Sequential, &field, &frame, &tests, &settings()).unwrap();
        let par = map_grid_with(Strategy::Parallel, &field, &frame, &tests, &settings()).unwrap();
        assert_eq!(seq, par);
        for (t, r) in tests.iter().zip(&seq) {
            let l = r.as_ref().unwrap().location;
            assert!((l.s1 - t.coords()[0]).abs() < 1e-9);
            assert!((l.s2 - t.coords()[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn polar_chart_recovers_cartesian_frame() {
        // The polar chart of the plane is flat, so counts equal the Cartesian
        // affine coordinates of E in the frame built from the Cartesian anchors.
        let field = AnalyticMetric::polar_plane(vec![0.5, -1.5], vec![3.0, 1.5]);
        let polar = |x: f64, y: f64| pt((x * x + y * y).sqrt(), y.atan2(x));
        let frame = AnchorFrame::new(polar(1.5, 0.0), polar(1.5, 0.2), polar(1.7, 0.0)).unwrap();
        let s = LocateSettings::new(TransportSettings::new(1e-5, 2e-3));
        for (s1, s2) in [(1.0, 0.0), (0.0, 1.0), (2.5, -1.5), (-1.0, 3.0)] {
            let e = polar(1.5 + 0.2 * s1, 0.2 * s2);
            let out = locate(&field, &frame, &e, &s).unwrap();
            assert!((out.location.s1 - s1).abs() < 1e-3, "{out:?}");
            assert!((out.location.s2 - s2).abs() < 1e-3, "{out:?}");
        }
    }

    #[test]
    fn exhausted_iterations_report_best_guess() {
        let field = AnalyticMetric::polar_plane(vec![0.5, -1.5], vec![3.0, 1.5]);
        let frame = AnchorFrame::new(pt(1.5, 0.0), pt(1.5, 0.1), pt(1.7, 0.0)).unwrap();
        let mut s = settings();
        s.max_iterations = 0;
        match locate(&field, &frame, &pt(2.5, 0.8), &s) {
            Err(GeometryError::NoSolution { best, residual }) => {
                assert!(best.s1.is_finite() && residual > s.tolerance);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
