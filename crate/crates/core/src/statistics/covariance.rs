use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{for_each_velocity, EndpointPolicy, Result, StatsError, TrajectorySegment, VelocitySample};
use crate::exec::{self, Strategy};
use crate::geometry::{GridSpec, MetricField, MetricTensor};
use crate::linalg::{matrix_from_flat, spd_condition, spd_inverse};

pub const DEFAULT_MIN_SUPPORT: u64 = 20;
pub const DEFAULT_SHRINKAGE: f64 = 0.05;
pub const DEFAULT_COND_CAP: f64 = 1e8;

/// Segments per independently accumulated shard. Shards are merged in
/// order, so the result does not depend on the execution strategy.
const SHARD: usize = 256;

/// Running sums of velocity outer products per grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceAccumulator {
    grid: GridSpec,
    counts: Vec<u64>,
    sums: Vec<f64>,
    dropped: u64,
}

impl CovarianceAccumulator {
    pub fn new(grid: GridSpec) -> Self {
        let d = grid.dim();
        let n = grid.n_cells();
        CovarianceAccumulator {
            grid,
            counts: vec![0; n],
            sums: vec![0.0; n * d * d],
            dropped: 0,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// Samples that fell outside the grid.
    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, at: &[f64], velocity: &[f64]) {
        let d = self.grid.dim();
        let Some(cell) = self.grid.cell_of(at) else {
            self.dropped += 1;
            return;
        };
        self.counts[cell] += 1;
        let block = &mut self.sums[cell * d * d..(cell + 1) * d * d];
        for k in 0..d {
            for l in 0..d {
                block[k * d + l] += velocity[k] * velocity[l];
            }
        }
    }

    pub fn add_segment(&mut self, seg: &TrajectorySegment, policy: EndpointPolicy) -> Result<()> {
        if seg.dim != self.grid.dim() {
            return Err(StatsError::InvalidArgument(format!(
                "segment dimension {} does not match grid dimension {}",
                seg.dim,
                self.grid.dim()
            )));
        }
        super::check_dt(seg)?;
        for_each_velocity(seg, policy, |at, v| self.add(at, v));
        Ok(())
    }

    /// Adds many segments in fixed-size shards; identical output for every
    /// strategy.
    pub fn add_segments(
        &mut self,
        strategy: Strategy,
        segments: &[TrajectorySegment],
        policy: EndpointPolicy,
    ) -> Result<()> {
        let shards: Vec<&[TrajectorySegment]> = segments.chunks(SHARD).collect();
        let parts = exec::map(strategy, &shards, |shard| {
            let mut acc = CovarianceAccumulator::new(self.grid.clone());
            for seg in shard.iter() {
                acc.add_segment(seg, policy)?;
            }
            Ok::<_, StatsError>(acc)
        });
        for part in parts {
            self.merge(&part?);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &CovarianceAccumulator) {
        assert_eq!(self.grid, other.grid, "merging accumulators over different grids");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b;
        }
        self.dropped += other.dropped;
    }

    pub fn finish(&self, min_support: u64) -> CovarianceField {
        let d = self.grid.dim();
        let mut means = vec![0.0; self.sums.len()];
        let mut support = Vec::with_capacity(self.counts.len());
        for (cell, &n) in self.counts.iter().enumerate() {
            if n > 0 {
                for i in cell * d * d..(cell + 1) * d * d {
                    means[i] = self.sums[i] / n as f64;
                }
            }
            support.push(if n >= min_support && n > 0 {
                Support::Sampled
            } else {
                Support::Unsupported
            });
        }
        CovarianceField {
            grid: self.grid.clone(),
            min_support,
            counts: self.counts.clone(),
            means,
            support,
            dropped: self.dropped,
        }
    }
}

/// Where a cell's covariance comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Support {
    /// Enough samples of its own.
    Sampled,
    /// Too few samples, filled by smoothing from supported neighbours.
    Filled,
    Unsupported,
}

/// Mean velocity outer product per grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceField {
    grid: GridSpec,
    min_support: u64,
    counts: Vec<u64>,
    means: Vec<f64>,
    support: Vec<Support>,
    dropped: u64,
}

impl CovarianceField {
    /// Builds a field from explicit per-cell values, flagging support by count.
    pub fn from_cells(
        grid: GridSpec,
        counts: Vec<u64>,
        covariances: &[DMatrix<f64>],
        min_support: u64,
    ) -> Result<Self> {
        let d = grid.dim();
        if counts.len() != grid.n_cells() || covariances.len() != grid.n_cells() {
            return Err(StatsError::InvalidArgument(
                "one count and covariance per cell required".into(),
            ));
        }
        let mut means = Vec::with_capacity(counts.len() * d * d);
        for c in covariances {
            if c.nrows() != d || c.ncols() != d {
                return Err(StatsError::InvalidArgument("covariance has wrong shape".into()));
            }
            for k in 0..d {
                for l in 0..d {
                    means.push(c[(k, l)]);
                }
            }
        }
        let support = counts
            .iter()
            .map(|&n| {
                if n >= min_support && n > 0 {
                    Support::Sampled
                } else {
                    Support::Unsupported
                }
            })
            .collect();
        Ok(CovarianceField {
            grid,
            min_support,
            counts,
            means,
            support,
            dropped: 0,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn min_support(&self) -> u64 {
        self.min_support
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn count(&self, cell: usize) -> u64 {
        self.counts[cell]
    }

    pub fn support(&self, cell: usize) -> Support {
        self.support[cell]
    }

    /// Samples that fell outside the grid during accumulation.
    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn covariance(&self, cell: usize) -> DMatrix<f64> {
        let d = self.dim();
        matrix_from_flat(d, &self.means[cell * d * d..(cell + 1) * d * d])
    }

    /// Number of cells that are sampled, filled and unsupported.
    pub fn support_histogram(&self) -> [usize; 3] {
        let mut h = [0; 3];
        for s in &self.support {
            h[match s {
                Support::Sampled => 0,
                Support::Filled => 1,
                Support::Unsupported => 2,
            }] += 1;
        }
        h
    }
}

/// Accumulates explicit velocity samples.
pub fn accumulate(samples: &[VelocitySample], grid: &GridSpec, min_support: u64) -> CovarianceField {
    let mut acc = CovarianceAccumulator::new(grid.clone());
    for s in samples {
        acc.add(s.at.coords(), &s.velocity);
    }
    acc.finish(min_support)
}

/// Differences and accumulates whole segments.
pub fn accumulate_segments(
    segments: &[TrajectorySegment],
    grid: &GridSpec,
    policy: EndpointPolicy,
    min_support: u64,
) -> Result<CovarianceField> {
    accumulate_segments_with(Strategy::default(), segments, grid, policy, min_support)
}

pub fn accumulate_segments_with(
    strategy: Strategy,
    segments: &[TrajectorySegment],
    grid: &GridSpec,
    policy: EndpointPolicy,
    min_support: u64,
) -> Result<CovarianceField> {
    let mut acc = CovarianceAccumulator::new(grid.clone());
    acc.add_segments(strategy, segments, policy)?;
    Ok(acc.finish(min_support))
}

/// Count-weighted Gaussian smoothing of cell means, with `bandwidth` in
/// cell units and the kernel truncated at three bandwidths. Unsupported
/// cells with a supported cell within two bandwidths become
/// [`Support::Filled`].
pub fn smooth(field: &CovarianceField, bandwidth: f64) -> Result<CovarianceField> {
    if !(bandwidth >= 0.0) || !bandwidth.is_finite() {
        return Err(StatsError::InvalidArgument(format!(
            "bandwidth must be non-negative, got {bandwidth}"
        )));
    }
    if bandwidth == 0.0 {
        return Ok(field.clone());
    }
    let grid = &field.grid;
    let d = grid.dim();
    let block = d * d;
    let reach = (3.0 * bandwidth).ceil() as i64;
    let offsets = lattice_offsets(d, reach);
    let mut out = field.clone();
    for cell in 0..grid.n_cells() {
        let idx = grid.unravel(cell);
        let mut acc = vec![0.0; block];
        let mut wsum = 0.0;
        let mut near_support = false;
        let mut j = vec![0usize; d];
        'offsets: for off in &offsets {
            let mut r2 = 0.0;
            for a in 0..d {
                let t = idx[a] as i64 + off[a];
                if t < 0 || t >= grid.cells[a] as i64 {
                    continue 'offsets;
                }
                j[a] = t as usize;
                r2 += (off[a] * off[a]) as f64;
            }
            let r = r2.sqrt();
            if r > 3.0 * bandwidth {
                continue;
            }
            let other = grid.ravel(&j);
            let n = field.counts[other];
            if n == 0 {
                continue;
            }
            if field.support[other] == Support::Sampled && r <= 2.0 * bandwidth {
                near_support = true;
            }
            let w = n as f64 * (-0.5 * r2 / (bandwidth * bandwidth)).exp();
            wsum += w;
            for (a, m) in acc.iter_mut().zip(&field.means[other * block..(other + 1) * block]) {
                *a += w * m;
            }
        }
        let fill = match field.support[cell] {
            Support::Sampled => true,
            _ => near_support,
        };
        if fill && wsum > 0.0 {
            for (o, a) in out.means[cell * block..(cell + 1) * block].iter_mut().zip(&acc) {
                *o = a / wsum;
            }
            if field.support[cell] != Support::Sampled {
                out.support[cell] = Support::Filled;
            }
        }
    }
    Ok(out)
}

fn lattice_offsets(d: usize, reach: i64) -> Vec<Vec<i64>> {
    let mut out = vec![vec![]];
    for _ in 0..d {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (-reach..=reach).map(move |o| {
                    let mut p = prefix.clone();
                    p.push(o);
                    p
                })
            })
            .collect();
    }
    out
}

/// Shrinks each supported cell's covariance toward the count-weighted mean
/// of the sampled cells, then inverts it into a metric node. Unsupported
/// cells become holes in the metric field's domain.
pub fn to_metric(field: &CovarianceField, shrinkage: f64, cond_cap: f64) -> Result<MetricField> {
    if !(0.0..=1.0).contains(&shrinkage) {
        return Err(StatsError::InvalidArgument(format!(
            "shrinkage must lie in [0, 1], got {shrinkage}"
        )));
    }
    let d = field.dim();
    if field.min_support < d as u64 {
        return Err(StatsError::InvalidArgument(format!(
            "support threshold {} is below the dimension {d}",
            field.min_support
        )));
    }
    let mut global = DMatrix::zeros(d, d);
    let mut total = 0u64;
    for cell in 0..field.grid.n_cells() {
        if field.support[cell] == Support::Sampled {
            global += field.covariance(cell) * field.counts[cell] as f64;
            total += field.counts[cell];
        }
    }
    if total == 0 {
        return Err(StatsError::InvalidArgument("no supported cells".into()));
    }
    global /= total as f64;
    let mut nodes = Vec::with_capacity(field.grid.n_cells());
    for cell in 0..field.grid.n_cells() {
        if field.support[cell] == Support::Unsupported {
            nodes.push(None);
            continue;
        }
        let c = field.covariance(cell) * (1.0 - shrinkage) + &global * shrinkage;
        let Some((g, _)) = spd_inverse(&c, cond_cap) else {
            return Err(StatsError::SingularCovariance {
                cell,
                condition: spd_condition(&c).unwrap_or(f64::INFINITY),
            });
        };
        nodes.push(Some(MetricTensor::new(g)?));
    }
    Ok(MetricField::new(field.grid.clone(), nodes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ChartPoint, MetricSource};
    use crate::statistics::estimate_velocities;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn unit_grid(cells: usize) -> GridSpec {
        GridSpec::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![cells, cells])
    }

    fn sample(x: f64, y: f64, v: [f64; 2]) -> VelocitySample {
        VelocitySample {
            at: ChartPoint::new(vec![x, y]).unwrap(),
            velocity: v.to_vec(),
        }
    }

    fn uniform_field(cells: usize, c: DMatrix<f64>, count: u64) -> CovarianceField {
        let grid = unit_grid(cells);
        let n = grid.n_cells();
        CovarianceField::from_cells(grid, vec![count; n], &vec![c; n], DEFAULT_MIN_SUPPORT).unwrap()
    }

    #[test]
    fn alternating_velocities_give_rank_one_covariance() {
        let v = 0.3;
        let samples: Vec<_> = (0..40)
            .map(|i| sample(0.5, 0.5, if i % 2 == 0 { [v, 0.0] } else { [-v, 0.0] }))
            .collect();
        let grid = GridSpec::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![2, 2]);
        let field = accumulate(&samples, &grid, 20);
        let cell = grid.cell_of(&[0.5, 0.5]).unwrap();
        let c = field.covariance(cell);
        assert!((c[(0, 0)] - v * v).abs() < 1e-15);
        assert_eq!(c[(1, 1)], 0.0);
        assert!(matches!(
            to_metric(&field, 0.0, DEFAULT_COND_CAP),
            Err(StatsError::SingularCovariance { .. })
        ));
    }

    #[test]
    fn isotropic_gaussian_within_monte_carlo_error() {
        let sigma = 0.7;
        let normal = Normal::new(0.0, sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let samples: Vec<_> = (0..n)
            .map(|_| sample(0.3, 0.3, [normal.sample(&mut rng), normal.sample(&mut rng)]))
            .collect();
        let grid = GridSpec::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![2, 2]);
        let field = accumulate(&samples, &grid, 20);
        let c = field.covariance(0);
        let s2 = sigma * sigma;
        // SE of the mean of x² is σ²√2/√n; of xy it is σ²/√n.
        let se_diag = s2 * 2f64.sqrt() / (n as f64).sqrt();
        let se_off = s2 / (n as f64).sqrt();
        assert!((c[(0, 0)] - s2).abs() < 3.0 * se_diag);
        assert!((c[(1, 1)] - s2).abs() < 3.0 * se_diag);
        assert!(c[(0, 1)].abs() < 3.0 * se_off);
        assert_eq!(field.count(0), n as u64);
    }

    #[test]
    fn samples_outside_grid_are_dropped() {
        let samples = vec![sample(0.5, 0.5, [1.0, 0.0]), sample(1.5, 0.5, [1.0, 0.0])];
        let field = accumulate(&samples, &unit_grid(2), 1);
        assert_eq!(field.dropped(), 1);
        assert_eq!(field.counts().iter().sum::<u64>(), 1);
    }

    #[test]
    fn contravariant_transformation() {
        let j = DMatrix::from_row_slice(2, 2, &[1.3, 0.4, -0.2, 0.8]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let base: Vec<[f64; 2]> = (0..500).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
        let grid = GridSpec::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![1, 1]);
        let a = accumulate(
            &base.iter().map(|v| sample(0.0, 0.0, *v)).collect::<Vec<_>>(),
            &grid,
            1,
        );
        let b = accumulate(
            &base
                .iter()
                .map(|v| {
                    let w = &j * nalgebra::Vector2::new(v[0], v[1]);
                    sample(0.0, 0.0, [w[0], w[1]])
                })
                .collect::<Vec<_>>(),
            &grid,
            1,
        );
        let expect = &j * a.covariance(0) * j.transpose();
        assert!((b.covariance(0) - expect).amax() < 1e-12);
    }

    #[test]
    fn time_rescaling_scales_covariance_and_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 0.05).unwrap();
        let grid = unit_grid(2);
        let segs: Vec<TrajectorySegment> = (0..400)
            .map(|id| {
                let mut p = [0.2 + 0.6 * (id as f64 / 400.0), 0.5];
                let mut coords = Vec::new();
                for _ in 0..6 {
                    coords.extend_from_slice(&p);
                    p[0] += normal.sample(&mut rng);
                    p[1] += normal.sample(&mut rng);
                }
                TrajectorySegment::new(id, 0.1, 2, coords).unwrap()
            })
            .collect();
        let slow: Vec<_> = segs
            .iter()
            .map(|s| TrajectorySegment::new(s.segment_id, s.dt * 3.0, 2, s.coords.clone()).unwrap())
            .collect();
        let fa = accumulate_segments(&segs, &grid, EndpointPolicy::OneSided, 20).unwrap();
        let fb = accumulate_segments(&slow, &grid, EndpointPolicy::OneSided, 20).unwrap();
        let ga = to_metric(&fa, 0.05, DEFAULT_COND_CAP).unwrap();
        let gb = to_metric(&fb, 0.05, DEFAULT_COND_CAP).unwrap();
        for cell in 0..grid.n_cells() {
            let ca = fa.covariance(cell);
            let cb = fb.covariance(cell);
            assert!((cb * 9.0 - &ca).amax() <= 1e-13 * ca.amax());
            if let (Some(a), Some(b)) = (ga.node(cell), gb.node(cell)) {
                let diff = b.matrix() - a.matrix() * 9.0;
                assert!(diff.amax() <= 1e-12 * b.matrix().amax());
            }
        }
    }

    #[test]
    fn sharded_accumulation_is_strategy_independent() {
        let segs: Vec<TrajectorySegment> = (0..1000u64)
            .map(|id| {
                let x = (id as f64 * 0.618).fract();
                let coords = (0..5).flat_map(|i| [x, (i as f64 * 0.1 + x * 0.3).fract()]).collect();
                TrajectorySegment::new(id, 0.05, 2, coords).unwrap()
            })
            .collect();
        let grid = unit_grid(6);
        let a = accumulate_segments_with(Strategy::Sequential, &segs, &grid, EndpointPolicy::Omit, 5).unwrap();
        let b = accumulate_segments_with(Strategy::Parallel, &segs, &grid, EndpointPolicy::Omit, 5).unwrap();
        assert_eq!(a, b);
        // Same totals as sample-wise accumulation.
        let samples: Vec<_> = segs.iter().flat_map(|s| estimate_velocities(s).unwrap()).collect();
        let c = accumulate(&samples, &grid, 5);
        assert_eq!(a.counts(), c.counts());
    }

    #[test]
    fn smoothing_zero_bandwidth_and_uniform_field() {
        let c = DMatrix::from_row_slice(2, 2, &[0.01, 0.002, 0.002, 0.03]);
        let field = uniform_field(8, c.clone(), 50);
        assert_eq!(smooth(&field, 0.0).unwrap(), field);
        let s = smooth(&field, 1.5).unwrap();
        for cell in 0..64 {
            assert!((s.covariance(cell) - &c).amax() < 1e-15);
        }
    }

    #[test]
    fn isolated_hole_is_filled() {
        let grid = unit_grid(5);
        let n = grid.n_cells();
        let mut counts = vec![100; n];
        let hole = grid.ravel(&[2, 2]);
        counts[hole] = 0;
        let c = DMatrix::identity(2, 2) * 0.01;
        let field = CovarianceField::from_cells(grid, counts, &vec![c; n], 20).unwrap();
        assert_eq!(field.support(hole), Support::Unsupported);
        let s = smooth(&field, 1.0).unwrap();
        assert_eq!(s.support(hole), Support::Filled);
        assert!((s.covariance(hole) - DMatrix::identity(2, 2) * 0.01).amax() < 1e-15);
        // A hole far from any support stays unsupported.
        let grid = unit_grid(9);
        let mut counts = vec![0; 81];
        counts[0] = 100;
        let field = CovarianceField::from_cells(grid.clone(), counts, &vec![DMatrix::identity(2, 2); 81], 20).unwrap();
        let s = smooth(&field, 1.0).unwrap();
        assert_eq!(s.support(grid.ravel(&[8, 8])), Support::Unsupported);
        assert_eq!(s.support(grid.ravel(&[1, 1])), Support::Filled);
    }

    #[test]
    fn metric_inverts_covariance() {
        let field = uniform_field(4, DMatrix::identity(2, 2) * 0.01, 100);
        let g = to_metric(&field, 0.0, DEFAULT_COND_CAP).unwrap();
        let m = g.metric_at(&[0.5, 0.5]).unwrap();
        assert!((m - DMatrix::identity(2, 2) * 100.0).amax() < 1e-10);
        let field = uniform_field(4, DMatrix::identity(2, 2) * 0.5, 100);
        let g = to_metric(&field, 0.05, DEFAULT_COND_CAP).unwrap();
        assert!((g.node(3).unwrap().matrix() - DMatrix::identity(2, 2) * 2.0).amax() < 1e-12);
    }

    #[test]
    fn inversion_round_trip_recovers_shrunk_covariance() {
        let grid = unit_grid(3);
        let covs: Vec<DMatrix<f64>> = (0..9)
            .map(|i| {
                let a = 0.01 * (1.0 + i as f64 * 0.1);
                DMatrix::from_row_slice(2, 2, &[a, 0.001 * i as f64, 0.001 * i as f64, 0.02])
            })
            .collect();
        let counts: Vec<u64> = (0..9).map(|i| 30 + 10 * i).collect();
        let field = CovarianceField::from_cells(grid, counts.clone(), &covs, 20).unwrap();
        let s = 0.2;
        let g = to_metric(&field, s, DEFAULT_COND_CAP).unwrap();
        let total: u64 = counts.iter().sum();
        let mean = covs
            .iter()
            .zip(&counts)
            .fold(DMatrix::zeros(2, 2), |acc, (c, &n)| acc + c * n as f64)
            / total as f64;
        for (cell, c) in covs.iter().enumerate() {
            let shrunk = c * (1.0 - s) + &mean * s;
            assert!((g.node(cell).unwrap().inverse() - shrunk).amax() < 1e-10);
        }
    }

    #[test]
    fn unsupported_cells_are_holes() {
        let grid = unit_grid(3);
        let mut counts = vec![50; 9];
        counts[0] = 3;
        let field = CovarianceField::from_cells(grid, counts, &vec![DMatrix::identity(2, 2); 9], 20).unwrap();
        let g = to_metric(&field, 0.05, DEFAULT_COND_CAP).unwrap();
        assert!(g.node(0).is_none());
        assert_eq!(g.defined_nodes(), 8);
        assert!(to_metric(&field, 1.5, DEFAULT_COND_CAP).is_err());
    }
}
