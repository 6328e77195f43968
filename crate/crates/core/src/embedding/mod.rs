//! Dimensional reduction of raw measurement series into a low-dimensional
//! chart by locally linear embedding, with out-of-sample extension through
//! the same reconstruction weights.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Strategy};
use crate::sensors::{split_runs, Truncation};
use crate::statistics::TrajectorySegment;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbeddingError {
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("embedding failed: {0}")]
    Failed(String),
    #[error("measurement is {distance:e} from the training data (limit {limit:e})")]
    OutOfSupport { distance: f64, limit: f64 },
    #[error("expected {expected} measurements, got {got}")]
    WidthMismatch { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, EmbeddingError>;

/// Consecutive measurement vectors of one segment, stored flat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSegment {
    pub segment_id: u64,
    /// Index of the first vector on the segment's time lattice.
    pub start: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl MeasurementSegment {
    pub fn len(&self) -> usize {
        self.values.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.values[i * self.width..(i + 1) * self.width]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSeries {
    pub dt: f64,
    pub segments: Vec<MeasurementSegment>,
}

impl MeasurementSeries {
    pub fn width(&self) -> Option<usize> {
        self.segments.first().map(|s| s.width)
    }

    pub fn n_points(&self) -> usize {
        self.segments.iter().map(|s| s.len()).sum()
    }

    /// All vectors, flattened in series order.
    pub fn flat_points(&self) -> Vec<f64> {
        self.segments.iter().flat_map(|s| s.values.iter().copied()).collect()
    }

    fn checked_width(&self) -> Result<usize> {
        let w = self
            .width()
            .ok_or_else(|| EmbeddingError::Precondition("empty series".into()))?;
        if w == 0 {
            return Err(EmbeddingError::Precondition("zero-width measurements".into()));
        }
        for s in &self.segments {
            if s.width != w || s.values.len() % w != 0 {
                return Err(EmbeddingError::WidthMismatch {
                    expected: w,
                    got: s.width,
                });
            }
        }
        Ok(w)
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `k` nearest rows of `points` to `query`, as `(index, squared
/// distance)`, nearest first with ties broken by index.
fn nearest(points: &[f64], width: usize, query: &[f64], k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = points
        .chunks_exact(width)
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, p)| (i, dist2(p, query)))
        .collect();
    let cmp = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
    let k = k.min(all.len());
    if k == 0 {
        return Vec::new();
    }
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, cmp);
        all.truncate(k);
    }
    all.sort_by(cmp);
    all
}

/// Farthest-point subsample of at most `max` rows, starting from row 0.
fn farthest_points(points: &[f64], width: usize, max: usize) -> Vec<usize> {
    let n = points.len() / width;
    if n <= max {
        return (0..n).collect();
    }
    let mut chosen = vec![0];
    let mut dmin: Vec<f64> = points.chunks_exact(width).map(|p| dist2(p, &points[..width])).collect();
    while chosen.len() < max {
        let (next, best) = dmin
            .iter()
            .enumerate()
            .fold((0, -1.0), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
        if best <= 0.0 {
            break;
        }
        chosen.push(next);
        let q = &points[next * width..(next + 1) * width];
        for (d, p) in dmin.iter_mut().zip(points.chunks_exact(width)) {
            let nd = dist2(p, q);
            if nd < *d {
                *d = nd;
            }
        }
    }
    chosen
}

/// Sum-to-one weights reconstructing `x` from `neighbors` (rows), with the
/// local Gram matrix regularized by `reg · trace`.
fn reconstruction_weights(neighbors: &[&[f64]], x: &[f64], reg: f64) -> Vec<f64> {
    let k = neighbors.len();
    let mut g = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in a..k {
            let v: f64 = neighbors[a]
                .iter()
                .zip(neighbors[b])
                .zip(x)
                .map(|((p, q), c)| (p - c) * (q - c))
                .sum();
            g[(a, b)] = v;
            g[(b, a)] = v;
        }
    }
    let trace = g.trace();
    let eps = if trace > 0.0 { reg * trace } else { 1e-12 };
    for a in 0..k {
        g[(a, a)] += eps;
    }
    let ones = DVector::from_element(k, 1.0);
    let w = match g.clone().cholesky() {
        Some(ch) => ch.solve(&ones),
        None => g.lu().solve(&ones).unwrap_or_else(|| ones.clone()),
    };
    let sum = w.sum();
    w.iter().map(|x| x / sum).collect()
}

/// Intrinsic dimension from local principal-component spectra: at sampled
/// neighbourhoods of `k` points, counts singular values at least 10% of the
/// largest and returns the most common count.
pub fn estimate_dimension(series: &MeasurementSeries, k: usize) -> Result<usize> {
    const CENTERS: usize = 200;
    const POOL: usize = 5000;
    const GAP: f64 = 0.1;
    let width = series.checked_width()?;
    let flat = series.flat_points();
    let n = flat.len() / width;
    if k < 2 || n < 10 * k {
        return Err(EmbeddingError::Precondition(format!(
            "need k ≥ 2 and at least {} points, got k = {k}, {n} points",
            10 * k
        )));
    }
    let pool: Vec<f64> = if n > POOL {
        (0..POOL).flat_map(|i| flat[(i * n / POOL) * width..(i * n / POOL + 1) * width].iter().copied()).collect()
    } else {
        flat
    };
    let pool_n = pool.len() / width;
    let centers = farthest_points(&pool, width, CENTERS);
    let mut votes = vec![0usize; width + 1];
    for &c in &centers {
        let q = &pool[c * width..(c + 1) * width];
        let nb = nearest(&pool, width, q, k.min(pool_n), None);
        let mut m = DMatrix::zeros(nb.len(), width);
        let mut mean = vec![0.0; width];
        for (_, row) in nb.iter().map(|(i, _)| (i, &pool[i * width..(i + 1) * width])) {
            for j in 0..width {
                mean[j] += row[j] / nb.len() as f64;
            }
        }
        for (r, (i, _)) in nb.iter().enumerate() {
            for j in 0..width {
                m[(r, j)] = pool[i * width + j] - mean[j];
            }
        }
        let sv = m.singular_values();
        let top = sv.max();
        if top <= 0.0 {
            continue;
        }
        let count = sv.iter().filter(|&&s| s >= GAP * top).count();
        votes[count] += 1;
    }
    let (dim, best) = votes
        .iter()
        .enumerate()
        .fold((0, 0), |acc, (d, &v)| if v > acc.1 { (d, v) } else { acc });
    if best == 0 {
        return Err(EmbeddingError::Degenerate("all sampled neighbourhoods are single points".into()));
    }
    Ok(dim)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitParams {
    pub k: usize,
    pub d: usize,
    /// Gram regularizer as a fraction of its trace.
    pub reg: f64,
    /// Training points are a farthest-point subsample of at most this many.
    pub max_training: usize,
}

impl Default for FitParams {
    fn default() -> Self {
        FitParams {
            k: 12,
            d: 2,
            reg: 1e-3,
            max_training: 1200,
        }
    }
}

/// A fitted chart: training measurements and their embedded coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingModel {
    pub k: usize,
    pub d: usize,
    pub reg: f64,
    pub width: usize,
    /// Flat training measurements, `width` per point.
    pub training: Vec<f64>,
    /// Flat embedded coordinates, `d` per point.
    pub coords: Vec<f64>,
    /// Median distance from a training point to its k-th neighbour.
    pub median_kth: f64,
}

impl EmbeddingModel {
    pub fn n_training(&self) -> usize {
        self.training.len() / self.width
    }

    pub fn training_point(&self, i: usize) -> &[f64] {
        &self.training[i * self.width..(i + 1) * self.width]
    }

    pub fn coord(&self, i: usize) -> &[f64] {
        &self.coords[i * self.d..(i + 1) * self.d]
    }

    /// Largest admissible distance to the nearest training point.
    pub fn support_radius(&self) -> f64 {
        3.0 * self.median_kth
    }

    /// Chart coordinates of a new measurement vector.
    pub fn embed(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.width {
            return Err(EmbeddingError::WidthMismatch {
                expected: self.width,
                got: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(EmbeddingError::Degenerate("non-finite measurement".into()));
        }
        let nb = nearest(&self.training, self.width, v, self.k, None);
        let nearest_dist = nb[0].1.sqrt();
        if nearest_dist == 0.0 {
            return Ok(self.coord(nb[0].0).to_vec());
        }
        if nearest_dist > self.support_radius() {
            return Err(EmbeddingError::OutOfSupport {
                distance: nearest_dist,
                limit: self.support_radius(),
            });
        }
        let rows: Vec<&[f64]> = nb.iter().map(|(i, _)| self.training_point(*i)).collect();
        let w = reconstruction_weights(&rows, v, self.reg);
        let mut out = vec![0.0; self.d];
        for ((i, _), wi) in nb.iter().zip(&w) {
            for (o, c) in out.iter_mut().zip(self.coord(*i)) {
                *o += wi * c;
            }
        }
        Ok(out)
    }
}

/// Locally linear embedding of a farthest-point subsample of the series.
pub fn fit(series: &MeasurementSeries, params: &FitParams) -> Result<EmbeddingModel> {
    fit_with(Strategy::default(), series, params)
}

pub fn fit_with(strategy: Strategy, series: &MeasurementSeries, params: &FitParams) -> Result<EmbeddingModel> {
    let FitParams { k, d, reg, max_training } = *params;
    if d == 0 || k <= d {
        return Err(EmbeddingError::Precondition(format!("need k > d ≥ 1, got k = {k}, d = {d}")));
    }
    if !(reg > 0.0) {
        return Err(EmbeddingError::Precondition("regularizer must be positive".into()));
    }
    let width = series.checked_width()?;
    if width <= d {
        return Err(EmbeddingError::Precondition(format!(
            "need more measurements than dimensions, got {width} for d = {d}"
        )));
    }
    let flat = series.flat_points();
    let n_all = flat.len() / width;
    if n_all < 50 * d || max_training < 50 * d {
        return Err(EmbeddingError::Precondition(format!(
            "need at least {} training points, got {n_all}",
            50 * d
        )));
    }
    let chosen = farthest_points(&flat, width, max_training);
    let training: Vec<f64> = chosen.iter().flat_map(|&i| flat[i * width..(i + 1) * width].iter().copied()).collect();
    let n = chosen.len();
    if n <= k {
        return Err(EmbeddingError::Degenerate(format!("only {n} distinct training points")));
    }

    let rows = exec::map_range(strategy, n, |i| {
        let x = &training[i * width..(i + 1) * width];
        let nb = nearest(&training, width, x, k, Some(i));
        let pts: Vec<&[f64]> = nb.iter().map(|(j, _)| &training[j * width..(j + 1) * width]).collect();
        let w = reconstruction_weights(&pts, x, reg);
        (nb, w)
    });
    let mut kth: Vec<f64> = rows.iter().map(|(nb, _)| nb[nb.len() - 1].1.sqrt()).collect();
    kth.sort_by(f64::total_cmp);
    let median_kth = kth[kth.len() / 2];

    // M = (I − W)ᵀ(I − W), accumulated row by row.
    let mut m = DMatrix::<f64>::zeros(n, n);
    for (i, (nb, w)) in rows.iter().enumerate() {
        let mut entries: Vec<(usize, f64)> = nb.iter().map(|(j, _)| *j).zip(w.iter().map(|x| -x)).collect();
        entries.push((i, 1.0));
        for &(a, va) in &entries {
            for &(b, vb) in &entries {
                m[(a, b)] += va * vb;
            }
        }
    }
    // Push the constant null vector to the top of the spectrum.
    let shift = m.diagonal().max() * 2.0 + 1.0;
    m.add_scalar_mut(shift / n as f64);
    let eig = SymmetricEigen::try_new(m, 1e-14, 0)
        .ok_or_else(|| EmbeddingError::Failed("eigen-solver did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let lam: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let scale = lam[n - 1].abs().max(1e-300);
    if lam[d] - lam[d - 1] <= 1e-12 * scale {
        return Err(EmbeddingError::Failed(format!(
            "no eigen-gap after the {d} smallest eigenvalues ({:e}, {:e})",
            lam[d - 1],
            lam[d]
        )));
    }
    let root_n = (n as f64).sqrt();
    let mut coords = vec![0.0; n * d];
    for (axis, &col) in order.iter().take(d).enumerate() {
        let v = eig.eigenvectors.column(col);
        let lead = v.iter().fold(0.0f64, |acc, &x| if x.abs() > acc.abs() { x } else { acc });
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            coords[i * d + axis] = sign * v[i] * root_n;
        }
    }
    Ok(EmbeddingModel {
        k,
        d,
        reg,
        width,
        training,
        coords,
        median_kth,
    })
}

/// Embeds every vector of a series. Vectors outside the training support
/// split their segment; pieces shorter than two points are dropped.
pub fn embed_series(
    model: &EmbeddingModel,
    series: &MeasurementSeries,
    strategy: Strategy,
) -> Result<(Vec<TrajectorySegment>, Truncation)> {
    if let Some(w) = series.width() {
        if w != model.width {
            return Err(EmbeddingError::WidthMismatch {
                expected: model.width,
                got: w,
            });
        }
    }
    let per_segment = exec::map(strategy, &series.segments, |seg| {
        let results = (0..seg.len()).map(|i| model.embed(seg.point(i)).ok()).collect();
        let mut t = Truncation::default();
        let pieces = split_runs(results, &mut t);
        (seg.segment_id, pieces, t)
    });
    let mut truncation = Truncation {
        input_segments: series.segments.len(),
        ..Default::default()
    };
    let mut out = Vec::new();
    for (segment_id, pieces, t) in per_segment {
        truncation.failed_points += t.failed_points;
        truncation.dropped_points += t.dropped_points;
        for (_, coords) in pieces {
            let seg = TrajectorySegment::new(segment_id, series.dt, model.d, coords)
                .map_err(|e| EmbeddingError::Precondition(e.to_string()))?;
            out.push(seg);
        }
    }
    truncation.output_segments = out.len();
    Ok((out, truncation))
}
