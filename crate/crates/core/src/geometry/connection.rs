use super::{ChartPoint, GeometryError, MetricSource, Result};

/// Connection coefficients `Γ^k_lm`, stored as `data[(k * d + l) * d + m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChristoffelSymbols {
    dim: usize,
    data: Vec<f64>,
}

impl ChristoffelSymbols {
    pub fn zeros(dim: usize) -> Self {
        ChristoffelSymbols {
            dim,
            data: vec![0.0; dim * dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, k: usize, l: usize, m: usize) -> f64 {
        self.data[(k * self.dim + l) * self.dim + m]
    }

    fn set(&mut self, k: usize, l: usize, m: usize, value: f64) {
        let d = self.dim;
        self.data[(k * d + l) * d + m] = value;
    }

    /// `Σ_lm Γ^k_lm v^l w^m` for each k.
    pub fn contract(&self, v: &[f64], w: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|k| {
                let mut acc = 0.0;
                for l in 0..d {
                    for m in 0..d {
                        acc += self.data[(k * d + l) * d + m] * v[l] * w[m];
                    }
                }
                acc
            })
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |a, x| a.max(x.abs()))
    }
}

/// Connection at `p` from central differences of the field's metric with
/// step `h` along each chart axis.
pub fn christoffel_at<M: MetricSource + ?Sized>(
    field: &M,
    p: &ChartPoint,
    h: f64,
) -> Result<ChristoffelSymbols> {
    christoffel_raw(field, p.coords(), h)
}

pub(crate) fn christoffel_raw<M: MetricSource + ?Sized>(
    field: &M,
    p: &[f64],
    h: f64,
) -> Result<ChristoffelSymbols> {
    if !(h > 0.0) {
        return Err(GeometryError::InvalidArgument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let d = field.dim();
    if p.len() != d {
        return Err(GeometryError::DimensionMismatch {
            expected: d,
            got: p.len(),
        });
    }
    let g = field.metric_at(p)?;
    let g_inv = g
        .clone()
        .cholesky()
        .ok_or_else(|| GeometryError::SingularMetric { point: p.to_vec() })?
        .inverse();

    // dg[n][(a, b)] = ∂g_ab / ∂x_n
    let mut dg = Vec::with_capacity(d);
    let mut q = p.to_vec();
    for n in 0..d {
        q[n] = p[n] + h;
        let plus = field.metric_at(&q)?;
        q[n] = p[n] - h;
        let minus = field.metric_at(&q)?;
        q[n] = p[n];
        dg.push((plus - minus) / (2.0 * h));
    }

    let mut gamma = ChristoffelSymbols::zeros(d);
    for k in 0..d {
        for l in 0..d {
            for m in l..d {
                let mut acc = 0.0;
                for n in 0..d {
                    let bracket = dg[l][(m, n)] + dg[m][(n, l)] - dg[n][(l, m)];
                    acc += g_inv[(k, n)] * bracket;
                }
                let value = 0.5 * acc;
                gamma.set(k, l, m, value);
                gamma.set(k, m, l, value);
            }
        }
    }
    if gamma.data.iter().any(|x| !x.is_finite()) {
        return Err(GeometryError::SingularMetric { point: p.to_vec() });
    }
    Ok(gamma)
}
