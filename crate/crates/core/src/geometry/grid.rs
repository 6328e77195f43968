use serde::{Deserialize, Serialize};

/// A regular axis-aligned lattice of cells over a box in chart coordinates.
///
/// Cells are indexed row-major with axis 0 varying fastest. Cell centers are
/// the node positions used by [`super::MetricField`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub cells: Vec<usize>,
}

impl GridSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, cells: Vec<usize>) -> Self {
        assert_eq!(lower.len(), upper.len());
        assert_eq!(lower.len(), cells.len());
        assert!(cells.iter().all(|&c| c >= 1));
        assert!(lower.iter().zip(&upper).all(|(l, u)| u > l));
        GridSpec {
            lower,
            upper,
            cells,
        }
    }

    /// Bounding box of `points` expanded by `expand` of its extent (half on
    /// each side), split into `cells` per axis.
    pub fn covering<'a, I>(points: I, dim: usize, cells: usize, expand: f64) -> Option<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        let mut any = false;
        for p in points {
            any = true;
            for i in 0..dim {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        if !any {
            return None;
        }
        for i in 0..dim {
            let mut extent = hi[i] - lo[i];
            if extent <= 0.0 {
                extent = lo[i].abs().max(1.0) * 1e-6;
            }
            let pad = 0.5 * expand * extent;
            lo[i] -= pad;
            hi[i] = (hi[i] + pad).max(lo[i] + extent);
        }
        Some(GridSpec::new(lo, hi, vec![cells; dim]))
    }

    pub fn dim(&self) -> usize {
        self.cells.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cells.iter().product()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / self.cells[axis] as f64
    }

    pub fn min_spacing(&self) -> f64 {
        (0..self.dim())
            .map(|i| self.spacing(i))
            .fold(f64::INFINITY, f64::min)
    }

    /// Flat index of the cell containing `p`, or `None` outside the box.
    pub fn cell_of(&self, p: &[f64]) -> Option<usize> {
        let mut flat = 0;
        let mut stride = 1;
        for i in 0..self.dim() {
            let t = (p[i] - self.lower[i]) / self.spacing(i);
            if !(t >= 0.0) || t > self.cells[i] as f64 {
                return None;
            }
            let idx = (t as usize).min(self.cells[i] - 1);
            flat += idx * stride;
            stride *= self.cells[i];
        }
        Some(flat)
    }

    pub fn unravel(&self, mut flat: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.dim());
        for &c in &self.cells {
            out.push(flat % c);
            flat /= c;
        }
        out
    }

    pub fn ravel(&self, idx: &[usize]) -> usize {
        let mut flat = 0;
        let mut stride = 1;
        for (i, &c) in self.cells.iter().enumerate() {
            flat += idx[i] * stride;
            stride *= c;
        }
        flat
    }

    pub fn center(&self, flat: usize) -> Vec<f64> {
        self.unravel(flat)
            .iter()
            .enumerate()
            .map(|(i, &k)| self.lower[i] + (k as f64 + 0.5) * self.spacing(i))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ravel_roundtrip_and_centers() {
        let g = GridSpec::new(vec![0.0, 0.0], vec![2.0, 1.0], vec![4, 2]);
        for flat in 0..g.n_cells() {
            assert_eq!(g.ravel(&g.unravel(flat)), flat);
        }
        assert_eq!(g.center(0), vec![0.25, 0.25]);
        assert_eq!(g.cell_of(&[1.9, 0.9]), Some(g.ravel(&[3, 1])));
        assert_eq!(g.cell_of(&[2.0, 1.0]), Some(g.n_cells() - 1));
        assert_eq!(g.cell_of(&[-0.1, 0.5]), None);
    }

    #[test]
    fn covering_expands_symmetrically() {
        let pts = [vec![0.0, 0.0], vec![1.0, 2.0]];
        let g = GridSpec::covering(pts.iter().map(|p| p.as_slice()), 2, 10, 0.1).unwrap();
        assert!((g.lower[0] + 0.05).abs() < 1e-15);
        assert!((g.upper[1] - 2.1).abs() < 1e-15);
    }
}
