//! Truncated uniform lattice `[-X, X]^d` and functions sampled on it.
//!
//! Functions are extended by zero outside the box. Interpolation between
//! nodes is multilinear, so every interpolation weight is nonnegative.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub d: usize,
    pub half_width: f64,
    pub h: f64,
    pub n_per_axis: usize,
}

impl Grid {
    /// `2X/h` must be an integer (to 1e-9) so that `±X` are nodes.
    pub fn new(d: usize, half_width: f64, h: f64) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("grid dimension must be positive"));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::invalid(format!("grid spacing h={h} must be positive")));
        }
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(Error::invalid(format!("grid half width X={half_width} must be positive")));
        }
        let cells = 2.0 * half_width / h;
        let rounded = cells.round();
        if (cells - rounded).abs() > 1e-9 * cells.max(1.0) || rounded < 2.0 {
            return Err(Error::invalid(format!("2X/h = {cells} must be an integer >= 2")));
        }
        let n_per_axis = rounded as usize + 1;
        if (n_per_axis as f64).powi(d as i32) > 5e7 {
            return Err(Error::invalid("grid too large"));
        }
        Ok(Grid { d, half_width, h, n_per_axis })
    }

    pub fn len(&self) -> usize {
        self.n_per_axis.pow(self.d as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Cell volume h^d, the weight of the discrete pairing.
    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.d as i32)
    }

    pub fn axis_coord(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.h
    }

    /// Row-major: the last axis varies fastest.
    pub fn multi_index(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.d];
        for a in (0..self.d).rev() {
            out[a] = idx % self.n_per_axis;
            idx /= self.n_per_axis;
        }
        out
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi.iter().fold(0, |acc, &i| acc * self.n_per_axis + i)
    }

    /// Stride of axis `a` in the flat ordering.
    pub fn stride(&self, a: usize) -> usize {
        self.n_per_axis.pow((self.d - 1 - a) as u32)
    }

    pub fn node(&self, idx: usize) -> Vec<f64> {
        self.multi_index(idx).into_iter().map(|i| self.axis_coord(i)).collect()
    }

    /// Neighbor of `idx` shifted by `offset` cells along `axis`, if inside the grid.
    pub fn neighbor(&self, idx: usize, axis: usize, offset: isize) -> Option<usize> {
        let i = (idx / self.stride(axis)) % self.n_per_axis;
        let j = i as isize + offset;
        if j < 0 || j >= self.n_per_axis as isize {
            None
        } else {
            Some((idx as isize + offset * self.stride(axis) as isize) as usize)
        }
    }

    /// Distance (in cells) from node `idx` to the nearest boundary face.
    pub fn cells_to_boundary(&self, idx: usize) -> usize {
        self.multi_index(idx)
            .into_iter()
            .map(|i| i.min(self.n_per_axis - 1 - i))
            .min()
            .unwrap_or(0)
    }

    /// Linear interpolation weights on one axis; nodes outside are dropped.
    fn axis_weights(&self, s: f64) -> Vec<(usize, f64)> {
        let t = (s + self.half_width) / self.h;
        if !(t > -1.0 && t < self.n_per_axis as f64) {
            return Vec::new();
        }
        let i0 = t.floor();
        let f = t - i0;
        let i0 = i0 as isize;
        let mut out = Vec::with_capacity(2);
        for (i, w) in [(i0, 1.0 - f), (i0 + 1, f)] {
            if i >= 0 && (i as usize) < self.n_per_axis && w > 0.0 {
                out.push((i as usize, w));
            }
        }
        out
    }

    /// Multilinear interpolation weights of `point` (zero extension outside).
    pub fn interpolation_weights(&self, point: &[f64]) -> Vec<(usize, f64)> {
        let per_axis: Vec<_> = point.iter().map(|&s| self.axis_weights(s)).collect();
        self.tensor(&per_axis)
    }

    /// `∫_{lo}^{hi} φ_i(s) ds` for every axis hat function `φ_i` overlapping the interval.
    pub(crate) fn axis_hat_integrals(&self, lo: f64, hi: f64) -> Vec<(usize, f64)> {
        if hi <= lo {
            return Vec::new();
        }
        let h = self.h;
        // F(t) = ∫_{-1}^{t} max(0, 1 - |u|) du
        let cdf = |t: f64| {
            if t <= -1.0 {
                0.0
            } else if t <= 0.0 {
                0.5 * (t + 1.0) * (t + 1.0)
            } else if t <= 1.0 {
                1.0 - 0.5 * (1.0 - t) * (1.0 - t)
            } else {
                1.0
            }
        };
        let first = (((lo + self.half_width) / h).floor() as isize - 1).max(0);
        let last = (((hi + self.half_width) / h).ceil() as isize + 1).min(self.n_per_axis as isize - 1);
        let mut out = Vec::new();
        for i in first..=last {
            let x = self.axis_coord(i as usize);
            let w = h * (cdf((hi - x) / h) - cdf((lo - x) / h));
            if w > 0.0 {
                out.push((i as usize, w));
            }
        }
        out
    }

    /// Weights `c_k` with `∫_box ũ = Σ_k c_k u_k` for the multilinear
    /// interpolant `ũ` of grid values and the box `Π [lo_a, hi_a]`.
    pub fn box_integral_weights(&self, lo: &[f64], hi: &[f64]) -> Vec<(usize, f64)> {
        let per_axis: Vec<_> = lo.iter().zip(hi).map(|(&l, &u)| self.axis_hat_integrals(l, u)).collect();
        self.tensor(&per_axis)
    }

    /// Flat indices and weights of the tensor product of per-axis
    /// `(axis index, weight)` lists.
    pub(crate) fn tensor(&self, per_axis: &[Vec<(usize, f64)>]) -> Vec<(usize, f64)> {
        let mut acc: Vec<(usize, f64)> = vec![(0, 1.0)];
        for axis in per_axis {
            if axis.is_empty() {
                return Vec::new();
            }
            let mut next = Vec::with_capacity(acc.len() * axis.len());
            for &(flat, w) in &acc {
                for &(i, wa) in axis {
                    next.push((flat * self.n_per_axis + i, w * wa));
                }
            }
            acc = next;
        }
        acc
    }
}

/// Values on every node of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Dimension { expected: grid.len(), got: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("grid function has non-finite entries"));
        }
        Ok(GridFunction { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        GridFunction { values: vec![0.0; grid.len()], grid }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.len()).map(|i| f(&grid.node(i))).collect();
        GridFunction { grid, values }
    }

    /// h^d Σ |u_i|
    pub fn norm_1(&self) -> f64 {
        self.grid.cell_volume() * self.values.iter().map(|v| v.abs()).sum::<f64>()
    }

    pub fn norm_inf(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// h^d Σ u_i
    pub fn mass(&self) -> f64 {
        self.grid.cell_volume() * self.values.iter().sum::<f64>()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// h^d Σ u_i f_i
    pub fn pairing(&self, other: &GridFunction) -> Result<f64> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch);
        }
        Ok(self.grid.cell_volume() * self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum::<f64>())
    }

    /// Whitespace table, one node per line: coordinates then value.
    pub fn write_table<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        for (i, v) in self.values.iter().enumerate() {
            for c in self.grid.node(i) {
                write!(w, "{c:.10e} ")?;
            }
            writeln!(w, "{v:.16e}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn grid_shape() {
        let g = Grid::new(1, 8.0, 0.01).unwrap();
        assert_eq!(g.len(), 1601);
        assert_abs_diff_eq!(g.axis_coord(800), 0.0, epsilon = 1e-12);
        assert!(Grid::new(1, 1.0, 0.3).is_err());
        assert!(Grid::new(1, 1.0, 0.0).is_err());
        let g2 = Grid::new(2, 1.0, 0.5).unwrap();
        assert_eq!(g2.len(), 25);
        assert_eq!(g2.node(7), vec![-0.5, 0.0]);
        assert_eq!(g2.flat_index(&[1, 2]), 7);
        assert_eq!(g2.neighbor(7, 0, 1), Some(12));
        assert_eq!(g2.neighbor(7, 1, -3), None);
    }

    #[test]
    fn interpolation_is_exact_for_linear_functions_and_zero_outside() {
        let g = Grid::new(2, 2.0, 0.25).unwrap();
        let u = GridFunction::from_fn(g, |x| 1.0 + 2.0 * x[0] - x[1]);
        let p = [0.3, -1.1];
        let v: f64 = g.interpolation_weights(&p).iter().map(|&(i, w)| w * u.values[i]).sum();
        assert_abs_diff_eq!(v, 1.0 + 0.6 + 1.1, epsilon = 1e-12);
        assert!(g.interpolation_weights(&[2.5, 0.0]).is_empty());
    }

    #[test]
    fn hat_integrals_of_whole_line_sum_to_h() {
        let g = Grid::new(1, 1.0, 0.1).unwrap();
        let w = g.box_integral_weights(&[-0.95], &[0.95]);
        // interior hats integrate to h, partially covered end hats less
        let total: f64 = w.iter().map(|p| p.1).sum();
        assert_abs_diff_eq!(total, 1.9, epsilon = 1e-12);
        let k10 = w.iter().find(|p| p.0 == 10).unwrap().1;
        assert_abs_diff_eq!(k10, 0.1, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn hat_integral_matches_interpolant_average(lo in -0.8f64..0.5, len in 0.01f64..0.3) {
            let g = Grid::new(1, 1.0, 0.1).unwrap();
            let u = GridFunction::from_fn(g, |x| x[0] * x[0]);
            let hi = lo + len;
            let exact: f64 = g.box_integral_weights(&[lo], &[hi]).iter().map(|&(i, w)| w * u.values[i]).sum();
            // midpoint rule on a fine partition of the interpolant
            let n = 20_000;
            let dx = len / n as f64;
            let quad: f64 = (0..n).map(|k| {
                let s = lo + (k as f64 + 0.5) * dx;
                g.interpolation_weights(&[s]).iter().map(|&(i, w)| w * u.values[i]).sum::<f64>() * dx
            }).sum();
            prop_assert!((exact - quad).abs() < 1e-8);
        }
    }
}
