//! Axis-aligned cells and their affine maps from the reference cube `[0,1]^d`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An axis-aligned box `prod_i [lower_i, lower_i + widths_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    lower: Vec<f64>,
    widths: Vec<f64>,
}

impl Cell {
    pub fn new(lower: Vec<f64>, widths: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != widths.len() {
            return Err(Error::invalid(format!(
                "cell needs matching non-empty lower/widths, got {} and {}",
                lower.len(),
                widths.len()
            )));
        }
        if lower.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("cell lower corner must be finite"));
        }
        if widths.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::invalid(format!(
                "cell widths must be positive and finite, got {widths:?}"
            )));
        }
        Ok(Cell { lower, widths })
    }

    /// The unit cube `[0,1]^dim`.
    pub fn unit(dim: usize) -> Self {
        Cell {
            lower: vec![0.0; dim],
            widths: vec![1.0; dim],
        }
    }

    /// Box spanned by two opposite corners.
    pub fn from_bounds(lo: &[f64], hi: &[f64]) -> Result<Self> {
        let widths = lo.iter().zip(hi).map(|(a, b)| b - a).collect();
        Cell::new(lo.to_vec(), widths)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    pub fn upper(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.widths)
            .map(|(a, h)| a + h)
            .collect()
    }

    pub fn volume(&self) -> f64 {
        self.widths.iter().product()
    }

    pub fn centroid(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.widths)
            .map(|(a, h)| a + 0.5 * h)
            .collect()
    }

    /// Writes `F_K(reference)` into `out`.
    #[inline]
    pub fn map_into(&self, reference: &[f64], out: &mut [f64]) {
        for i in 0..self.lower.len() {
            out[i] = self.lower[i] + self.widths[i] * reference[i];
        }
    }

    pub fn map(&self, reference: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.map_into(reference, &mut out);
        out
    }

    /// True when `x` lies strictly inside the box.
    pub fn contains_interior(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.widths))
            .all(|(xi, (a, h))| *xi > *a && *xi < a + h)
    }

    /// Halves the box along `axis`. The split point is `lower + widths/2`, so
    /// both children carry exactly half the parent width along that axis.
    pub fn bisect(&self, axis: usize) -> (Cell, Cell) {
        assert!(axis < self.dim(), "axis {axis} out of range for dim {}", self.dim());
        let half = 0.5 * self.widths[axis];
        let mut left = self.clone();
        left.widths[axis] = half;
        let mut right = left.clone();
        right.lower[axis] = self.lower[axis] + half;
        (left, right)
    }

    /// Splits the box into `n^d` equal sub-boxes, first axis slowest.
    pub fn subdivide(&self, per_axis: usize) -> Vec<Cell> {
        assert!(per_axis >= 1);
        let d = self.dim();
        let widths: Vec<f64> = self.widths.iter().map(|w| w / per_axis as f64).collect();
        let total = per_axis.pow(d as u32);
        let mut cells = Vec::with_capacity(total);
        let mut idx = vec![0usize; d];
        for _ in 0..total {
            let lower = (0..d)
                .map(|i| self.lower[i] + self.widths[i] * idx[i] as f64 / per_axis as f64)
                .collect();
            cells.push(Cell {
                lower,
                widths: widths.clone(),
            });
            for i in (0..d).rev() {
                idx[i] += 1;
                if idx[i] < per_axis {
                    break;
                }
                idx[i] = 0;
            }
        }
        cells
    }

    /// True when the interiors of `self` and `other` intersect.
    pub fn overlaps(&self, other: &Cell) -> bool {
        (0..self.dim()).all(|i| {
            let a0 = self.lower[i];
            let a1 = a0 + self.widths[i];
            let b0 = other.lower[i];
            let b1 = b0 + other.widths[i];
            a0 < b1 && b0 < a1
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_widths() {
        assert!(Cell::new(vec![0.0, 0.0], vec![1.0, 0.0]).is_err());
        assert!(Cell::new(vec![0.0], vec![-1.0]).is_err());
        assert!(Cell::new(vec![0.0], vec![1.0, 1.0]).is_err());
        assert!(Cell::new(vec![], vec![]).is_err());
    }

    #[test]
    fn bisect_unit_square_along_x() {
        let (l, r) = Cell::unit(2).bisect(0);
        assert_eq!(l.lower(), &[0.0, 0.0]);
        assert_eq!(l.widths(), &[0.5, 1.0]);
        assert_eq!(r.lower(), &[0.5, 0.0]);
        assert_eq!(r.widths(), &[0.5, 1.0]);
    }

    #[test]
    fn bisect_halves_only_the_chosen_axis() {
        let c = Cell::new(vec![1.0, -2.0], vec![2.0, 6.0]).unwrap();
        let (l, r) = c.bisect(1);
        assert_eq!(l.widths(), &[2.0, 3.0]);
        assert_eq!(r.widths(), &[2.0, 3.0]);
        assert_eq!(r.lower(), &[1.0, 1.0]);
        assert_eq!(l.volume() + r.volume(), c.volume());
    }

    #[test]
    fn repeated_bisection_aspect_ratio() {
        let mut c = Cell::unit(2);
        for n in 1..=10 {
            c = c.bisect(0).0;
            assert_eq!(c.widths()[1] / c.widths()[0], 2f64.powi(n));
        }
    }

    #[test]
    fn subdivide_tiles_the_parent() {
        let c = Cell::new(vec![0.0, 1.0], vec![2.0, 3.0]).unwrap();
        let parts = c.subdivide(3);
        assert_eq!(parts.len(), 9);
        let vol: f64 = parts.iter().map(Cell::volume).sum();
        assert!((vol - 6.0).abs() < 1e-12);
        for (i, a) in parts.iter().enumerate() {
            for b in &parts[i + 1..] {
                assert!(!a.overlaps(b));
            }
        }
    }
}
