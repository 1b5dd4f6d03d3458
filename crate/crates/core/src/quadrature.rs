//! Flat point/weight sets in physical space.

use crate::error::{Error, Result};
use crate::geometry::Cell;
use crate::integrand::Integrand;
use crate::rules::TensorRule;

/// Points and positive weights in physical coordinates; the data a discrete
/// loss is assembled from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CompositeQuadrature {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl CompositeQuadrature {
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if points.len() != dim * weights.len() {
            return Err(Error::invalid(format!(
                "{} coordinates do not describe {} points in dimension {dim}",
                points.len(),
                weights.len()
            )));
        }
        Ok(CompositeQuadrature {
            dim,
            points,
            weights,
        })
    }

    pub fn empty(dim: usize) -> Self {
        CompositeQuadrature {
            dim,
            points: Vec::new(),
            weights: Vec::new(),
        }
    }

    /// Applies `rule` on every cell, cell-major then node-major.
    pub fn from_cells<'a>(rule: &TensorRule, cells: impl IntoIterator<Item = &'a Cell>) -> Self {
        let mut q = CompositeQuadrature::empty(rule.dim());
        for cell in cells {
            q.push_cell(rule, cell);
        }
        q
    }

    pub fn push_cell(&mut self, rule: &TensorRule, cell: &Cell) {
        debug_assert_eq!(rule.dim(), self.dim);
        rule.mapped_points_into(cell, &mut self.points);
        let vol = cell.volume();
        self.weights.extend(rule.weights().iter().map(|w| w * vol));
    }

    pub fn push(&mut self, point: &[f64], weight: f64) {
        debug_assert_eq!(point.len(), self.dim);
        self.points.extend_from_slice(point);
        self.weights.push(weight);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn point(&self, q: usize) -> &[f64] {
        &self.points[q * self.dim..(q + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Sum of weights; the measure of the integration domain.
    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `sum_q w_q f(x_q)`, failing on the first non-finite value.
    pub fn integrate<I: Integrand + ?Sized>(&self, f: &I) -> Result<f64> {
        let mut values = vec![0.0; self.len()];
        f.eval_batch(&self.points, &mut values);
        let mut acc = 0.0;
        for (q, (w, v)) in self.weights.iter().zip(&values).enumerate() {
            if !v.is_finite() {
                return Err(Error::Evaluation {
                    point: self.point(q).to_vec(),
                    value: *v,
                });
            }
            acc += w * v;
        }
        Ok(acc)
    }

    /// Embeds a lower-dimensional quadrature by inserting `value` at
    /// coordinate `axis` of every point.
    pub fn embed(&self, axis: usize, value: f64) -> CompositeQuadrature {
        let d = self.dim + 1;
        let mut points = Vec::with_capacity(self.len() * d);
        for q in 0..self.len() {
            let p = self.point(q);
            points.extend_from_slice(&p[..axis]);
            points.push(value);
            points.extend_from_slice(&p[axis..]);
        }
        CompositeQuadrature {
            dim: d,
            points,
            weights: self.weights.clone(),
        }
    }
}

/// `sum over the n^d equal sub-boxes of `domain` of the order-`order`
/// Gauss–Legendre rule`, evaluated one slab of cells at a time so the point
/// set never has to exist in full. Slabs along the first axis are summed in
/// order.
pub fn brute_force_integral<I: Integrand + ?Sized>(
    f: &I,
    domain: &Cell,
    per_axis: usize,
    order: usize,
    threads: usize,
) -> Result<f64> {
    let d = domain.dim();
    if f.dim() != d {
        return Err(Error::invalid("integrand and domain dimensions differ"));
    }
    if per_axis == 0 {
        return Err(Error::invalid("per_axis must be >= 1"));
    }
    let rule = TensorRule::new(d, order)?;
    let h = domain.widths()[0] / per_axis as f64;
    let parts = crate::par::map_indexed(per_axis, threads, |i| {
        let mut lo = domain.lower().to_vec();
        lo[0] += h * i as f64;
        let mut w = domain.widths().to_vec();
        w[0] = h;
        let slab = Cell::new(lo, w)?;
        let cells = if d == 1 {
            vec![slab]
        } else {
            // Subdivide the remaining axes of the slab.
            let rest = Cell::new(slab.lower()[1..].to_vec(), slab.widths()[1..].to_vec())?;
            rest.subdivide(per_axis)
                .into_iter()
                .map(|c| {
                    let mut l = vec![slab.lower()[0]];
                    l.extend_from_slice(c.lower());
                    let mut w = vec![h];
                    w.extend_from_slice(c.widths());
                    Cell::new(l, w)
                })
                .collect::<Result<Vec<_>>>()?
        };
        CompositeQuadrature::from_cells(&rule, cells.iter()).integrate(f)
    });
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total)
}

/// Primal and reference quadratures built over the same partition.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuadraturePair {
    pub primal: CompositeQuadrature,
    pub reference: CompositeQuadrature,
    /// Number of partition cells, or 0 for sampled point sets.
    pub cells: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrand::FnIntegrand;

    #[test]
    fn brute_force_matches_composite() {
        let f = FnIntegrand::new(2, |x: &[f64]| (3.0 * x[0]).sin() * x[1].exp());
        let dom = Cell::new(vec![0.0, -1.0], vec![2.0, 1.5]).unwrap();
        let a = brute_force_integral(&f, &dom, 4, 3, 1).unwrap();
        let b = CompositeQuadrature::from_cells(&TensorRule::new(2, 3).unwrap(), dom.subdivide(4).iter())
            .integrate(&f)
            .unwrap();
        assert!((a - b).abs() < 1e-13);
        let exact = (1.0 - 6f64.cos()) / 3.0 * (0.5f64.exp() - (-1f64).exp());
        let fine = brute_force_integral(&f, &dom, 16, 5, 2).unwrap();
        assert!((fine - exact).abs() < 1e-12);
    }

    #[test]
    fn embed_inserts_fixed_coordinate() {
        let q = CompositeQuadrature::new(1, vec![0.25, 0.75], vec![0.5, 0.5]).unwrap();
        let e = q.embed(0, 1.0);
        assert_eq!(e.points(), &[1.0, 0.25, 1.0, 0.75]);
        let e = q.embed(1, 0.0);
        assert_eq!(e.points(), &[0.25, 0.0, 0.75, 0.0]);
    }

    #[test]
    fn composite_from_cells_integrates_linear() {
        let rule = TensorRule::new(2, 2).unwrap();
        let cells = Cell::unit(2).subdivide(2);
        let q = CompositeQuadrature::from_cells(&rule, &cells);
        assert_eq!(q.len(), 16);
        let f = FnIntegrand::new(2, |x: &[f64]| x[0] + 2.0 * x[1]);
        assert!((q.integrate(&f).unwrap() - 1.5).abs() < 1e-14);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        assert!(CompositeQuadrature::new(2, vec![0.0; 3], vec![1.0]).is_err());
    }
}
