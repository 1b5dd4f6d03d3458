//! Gauss–Legendre rules on `[0,1]`, their tensor products on `[0,1]^d`, and
//! affine pullback of cell integrals.

use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};
use crate::geometry::Cell;

pub const MAX_ORDER: usize = 32;
pub const MAX_DIM: usize = 4;

/// A 1D Gauss–Legendre rule on `[0,1]`. Exact for degree `2k - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rule1D {
    order: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl Rule1D {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Legendre `P_n(x)` and `P_n'(x)` by the three-term recurrence.
fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p_prev = 1.0;
    let mut p = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for j in 2..=n {
        let jf = j as f64;
        let next = ((2.0 * jf - 1.0) * x * p - (jf - 1.0) * p_prev) / jf;
        p_prev = p;
        p = next;
    }
    let dp = n as f64 * (x * p - p_prev) / (x * x - 1.0);
    (p, dp)
}

fn compute_rule(order: usize) -> Rule1D {
    let n = order;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    // Roots of P_n on [-1,1], largest first; only the positive half is solved
    // for and the rest mirrored, which keeps the rule exactly symmetric.
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() <= 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d.is_finite() {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // x_i > 0 maps to index n-1-i after sorting ascending on [0,1].
        let hi = n - 1 - i;
        nodes[hi] = 0.5 + 0.5 * x;
        weights[hi] = 0.5 * w;
        nodes[i] = 0.5 - 0.5 * x;
        weights[i] = 0.5 * w;
    }
    if n % 2 == 1 {
        let mid = n / 2;
        nodes[mid] = 0.5;
        let (_, dp) = legendre_with_derivative(n, 0.0);
        weights[mid] = 1.0 / (dp * dp);
    }
    Rule1D {
        order,
        nodes,
        weights,
    }
}

static RULE_CACHE: [OnceLock<Arc<Rule1D>>; MAX_ORDER + 1] = [const { OnceLock::new() }; MAX_ORDER + 1];

/// Gauss–Legendre rule of `order` points on `[0,1]`, cached per order.
pub fn gauss_legendre_1d(order: usize) -> Result<Arc<Rule1D>> {
    if !(1..=MAX_ORDER).contains(&order) {
        return Err(Error::invalid(format!(
            "Gauss-Legendre order must lie in [1, {MAX_ORDER}], got {order}"
        )));
    }
    Ok(RULE_CACHE[order]
        .get_or_init(|| Arc::new(compute_rule(order)))
        .clone())
}

/// Tensor-product Gauss–Legendre rule on `[0,1]^dim` with `order^dim` points.
///
/// Points are stored flat (`point q` occupies `points[q*dim..(q+1)*dim]`),
/// first axis varying slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRule {
    dim: usize,
    order: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl TensorRule {
    pub fn new(dim: usize, order: usize) -> Result<Self> {
        if !(1..=MAX_DIM).contains(&dim) {
            return Err(Error::invalid(format!(
                "tensor rule dimension must lie in [1, {MAX_DIM}], got {dim}"
            )));
        }
        let rule = gauss_legendre_1d(order)?;
        let count = order.pow(dim as u32);
        let mut points = Vec::with_capacity(count * dim);
        let mut weights = Vec::with_capacity(count);
        let mut idx = vec![0usize; dim];
        for _ in 0..count {
            let mut w = 1.0;
            for &i in &idx {
                points.push(rule.nodes[i]);
                w *= rule.weights[i];
            }
            weights.push(w);
            for a in (0..dim).rev() {
                idx[a] += 1;
                if idx[a] < order {
                    break;
                }
                idx[a] = 0;
            }
        }
        Ok(TensorRule {
            dim,
            order,
            points,
            weights,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.order
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

    /// Appends the rule's nodes mapped into `cell` to `out`.
    pub fn mapped_points_into(&self, cell: &Cell, out: &mut Vec<f64>) {
        let d = self.dim;
        let start = out.len();
        out.resize(start + self.points.len(), 0.0);
        for (q, dst) in out[start..].chunks_exact_mut(d).enumerate() {
            cell.map_into(self.point(q), dst);
        }
    }

    /// `vol(cell) * sum_q w_q * values[q]`, with `values` ordered like the nodes.
    pub fn combine(&self, cell_volume: f64, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.weights.len());
        let s: f64 = self.weights.iter().zip(values).map(|(w, v)| w * v).sum();
        cell_volume * s
    }
}

/// Primal (training) rule and the richer, non-nested reference rule.
#[derive(Debug, Clone, PartialEq)]
pub struct RulePair {
    primal: TensorRule,
    reference: TensorRule,
}

impl RulePair {
    pub const DEFAULT_ORDERS: (usize, usize) = (7, 10);

    pub fn new(dim: usize, primal_order: usize, reference_order: usize) -> Result<Self> {
        if reference_order <= primal_order {
            return Err(Error::invalid(format!(
                "reference order {reference_order} must exceed primal order {primal_order}"
            )));
        }
        Ok(RulePair {
            primal: TensorRule::new(dim, primal_order)?,
            reference: TensorRule::new(dim, reference_order)?,
        })
    }

    pub fn with_default_orders(dim: usize) -> Result<Self> {
        let (p, r) = Self::DEFAULT_ORDERS;
        Self::new(dim, p, r)
    }

    pub fn dim(&self) -> usize {
        self.primal.dim
    }

    pub fn primal(&self) -> &TensorRule {
        &self.primal
    }

    pub fn reference(&self) -> &TensorRule {
        &self.reference
    }
}

/// `Q_K(f) = sum_q w_q vol(K) f(F_K(x_q))` for an affine box map.
pub fn apply_rule<F>(rule: &TensorRule, cell: &Cell, f: F) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if rule.dim() != cell.dim() {
        return Err(Error::invalid(format!(
            "rule dimension {} does not match cell dimension {}",
            rule.dim(),
            cell.dim()
        )));
    }
    let mut x = vec![0.0; cell.dim()];
    let mut acc = 0.0;
    for (q, w) in rule.weights().iter().enumerate() {
        cell.map_into(rule.point(q), &mut x);
        let v = f(&x);
        if !v.is_finite() {
            return Err(Error::Evaluation {
                point: x,
                value: v,
            });
        }
        acc += w * v;
    }
    Ok(cell.volume() * acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_one_is_midpoint() {
        let r = gauss_legendre_1d(1).unwrap();
        assert_eq!(r.nodes(), &[0.5]);
        assert_eq!(r.weights(), &[1.0]);
    }

    #[test]
    fn order_two_solves_cubic_moments() {
        // Symmetric two-point rule: nodes 1/2 -+ a, weights 1/2; exactness on
        // x^2 gives 1/4 + a^2 = 1/3, i.e. a = 1/(2 sqrt 3).
        let a = 1.0 / (2.0 * 3f64.sqrt());
        let r = gauss_legendre_1d(2).unwrap();
        assert!((r.nodes()[0] - (0.5 - a)).abs() < 1e-15);
        assert!((r.nodes()[1] - (0.5 + a)).abs() < 1e-15);
        assert!((r.weights()[0] - 0.5).abs() < 1e-15);
        assert!((r.weights()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn order_seven_integrates_degree_thirteen() {
        let r = gauss_legendre_1d(7).unwrap();
        let s: f64 = r
            .nodes()
            .iter()
            .zip(r.weights())
            .map(|(x, w)| w * x.powi(13))
            .sum();
        assert!((s - 1.0 / 14.0).abs() < 1e-14);
    }

    #[test]
    fn rule_invariants_hold_for_all_orders() {
        for k in 1..=MAX_ORDER {
            let r = gauss_legendre_1d(k).unwrap();
            assert_eq!(r.nodes().len(), k);
            assert!(r.weights().iter().all(|w| *w > 0.0));
            assert!(r.nodes().windows(2).all(|p| p[0] < p[1]));
            assert!(r.nodes().iter().all(|x| *x > 0.0 && *x < 1.0));
            let total: f64 = r.weights().iter().sum();
            assert!((total - 1.0).abs() < 1e-14, "order {k}: {total}");
            // Exact for x^(2k-1) and x^(2k-2).
            for deg in [2 * k - 2, 2 * k - 1] {
                let s: f64 = r
                    .nodes()
                    .iter()
                    .zip(r.weights())
                    .map(|(x, w)| w * x.powi(deg as i32))
                    .sum();
                let exact = 1.0 / (deg as f64 + 1.0);
                assert!((s - exact).abs() < 1e-14, "order {k} degree {deg}: {s} vs {exact}");
            }
        }
    }

    #[test]
    fn order_bounds_are_enforced() {
        assert!(gauss_legendre_1d(0).is_err());
        assert!(gauss_legendre_1d(MAX_ORDER + 1).is_err());
        assert!(TensorRule::new(0, 3).is_err());
        assert!(TensorRule::new(5, 3).is_err());
        assert!(RulePair::new(2, 7, 7).is_err());
    }

    #[test]
    fn tensor_rule_counts_and_weights() {
        let r = TensorRule::new(2, 7).unwrap();
        assert_eq!(r.len(), 49);
        for d in 1..=MAX_DIM {
            for k in [1, 3, 7, 10] {
                let r = TensorRule::new(d, k).unwrap();
                let s: f64 = r.weights().iter().sum();
                assert!((s - 1.0).abs() < 1e-13);
                assert!(r.weights().iter().all(|w| *w > 0.0));
            }
        }
        let t = TensorRule::new(1, 3).unwrap();
        let g = gauss_legendre_1d(3).unwrap();
        assert_eq!(t.points(), g.nodes());
        assert_eq!(t.weights(), g.weights());
    }

    #[test]
    fn apply_rule_examples() {
        let rule = TensorRule::new(2, 3).unwrap();
        let c = Cell::new(vec![0.0, 0.0], vec![2.0, 3.0]).unwrap();
        assert!((apply_rule(&rule, &c, |_| 1.0).unwrap() - 6.0).abs() < 1e-14);
        let c = Cell::new(vec![0.0, 0.0], vec![2.0, 1.0]).unwrap();
        for k in 1..=4 {
            let rule = TensorRule::new(2, k).unwrap();
            assert!((apply_rule(&rule, &c, |x| x[0]).unwrap() - 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn apply_rule_reports_offending_point() {
        let rule = TensorRule::new(1, 1).unwrap();
        let c = Cell::new(vec![1.0], vec![2.0]).unwrap();
        match apply_rule(&rule, &c, |x| 1.0 / (x[0] - 2.0)) {
            Err(Error::Evaluation { point, .. }) => assert_eq!(point, vec![2.0]),
            other => panic!("expected evaluation failure, got {other:?}"),
        }
    }
}
