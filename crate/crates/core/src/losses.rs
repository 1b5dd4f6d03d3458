//! Discrete residual losses on composite quadratures.
//!
//! A problem has one domain term followed by one term per boundary face. All
//! quadratures handed to this module live in physical coordinates of the full
//! domain dimension; face quadratures are built in face coordinates and
//! lifted with [`BoundaryFace::embed`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrand::Integrand;
use crate::nn::{backward, forward_batch, forward_with_tape, BatchOutputs, JetOrder, MlpParams};
use crate::par::map_indexed;
use crate::problems::{ExactSolution, ProblemSpec};
use crate::quadrature::{CompositeQuadrature, QuadraturePair};

/// Points per batch handed to the network.
pub const CHUNK: usize = 1024;

pub const ETA_FLOOR: f64 = 1e-300;

/// Something with spatial derivatives that can stand in for the network.
pub trait Ansatz: Sync {
    fn in_dim(&self) -> usize;
    fn eval(&self, points: &[f64], order: JetOrder) -> BatchOutputs;
}

impl Ansatz for MlpParams {
    fn in_dim(&self) -> usize {
        self.arch().in_dim
    }

    fn eval(&self, points: &[f64], order: JetOrder) -> BatchOutputs {
        forward_batch(self, points, order)
    }
}

/// An exact solution used as the ansatz, optionally shifted by a constant.
#[derive(Clone)]
pub struct ExactAnsatz {
    pub dim: usize,
    pub exact: ExactSolution,
    pub shift: f64,
}

impl ExactAnsatz {
    pub fn new(problem: &ProblemSpec) -> Result<Self> {
        let exact = problem
            .exact
            .clone()
            .ok_or_else(|| Error::invalid(format!("problem '{}' has no exact solution", problem.name)))?;
        Ok(ExactAnsatz {
            dim: problem.dim(),
            exact,
            shift: 0.0,
        })
    }

    pub fn shifted(mut self, c: f64) -> Self {
        self.shift = c;
        self
    }
}

impl Ansatz for ExactAnsatz {
    fn in_dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, points: &[f64], order: JetOrder) -> BatchOutputs {
        let d = self.dim;
        let n = points.len() / d;
        let mut out = BatchOutputs::zeros(n, d, 1, order);
        let mut buf = vec![0.0; d];
        for (q, x) in points.chunks_exact(d).enumerate() {
            out.channel_mut(0, 0)[q] = (self.exact.value)(x) + self.shift;
            if order != JetOrder::Value {
                (self.exact.gradient)(x, &mut buf);
                for i in 0..d {
                    out.channel_mut(0, 1 + i)[q] = buf[i];
                }
            }
            if order == JetOrder::Laplacian {
                let second = self.exact.second.as_ref().expect("exact second derivatives");
                second(x, &mut buf);
                for i in 0..d {
                    out.channel_mut(0, 1 + d + i)[q] = buf[i];
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Domain,
    Boundary(usize),
}

impl LossTerm {
    pub fn index(self) -> usize {
        match self {
            LossTerm::Domain => 0,
            LossTerm::Boundary(i) => i + 1,
        }
    }
}

pub fn loss_terms(problem: &ProblemSpec) -> Vec<LossTerm> {
    std::iter::once(LossTerm::Domain)
        .chain((0..problem.faces.len()).map(LossTerm::Boundary))
        .collect()
}

fn term_weight(problem: &ProblemSpec, term: LossTerm) -> f64 {
    match term {
        LossTerm::Domain => 1.0,
        LossTerm::Boundary(i) => problem.faces[i].penalty,
    }
}

fn term_order(problem: &ProblemSpec, term: LossTerm) -> JetOrder {
    match term {
        LossTerm::Domain => problem.operator.order(),
        LossTerm::Boundary(_) => JetOrder::Value,
    }
}

/// Residuals at physical `points` from already evaluated outputs.
fn residuals_from(problem: &ProblemSpec, term: LossTerm, points: &[f64], out: &BatchOutputs) -> Vec<f64> {
    let d = problem.dim();
    let u = out.value(0);
    match term {
        LossTerm::Domain => {
            let op = &problem.operator;
            let mut r: Vec<f64> = points
                .chunks_exact(d)
                .zip(u)
                .map(|(x, u)| op.value * u - (problem.forcing)(x))
                .collect();
            if out.order != JetOrder::Value {
                for (i, b) in op.advection.iter().enumerate() {
                    if *b != 0.0 {
                        for (r, g) in r.iter_mut().zip(out.grad(0, i)) {
                            *r += b * g;
                        }
                    }
                }
            }
            if op.diffusion != 0.0 {
                for i in 0..d {
                    for (r, s) in r.iter_mut().zip(out.second(0, i)) {
                        *r -= op.diffusion * s;
                    }
                }
            }
            r
        }
        LossTerm::Boundary(_) => points
            .chunks_exact(d)
            .zip(u)
            .map(|(x, u)| u - (problem.boundary_data)(x))
            .collect(),
    }
}

/// Pointwise residual of `term` at physical `points`.
pub fn residuals<A: Ansatz + ?Sized>(problem: &ProblemSpec, ansatz: &A, term: LossTerm, points: &[f64]) -> Vec<f64> {
    let out = ansatz.eval(points, term_order(problem, term));
    residuals_from(problem, term, points, &out)
}

/// `x -> |R(x)|^2` for one loss term, in the term's own coordinates
/// (face coordinates for boundary terms).
pub struct ResidualIntegrand<'a, A: ?Sized> {
    problem: &'a ProblemSpec,
    ansatz: &'a A,
    term: LossTerm,
}

pub fn residual_integrand<'a, A: Ansatz + ?Sized>(
    problem: &'a ProblemSpec,
    ansatz: &'a A,
    term: LossTerm,
) -> Result<ResidualIntegrand<'a, A>> {
    if ansatz.in_dim() != problem.dim() {
        return Err(Error::invalid(format!(
            "ansatz takes {} inputs but the domain has dimension {}",
            ansatz.in_dim(),
            problem.dim()
        )));
    }
    if let LossTerm::Boundary(i) = term {
        if i >= problem.faces.len() {
            return Err(Error::invalid(format!("problem has no boundary face {i}")));
        }
    }
    Ok(ResidualIntegrand { problem, ansatz, term })
}

impl<A: Ansatz + ?Sized> Integrand for ResidualIntegrand<'_, A> {
    fn dim(&self) -> usize {
        match self.term {
            LossTerm::Domain => self.problem.dim(),
            LossTerm::Boundary(i) => self.problem.faces[i].extent.as_ref().map_or(0, |c| c.dim()),
        }
    }

    fn eval_batch(&self, points: &[f64], values: &mut [f64]) {
        let lifted;
        let phys = match self.term {
            LossTerm::Domain => points,
            LossTerm::Boundary(i) => {
                lifted = self.problem.faces[i].embed(points);
                &lifted
            }
        };
        for (pts, vals) in phys
            .chunks(CHUNK * self.problem.dim())
            .zip(values.chunks_mut(CHUNK))
        {
            let r = residuals(self.problem, self.ansatz, self.term, pts);
            for (v, r) in vals.iter_mut().zip(r) {
                *v = r * r;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Primal,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub domain_term: f64,
    pub boundary_terms: Vec<f64>,
    pub total: f64,
    pub which_rule: RuleKind,
}

impl LossBreakdown {
    /// `J^2`, the weighted sum of the terms.
    pub fn squared(&self, problem: &ProblemSpec) -> f64 {
        self.domain_term
            + problem
                .faces
                .iter()
                .zip(&self.boundary_terms)
                .map(|(f, b)| f.penalty * b)
                .sum::<f64>()
    }
}

/// Per-term quadratures of a loss: index 0 is the domain, then one per face.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossQuadrature {
    pub terms: Vec<QuadraturePair>,
}

impl LossQuadrature {
    pub fn rule(&self, rule: RuleKind) -> Vec<&CompositeQuadrature> {
        self.terms
            .iter()
            .map(|p| match rule {
                RuleKind::Primal => &p.primal,
                RuleKind::Reference => &p.reference,
            })
            .collect()
    }

    pub fn primal_points(&self) -> usize {
        self.terms.iter().map(|p| p.primal.len()).sum()
    }

    pub fn reference_points(&self) -> usize {
        self.terms.iter().map(|p| p.reference.len()).sum()
    }

    pub fn cells(&self) -> usize {
        self.terms.iter().map(|p| p.cells).sum()
    }
}

fn check_quads(problem: &ProblemSpec, quads: &[&CompositeQuadrature]) -> Result<()> {
    let expected = 1 + problem.faces.len();
    if quads.len() != expected {
        return Err(Error::invalid(format!(
            "expected {expected} term quadratures, got {}",
            quads.len()
        )));
    }
    if let Some(q) = quads.iter().find(|q| !q.is_empty() && q.dim() != problem.dim()) {
        return Err(Error::invalid(format!(
            "quadrature of dimension {} on a {}-dimensional problem",
            q.dim(),
            problem.dim()
        )));
    }
    Ok(())
}

/// Weighted sum of squared residuals over one quadrature, chunk by chunk.
fn term_sum<A: Ansatz + ?Sized>(
    problem: &ProblemSpec,
    ansatz: &A,
    term: LossTerm,
    quad: &CompositeQuadrature,
    threads: usize,
) -> Result<f64> {
    let d = problem.dim();
    let n_chunks = quad.len().div_ceil(CHUNK);
    let parts = map_indexed(n_chunks, threads, |c| {
        let lo = c * CHUNK;
        let hi = (lo + CHUNK).min(quad.len());
        let pts = &quad.points()[lo * d..hi * d];
        let r = residuals(problem, ansatz, term, pts);
        let mut acc = 0.0;
        for (k, (w, r)) in quad.weights()[lo..hi].iter().zip(&r).enumerate() {
            if !r.is_finite() {
                return Err(Error::Evaluation {
                    point: quad.point(lo + k).to_vec(),
                    value: *r,
                });
            }
            acc += w * r * r;
        }
        Ok(acc)
    });
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total)
}

/// Assembles the loss on one rule of every term.
pub fn assemble_loss<A: Ansatz + ?Sized>(
    problem: &ProblemSpec,
    ansatz: &A,
    quads: &[&CompositeQuadrature],
    rule: RuleKind,
    threads: usize,
) -> Result<LossBreakdown> {
    check_quads(problem, quads)?;
    let terms = loss_terms(problem);
    let mut values = Vec::with_capacity(terms.len());
    for (t, q) in terms.iter().zip(quads) {
        values.push(term_sum(problem, ansatz, *t, q, threads)?);
    }
    let mut b = LossBreakdown {
        domain_term: values[0],
        boundary_terms: values[1..].to_vec(),
        total: 0.0,
        which_rule: rule,
    };
    b.total = b.squared(problem).sqrt();
    Ok(b)
}

/// Both rules of `quad`.
pub fn assemble_pair<A: Ansatz + ?Sized>(
    problem: &ProblemSpec,
    ansatz: &A,
    quad: &LossQuadrature,
    threads: usize,
) -> Result<(LossBreakdown, LossBreakdown)> {
    Ok((
        assemble_loss(problem, ansatz, &quad.rule(RuleKind::Primal), RuleKind::Primal, threads)?,
        assemble_loss(problem, ansatz, &quad.rule(RuleKind::Reference), RuleKind::Reference, threads)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaIndicator {
    pub eta: f64,
}

pub fn eta_indicator(primal: &LossBreakdown, reference: &LossBreakdown) -> EtaIndicator {
    EtaIndicator {
        eta: (primal.total - reference.total).abs() / reference.total.max(ETA_FLOOR),
    }
}

/// `J^2` and its parameter gradient on one rule of every term.
pub fn loss_and_gradient(
    problem: &ProblemSpec,
    params: &MlpParams,
    quads: &[&CompositeQuadrature],
    threads: usize,
) -> Result<(f64, Vec<f64>)> {
    check_quads(problem, quads)?;
    if params.arch().in_dim != problem.dim() || params.arch().out_dim != 1 {
        return Err(Error::invalid("network shape does not fit the problem"));
    }
    let d = problem.dim();
    let terms = loss_terms(problem);
    // Work items are (term, chunk) pairs in term-major order.
    let mut items = Vec::new();
    for (t, q) in terms.iter().zip(quads) {
        for c in 0..q.len().div_ceil(CHUNK) {
            items.push((*t, *q, c));
        }
    }
    let parts = map_indexed(items.len(), threads, |k| {
        let (term, quad, c) = items[k];
        let lo = c * CHUNK;
        let hi = (lo + CHUNK).min(quad.len());
        let pts = &quad.points()[lo * d..hi * d];
        let (out, tape) = forward_with_tape(params, pts, term_order(problem, term));
        let r = residuals_from(problem, term, pts, &out);
        let gamma = term_weight(problem, term);
        let w = &quad.weights()[lo..hi];
        let mut value = 0.0;
        // d(w r^2)/dr = 2 w r, pushed through the affine residual map.
        let mut rbar = vec![0.0; r.len()];
        for (q, ((w, r), rb)) in w.iter().zip(&r).zip(rbar.iter_mut()).enumerate() {
            if !r.is_finite() {
                return Err(Error::Evaluation {
                    point: quad.point(lo + q).to_vec(),
                    value: *r,
                });
            }
            value += w * r * r;
            *rb = 2.0 * gamma * w * r;
        }
        let mut adj = BatchOutputs::zeros_like(&out);
        match term {
            LossTerm::Domain => {
                let op = &problem.operator;
                if op.value != 0.0 {
                    for (a, rb) in adj.channel_mut(0, 0).iter_mut().zip(&rbar) {
                        *a = op.value * rb;
                    }
                }
                if out.order != JetOrder::Value {
                    for (i, b) in op.advection.iter().enumerate() {
                        for (a, rb) in adj.channel_mut(0, 1 + i).iter_mut().zip(&rbar) {
                            *a = b * rb;
                        }
                    }
                }
                if op.diffusion != 0.0 {
                    for i in 0..d {
                        for (a, rb) in adj.channel_mut(0, 1 + d + i).iter_mut().zip(&rbar) {
                            *a = -op.diffusion * rb;
                        }
                    }
                }
            }
            LossTerm::Boundary(_) => adj.channel_mut(0, 0).copy_from_slice(&rbar),
        }
        let mut grad = vec![0.0; params.len()];
        backward(params, &tape, &adj, &mut grad);
        Ok((gamma * value, grad))
    });
    let mut total = 0.0;
    let mut grad = vec![0.0; params.len()];
    for p in parts {
        let (v, g) = p?;
        total += v;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((total, grad))
}

/// Relative L2 and H1 errors against the exact solution on `fine`.
pub fn evaluate_errors<A: Ansatz + ?Sized>(
    problem: &ProblemSpec,
    ansatz: &A,
    fine: &CompositeQuadrature,
    threads: usize,
) -> Result<(f64, f64)> {
    let exact = problem
        .exact
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("problem '{}' has no exact solution", problem.name)))?;
    let d = problem.dim();
    if fine.dim() != d || ansatz.in_dim() != d {
        return Err(Error::invalid("fine mesh dimension does not match the problem"));
    }
    let n_chunks = fine.len().div_ceil(CHUNK);
    // (sum w e^2, sum w u^2, sum w |grad e|^2, sum w |grad u|^2)
    let parts = map_indexed(n_chunks, threads, |c| {
        let lo = c * CHUNK;
        let hi = (lo + CHUNK).min(fine.len());
        let pts = &fine.points()[lo * d..hi * d];
        let out = ansatz.eval(pts, JetOrder::Gradient);
        let mut acc = [0.0; 4];
        let mut g = vec![0.0; d];
        for (q, (x, w)) in pts.chunks_exact(d).zip(&fine.weights()[lo..hi]).enumerate() {
            let u = (exact.value)(x);
            (exact.gradient)(x, &mut g);
            let e = out.value(0)[q] - u;
            acc[0] += w * e * e;
            acc[1] += w * u * u;
            for (i, gi) in g.iter().enumerate() {
                let ge = out.grad(0, i)[q] - gi;
                acc[2] += w * ge * ge;
                acc[3] += w * gi * gi;
            }
        }
        acc
    });
    let mut s = [0.0; 4];
    for p in parts {
        for (a, b) in s.iter_mut().zip(p) {
            *a += b;
        }
    }
    let l2 = (s[0] / s[1].max(ETA_FLOOR)).sqrt();
    let h1 = ((s[0] + s[2]) / (s[1] + s[3]).max(ETA_FLOOR)).sqrt();
    Ok((l2, h1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Cell;
    use crate::nn::{init_glorot, MlpArch};
    use crate::problems::{advection_diffusion_1d, arc_wavefront_poisson, arctan_well, LinearOperator, PdeKind};
    use crate::rules::TensorRule;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn unit_cell_quad(dim: usize, order: usize) -> CompositeQuadrature {
        CompositeQuadrature::from_cells(&TensorRule::new(dim, order).unwrap(), [&Cell::unit(dim)])
    }

    #[test]
    fn fit_with_exact_target_vanishes() {
        let p = arctan_well();
        let a = ExactAnsatz::new(&p).unwrap();
        let f = residual_integrand(&p, &a, LossTerm::Domain).unwrap();
        let mut v = vec![1.0; 3];
        f.eval_batch(&[0.1, 0.2, 0.5, 0.5, 0.9, 0.3], &mut v);
        assert_eq!(v, vec![0.0; 3]);
        let q = unit_cell_quad(2, 5);
        let b = assemble_loss(&p, &a, &[&q], RuleKind::Primal, 1).unwrap();
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn manufactured_poisson_residual_is_tiny() {
        let p = arc_wavefront_poisson(10.0).unwrap();
        let a = ExactAnsatz::new(&p).unwrap();
        let f = residual_integrand(&p, &a, LossTerm::Domain).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<f64> = (0..200).map(|_| rng.gen()).collect();
        let mut v = vec![0.0; 100];
        f.eval_batch(&pts, &mut v);
        for x in v {
            assert!(x <= 1e-18, "{x}");
        }
        for face in 0..4 {
            let g = residual_integrand(&p, &a, LossTerm::Boundary(face)).unwrap();
            let mut v = vec![1.0; 3];
            g.eval_batch(&[0.0, 0.4, 1.0], &mut v);
            assert_eq!(v, vec![0.0; 3]);
        }
    }

    #[test]
    fn advection_diffusion_exact_residual() {
        let p = advection_diffusion_1d(0.005, 10.0).unwrap();
        let a = ExactAnsatz::new(&p).unwrap();
        let pts: Vec<f64> = (1..400).map(|k| -1.0 + k as f64 / 200.0).collect();
        for r in residuals(&p, &a, LossTerm::Domain, &pts) {
            assert!(r.abs() <= 1e-8, "{r}");
        }
        for face in 0..2 {
            let r = residuals(&p, &a, LossTerm::Boundary(face), &[p.faces[face].coordinate]);
            assert!(r[0].abs() < 1e-12);
        }
    }

    #[test]
    fn constant_four_on_unit_square() {
        let p = ProblemSpec {
            name: "const".into(),
            domain: Cell::unit(2),
            kind: PdeKind::Fit,
            operator: LinearOperator {
                value: 1.0,
                advection: vec![0.0; 2],
                diffusion: 0.0,
            },
            forcing: Arc::new(|_| -2.0),
            boundary_data: Arc::new(|_| 0.0),
            faces: vec![],
            exact: None,
            epsilon: None,
        };
        let zero = MlpParams::zeros(MlpArch::new(2, 1, 1, 3).unwrap());
        let q = unit_cell_quad(2, 3);
        let b = assemble_loss(&p, &zero, &[&q], RuleKind::Reference, 1).unwrap();
        assert!((b.total - 2.0).abs() < 1e-14);
        assert!((b.domain_term - 4.0).abs() < 1e-14);
        assert!(b.boundary_terms.is_empty());
        assert_eq!(b.which_rule, RuleKind::Reference);
    }

    #[test]
    fn eta_examples() {
        let mk = |t| LossBreakdown {
            domain_term: t * t,
            boundary_terms: vec![],
            total: t,
            which_rule: RuleKind::Primal,
        };
        assert_eq!(eta_indicator(&mk(1.0), &mk(1.0)).eta, 0.0);
        assert!((eta_indicator(&mk(1.0), &mk(1.25)).eta - 0.2).abs() < 1e-15);
        assert_eq!(eta_indicator(&mk(0.0), &mk(0.0)).eta, 0.0);
    }

    #[test]
    fn total_matches_weighted_terms() {
        let p = arc_wavefront_poisson(10.0).unwrap();
        let net = init_glorot(MlpArch::new(2, 1, 2, 8).unwrap(), 4).unwrap();
        let dom = unit_cell_quad(2, 6);
        let faces: Vec<CompositeQuadrature> = p
            .faces
            .iter()
            .map(|f| unit_cell_quad(1, 6).embed(f.axis, f.coordinate))
            .collect();
        let mut quads = vec![&dom];
        quads.extend(faces.iter());
        let b = assemble_loss(&p, &net, &quads, RuleKind::Primal, 1).unwrap();
        assert_eq!(b.boundary_terms.len(), 4);
        assert!(b.domain_term >= 0.0 && b.boundary_terms.iter().all(|t| *t >= 0.0));
        let sq = b.domain_term + 10.0 * b.boundary_terms.iter().sum::<f64>();
        assert!((b.total * b.total - sq).abs() <= 1e-12 * sq);
        let (j2, _) = loss_and_gradient(&p, &net, &quads, 1).unwrap();
        assert!((j2 - sq).abs() <= 1e-12 * sq);
        // Thread count does not change the reduction order.
        let (j2t, gt) = loss_and_gradient(&p, &net, &quads, 3).unwrap();
        let (_, g1) = loss_and_gradient(&p, &net, &quads, 1).unwrap();
        assert_eq!(j2.to_bits(), j2t.to_bits());
        assert_eq!(g1, gt);
    }

    #[test]
    fn wrong_term_count_rejected() {
        let p = arc_wavefront_poisson(10.0).unwrap();
        let net = init_glorot(MlpArch::new(2, 1, 1, 4).unwrap(), 4).unwrap();
        let dom = unit_cell_quad(2, 2);
        assert!(assemble_loss(&p, &net, &[&dom], RuleKind::Primal, 1).is_err());
        let p1 = advection_diffusion_1d(0.01, 1.0).unwrap();
        assert!(residual_integrand(&p1, &net, LossTerm::Domain).is_err());
    }

    #[test]
    fn error_examples() {
        let p = arctan_well();
        let fine = CompositeQuadrature::from_cells(
            &TensorRule::new(2, 7).unwrap(),
            Cell::unit(2).subdivide(20).iter(),
        );
        let exact = ExactAnsatz::new(&p).unwrap();
        assert_eq!(evaluate_errors(&p, &exact, &fine, 1).unwrap(), (0.0, 0.0));
        let c = 0.3;
        let (l2, _) = evaluate_errors(&p, &exact.clone().shifted(c), &fine, 1).unwrap();
        let norm = fine
            .points()
            .chunks_exact(2)
            .zip(fine.weights())
            .map(|(x, w)| w * (p.exact.as_ref().unwrap().value)(x).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((l2 - c / norm).abs() <= 1e-12 * (c / norm));
        let zero = MlpParams::zeros(MlpArch::new(2, 1, 1, 3).unwrap());
        let (l2, h1) = evaluate_errors(&p, &zero, &fine, 1).unwrap();
        assert!((l2 - 1.0).abs() < 1e-14 && (h1 - 1.0).abs() < 1e-14);
    }
}
