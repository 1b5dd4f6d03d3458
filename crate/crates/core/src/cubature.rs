//! Anisotropic bisection-based h-adaptive composite quadrature.
//!
//! Every live cell carries a primal estimate `Q_K`, a reference estimate
//! `Q'_K` from a richer non-nested rule, and `delta_K = |Q_K - Q'_K|`. The
//! cell with the largest `delta_K` is bisected along the axis whose fourth
//! difference through the centroid is largest, and the global sums
//! `S = sum Q_K`, `E = sum delta_K` are updated incrementally until
//! `E^(1/q) <= max(atol, rtol * |S|^(1/q))` or the evaluation budget runs out.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Cell;
use crate::integrand::Integrand;
use crate::quadrature::{CompositeQuadrature, QuadraturePair};
use crate::rules::RulePair;

/// Offset of the inner fourth-difference stencil points as a fraction of the
/// cell half-width; the outer points sit at twice this.
pub const STENCIL_STEP: f64 = 0.25;

/// Cells narrower than this fraction of the base extent along the split axis
/// are not bisected further.
pub const WIDTH_FLOOR: f64 = 1e-13;

/// Relative closeness under which two directional indicators count as tied.
const ZETA_TIE_TOL: f64 = 1e-12;

/// Per-cell estimates: the unit of the refinement queue.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRecord {
    pub cell: Cell,
    pub q_primal: f64,
    pub q_reference: f64,
    pub delta: f64,
    pub zeta: Vec<f64>,
    pub best_axis: usize,
}

/// Stopping rule `E^(1/q) <= max(atol, rtol * |S|^(1/q))` plus an evaluation budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingCriterion {
    pub rtol: f64,
    pub atol: f64,
    pub maxevals: usize,
    pub exponent: f64,
}

impl Default for StoppingCriterion {
    fn default() -> Self {
        StoppingCriterion {
            rtol: 1e-2,
            atol: 0.0,
            maxevals: 5_000_000,
            exponent: 1.0,
        }
    }
}

impl StoppingCriterion {
    pub fn new(rtol: f64, atol: f64, maxevals: usize, exponent: f64) -> Result<Self> {
        let c = StoppingCriterion {
            rtol,
            atol,
            maxevals,
            exponent,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.rtol < 1.0) {
            return Err(Error::invalid(format!("rtol must lie in (0,1), got {}", self.rtol)));
        }
        if !(self.atol >= 0.0 && self.atol.is_finite()) {
            return Err(Error::invalid(format!("atol must be finite and >= 0, got {}", self.atol)));
        }
        if self.maxevals == 0 {
            return Err(Error::invalid("maxevals must be positive"));
        }
        if !(self.exponent >= 1.0 && self.exponent.is_finite()) {
            return Err(Error::invalid(format!("exponent must be >= 1, got {}", self.exponent)));
        }
        Ok(())
    }

    /// The tolerance test on stored sums.
    pub fn is_met(&self, integral: f64, error: f64) -> bool {
        let q = self.exponent;
        let lhs = error.powf(1.0 / q);
        let rhs = self.atol.max(self.rtol * integral.abs().powf(1.0 / q));
        lhs <= rhs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Tolerance,
    MaxEvals,
    /// Every remaining candidate hit the width floor before the tolerance was met.
    RefinementFloor,
}

/// One bisection: the refined cell's id and the chosen axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Refinement {
    pub cell_id: usize,
    pub axis: usize,
}

#[derive(Debug, Clone)]
pub struct AdaptiveResult {
    pub integral: f64,
    pub error_estimate: f64,
    pub partition: Vec<CellRecord>,
    pub evals_used: usize,
    pub terminated_by: Termination,
    pub refine_log: Vec<Refinement>,
}

impl AdaptiveResult {
    pub fn cells(&self) -> impl Iterator<Item = &Cell> {
        self.partition.iter().map(|r| &r.cell)
    }
}

/// Integrand evaluations needed to estimate one cell.
pub fn evals_per_cell(pair: &RulePair) -> usize {
    pair.primal().len() + pair.reference().len() + stencil_len(pair.dim())
}

fn stencil_len(dim: usize) -> usize {
    4 * dim + 1
}

/// Appends the centroid followed by, for each axis, the points at
/// `c - 2s, c - s, c + s, c + 2s` with `s = STENCIL_STEP * width/2`.
fn push_stencil(cell: &Cell, out: &mut Vec<f64>) {
    let c = cell.centroid();
    out.extend_from_slice(&c);
    for (j, h) in cell.widths().iter().enumerate() {
        let step = STENCIL_STEP * 0.5 * h;
        for k in [-2.0, -1.0, 1.0, 2.0] {
            let start = out.len();
            out.extend_from_slice(&c);
            out[start + j] += k * step;
        }
    }
}

/// Fourth differences `|g(-2) - 4g(-1) + 6g(0) - 4g(1) + g(2)|` from stencil
/// values, scaled by the cell volume (the pulled-back integrand carries it).
fn zeta_from_values(dim: usize, volume: f64, values: &[f64]) -> Vec<f64> {
    let g0 = values[0];
    (0..dim)
        .map(|j| {
            let v = &values[1 + 4 * j..5 + 4 * j];
            volume * (v[0] - 4.0 * v[1] + 6.0 * g0 - 4.0 * v[2] + v[3]).abs()
        })
        .collect()
}

/// Largest indicator; near-ties go to the widest axis, then the lowest index.
fn select_axis(zeta: &[f64], widths: &[f64], scale: f64) -> usize {
    let max = zeta.iter().cloned().fold(0.0, f64::max);
    let tol = ZETA_TIE_TOL * scale.max(max);
    let mut best: Option<usize> = None;
    for (j, z) in zeta.iter().enumerate() {
        if *z < max - tol {
            continue;
        }
        match best {
            Some(b) if widths[j] <= widths[b] => {}
            _ => best = Some(j),
        }
    }
    best.unwrap_or(0)
}

fn check_finite(points: &[f64], values: &[f64], dim: usize) -> Result<()> {
    for (q, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Evaluation {
                point: points[q * dim..(q + 1) * dim].to_vec(),
                value: *v,
            });
        }
    }
    Ok(())
}

/// Directional roughness indicators `zeta^j` for every axis of `cell`.
pub fn direction_indicators<I: Integrand + ?Sized>(f: &I, cell: &Cell) -> Result<Vec<f64>> {
    let d = cell.dim();
    let mut pts = Vec::with_capacity(stencil_len(d) * d);
    push_stencil(cell, &mut pts);
    let mut vals = vec![0.0; stencil_len(d)];
    f.eval_batch(&pts, &mut vals);
    check_finite(&pts, &vals, d)?;
    Ok(zeta_from_values(d, cell.volume(), &vals))
}

/// Primal/reference estimates, `delta`, and the preferred bisection axis.
pub fn estimate_cell<I: Integrand + ?Sized>(f: &I, cell: &Cell, pair: &RulePair) -> Result<CellRecord> {
    let mut scratch = Scratch::default();
    estimate_with(f, cell, pair, &mut scratch)
}

#[derive(Default)]
struct Scratch {
    points: Vec<f64>,
    values: Vec<f64>,
}

fn estimate_with<I: Integrand + ?Sized>(
    f: &I,
    cell: &Cell,
    pair: &RulePair,
    scratch: &mut Scratch,
) -> Result<CellRecord> {
    let d = cell.dim();
    if d != pair.dim() || d != f.dim() {
        return Err(Error::invalid(format!(
            "dimension mismatch: cell {d}, rules {}, integrand {}",
            pair.dim(),
            f.dim()
        )));
    }
    let np = pair.primal().len();
    let nr = pair.reference().len();
    let pts = &mut scratch.points;
    pts.clear();
    pair.primal().mapped_points_into(cell, pts);
    pair.reference().mapped_points_into(cell, pts);
    push_stencil(cell, pts);
    let total = np + nr + stencil_len(d);
    scratch.values.clear();
    scratch.values.resize(total, 0.0);
    f.eval_batch(pts, &mut scratch.values);
    check_finite(pts, &scratch.values, d)?;

    let vol = cell.volume();
    let vals = &scratch.values;
    let q_primal = pair.primal().combine(vol, &vals[..np]);
    let q_reference = pair.reference().combine(vol, &vals[np..np + nr]);
    let stencil = &vals[np + nr..];
    let zeta = zeta_from_values(d, vol, stencil);
    let scale = vol * stencil.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let best_axis = select_axis(&zeta, cell.widths(), scale);
    Ok(CellRecord {
        cell: cell.clone(),
        q_primal,
        q_reference,
        delta: (q_primal - q_reference).abs(),
        zeta,
        best_axis,
    })
}

/// Halves `cell` along `axis`.
pub fn bisect(cell: &Cell, axis: usize) -> (Cell, Cell) {
    cell.bisect(axis)
}

#[derive(Debug, Clone, Copy)]
struct QueueEntry {
    delta: f64,
    id: usize,
}

impl PartialEq for QueueEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for QueueEntry {}

impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for QueueEntry {
    // Max-heap on delta; among equal deltas the earliest-inserted cell wins.
    fn cmp(&self, other: &Self) -> Ordering {
        self.delta
            .total_cmp(&other.delta)
            .then_with(|| other.id.cmp(&self.id))
    }
}

/// Step-wise driver behind [`adapt_integrate`]; exposes the live partition
/// between refinements.
pub struct AdaptiveIntegrator<'a, I: Integrand + ?Sized> {
    f: &'a I,
    pair: &'a RulePair,
    records: Vec<CellRecord>,
    alive: Vec<bool>,
    queue: BinaryHeap<QueueEntry>,
    min_width: Vec<f64>,
    integral: f64,
    error: f64,
    evals: usize,
    log: Vec<Refinement>,
    scratch: Scratch,
}

impl<'a, I: Integrand + ?Sized> AdaptiveIntegrator<'a, I> {
    pub fn new(f: &'a I, base: &[Cell], pair: &'a RulePair) -> Result<Self> {
        if base.is_empty() {
            return Err(Error::invalid("base partition is empty"));
        }
        let d = pair.dim();
        if base.iter().any(|c| c.dim() != d) {
            return Err(Error::invalid("base cells do not match the rule dimension"));
        }
        if base.len() <= 4096 {
            for (i, a) in base.iter().enumerate() {
                if base[i + 1..].iter().any(|b| a.overlaps(b)) {
                    return Err(Error::invalid("base cells overlap"));
                }
            }
        }
        let mut lo = base[0].lower().to_vec();
        let mut hi = base[0].upper();
        for c in base {
            for (j, (a, b)) in c.lower().iter().zip(c.upper()).enumerate() {
                lo[j] = lo[j].min(*a);
                hi[j] = hi[j].max(b);
            }
        }
        let min_width = lo.iter().zip(&hi).map(|(a, b)| WIDTH_FLOOR * (b - a)).collect();

        let mut this = AdaptiveIntegrator {
            f,
            pair,
            records: Vec::with_capacity(base.len() * 4),
            alive: Vec::new(),
            queue: BinaryHeap::new(),
            min_width,
            integral: 0.0,
            error: 0.0,
            evals: 0,
            log: Vec::new(),
            scratch: Scratch::default(),
        };
        for c in base {
            let rec = this.estimate(c)?;
            this.integral += rec.q_primal;
            this.error += rec.delta;
            this.insert(rec);
        }
        Ok(this)
    }

    fn estimate(&mut self, cell: &Cell) -> Result<CellRecord> {
        let rec = estimate_with(self.f, cell, self.pair, &mut self.scratch)?;
        self.evals += evals_per_cell(self.pair);
        Ok(rec)
    }

    fn insert(&mut self, rec: CellRecord) -> usize {
        let id = self.records.len();
        self.queue.push(QueueEntry {
            delta: rec.delta,
            id,
        });
        self.records.push(rec);
        self.alive.push(true);
        id
    }

    pub fn integral(&self) -> f64 {
        self.integral
    }

    pub fn error_estimate(&self) -> f64 {
        self.error
    }

    pub fn evals_used(&self) -> usize {
        self.evals
    }

    pub fn refine_log(&self) -> &[Refinement] {
        &self.log
    }

    /// Live cells with their ids, in id order.
    pub fn live_cells(&self) -> impl Iterator<Item = (usize, &CellRecord)> {
        self.records
            .iter()
            .enumerate()
            .filter(move |(i, _)| self.alive[*i])
    }

    /// Id of the cell the next call to [`refine_next`](Self::refine_next) would mark.
    pub fn peek_marked(&self) -> Option<usize> {
        self.queue.peek().map(|e| e.id)
    }

    /// Marks the live cell with the largest `delta`, bisects it, and updates
    /// `S` and `E`. Returns `false` when no cell can be refined any further.
    pub fn refine_next(&mut self) -> Result<bool> {
        while let Some(entry) = self.queue.pop() {
            let rec = &self.records[entry.id];
            let axis = rec.best_axis;
            if 0.5 * rec.cell.widths()[axis] < self.min_width[axis] {
                // Frozen: its delta stays in E but it is never marked again.
                continue;
            }
            let (left, right) = bisect(&rec.cell, axis);
            let (parent_q, parent_delta) = (rec.q_primal, rec.delta);
            let l = self.estimate(&left)?;
            let r = self.estimate(&right)?;
            self.alive[entry.id] = false;
            self.integral = self.integral - parent_q + (l.q_primal + r.q_primal);
            self.error = (self.error - parent_delta + (l.delta + r.delta)).max(0.0);
            self.insert(l);
            self.insert(r);
            self.log.push(Refinement {
                cell_id: entry.id,
                axis,
            });
            return Ok(true);
        }
        Ok(false)
    }

    pub fn finish(self, terminated_by: Termination) -> AdaptiveResult {
        let alive = self.alive;
        let partition = self
            .records
            .into_iter()
            .zip(alive)
            .filter_map(|(r, a)| a.then_some(r))
            .collect();
        AdaptiveResult {
            integral: self.integral,
            error_estimate: self.error,
            partition,
            evals_used: self.evals,
            terminated_by,
            refine_log: self.log,
        }
    }
}

/// Runs the refinement loop from `base` until `crit` holds or the budget is spent.
pub fn adapt_integrate<I: Integrand + ?Sized>(
    f: &I,
    base: &[Cell],
    pair: &RulePair,
    crit: &StoppingCriterion,
) -> Result<AdaptiveResult> {
    crit.validate()?;
    let base_cost = base.len() * evals_per_cell(pair);
    if crit.maxevals < base_cost {
        return Err(Error::invalid(format!(
            "maxevals {} is below the base-partition cost {base_cost}",
            crit.maxevals
        )));
    }
    let mut state = AdaptiveIntegrator::new(f, base, pair)?;
    let termination = loop {
        if crit.is_met(state.integral, state.error) {
            break Termination::Tolerance;
        }
        if state.evals >= crit.maxevals {
            break Termination::MaxEvals;
        }
        if !state.refine_next()? {
            break Termination::RefinementFloor;
        }
    };
    Ok(state.finish(termination))
}

/// Primal and reference point sets of a finished partition, in physical space.
pub fn materialise(result: &AdaptiveResult, pair: &RulePair) -> QuadraturePair {
    QuadraturePair {
        primal: CompositeQuadrature::from_cells(pair.primal(), result.cells()),
        reference: CompositeQuadrature::from_cells(pair.reference(), result.cells()),
        cells: result.partition.len(),
    }
}

#[derive(Serialize)]
struct PartitionLine<'a> {
    lo: &'a [f64],
    widths: &'a [f64],
    delta: f64,
    qp: f64,
}

/// Writes one JSON object per cell: `lo`, `widths`, `delta`, `qp`.
pub fn write_partition_jsonl<W: Write>(mut out: W, partition: &[CellRecord]) -> Result<()> {
    for r in partition {
        let line = PartitionLine {
            lo: r.cell.lower(),
            widths: r.cell.widths(),
            delta: r.delta,
            qp: r.q_primal,
        };
        let s = serde_json::to_string(&line).map_err(|e| Error::Io(e.to_string()))?;
        writeln!(out, "{s}")?;
    }
    Ok(())
}

/// A parsed partition dump line.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct PartitionEntry {
    pub lo: Vec<f64>,
    pub widths: Vec<f64>,
    pub delta: f64,
    pub qp: f64,
}

pub fn read_partition_jsonl(text: &str) -> Result<Vec<PartitionEntry>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Io(e.to_string())))
        .collect()
}
