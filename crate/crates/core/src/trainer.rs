//! Residual minimisation with refresh-triggered adaptive quadrature.
//!
//! Record 0 describes the initial network on the initial quadrature. Every
//! later epoch first rebuilds the adaptive quadrature when the previous
//! record's indicator reached the refresh tolerance, then takes one accepted
//! optimizer step on the primal loss `J^2` and records the new state.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cubature::{adapt_integrate, materialise, AdaptiveResult, CellRecord, StoppingCriterion, Termination};
use crate::error::{Error, Result};
use crate::geometry::Cell;
use crate::losses::{
    assemble_loss, evaluate_errors, loss_and_gradient, loss_terms, residual_integrand, Ansatz,
    LossQuadrature, LossTerm, RuleKind,
};
use crate::nn::{init_glorot, MlpArch, MlpParams};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::problems::ProblemSpec;
use crate::quadrature::{CompositeQuadrature, QuadraturePair};
use crate::rules::RulePair;
use crate::sampling::{
    match_budget, sampled_quadrature, uniform_composite, AdaptiveHistory, PointBudget, Sampler, StratumPlacement,
    Strategy,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub refresh_tol: f64,
    pub aq: StoppingCriterion,
    pub primal_order: usize,
    pub reference_order: usize,
    /// Cells per axis of the base partition of every loss term.
    pub base_divisions: usize,
    pub max_epochs: usize,
    /// Wall-clock limit in seconds.
    pub time_limit: Option<f64>,
    pub optimizer: OptimizerConfig,
    pub reset_optimizer_on_refresh: bool,
    /// Error norms are computed at epoch 0, every `error_every` epochs and at
    /// the last epoch; 0 disables the periodic evaluations.
    pub error_every: usize,
    /// Cells per axis of the error mesh; its rule is the primal order.
    pub error_mesh_cells: usize,
    /// Consecutive epochs with relative decrease of `J^2` below
    /// `progress_tol` before the run stops; 0 disables the check.
    pub progress_patience: usize,
    pub progress_tol: f64,
    pub threads: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            refresh_tol: 5e-2,
            aq: StoppingCriterion::default(),
            primal_order: 7,
            reference_order: 10,
            base_divisions: 3,
            max_epochs: 1000,
            time_limit: None,
            optimizer: OptimizerConfig::default(),
            reset_optimizer_on_refresh: false,
            error_every: 100,
            error_mesh_cells: 100,
            progress_patience: 200,
            progress_tol: 1e-12,
            threads: 1,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.aq.validate()?;
        self.optimizer.validate()?;
        if !(self.refresh_tol > 0.0) {
            return Err(Error::invalid("refresh_tol must be positive"));
        }
        if self.refresh_tol < self.aq.rtol {
            return Err(Error::invalid(format!(
                "refresh_tol {} is below the quadrature rtol {}",
                self.refresh_tol, self.aq.rtol
            )));
        }
        RulePair::new(1, self.primal_order, self.reference_order)?;
        if self.base_divisions == 0 || self.error_mesh_cells == 0 {
            return Err(Error::invalid("base_divisions and error_mesh_cells must be positive"));
        }
        if self.threads == 0 {
            return Err(Error::invalid("threads must be >= 1"));
        }
        if let Some(t) = self.time_limit {
            if !(t > 0.0) {
                return Err(Error::invalid("time_limit must be positive"));
            }
        }
        Ok(())
    }
}

pub fn refresh_decision(eta: f64, tau: f64, epoch: usize) -> bool {
    epoch == 0 || eta >= tau
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub wall_time: f64,
    pub loss_primal: f64,
    pub loss_reference: f64,
    pub eta: f64,
    /// NaN when not evaluated at this epoch.
    pub l2_rel: f64,
    pub h1_rel: f64,
    pub n_primal_points: usize,
    pub n_cells: usize,
    pub refreshed: bool,
    pub line_search_fallback: bool,
}

pub const CSV_HEADER: &str = "epoch,wall_s,loss_primal,loss_reference,eta,l2_rel,h1_rel,n_points,n_cells,refreshed";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:e},{:e},{:e},{:e},{:e},{},{},{}",
            self.epoch,
            self.wall_time,
            self.loss_primal,
            self.loss_reference,
            self.eta,
            self.l2_rel,
            self.h1_rel,
            self.n_primal_points,
            self.n_cells,
            u8::from(self.refreshed)
        )
    }
}

/// One adaptive rebuild.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefreshEvent {
    pub epoch: usize,
    /// Indicator on the old quadrature; NaN for the initial build.
    pub eta_before: f64,
    pub eta_after: f64,
    pub loss_primal: f64,
    pub loss_reference: f64,
    /// Worst termination over the loss terms.
    pub terminated_by: Termination,
    pub cells: usize,
    pub primal_points: usize,
    pub reference_points: usize,
    pub evals: usize,
    /// Independent test loss, when a test quadrature was supplied.
    pub test_loss: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    TimeLimit,
    NoProgress,
    NonFiniteLoss,
}

/// Partition of every loss term right after a refresh.
#[derive(Debug, Clone)]
pub struct PartitionSnapshot {
    pub epoch: usize,
    pub terms: Vec<Vec<CellRecord>>,
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub strategy: Strategy,
    pub records: Vec<EpochRecord>,
    pub params: MlpParams,
    pub refreshes: Vec<RefreshEvent>,
    pub partitions: Vec<PartitionSnapshot>,
    /// Per loss term, the point and cell counts of every refresh.
    pub history: Vec<AdaptiveHistory>,
    pub stop_reason: StopReason,
}

impl TrainingRun {
    pub fn last(&self) -> &EpochRecord {
        self.records.last().expect("a run has at least one record")
    }

    pub fn refresh_count(&self) -> usize {
        self.refreshes.len()
    }
}

/// How the training quadrature is obtained.
#[derive(Debug, Clone)]
pub enum QuadraturePlan {
    Adaptive,
    Fixed { strategy: Strategy, quadrature: LossQuadrature },
}

impl QuadraturePlan {
    pub fn strategy(&self) -> Strategy {
        match self {
            QuadraturePlan::Adaptive => Strategy::Adaptive,
            QuadraturePlan::Fixed { strategy, .. } => *strategy,
        }
    }
}

/// Base partition of one loss term in its own coordinates; `None` for point terms.
pub fn term_base(problem: &ProblemSpec, term: LossTerm, divisions: usize) -> Option<Vec<Cell>> {
    match term {
        LossTerm::Domain => Some(problem.domain.subdivide(divisions)),
        LossTerm::Boundary(i) => problem.faces[i].extent.as_ref().map(|c| c.subdivide(divisions)),
    }
}

fn point_term(problem: &ProblemSpec, face: usize) -> QuadraturePair {
    let f = &problem.faces[face];
    let q = CompositeQuadrature::new(problem.dim(), f.embed(&[]), vec![1.0]).expect("one point");
    QuadraturePair {
        primal: q.clone(),
        reference: q,
        cells: 0,
    }
}

fn lift(problem: &ProblemSpec, term: LossTerm, q: CompositeQuadrature) -> CompositeQuadrature {
    match term {
        LossTerm::Domain => q,
        LossTerm::Boundary(i) => {
            let f = &problem.faces[i];
            q.embed(f.axis, f.coordinate)
        }
    }
}

/// Adaptive quadratures for every loss term of `ansatz`.
pub fn adaptive_quadrature<A: Ansatz + ?Sized>(
    problem: &ProblemSpec,
    ansatz: &A,
    cfg: &TrainerConfig,
) -> Result<(LossQuadrature, Vec<Option<AdaptiveResult>>)> {
    let mut quad = LossQuadrature::default();
    let mut results = Vec::new();
    for term in loss_terms(problem) {
        let Some(base) = term_base(problem, term, cfg.base_divisions) else {
            let LossTerm::Boundary(i) = term else { unreachable!() };
            quad.terms.push(point_term(problem, i));
            results.push(None);
            continue;
        };
        let dim = base[0].dim();
        let pair = RulePair::new(dim, cfg.primal_order, cfg.reference_order)?;
        let f = residual_integrand(problem, ansatz, term)?;
        let res = adapt_integrate(&f, &base, &pair, &cfg.aq)?;
        let m = materialise(&res, &pair);
        quad.terms.push(QuadraturePair {
            primal: lift(problem, term, m.primal),
            reference: lift(problem, term, m.reference),
            cells: m.cells,
        });
        results.push(Some(res));
    }
    Ok((quad, results))
}

/// Fixed quadrature for a non-adaptive strategy. `budgets` holds one entry
/// per loss term (point terms ignore theirs). Reference rules are the higher
/// order on the same partition for `uniform`, and an independent draw of the
/// reference size for sampled strategies.
pub fn baseline_quadrature(
    problem: &ProblemSpec,
    strategy: Strategy,
    budgets: &[PointBudget],
    primal_order: usize,
    reference_order: usize,
    seed: u64,
) -> Result<LossQuadrature> {
    let terms = loss_terms(problem);
    if budgets.len() != terms.len() {
        return Err(Error::invalid(format!(
            "expected {} term budgets, got {}",
            terms.len(),
            budgets.len()
        )));
    }
    let mut quad = LossQuadrature::default();
    for (k, (term, b)) in terms.into_iter().zip(budgets).enumerate() {
        let Some(region) = term_base(problem, term, 1) else {
            let LossTerm::Boundary(i) = term else { unreachable!() };
            quad.terms.push(point_term(problem, i));
            continue;
        };
        let term_seed = seed.wrapping_add(1000 * k as u64);
        let (p, r, cells) = match strategy {
            Strategy::Adaptive => return Err(Error::invalid("adaptive quadrature is not a fixed baseline")),
            Strategy::Uniform => (
                uniform_composite(b.uniform_side, primal_order, &region)?,
                uniform_composite(b.uniform_side, reference_order, &region)?,
                b.uniform_partitions,
            ),
            Strategy::MonteCarlo => (
                sampled_quadrature(Sampler::MonteCarlo { seed: term_seed }, b.primal_points, &region)?,
                sampled_quadrature(Sampler::MonteCarlo { seed: term_seed + 1 }, b.reference_points, &region)?,
                0,
            ),
            Strategy::LatinHypercube => {
                let s = |seed| Sampler::LatinHypercube {
                    seed,
                    placement: StratumPlacement::Random,
                };
                (
                    sampled_quadrature(s(term_seed), b.primal_points, &region)?,
                    sampled_quadrature(s(term_seed + 1), b.reference_points, &region)?,
                    0,
                )
            }
            Strategy::Halton => (
                sampled_quadrature(Sampler::Halton { skip: 0 }, b.primal_points, &region)?,
                sampled_quadrature(
                    Sampler::Halton {
                        skip: b.primal_points,
                    },
                    b.reference_points,
                    &region,
                )?,
                0,
            ),
        };
        quad.terms.push(QuadraturePair {
            primal: lift(problem, term, p),
            reference: lift(problem, term, r),
            cells,
        });
    }
    Ok(quad)
}

/// Per-term budgets matched to an adaptive run.
pub fn match_run_budget(problem: &ProblemSpec, aq_run: &TrainingRun) -> Result<Vec<PointBudget>> {
    loss_terms(problem)
        .into_iter()
        .zip(&aq_run.history)
        .map(|(term, h)| {
            let dim = match term {
                LossTerm::Domain => problem.dim(),
                LossTerm::Boundary(_) => problem.dim() - 1,
            };
            if dim == 0 {
                Ok(PointBudget {
                    primal_points: 1,
                    reference_points: 1,
                    uniform_partitions: 1,
                    uniform_side: 1,
                })
            } else {
                match_budget(h, dim)
            }
        })
        .collect()
}

/// Composite mesh used for the error norms.
pub fn error_mesh(problem: &ProblemSpec, cells_per_axis: usize, order: usize) -> Result<CompositeQuadrature> {
    uniform_composite(cells_per_axis, order, std::slice::from_ref(&problem.domain))
}

/// Optional hooks and extra inputs of a run.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Called with every record as soon as it exists.
    pub on_record: Option<Box<dyn FnMut(&EpochRecord) + 'a>>,
    /// Called with every refresh and its partitions.
    pub on_refresh: Option<Box<dyn FnMut(&RefreshEvent, &PartitionSnapshot) + 'a>>,
    /// Independent test loss, evaluated right after every refresh.
    pub test_loss: Option<Box<dyn FnMut(&MlpParams) -> Result<f64> + 'a>>,
    /// Replaces the default error mesh.
    pub error_mesh: Option<CompositeQuadrature>,
}

/// Trains a fresh Glorot-initialised network.
pub fn train(
    problem: &ProblemSpec,
    arch: MlpArch,
    seed: u64,
    cfg: &TrainerConfig,
    plan: &QuadraturePlan,
    hooks: &mut TrainHooks<'_>,
) -> Result<TrainingRun> {
    if arch.in_dim != problem.dim() || arch.out_dim != 1 {
        return Err(Error::invalid(format!(
            "network maps R^{} -> R^{} but the problem needs R^{} -> R",
            arch.in_dim,
            arch.out_dim,
            problem.dim()
        )));
    }
    let params = init_glorot(arch, seed)?;
    train_from(problem, params, cfg, plan, hooks)
}

struct State {
    quad: LossQuadrature,
    j2: f64,
    grad: Vec<f64>,
    j_ref: f64,
}

fn worst(a: Termination, b: Termination) -> Termination {
    let rank = |t| match t {
        Termination::Tolerance => 0,
        Termination::RefinementFloor => 1,
        Termination::MaxEvals => 2,
    };
    if rank(b) > rank(a) {
        b
    } else {
        a
    }
}

pub fn train_from(
    problem: &ProblemSpec,
    mut params: MlpParams,
    cfg: &TrainerConfig,
    plan: &QuadraturePlan,
    hooks: &mut TrainHooks<'_>,
) -> Result<TrainingRun> {
    cfg.validate()?;
    problem.validate()?;
    let start = Instant::now();
    let threads = cfg.threads;
    let n_terms = loss_terms(problem).len();
    let fine = match hooks.error_mesh.take() {
        Some(m) => Some(m),
        None if problem.exact.is_some() => Some(error_mesh(problem, cfg.error_mesh_cells, cfg.primal_order)?),
        None => None,
    };
    let errors = |p: &MlpParams| -> Result<(f64, f64)> {
        match &fine {
            Some(m) => evaluate_errors(problem, p, m, threads),
            None => Ok((f64::NAN, f64::NAN)),
        }
    };
    let evaluate = |p: &MlpParams, quad: LossQuadrature| -> Result<State> {
        let (j2, grad) = loss_and_gradient(problem, p, &quad.rule(RuleKind::Primal), threads)?;
        let r = assemble_loss(problem, p, &quad.rule(RuleKind::Reference), RuleKind::Reference, threads)?;
        Ok(State {
            quad,
            j2,
            grad,
            j_ref: r.total,
        })
    };
    let eta_of = |s: &State| {
        let jp = s.j2.sqrt();
        (jp - s.j_ref).abs() / s.j_ref.max(crate::losses::ETA_FLOOR)
    };

    let mut run = TrainingRun {
        strategy: plan.strategy(),
        records: Vec::new(),
        params: params.clone(),
        refreshes: Vec::new(),
        partitions: Vec::new(),
        history: vec![AdaptiveHistory::default(); n_terms],
        stop_reason: StopReason::MaxEpochs,
    };

    let mut refresh = |params: &MlpParams, epoch: usize, eta_before: f64, run: &mut TrainingRun| -> Result<State> {
        let (quad, results) = adaptive_quadrature(problem, params, cfg)?;
        let state = evaluate(params, quad)?;
        let mut term = Termination::Tolerance;
        let mut evals = 0;
        let mut snapshot = PartitionSnapshot {
            epoch,
            terms: Vec::with_capacity(n_terms),
        };
        for ((res, pair), h) in results.into_iter().zip(&state.quad.terms).zip(run.history.iter_mut()) {
            h.push(pair.primal.len(), pair.reference.len(), pair.cells);
            match res {
                Some(r) => {
                    term = worst(term, r.terminated_by);
                    evals += r.evals_used;
                    snapshot.terms.push(r.partition);
                }
                None => snapshot.terms.push(Vec::new()),
            }
        }
        let test_loss = match hooks.test_loss.as_mut() {
            Some(t) => Some(t(params)?),
            None => None,
        };
        let ev = RefreshEvent {
            epoch,
            eta_before,
            eta_after: eta_of(&state),
            loss_primal: state.j2.sqrt(),
            loss_reference: state.j_ref,
            terminated_by: term,
            cells: state.quad.cells(),
            primal_points: state.quad.primal_points(),
            reference_points: state.quad.reference_points(),
            evals,
            test_loss,
        };
        if let Some(cb) = hooks.on_refresh.as_mut() {
            cb(&ev, &snapshot);
        }
        run.refreshes.push(ev);
        run.partitions.push(snapshot);
        Ok(state)
    };

    let mut state = match plan {
        QuadraturePlan::Adaptive => refresh(&params, 0, f64::NAN, &mut run)?,
        QuadraturePlan::Fixed { quadrature, .. } => {
            if quadrature.terms.len() != n_terms {
                return Err(Error::invalid("fixed quadrature does not match the loss terms"));
            }
            evaluate(&params, quadrature.clone())?
        }
    };

    let mut push = |rec: EpochRecord, run: &mut TrainingRun| {
        if let Some(cb) = hooks.on_record.as_mut() {
            cb(&rec);
        }
        run.records.push(rec);
    };

    let (l2, h1) = errors(&params)?;
    let mut eta = eta_of(&state);
    push(
        EpochRecord {
            epoch: 0,
            wall_time: start.elapsed().as_secs_f64(),
            loss_primal: state.j2.sqrt(),
            loss_reference: state.j_ref,
            eta,
            l2_rel: l2,
            h1_rel: h1,
            n_primal_points: state.quad.primal_points(),
            n_cells: state.quad.cells(),
            refreshed: matches!(plan, QuadraturePlan::Adaptive),
            line_search_fallback: false,
        },
        &mut run,
    );
    if !state.j2.is_finite() {
        run.stop_reason = StopReason::NonFiniteLoss;
        run.params = params;
        return Ok(run);
    }

    let mut opt = Optimizer::new(&cfg.optimizer, params.len())?;
    let mut stalled = 0usize;
    let mut x = params.values().to_vec();
    for epoch in 1..=cfg.max_epochs {
        if let Some(limit) = cfg.time_limit {
            if start.elapsed().as_secs_f64() >= limit {
                run.stop_reason = StopReason::TimeLimit;
                break;
            }
        }
        let mut refreshed = false;
        if matches!(plan, QuadraturePlan::Adaptive) && refresh_decision(eta, cfg.refresh_tol, epoch) {
            state = refresh(&params, epoch, eta, &mut run)?;
            refreshed = true;
            if cfg.reset_optimizer_on_refresh {
                opt.reset();
            }
        }
        let prev_j2 = state.j2;
        let primal = state.quad.rule(RuleKind::Primal);
        let mut scratch = params.clone();
        let mut obj = |v: &[f64]| -> Result<(f64, Vec<f64>)> {
            scratch.set_values(v);
            loss_and_gradient(problem, &scratch, &primal, threads)
        };
        let step = opt.step(&mut x, state.j2, &state.grad, &mut obj);
        let step = match step {
            Ok(s) if s.value.is_finite() => s,
            _ => {
                push(
                    EpochRecord {
                        epoch,
                        wall_time: start.elapsed().as_secs_f64(),
                        loss_primal: f64::NAN,
                        loss_reference: f64::NAN,
                        eta: f64::NAN,
                        l2_rel: f64::NAN,
                        h1_rel: f64::NAN,
                        n_primal_points: state.quad.primal_points(),
                        n_cells: state.quad.cells(),
                        refreshed,
                        line_search_fallback: true,
                    },
                    &mut run,
                );
                run.stop_reason = StopReason::NonFiniteLoss;
                break;
            }
        };
        params.set_values(&x);
        state.j2 = step.value;
        state.grad = step.grad;
        state.j_ref = assemble_loss(
            problem,
            &params,
            &state.quad.rule(RuleKind::Reference),
            RuleKind::Reference,
            threads,
        )
        .map(|b| b.total)
        .unwrap_or(f64::NAN);
        eta = eta_of(&state);

        let last = epoch == cfg.max_epochs;
        let (l2, h1) = if last || (cfg.error_every > 0 && epoch % cfg.error_every == 0) {
            errors(&params)?
        } else {
            (f64::NAN, f64::NAN)
        };
        push(
            EpochRecord {
                epoch,
                wall_time: start.elapsed().as_secs_f64(),
                loss_primal: state.j2.sqrt(),
                loss_reference: state.j_ref,
                eta,
                l2_rel: l2,
                h1_rel: h1,
                n_primal_points: state.quad.primal_points(),
                n_cells: state.quad.cells(),
                refreshed,
                line_search_fallback: step.fallback,
            },
            &mut run,
        );
        if !state.j_ref.is_finite() {
            run.stop_reason = StopReason::NonFiniteLoss;
            break;
        }
        if cfg.progress_patience > 0 {
            let rel = (prev_j2 - state.j2) / prev_j2.max(f64::MIN_POSITIVE);
            if !refreshed && rel < cfg.progress_tol {
                stalled += 1;
            } else {
                stalled = 0;
            }
            if stalled >= cfg.progress_patience {
                run.stop_reason = StopReason::NoProgress;
                break;
            }
        }
    }
    // Error norms for the final state when the loop ended early.
    if let Some(last) = run.records.last_mut() {
        if last.l2_rel.is_nan() && last.loss_primal.is_finite() {
            let (l2, h1) = errors(&params)?;
            last.l2_rel = l2;
            last.h1_rel = h1;
        }
    }
    run.params = params;
    Ok(run)
}
