//! Adaptive run followed by budget-matched baseline runs.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::MlpArch;
use crate::problems::ProblemSpec;
use crate::sampling::{PointBudget, Strategy};
use crate::trainer::{
    baseline_quadrature, match_run_budget, train, QuadraturePlan, TrainHooks, TrainerConfig, TrainingRun,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: Strategy,
    pub final_l2_rel: f64,
    pub final_h1_rel: f64,
    pub n_points: usize,
    pub wall_s: f64,
    pub refreshes: usize,
}

impl SummaryRow {
    pub fn of(run: &TrainingRun) -> Self {
        let last = run.last();
        SummaryRow {
            strategy: run.strategy,
            final_l2_rel: last.l2_rel,
            final_h1_rel: last.h1_rel,
            n_points: last.n_primal_points,
            wall_s: last.wall_time,
            refreshes: run.refresh_count(),
        }
    }
}

/// Removes repeated strategies, keeping first occurrences; returns the
/// cleaned list and the duplicates dropped.
pub fn dedup_strategies(list: &[Strategy]) -> (Vec<Strategy>, Vec<Strategy>) {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for s in list {
        if kept.contains(s) {
            dropped.push(*s);
        } else {
            kept.push(*s);
        }
    }
    (kept, dropped)
}

pub struct Comparison {
    pub runs: Vec<TrainingRun>,
    pub budgets: Vec<PointBudget>,
}

impl Comparison {
    pub fn summary(&self) -> Vec<SummaryRow> {
        self.runs.iter().map(SummaryRow::of).collect()
    }
}

/// Trains with adaptive quadrature, derives per-term budgets from its
/// refresh history, then trains each baseline from the same initial network.
/// The adaptive run always happens and is always reported first.
pub fn compare<'h>(
    problem: &ProblemSpec,
    arch: MlpArch,
    seed: u64,
    cfg: &TrainerConfig,
    strategies: &[Strategy],
    mut hooks: impl FnMut(Strategy) -> TrainHooks<'h>,
) -> Result<Comparison> {
    let (list, _) = dedup_strategies(strategies);
    let aq = train(problem, arch, seed, cfg, &QuadraturePlan::Adaptive, &mut hooks(Strategy::Adaptive))?;
    let budgets = match_run_budget(problem, &aq)?;
    let mut runs = vec![aq];
    for s in list.into_iter().filter(|s| *s != Strategy::Adaptive) {
        let quadrature = baseline_quadrature(problem, s, &budgets, cfg.primal_order, cfg.reference_order, seed)?;
        let plan = QuadraturePlan::Fixed { strategy: s, quadrature };
        runs.push(train(problem, arch, seed, cfg, &plan, &mut hooks(s))?);
    }
    Ok(Comparison { runs, budgets })
}
