//! Run configuration file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use aqnn::cubature::StoppingCriterion;
use aqnn::nn::MlpArch;
use aqnn::optim::OptimizerConfig;
use aqnn::problems::ProblemSpec;
use aqnn::sampling::Strategy;
use aqnn::trainer::TrainerConfig;
use aqnn::Cell;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub problem: ProblemBlock,
    #[serde(default)]
    pub net: NetBlock,
    #[serde(default)]
    pub quadrature: QuadratureBlock,
    #[serde(default)]
    pub optimizer: OptimizerBlock,
    #[serde(default)]
    pub output: OutputBlock,
    /// Only read by `integrate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integrand: Option<IntegrandBlock>,
    /// Only read by `compare`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemBlock {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default = "default_gamma")]
    pub gamma_d: f64,
    /// `[lo, hi]` per axis; the problem's own box when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<Vec<[f64; 2]>>,
}

fn default_gamma() -> f64 {
    aqnn::problems::DEFAULT_PENALTY
}

impl Default for ProblemBlock {
    fn default() -> Self {
        ProblemBlock {
            name: "arctan-well".into(),
            epsilon: None,
            gamma_d: default_gamma(),
            domain: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetBlock {
    pub layers: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for NetBlock {
    fn default() -> Self {
        NetBlock {
            layers: 4,
            width: 25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureBlock {
    pub strategy: String,
    pub kp: usize,
    pub kr: usize,
    /// Cells per axis of the base partition.
    pub base_partition: usize,
    pub xi: f64,
    pub rho: f64,
    pub q: f64,
    pub maxevals: usize,
    pub tau: f64,
    /// Points per loss term when `train` runs a sampled baseline on its own.
    pub points: usize,
    /// Cells per axis when `train` runs the uniform baseline on its own.
    pub uniform_side: usize,
}

impl Default for QuadratureBlock {
    fn default() -> Self {
        let c = StoppingCriterion::default();
        QuadratureBlock {
            strategy: "aq".into(),
            kp: 7,
            kr: 10,
            base_partition: 3,
            xi: c.rtol,
            rho: c.atol,
            q: c.exponent,
            maxevals: c.maxevals,
            tau: 5e-2,
            points: 1000,
            uniform_side: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerBlock {
    pub kind: String,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub memory: usize,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search_evals: usize,
    pub max_epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_limit: Option<f64>,
    pub reset_on_refresh: bool,
    pub progress_patience: usize,
}

impl Default for OptimizerBlock {
    fn default() -> Self {
        let (memory, c1, c2, max_evals) = match OptimizerConfig::lbfgs() {
            OptimizerConfig::Lbfgs {
                memory,
                c1,
                c2,
                max_evals,
            } => (memory, c1, c2, max_evals),
            OptimizerConfig::Adam { .. } => unreachable!(),
        };
        let (lr, beta1, beta2, eps) = match OptimizerConfig::adam(1e-3) {
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => (lr, beta1, beta2, eps),
            OptimizerConfig::Lbfgs { .. } => unreachable!(),
        };
        OptimizerBlock {
            kind: "lbfgs".into(),
            lr,
            beta1,
            beta2,
            eps,
            memory,
            c1,
            c2,
            max_line_search_evals: max_evals,
            max_epochs: 1000,
            time_limit: None,
            reset_on_refresh: false,
            progress_patience: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputBlock {
    pub directory: String,
    pub csv: String,
    /// Write the partitions of every n-th refresh; 0 disables snapshots.
    pub snapshot_every: usize,
    pub error_every: usize,
    pub error_mesh_cells: usize,
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock {
            directory: "out".into(),
            csv: "history.csv".into(),
            snapshot_every: 1,
            error_every: 100,
            error_mesh_cells: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrandBlock {
    /// `constant`, `arctan-well` or `residual`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    /// Network for `residual`; a fresh network from `net` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    /// `[lo, hi]` per axis for `constant`; the unit square when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareBlock {
    pub strategies: Vec<String>,
}

pub fn cell_from_bounds(b: &[[f64; 2]]) -> aqnn::Result<Cell> {
    if b.is_empty() {
        return Err(aqnn::Error::InvalidInput("domain needs at least one axis".into()));
    }
    let lo = b.iter().map(|x| x[0]).collect();
    let w = b.iter().map(|x| x[1] - x[0]).collect();
    Cell::new(lo, w)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| format!("invalid config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), String> {
        self.problem_spec()?;
        self.arch()?;
        self.strategy()?;
        self.trainer_config(1)?;
        if self.quadrature.points == 0 || self.quadrature.uniform_side == 0 {
            return Err("quadrature.points and quadrature.uniform_side must be positive".into());
        }
        if let Some(c) = &self.compare {
            for s in &c.strategies {
                s.parse::<Strategy>().map_err(|e| e.to_string())?;
            }
        }
        Ok(())
    }

    pub fn problem_spec(&self) -> Result<ProblemSpec, String> {
        let p = &self.problem;
        let spec = ProblemSpec::by_name(&p.name, p.epsilon, Some(p.gamma_d)).map_err(|e| e.to_string())?;
        match &p.domain {
            Some(b) => {
                let cell = cell_from_bounds(b).map_err(|e| e.to_string())?;
                spec.with_domain(cell).map_err(|e| e.to_string())
            }
            None => Ok(spec),
        }
    }

    pub fn arch(&self) -> Result<MlpArch, String> {
        let dim = self.problem_spec()?.dim();
        MlpArch::new(dim, 1, self.net.layers, self.net.width).map_err(|e| e.to_string())
    }

    pub fn strategy(&self) -> Result<Strategy, String> {
        self.quadrature.strategy.parse().map_err(|e: aqnn::Error| e.to_string())
    }

    pub fn criterion(&self) -> Result<StoppingCriterion, String> {
        let q = &self.quadrature;
        StoppingCriterion::new(q.xi, q.rho, q.maxevals, q.q).map_err(|e| e.to_string())
    }

    pub fn optimizer_config(&self) -> Result<OptimizerConfig, String> {
        let o = &self.optimizer;
        let cfg = match o.kind.as_str() {
            "lbfgs" => OptimizerConfig::Lbfgs {
                memory: o.memory,
                c1: o.c1,
                c2: o.c2,
                max_evals: o.max_line_search_evals,
            },
            "adam" => OptimizerConfig::Adam {
                lr: o.lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
            },
            other => return Err(format!("unknown optimizer '{other}' (expected lbfgs or adam)")),
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn trainer_config(&self, threads: usize) -> Result<TrainerConfig, String> {
        let q = &self.quadrature;
        let cfg = TrainerConfig {
            refresh_tol: q.tau,
            aq: self.criterion()?,
            primal_order: q.kp,
            reference_order: q.kr,
            base_divisions: q.base_partition,
            max_epochs: self.optimizer.max_epochs,
            time_limit: self.optimizer.time_limit,
            optimizer: self.optimizer_config()?,
            reset_optimizer_on_refresh: self.optimizer.reset_on_refresh,
            error_every: self.output.error_every,
            error_mesh_cells: self.output.error_mesh_cells,
            progress_patience: self.optimizer.progress_patience,
            progress_tol: 1e-12,
            threads,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c.problem.name, "arctan-well");
        assert_eq!(c.quadrature.kp, 7);
        assert_eq!(c.optimizer.memory, 20);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("[problem]\nname = \"arctan-well\"\ncolour = 1\n").is_err());
        assert!(RunConfig::parse("[extra]\n").is_err());
    }

    #[test]
    fn bad_values_rejected() {
        assert!(RunConfig::parse("[quadrature]\nstrategy = \"sobol\"\n").is_err());
        assert!(RunConfig::parse("[quadrature]\nxi = 0.1\ntau = 0.01\n").is_err());
        assert!(RunConfig::parse("[problem]\nname = \"heat\"\n").is_err());
        assert!(RunConfig::parse("[optimizer]\nkind = \"sgd\"\n").is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = RunConfig::parse("[problem]\nname = \"advection-diffusion-1d\"\nepsilon = 0.001\n").unwrap();
        let again = RunConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.arch().unwrap().in_dim, 1);
    }
}
