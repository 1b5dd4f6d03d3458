//! First-order and quasi-Newton optimizers over a flat parameter vector.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smooth objective with gradient.
pub trait Objective {
    fn value_grad(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl<F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>> Objective for F {
    fn value_grad(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam {
        #[serde(default = "default_lr")]
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
    Lbfgs {
        #[serde(default = "default_memory")]
        memory: usize,
        #[serde(default = "default_c1")]
        c1: f64,
        #[serde(default = "default_c2")]
        c2: f64,
        #[serde(default = "default_max_evals")]
        max_evals: usize,
    },
}

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_memory() -> usize {
    20
}
fn default_c1() -> f64 {
    1e-4
}
fn default_c2() -> f64 {
    0.9
}
fn default_max_evals() -> usize {
    25
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::lbfgs()
    }
}

impl OptimizerConfig {
    pub fn lbfgs() -> Self {
        OptimizerConfig::Lbfgs {
            memory: default_memory(),
            c1: default_c1(),
            c2: default_c2(),
            max_evals: default_max_evals(),
        }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                if !(lr >= 0.0 && lr.is_finite()) {
                    return Err(Error::invalid(format!("adam lr must be finite and >= 0, got {lr}")));
                }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return Err(Error::invalid("adam betas must lie in [0, 1)"));
                }
                if !(eps > 0.0) {
                    return Err(Error::invalid("adam eps must be positive"));
                }
            }
            OptimizerConfig::Lbfgs { memory, c1, c2, max_evals } => {
                if memory == 0 || max_evals == 0 {
                    return Err(Error::invalid("lbfgs memory and max_evals must be positive"));
                }
                if !(0.0 < c1 && c1 < c2 && c2 < 1.0) {
                    return Err(Error::invalid(format!("need 0 < c1 < c2 < 1, got c1={c1}, c2={c2}")));
                }
            }
        }
        Ok(())
    }
}

/// Outcome of one accepted step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    /// Objective and gradient at the new iterate.
    pub value: f64,
    pub grad: Vec<f64>,
    pub evals: usize,
    /// The line search failed and a short steepest-descent step was taken.
    pub fallback: bool,
}

pub const FALLBACK_STEP: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn reset(&mut self) {
        self.t = 0;
        self.m.fill(0.0);
        self.v.fill(0.0);
    }

    /// Moment update of `x` in place from gradient `g`.
    pub fn update(&mut self, x: &mut [f64], g: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..x.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            x[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone)]
pub struct Lbfgs {
    memory: usize,
    c1: f64,
    c2: f64,
    max_evals: usize,
    history: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
}

struct Trial {
    alpha: f64,
    value: f64,
    slope: f64,
    grad: Vec<f64>,
}

impl Lbfgs {
    pub fn new(memory: usize, c1: f64, c2: f64, max_evals: usize) -> Self {
        Lbfgs {
            memory,
            c1,
            c2,
            max_evals,
            history: VecDeque::with_capacity(memory),
        }
    }

    pub fn reset(&mut self) {
        self.history.clear();
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    /// Two-loop recursion: approximate `-H g`.
    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let mut alphas = Vec::with_capacity(self.history.len());
        for (s, y, rho) in self.history.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        let gamma = match self.history.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => 1.0,
        };
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
        for ((s, y, rho), a) in self.history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        for qi in q.iter_mut() {
            *qi = -*qi;
        }
        q
    }

    fn evaluate<O: Objective + ?Sized>(
        obj: &mut O,
        x: &[f64],
        dir: &[f64],
        alpha: f64,
        evals: &mut usize,
    ) -> Trial {
        *evals += 1;
        let xt: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + alpha * d).collect();
        match obj.value_grad(&xt) {
            Ok((value, grad)) if value.is_finite() && grad.iter().all(|g| g.is_finite()) => Trial {
                alpha,
                value,
                slope: dot(&grad, dir),
                grad,
            },
            _ => Trial {
                alpha,
                value: f64::INFINITY,
                slope: f64::NAN,
                grad: Vec::new(),
            },
        }
    }

    /// Strong-Wolfe line search along `dir`; `None` on failure.
    fn line_search<O: Objective + ?Sized>(
        &self,
        obj: &mut O,
        x: &[f64],
        f0: f64,
        d0: f64,
        dir: &[f64],
        alpha0: f64,
        evals: &mut usize,
    ) -> Option<Trial> {
        let mut prev = Trial {
            alpha: 0.0,
            value: f0,
            slope: d0,
            grad: Vec::new(),
        };
        let mut alpha = alpha0;
        let mut first = true;
        while *evals < self.max_evals {
            let t = Self::evaluate(obj, x, dir, alpha, evals);
            if !t.value.is_finite() {
                // Step too long to evaluate; shrink towards the last good point.
                alpha = prev.alpha + 0.5 * (alpha - prev.alpha);
                continue;
            }
            if t.value > f0 + self.c1 * alpha * d0 || (!first && t.value >= prev.value) {
                return self.zoom(obj, x, f0, d0, dir, prev, t, evals);
            }
            if t.slope.abs() <= -self.c2 * d0 {
                return Some(t);
            }
            if t.slope >= 0.0 {
                return self.zoom(obj, x, f0, d0, dir, t, prev, evals);
            }
            first = false;
            prev = t;
            alpha *= 2.0;
        }
        None
    }

    #[allow(clippy::too_many_arguments)]
    fn zoom<O: Objective + ?Sized>(
        &self,
        obj: &mut O,
        x: &[f64],
        f0: f64,
        d0: f64,
        dir: &[f64],
        mut lo: Trial,
        mut hi: Trial,
        evals: &mut usize,
    ) -> Option<Trial> {
        while *evals < self.max_evals {
            let (a, b) = (lo.alpha.min(hi.alpha), lo.alpha.max(hi.alpha));
            if (b - a) <= 1e-14 * b.max(1e-300) {
                break;
            }
            // Quadratic interpolation from lo's value and slope and hi's value,
            // safeguarded into the middle of the bracket.
            let mut alpha = f64::NAN;
            if hi.value.is_finite() {
                let dx = hi.alpha - lo.alpha;
                let denom = 2.0 * (hi.value - lo.value - lo.slope * dx);
                if denom != 0.0 {
                    alpha = lo.alpha - lo.slope * dx * dx / denom;
                }
            }
            let margin = 0.1 * (b - a);
            if !(alpha > a + margin && alpha < b - margin) {
                alpha = 0.5 * (a + b);
            }
            let t = Self::evaluate(obj, x, dir, alpha, evals);
            if !t.value.is_finite() || t.value > f0 + self.c1 * alpha * d0 || t.value >= lo.value {
                hi = t;
            } else {
                if t.slope.abs() <= -self.c2 * d0 {
                    return Some(t);
                }
                if t.slope * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = t;
            }
        }
        // Accept a point with sufficient decrease even if curvature failed.
        (lo.alpha > 0.0 && lo.value <= f0 + self.c1 * lo.alpha * d0).then_some(lo)
    }

    pub fn step<O: Objective + ?Sized>(
        &mut self,
        x: &mut [f64],
        f0: f64,
        g0: &[f64],
        obj: &mut O,
    ) -> Result<StepInfo> {
        let mut evals = 0;
        let mut dir = self.direction(g0);
        let mut d0 = dot(&dir, g0);
        if !(d0 < 0.0) {
            // Not a descent direction: drop the history.
            self.history.clear();
            dir = g0.iter().map(|g| -g).collect();
            d0 = dot(&dir, g0);
        }
        let alpha0 = if self.history.is_empty() {
            (1.0 / norm(g0)).min(1.0)
        } else {
            1.0
        };
        match self.line_search(obj, x, f0, d0, &dir, alpha0, &mut evals) {
            Some(t) => {
                let s: Vec<f64> = dir.iter().map(|d| t.alpha * d).collect();
                let y: Vec<f64> = t.grad.iter().zip(g0).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-12 * dot(&y, &y) && sy > 0.0 {
                    if self.history.len() == self.memory {
                        self.history.pop_front();
                    }
                    self.history.push_back((s.clone(), y, 1.0 / sy));
                }
                for (xi, si) in x.iter_mut().zip(&s) {
                    *xi += si;
                }
                Ok(StepInfo {
                    value: t.value,
                    grad: t.grad,
                    evals,
                    fallback: false,
                })
            }
            None => {
                let gn = norm(g0);
                for (xi, gi) in x.iter_mut().zip(g0) {
                    *xi -= FALLBACK_STEP * gi / gn;
                }
                let (value, grad) = obj.value_grad(x)?;
                Ok(StepInfo {
                    value,
                    grad,
                    evals: evals + 1,
                    fallback: true,
                })
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Adam(Adam),
    Lbfgs(Lbfgs),
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig, n: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(match *cfg {
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => Optimizer::Adam(Adam::new(n, lr, beta1, beta2, eps)),
            OptimizerConfig::Lbfgs { memory, c1, c2, max_evals } => {
                Optimizer::Lbfgs(Lbfgs::new(memory, c1, c2, max_evals))
            }
        })
    }

    pub fn reset(&mut self) {
        match self {
            Optimizer::Adam(a) => a.reset(),
            Optimizer::Lbfgs(l) => l.reset(),
        }
    }

    /// One accepted step from `x` with value `f0` and gradient `g0`. A zero
    /// gradient leaves `x` untouched and costs no evaluation.
    pub fn step<O: Objective + ?Sized>(
        &mut self,
        x: &mut [f64],
        f0: f64,
        g0: &[f64],
        obj: &mut O,
    ) -> Result<StepInfo> {
        if g0.iter().all(|g| *g == 0.0) {
            return Ok(StepInfo {
                value: f0,
                grad: g0.to_vec(),
                evals: 0,
                fallback: false,
            });
        }
        match self {
            Optimizer::Adam(a) => {
                a.update(x, g0);
                let (value, grad) = obj.value_grad(x)?;
                Ok(StepInfo {
                    value,
                    grad,
                    evals: 1,
                    fallback: false,
                })
            }
            Optimizer::Lbfgs(l) => l.step(x, f0, g0, obj),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bowl(target: Vec<f64>, scales: Vec<f64>) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> {
        move |x: &[f64]| {
            let mut v = 0.0;
            let mut g = vec![0.0; x.len()];
            for i in 0..x.len() {
                let d = x[i] - target[i];
                v += scales[i] * d * d;
                g[i] = 2.0 * scales[i] * d;
            }
            Ok((v, g))
        }
    }

    #[test]
    fn lbfgs_solves_quadratic_bowl() {
        let n = 30;
        let target: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let scales: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        let mut obj = bowl(target.clone(), scales);
        let mut opt = Optimizer::new(&OptimizerConfig::lbfgs(), n).unwrap();
        let mut x = vec![0.0; n];
        let (mut f, mut g) = obj(&x).unwrap();
        for _ in 0..50 {
            let s = opt.step(&mut x, f, &g, &mut obj).unwrap();
            assert!(!s.fallback);
            f = s.value;
            g = s.grad;
        }
        let err: f64 = x.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn rosenbrock_decreases() {
        let mut obj = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            Ok((v, vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]))
        };
        let mut opt = Optimizer::new(&OptimizerConfig::lbfgs(), 2).unwrap();
        let mut x = vec![-1.2, 1.0];
        let (mut f, mut g) = obj(&x).unwrap();
        for _ in 0..200 {
            let s = opt.step(&mut x, f, &g, &mut obj).unwrap();
            assert!(s.value <= f);
            f = s.value;
            g = s.grad;
        }
        assert!(f < 1e-12, "{f}");
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut calls = 0;
        let mut obj = |_: &[f64]| -> Result<(f64, Vec<f64>)> {
            calls += 1;
            Ok((0.0, vec![0.0; 3]))
        };
        for cfg in [OptimizerConfig::lbfgs(), OptimizerConfig::adam(0.1)] {
            let mut opt = Optimizer::new(&cfg, 3).unwrap();
            let mut x = vec![1.0, 2.0, 3.0];
            let s = opt.step(&mut x, 5.0, &[0.0; 3], &mut obj).unwrap();
            assert_eq!(x, vec![1.0, 2.0, 3.0]);
            assert_eq!(s.evals, 0);
        }
        assert_eq!(calls, 0);
    }

    #[test]
    fn adam_with_zero_rate_is_a_no_op() {
        let mut obj = bowl(vec![1.0; 4], vec![1.0; 4]);
        let mut opt = Optimizer::new(&OptimizerConfig::adam(0.0), 4).unwrap();
        let mut x = vec![0.5; 4];
        let (f, g) = obj(&x).unwrap();
        opt.step(&mut x, f, &g, &mut obj).unwrap();
        assert_eq!(x, vec![0.5; 4]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut a = Adam::new(2, 0.1, 0.9, 0.999, 1e-8);
        let mut x = vec![0.0, 0.0];
        a.update(&mut x, &[3.0, -0.5]);
        assert!((x[0] + 0.1).abs() < 1e-8 && (x[1] - 0.1).abs() < 1e-8);
    }

    #[test]
    fn failed_search_falls_back() {
        // Gradient points the wrong way relative to the values: no decrease exists.
        let mut obj = |x: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((x[0].abs() + 1.0, vec![1.0])) };
        let mut opt = Lbfgs::new(5, 1e-4, 0.9, 10);
        let mut x = vec![0.0];
        let s = opt.step(&mut x, 1.0, &[1.0], &mut obj).unwrap();
        assert!(s.fallback);
        assert!((x[0] + FALLBACK_STEP).abs() < 1e-15);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(OptimizerConfig::adam(-1.0).validate().is_err());
        let bad = OptimizerConfig::Lbfgs {
            memory: 0,
            c1: 1e-4,
            c2: 0.9,
            max_evals: 10,
        };
        assert!(bad.validate().is_err());
        let bad = OptimizerConfig::Lbfgs {
            memory: 5,
            c1: 0.9,
            c2: 0.1,
            max_evals: 10,
        };
        assert!(bad.validate().is_err());
    }
}
