//! Non-adaptive quadrature strategies and budget matching against an
//! adaptive run.
//!
//! Random streams use ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64`),
//! which produces the same sequence on every platform.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Cell;
use crate::quadrature::CompositeQuadrature;
use crate::rules::TensorRule;

/// Name of the pseudo-random generator behind MC and LHC point sets.
pub const RNG_ALGORITHM: &str = "chacha8";

const PRIMES: [u64; 4] = [2, 3, 5, 7];

/// Quadrature strategy used to build a training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "aq")]
    Adaptive,
    #[serde(rename = "uniform")]
    Uniform,
    #[serde(rename = "mc")]
    MonteCarlo,
    #[serde(rename = "qmc-lhc")]
    LatinHypercube,
    #[serde(rename = "qmc-halton")]
    Halton,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Adaptive,
        Strategy::Uniform,
        Strategy::MonteCarlo,
        Strategy::LatinHypercube,
        Strategy::Halton,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Adaptive => "aq",
            Strategy::Uniform => "uniform",
            Strategy::MonteCarlo => "mc",
            Strategy::LatinHypercube => "qmc-lhc",
            Strategy::Halton => "qmc-halton",
        }
    }

    pub fn is_sampled(self) -> bool {
        matches!(
            self,
            Strategy::MonteCarlo | Strategy::LatinHypercube | Strategy::Halton
        )
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown strategy '{s}' (expected aq, uniform, mc, qmc-lhc or qmc-halton)"
                ))
            })
    }
}

/// Where a Latin-hypercube point sits inside its stratum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratumPlacement {
    #[default]
    Random,
    Midpoint,
}

/// Van der Corput radical inverse of `i` in `base`.
pub fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += (i % base) as f64 * f;
        i /= base;
        f *= inv;
    }
    r
}

fn check_dim(dim: usize) -> Result<()> {
    if !(1..=PRIMES.len()).contains(&dim) {
        return Err(Error::invalid(format!(
            "sampling dimension must lie in [1, {}], got {dim}",
            PRIMES.len()
        )));
    }
    Ok(())
}

/// Halton points `skip+1 ..= skip+n` in `[0,1]^dim`, stored flat.
pub fn halton_points_from(skip: usize, n: usize, dim: usize) -> Result<Vec<f64>> {
    check_dim(dim)?;
    let mut out = Vec::with_capacity(n * dim);
    for i in 0..n {
        let idx = (skip + i + 1) as u64;
        out.extend(PRIMES[..dim].iter().map(|&b| radical_inverse(idx, b)));
    }
    Ok(out)
}

/// First `n` Halton points: coordinate `j` of point `i` is the radical
/// inverse of `i + 1` in the `j`-th prime base.
pub fn halton_points(n: usize, dim: usize) -> Result<Vec<f64>> {
    halton_points_from(0, n, dim)
}

/// Latin-hypercube sample: along every axis each stratum `[k/n, (k+1)/n)`
/// receives exactly one point.
pub fn latin_hypercube(n: usize, dim: usize, seed: u64, placement: StratumPlacement) -> Result<Vec<f64>> {
    check_dim(dim)?;
    if n == 0 {
        return Err(Error::invalid("latin hypercube needs n >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0; n * dim];
    let mut strata: Vec<usize> = (0..n).collect();
    for j in 0..dim {
        strata.shuffle(&mut rng);
        for (i, &k) in strata.iter().enumerate() {
            let offset = match placement {
                StratumPlacement::Random => rng.gen::<f64>(),
                StratumPlacement::Midpoint => 0.5,
            };
            out[i * dim + j] = (k as f64 + offset) / n as f64;
        }
    }
    Ok(out)
}

/// Independent uniform points in `[0,1)^dim`.
pub fn mc_points(n: usize, dim: usize, seed: u64) -> Result<Vec<f64>> {
    check_dim(dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n * dim).map(|_| rng.gen::<f64>()).collect())
}

/// Sampled point families usable as equal-weight quadratures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampler {
    MonteCarlo { seed: u64 },
    LatinHypercube { seed: u64, placement: StratumPlacement },
    /// Skips the first `skip` points so disjoint sets can be drawn.
    Halton { skip: usize },
}

impl Sampler {
    pub fn unit_points(&self, n: usize, dim: usize) -> Result<Vec<f64>> {
        match *self {
            Sampler::MonteCarlo { seed } => mc_points(n, dim, seed),
            Sampler::LatinHypercube { seed, placement } => latin_hypercube(n.max(1), dim, seed, placement)
                .map(|mut v| {
                    v.truncate(n * dim);
                    v
                }),
            Sampler::Halton { skip } => halton_points_from(skip, n, dim),
        }
    }
}

/// Equal-weight quadrature of `n` sampled points over `domain`. Points are
/// shared among the domain boxes in proportion to their volume.
pub fn sampled_quadrature(sampler: Sampler, n: usize, domain: &[Cell]) -> Result<CompositeQuadrature> {
    let dim = domain_dim(domain)?;
    if n == 0 {
        return Err(Error::invalid("sampled quadrature needs at least one point"));
    }
    let counts = split_by_volume(n, domain);
    let mut q = CompositeQuadrature::empty(dim);
    let mut x = vec![0.0; dim];
    for (k, (cell, &m)) in domain.iter().zip(&counts).enumerate() {
        if m == 0 {
            continue;
        }
        let sub = match sampler {
            Sampler::MonteCarlo { seed } => Sampler::MonteCarlo {
                seed: seed.wrapping_add(k as u64),
            },
            Sampler::LatinHypercube { seed, placement } => Sampler::LatinHypercube {
                seed: seed.wrapping_add(k as u64),
                placement,
            },
            other => other,
        };
        let pts = sub.unit_points(m, dim)?;
        let w = cell.volume() / m as f64;
        for p in pts.chunks_exact(dim) {
            cell.map_into(p, &mut x);
            q.push(&x, w);
        }
    }
    Ok(q)
}

fn domain_dim(domain: &[Cell]) -> Result<usize> {
    let first = domain
        .first()
        .ok_or_else(|| Error::invalid("domain has no cells"))?;
    if domain.iter().any(|c| c.dim() != first.dim()) {
        return Err(Error::invalid("domain cells have mixed dimensions"));
    }
    Ok(first.dim())
}

/// Largest-remainder split of `n` over the boxes, proportional to volume.
fn split_by_volume(n: usize, domain: &[Cell]) -> Vec<usize> {
    let total: f64 = domain.iter().map(Cell::volume).sum();
    let exact: Vec<f64> = domain.iter().map(|c| n as f64 * c.volume() / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..domain.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

/// Composite Gauss–Legendre rule on `partitions_per_axis^d` equal sub-boxes of
/// every domain box.
pub fn uniform_composite(partitions_per_axis: usize, order: usize, domain: &[Cell]) -> Result<CompositeQuadrature> {
    let dim = domain_dim(domain)?;
    if partitions_per_axis == 0 {
        return Err(Error::invalid("partitions_per_axis must be >= 1"));
    }
    let rule = TensorRule::new(dim, order)?;
    let mut q = CompositeQuadrature::empty(dim);
    for cell in domain {
        for sub in cell.subdivide(partitions_per_axis) {
            q.push_cell(&rule, &sub);
        }
    }
    Ok(q)
}

/// Point and partition counts recorded over the refreshes of an adaptive run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveHistory {
    pub primal_points: Vec<usize>,
    pub reference_points: Vec<usize>,
    pub partitions: Vec<usize>,
}

impl AdaptiveHistory {
    pub fn push(&mut self, primal: usize, reference: usize, partitions: usize) {
        self.primal_points.push(primal);
        self.reference_points.push(reference);
        self.partitions.push(partitions);
    }
}

/// Fixed baseline budget derived from an adaptive history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointBudget {
    pub primal_points: usize,
    pub reference_points: usize,
    /// Total uniform cells, a perfect `d`-th power.
    pub uniform_partitions: usize,
    /// Cells per axis of the uniform partition.
    pub uniform_side: usize,
}

/// Nearest-rank 90% quantile: the `ceil(0.9 N)`-th order statistic.
pub fn quantile_90(history: &[usize]) -> Result<usize> {
    if history.is_empty() {
        return Err(Error::invalid("cannot take a quantile of an empty history"));
    }
    let mut sorted = history.to_vec();
    sorted.sort_unstable();
    let rank = (9 * sorted.len()).div_ceil(10).max(1);
    Ok(sorted[rank - 1])
}

/// Smallest `s` with `s^dim >= value`.
pub fn covering_side(value: usize, dim: usize) -> usize {
    let mut s = (value as f64).powf(1.0 / dim as f64).floor().max(1.0) as usize;
    while s.saturating_pow(dim as u32) < value {
        s += 1;
    }
    while s > 1 && (s - 1).saturating_pow(dim as u32) >= value {
        s -= 1;
    }
    s
}

/// Baseline budget: 90% quantiles of the point histories, and the smallest
/// `d`-th power covering the 90% quantile of partition counts.
pub fn match_budget(history: &AdaptiveHistory, dim: usize) -> Result<PointBudget> {
    let primal = quantile_90(&history.primal_points)?;
    let reference = quantile_90(&history.reference_points)?;
    let parts = quantile_90(&history.partitions)?;
    let side = covering_side(parts.max(1), dim);
    Ok(PointBudget {
        primal_points: primal.max(1),
        reference_points: reference.max(1),
        uniform_partitions: side.pow(dim as u32),
        uniform_side: side,
    })
}
