//! Residual problems: a linear differential operator, forcing, boundary data
//! with penalties, and optional exact solutions.
//!
//! The domain residual is `R(u) = L u - F` with
//! `L u = c0 u + beta . grad u - kappa lap u`, and each boundary face carries
//! the Dirichlet residual `u - g` weighted by its penalty.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::Cell;
use crate::nn::JetOrder;

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// Writes a vector-valued result (gradient or diagonal Hessian) into the slice.
pub type VectorFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdeKind {
    Fit,
    Poisson,
    AdvectionDiffusion,
}

/// `L u = value * u + advection . grad u - diffusion * lap u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearOperator {
    pub value: f64,
    pub advection: Vec<f64>,
    pub diffusion: f64,
}

impl LinearOperator {
    pub fn order(&self) -> JetOrder {
        if self.diffusion != 0.0 {
            JetOrder::Laplacian
        } else if self.advection.iter().any(|b| *b != 0.0) {
            JetOrder::Gradient
        } else {
            JetOrder::Value
        }
    }
}

/// A face `x_axis = coordinate` of a box domain.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryFace {
    pub axis: usize,
    pub coordinate: f64,
    /// The face as a box in the remaining `d - 1` coordinates; `None` when `d = 1`.
    pub extent: Option<Cell>,
    pub penalty: f64,
}

impl BoundaryFace {
    /// Lifts face-parameter points to physical points.
    pub fn embed(&self, param_points: &[f64]) -> Vec<f64> {
        let pd = self.extent.as_ref().map_or(0, Cell::dim);
        if pd == 0 {
            return vec![self.coordinate];
        }
        let mut out = Vec::with_capacity(param_points.len() / pd * (pd + 1));
        for p in param_points.chunks_exact(pd) {
            out.extend_from_slice(&p[..self.axis]);
            out.push(self.coordinate);
            out.extend_from_slice(&p[self.axis..]);
        }
        out
    }
}

/// The `2d` faces of `domain` with penalty `gamma`, ordered axis-major,
/// lower face first.
pub fn box_faces(domain: &Cell, gamma: f64) -> Vec<BoundaryFace> {
    let d = domain.dim();
    let upper = domain.upper();
    let mut faces = Vec::with_capacity(2 * d);
    for axis in 0..d {
        let extent = (d > 1).then(|| {
            let lo: Vec<f64> = (0..d).filter(|&j| j != axis).map(|j| domain.lower()[j]).collect();
            let w: Vec<f64> = (0..d).filter(|&j| j != axis).map(|j| domain.widths()[j]).collect();
            Cell::new(lo, w).expect("face of a valid box")
        });
        for coordinate in [domain.lower()[axis], upper[axis]] {
            faces.push(BoundaryFace {
                axis,
                coordinate,
                extent: extent.clone(),
                penalty: gamma,
            });
        }
    }
    faces
}

/// Exact solution with its gradient and pure second derivatives.
#[derive(Clone)]
pub struct ExactSolution {
    pub value: ScalarFn,
    pub gradient: VectorFn,
    pub second: Option<VectorFn>,
}

#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub domain: Cell,
    pub kind: PdeKind,
    pub operator: LinearOperator,
    pub forcing: ScalarFn,
    pub boundary_data: ScalarFn,
    pub faces: Vec<BoundaryFace>,
    pub exact: Option<ExactSolution>,
    pub epsilon: Option<f64>,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("domain", &self.domain)
            .field("kind", &self.kind)
            .field("operator", &self.operator)
            .field("faces", &self.faces.len())
            .field("epsilon", &self.epsilon)
            .finish()
    }
}

pub const DEFAULT_PENALTY: f64 = 10.0;

pub const PROBLEM_NAMES: [&str; 3] = ["arctan-well", "advection-diffusion-1d", "arc-wavefront-poisson"];

impl ProblemSpec {
    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.operator.advection.len() != self.dim() {
            return Err(Error::invalid("advection vector does not match the domain dimension"));
        }
        if let Some(f) = self.faces.iter().find(|f| !(f.penalty > 0.0)) {
            return Err(Error::invalid(format!("penalty must be positive, got {}", f.penalty)));
        }
        Ok(())
    }

    /// The same problem posed on another box; faces are rebuilt with the
    /// penalty of the first face.
    pub fn with_domain(mut self, domain: Cell) -> Result<Self> {
        if domain.dim() != self.dim() {
            return Err(Error::invalid(format!(
                "domain of dimension {} for a {}-dimensional problem",
                domain.dim(),
                self.dim()
            )));
        }
        if let Some(gamma) = self.faces.first().map(|f| f.penalty) {
            self.faces = box_faces(&domain, gamma);
        }
        self.domain = domain;
        Ok(self)
    }

    /// Built-in problem by name. `epsilon` applies to advection–diffusion and
    /// `gamma` to problems with boundary terms.
    pub fn by_name(name: &str, epsilon: Option<f64>, gamma: Option<f64>) -> Result<Self> {
        let gamma = gamma.unwrap_or(DEFAULT_PENALTY);
        let p = match name {
            "arctan-well" => arctan_well(),
            "advection-diffusion-1d" => advection_diffusion_1d(epsilon.unwrap_or(0.005), gamma)?,
            "arc-wavefront-poisson" => arc_wavefront_poisson(gamma)?,
            other => {
                return Err(Error::invalid(format!(
                    "unknown problem '{other}' (expected one of {PROBLEM_NAMES:?})"
                )))
            }
        };
        p.validate()?;
        Ok(p)
    }
}

/// `atan(a (|x - c| - r0))` and its derivatives in radial form.
#[derive(Debug, Clone, Copy)]
struct RadialArctan {
    centre: [f64; 2],
    sharpness: f64,
    radius: f64,
}

impl RadialArctan {
    fn s(&self, x: &[f64]) -> (f64, f64, f64, f64) {
        let dx = x[0] - self.centre[0];
        let dy = x[1] - self.centre[1];
        let r = dx.hypot(dy);
        (dx, dy, r, self.sharpness * (r - self.radius))
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.s(x).3.atan()
    }

    fn gradient(&self, x: &[f64], g: &mut [f64]) {
        let (dx, dy, r, s) = self.s(x);
        let ur = self.sharpness / (1.0 + s * s);
        if r == 0.0 {
            // Cone tip: take the zero subgradient.
            g[0] = 0.0;
            g[1] = 0.0;
            return;
        }
        g[0] = ur * dx / r;
        g[1] = ur * dy / r;
    }

    /// `u_rr + u_r / r`.
    fn laplacian(&self, x: &[f64]) -> f64 {
        let (_, _, r, s) = self.s(x);
        let a = self.sharpness;
        let den = 1.0 + s * s;
        let ur = a / den;
        let urr = -2.0 * a * a * s / (den * den);
        urr + ur / r
    }

    /// `u_xx`, `u_yy` from `u_i = g(r) x_i`, `g = a / (r (1 + s^2))`.
    fn second(&self, x: &[f64], out: &mut [f64]) {
        let (dx, dy, r, s) = self.s(x);
        let a = self.sharpness;
        let den = 1.0 + s * s;
        let g = a / (r * den);
        let dg = -a * (den + 2.0 * a * r * s) / (r * den).powi(2);
        out[0] = g + dx * dx * dg / r;
        out[1] = g + dy * dy * dg / r;
    }
}

const FA_WELL: RadialArctan = RadialArctan {
    centre: [0.35, 0.45],
    sharpness: 200.0,
    radius: 0.2,
};

const ARC_FRONT: RadialArctan = RadialArctan {
    centre: [-0.05, -0.05],
    sharpness: 100.0,
    radius: 0.7,
};

/// L2 fit of `atan(200 (|x - (0.35, 0.45)| - 0.2))` on the unit square.
pub fn arctan_well() -> ProblemSpec {
    let w = FA_WELL;
    ProblemSpec {
        name: "arctan-well".into(),
        domain: Cell::unit(2),
        kind: PdeKind::Fit,
        operator: LinearOperator {
            value: 1.0,
            advection: vec![0.0, 0.0],
            diffusion: 0.0,
        },
        forcing: Arc::new(move |x| w.value(x)),
        boundary_data: Arc::new(|_| 0.0),
        faces: Vec::new(),
        exact: Some(ExactSolution {
            value: Arc::new(move |x| w.value(x)),
            gradient: Arc::new(move |x, g| w.gradient(x, g)),
            second: Some(Arc::new(move |x, s| w.second(x, s))),
        }),
        epsilon: None,
    }
}

/// Target of the arctan-well fit.
pub fn arctan_well_target(x: &[f64]) -> f64 {
    FA_WELL.value(x)
}

/// Closed-form solution of `-eps u'' + u' = 1` on `(-1, 1)`, `u(-1) = u(1) = 0`.
pub fn advection_diffusion_exact(eps: f64, x: f64) -> f64 {
    2.0 * (1.0 - ((x - 1.0) / eps).exp()) / (1.0 - (-2.0 / eps).exp()) + x - 1.0
}

pub fn advection_diffusion_exact_derivative(eps: f64, x: f64) -> f64 {
    -2.0 * ((x - 1.0) / eps).exp() / (eps * (1.0 - (-2.0 / eps).exp())) + 1.0
}

pub fn advection_diffusion_exact_second(eps: f64, x: f64) -> f64 {
    -2.0 * ((x - 1.0) / eps).exp() / (eps * eps * (1.0 - (-2.0 / eps).exp()))
}

/// `-eps u'' + u' = 1` on `(-1, 1)` with homogeneous Dirichlet penalties.
pub fn advection_diffusion_1d(eps: f64, gamma: f64) -> Result<ProblemSpec> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("epsilon must be positive, got {eps}")));
    }
    let domain = Cell::new(vec![-1.0], vec![2.0])?;
    Ok(ProblemSpec {
        name: "advection-diffusion-1d".into(),
        faces: box_faces(&domain, gamma),
        domain,
        kind: PdeKind::AdvectionDiffusion,
        operator: LinearOperator {
            value: 0.0,
            advection: vec![1.0],
            diffusion: eps,
        },
        forcing: Arc::new(|_| 1.0),
        boundary_data: Arc::new(|_| 0.0),
        exact: Some(ExactSolution {
            value: Arc::new(move |x| advection_diffusion_exact(eps, x[0])),
            gradient: Arc::new(move |x, g| g[0] = advection_diffusion_exact_derivative(eps, x[0])),
            second: Some(Arc::new(move |x, s| s[0] = advection_diffusion_exact_second(eps, x[0]))),
        }),
        epsilon: Some(eps),
    })
}

/// `-lap u = f` on the unit square with the manufactured solution
/// `atan(100 (|x + (0.05, 0.05)| - 0.7))` and Dirichlet penalties.
pub fn arc_wavefront_poisson(gamma: f64) -> Result<ProblemSpec> {
    let a = ARC_FRONT;
    let domain = Cell::unit(2);
    Ok(ProblemSpec {
        name: "arc-wavefront-poisson".into(),
        faces: box_faces(&domain, gamma),
        domain,
        kind: PdeKind::Poisson,
        operator: LinearOperator {
            value: 0.0,
            advection: vec![0.0, 0.0],
            diffusion: 1.0,
        },
        forcing: Arc::new(move |x| -a.laplacian(x)),
        boundary_data: Arc::new(move |x| a.value(x)),
        exact: Some(ExactSolution {
            value: Arc::new(move |x| a.value(x)),
            gradient: Arc::new(move |x, g| a.gradient(x, g)),
            second: Some(Arc::new(move |x, s| a.second(x, s))),
        }),
        epsilon: None,
    })
}
