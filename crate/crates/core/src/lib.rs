//! Anisotropic h-adaptive composite quadrature and residual-minimisation
//! training of small tanh networks.

pub mod compare;
pub mod cubature;
pub mod error;
pub mod geometry;
pub mod integrand;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod oracles;
pub mod par;
pub mod problems;
pub mod quadrature;
pub mod rules;
pub mod sampling;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::Cell;
pub use integrand::{FnIntegrand, Integrand};
pub use quadrature::{CompositeQuadrature, QuadraturePair};
pub use rules::{RulePair, TensorRule};
