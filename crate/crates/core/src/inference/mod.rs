//! Variational EM for the latent block model with a logistic mask model.

pub mod criterion;
pub mod delta;
pub mod lbfgs;
pub mod spectral;
pub mod state;
pub mod vem;

pub use criterion::{elbo, entropy};
pub use delta::{delta_expectation, DeltaKind};
pub use spectral::{init_from_labels, init_spectral, init_with, InitKind};
pub use state::{GaussianFactor, Membership, VariationalState};
pub use vem::{fit, fit_from, m_step, multi_start_fit, ve_step, FitConfig, FitResult, OptimizerConfig, StepOutcome};
