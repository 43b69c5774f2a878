//! Co-clustering of partially observed binary matrices with a latent block
//! model whose missingness may depend on the unobserved values.
//!
//! The crate covers simulation from the generative model, variational EM
//! inference, ICL model selection and the evaluation metrics used to compare
//! fitted partitions against ground truth.

pub mod error;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod selection;
pub mod simulator;

pub use error::{LbmError, Result};
pub use inference::{
    delta_expectation, elbo, entropy, fit, fit_from, init_spectral, m_step, multi_start_fit,
    ve_step, DeltaKind, FitConfig, FitResult, GaussianFactor, InitKind, Membership,
    OptimizerConfig, VariationalState,
};
pub use metrics::{align_labels, l_item, latent_mse, map_assignments, param_max_error, LabelAssignment};
pub use model::{
    cell_probs, complete_loglik, logistic, Cell, CellProbs, CompleteSample, LatentBlock,
    MissingnessKind, ModelParams, ObservedMatrix,
};
pub use selection::{icl, icl_mar, icl_mcar, icl_nmar, select_model, IclBound, Selection, SelectionEntry};
pub use simulator::{
    calibrate_epsilon, conditional_bayes_risk, make_benchmark_params, sample_lbm, BenchmarkConfig,
    CalibrationConfig, GibbsSettings, MnarParams, RiskConfig, RiskEstimate, RiskEstimator, RiskInit, RiskMethod,
};
