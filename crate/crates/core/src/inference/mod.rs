//! Variational inference: ELBO estimation, closed-form output factors and training.

mod adam;
mod closed_form;
mod data;
mod elbo;
mod energy;
#[cfg(test)]
mod fixture;
mod gaussian;
mod state;
mod train;

pub use adam::{Adam, AdamConfig};
pub use closed_form::{update_precision_gamma, update_qy_closedform, ConstrainedGaussian, DEFAULT_CONSTRAINT_CAP};
pub use data::{Datasets, LabeledDatum, PreparedVirtual, ReducedGroup, UnlabeledDatum, VirtualDatum, VirtualObservation};
pub use elbo::{datum_rng, estimate, prior_logpdf_theta, virtual_output_terms, ElboGradient, ElboParts, Objective, Selection};
pub use energy::{block_newton, update_qy_energy, BlockNewtonResult, DiagonalQ, DEFAULT_BLOCK};
pub use gaussian::{entropy, entropy_var, kl_std_normal, neg_kl_std_normal_grad};
pub use state::{LocalLayout, OutputFactor, OutputFactorKind, UnlabeledFactors, VariationalState};
pub use train::{
    coarse_average, default_unlabeled_weight, encoder_architecture, init_state, plateaued, precision_kl, tau_at, train,
    update_output_factors, update_precisions, LogEntry, LogParts, StopReason, TrainConfig, TrainOutcome,
};
