//! Importance-sampling robust losses and their certification harness.
//!
//! The library is organized around one idea: minimizing the worst-case
//! empirical risk over a KL ball of reweightings has a closed-form inner
//! maximum, and the resulting effective losses (ISloss and LogISloss) are
//! temperature-scaled log-sum-exp aggregates of the per-sample losses.
//!
//! - [`loss`] — the closed-form weights, the two aggregators, the empirical
//!   KL, and their analytic gradients, all log-space stabilized.
//! - [`oracle`] — brute-force and projected-ascent solvers for the inner
//!   maximization, plus the KL-budget → temperature bisection, used to
//!   certify the closed form on small instances.
//! - [`margin`] — additive-angular and additive-cosine margin-softmax heads
//!   on normalized embeddings, with hand-derived backward passes for the
//!   mean and LogISloss aggregates.
//! - [`train`] — a deterministic desk-scale SGD trainer with per-epoch
//!   instrumentation of the importance-sampling weights.
//! - [`bench`] — a synthetic distribution-shift benchmark with the pair
//!   verification protocol: 10-fold threshold cross-validation, TAR@FAR,
//!   and hard-pair ranking.

pub mod bench;
pub mod dataset;
pub mod loss;
pub mod margin;
pub mod matrix;
pub mod oracle;
pub mod train;

pub use dataset::Dataset;
pub use loss::{
    empirical_kl, is_loss, is_loss_grad, is_weights, log_is_loss, log_is_loss_grad,
    log_is_weights, LossError, LossVector, Temperature, WeightVector,
};
pub use margin::{
    add_loss_per_sample, arc_loss_per_sample, head_backward, is_aggregate, Aggregate,
    ClassWeights, EmbeddingBatch, MarginConfig, MarginKind,
};
pub use matrix::Matrix;
pub use oracle::{
    closed_form_solution, solve_inner_max_ascent, solve_inner_max_grid, temperature_for_budget,
    BudgetRegime, KlBudget, OracleSolution,
};
pub use train::{train, ModelParams, TrainConfig};
