//! Likelihood-free A-optimal Bayesian design of experiments.
//!
//! The total expected conditional variance (tECV) of a design `d`,
//! `V(d) = Σ_i E[Var[Q_i | Y_d]]`, equals the mean squared error of the
//! conditional expectation `E[Q | Y_d]`. Because the conditional expectation is
//! the L2-orthogonal projection of `Q` onto functions of `Y_d`, it can be
//! approximated by ordinary regression on simulated `(q, y)` pairs, so the
//! posterior never has to be sampled or evaluated.
//!
//! Crate layout:
//!
//! * [`prob`]: random variables, reproducible RNG streams, log-space helpers.
//! * [`forward`]: observational maps `y = h(q, d) + ξ` with design Jacobians and
//!   evaluation counting.
//! * [`fem`]: 2D complete-electrode-model finite elements for the EIT benchmark.
//! * [`regress`]: linear and neural-network conditional-expectation regressors.
//! * [`estimators`]: projection-based and importance-sampling tECV estimators.
//! * [`doe`]: stochastic gradient design optimization with nonlocal regressors.
//! * [`surrogate`]: neural surrogate of the EIT observational map.

pub mod doe;
pub mod error;
pub mod estimators;
pub mod fem;
pub mod forward;
pub mod prob;
pub mod regress;
pub mod surrogate;

pub use error::{Error, Result};
