//! Weighted nonlinear least squares and the decay-model fit drivers.

mod drivers;
mod lm;
mod models;
mod normalize;

pub use drivers::{
    fit_single_exp, fit_stretched_exp, fit_two_state, fit_two_state_fixed_rate, fit_two_state_with, EtaSpec,
    ModelKind, AMPLITUDE_MARGIN,
};
pub use lm::{lm_minimize, FitResult, FittedParam, FloorLink, JacobianMode, LmOptions, ParamSpec, Termination};
pub use models::{central_difference, DecayModel, NumericGradient, SingleExp, StretchedExp, TwoState};
pub use normalize::normalize_curve;
