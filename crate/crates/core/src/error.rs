use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("invalid seed parameters: {0}")]
    InvalidSeed(String),

    #[error("state component `{component}` is not finite")]
    NonFiniteState { component: &'static str },

    #[error("warping function f{index} = {value} is not positive")]
    Domain { index: usize, value: f64 },

    #[error("cannot convert to s-coordinates: -u' + tr L = {denominator} is not positive")]
    Conversion { denominator: f64 },

    #[error("seed time t0 = {t0} too large for requested error {requested:e}; try t0 <= {suggested:e}")]
    SeedTooCoarse { t0: f64, requested: f64, suggested: f64 },

    #[error("integrator configuration: {0}")]
    Config(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("shooting failed: {0}")]
    Shooting(String),
}

pub type Result<T> = std::result::Result<T, Error>;
