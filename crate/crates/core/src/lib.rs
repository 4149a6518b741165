//! Return-seeking portfolio learning with exact risk targeting.
//!
//! The pipeline: aligned OHLCV panels ([`market_data`]) feed technical
//! indicators ([`indicators`]) and rolling covariances ([`covariance`]) into a
//! spatio-temporal scorer ([`model`]) trained on portfolio and auxiliary losses
//! ([`objectives`]). Any resulting portfolio stream can then be moved to a
//! requested variance by interpolation toward the minimum-variance portfolio
//! and refined by gradient steps on its logits ([`risk_control`]), and
//! evaluated with [`backtest`].

pub mod autodiff;
pub mod backtest;
pub mod covariance;
pub mod dataset;
pub mod error;
pub mod indicators;
pub mod market_data;
pub mod model;
pub mod objectives;
pub mod risk_control;
pub mod simplex;
pub mod synthetic;

pub use error::{Error, ErrorKind, Result};
