//! Return / order-flow structural VAR toolkit.
//!
//! The crate covers the whole estimation chain for a bivariate system of
//! one-second mid-quote returns `r_t` and order flow imbalances `f_t`:
//!
//! * [`market_data`]: best-bid-offer events to one-second bars,
//! * [`var`]: reduced-form VAR with AIC lag selection,
//! * [`ith`]: structural identification through heteroskedasticity (GMM),
//! * [`dynamics`]: impulse responses and long-run impacts,
//! * [`sim`]: ground-truth generators for all of the above,
//! * [`panel`]: the intraday window protocol, pooling, and clustered regressions.

pub mod dynamics;
pub mod error;
pub mod ith;
pub mod linalg;
pub mod market_data;
pub mod optimize;
pub mod panel;
pub mod sim;
pub mod stats;
pub mod var;

pub use error::{Error, Result};
