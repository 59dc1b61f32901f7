//! Multistate event-history analysis.
//!
//! The crate covers the usual toolkit for multistate survival data:
//!
//! * [`data`]: state spaces, counting-process and panel datasets, validation
//!   and ingestion recipes for the public example datasets.
//! * [`nonparam`]: Nelson-Aalen and Aalen-Johansen estimators, state
//!   occupancy, cumulative incidence, restricted mean sojourn and bootstrap
//!   bands.
//! * [`coxreg`]: per-transition Cox regression with Breslow baselines and
//!   covariate-specific transition probabilities.
//! * [`panel`]: piecewise-constant Markov models for intermittently observed
//!   states.
//! * [`pseudo`]: jackknife pseudo-values, GEE and IPCW direct binomial
//!   regression.
//! * [`frailty`]: the gamma-frailty illness-death model.
//! * [`sim`]: a simulator used as the test oracle throughout.
//!
//! ```
//! use multistate::data::{EndMark, EpisodeDataset, EpisodeRecord, StateSpace};
//! use multistate::nonparam::aalen_johansen;
//!
//! let rec = |id: &str, stop: f64, end| EpisodeRecord {
//!     subject: id.into(),
//!     tstart: 0.0,
//!     tstop: stop,
//!     from: 0,
//!     end,
//!     covariates: vec![],
//! };
//! let data = EpisodeDataset::new(
//!     StateSpace::two_state(),
//!     vec![],
//!     vec![rec("a", 1.0, EndMark::Transition(1)), rec("b", 2.0, EndMark::Censored)],
//! )?;
//! let path = aalen_johansen(&data, 0.0, &[0.5, 1.5])?;
//! assert_eq!(path.matrices[1][(0, 0)], 0.5);
//! # Ok::<(), multistate::Error>(())
//! ```

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coxreg;
pub mod data;
mod error;
pub mod expm;
pub mod frailty;
mod linalg;
pub mod nonparam;
pub mod optim;
pub mod panel;
pub mod pseudo;
pub mod sim;

pub use error::{Error, Result};
