//! Finite-space laboratory for confidence prediction under IID and exchangeability.
//!
//! Every p-variable and e-variable lives as a dense [`FnTable`] over `Z^(n+1)` for a
//! small finite observation space `Z = X × Y`. The [`oracle`] module decides class
//! membership exactly (exchangeability) or by certified numerical search (IID), and
//! the remaining modules build conformal predictors, calibrators and the reductions
//! between IID and conformal prediction on top of those tables.

pub mod calibration;
pub mod cli;
pub mod conformal;
pub mod error;
pub mod gaps;
pub mod instances;
pub mod oracle;
pub mod space;
pub mod table;
pub mod universality;

pub use error::{LabError, Result};
pub use oracle::{CheckReport, ClassLabel, Tolerances, Witness};
pub use space::{bag_of, Bag, DataSequence, Distribution, Observation, ObservationSpace, DEFAULT_BUDGET};
pub use table::{iid_expectation, orbit_mean, BagPolynomial, FnTable};
