//! Language-model task planning that reasons about its own uncertainty and
//! asks for help when the calibrated prediction set is ambiguous.
//!
//! A knowledge base of post-hoc rationales is built from training tasks;
//! at deployment the most similar entries are retrieved as exemplars, the
//! model proposes candidate plans, and split conformal prediction decides
//! whether to act or ask for help.

pub mod backends;
pub mod conformal;
pub mod domain;
pub mod error;
pub mod exec;
pub mod harness;
pub mod knowledge;
pub mod metrics;
pub mod planner;
pub mod prompting;

pub use error::{Error, Result};
