//! Longitudinal clinical-trial analysis with continuous-time mean structures.
//!
//! The crate fits constrained longitudinal data analysis (cLDA) models with
//! four temporal mean structures (categorical time, linear time, natural cubic
//! splines, proportional treatment effect) and six within-subject covariance
//! structures by maximum likelihood, provides marginal-mean contrasts with
//! Satterthwaite degrees of freedom and cluster-robust standard errors, and
//! ships a fully parameterized trial simulator plus a Monte Carlo power /
//! Type-I-error harness.

pub mod cov;
pub mod data;
pub mod error;
pub mod fit;
pub mod harness;
pub mod infer;
pub mod mean;
pub mod ncs;
pub mod optim;
pub mod padsim;

pub use data::{load_csv, write_csv, CsvSchema, Observation, SubjectRows, TrialData, Version};
pub use error::{Error, Result};
pub use ncs::{BasisSpec, SplineBasis};
