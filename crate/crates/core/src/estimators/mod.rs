//! Downstream estimators that consume synthetic data.

pub mod bfr;
pub mod gp;
pub mod icls;
pub mod mnl;
pub mod plm;
