//! Closed-loop electrolyte conductivity optimization against a simulated
//! robotic instrument.

pub mod analytics;
pub mod campaign;
pub mod composition;
pub mod exec;
pub mod nnls;
pub mod planner;
pub mod protocol;
pub mod virtual_lab;
