//! Nonlinear anchor regression with spline bases.

pub mod cli;
pub mod config;
pub mod data;
pub mod estimator;
pub mod experiments;
pub mod ivtests;
pub mod penreg;
pub mod scm;
pub mod splines;
pub mod theory;
