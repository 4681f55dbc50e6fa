//! Model assembly, training, evaluation and reporting for group-specialized
//! mixture-of-experts CNNs, plus the pieces behind the `fairmoe` CLI.

pub mod ablate;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod model;
pub mod optim;
pub mod route_report;
pub mod train;

pub use error::{Error, Result};
