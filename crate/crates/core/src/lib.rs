//! Desk-scale workbench for locality-preserved attention in class-incremental
//! vision transformers.

pub mod attention;
pub mod cil;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod seeding;
pub mod tensor;

pub use error::{Error, Result};
