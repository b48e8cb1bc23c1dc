//! Nonlocality of attention maps, attention rollout, representation
//! spectra and the CSV/JSON/PGM writers for them.

mod nonlocality;
mod report;
mod rollout;
mod spectrum;

pub use nonlocality::{
    distance_matrix, nonlocality, nonlocality_gap, nonlocality_mean, GapEntry, GapSeries, NonlocalityReport, Procedure,
};
pub use report::{nonlocality_csv, pgm_bytes, write_json, write_nonlocality_csv, write_pgm, CSV_HEADER};
pub use rollout::{attention_rollout, RolloutMap, RolloutOptions};
pub use spectrum::{covariance, covariance_spectrum, symmetric_eigenvalues, SpectrumReport, DEFAULT_TOP};
