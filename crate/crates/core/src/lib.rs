//! Instrumental-variables estimation with many instruments and many
//! controls.
//!
//! The main estimator, [`two_step::tsrr`], splits the sample: a ridge first stage
//! on one part produces a fitted instrument for the other, where the effect
//! is estimated after ridge-partialling the controls. [`rjive::rjive`] is the
//! jackknife comparator. [`dgp`] and [`mc`] reproduce the simulation designs
//! and their summary tables.

pub mod data;
pub mod dgp;
pub mod error;
pub mod inference;
pub mod io;
pub mod mc;
pub mod ridge;
pub mod rjive;
pub mod rng;
pub mod two_step;

pub use data::{build_instrument_block, load_dataset_csv, split_indices, CsvSchema, Dataset, InstrumentBlock, SplitIndex};
pub use dgp::{generate, CoefDraw, CorrKind, SimConfig};
pub use error::{Error, Result};
pub use mc::{run_panel, run_replication, summarize, McSummary, PanelResult, RepRecord};
pub use ridge::RidgeSpec;
pub use rjive::{rjive, RjiveConfig};
pub use two_step::{tsrr, EstimateResult, Estimator, PenaltyPlan};
