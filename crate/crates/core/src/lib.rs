//! Harmonized extraction of ICU time series from two EHR export families,
//! with a linear baseline and cross-source evaluation.

pub mod cohort;
pub mod concepts;
pub mod error;
pub mod ingest;
pub mod interventions;
pub mod labels;
pub mod model;
pub mod seed;
pub mod pipeline;
pub mod synth;
pub mod timeseries;

pub use cohort::{CohortCriteria, CohortResult, Condition, ExclusionReason, Mortality, StayStatic};
pub use concepts::{CanonicalVariable, ConceptMaps, VariableKind};
pub use error::{Error, Result};
pub use ingest::{Source, StayKey};
pub use interventions::InterventionGrid;
pub use labels::{Task, TaskCohort, TaskExclusion, TaskSpec};
pub use model::{EvalReport, LinearModel, SplitPlan};
pub use pipeline::{run_pipeline, ExitPoint, PipelineConfig, RunManifest};
pub use synth::{OracleExpectations, PlantSpec};
pub use timeseries::{HourlyCell, Normalizer, VitalGrid};
