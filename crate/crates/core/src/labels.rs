//! Prediction-task cohorts: observation window plus gap hours.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{Mortality, StayStatic};
use crate::concepts::ConceptMaps;
use crate::error::{Error, Result};
use crate::ingest::{Source, StayKey, VitalEvent};
use crate::interventions::{InterventionInterval, ARF_INTERVENTIONS, PEEP_VARIABLE, VASOPRESSORS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Mortality48,
    Arf4,
    Arf12,
    Shock4,
    Shock12,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Mortality48, Task::Arf4, Task::Arf12, Task::Shock4, Task::Shock12];

    pub fn observation_hours(self) -> u32 {
        match self {
            Task::Mortality48 => 48,
            Task::Arf4 | Task::Shock4 => 4,
            Task::Arf12 | Task::Shock12 => 12,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Mortality48 => "mortality48",
            Task::Arf4 => "arf4",
            Task::Arf12 => "arf12",
            Task::Shock4 => "shock4",
            Task::Shock12 => "shock12",
        }
    }

    pub fn onset_condition(self) -> Option<OnsetCondition> {
        match self {
            Task::Mortality48 => None,
            Task::Arf4 | Task::Arf12 => Some(OnsetCondition::Arf),
            Task::Shock4 | Task::Shock12 => Some(OnsetCondition::Shock),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let folded: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == folded)
            .ok_or_else(|| Error::Invalid(format!("unknown task `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OnsetCondition {
    Arf,
    Shock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: Task,
    pub observation_hours: u32,
    /// Not applied to the mortality task.
    pub gap_hours: u32,
}

impl TaskSpec {
    pub fn new(task: Task, gap_hours: u32) -> Self {
        TaskSpec {
            task,
            observation_hours: task.observation_hours(),
            gap_hours,
        }
    }

    /// Bins of a task feature matrix.
    pub fn n_bins(&self, window_hours: u32) -> usize {
        self.observation_hours.div_ceil(window_hours) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskExclusion {
    LosTooShort,
    OnsetInsideWindowOrGap,
    OutcomeUnknown,
    PreexistingAtAdmission,
}

impl TaskExclusion {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskExclusion::LosTooShort => "LosTooShort",
            TaskExclusion::OnsetInsideWindowOrGap => "OnsetInsideWindowOrGap",
            TaskExclusion::OutcomeUnknown => "OutcomeUnknown",
            TaskExclusion::PreexistingAtAdmission => "PreexistingAtAdmission",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MortalityLabel {
    Positive,
    Negative,
    Unknown,
}

/// Hospital expiry for MIMIC-like sources, unit discharge status for
/// eICU-like ones.
pub fn mortality_label(source: Source, stat: &StayStatic) -> MortalityLabel {
    let m = match source {
        Source::MimicLike => stat.hospital_mortality,
        Source::EicuLike => stat.icu_mortality,
    };
    match m {
        Mortality::Yes => MortalityLabel::Positive,
        Mortality::No => MortalityLabel::Negative,
        Mortality::Unknown => MortalityLabel::Unknown,
    }
}

/// Earliest hour the condition holds: the minimum start over qualifying
/// resolved intervals and, for ARF, PEEP records with a positive value
/// inside the stay.
pub fn onset_time(
    intervals: &[InterventionInterval],
    vitals: &[VitalEvent],
    los_hours: f64,
    condition: OnsetCondition,
    maps: &ConceptMaps,
) -> Option<f64> {
    let positions = |ids: &[&str]| -> Vec<usize> { ids.iter().filter_map(|id| maps.variable(id)).map(|v| v.output_position).collect() };
    let (vars, peep) = match condition {
        OnsetCondition::Arf => (positions(ARF_INTERVENTIONS), maps.variable(PEEP_VARIABLE).map(|v| v.output_position)),
        OnsetCondition::Shock => (positions(VASOPRESSORS), None),
    };
    let from_intervals = intervals.iter().filter(|iv| vars.contains(&iv.var)).map(|iv| iv.start_h);
    let from_peep = vitals
        .iter()
        .filter(|e| Some(e.var) == peep && e.value > 0.0 && e.hour >= 0.0 && e.hour < los_hours)
        .map(|e| e.hour);
    from_intervals.chain(from_peep).min_by(f64::total_cmp)
}

/// Per-stay facts the task rules need.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskInput {
    pub key: StayKey,
    pub los_hours: f64,
    pub arf_onset: Option<f64>,
    pub shock_onset: Option<f64>,
    pub mortality: MortalityLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskCohort {
    pub spec: TaskSpec,
    pub members: Vec<(StayKey, bool)>,
    pub excluded: Vec<(StayKey, TaskExclusion)>,
}

impl TaskCohort {
    pub fn positives(&self) -> usize {
        self.members.iter().filter(|(_, y)| *y).count()
    }
}

/// Label one stay, or give the reason it is left out.
pub fn label_stay(spec: &TaskSpec, input: &TaskInput) -> std::result::Result<bool, TaskExclusion> {
    let obs = f64::from(spec.observation_hours);
    if input.los_hours < obs {
        return Err(TaskExclusion::LosTooShort);
    }
    let Some(condition) = spec.task.onset_condition() else {
        return match input.mortality {
            MortalityLabel::Positive => Ok(true),
            MortalityLabel::Negative => Ok(false),
            MortalityLabel::Unknown => Err(TaskExclusion::OutcomeUnknown),
        };
    };
    let onset = match condition {
        OnsetCondition::Arf => input.arf_onset,
        OnsetCondition::Shock => input.shock_onset,
    };
    match onset {
        Some(t) if t < input.los_hours => {
            if t <= 0.0 {
                Err(TaskExclusion::PreexistingAtAdmission)
            } else if t <= obs + f64::from(spec.gap_hours) {
                Err(TaskExclusion::OnsetInsideWindowOrGap)
            } else {
                Ok(true)
            }
        }
        _ => Ok(false),
    }
}

/// Apply the task rules to every cohort stay, keeping input order.
pub fn build_task_cohort(spec: TaskSpec, inputs: &[TaskInput], los_max_hours: f64) -> Result<TaskCohort> {
    if spec.observation_hours == 0 {
        return Err(Error::Invalid("observation window must be positive".into()));
    }
    if f64::from(spec.observation_hours) >= los_max_hours {
        return Err(Error::Invalid(format!(
            "task {} needs {} h of stay but the LOS ceiling is {los_max_hours} h",
            spec.task, spec.observation_hours
        )));
    }
    let outcomes: Vec<_> = inputs.par_iter().map(|i| label_stay(&spec, i)).collect();
    let mut cohort = TaskCohort {
        spec,
        members: Vec::new(),
        excluded: Vec::new(),
    };
    for (input, outcome) in inputs.iter().zip(outcomes) {
        match outcome {
            Ok(y) => cohort.members.push((input.key.clone(), y)),
            Err(r) => cohort.excluded.push((input.key.clone(), r)),
        }
    }
    Ok(cohort)
}
