//! Long-format repeated item responses with individual measurement times.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemDef {
    pub item_id: String,
    pub n_levels: usize,
    /// Raw responses are stored as `n_levels - 1 - raw` at ingestion.
    #[serde(default)]
    pub reversed: bool,
}

impl ItemDef {
    pub fn new(item_id: impl Into<String>, n_levels: usize) -> Self {
        ItemDef {
            item_id: item_id.into(),
            n_levels,
            reversed: false,
        }
    }

    pub fn reversed(mut self, reversed: bool) -> Self {
        self.reversed = reversed;
        self
    }

    /// Maps a raw response onto the modelling scale. Applying it twice returns
    /// the raw value.
    pub fn recode(&self, level: usize) -> usize {
        if self.reversed {
            reverse_level(self.n_levels, level)
        } else {
            level
        }
    }
}

#[inline]
pub fn reverse_level(n_levels: usize, level: usize) -> usize {
    n_levels - 1 - level
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub subject_id: String,
    pub item_id: String,
    pub time: f64,
    pub response: usize,
    /// Time-dependent covariates, aligned with [`LongDataset::row_covariate_names`].
    #[serde(default)]
    pub covariates: Vec<f64>,
}

impl Observation {
    pub fn new(subject_id: impl Into<String>, item_id: impl Into<String>, time: f64, response: usize) -> Self {
        Observation {
            subject_id: subject_id.into(),
            item_id: item_id.into(),
            time,
            response,
            covariates: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongDataset {
    items: Vec<ItemDef>,
    observations: Vec<Observation>,
    row_covariate_names: Vec<String>,
    subject_covariate_names: Vec<String>,
    subject_covariates: BTreeMap<String, Vec<f64>>,
}

impl LongDataset {
    /// Builds a dataset whose responses are already on the modelling scale.
    pub fn new(items: Vec<ItemDef>, observations: Vec<Observation>) -> Result<Self> {
        Self::with_covariates(items, observations, Vec::new(), Vec::new(), BTreeMap::new())
    }

    pub fn with_covariates(
        items: Vec<ItemDef>,
        observations: Vec<Observation>,
        row_covariate_names: Vec<String>,
        subject_covariate_names: Vec<String>,
        subject_covariates: BTreeMap<String, Vec<f64>>,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for item in &items {
            if item.n_levels < 2 {
                return Err(Error::Invalid(format!(
                    "item {} must have at least 2 levels",
                    item.item_id
                )));
            }
            if !seen.insert(item.item_id.as_str()) {
                return Err(Error::Invalid(format!("duplicate item id {}", item.item_id)));
            }
        }
        for (row, obs) in observations.iter().enumerate() {
            let item = items
                .iter()
                .find(|it| it.item_id == obs.item_id)
                .ok_or_else(|| Error::Invalid(format!("row {row}: unknown item {}", obs.item_id)))?;
            if obs.response >= item.n_levels {
                return Err(Error::LevelOutOfRange {
                    item: item.item_id.clone(),
                    level: obs.response,
                    n_levels: item.n_levels,
                });
            }
            if obs.covariates.len() != row_covariate_names.len() {
                return Err(Error::Invalid(format!(
                    "row {row}: {} row covariates, expected {}",
                    obs.covariates.len(),
                    row_covariate_names.len()
                )));
            }
        }
        for (subject, values) in &subject_covariates {
            if values.len() != subject_covariate_names.len() {
                return Err(Error::Invalid(format!(
                    "subject {subject}: {} covariates, expected {}",
                    values.len(),
                    subject_covariate_names.len()
                )));
            }
        }
        Ok(LongDataset {
            items,
            observations,
            row_covariate_names,
            subject_covariate_names,
            subject_covariates,
        })
    }

    pub fn items(&self) -> &[ItemDef] {
        &self.items
    }

    pub fn item(&self, item_id: &str) -> Option<&ItemDef> {
        self.items.iter().find(|it| it.item_id == item_id)
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn row_covariate_names(&self) -> &[String] {
        &self.row_covariate_names
    }

    pub fn subject_covariate_names(&self) -> &[String] {
        &self.subject_covariate_names
    }

    pub fn subject_covariate_table(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.subject_covariates
    }

    /// Subjects with at least one observation, in sorted order.
    pub fn subject_ids(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self.observations.iter().map(|o| o.subject_id.as_str()).collect();
        set.into_iter().collect()
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_ids().len()
    }

    /// Number of observations of `item_id` for `subject_id` (`n_ik`).
    pub fn n_obs(&self, subject_id: &str, item_id: &str) -> usize {
        self.observations
            .iter()
            .filter(|o| o.subject_id == subject_id && o.item_id == item_id)
            .count()
    }

    /// All `n_ik` counts keyed by `(subject, item)`.
    pub fn counts(&self) -> BTreeMap<(String, String), usize> {
        let mut out = BTreeMap::new();
        for o in &self.observations {
            *out.entry((o.subject_id.clone(), o.item_id.clone())).or_insert(0) += 1;
        }
        out
    }

    /// Subject-level covariate value; `None` when absent or NaN.
    pub fn subject_covariate(&self, subject_id: &str, name: &str) -> Option<f64> {
        let idx = self.subject_covariate_names.iter().position(|n| n == name)?;
        let v = *self.subject_covariates.get(subject_id)?.get(idx)?;
        (!v.is_nan()).then_some(v)
    }

    /// Resolves a covariate for one observation: row-level first, then subject-level.
    pub fn covariate_for(&self, obs: &Observation, name: &str) -> Option<f64> {
        if let Some(idx) = self.row_covariate_names.iter().position(|n| n == name) {
            let v = obs.covariates[idx];
            return (!v.is_nan()).then_some(v);
        }
        self.subject_covariate(&obs.subject_id, name)
    }

    /// Observations of one subject, in input order.
    pub fn subject_observations<'a>(&'a self, subject_id: &'a str) -> impl Iterator<Item = &'a Observation> + 'a {
        self.observations.iter().filter(move |o| o.subject_id == subject_id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Finding {
    SubjectWithoutObservations { subject: String },
    ItemNeverObserved { item: String },
    NonFiniteTime { row: usize },
    MissingCovariate { subject: String, covariate: String },
    MissingRowCovariate { row: usize, covariate: String },
}

impl Finding {
    pub fn severity(&self) -> Severity {
        match self {
            Finding::NonFiniteTime { .. } => Severity::Error,
            _ => Severity::Warning,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn has_errors(&self) -> bool {
        self.findings.iter().any(|f| f.severity() == Severity::Error)
    }
}

/// Consistency report; never fails, the caller decides what is fatal.
pub fn validate(ds: &LongDataset) -> ValidationReport {
    let mut findings = Vec::new();
    let observed: BTreeSet<&str> = ds.observations.iter().map(|o| o.subject_id.as_str()).collect();
    for subject in ds.subject_covariates.keys() {
        if !observed.contains(subject.as_str()) {
            findings.push(Finding::SubjectWithoutObservations {
                subject: subject.clone(),
            });
        }
    }
    let items_seen: BTreeSet<&str> = ds.observations.iter().map(|o| o.item_id.as_str()).collect();
    for item in &ds.items {
        if !items_seen.contains(item.item_id.as_str()) {
            findings.push(Finding::ItemNeverObserved {
                item: item.item_id.clone(),
            });
        }
    }
    for (row, obs) in ds.observations.iter().enumerate() {
        if !obs.time.is_finite() {
            findings.push(Finding::NonFiniteTime { row });
        }
        for (name, v) in ds.row_covariate_names.iter().zip(&obs.covariates) {
            if v.is_nan() {
                findings.push(Finding::MissingRowCovariate {
                    row,
                    covariate: name.clone(),
                });
            }
        }
    }
    for subject in &observed {
        for name in &ds.subject_covariate_names {
            if ds.subject_covariate(subject, name).is_none() {
                findings.push(Finding::MissingCovariate {
                    subject: String::from(*subject),
                    covariate: name.clone(),
                });
            }
        }
    }
    ValidationReport { findings }
}
