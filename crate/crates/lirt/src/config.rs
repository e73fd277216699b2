//! Run configuration: one JSON document drives every command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lirt_core::inference::{InvarianceMode, TestKind};
use lirt_core::simulate::SimDesign;
use lirt_core::{FitOptions, ModelSpec};
use serde::{Deserialize, Serialize};

use crate::csv_io::ColumnMapping;
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predict: Option<PredictConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curves: Option<CurveConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invariance: Option<InvarianceConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    /// Relative paths are resolved against the configuration file.
    pub path: PathBuf,
    #[serde(default)]
    pub columns: ColumnMapping,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulationPreset {
    /// Seven four-level items, two groups, spline trajectory.
    PredialaLike,
}

/// Either a named preset (with subject count and seed) or a full design.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<SimulationPreset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_subjects: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design: Option<SimDesign>,
}

impl SimulateConfig {
    pub fn resolve(&self) -> CliResult<SimDesign> {
        match (&self.preset, &self.design) {
            (Some(SimulationPreset::PredialaLike), None) => {
                let mut design = lirt_core::simulate::prediala_design(self.n_subjects.unwrap_or(300), 0);
                design.seed = self.seed.unwrap_or(1);
                Ok(design)
            }
            (None, Some(design)) => {
                let mut design = design.clone();
                if let Some(n) = self.n_subjects {
                    design.n_subjects = n;
                }
                if let Some(seed) = self.seed {
                    design.seed = seed;
                }
                Ok(design)
            }
            _ => Err(CliError::config("simulate", "exactly one of `preset` and `design` is required")),
        }
    }
}

/// Evenly spaced points from `start` to `end` inclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub start: f64,
    pub end: f64,
    pub n_points: usize,
}

impl Grid {
    pub fn points(&self) -> Vec<f64> {
        match self.n_points {
            0 => Vec::new(),
            1 => vec![self.start],
            n => (0..n)
                .map(|i| self.start + (self.end - self.start) * i as f64 / (n - 1) as f64)
                .collect(),
        }
    }

    fn validate(&self, path: &str) -> CliResult<()> {
        if !(self.start.is_finite() && self.end.is_finite() && self.end >= self.start && self.n_points >= 1) {
            return Err(CliError::config(path, "grid needs finite start <= end and n_points >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profile {
    pub label: String,
    #[serde(default)]
    pub covariates: BTreeMap<String, f64>,
}

fn default_profiles() -> Vec<Profile> {
    vec![Profile {
        label: "reference".into(),
        covariates: BTreeMap::new(),
    }]
}

fn default_draws() -> usize {
    lirt_core::posterior::DEFAULT_DRAWS
}

fn default_level() -> f64 {
    lirt_core::posterior::DEFAULT_LEVEL
}

fn default_item_qmc() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    /// A `fit.json` from an earlier run; the model is refitted when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<PathBuf>,
    pub grid: Grid,
    #[serde(default = "default_profiles")]
    pub profiles: Vec<Profile>,
    /// Items with predicted score trajectories; all items when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub items: Option<Vec<String>>,
    /// Subjects with individual trajectories.
    #[serde(default)]
    pub subjects: Vec<String>,
    #[serde(default = "default_draws")]
    pub n_draws: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub seed: u64,
    /// QMC nodes for the random-effect integral of item trajectories.
    #[serde(default = "default_item_qmc")]
    pub item_qmc: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveItem {
    pub item_id: String,
    pub discrimination: f64,
    pub thresholds: Vec<f64>,
}

fn default_lambda_grid() -> Grid {
    Grid {
        start: -6.0,
        end: 6.0,
        n_points: 121,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveConfig {
    /// Explicit item parameters; take precedence over `fit`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub items: Option<Vec<CurveItem>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<PathBuf>,
    #[serde(default = "default_lambda_grid")]
    pub lambda: Grid,
}

impl Default for CurveConfig {
    fn default() -> Self {
        CurveConfig {
            items: None,
            fit: None,
            lambda: default_lambda_grid(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvarianceConfig {
    pub mode: InvarianceMode,
    /// Defaults to Wald for DIF and the likelihood-ratio test for RS.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_test: Option<TestKind>,
}

/// Command-line overrides applied on top of the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub n_qmc: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Parses JSON text; schema errors carry the path of the first failure.
    pub fn from_json(text: &str) -> CliResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(d) = &mut self.data {
            fix(&mut d.path);
        }
        if let Some(p) = self.predict.as_mut().and_then(|p| p.fit.as_mut()) {
            fix(p);
        }
        if let Some(p) = self.curves.as_mut().and_then(|c| c.fit.as_mut()) {
            fix(p);
        }
        if let Some(p) = &mut self.output_dir {
            fix(p);
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        if let Some(model) = &self.model {
            model.validate().map_err(|e| CliError::config("model", e.to_string()))?;
        }
        self.fit.validate().map_err(|e| CliError::config("fit", e.to_string()))?;
        if let Some(s) = &self.simulate {
            s.resolve()?;
        }
        if let Some(p) = &self.predict {
            p.grid.validate("predict.grid")?;
            if !(p.level > 0.0 && p.level < 1.0) {
                return Err(CliError::config("predict.level", "must lie in (0, 1)"));
            }
            if p.item_qmc == 0 {
                return Err(CliError::config("predict.item_qmc", "must be positive"));
            }
        }
        if let Some(c) = &self.curves {
            c.lambda.validate("curves.lambda")?;
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.fit.seed = seed;
            if let Some(s) = &mut self.simulate {
                s.seed = Some(seed);
            }
            if let Some(p) = &mut self.predict {
                p.seed = seed;
            }
        }
        if let Some(n) = o.n_qmc {
            self.fit.n_qmc = n;
        }
        if let Some(dir) = &o.output_dir {
            self.output_dir = Some(dir.clone());
        }
    }

    pub fn model(&self) -> CliResult<&ModelSpec> {
        self.model.as_ref().ok_or_else(|| CliError::config("model", "required by this command"))
    }

    pub fn data(&self) -> CliResult<&DataSource> {
        self.data.as_ref().ok_or_else(|| CliError::config("data", "required by this command"))
    }
}
