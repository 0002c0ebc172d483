// SPDX-License-Identifier: MIT OR Apache-2.0

//! Edit plans: JSON descriptions of an intervention, resolved against a
//! checkpoint and (for label targets) a concept dictionary.

use std::path::{Path, PathBuf};

use diffsae_core::concepts::ConceptDictionary;
use diffsae_core::intervention::{default_beta, resolve_label, EditMode, Region, ResolvedEdit, Stage, TimestepWindow};
use diffsae_core::{Quadrant, SaeModel};
use serde::{Deserialize, Serialize};

use crate::checkpoint::load_model;
use crate::error::{Error, Result};
use crate::formats::RleMask;
use crate::manifest::read_json;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EditTarget {
    Cids { cids: Vec<usize> },
    Label { label: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RegionSpec {
    Quadrant(Quadrant),
    Mask(RleMask),
}

/// ```json
/// { "mode": "spatial", "target": {"label": "apple"}, "region": "bottom-right",
///   "beta": 400.0, "timestep_window": [0.2, 0.6],
///   "checkpoint": "final.saeckpt", "block": "mid_block",
///   "dictionary": "dictionary.json" }
/// ```
///
/// Relative paths are resolved against the plan file's directory. When
/// `beta` is omitted the default for the mode and the stage containing the
/// window midpoint is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditPlan {
    pub mode: EditMode,
    pub target: EditTarget,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<RegionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub timestep_window: [f64; 2],
    pub checkpoint: PathBuf,
    pub block: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dictionary: Option<PathBuf>,
}

/// A plan with its model loaded and its target resolved.
#[derive(Debug, Clone)]
pub struct LoadedPlan {
    pub plan: EditPlan,
    pub model: SaeModel<f32>,
    pub edit: ResolvedEdit,
    pub window: TimestepWindow,
}

impl EditPlan {
    pub fn load(path: &Path) -> Result<Self> {
        let plan: EditPlan = read_json(path).map_err(|e| Error::config(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn window(&self) -> Result<TimestepWindow> {
        let [lo, hi] = self.timestep_window;
        TimestepWindow::new(lo, hi).map_err(|e| Error::config(format!("timestep_window: {e}")))
    }

    pub fn effective_beta(&self) -> Result<f64> {
        match self.beta {
            Some(b) if b.is_finite() => Ok(b),
            Some(_) => Err(Error::config("beta must be finite")),
            None => {
                let stage = Stage::of(self.window()?.midpoint());
                default_beta(self.mode, stage).ok_or_else(|| {
                    Error::config(format!("no default beta for {} edits; set `beta`", self.mode))
                })
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.window()?;
        self.effective_beta()?;
        match (self.mode.needs_region(), self.region.is_some()) {
            (true, false) => Err(Error::config(format!("{} edits require a region", self.mode))),
            (false, true) => Err(Error::config("global edits take no region")),
            _ => Ok(()),
        }
    }

    pub fn resolve_cids(&self, dict: Option<&ConceptDictionary>) -> Result<Vec<usize>> {
        match &self.target {
            EditTarget::Cids { cids } => Ok(cids.clone()),
            EditTarget::Label { label } => {
                let dict = dict.ok_or_else(|| Error::config("label targets need a `dictionary`"))?;
                resolve_label(dict, label).map_err(|e| Error::config(e.to_string()))
            }
        }
    }

    /// Resolves against an already loaded model and dictionary.
    pub fn resolve_with(&self, model: &SaeModel<f32>, dict: Option<&ConceptDictionary>) -> Result<ResolvedEdit> {
        self.validate()?;
        let cids = self.resolve_cids(dict)?;
        if let Some(&bad) = cids.iter().find(|&&c| c >= model.n_f()) {
            return Err(Error::config(format!("concept {bad} out of range for n_f = {}", model.n_f())));
        }
        let region = self.region.as_ref().map(|r| -> Result<Region> {
            Ok(match r {
                RegionSpec::Quadrant(q) => Region::Quadrant(*q),
                RegionSpec::Mask(m) => Region::Mask(m.to_mask()?),
            })
        });
        let region = region.transpose()?;
        ResolvedEdit::new(self.mode, cids, region, self.effective_beta()?).map_err(|e| Error::config(e.to_string()))
    }

    /// Loads the checkpoint and dictionary named by the plan; relative paths
    /// are taken from `base`.
    pub fn resolve(self, base: &Path) -> Result<LoadedPlan> {
        let model = load_model(&base.join(&self.checkpoint))?;
        let dict: Option<ConceptDictionary> = match &self.dictionary {
            Some(p) => Some(read_json(&base.join(p))?),
            None => None,
        };
        let edit = self.resolve_with(&model, dict.as_ref())?;
        let window = self.window()?;
        Ok(LoadedPlan {
            plan: self,
            model,
            edit,
            window,
        })
    }
}

/// Loads a plan file and everything it references.
pub fn load_plan(path: &Path) -> Result<LoadedPlan> {
    let plan = EditPlan::load(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    plan.resolve(&base)
}
