//! Run configuration shared by the command-line stages.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{SegmentConfig, PATIENT_THRESHOLD, VESSEL_THRESHOLD};
use crate::bayes::{McmcOptions, PriorSpec};
use crate::error::{Error, Result};
use crate::moco::MocoConfig;
use crate::model::PhysioConstants;
use crate::nlls::{FitBounds, FitOptions};
use crate::pipeline::ConvertConfig;
use crate::signal::{SequenceParams, DUAL_BOLUS_SCALE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FitMethod {
    #[default]
    Nlls,
    Bayes,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvertSection {
    #[serde(rename = "T10_blood_s")]
    pub t10_blood: f64,
    pub baseline_frames: usize,
    pub dual_bolus_scale: f64,
    #[serde(rename = "main_bolus_start_s")]
    pub main_bolus_start: f64,
    pub clip_to_range: bool,
}

impl Default for ConvertSection {
    fn default() -> Self {
        Self {
            t10_blood: 1.8,
            baseline_frames: 5,
            dual_bolus_scale: DUAL_BOLUS_SCALE,
            main_bolus_start: 0.0,
            clip_to_range: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub method: FitMethod,
    pub bounds: FitBounds,
    pub nlls: FitOptions,
    pub mcmc: McmcOptions,
    /// Prior of the Bayesian fit; its box is replaced by `bounds`.
    pub prior: PriorSpec,
}

impl Default for FitSection {
    fn default() -> Self {
        Self {
            method: FitMethod::Nlls,
            bounds: FitBounds::default(),
            nlls: FitOptions::default(),
            mcmc: McmcOptions::default(),
            prior: PriorSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MocoSection {
    pub enabled: bool,
    pub config: MocoConfig,
}

impl Default for MocoSection {
    fn default() -> Self {
        Self {
            enabled: true,
            config: MocoConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// Patient-level MBF threshold (ml/min/g).
    pub patient: f64,
    /// Vessel-level MBF threshold (ml/min/g).
    pub vessel: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            patient: PATIENT_THRESHOLD,
            vessel: VESSEL_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub sequence: SequenceParams,
    pub physio: PhysioConstants,
    pub convert: ConvertSection,
    pub fit: FitSection,
    pub moco: MocoSection,
    pub segments: SegmentConfig,
    pub thresholds: Thresholds,
    pub seed: u64,
    pub paths: Paths,
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_json(&s).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.sequence.validate()?;
        self.physio.validate()?;
        self.fit.bounds.validate()?;
        self.prior().validate()?;
        self.fit.mcmc.validate()?;
        if self.convert.baseline_frames == 0 {
            return Err(Error::EmptyBaseline);
        }
        if !(self.convert.t10_blood > 0.0) || !(self.convert.dual_bolus_scale > 0.0) {
            return Err(Error::Config("T10_blood_s and dual_bolus_scale must be > 0".into()));
        }
        for (name, t) in [("patient", self.thresholds.patient), ("vessel", self.thresholds.vessel)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("{name} threshold must be > 0, got {t}")));
            }
        }
        if self.fit.nlls.n_starts == 0 || self.moco.config.iterations == 0 {
            return Err(Error::Config("n_starts and moco iterations must be >= 1".into()));
        }
        Ok(())
    }

    pub fn convert_config(&self) -> ConvertConfig {
        ConvertConfig {
            sequence: self.sequence,
            t10_blood: self.convert.t10_blood,
            baseline_frames: self.convert.baseline_frames,
            dual_bolus_scale: self.convert.dual_bolus_scale,
            main_bolus_start: self.convert.main_bolus_start,
            clip_to_range: self.convert.clip_to_range,
        }
    }

    pub fn prior(&self) -> PriorSpec {
        PriorSpec {
            bounds: self.fit.bounds,
            ..self.fit.prior
        }
    }
}
