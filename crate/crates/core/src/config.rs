//! JSON configuration files. Every file carries `schema_version`; unknown
//! fields are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::elements::{
    make_cglp, make_pid_chain, CgLpConfig, CgLpKind, ControllerChain, LowPass, PlantModel, ResetSystem,
    TuningTargets,
};
use crate::error::{Error, Result};
use crate::sim::TriggerSource;

pub const SCHEMA_VERSION: u32 = 1;

fn check_version(v: u32) -> Result<()> {
    if v != SCHEMA_VERSION {
        return Err(Error::InvalidConfig(format!("unsupported schema_version {v}, expected {SCHEMA_VERSION}")));
    }
    Ok(())
}

/// A single CgLp element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElementFile {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub kind: CgLpKind,
    pub omega_ralpha: f64,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_r: Option<f64>,
    pub omega_f: f64,
    pub gamma: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra_lowpass: Option<LowPass>,
}

impl ElementFile {
    pub fn from_config(name: Option<String>, c: &CgLpConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            name,
            kind: c.kind,
            omega_ralpha: c.omega_ralpha,
            alpha: c.alpha,
            beta_r: c.beta_r,
            omega_f: c.omega_f,
            gamma: c.gamma.clone(),
            extra_lowpass: c.extra_lowpass,
        }
    }

    pub fn config(&self) -> CgLpConfig {
        CgLpConfig {
            kind: self.kind,
            omega_ralpha: self.omega_ralpha,
            alpha: self.alpha,
            beta_r: self.beta_r,
            omega_f: self.omega_f,
            gamma: self.gamma.clone(),
            extra_lowpass: self.extra_lowpass,
        }
    }

    pub fn build(&self) -> Result<ResetSystem> {
        check_version(self.schema_version)?;
        make_cglp(&self.config())
    }

    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| format!("{:?}", self.kind).to_uppercase())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Design {
    /// Tuned from crossover and phase margin.
    Tuned {
        omega_c: f64,
        phase_margin_deg: f64,
        #[serde(default)]
        proportional_only: bool,
    },
    /// Gains given directly. Omitted corners drop the corresponding block.
    Explicit {
        k_p: f64,
        #[serde(default)]
        omega_i: Option<f64>,
        #[serde(default)]
        omega_d: Option<f64>,
        #[serde(default)]
        omega_t: Option<f64>,
    },
}

/// A closed loop: plant plus controller chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerFile {
    pub schema_version: u32,
    pub name: String,
    pub plant: PlantModel,
    #[serde(default)]
    pub cglp: Option<CgLpConfig>,
    #[serde(default)]
    pub lowpass: Option<LowPass>,
    pub design: Design,
    #[serde(default)]
    pub trigger: Option<TriggerSource>,
}

impl ControllerFile {
    pub fn build(&self) -> Result<(ControllerChain, PlantModel)> {
        check_version(self.schema_version)?;
        self.plant.validate()?;
        let cglp = self.cglp.as_ref().map(make_cglp).transpose()?;
        let chain = match self.design {
            Design::Tuned { omega_c, phase_margin_deg, proportional_only } => make_pid_chain(
                &self.plant.model(),
                cglp.as_ref(),
                self.lowpass,
                TuningTargets { omega_c, phase_margin_deg, proportional_only },
            )?,
            Design::Explicit { k_p, omega_i, omega_d, omega_t } => {
                let tamed = match (omega_d, omega_t) {
                    (Some(d), Some(t)) => Some((d, t)),
                    (None, None) => None,
                    _ => return Err(Error::InvalidConfig("omega_d and omega_t must be given together".into())),
                };
                ControllerChain::new(k_p, omega_i, tamed, cglp, self.lowpass)?
            }
        };
        Ok((chain, self.plant))
    }
}

fn read(path: &Path) -> Result<String> {
    Ok(std::fs::read_to_string(path)?)
}

pub fn parse_element(text: &str) -> Result<ElementFile> {
    let f: ElementFile = serde_json::from_str(text)?;
    check_version(f.schema_version)?;
    Ok(f)
}

pub fn parse_controller(text: &str) -> Result<ControllerFile> {
    let f: ControllerFile = serde_json::from_str(text)?;
    check_version(f.schema_version)?;
    Ok(f)
}

pub fn load_element(path: &Path) -> Result<ElementFile> {
    parse_element(&read(path)?)
}

pub fn load_controller(path: &Path) -> Result<ControllerFile> {
    parse_controller(&read(path)?)
}
