//! TOML run configuration. Relative paths resolve against the directory
//! holding the config file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use vcomp_core::mcverify::ExperimentPlan;
use vcomp_core::randsrc::SubGaussianLaw;
use vcomp_core::remodel::{CouplingScheme, Design, ModelParams};
use vcomp_core::vcest::FitOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Output directory.
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub generate: Option<GenerateConfig>,
    pub fit: Option<FitConfig>,
    pub experiment: Option<ExperimentPlan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub n: usize,
    pub p: usize,
    pub params: ModelParams,
    #[serde(default = "gaussian")]
    pub beta_law: SubGaussianLaw,
    #[serde(default = "gaussian")]
    pub eps_law: SubGaussianLaw,
    #[serde(default = "default_design")]
    pub design: Design,
    pub coupling: Option<CouplingScheme>,
}

fn gaussian() -> SubGaussianLaw {
    SubGaussianLaw::GAUSSIAN
}

fn default_design() -> Design {
    Design::GaussianIid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    /// Design matrix, CSV or binary.
    pub x: PathBuf,
    /// Response vector, one value per line.
    pub y: PathBuf,
    #[serde(default)]
    pub options: FitOptions,
    /// Include the grid trace in fit.json.
    #[serde(default = "yes")]
    pub with_trace: bool,
}

fn yes() -> bool {
    true
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(out) = self.out.as_mut() {
            fix(out);
        }
        if let Some(fit) = self.fit.as_mut() {
            fix(&mut fit.x);
            fix(&mut fit.y);
        }
    }

    pub fn section<'a, T>(section: &'a Option<T>, name: &str) -> Result<&'a T> {
        match section {
            Some(s) => Ok(s),
            None => bail!("config has no [{name}] section"),
        }
    }
}
