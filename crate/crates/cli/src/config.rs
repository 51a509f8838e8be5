//! Run configuration shared by `align` and `train`.

use std::path::{Path, PathBuf};

use gadmore::align::AlignConfig;
use gadmore::model::ModelConfig;
use gadmore::router::RouterConfig;
use gadmore::training::TrainConfig;
use gadmore::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub align: AlignConfig,
    pub router: RouterConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    /// Graph directories used for training.
    pub sources: Vec<PathBuf>,
    /// Graph directories scored after training.
    pub targets: Vec<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Overrides `train.seed` when set.
    pub seed: Option<u64>,
}

impl RunConfig {
    /// Reads `path`; relative graph paths resolve against the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in cfg.sources.iter_mut().chain(cfg.targets.iter_mut()) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(seed) = cfg.seed {
            cfg.train.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.align.validate()?;
        self.train.validate()?;
        self.model.validate()?;
        self.router.validate(self.model.expert_kappas.len())?;
        if let Some(missing) = self.sources.iter().chain(&self.targets).find(|p| !p.is_dir()) {
            return Err(Error::Data(format!("graph directory {} does not exist", missing.display())));
        }
        Ok(())
    }
}
