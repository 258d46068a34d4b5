//! JSON run configuration shared by every subcommand.

use std::fs::File;
use std::path::{Path, PathBuf};

use kronfit::data::{ingest_long_csv, read_factor2_distances, IngestConfig};
use kronfit::fit::FitOptions;
use kronfit::simulate::SimDesign;
use kronfit::Dataset;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Every field is optional so one file can serve several subcommands;
/// relative paths resolve against the directory holding the file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub factor2_distances: Option<PathBuf>,
    #[serde(default)]
    pub ingest: Option<IngestConfig>,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub factor1: Option<String>,
    #[serde(default)]
    pub factor2: Option<String>,
    #[serde(default)]
    pub families1: Vec<String>,
    #[serde(default)]
    pub families2: Vec<String>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub backward: bool,
    #[serde(default)]
    pub simulate: Option<SimDesign>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let file = File::open(path).map_err(|e| CliError::Input(format!("cannot open config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_reader(file)
            .map_err(|e| CliError::Input(format!("config {}: {e}", path.display())))?;
        cfg.fit.validate()?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Ingests the data file named on the command line or in the config.
    pub fn load_dataset(&self, data_flag: Option<&Path>) -> Result<Dataset, CliError> {
        let data = match (data_flag, &self.data) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(p)) => self.resolve(p),
            (None, None) => return Err(CliError::Input("no data file given (--data or config \"data\")".into())),
        };
        let ingest = self
            .ingest
            .as_ref()
            .ok_or_else(|| CliError::Input("config has no \"ingest\" section describing the columns".into()))?;
        let layout = match &self.factor2_distances {
            Some(p) => {
                let p = self.resolve(p);
                let f = File::open(&p)
                    .map_err(|e| CliError::Input(format!("cannot open distance file {}: {e}", p.display())))?;
                Some(read_factor2_distances(f)?)
            }
            None => None,
        };
        let f = File::open(&data).map_err(|e| CliError::Input(format!("cannot open data {}: {e}", data.display())))?;
        Ok(ingest_long_csv(f, ingest, layout)?)
    }
}
