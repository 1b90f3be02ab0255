use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tsformer::dataset::{SplitConfig, Target};
use tsformer::embedding::EmbeddingConfig;
use tsformer::model::ModelConfig;
use tsformer::simulator::OUConfig;
use tsformer::trainer::TrainConfig;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Simulate,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: Source,
    /// Daily `date,close` file, for `source = "csv"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv_path: Option<PathBuf>,
    /// Number of simulated observations.
    pub points: usize,
    pub task: Target,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: Source::Simulate,
            csv_path: None,
            points: 24131,
            task: Target::NextValue,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct EmbeddingSection {
    /// Defaults to `model.d_model`; any other value is rejected.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    pub use_positional: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Also write `checkpoint-epochNN.bin` after every epoch.
    pub checkpoint_every_epoch: bool,
    pub precision: Precision,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs/default"),
            checkpoint_every_epoch: false,
            precision: Precision::F64,
        }
    }
}

/// Everything one run needs. Defaults reproduce the base synthetic case.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub simulation: OUConfig,
    pub embedding: EmbeddingSection,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        Self::from_value(
            text.parse::<toml::Table>()
                .map_err(|e| CliError::Usage(e.to_string()))?,
        )
    }

    fn from_value(table: toml::Table) -> Result<Self, CliError> {
        RunConfig::deserialize(toml::Value::Table(table))
            .map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    /// Loads `path` (or the defaults) and applies `section.key=value`
    /// overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_value(table)
    }

    /// Sets the simulation and training seeds.
    pub fn set_seed(&mut self, seed: u64) {
        self.simulation.seed = seed;
        self.train.seed = seed;
    }

    pub fn embedding_config(&self) -> EmbeddingConfig {
        EmbeddingConfig {
            d: self.model.d_model,
            use_positional: self.embedding.use_positional,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: tsformer::Error| CliError::Usage(e.to_string());
        self.model.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        self.split.validate().map_err(usage)?;
        self.embedding_config().validate().map_err(usage)?;
        if let Some(d) = self.embedding.d {
            if d != self.model.d_model {
                return Err(CliError::Usage(format!(
                    "embedding.d = {d} differs from model.d_model = {}",
                    self.model.d_model
                )));
            }
        }
        match self.data.source {
            Source::Simulate => {
                self.simulation.validate().map_err(usage)?;
                if self.data.points <= self.model.seq_len {
                    return Err(CliError::Usage(format!(
                        "data.points = {} leaves no windows of length {}",
                        self.data.points, self.model.seq_len
                    )));
                }
            }
            Source::Csv => match &self.data.csv_path {
                None => {
                    return Err(CliError::Usage(
                        "data.csv_path is required for csv data".into(),
                    ))
                }
                Some(p) if !p.is_file() => {
                    return Err(CliError::Usage(format!(
                        "price file {} does not exist",
                        p.display()
                    )))
                }
                Some(_) => {}
            },
        }
        Ok(())
    }
}

/// `a.b=value`; the value is read as a TOML literal when possible and as a
/// bare string otherwise.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {spec:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("override {key}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
