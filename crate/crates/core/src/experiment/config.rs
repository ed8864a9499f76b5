use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::attacks::{AttackKind, GuessDistribution, QueryFreeConfig, TargetLevels, WhiteboxConfig};
use crate::data::{CsvSource, SplitRatios, SyntheticConfig, WindowSpec};
use crate::protocol::FederationSetup;

pub const SCHEMA_VERSION: u32 = 1;

/// Where the panels come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated panels, seeded by the experiment seed.
    Synthetic(SyntheticConfig),
    Csv { active: CsvSource, passives: Vec<CsvSource> },
}

/// Data the query-free attacker trains its surrogate on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShadowData {
    /// The passive party's own train and validation windows.
    #[default]
    TrainValid,
    /// Standard-normal values of the same shape.
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Index of the targeted passive party.
    pub party: usize,
    /// Number of k-means clusters used to pick the attacked test samples.
    pub clusters: usize,
    pub levels: TargetLevels,
    pub whitebox: WhiteboxConfig,
    pub queryfree: QueryFreeConfig,
    pub shadow: ShadowData,
    pub guess: GuessDistribution,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: AttackKind::WhiteBox,
            party: 0,
            clusters: 16,
            levels: TargetLevels::First,
            whitebox: WhiteboxConfig::default(),
            queryfree: QueryFreeConfig::default(),
            shadow: ShadowData::TrainValid,
            guess: GuessDistribution::Normal,
        }
    }
}

/// One experiment: data, model, privacy, training, and attack settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub data: DataSource,
    pub window: WindowSpec,
    #[serde(default)]
    pub split: SplitRatios,
    #[serde(default)]
    pub federation: FederationSetup,
    #[serde(default)]
    pub attack: AttackConfig,
    /// Where `compare` writes its report; other subcommands take `--out`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<std::path::PathBuf>,
}

impl ExperimentConfig {
    /// Strict parse: unknown keys and type errors report their JSON path.
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        let data_seed = value.pointer("/data/synthetic/seed").cloned();
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(value)
            .map_err(|e| ExperimentError::Config(format!("{}: {}", e.path(), e.inner())))?;
        if let DataSource::Synthetic(s) = &mut cfg.data {
            // the top-level seed drives generation; an explicit copy must agree
            if data_seed.is_some_and(|v| v.as_u64() != Some(cfg.seed)) {
                return Err(ExperimentError::Config(
                    "data.synthetic.seed: must be omitted or equal the top-level `seed`".into(),
                ));
            }
            s.seed = cfg.seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version: expected {SCHEMA_VERSION}, found {}", self.schema_version));
        }
        if self.window.history == 0 || self.window.horizon == 0 {
            return bad("window: history and horizon must be positive".into());
        }
        if self.split.train == 0 || self.split.valid == 0 || self.split.test == 0 {
            return bad("split: every ratio must be positive".into());
        }
        self.federation.dp.validate().map_err(|m| ExperimentError::Config(format!("federation.dp: {m}")))?;
        if self.attack.clusters == 0 {
            return bad("attack.clusters: must be positive".into());
        }
        Ok(())
    }
}
