//! Run configuration: defaults, overridden by a TOML file, overridden by
//! flags. The resolved document and its digest are written next to every
//! output.

use std::path::Path;

use protoid::classify::AggregationMethod;
use protoid::contrastive::TrainConfig;
use protoid::encoder::ConvEncoderConfig;
use protoid::renderer::RenderConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; copied into training, encoder initialization and random
    /// viewpoint strategies that do not name their own seed.
    pub seed: u64,
    pub workers: Option<usize>,
    pub render: RenderConfig,
    pub conv: ConvEncoderConfig,
    pub train: TrainConfig,
    pub prototypes: PrototypeSection,
    pub classify: ClassifySection,
    pub evaluate: EvaluateSection,
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrototypeSection {
    pub strategy: String,
    pub set_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifySection {
    /// `None` picks `single` for one image and `score_average` otherwise.
    pub agg: Option<AggregationMethod>,
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub agg: AggregationMethod,
    /// Number of most similar prototype pairs behind `--subset similar`.
    pub similar_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub n_values: Vec<usize>,
    pub strategies: Vec<String>,
    pub m_values: Vec<usize>,
    pub methods: Vec<AggregationMethod>,
    pub trials: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: None,
            render: RenderConfig::default(),
            conv: ConvEncoderConfig::default(),
            train: TrainConfig::default(),
            prototypes: PrototypeSection::default(),
            classify: ClassifySection::default(),
            evaluate: EvaluateSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl Default for PrototypeSection {
    fn default() -> Self {
        PrototypeSection {
            strategy: "uniform:24:30,60".into(),
            set_id: None,
        }
    }
}

impl Default for ClassifySection {
    fn default() -> Self {
        ClassifySection { agg: None, top_k: 5 }
    }
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            agg: AggregationMethod::Single,
            similar_pairs: 20,
        }
    }
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            n_values: vec![2, 4, 8, 12, 24],
            strategies: vec![
                "uniform:2:30".into(),
                "uniform:2:60".into(),
                "uniform:2:30,60".into(),
                "random:2:30,60".into(),
            ],
            m_values: vec![1, 2, 3, 4, 5],
            methods: vec![AggregationMethod::MajorityVote, AggregationMethod::ScoreAverage],
            trials: protoid::eval::DEFAULT_TRIALS,
        }
    }
}

impl RunConfig {
    /// Defaults merged with the optional TOML file.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Applies the master seed and worker count after flags are merged.
    pub fn finish(mut self, seed: Option<u64>, workers: Option<usize>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if workers.is_some() {
            self.workers = workers;
        }
        self.train.seed = self.seed;
        self.conv.seed = self.seed;
        self
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))[..16].to_string()
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    config_digest: String,
    config: &'a RunConfig,
}

/// Writes `{command, config_digest, config}` as pretty JSON.
pub fn write_run_record(path: &Path, command: &str, cfg: &RunConfig) -> Result<(), CliError> {
    let rec = RunRecord {
        command,
        config_digest: cfg.digest(),
        config: cfg,
    };
    let json = serde_json::to_string_pretty(&rec).expect("run record serializes");
    std::fs::write(path, json + "\n").map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))
}
