//! Experiment configuration: a TOML file, command-line overrides, and
//! validation that names the offending key.
//!
//! Every key is optional. An empty file yields the desk scenario:
//!
//! ```toml
//! seed = 0
//!
//! [dataset]
//! num_classes = 10
//! input_dim = 16
//! samples_per_class = 100
//! class_separation = 3.0
//! noise_scale = 1.0
//!
//! [partition]
//! scheme = "dirichlet"     # or "domain_shift"
//! alpha = 0.1              # dirichlet only
//! shift_scale = 1.0        # domain_shift only
//! rotate = true            # domain_shift only
//! num_clients = 8
//!
//! [model]
//! feature_dim = 16
//! hidden_widths = [[], [16], [32, 16], [64, 32, 16]]
//! scenario = "hetero"      # "homo-shared" | "homo-local" | "hetero"
//!
//! [training]
//! rounds = 30
//! loss = "gcsa"            # mse | cosine | gcsa | rcsa | contrastive
//! temperature = 0.5        # contrastive only
//! lambda = 1.0
//! gamma = 1.0
//! local_epochs = 2
//! batch_size = 32
//! learning_rate = 0.05
//! participation_fraction = 1.0
//! prototype_mode = "aggregate"   # or "fixed_hypersphere"
//! threads = 1
//!
//! [output]
//! dir = "runs/fedsaf"
//! prototypes = false
//! checkpoints = false
//! normalize_dimensionality = false
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use fedsaf_core::data::{MixtureParams, PartitionScheme, PartitionSpec};
use fedsaf_core::fed::{ExperimentPlan, PrototypeMode, RoundConfig, Scenario};
use fedsaf_core::losses::AlignmentKind;
use fedsaf_core::model::ArchitectureSpec;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seeds data generation, partitioning, initialization and training.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    pub class_separation: f64,
    pub noise_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    Dirichlet,
    DomainShift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    pub scheme: SchemeName,
    pub alpha: f64,
    pub shift_scale: f64,
    pub rotate: bool,
    pub num_clients: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub feature_dim: usize,
    /// One entry per architecture; client `i` uses entry `i mod len`.
    pub hidden_widths: Vec<Vec<usize>>,
    pub scenario: Scenario,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub rounds: usize,
    pub loss: String,
    pub temperature: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub participation_fraction: f64,
    pub prototype_mode: PrototypeMode,
    /// Worker threads for client training. Results do not depend on it.
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write `prototypes/round_<k>.csv` after every round.
    pub prototypes: bool,
    /// Write final client model checkpoints.
    pub checkpoints: bool,
    pub normalize_dimensionality: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetConfig::default(),
            partition: PartitionConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let m = MixtureParams::default();
        Self {
            num_classes: m.num_classes,
            input_dim: m.input_dim,
            samples_per_class: m.samples_per_class,
            class_separation: m.class_separation,
            noise_scale: m.noise_scale,
        }
    }
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self { scheme: SchemeName::Dirichlet, alpha: 0.1, shift_scale: 1.0, rotate: true, num_clients: 8 }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            hidden_widths: vec![vec![], vec![16], vec![32, 16], vec![64, 32, 16]],
            scenario: Scenario::Hetero,
        }
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let r = RoundConfig::default();
        Self {
            rounds: 30,
            loss: r.alignment.name().to_owned(),
            temperature: fedsaf_core::losses::DEFAULT_TEMPERATURE,
            lambda: r.lambda,
            gamma: r.gamma,
            local_epochs: r.local_epochs,
            batch_size: r.batch_size,
            learning_rate: r.learning_rate,
            participation_fraction: r.participation_fraction,
            prototype_mode: r.prototype_mode,
            threads: 1,
        }
    }
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs/fedsaf"), prototypes: false, checkpoints: false, normalize_dimensionality: false }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub loss: Option<String>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub rounds: Option<usize>,
    pub clients: Option<usize>,
    pub alpha: Option<f64>,
    pub scenario: Option<Scenario>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.loss {
            cfg.training.loss = v.clone();
        }
        if let Some(v) = self.lambda {
            cfg.training.lambda = v;
        }
        if let Some(v) = self.gamma {
            cfg.training.gamma = v;
        }
        if let Some(v) = self.rounds {
            cfg.training.rounds = v;
        }
        if let Some(v) = self.clients {
            cfg.partition.num_clients = v;
        }
        if let Some(v) = self.alpha {
            cfg.partition.alpha = v;
        }
        if let Some(v) = self.scenario {
            cfg.model.scenario = v;
        }
        if let Some(v) = &self.out {
            cfg.output.dir = v.clone();
        }
        if let Some(v) = self.threads {
            cfg.training.threads = v;
        }
    }
}

fn invalid(key: &str, message: impl Into<String>) -> CliError {
    CliError::Invalid { key: key.to_owned(), message: message.into() }
}

fn positive(key: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(key, format!("must be a positive number, got {v}")))
    }
}

fn nonnegative(key: &str, v: f64) -> Result<(), CliError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(key, format!("must be ≥ 0, got {v}")))
    }
}

fn at_least(key: &str, v: usize, min: usize) -> Result<(), CliError> {
    if v >= min {
        Ok(())
    } else {
        Err(invalid(key, format!("must be ≥ {min}, got {v}")))
    }
}

impl ExperimentConfig {
    /// Parse TOML text. Unknown keys are rejected.
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Parse { message: e.to_string() })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable as TOML")
    }

    /// Checks every bound, reporting the first violation by its dotted key.
    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.dataset;
        at_least("dataset.num_classes", d.num_classes, 2)?;
        at_least("dataset.input_dim", d.input_dim, 1)?;
        at_least("dataset.samples_per_class", d.samples_per_class, 2)?;
        positive("dataset.class_separation", d.class_separation)?;
        nonnegative("dataset.noise_scale", d.noise_scale)?;

        let p = &self.partition;
        at_least("partition.num_clients", p.num_clients, 2)?;
        match p.scheme {
            SchemeName::Dirichlet => positive("partition.alpha", p.alpha)?,
            SchemeName::DomainShift => nonnegative("partition.shift_scale", p.shift_scale)?,
        }

        let m = &self.model;
        at_least("model.feature_dim", m.feature_dim, 2)?;
        if m.hidden_widths.is_empty() {
            return Err(invalid("model.hidden_widths", "needs at least one architecture"));
        }
        if m.hidden_widths.iter().flatten().any(|&w| w == 0) {
            return Err(invalid("model.hidden_widths", "layer widths must be positive"));
        }

        let t = &self.training;
        self.alignment()?;
        nonnegative("training.lambda", t.lambda)?;
        nonnegative("training.gamma", t.gamma)?;
        at_least("training.local_epochs", t.local_epochs, 1)?;
        at_least("training.batch_size", t.batch_size, 2)?;
        positive("training.learning_rate", t.learning_rate)?;
        if !(t.participation_fraction > 0.0 && t.participation_fraction <= 1.0) {
            return Err(invalid(
                "training.participation_fraction",
                format!("must be in (0, 1], got {}", t.participation_fraction),
            ));
        }
        at_least("training.threads", t.threads, 1)?;
        if t.prototype_mode == PrototypeMode::FixedHypersphere && d.num_classes < 2 {
            return Err(invalid("training.prototype_mode", "fixed_hypersphere needs at least 2 classes"));
        }
        Ok(())
    }

    pub fn alignment(&self) -> Result<AlignmentKind, CliError> {
        let kind: AlignmentKind = self
            .training
            .loss
            .parse()
            .map_err(|_| invalid("training.loss", format!("unknown loss `{}`", self.training.loss)))?;
        match kind {
            AlignmentKind::Contrastive { .. } => {
                positive("training.temperature", self.training.temperature)?;
                Ok(AlignmentKind::Contrastive { temperature: self.training.temperature })
            }
            other => Ok(other),
        }
    }

    pub fn mixture(&self) -> MixtureParams {
        MixtureParams {
            num_classes: self.dataset.num_classes,
            input_dim: self.dataset.input_dim,
            samples_per_class: self.dataset.samples_per_class,
            class_separation: self.dataset.class_separation,
            noise_scale: self.dataset.noise_scale,
            seed: self.seed,
        }
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        let p = &self.partition;
        let scheme = match p.scheme {
            SchemeName::Dirichlet => PartitionScheme::Dirichlet { alpha: p.alpha },
            SchemeName::DomainShift => PartitionScheme::DomainShift { shift_scale: p.shift_scale, rotate: p.rotate },
        };
        PartitionSpec { scheme, num_clients: p.num_clients, seed: self.seed }
    }

    pub fn round_config(&self) -> Result<RoundConfig, CliError> {
        let t = &self.training;
        Ok(RoundConfig {
            lambda: t.lambda,
            gamma: t.gamma,
            alignment: self.alignment()?,
            local_epochs: t.local_epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            participation_fraction: t.participation_fraction,
            prototype_mode: t.prototype_mode,
        })
    }

    pub fn plan(&self) -> Result<ExperimentPlan, CliError> {
        let archs = self
            .model
            .hidden_widths
            .iter()
            .map(|w| ArchitectureSpec::new(w.clone(), self.model.feature_dim))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ExperimentPlan {
            round: self.round_config()?,
            archs,
            rounds: self.training.rounds,
            seed: self.seed,
            scenario: self.model.scenario,
            num_classes: self.dataset.num_classes,
            normalize_stacked: self.output.normalize_dimensionality,
        })
    }
}

/// Reads, overrides and validates a config. `None` starts from defaults.
pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|source| CliError::ReadConfig { path: p.to_owned(), source })?;
            ExperimentConfig::from_toml_str(&text)?
        }
        None => ExperimentConfig::default(),
    };
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        cfg.validate().unwrap();
        assert_eq!(cfg.training.rounds, 30);
        assert_eq!(cfg.partition.num_clients, 8);
        assert_eq!(cfg.alignment().unwrap(), AlignmentKind::Gcsa);
    }

    #[test]
    fn partial_blocks_fill_in() {
        let cfg = ExperimentConfig::from_toml_str("[training]\nlambda = 0.3\n").unwrap();
        assert_eq!(cfg.training.lambda, 0.3);
        assert_eq!(cfg.training.gamma, 1.0);
        assert_eq!(cfg.dataset, DatasetConfig::default());
    }

    #[test]
    fn negative_alpha_names_the_key() {
        let cfg = ExperimentConfig::from_toml_str("[partition]\nalpha = -1.0\n").unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("partition.alpha"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml_str("[training]\nlamda = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("lamda"), "{err}");
        assert!(ExperimentConfig::from_toml_str("colour = 1\n").is_err());
    }

    #[test]
    fn bad_values_name_their_keys() {
        for (text, key) in [
            ("[training]\nloss = \"l1\"\n", "training.loss"),
            ("[training]\nbatch_size = 1\n", "training.batch_size"),
            ("[training]\nparticipation_fraction = 1.5\n", "training.participation_fraction"),
            ("[training]\nloss = \"contrastive\"\ntemperature = 0.0\n", "training.temperature"),
            ("[partition]\nnum_clients = 1\n", "partition.num_clients"),
            ("[model]\nhidden_widths = []\n", "model.hidden_widths"),
            ("[dataset]\nnoise_scale = -0.5\n", "dataset.noise_scale"),
        ] {
            let err = ExperimentConfig::from_toml_str(text).unwrap().validate().unwrap_err();
            assert!(err.to_string().contains(key), "{text}: {err}");
        }
    }

    #[test]
    fn flags_override_file_values() {
        let mut cfg = ExperimentConfig::from_toml_str("[training]\nlambda = 1.0\n").unwrap();
        Overrides { lambda: Some(0.5), scenario: Some(Scenario::HomoLocal), ..Overrides::default() }.apply(&mut cfg);
        assert_eq!(cfg.training.lambda, 0.5);
        assert_eq!(cfg.model.scenario, Scenario::HomoLocal);
        assert!(cfg.to_toml_string().contains("lambda = 0.5"));
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.training.loss = "contrastive".into();
        cfg.partition.scheme = SchemeName::DomainShift;
        cfg.model.scenario = Scenario::HomoShared;
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }
}
