//! Experiment configuration: parsing, validation, and assembly of a
//! [`Simulation`] from a declarative description.
//!
//! Configs are TOML. Scalar federation settings sit at the top level;
//! everything with its own vocabulary (dataset, model, optimizer, attack,
//! and so on) gets a section. Every omitted optional field has a default,
//! and serializing the parsed config back out materializes all of them, so
//! a run directory always carries a complete description of what ran.
//!
//! Validation collects every violation before reporting, so a bad config
//! fails once with the full list instead of one complaint at a time.

use crate::adversary::{AttackKind, AttackPlan};
use crate::data::{load_idx, synthetic_classification, Dataset, PartitionKind, PartitionSpec};
use crate::error::{Error, Result};
use crate::federation::{AggregatorKind, FederationSpec, OptimizerKind, Simulation};
use crate::metrics::RoundMetrics;
use crate::nn::{
    Activation, Model, NormalizationFamily, NormalizationFn, DEFAULT_BN_EPSILON,
};
use crate::quantize::{ClipBounds, Level};
use crate::rng::{stream, StreamKind};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Gaussian class blobs generated from the master seed.
    Synthetic {
        #[serde(default = "defaults::train_samples")]
        train_samples: usize,
        #[serde(default = "defaults::test_samples")]
        test_samples: usize,
        #[serde(default = "defaults::input_dim")]
        input_dim: usize,
        #[serde(default = "defaults::classes")]
        classes: usize,
        #[serde(default = "defaults::separation")]
        separation: f64,
    },
    /// Image/label file pairs in the IDX container format.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Keep only the first this many training samples.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths; these layers hold the quantized weights.
    #[serde(default = "defaults::hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "defaults::activation")]
    pub activation: Activation,
    /// Standardize each hidden pre-activation over the batch, keeping the
    /// model free of unquantizable trainable parameters.
    #[serde(default)]
    pub static_bn: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: defaults::hidden(),
            activation: defaults::activation(),
            static_bn: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    #[serde(default = "defaults::partition_kind")]
    pub kind: PartitionKind,
    /// Dirichlet concentration; lower is more heterogeneous. Ignored for
    /// the uniform split.
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            kind: defaults::partition_kind(),
            alpha: defaults::alpha(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "defaults::optimizer_kind")]
    pub kind: OptimizerKind,
    #[serde(default = "defaults::eta")]
    pub eta: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: defaults::optimizer_kind(),
            eta: defaults::eta(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhiConfig {
    #[serde(default = "defaults::phi_family")]
    pub family: NormalizationFamily,
    #[serde(default = "defaults::phi_a")]
    pub a: f64,
}

impl Default for PhiConfig {
    fn default() -> Self {
        PhiConfig {
            family: defaults::phi_family(),
            a: defaults::phi_a(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerConfig {
    #[serde(default = "defaults::level")]
    pub level: Level,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        QuantizerConfig {
            level: defaults::level(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReputationConfig {
    /// Memory factor of the credibility moving average.
    #[serde(default = "defaults::beta")]
    pub beta: f64,
}

impl Default for ReputationConfig {
    fn default() -> Self {
        ReputationConfig {
            beta: defaults::beta(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default = "defaults::attack_kind")]
    pub kind: AttackKind,
    #[serde(default)]
    pub num_attackers: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: defaults::attack_kind(),
            num_attackers: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsConfig {
    /// Master seed; every stream in the run derives from it.
    pub master: u64,
    /// Seed for evaluation-time rounding. Defaults to master + 1 so scoring
    /// draws never overlap training draws even by coincidence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "defaults::output_dir")]
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: defaults::output_dir(),
        }
    }
}

mod defaults {
    use super::*;

    pub fn train_samples() -> usize {
        4000
    }
    pub fn test_samples() -> usize {
        1000
    }
    pub fn input_dim() -> usize {
        16
    }
    pub fn classes() -> usize {
        2
    }
    pub fn separation() -> f64 {
        10.0
    }
    pub fn hidden() -> Vec<usize> {
        vec![32]
    }
    pub fn activation() -> Activation {
        Activation::Relu
    }
    pub fn partition_kind() -> PartitionKind {
        PartitionKind::Iid
    }
    pub fn alpha() -> f64 {
        0.5
    }
    pub fn optimizer_kind() -> OptimizerKind {
        OptimizerKind::Adam
    }
    pub fn eta() -> f64 {
        0.01
    }
    pub fn phi_family() -> NormalizationFamily {
        NormalizationFamily::Tanh
    }
    pub fn phi_a() -> f64 {
        1.5
    }
    pub fn level() -> Level {
        Level::Binary
    }
    pub fn beta() -> f64 {
        0.5
    }
    pub fn attack_kind() -> AttackKind {
        AttackKind::None
    }
    pub fn participation() -> f64 {
        1.0
    }
    pub fn tau() -> usize {
        20
    }
    pub fn batch_size() -> usize {
        50
    }
    pub fn aggregator() -> AggregatorKind {
        AggregatorKind::FedVoteOptionI
    }
    pub fn eval_every() -> usize {
        1
    }
    pub fn output_dir() -> PathBuf {
        PathBuf::from("runs")
    }
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    /// Total number of clients.
    pub clients: usize,
    /// Fraction of clients drawn each round.
    #[serde(default = "defaults::participation")]
    pub participation: f64,
    /// Communication rounds.
    pub rounds: usize,
    /// Local steps per round.
    #[serde(default = "defaults::tau")]
    pub tau: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::aggregator")]
    pub aggregator: AggregatorKind,
    #[serde(default = "defaults::eval_every")]
    pub eval_every: usize,
    /// Score the quantized model by thresholding at zero instead of
    /// stochastic rounding.
    #[serde(default)]
    pub eval_threshold: bool,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub phi: PhiConfig,
    #[serde(default)]
    pub quantizer: QuantizerConfig,
    #[serde(default)]
    pub clip: ClipBounds,
    #[serde(default)]
    pub reputation: ReputationConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    pub seeds: SeedsConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// Parses a config from TOML text and validates it.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Materializes the derived defaults (currently the evaluation seed) so
    /// a serialized copy is fully explicit. Call after any seed overrides.
    pub fn resolve(&mut self) {
        if self.seeds.eval.is_none() {
            self.seeds.eval = Some(self.seeds.master.wrapping_add(1));
        }
    }

    /// Reads and parses a config file.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::config("not found"));
        }
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// The config serialized back to TOML with every default materialized.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn master_seed(&self) -> u64 {
        self.seeds.master
    }

    pub fn eval_seed(&self) -> u64 {
        self.seeds.eval.unwrap_or(self.seeds.master.wrapping_add(1))
    }

    /// Checks every field and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();

        match &self.dataset {
            DatasetConfig::Synthetic {
                train_samples,
                test_samples,
                input_dim,
                classes,
                separation,
            } => {
                if *classes < 2 {
                    problems.push("dataset: at least two classes".into());
                }
                if *input_dim == 0 {
                    problems.push("dataset: input dimension must be positive".into());
                }
                if *train_samples < *classes {
                    problems.push("dataset: fewer training samples than classes".into());
                }
                if *test_samples == 0 {
                    problems.push("dataset: test split must be non-empty".into());
                }
                if !separation.is_finite() || *separation <= 0.0 {
                    problems.push("dataset: class separation must be positive".into());
                }
                if *train_samples < self.clients {
                    problems.push("dataset: fewer training samples than clients".into());
                }
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                limit,
            } => {
                for (name, path) in [
                    ("train images", train_images),
                    ("train labels", train_labels),
                    ("test images", test_images),
                    ("test labels", test_labels),
                ] {
                    if !path.exists() {
                        problems.push(format!("dataset: {name} file {path:?} does not exist"));
                    }
                }
                if *limit == Some(0) {
                    problems.push("dataset: sample limit must be positive".into());
                }
            }
        }

        if self.model.hidden.is_empty() {
            problems.push("model: needs at least one hidden layer to train".into());
        }
        if self.model.hidden.iter().any(|&w| w == 0) {
            problems.push("model: hidden layer widths must be positive".into());
        }

        if self.clients == 0 {
            problems.push("clients must be positive".into());
        }
        if !self.participation.is_finite()
            || self.participation <= 0.0
            || self.participation > 1.0
        {
            problems.push(format!(
                "participation must lie in (0, 1], got {}",
                self.participation
            ));
        }
        if self.rounds == 0 {
            problems.push("rounds must be positive".into());
        }
        if self.tau == 0 {
            problems.push("tau must be positive".into());
        }
        if self.batch_size == 0 {
            problems.push("batch size must be positive".into());
        }
        if self.eval_every == 0 {
            problems.push("eval interval must be positive".into());
        }
        if self.aggregator.tracks_reputation() && self.participation != 1.0 {
            problems.push(
                "reputation-weighted voting requires full participation".into(),
            );
        }

        if self.partition.kind == PartitionKind::Dirichlet
            && (!self.partition.alpha.is_finite() || self.partition.alpha <= 0.0)
        {
            problems.push(format!(
                "partition: concentration must be positive, got {}",
                self.partition.alpha
            ));
        }
        if !self.optimizer.eta.is_finite() || self.optimizer.eta < 0.0 {
            problems.push(format!(
                "optimizer: rate must be finite and nonnegative, got {}",
                self.optimizer.eta
            ));
        }
        if let Err(e) = NormalizationFn::new(self.phi.family, self.phi.a) {
            problems.push(format!("phi: {e}"));
        }
        if let Err(e) = ClipBounds::new(self.clip.p_min, self.clip.p_max) {
            problems.push(format!("clip: {e}"));
        }
        if !self.reputation.beta.is_finite() || !(0.0..=1.0).contains(&self.reputation.beta) {
            problems.push(format!(
                "reputation: memory factor must lie in [0, 1], got {}",
                self.reputation.beta
            ));
        }
        if self.clients > 0 {
            if let Err(e) = AttackPlan::new(self.attack.kind, self.attack.num_attackers, self.clients)
            {
                problems.push(format!("attack: {e}"));
            }
        }

        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    fn normalization(&self) -> Result<NormalizationFn> {
        NormalizationFn::new(self.phi.family, self.phi.a)
    }

    /// The federation settings this config encodes.
    pub fn federation_spec(&self) -> Result<FederationSpec> {
        Ok(FederationSpec {
            clients: self.clients,
            participation: self.participation,
            rounds: self.rounds,
            tau: self.tau,
            batch_size: self.batch_size,
            optimizer: self.optimizer.kind,
            eta: self.optimizer.eta,
            aggregator: self.aggregator,
            level: self.quantizer.level,
            phi: self.normalization()?,
            clip: ClipBounds::new(self.clip.p_min, self.clip.p_max)?,
            reputation_beta: self.reputation.beta,
            attack: self.attack.kind,
            num_attackers: self.attack.num_attackers,
            eval_every: self.eval_every,
            eval_threshold: self.eval_threshold,
            master_seed: self.master_seed(),
            eval_seed: self.eval_seed(),
        })
    }

    /// Materializes the train and test datasets.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetConfig::Synthetic {
                train_samples,
                test_samples,
                input_dim,
                classes,
                separation,
            } => {
                let mut rng = stream(self.master_seed(), StreamKind::DataGen, 0, 0);
                let train = synthetic_classification(
                    *train_samples,
                    *input_dim,
                    *classes,
                    *separation,
                    &mut rng,
                )?;
                let test = synthetic_classification(
                    *test_samples,
                    *input_dim,
                    *classes,
                    *separation,
                    &mut rng,
                )?;
                Ok((train, test))
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                limit,
            } => {
                let mut train = load_idx(train_images, train_labels)?;
                if let Some(limit) = limit {
                    if *limit < train.len() {
                        let keep: Vec<usize> = (0..*limit).collect();
                        train = train.subset(&keep)?;
                    }
                }
                let test = load_idx(test_images, test_labels)?;
                Ok((train, test))
            }
        }
    }

    /// Builds the ready-to-run simulation: data, model, shards, server.
    pub fn build(&self) -> Result<Simulation> {
        self.validate()?;
        let (train, test) = self.datasets()?;
        let mut model_rng = stream(self.master_seed(), StreamKind::Init, 0, 0);
        let model = Model::new(
            train.input_dim(),
            &self.model.hidden,
            train.classes(),
            self.model.activation,
            self.model.static_bn,
            DEFAULT_BN_EPSILON,
            &mut model_rng,
        )?;
        let shards = crate::data::partition(
            &train,
            &PartitionSpec {
                kind: self.partition.kind,
                clients: self.clients,
                alpha: self.partition.alpha,
            },
            &mut stream(self.master_seed(), StreamKind::Partition, 0, 0),
        )?;
        Simulation::new(self.federation_spec()?, model, shards, test)
    }
}

/// Builds and runs the experiment, returning one metrics record per round.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RoundMetrics>> {
    config.build()?.run()
}
