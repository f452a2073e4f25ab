//! Experiment configuration, read from a TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::association::AssociationConfig;
use crate::autoencoder::HIDDEN;
use crate::community::CommunityConfig;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::fedavg::FedConfig;
use crate::ocsvm::{Gamma, OcsvmParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        n_classes: usize,
        n_per_class: usize,
        n_features: usize,
        separation: f64,
        noise_sigma: f64,
        /// Extra samples per class generated for the test pool.
        test_per_class: usize,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Average-pooling factor applied to both axes (1, 2 or 4).
        #[serde(default = "one")]
        pool: usize,
    },
}

fn one() -> usize {
    1
}

impl DatasetSource {
    pub fn synthetic_spec(&self) -> Option<SyntheticSpec> {
        match *self {
            DatasetSource::Synthetic {
                n_classes,
                n_per_class,
                n_features,
                separation,
                noise_sigma,
                test_per_class,
            } => Some(SyntheticSpec {
                n_classes,
                n_per_class: n_per_class + test_per_class,
                n_features,
                separation,
                noise_sigma,
            }),
            DatasetSource::Idx { .. } => None,
        }
    }
}

impl Default for DatasetSource {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        DatasetSource::Synthetic {
            n_classes: s.n_classes,
            n_per_class: s.n_per_class,
            n_features: s.n_features,
            separation: s.separation,
            noise_sigma: s.noise_sigma,
            test_per_class: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    pub d: f64,
    #[serde(default)]
    pub selected_classes: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_train_per_client: Option<usize>,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self {
            d: 0.1,
            selected_classes: Vec::new(),
            max_train_per_client: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcsvmSection {
    /// Defaults to the contamination `d` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
    #[serde(default)]
    pub gamma: Gamma,
    pub tol: f64,
    pub max_iter_per_sample: usize,
}

impl Default for OcsvmSection {
    fn default() -> Self {
        let p = OcsvmParams::default();
        Self {
            nu: None,
            gamma: p.gamma,
            tol: p.tol,
            max_iter_per_sample: p.max_iter_per_sample,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderSection {
    pub hidden: Vec<usize>,
}

impl Default for AutoencoderSection {
    fn default() -> Self {
        Self {
            hidden: HIDDEN.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub test_per_client: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            test_per_client: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Clients per inlier class; one full run per value.
    pub p: Vec<usize>,
    /// Where artifacts go; the command line `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub dataset: DatasetSource,
    #[serde(default)]
    pub partition: PartitionSection,
    #[serde(default)]
    pub ocsvm: OcsvmSection,
    #[serde(default)]
    pub association: AssociationConfig,
    #[serde(default)]
    pub community: CommunityConfig,
    #[serde(default)]
    pub federation: FedConfig,
    #[serde(default)]
    pub autoencoder: AutoencoderSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            p: vec![5],
            output_dir: None,
            dataset: DatasetSource::default(),
            partition: PartitionSection::default(),
            ocsvm: OcsvmSection::default(),
            association: AssociationConfig::default(),
            community: CommunityConfig::default(),
            federation: FedConfig::default(),
            autoencoder: AutoencoderSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn ocsvm_params(&self) -> OcsvmParams {
        OcsvmParams {
            nu: self.ocsvm.nu.unwrap_or(self.partition.d),
            gamma: self.ocsvm.gamma,
            tol: self.ocsvm.tol,
            max_iter_per_sample: self.ocsvm.max_iter_per_sample,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p.is_empty() {
            return Err(Error::Config("p list is empty".into()));
        }
        if self.p.contains(&0) {
            return Err(Error::Config("p must be a positive integer".into()));
        }
        let d = self.partition.d;
        if !(d > 0.0 && d < 0.5) {
            return Err(Error::Config(format!(
                "contamination d = {d} outside (0, 0.5)"
            )));
        }
        if matches!(self.partition.max_train_per_client, Some(c) if c < 2) {
            return Err(Error::Config(
                "max_train_per_client must be at least 2".into(),
            ));
        }
        match &self.dataset {
            DatasetSource::Synthetic {
                n_classes,
                n_features,
                n_per_class,
                test_per_class,
                separation,
                noise_sigma,
            } => {
                if *n_classes < 2 || *n_features == 0 || *n_per_class == 0 || *test_per_class == 0 {
                    return Err(Error::Config(
                        "synthetic dataset needs >= 2 classes and positive sizes".into(),
                    ));
                }
                if !(*separation >= 0.0 && *noise_sigma >= 0.0) {
                    return Err(Error::Config(
                        "separation and noise_sigma must be non-negative".into(),
                    ));
                }
            }
            DatasetSource::Idx { pool, .. } => {
                if ![1, 2, 4].contains(pool) {
                    return Err(Error::Config(format!("pool must be 1, 2 or 4, got {pool}")));
                }
            }
        }
        self.ocsvm_params()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.association.validate()?;
        self.community.validate()?;
        self.federation.validate()?;
        if self.autoencoder.hidden.is_empty() || self.autoencoder.hidden.contains(&0) {
            return Err(Error::Config(
                "autoencoder hidden widths must be positive".into(),
            ));
        }
        if self.eval.test_per_client < 2 {
            return Err(Error::Config("test_per_client must be at least 2".into()));
        }
        Ok(())
    }
}
