//! The TOML run configuration. Missing keys take the full-scale defaults;
//! [`SearchConfig::desk`] is the small profile used by default on the
//! command line.

use std::fs;
use std::path::{Path, PathBuf};

use msgdas_core::engine::{EvalConfig, SearchHyper};
use msgdas_core::searchspace::NetworkSpec;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{format_err, io_err, HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n: usize,
    pub classes: usize,
    pub hw: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n: 512,
            classes: 2,
            hw: 16,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Cifar10Config {
    /// Directory holding `data_batch_1.bin` .. `data_batch_5.bin`.
    pub dir: Option<PathBuf>,
    pub subset_per_class: Option<usize>,
    pub downsample_to: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    pub synthetic: SyntheticConfig,
    pub cifar10: Cifar10Config,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Cifar10,
            synthetic: SyntheticConfig::default(),
            cifar10: Cifar10Config::default(),
        }
    }
}

/// Network shape; classes and input channels come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub num_cells: usize,
    pub init_channels: usize,
    pub stem_multiplier: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let s = NetworkSpec::search_profile(10, 3);
        Self {
            num_cells: s.num_cells,
            init_channels: s.init_channels,
            stem_multiplier: s.stem_multiplier,
        }
    }
}

impl NetworkConfig {
    pub fn spec(&self, num_classes: usize, in_channels: usize) -> NetworkSpec {
        NetworkSpec {
            num_cells: self.num_cells,
            init_channels: self.init_channels,
            num_classes,
            in_channels,
            stem_multiplier: self.stem_multiplier,
        }
    }

    pub fn spec_for(&self, ds: &Dataset) -> NetworkSpec {
        self.spec(ds.num_classes, ds.image_shape()[0])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub search: SearchHyper,
    pub eval: EvalConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl SearchConfig {
    /// CIFAR-10, 8 cells of 16 channels, K = 2, 240 epochs, batch 128.
    pub fn full() -> Self {
        Self {
            out: None,
            data: DataConfig::default(),
            network: NetworkConfig::default(),
            search: SearchHyper::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Synthetic 2-class 16×16 data, 4 cells of 8 channels, K = 2, batch
    /// 64, 30 epochs.
    pub fn desk() -> Self {
        let net = NetworkSpec::desk_profile(2, 3);
        let mut cfg = Self::full();
        cfg.data.dataset = DatasetKind::Synthetic;
        cfg.network = NetworkConfig {
            num_cells: net.num_cells,
            init_channels: net.init_channels,
            stem_multiplier: net.stem_multiplier,
        };
        cfg.search.k = 2;
        cfg.search.batch_size = 64;
        cfg.search.epochs = 30;
        cfg.eval.batch_size = 64;
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text).map_err(|e| format_err(path, e.message()))
    }

    pub fn validate(&self) -> Result<()> {
        self.search.validate()?;
        // TOML integers are signed 64-bit
        if self.search.seed > i64::MAX as u64 || self.eval.seed > i64::MAX as u64 {
            return Err(HarnessError::Config(format!("seeds must be at most {}", i64::MAX)));
        }
        let s = &self.data.synthetic;
        if self.data.dataset == DatasetKind::Synthetic && (s.classes < 2 || s.n < s.classes || s.hw == 0) {
            return Err(HarnessError::Config(format!("bad synthetic data settings {s:?}")));
        }
        if self.eval.epochs == 0 || self.eval.batch_size == 0 {
            return Err(HarnessError::Config("eval epochs and batch_size must be positive".into()));
        }
        self.network.spec(2, 3).validate()?;
        Ok(())
    }
}
