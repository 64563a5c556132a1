//! Run configuration: one TOML file of dotted keys covering the network,
//! optimizer, schedule, loss, and augmentation knobs. The file carries a
//! format version and unknown keys are rejected, so a config written for a
//! different build fails loudly instead of training the wrong thing.
//!
//! Schema (all keys, with the desk-scale defaults):
//!
//! ```toml
//! version = 1                 # config format, must match CONFIG_VERSION
//!
//! [net]
//! arch = "vinn"               # "cnn" | "cnn_star" | "vinn"
//! filters = 24                # block width
//! kernel = [3, 3]             # conv kernel (odd dims)
//! attention = false           # competitive attention in the entry/exit blocks
//! sampler = "bilinear"        # "nearest" | "bilinear" | "bicubic" | "area"
//! res_inner = 1.0             # inner-grid voxel size in mm (vinn only)
//!
//! [train]
//! epochs = 20
//! batch = 4
//! seed = 0
//! lr = 0.001                  # peak learning rate
//! lr_min = 0.0                # cosine floor
//! beta1 = 0.95
//! beta2 = 0.999
//! weight_decay = 0.0001
//! eps = 1e-8
//! restart_t0 = 10             # first cosine cycle length (epochs)
//! restart_mult = 2            # cycle growth factor
//! w_hires = 1.0               # amplitude of the two morphology weight terms
//!
//! [augment.exsa]
//! enabled = false
//! range_lo = 0.8
//! range_hi = 1.15
//!
//! [augment.insa]
//! enabled = false
//! sigma = 0.1
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentConfig;
use crate::blocks::BlockConfig;
use crate::data::VOLUME_VOXEL_MM;
use crate::model::{Arch, NetworkSpec, Plane};
use crate::opt::OptConfig;
use crate::resnorm::SampleKernel;
use crate::trainer::TrainSettings;

/// Format version this build reads and writes.
pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config serialize: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("config version {found} unsupported (this build reads {CONFIG_VERSION})")]
    Version { found: u32 },
    #[error("config: {0}")]
    Invalid(String),
}

/// The `[net]` section: everything of a [`NetworkSpec`] that is not
/// per-plane (plane and class count are decided by the run, not the file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    pub arch: Arch,
    pub filters: usize,
    pub kernel: (usize, usize),
    pub attention: bool,
    pub sampler: SampleKernel,
    pub res_inner: f64,
}

impl Default for NetSection {
    fn default() -> Self {
        NetSection {
            arch: Arch::Vinn,
            filters: 24,
            kernel: (3, 3),
            attention: false,
            sampler: SampleKernel::Bilinear,
            res_inner: 1.0,
        }
    }
}

/// The `[train]` section: optimizer, schedule, and loss amplitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub lr: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub restart_t0: usize,
    pub restart_mult: usize,
    pub w_hires: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let opt = OptConfig::default();
        TrainSection {
            epochs: 20,
            batch: 4,
            seed: 0,
            lr: opt.lr,
            lr_min: 0.0,
            beta1: opt.beta1,
            beta2: opt.beta2,
            weight_decay: opt.weight_decay,
            eps: opt.eps,
            restart_t0: 10,
            restart_mult: 2,
            w_hires: 1.0,
        }
    }
}

/// One training/inference run as read from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub net: NetSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub augment: AugmentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            net: NetSection::default(),
            train: TrainSection::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        fs::write(path, toml::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.version != CONFIG_VERSION {
            return Err(ConfigError::Version {
                found: self.version,
            });
        }
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        let t = &self.train;
        if t.epochs == 0 || t.batch == 0 || t.restart_t0 == 0 || t.restart_mult == 0 {
            return bad("epochs, batch, restart_t0, restart_mult must be positive".into());
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad(format!("lr {} must be positive and finite", t.lr));
        }
        if !(t.lr_min >= 0.0 && t.lr_min <= t.lr) {
            return bad(format!("lr_min {} must lie in [0, lr]", t.lr_min));
        }
        for (name, v) in [("beta1", t.beta1), ("beta2", t.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} {v} must lie in [0, 1)"));
            }
        }
        if t.weight_decay < 0.0 || t.w_hires < 0.0 {
            return bad("weight_decay and w_hires must be non-negative".into());
        }
        if t.eps <= 0.0 {
            return bad(format!("eps {} must be positive", t.eps));
        }
        let n = &self.net;
        if n.filters == 0 {
            return bad("filters must be positive".into());
        }
        if n.kernel.0 % 2 == 0 || n.kernel.1 % 2 == 0 {
            return bad(format!("kernel {:?} must have odd dims", n.kernel));
        }
        if !(VOLUME_VOXEL_MM.0..=VOLUME_VOXEL_MM.1).contains(&n.res_inner) {
            return bad(format!(
                "res_inner {} outside supported voxel range [{}, {}]",
                n.res_inner, VOLUME_VOXEL_MM.0, VOLUME_VOXEL_MM.1
            ));
        }
        self.augment
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Instantiate the network spec for one plane (class count differs for
    /// the sagittal view, which trains on merged labels).
    pub fn network_spec(&self, plane: Plane, classes: usize) -> NetworkSpec {
        NetworkSpec {
            arch: self.net.arch,
            plane,
            classes,
            block: BlockConfig {
                filters: self.net.filters,
                kernel: self.net.kernel,
                attention: self.net.attention,
            },
            sampler: self.net.sampler,
            res_inner: self.net.res_inner,
        }
    }

    /// Flatten the file into the trainer's settings.
    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            epochs: self.train.epochs,
            batch: self.train.batch,
            seed: self.train.seed,
            w_hires: self.train.w_hires,
            augment: self.augment,
            opt: OptConfig {
                lr: self.train.lr,
                beta1: self.train.beta1,
                beta2: self.train.beta2,
                weight_decay: self.train.weight_decay,
                eps: self.train.eps,
            },
            restart_t0: self.train.restart_t0,
            restart_mult: self.train.restart_mult,
            lr_min: self.train.lr_min,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The module doc's schema example, verbatim.
    fn schema_example() -> &'static str {
        r#"
version = 1

[net]
arch = "vinn"
filters = 24
kernel = [3, 3]
attention = false
sampler = "bilinear"
res_inner = 1.0

[train]
epochs = 20
batch = 4
seed = 0
lr = 0.001
lr_min = 0.0
beta1 = 0.95
beta2 = 0.999
weight_decay = 0.0001
eps = 1e-8
restart_t0 = 10
restart_mult = 2
w_hires = 1.0

[augment.exsa]
enabled = false
range_lo = 0.8
range_hi = 1.15

[augment.insa]
enabled = false
sigma = 0.1
"#
    }

    #[test]
    fn schema_example_parses_to_defaults() {
        let cfg = RunConfig::parse(schema_example()).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.net.arch = Arch::CnnStar;
        cfg.train.epochs = 70;
        cfg.train.batch = 16;
        cfg.augment.exsa.enabled = true;
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn missing_sections_fall_back_to_defaults() {
        let cfg = RunConfig::parse("version = 1\n").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("version = 1\n[train]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)), "got {err}");
    }

    #[test]
    fn wrong_version_is_rejected() {
        let err = RunConfig::parse("version = 99\n").unwrap_err();
        assert!(matches!(err, ConfigError::Version { found: 99 }));
    }

    #[test]
    fn invariant_violations_are_rejected() {
        for (key, val) in [
            ("lr", "0.0"),
            ("lr_min", "0.5"),
            ("beta1", "1.0"),
            ("eps", "0.0"),
            ("epochs", "0"),
        ] {
            let text = format!("version = 1\n[train]\n{key} = {val}\n");
            assert!(
                RunConfig::parse(&text).is_err(),
                "{key} = {val} should fail"
            );
        }
        let even = "version = 1\n[net]\nkernel = [4, 3]\n";
        assert!(RunConfig::parse(even).is_err());
        let res = "version = 1\n[net]\nres_inner = 3.0\n";
        assert!(RunConfig::parse(res).is_err());
    }

    #[test]
    fn spec_and_settings_reflect_the_file() {
        let text = "version = 1\n[net]\narch = \"cnn\"\nfilters = 64\nkernel = [5, 5]\n[train]\nlr = 0.002\nseed = 9\n";
        let cfg = RunConfig::parse(text).unwrap();
        let spec = cfg.network_spec(Plane::Coronal, 9);
        assert_eq!(spec.arch, Arch::Cnn);
        assert_eq!(spec.block.filters, 64);
        assert_eq!(spec.block.kernel, (5, 5));
        assert_eq!(spec.plane, Plane::Coronal);
        let s = cfg.train_settings();
        assert_eq!(s.opt.lr, 0.002);
        assert_eq!(s.seed, 9);
        assert_eq!(s.epochs, 20, "untouched keys keep defaults");
    }
}
