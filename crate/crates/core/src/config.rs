//! Flat TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::leakage::{Granularity, LeakTarget, LeakageConfig};
use crate::mlp::{Architecture, Hyperparams};
use crate::training::SelectionMode;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub config_version: u32,

    pub arch: String,
    /// `baseline`, `modelwise` or `layerwise`.
    pub mode: String,
    /// Parameter sets per layer (ignored for baseline).
    pub models: usize,

    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub init_scale: f32,
    pub seed: u64,

    /// Store quantized constants in bundles and report quantized accuracy.
    pub quantized: bool,

    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Use only the first N samples; 0 means all.
    pub train_limit: usize,
    pub test_limit: usize,

    pub eval_trials: usize,

    pub noise_sigma: f64,
    /// `computed` or `all`.
    pub leak_target: String,
    /// `node` or `element`.
    pub granularity: String,
    pub n_traces: usize,
    pub threshold: f64,
    pub checkpoints: Vec<usize>,
    pub calibration_images: usize,
    /// Test-set image used as the fixed TVLA input.
    pub fixed_image_index: usize,

    /// Not part of the config hash.
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let hyper = Hyperparams::default();
        let data = PathBuf::from("data/mnist");
        Self {
            config_version: CONFIG_VERSION,
            arch: "784-10".into(),
            mode: "layerwise".into(),
            models: 3,
            learning_rate: hyper.learning_rate,
            epochs: hyper.epochs,
            batch_size: hyper.batch_size,
            init_scale: hyper.init_scale,
            seed: hyper.seed,
            quantized: true,
            train_images: data.join("train-images-idx3-ubyte"),
            train_labels: data.join("train-labels-idx1-ubyte"),
            test_images: data.join("t10k-images-idx3-ubyte"),
            test_labels: data.join("t10k-labels-idx1-ubyte"),
            train_limit: 0,
            test_limit: 0,
            eval_trials: 1,
            noise_sigma: 2.0,
            leak_target: "computed".into(),
            granularity: "node".into(),
            n_traces: 20_000,
            threshold: crate::tvla::DEFAULT_THRESHOLD,
            checkpoints: vec![2000, 5000, 10_000, 20_000],
            calibration_images: 128,
            fixed_image_index: 0,
            out_dir: PathBuf::from("out"),
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
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.config_version != CONFIG_VERSION {
            return bad(format!("config_version {} unsupported (expected {CONFIG_VERSION})", self.config_version));
        }
        self.architecture()?;
        let mode = self.selection_mode()?;
        if mode != SelectionMode::Baseline && self.models < 2 {
            return bad(format!("{} mode needs models >= 2", self.mode));
        }
        self.hyperparams().validate().map_err(|e| Error::Config(e.to_string()))?;
        if !matches!(self.leak_target.as_str(), "computed" | "all") {
            return bad(format!("leak_target must be 'computed' or 'all', got '{}'", self.leak_target));
        }
        if !matches!(self.granularity.as_str(), "node" | "element") {
            return bad(format!("granularity must be 'node' or 'element', got '{}'", self.granularity));
        }
        self.leakage().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.eval_trials == 0 {
            return bad("eval_trials must be at least 1".into());
        }
        if self.n_traces < 2 {
            return bad("n_traces must be at least 2".into());
        }
        if self.threshold.is_nan() || self.threshold <= 0.0 {
            return bad("threshold must be positive".into());
        }
        if self.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return bad("checkpoints must increase strictly".into());
        }
        if self.checkpoints.last().is_some_and(|&c| c > self.n_traces) {
            return bad("checkpoints may not exceed n_traces".into());
        }
        if self.calibration_images == 0 {
            return bad("calibration_images must be at least 1".into());
        }
        Ok(())
    }

    pub fn architecture(&self) -> Result<Architecture> {
        self.arch.parse().map_err(|e: Error| Error::Config(e.to_string()))
    }

    pub fn selection_mode(&self) -> Result<SelectionMode> {
        SelectionMode::from_name(&self.mode).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            init_scale: self.init_scale,
        }
    }

    pub fn leakage(&self) -> LeakageConfig {
        LeakageConfig {
            noise_sigma: self.noise_sigma,
            seed: self.seed,
            target: if self.leak_target == "all" { LeakTarget::AllNodes } else { LeakTarget::ComputedNodes },
            granularity: if self.granularity == "element" { Granularity::PerElement } else { Granularity::PerNode },
        }
    }

    /// SHA-256 of the canonical TOML form with `out_dir` cleared.
    pub fn hash(&self) -> [u8; 32] {
        let canonical = ExperimentConfig { out_dir: PathBuf::new(), ..self.clone() };
        Sha256::digest(canonical.to_toml().as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(cfg.hyperparams(), Hyperparams::default());
    }

    #[test]
    fn partial_files_take_defaults() {
        let cfg = ExperimentConfig::from_toml("arch = \"784-10\"\nmode = \"modelwise\"\nseed = 4\n").unwrap();
        assert_eq!(cfg.arch, "784-10");
        assert_eq!(cfg.models, 3);
        assert_eq!(cfg.seed, 4);
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "config_version = 2",
            "mode = \"stacked\"",
            "arch = \"784\"",
            "models = 1",
            "eval_trials = 0",
            "unknown_key = 1",
            "leak_target = \"some\"",
            "checkpoints = [10, 5]",
            "n_traces = 100\ncheckpoints = [200]",
            "learning_rate = -1.0",
        ] {
            assert!(ExperimentConfig::from_toml(text).is_err(), "{text}");
        }
    }

    #[test]
    fn hash_ignores_output_directory() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { out_dir: "elsewhere".into(), ..a.clone() };
        let c = ExperimentConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash_hex().len(), 64);
    }
}
