//! Pipeline configuration file.
//!
//! ```toml
//! seed = 0
//! output_dir = "runs/synthetic"
//!
//! [data]
//! source = "synthetic"      # or "idx" with `images` and `labels` paths
//! n_per_class = 200
//! public = [5, 6, 7, 8, 9]
//! private = [0, 1, 2, 3, 4]
//!
//! [attack]
//! preset = "desk"
//! lambda2 = 0.5             # any preset field may be overridden
//!
//! [sweep]
//! lambda2 = [0.0, 0.7]
//! ```

use std::path::{Path, PathBuf};

use dmmia_core::attack::AttackConfig;
use dmmia_core::models::{ClassifierSpec, PriorConfig, PriorMode, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    /// Where artifacts go. Not part of the digest, so a rerun elsewhere
    /// produces identical artifacts.
    #[serde(default = "default_output_dir", skip_serializing)]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub target: TrainSettings,
    #[serde(default)]
    pub evaluator: TrainSettings,
    #[serde(default)]
    pub prior: PriorSettings,
    #[serde(default)]
    pub attack: AttackSettings,
    #[serde(default)]
    pub metrics: MetricSettings,
    #[serde(default)]
    pub sweep: SweepSettings,
    #[serde(default)]
    pub theory: TheorySettings,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("dmmia-out")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Synthetic digits per class.
    pub n_per_class: usize,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub public: Vec<usize>,
    pub private: Vec<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            n_per_class: 200,
            images: None,
            labels: None,
            public: (5..10).collect(),
            private: (0..5).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Target,
    Evaluator,
}

/// Classifier training settings; `hidden` and `seed_offset` default per role
/// (target `[256, 128]` / 1, evaluator `[320, 128]` / 2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub held_out_fraction: f64,
    pub hidden: Option<Vec<usize>>,
    /// Added to the global seed.
    pub seed_offset: Option<u64>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            lr: d.lr,
            batch_size: d.batch_size,
            held_out_fraction: d.held_out_fraction,
            hidden: None,
            seed_offset: None,
        }
    }
}

impl TrainSettings {
    pub fn spec(&self, role: Role, num_classes: usize) -> ClassifierSpec {
        let base = match role {
            Role::Target => ClassifierSpec::target(num_classes),
            Role::Evaluator => ClassifierSpec::evaluator(num_classes),
        };
        match &self.hidden {
            Some(h) => ClassifierSpec { hidden: h.clone(), ..base },
            None => base,
        }
    }

    pub fn train_config(&self, role: Role, global_seed: u64) -> TrainConfig {
        let offset = self.seed_offset.unwrap_or(match role {
            Role::Target => 1,
            Role::Evaluator => 2,
        });
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed: global_seed.wrapping_add(offset),
            held_out_fraction: self.held_out_fraction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Autoencoder,
    Gan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSettings {
    pub mode: PriorKind,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mse_threshold: f64,
    pub seed_offset: u64,
}

impl Default for PriorSettings {
    fn default() -> Self {
        let d = PriorConfig::default();
        Self {
            mode: PriorKind::Autoencoder,
            epochs: d.epochs,
            lr: d.lr,
            batch_size: d.batch_size,
            mse_threshold: d.mse_threshold,
            seed_offset: 3,
        }
    }
}

impl PriorSettings {
    pub fn prior_config(&self, global_seed: u64) -> PriorConfig {
        PriorConfig {
            mode: match self.mode {
                PriorKind::Autoencoder => PriorMode::Autoencoder,
                PriorKind::Gan => PriorMode::Gan,
            },
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed: global_seed.wrapping_add(self.seed_offset),
            mse_threshold: self.mse_threshold,
        }
    }
}

/// A preset plus optional per-field overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSettings {
    pub preset: String,
    /// Which attacks `attack` runs: "dmmia" and/or "baseline".
    pub methods: Vec<String>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub epochs: Option<usize>,
    pub pool_size: Option<usize>,
    pub n_selected: Option<usize>,
    pub lr: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub batch_size: Option<usize>,
    pub n_w: Option<usize>,
    pub rho: Option<usize>,
    pub r: Option<f64>,
    pub shift_ensemble: Option<bool>,
    pub normalize_features: Option<bool>,
    /// Run classes on the rayon pool.
    pub parallel: bool,
}

impl Default for AttackSettings {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            methods: vec![METHOD_DMMIA.into(), METHOD_BASELINE.into()],
            lambda1: None,
            lambda2: None,
            epochs: None,
            pool_size: None,
            n_selected: None,
            lr: None,
            beta1: None,
            beta2: None,
            batch_size: None,
            n_w: None,
            rho: None,
            r: None,
            shift_ensemble: None,
            normalize_features: None,
            parallel: true,
        }
    }
}

pub const METHOD_DMMIA: &str = "dmmia";
pub const METHOD_BASELINE: &str = "baseline";

impl AttackSettings {
    /// The DMMIA configuration for one target class.
    pub fn attack_config(&self, target_class: usize, seed: u64) -> Result<AttackConfig, CliError> {
        let mut c = AttackConfig::preset(&self.preset, target_class).map_err(CliError::from)?;
        macro_rules! over {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        over!(lambda1, lambda2, epochs, pool_size, n_selected, lr, beta1, beta2, batch_size, n_w, rho, r, shift_ensemble, normalize_features);
        c.seed = seed;
        Ok(c)
    }

    /// Configuration of `method` for one target class.
    pub fn for_method(&self, method: &str, target_class: usize, seed: u64) -> Result<AttackConfig, CliError> {
        let c = self.attack_config(target_class, seed)?;
        match method {
            METHOD_DMMIA => Ok(c),
            METHOD_BASELINE => Ok(c.as_baseline()),
            other => Err(CliError::config(format!("unknown attack method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricSettings {
    /// Neighbourhood size for PRDC; chosen from the set sizes when absent.
    pub prdc_k: Option<usize>,
}

/// Value lists for the grid; an empty list keeps the attack setting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSettings {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub n_w: Vec<usize>,
    pub rho: Vec<usize>,
    pub r: Vec<f64>,
    /// Private classes to attack per cell; all of them when empty.
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheorySettings {
    pub probes: usize,
    pub mc_samples: usize,
}

impl Default for TheorySettings {
    fn default() -> Self {
        Self {
            probes: 20,
            mc_samples: 1_000_000,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::missing(format!("config file {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if cfg.output_dir.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.output_dir = dir.join(&cfg.output_dir);
            }
        }
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.data.images, &mut cfg.data.labels].into_iter().flatten() {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.data.source == DataSource::Idx && (self.data.images.is_none() || self.data.labels.is_none()) {
            return Err(CliError::config("data.source = \"idx\" needs data.images and data.labels"));
        }
        for m in &self.attack.methods {
            if m != METHOD_DMMIA && m != METHOD_BASELINE {
                return Err(CliError::config(format!("unknown attack method {m:?}")));
            }
        }
        for y in 0..self.data.private.len() {
            self.attack.attack_config(y, self.seed)?.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    pub fn num_private(&self) -> usize {
        self.data.private.len()
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = PipelineConfig::from_toml("").unwrap();
        assert_eq!(c.data.private, vec![0, 1, 2, 3, 4]);
        assert_eq!(c.attack.attack_config(2, 0).unwrap(), AttackConfig::desk(2));
        assert_eq!(c.target.spec(Role::Target, 5), ClassifierSpec::target(5));
        assert_eq!(c.evaluator.spec(Role::Evaluator, 5).hidden, vec![320, 128]);
        assert_ne!(c.target.train_config(Role::Target, 0).seed, c.evaluator.train_config(Role::Evaluator, 0).seed);
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = PipelineConfig::from_toml("sed = 1").unwrap_err();
        assert!(e.to_string().contains("unknown field"), "{e}");
        assert!(PipelineConfig::from_toml("[attack]\nlamda1 = 0.3").is_err());
    }

    #[test]
    fn overrides_apply_and_baseline_zeroes_weights() {
        let c = PipelineConfig::from_toml("[attack]\npreset = \"paper\"\nlambda2 = 0.5\nn_w = 40\nrho = 10").unwrap();
        let a = c.attack.for_method(METHOD_DMMIA, 1, 7).unwrap();
        assert_eq!((a.lambda1, a.lambda2, a.n_w, a.rho, a.seed, a.pool_size), (0.3, 0.5, 40, 10, 7, 2000));
        let b = c.attack.for_method(METHOD_BASELINE, 1, 7).unwrap();
        assert_eq!(b, AttackConfig { lambda1: 0.0, lambda2: 0.0, baseline: true, ..a });
    }

    #[test]
    fn invalid_attack_values_rejected() {
        assert!(PipelineConfig::from_toml("[attack]\nrho = 100").is_err());
        assert!(PipelineConfig::from_toml("[attack]\npreset = \"huge\"").is_err());
        assert!(PipelineConfig::from_toml("[data]\nsource = \"idx\"").is_err());
    }

    #[test]
    fn digest_ignores_output_dir_and_tracks_content() {
        let a = PipelineConfig::from_toml("output_dir = \"a\"").unwrap();
        let b = PipelineConfig::from_toml("output_dir = \"b\"").unwrap();
        let c = PipelineConfig::from_toml("seed = 1").unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
        assert_eq!(a.digest().len(), 64);
    }
}
