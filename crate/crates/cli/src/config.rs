//! Layered run configuration: a TOML file sets defaults, command-line flags
//! override individual values, and the fully resolved result is echoed into
//! every output directory so a run can be reproduced from its artifacts
//! alone.

use crate::error::CliError;
use freqdiff_core::cache::E2crfConfig;
use freqdiff_core::sde::DiffusionSchedule;
use freqdiff_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub sde: SdeSection,
    pub cache: CacheSection,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
    pub bench: BenchSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub generator: String,
    pub n: usize,
    pub m: usize,
    pub count: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { generator: "sine_mix".to_string(), n: 128, m: 1, count: 256, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub rff_dim: usize,
    pub q_for_all: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { n_layers: 4, d_model: 32, n_heads: 4, rff_dim: 16, q_for_all: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdeSection {
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for SdeSection {
    fn default() -> Self {
        Self { beta_min: 0.1, beta_max: 20.0 }
    }
}

/// Caching policy settings. `k_low` defaults to ⌊N/10⌋ when absent.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheSection {
    pub k_low: Option<usize>,
    pub tau0: f64,
    pub energy_eps: f64,
    pub eta: f64,
    pub refresh_interval: usize,
    pub tau_safe: f64,
    pub tau_warn: f64,
    pub probe_fraction: f64,
    pub delta_steps: usize,
    pub alpha_cap: f64,
}

impl Default for CacheSection {
    fn default() -> Self {
        let d = E2crfConfig::defaults_for(10);
        Self {
            k_low: None,
            tau0: d.tau0,
            energy_eps: d.energy_eps,
            eta: d.eta,
            refresh_interval: d.refresh_interval,
            tau_safe: d.tau_safe,
            tau_warn: d.tau_warn,
            probe_fraction: d.probe_fraction,
            delta_steps: d.delta_steps,
            alpha_cap: d.alpha_cap,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub val_fraction: f64,
    pub t_min: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr_max: d.lr_max,
            warmup_epochs: d.warmup_epochs,
            weight_decay: d.weight_decay,
            seed: d.seed,
            val_fraction: d.val_fraction,
            t_min: d.t_min,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub policy: String,
    pub steps: usize,
    pub chains: usize,
    pub seed: u64,
    pub fixed_period: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { policy: "baseline".to_string(), steps: 1000, chains: 16, seed: 0, fixed_period: 2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_proj: usize,
    pub p: f64,
    pub seed: u64,
    /// Larger sets are uniformly subsampled to this many rows.
    pub max_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { n_proj: 1000, p: 2.0, seed: 0, max_samples: 10_000 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub steps: usize,
    pub repeats: usize,
    pub seed: u64,
    pub policies: Vec<String>,
    pub sweep_k: Vec<usize>,
    pub sweep_r: Vec<usize>,
    /// Projections for the quality column.
    pub n_proj: usize,
    /// Chains generated per policy for the quality column.
    pub eval_samples: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            steps: 1000,
            repeats: 5,
            seed: 0,
            policies: vec![
                "baseline".to_string(),
                "fixed_schedule".to_string(),
                "e2crf_no_feedback".to_string(),
                "e2crf_uniform_tau".to_string(),
                "e2crf".to_string(),
            ],
            sweep_k: vec![1, 3, 5],
            sweep_r: vec![100, 150, 200, 500, 1000],
            n_proj: 200,
            eval_samples: 64,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))
            }
        }
    }

    pub fn schedule(&self) -> DiffusionSchedule {
        DiffusionSchedule { beta_min: self.sde.beta_min, beta_max: self.sde.beta_max, n_steps: self.sample.steps }
    }

    pub fn cache_config(&self, n: usize) -> E2crfConfig {
        let mut c = E2crfConfig::defaults_for(n);
        if let Some(k) = self.cache.k_low {
            c.k_low = k;
        }
        c.tau0 = self.cache.tau0;
        c.energy_eps = self.cache.energy_eps;
        c.eta = self.cache.eta;
        c.refresh_interval = self.cache.refresh_interval;
        c.tau_safe = self.cache.tau_safe;
        c.tau_warn = self.cache.tau_warn;
        c.probe_fraction = self.cache.probe_fraction;
        c.delta_steps = self.cache.delta_steps;
        c.alpha_cap = self.cache.alpha_cap;
        c
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr_max: self.train.lr_max,
            warmup_epochs: self.train.warmup_epochs,
            weight_decay: self.train.weight_decay,
            seed: self.train.seed,
            val_fraction: self.train.val_fraction,
            t_min: self.train.t_min,
        }
    }
}

/// Replace `dst` when the flag was given.
pub fn override_opt<T: Clone>(dst: &mut T, flag: &Option<T>) {
    if let Some(v) = flag {
        *dst = v.clone();
    }
}

/// Serialized resolved config with run metadata, written into every output
/// directory. No timestamps: artifacts must be byte-reproducible.
pub fn resolved_config_text(cfg: &RunConfig, command: &str) -> Result<String, CliError> {
    #[derive(Serialize)]
    struct Meta<'a> {
        tool_version: &'a str,
        command: &'a str,
    }
    #[derive(Serialize)]
    struct Resolved<'a> {
        meta: Meta<'a>,
        #[serde(flatten)]
        config: &'a RunConfig,
    }
    toml::to_string_pretty(&Resolved {
        meta: Meta { tool_version: env!("CARGO_PKG_VERSION"), command },
        config: cfg,
    })
    .map_err(|e| CliError::Io(format!("cannot serialize resolved config: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.data.n, 128);
        assert_eq!(back.bench.policies.len(), 5);
        assert_eq!(back.eval.n_proj, 1000);
    }

    #[test]
    fn partial_file_fills_with_defaults() {
        let cfg: RunConfig = toml::from_str("[data]\nn = 64\n[cache]\nk_low = 3\n").unwrap();
        assert_eq!(cfg.data.n, 64);
        assert_eq!(cfg.data.m, 1);
        assert_eq!(cfg.cache.k_low, Some(3));
        assert_eq!(cfg.cache_config(64).k_low, 3);
        assert_eq!(cfg.cache_config(640).k_low, 3);
        let plain: RunConfig = toml::from_str("").unwrap();
        assert_eq!(plain.cache_config(640).k_low, 64);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("[data]\nbogus = 1\n");
        assert!(err.is_err());
    }

    #[test]
    fn resolved_text_carries_version_and_parses_back() {
        let text = resolved_config_text(&RunConfig::default(), "sample").unwrap();
        assert!(text.contains("tool_version"));
        assert!(text.contains("[meta]"));
        // The config portion still parses after stripping the meta table.
        let value: toml::Value = toml::from_str(&text).unwrap();
        assert_eq!(
            value["meta"]["command"].as_str(),
            Some("sample")
        );
    }
}
