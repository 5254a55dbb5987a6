//! `run.toml`: every `GaConfig` key plus the data-side settings below, all
//! optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uap_core::ga::GaConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    pub batch_size: usize,
    pub bounds_sample_batches: usize,
    /// Precomputed bounds (`uap bounds` output); relative to the config file.
    pub bounds: Option<PathBuf>,
    /// Used only when the oracle has no preprocessing descriptor.
    pub mean: Option<[f64; 3]>,
    pub std: Option<[f64; 3]>,
    pub shuffle_seed: Option<u64>,
    pub snapshot_every: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            batch_size: 64,
            bounds_sample_batches: 8,
            bounds: None,
            mean: None,
            std: None,
            shuffle_seed: None,
            snapshot_every: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub ga: GaConfig,
    pub data: DataSettings,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let table: toml::Table = toml::from_str(text).map_err(|e| e.to_string())?;
        let ga_keys = toml::Table::try_from(GaConfig::default()).map_err(|e| e.to_string())?;
        let (mut ga, mut data) = (toml::Table::new(), toml::Table::new());
        for (key, value) in table {
            if ga_keys.contains_key(&key) {
                ga.insert(key, value);
            } else {
                data.insert(key, value);
            }
        }
        let ga: GaConfig = ga.try_into().map_err(|e: toml::de::Error| e.to_string())?;
        let data: DataSettings = data.try_into().map_err(|e: toml::de::Error| e.to_string())?;
        ga.validate().map_err(|e| e.to_string())?;
        if data.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        if data.mean.is_some() != data.std.is_some() {
            return Err("mean and std must be given together".into());
        }
        Ok(Self { ga, data })
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut cfg = Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        if let (Some(bounds), Some(dir)) = (&cfg.data.bounds, path.parent()) {
            cfg.data.bounds = Some(dir.join(bounds));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        let mut table = toml::Table::try_from(&self.ga).expect("config serializes");
        table.extend(toml::Table::try_from(&self.data).expect("config serializes"));
        toml::to_string(&table).expect("table serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn splits_engine_and_data_keys() {
        let cfg = RunConfig::parse("population_size = 20\nmax_generations = 10\nbatch_size = 32\neps_end = 25.0\n").unwrap();
        assert_eq!(cfg.ga.population_size, 20);
        assert_eq!(cfg.ga.max_generations, 10);
        assert_eq!(cfg.ga.eps_end, 25.0);
        assert_eq!(cfg.data.batch_size, 32);
        assert_eq!(cfg.ga.p_cross_start, 0.9);
    }

    #[test]
    fn rejects_unknown_and_invalid_keys() {
        let err = RunConfig::parse("populaton_size = 20").unwrap_err();
        assert!(err.contains("populaton_size"), "{err}");
        assert!(RunConfig::parse("p_cross_start = 1.5").is_err());
        assert!(RunConfig::parse("mean = [0.5, 0.5, 0.5]").is_err());
        assert!(RunConfig::parse("gamma_mode = \"confidence_weighted\"").is_ok());
    }

    #[test]
    fn serialized_config_parses_back() {
        let mut cfg = RunConfig::default();
        cfg.ga.rng_seed = 42;
        cfg.data.mean = Some([0.5; 3]);
        cfg.data.std = Some([0.25; 3]);
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }
}
