//! `key = value` run configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use lshg_core::hourglass::{preset, NetworkConfig, NETWORK_KEYS};
use lshg_core::pipeline::{SampleConfig, TrainConfig};
use lshg_core::{Error, Result};

pub const TRAIN_KEYS: [&str; 9] = [
    "lr",
    "batch_size",
    "epochs",
    "seed",
    "sigma",
    "augment",
    "pad_last_batch",
    "data_dir",
    "out_dir",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub sigma: f64,
    pub augment: bool,
    pub pad_last_batch: bool,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            network: NetworkConfig::default(),
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            sigma: SampleConfig::default().sigma,
            augment: t.augment,
            pad_last_batch: t.pad_last_batch,
            data_dir: None,
            out_dir: None,
        }
    }
}

pub fn valid_keys() -> Vec<&'static str> {
    NETWORK_KEYS.iter().chain(&TRAIN_KEYS).copied().collect()
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.network.set(key, value)? {
            return Ok(());
        }
        match key {
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "sigma" => self.sigma = parse(key, value)?,
            "augment" => self.augment = parse(key, value)?,
            "pad_last_batch" => self.pad_last_batch = parse(key, value)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            _ => {
                return Err(Error::Config(format!(
                    "unknown config key `{key}`; valid keys: {}",
                    valid_keys().join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    /// A config file path, or the name of a preset.
    pub fn load(spec: &str) -> Result<Self> {
        let path = Path::new(spec);
        if path.is_file() {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            return Self::parse_str(&text);
        }
        if let Some(p) = preset(spec) {
            return Ok(RunConfig {
                network: p.config,
                ..Default::default()
            });
        }
        Err(Error::Config(format!(
            "`{spec}` is neither a config file nor a preset ({})",
            lshg_core::hourglass::table1_presets()
                .iter()
                .map(|p| p.name)
                .collect::<Vec<_>>()
                .join(", ")
        )))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            augment: self.augment,
            pad_last_batch: self.pad_last_batch,
        }
    }

    pub fn sample_config(&self) -> SampleConfig {
        SampleConfig {
            input_res: self.network.input_res,
            heatmap_res: self.network.heatmap_res,
            sigma: self.sigma,
        }
    }
}

/// Help text listing every config key.
pub fn keys_help() -> String {
    format!(
        "Config files hold `key = value` lines; `#` starts a comment.\n\
         Network keys: {}\n\
         Training keys: {}\n\
         Variants: original, dw1, dw3, ghost, ghost_reduced, multidilated.\n\
         --config also accepts a preset name: {}.",
        NETWORK_KEYS.join(", "),
        TRAIN_KEYS.join(", "),
        lshg_core::hourglass::table1_presets()
            .iter()
            .map(|p| p.name)
            .collect::<Vec<_>>()
            .join(", ")
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use lshg_core::blocks::Variant;

    #[test]
    fn parses_file_text() {
        let c = RunConfig::parse_str(
            "# tiny\nvariant = dw1  # depthwise\nnum_stacks=2\nlr = 1e-3\n\naugment = false\n",
        )
        .unwrap();
        assert_eq!(c.network.variant, Variant::Dw1);
        assert_eq!(c.network.num_stacks, 2);
        assert_eq!(c.lr, 1e-3);
        assert!(!c.augment);
        assert_eq!(c.batch_size, 6);
        assert_eq!(c.epochs, 220);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = RunConfig::parse_str("widht = 3").unwrap_err().to_string();
        assert!(err.contains("hg_channels") && err.contains("batch_size"));
    }

    #[test]
    fn presets_load_by_name() {
        let c = RunConfig::load("ghost_reduced_1").unwrap();
        assert!(c.network.reduced_stem);
        assert!(RunConfig::load("no_such_thing").is_err());
    }
}
