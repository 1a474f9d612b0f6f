//! Flat `key = value` settings: defaults, then a config file, then flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mkpn::{AdamConfig, BurstSpec, LossSchedule, ModelConfig, TrainConfig};

/// Every accepted key with its default.
const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("burst_len", "8"),
    ("kernel_sizes", "1,3,5,7,9,11"),
    ("widths", "32,64,128"),
    ("dtype", "f32"),
    ("steps", "100000"),
    ("batch_size", "4"),
    ("learning_rate", "1e-4"),
    ("beta1", "0.9"),
    ("beta2", "0.999"),
    ("eps", "1e-8"),
    ("lambda1", "0.5"),
    ("lambda2", "0.5"),
    ("beta", "100"),
    ("alpha", "0.9998"),
    ("patch", "128"),
    ("poisson_lambda", "1.5"),
    ("images", ""),
    ("corpus_count", "256"),
    ("corpus_size", "256"),
    ("checkpoint_every", "1000"),
    ("eval_every", "0"),
    ("log_every", "100"),
    ("gain", "4"),
    ("count", "10"),
    ("mode", "fused"),
    ("extent", "128"),
    ("reps", "3"),
    ("kernel_sets", "1,3,5;5,11;1,3,5,7,9,11"),
];

#[derive(Debug)]
pub struct SettingsError(pub String);

impl std::fmt::Display for SettingsError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn defaults() -> Self {
        Self {
            values: KEYS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<(), SettingsError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(SettingsError(format!("unknown config key `{key}`"))),
        }
    }

    /// Applies a config file; blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), SettingsError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SettingsError(format!("{origin}:{}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| SettingsError(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), SettingsError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SettingsError(format!("cannot read {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("`{key}` is not a settings key"))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, SettingsError> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| SettingsError(format!("invalid value `{v}` for `{key}`")))
    }

    pub fn list(&self, key: &str) -> Result<Vec<usize>, SettingsError> {
        parse_list(self.get(key)).map_err(|_| SettingsError(format!("invalid list `{}` for `{key}`", self.get(key))))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    /// All keys in sorted order, one `key = value` per line.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn model(&self) -> Result<ModelConfig, SettingsError> {
        ModelConfig::new(
            self.parse("burst_len")?,
            &self.list("kernel_sizes")?,
            &self.list("widths")?,
        )
        .map_err(|e| SettingsError(e.to_string()))
    }

    pub fn train(&self) -> Result<TrainConfig, SettingsError> {
        let config = TrainConfig {
            model: self.model()?,
            adam: AdamConfig {
                learning_rate: self.parse("learning_rate")?,
                beta1: self.parse("beta1")?,
                beta2: self.parse("beta2")?,
                eps: self.parse("eps")?,
            },
            schedule: LossSchedule {
                lambda1: self.parse("lambda1")?,
                lambda2: self.parse("lambda2")?,
                beta: self.parse("beta")?,
                alpha: self.parse("alpha")?,
                step: 0,
            },
            steps: self.parse("steps")?,
            batch_size: self.parse("batch_size")?,
            patch: self.parse("patch")?,
            poisson_lambda: self.parse("poisson_lambda")?,
            seed: self.parse("seed")?,
        };
        if config.steps == 0 {
            return Err(SettingsError("steps must be >= 1".into()));
        }
        config.validate().map_err(|e| SettingsError(e.to_string()))?;
        Ok(config)
    }

    pub fn burst_spec(&self) -> Result<BurstSpec, SettingsError> {
        Ok(BurstSpec {
            burst_len: self.parse("burst_len")?,
            patch: self.parse("patch")?,
            poisson_lambda: self.parse("poisson_lambda")?,
        })
    }

    /// `kernel_sets` as a list of size lists separated by `;`.
    pub fn kernel_sets(&self) -> Result<Vec<Vec<usize>>, SettingsError> {
        self.get("kernel_sets")
            .split(';')
            .map(|set| {
                parse_list(set).map_err(|_| SettingsError(format!("invalid kernel set `{set}`")))
            })
            .collect()
    }
}

pub fn parse_list(s: &str) -> Result<Vec<usize>, std::num::ParseIntError> {
    s.split(',').map(|p| p.trim().parse()).collect()
}
