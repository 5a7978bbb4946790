//! Run configuration: a sectioned TOML file plus `--key value` overrides.
//!
//! Sections are `[run]`, `[model]`, `[train]` and `[augment]`. Override keys
//! are either qualified (`train.lr`) or bare (`lr`) when the bare name
//! belongs to exactly one section. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use rswin_core::data::AugmentPolicy;
use rswin_core::training::TrainConfig;
use rswin_core::{ModelConfig, Precision};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, CliResult};

pub const SECTIONS: [&str; 4] = ["run", "model", "train", "augment"];

/// Optional fields that are absent from a serialized default and so cannot
/// be discovered from it.
const OPTIONAL_KEYS: [(&str, &str); 3] = [("train", "max_steps"), ("train", "class_weights"), ("train", "grad_clip")];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    /// Mean and std of 0.5 per channel.
    #[default]
    Fixed,
    /// Per-channel statistics of the training split.
    Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub name: String,
    pub data_root: PathBuf,
    pub runs_dir: PathBuf,
    /// The one seed every random stream derives from.
    pub seed: u64,
    pub precision: Precision,
    pub normalization: NormalizationMode,
    pub eval_batch_size: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            name: "run".into(),
            data_root: PathBuf::new(),
            runs_dir: PathBuf::from("runs"),
            seed: 0,
            precision: Precision::F32,
            normalization: NormalizationMode::Fixed,
            eval_batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentPolicy,
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &[String]) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text, overrides)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> CliResult<Self> {
        let mut table: Table = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        for (key, value) in parse_overrides(overrides)? {
            apply_override(&mut table, &key, value)?;
        }
        let train_seed = table.get("train").and_then(|t| t.get("seed")).cloned();
        let rendered = toml::to_string(&table).map_err(|e| CliError::config(e.to_string()))?;
        let mut cfg: RunConfig = toml::from_str(&rendered).map_err(|e| CliError::config(e.to_string()))?;
        if let Some(seed) = train_seed {
            if seed.as_integer() != i64::try_from(cfg.run.seed).ok() {
                return Err(CliError::config("set the seed under [run]; train.seed must not differ from run.seed"));
            }
        }
        cfg.train.seed = cfg.run.seed;
        Ok(cfg)
    }

    /// Checks every field. Nothing is computed or written before this passes.
    pub fn validate(&self) -> CliResult<()> {
        let r = &self.run;
        if r.name.is_empty() || r.name.contains(['/', '\\']) || r.name == "." || r.name == ".." {
            return Err(CliError::config(format!("run.name {:?} is not a plain directory name", r.name)));
        }
        if r.data_root.as_os_str().is_empty() {
            return Err(CliError::config("run.data_root is required"));
        }
        if !r.data_root.is_dir() {
            return Err(CliError::config(format!("dataset root {} does not exist", r.data_root.display())));
        }
        if r.eval_batch_size == 0 {
            return Err(CliError::config("run.eval_batch_size must be positive"));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        if let Some(w) = &self.train.class_weights {
            if w.len() != self.model.num_classes {
                return Err(CliError::config(format!(
                    "train.class_weights has {} entries for {} classes",
                    w.len(),
                    self.model.num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.run.runs_dir.join(&self.run.name)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Internal(e.to_string()))
    }
}

/// Splits `--key value` and `--key=value` pairs.
pub fn parse_overrides(args: &[String]) -> CliResult<Vec<(String, Value)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| CliError::config(format!("expected --key value, found {arg:?}")))?;
        let (key, raw) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| CliError::config(format!("--{key} needs a value")))?;
                (key.to_string(), v.clone())
            }
        };
        out.push((key.replace('-', "_"), parse_value(&raw)));
    }
    Ok(out)
}

/// Reads a TOML literal, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn known_keys(section: &str) -> Vec<String> {
    let table: Table = toml::from_str(&RunConfig::default().to_toml().unwrap_or_default()).unwrap_or_default();
    let mut keys: Vec<String> = table
        .get(section)
        .and_then(Value::as_table)
        .map(|t| t.keys().cloned().collect())
        .unwrap_or_default();
    keys.extend(OPTIONAL_KEYS.iter().filter(|(s, _)| *s == section).map(|(_, k)| k.to_string()));
    if section == "train" {
        keys.retain(|k| k != "seed");
    }
    keys
}

fn apply_override(table: &mut Table, key: &str, value: Value) -> CliResult<()> {
    let (section, field) = match key.split_once('.') {
        Some((s, f)) => {
            if !SECTIONS.contains(&s) {
                return Err(CliError::config(format!("unknown section in --{key}")));
            }
            (s.to_string(), f.to_string())
        }
        None => {
            let owners: Vec<&str> = SECTIONS.iter().copied().filter(|s| known_keys(s).iter().any(|k| k == key)).collect();
            match owners.as_slice() {
                [one] => (one.to_string(), key.to_string()),
                [] => return Err(CliError::config(format!("unknown key --{key}"))),
                many => return Err(CliError::config(format!("--{key} is ambiguous, qualify it with one of {many:?}"))),
            }
        }
    };
    let entry = table.entry(section.clone()).or_insert_with(|| Value::Table(Table::new()));
    let sect = entry.as_table_mut().ok_or_else(|| CliError::config(format!("{section} must be a table")))?;
    sect.insert(field, value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_win_over_file() {
        let cfg = RunConfig::from_toml("[train]\nepochs = 5\nlr = 0.01\n", &args(&["--epochs", "0", "--train.lr=0.5"])).unwrap();
        assert_eq!(cfg.train.epochs, 0);
        assert_eq!(cfg.train.lr, 0.5);
    }

    #[test]
    fn bare_and_optional_keys_resolve() {
        let cfg = RunConfig::from_toml("", &args(&["--max-steps", "7", "--seed", "9", "--data_root", "/x/y"])).unwrap();
        assert_eq!(cfg.train.max_steps, Some(7));
        assert_eq!((cfg.run.seed, cfg.train.seed), (9, 9));
        assert_eq!(cfg.run.data_root, PathBuf::from("/x/y"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("[train]\nlearning_rate = 1\n", &[]), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::from_toml("[extra]\na = 1\n", &[]), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::from_toml("", &args(&["--nope", "1"])), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::from_toml("", &args(&["--epochs"])), Err(CliError::Config(_))));
    }

    #[test]
    fn seed_lives_under_run() {
        assert!(RunConfig::from_toml("[run]\nseed = 3\n[train]\nseed = 4\n", &[]).is_err());
        assert!(RunConfig::from_toml("[run]\nseed = 3\n[train]\nseed = 3\n", &[]).is_ok());
    }

    #[test]
    fn resolved_config_reloads_identically() {
        let cfg = RunConfig::from_toml("[run]\nname = \"a\"\nseed = 4\n[model]\nembed_dim = 16\n", &args(&["--grad_clip", "1.5"])).unwrap();
        let again = RunConfig::from_toml(&cfg.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn validation_catches_missing_root_and_bad_name() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
        cfg.run.data_root = PathBuf::from("/definitely/not/here");
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
        cfg.run.data_root = std::env::temp_dir();
        cfg.run.name = "../escape".into();
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }
}
