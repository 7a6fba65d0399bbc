//! Run configuration: one JSON document, optionally patched with dotted-path
//! overrides such as `--set model.M=1`.

use std::path::{Path, PathBuf};

use metafn_core::data::{Setting, SynthSuiteSpec};
use metafn_core::model::ModelConfig;
use metafn_core::training::{Dtype, Phase, PhaseSpec, DEFAULT_BATCH_SIZE, DEFAULT_LR, DEFAULT_WEIGHT_DECAY};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "METAFN_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseConfig {
    /// `None` picks the phase default (calibration depends on the setting).
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub steps_total: Option<usize>,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            epochs: None,
            batch_size: DEFAULT_BATCH_SIZE,
            lr: DEFAULT_LR,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            seed: 0,
            steps_total: None,
        }
    }
}

impl PhaseConfig {
    pub fn spec(&self, phase: Phase, setting: Setting) -> PhaseSpec {
        let default = match phase {
            Phase::Pretrain => PhaseSpec::pretrain(),
            Phase::Calibrate => PhaseSpec::calibrate(setting),
            Phase::Refine => PhaseSpec::refine(),
            Phase::Scratch => PhaseSpec::new(Phase::Scratch, 0),
        };
        PhaseSpec {
            phase,
            epochs: self.epochs.unwrap_or(default.epochs),
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            seed: self.seed,
            steps_total: self.steps_total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub csv: PathBuf,
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Synthetic suite written by `gen-synth` and used when no CSV sources are given.
    pub synth: Option<SynthSuiteSpec>,
    pub pretrain: Vec<DataSource>,
    pub tasks: Vec<DataSource>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synth: Some(SynthSuiteSpec::default()),
            pretrain: Vec::new(),
            tasks: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedConfig {
    /// Base seed for train/valid/test splits and preprocessing noise.
    pub split: u64,
    /// Base seed for limited-data subsampling.
    pub setting: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self { split: 0, setting: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Also train a from-scratch baseline per task with the calibration
    /// hyperparameters for calibration + refinement epochs.
    pub scratch: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { scratch: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// `results.json` files from `eval` runs; empty means this run's own.
    pub inputs: Vec<PathBuf>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { inputs: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Prefix of method names in evaluation results, e.g. `M=1` or `direct`.
    pub label: String,
    pub model: ModelConfig,
    pub pretrain: PhaseConfig,
    pub calibrate: PhaseConfig,
    pub refine: PhaseConfig,
    pub data: DataConfig,
    pub settings: Vec<Setting>,
    pub seeds: SeedConfig,
    /// Output directory; empty means `$METAFN_OUT` or `runs`.
    pub output_dir: PathBuf,
    pub checkpoint_dtype: Dtype,
    pub eval: EvalConfig,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            label: "xtformer".into(),
            model: ModelConfig::default(),
            pretrain: PhaseConfig::default(),
            calibrate: PhaseConfig::default(),
            refine: PhaseConfig::default(),
            data: DataConfig::default(),
            settings: vec![Setting::Full],
            seeds: SeedConfig::default(),
            output_dir: PathBuf::new(),
            checkpoint_dtype: Dtype::F64,
            eval: EvalConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

impl RunConfig {
    /// Loads `path` over the defaults and applies `key=value` overrides.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        Self::from_value(file, overrides)
    }

    pub fn from_value(file: Value, overrides: &[String]) -> Result<Self, CliError> {
        let mut value = serde_json::to_value(RunConfig::default()).expect("serializable");
        merge(&mut value, file);
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let key = e.path().to_string();
            CliError::Usage(format!("invalid value for `{key}`: {}", e.inner()))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.settings.is_empty() {
            return Err(CliError::Usage("`settings` must list at least one setting".into()));
        }
        if self.data.synth.is_none() && self.data.tasks.is_empty() {
            return Err(CliError::Usage("`data` needs either `synth` or `tasks`".into()));
        }
        for (name, p) in [("pretrain", &self.pretrain), ("calibrate", &self.calibrate), ("refine", &self.refine)] {
            if p.batch_size == 0 {
                return Err(CliError::Usage(format!("`{name}.batch_size` must be positive")));
            }
            if !(p.lr >= 0.0) || !(p.weight_decay >= 0.0) {
                return Err(CliError::Usage(format!("`{name}.lr` and `{name}.weight_decay` must be non-negative")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }

    /// SHA-256 of the resolved config, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn output_root(&self) -> PathBuf {
        if !self.output_dir.as_os_str().is_empty() {
            return self.output_dir.clone();
        }
        std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// `a.b.c=value`; the value is parsed as JSON when possible, else taken as a string.
fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{assignment}` is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("override key `{key}` is malformed")));
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if !map.contains_key(*part) {
                    if !last {
                        map.insert(part.to_string(), Value::Object(Default::default()));
                    } else if map.is_empty() {
                        // Optional sections that default to null take new keys.
                    } else {
                        return Err(CliError::Usage(format!("unknown config key `{key}`")));
                    }
                }
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.get_mut(*part).expect("inserted")
            }
            Value::Null => {
                *node = Value::Object(Default::default());
                let Value::Object(map) = node else { unreachable!() };
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.insert(part.to_string(), Value::Object(Default::default()));
                map.get_mut(*part).expect("inserted")
            }
            _ => return Err(CliError::Usage(format!("config key `{key}` does not name an object path"))),
        };
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_match_published_settings() {
        let c = RunConfig::default();
        assert_eq!((c.model.d, c.model.layers, c.model.heads, c.model.basis_count, c.model.d_ffn), (192, 4, 8, 4, 256));
        assert_eq!(c.pretrain.lr, 1e-4);
        assert_eq!(c.calibrate.spec(Phase::Calibrate, Setting::Full).epochs, 240);
        assert_eq!(c.calibrate.spec(Phase::Calibrate, Setting::T20).epochs, 40);
        assert_eq!(c.refine.spec(Phase::Refine, Setting::Full).epochs, 5);
    }

    #[test]
    fn dotted_overrides() {
        let c = RunConfig::from_value(json!({}), &["model.M=1".into(), "settings=[\"T-100\"]".into()]).unwrap();
        assert_eq!(c.model.basis_count, 1);
        assert_eq!(c.settings, vec![Setting::T100]);
        let c = RunConfig::from_value(json!({}), &["label=abl".into(), "data.synth.seed=9".into()]).unwrap();
        assert_eq!(c.label, "abl");
        assert_eq!(c.data.synth.unwrap().seed, 9);
    }

    #[test]
    fn errors_name_the_key() {
        let e = RunConfig::from_value(json!({"settings": ["T-99"]}), &[]).unwrap_err().to_string();
        assert!(e.contains("settings") && e.contains("T-99"), "{e}");
        let e = RunConfig::from_value(json!({}), &["model.Q=3".into()]).unwrap_err().to_string();
        assert!(e.contains("model.Q"), "{e}");
        let e = RunConfig::from_value(json!({}), &["model.heads=7".into()]).unwrap_err().to_string();
        assert!(e.contains("heads"), "{e}");
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = RunConfig::from_value(json!({"model": {"d": 16, "heads": 2}}), &["refine.epochs=2".into()]).unwrap();
        let back = RunConfig::from_value(serde_json::from_str(&c.to_json()).unwrap(), &[]).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.hash(), back.hash());
    }
}
