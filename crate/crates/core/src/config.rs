//! Flat `key=value` configuration.
//!
//! Keys are the training-table names (`group_size`, `max_num_turns`,
//! `max_prompt_length`, ...) plus engine knobs. Trainer-only keys such as
//! `learning_rate` are validated as present-or-default and echoed into
//! exports untouched.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{Map, Value};
use thiserror::Error;

use crate::reward::Weights;
use crate::rollout::RolloutConfig;
use crate::scalar::parse_decimal_ratio;
use crate::toolkit::ToolConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("key {key:?}: invalid value {value:?}")]
    Value { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Io(String),
}

/// Known keys and their defaults, in snapshot order.
pub const DEFAULTS: [(&str, &str); 26] = [
    ("method", "Tool-augmented GRPO"),
    ("freeze_visual_encoder", "True"),
    ("learning_rate", "1e-6"),
    ("kl_loss_coef", "1e-3"),
    ("warmup_ratio", "0"),
    ("group_size", "8"),
    ("batch_size", "64"),
    ("mini_batch_size", "32"),
    ("micro_batch_size_per_device", "1"),
    ("max_num_turns", "10"),
    ("max_prompt_length", "8192"),
    ("max_response_length", "20480"),
    ("n_init_frames", "128"),
    ("sft_frames", "64"),
    ("filter_frames", "128"),
    ("tokens_per_frame", "32"),
    ("max_tool_frames", "32"),
    ("merge_gap_s", "0"),
    ("lambda_corr", "0.7"),
    ("lambda_format", "0.2"),
    ("lambda_tool", "0.1"),
    ("advantage_eps", "1e-6"),
    ("temperature", "1.0"),
    ("top_p", "1.0"),
    ("max_new_tokens", "2048"),
    ("seed", "0"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub rollout: RolloutConfig,
    pub tools: ToolConfig,
    /// Frames in the initial clip of exported SFT records.
    pub sft_frames: usize,
    /// Frames shown to the direct answerer during dataset filtering.
    pub filter_frames: usize,
    values: BTreeMap<String, String>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self::from_values(BTreeMap::new()).expect("defaults are valid")
    }
}

fn parse<T: std::str::FromStr>(values: &BTreeMap<String, String>, key: &str) -> Result<T, ConfigError> {
    let value = &values[key];
    value.trim().parse().map_err(|_| ConfigError::Value {
        key: key.into(),
        value: value.clone(),
    })
}

impl EngineConfig {
    fn from_values(overrides: BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let mut values: BTreeMap<String, String> =
            DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        values.extend(overrides);
        let ratio = |key: &str| {
            parse_decimal_ratio(&values[key]).ok_or_else(|| ConfigError::Value {
                key: key.into(),
                value: values[key].clone(),
            })
        };
        let weights = Weights::new(ratio("lambda_corr")?, ratio("lambda_format")?, ratio("lambda_tool")?)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut rollout = RolloutConfig {
            n_init_frames: parse(&values, "n_init_frames")?,
            max_turns: parse(&values, "max_num_turns")?,
            max_prompt_tokens: parse(&values, "max_prompt_length")?,
            max_response_tokens: parse(&values, "max_response_length")?,
            group_size: parse(&values, "group_size")?,
            seed: parse(&values, "seed")?,
            weights,
            advantage_eps: parse(&values, "advantage_eps")?,
            ..RolloutConfig::default()
        };
        rollout.sampling.temperature = parse(&values, "temperature")?;
        rollout.sampling.top_p = parse(&values, "top_p")?;
        rollout.sampling.max_new_tokens = parse(&values, "max_new_tokens")?;
        rollout.token_costs.tokens_per_frame = parse(&values, "tokens_per_frame")?;
        rollout
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let tools = ToolConfig {
            max_tool_frames: parse(&values, "max_tool_frames")?,
            merge_gap_s: parse(&values, "merge_gap_s")?,
            ..ToolConfig::default()
        };
        if tools.max_tool_frames == 0 || !(tools.merge_gap_s >= 0.0) {
            return Err(ConfigError::Invalid("max_tool_frames must be positive and merge_gap_s nonnegative".into()));
        }
        let config = Self {
            sft_frames: parse(&values, "sft_frames")?,
            filter_frames: parse(&values, "filter_frames")?,
            rollout,
            tools,
            values,
        };
        if config.sft_frames == 0 || config.filter_frames == 0 {
            return Err(ConfigError::Invalid("frame counts must be positive".into()));
        }
        Ok(config)
    }

    /// Parses `key=value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut overrides = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let key = key.trim();
            if !DEFAULTS.iter().any(|(k, _)| *k == key) {
                return Err(ConfigError::UnknownKey {
                    line: i + 1,
                    key: key.into(),
                });
            }
            overrides.insert(key.to_string(), value.trim().to_string());
        }
        Self::from_values(overrides)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Returns a copy with one key replaced.
    pub fn with(&self, key: &str, value: impl ToString) -> Result<Self, ConfigError> {
        if !DEFAULTS.iter().any(|(k, _)| *k == key) {
            return Err(ConfigError::UnknownKey { line: 0, key: key.into() });
        }
        let mut values = self.values.clone();
        values.insert(key.into(), value.to_string());
        Self::from_values(values)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// All keys as JSON, numbers and booleans typed.
    pub fn snapshot(&self) -> Value {
        let mut map = Map::new();
        for (key, _) in DEFAULTS {
            let raw = self.values[key].trim();
            let value = if let Ok(i) = raw.parse::<i64>() {
                Value::from(i)
            } else if let Ok(f) = raw.parse::<f64>() {
                Value::from(f)
            } else if raw.eq_ignore_ascii_case("true") || raw.eq_ignore_ascii_case("false") {
                Value::from(raw.eq_ignore_ascii_case("true"))
            } else {
                Value::from(raw)
            };
            map.insert(key.to_string(), value);
        }
        Value::Object(map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Rational64;

    #[test]
    fn defaults_match_training_table() {
        let c = EngineConfig::default();
        assert_eq!(c.rollout.max_turns, 10);
        assert_eq!(c.rollout.group_size, 8);
        assert_eq!(c.rollout.max_prompt_tokens, 8192);
        assert_eq!(c.rollout.max_response_tokens, 20480);
        assert_eq!(c.snapshot()["kl_loss_coef"], Value::from(1e-3));
        assert_eq!(c.snapshot()["freeze_visual_encoder"], Value::from(true));
    }

    #[test]
    fn overrides_and_errors() {
        let c = EngineConfig::parse("# comment\nmax_num_turns = 4\nlambda_tool=0.3\nlearning_rate=2e-5\n").unwrap();
        assert_eq!(c.rollout.max_turns, 4);
        assert_eq!(c.rollout.weights.tool, Rational64::new(3, 10));
        assert_eq!(c.get("learning_rate"), Some("2e-5"));
        assert!(matches!(EngineConfig::parse("bogus=1"), Err(ConfigError::UnknownKey { .. })));
        assert!(matches!(EngineConfig::parse("max_num_turns"), Err(ConfigError::Syntax { line: 1 })));
        assert!(matches!(EngineConfig::parse("group_size=x"), Err(ConfigError::Value { .. })));
        assert!(EngineConfig::parse("max_num_turns=0").is_err());
        assert!(EngineConfig::parse("lambda_corr=-1").is_err());
    }
}
