//! Flat `key = value` config files and the flag > file > default merge.

use std::path::Path;

use thiserror::Error;

use crate::geometry2d::{BetaSource, BetaStatistic};
use crate::selection::{SelectionConfig, Strategy};

#[derive(Debug, Error, PartialEq)]
#[error("{}{}{message}", .line.map(|l| format!("line {l}: ")).unwrap_or_default(), .field.as_ref().map(|f| format!("`{f}`: ")).unwrap_or_default())]
pub struct ParseError {
    pub line: Option<usize>,
    pub field: Option<String>,
    pub message: String,
}

/// Recognised keys, in the order they are documented.
pub const KEYS: &[&str] = &[
    "t_flow",
    "t_baseline",
    "alpha",
    "t_angle",
    "strategy",
    "seed",
    "stride",
    "beta_normalized",
    "min_tracked",
    "max_keypoints",
    "fast_threshold",
    "max_match_distance",
    "cross_check",
    "flow_window",
    "flow_levels",
    "flow_iterations",
    "flow_epsilon",
    "min_eigenvalue",
    "ransac_threshold",
    "ransac_confidence",
    "ransac_max_iterations",
    "beta_source",
    "beta_statistic",
];

fn line_of(text: &str, key: &str) -> Option<usize> {
    text.lines()
        .position(|l| {
            let l = l.trim_start();
            l.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map(|i| i + 1)
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

struct Field<'a> {
    key: &'a str,
    value: &'a toml::Value,
    text: &'a str,
}

impl Field<'_> {
    fn err(&self, message: impl Into<String>) -> ParseError {
        ParseError {
            line: line_of(self.text, self.key),
            field: Some(self.key.to_string()),
            message: message.into(),
        }
    }

    fn float(&self) -> Result<f64, ParseError> {
        match self.value {
            toml::Value::Float(f) => Ok(*f),
            toml::Value::Integer(i) => Ok(*i as f64),
            other => Err(self.err(format!("expected a number, found {}", other.type_str()))),
        }
    }

    fn uint(&self) -> Result<u64, ParseError> {
        match self.value {
            toml::Value::Integer(i) if *i >= 0 => Ok(*i as u64),
            toml::Value::Integer(i) => Err(self.err(format!("must not be negative, got {i}"))),
            other => Err(self.err(format!("expected an integer, found {}", other.type_str()))),
        }
    }

    fn usize(&self) -> Result<usize, ParseError> {
        usize::try_from(self.uint()?).map_err(|_| self.err("value too large"))
    }

    fn boolean(&self) -> Result<bool, ParseError> {
        self.value
            .as_bool()
            .ok_or_else(|| self.err(format!("expected true or false, found {}", self.value.type_str())))
    }

    fn string(&self) -> Result<&str, ParseError> {
        self.value
            .as_str()
            .ok_or_else(|| self.err(format!("expected a string, found {}", self.value.type_str())))
    }
}

/// Parses config text on top of the built-in defaults.
pub fn parse_config_str(text: &str) -> Result<SelectionConfig, ParseError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ParseError {
        line: e.span().map(|s| line_of_offset(text, s.start)),
        field: None,
        message: e.message().to_string(),
    })?;
    let mut cfg = SelectionConfig::default();
    for (key, value) in &table {
        let f = Field { key, value, text };
        match key.as_str() {
            "t_flow" => cfg.t_flow = f.float()?,
            "t_baseline" => cfg.t_baseline = f.float()?,
            "alpha" => cfg.alpha = f.float()?,
            "t_angle" => cfg.t_angle = f.float()?,
            "strategy" => cfg.strategy = f.string()?.parse().map_err(|e: String| f.err(e))?,
            "seed" => cfg.seed = f.uint()?,
            "stride" => cfg.stride = f.usize()?,
            "beta_normalized" => cfg.beta_normalized = f.boolean()?,
            "min_tracked" => cfg.min_tracked = f.usize()?,
            "max_keypoints" => cfg.features.max_keypoints = f.usize()?,
            "fast_threshold" => {
                cfg.features.fast_threshold = u8::try_from(f.uint()?).map_err(|_| f.err("must be at most 255"))?
            }
            "max_match_distance" => {
                cfg.matching.max_distance = u32::try_from(f.uint()?).map_err(|_| f.err("value too large"))?
            }
            "cross_check" => cfg.matching.cross_check = f.boolean()?,
            "flow_window" => cfg.flow.window = f.usize()?,
            "flow_levels" => cfg.flow.levels = f.usize()?,
            "flow_iterations" => cfg.flow.max_iterations = f.usize()?,
            "flow_epsilon" => cfg.flow.epsilon = f.float()?,
            "min_eigenvalue" => cfg.flow.min_eigenvalue = f.float()?,
            "ransac_threshold" => cfg.geometry.ransac.threshold = f.float()?,
            "ransac_confidence" => cfg.geometry.ransac.confidence = f.float()?,
            "ransac_max_iterations" => cfg.geometry.ransac.max_iterations = f.usize()?,
            "beta_source" => {
                cfg.geometry.beta_source = match f.string()? {
                    "inliers" => BetaSource::Inliers,
                    "all_matches" => BetaSource::AllMatches,
                    other => return Err(f.err(format!("unknown beta_source `{other}` (inliers, all_matches)"))),
                }
            }
            "beta_statistic" => {
                cfg.geometry.beta_statistic = match f.string()? {
                    "mean" => BetaStatistic::Mean,
                    "median" => BetaStatistic::Median,
                    "rms" => BetaStatistic::Rms,
                    other => return Err(f.err(format!("unknown beta_statistic `{other}` (mean, median, rms)"))),
                }
            }
            _ => return Err(f.err("unknown key")),
        }
    }
    cfg.validate().map_err(|e| {
        let message = e.to_string();
        let field = KEYS.iter().find(|k| message.contains(*k)).map(|k| k.to_string());
        ParseError {
            line: field.as_deref().and_then(|k| line_of(text, k)),
            field,
            message,
        }
    })?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<SelectionConfig, ParseError> {
    let text = std::fs::read_to_string(path).map_err(|e| ParseError {
        line: None,
        field: None,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    parse_config_str(&text)
}

/// Command-line values that win over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub t_flow: Option<f64>,
    pub t_baseline: Option<f64>,
    pub alpha: Option<f64>,
    pub t_angle: Option<f64>,
    pub strategy: Option<Strategy>,
    pub stride: Option<usize>,
    pub seed: Option<u64>,
    pub beta_normalized: Option<bool>,
}

impl Overrides {
    pub fn apply(&self, mut cfg: SelectionConfig) -> Result<SelectionConfig, ParseError> {
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { cfg.$f = v; } )* };
        }
        take!(t_flow, t_baseline, alpha, t_angle, strategy, stride, seed, beta_normalized);
        cfg.validate().map_err(|e| ParseError {
            line: None,
            field: None,
            message: e.to_string(),
        })?;
        Ok(cfg)
    }
}

/// Defaults, then the optional file, then flags.
pub fn effective_config(path: Option<&Path>, overrides: &Overrides) -> Result<SelectionConfig, ParseError> {
    let base = match path {
        Some(p) => parse_config(p)?,
        None => SelectionConfig::default(),
    };
    overrides.apply(base)
}
