//! Key-value serialization of [`PipelineConfig`]: the config-file format
//! (same `key = value` text as manifests) and the effective-config dump
//! written next to every run's outputs.
//!
//! Precedence is defaults < config file < command-line flags; the dump is
//! always the fully resolved configuration, so any run can be reproduced
//! from its dump alone.

use thiserror::Error;

use crate::pipeline::PipelineConfig;
use crate::saliency::SaliencyScales;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: expected 'key = value'")]
    BadLine { line: usize },
    #[error("config key '{key}': {reason}")]
    BadValue { key: String, reason: String },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
}

/// Serializes the full configuration, one key per line, keys in fixed order.
pub fn to_kv(cfg: &PipelineConfig) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };
    kv("tv_lambda", cfg.tv.lambda.to_string());
    kv("tv_tol", cfg.tv.tol.to_string());
    kv("tv_max_iter", cfg.tv.max_iter.to_string());
    kv("tv_log_transform", cfg.tv_log_transform.to_string());
    kv("saliency_scales", cfg.saliency_scales.to_string());
    kv("rpe_offset", cfg.layers.rpe_offset.to_string());
    kv("max_jump", cfg.layers.max_jump.to_string());
    kv("mser_delta", cfg.mser.delta.to_string());
    kv("mser_min_area", cfg.mser.min_area.to_string());
    kv("mser_max_area", cfg.mser.max_area.to_string());
    kv("mser_max_variation", cfg.mser.max_variation.to_string());
    kv("mser_min_diversity", cfg.mser.min_diversity.to_string());
    kv("mser_roi_overlap", cfg.mser.min_roi_overlap.to_string());
    kv("forest_max_depth", cfg.forest.max_depth.to_string());
    kv("forest_min_split", cfg.forest.min_samples_split.to_string());
    kv(
        "forest_feature_subset",
        cfg.forest.feature_subset_size.to_string(),
    );
    kv("threshold", cfg.threshold.to_string());
    kv("seed", cfg.seed.to_string());
    kv("jobs", cfg.jobs.to_string());
    out
}

/// Applies `key = value` lines on top of an existing configuration.
pub fn apply_kv(cfg: &mut PipelineConfig, text: &str) -> Result<(), ConfigError> {
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or(ConfigError::BadLine { line: lineno + 1 })?;
        apply_one(cfg, key.trim(), value.trim())?;
    }
    Ok(())
}

/// Sets a single key. Used both by the config-file parser and by the CLI
/// flag plumbing.
pub fn apply_one(cfg: &mut PipelineConfig, key: &str, value: &str) -> Result<(), ConfigError> {
    fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        value.parse::<T>().map_err(|e| ConfigError::BadValue {
            key: key.to_string(),
            reason: e.to_string(),
        })
    }

    match key {
        "tv_lambda" => cfg.tv.lambda = parse(key, value)?,
        "tv_tol" => cfg.tv.tol = parse(key, value)?,
        "tv_max_iter" => cfg.tv.max_iter = parse(key, value)?,
        "tv_log_transform" => cfg.tv_log_transform = parse(key, value)?,
        "saliency_scales" => cfg.saliency_scales = parse::<SaliencyScales>(key, value)?,
        "rpe_offset" => cfg.layers.rpe_offset = parse(key, value)?,
        "max_jump" => cfg.layers.max_jump = parse(key, value)?,
        "mser_delta" => cfg.mser.delta = parse(key, value)?,
        "mser_min_area" => cfg.mser.min_area = parse(key, value)?,
        "mser_max_area" => cfg.mser.max_area = parse(key, value)?,
        "mser_max_variation" => cfg.mser.max_variation = parse(key, value)?,
        "mser_min_diversity" => cfg.mser.min_diversity = parse(key, value)?,
        "mser_roi_overlap" => cfg.mser.min_roi_overlap = parse(key, value)?,
        "forest_max_depth" => cfg.forest.max_depth = parse(key, value)?,
        "forest_min_split" => cfg.forest.min_samples_split = parse(key, value)?,
        "forest_feature_subset" => cfg.forest.feature_subset_size = parse(key, value)?,
        "threshold" => cfg.threshold = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        "jobs" => cfg.jobs = parse(key, value)?,
        other => return Err(ConfigError::UnknownKey(other.to_string())),
    }
    Ok(())
}

/// Validates the assembled configuration before a run.
pub fn validate(cfg: &PipelineConfig) -> Result<(), String> {
    cfg.tv.validate().map_err(|e| e.to_string())?;
    cfg.saliency_scales.validate().map_err(|e| e.to_string())?;
    cfg.mser.validate().map_err(|e| e.to_string())?;
    // Thresholds above 1 are allowed: they force empty predictions.
    if !cfg.threshold.is_finite() || cfg.threshold < 0.0 {
        return Err(format!(
            "threshold must be a finite value >= 0, got {}",
            cfg.threshold
        ));
    }
    if cfg.forest.feature_subset_size == 0
        || cfg.forest.min_samples_split < 2
        || cfg.forest.max_depth == 0
    {
        return Err("forest parameters must be positive (min_split >= 2)".into());
    }
    Ok(())
}
