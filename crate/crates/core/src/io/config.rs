//! Line-oriented `key = value` configuration text.
//!
//! One format serves two places: the config file handed to `train` on the
//! command line, and the config block embedded in every checkpoint. Keys
//! mirror [`ModelConfig`] and [`TrainConfig`] field-for-field; `metric.*`
//! keys carry free-form run summaries. Unknown keys are rejected with their
//! line number so typos cannot silently fall back to defaults.
//!
//! [`canonical_config_text`] emits every key in a fixed order with
//! shortest-round-trip float formatting, which is what makes checkpoint
//! bytes reproducible: parse → canonicalize is idempotent.

use std::path::Path;

use thiserror::Error;

use crate::model::{EquivarianceGroup, Head, ModelConfig};
use crate::train::TrainConfig;
use crate::Real;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {reason}")]
    BadValue { line: usize, key: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Model architecture, training hyperparameters, the seed the parameters
/// were (or will be) initialized from, and optional run metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct FullConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Seed used to draw the initial parameters.
    pub init_seed: u64,
    /// Free-form `metric.<name>` entries, e.g. a run's best validation loss.
    pub metrics: Vec<(String, String)>,
}

impl Default for FullConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            init_seed: 0,
            metrics: Vec::new(),
        }
    }
}

/// Read and parse a config file.
pub fn read_config_file(path: &Path) -> Result<FullConfig, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    parse_config_text(&text)
}

/// Parse config text into a [`FullConfig`], starting from defaults.
///
/// Blank lines and `#` comments are skipped. Duplicate and unknown keys are
/// errors; both configs are validated after all keys are applied.
pub fn parse_config_text(text: &str) -> Result<FullConfig, ConfigError> {
    let mut cfg = FullConfig::default();
    let mut seen: Vec<String> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(ConfigError::Syntax {
                line,
                reason: format!("expected `key = value`, got `{trimmed}`"),
            });
        };
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(ConfigError::Syntax { line, reason: "empty key".into() });
        }
        if seen.iter().any(|k| k == key) {
            return Err(ConfigError::BadValue {
                line,
                key: key.to_string(),
                reason: "duplicate key".into(),
            });
        }
        seen.push(key.to_string());
        apply_key(&mut cfg, line, key, value)?;
    }
    cfg.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    cfg.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(cfg)
}

/// Emit every key in a fixed order; floats use shortest round-trip form.
pub fn canonical_config_text(cfg: &FullConfig) -> String {
    let m = &cfg.model;
    let t = &cfg.train;
    let mut out = String::new();
    let mut put = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };
    put("model.seed", cfg.init_seed.to_string());
    put("model.n_channels", m.n_channels.to_string());
    put("model.n_rbf", m.n_rbf.to_string());
    put("model.cutoff", m.cutoff.to_string());
    put("model.n_interaction_layers", m.n_interaction_layers.to_string());
    put("model.equivariance_group", m.equivariance_group.name().to_string());
    put("model.max_atomic_number", m.max_atomic_number.to_string());
    put(
        "model.heads",
        m.enabled_heads.iter().map(|h| h.name()).collect::<Vec<_>>().join(","),
    );
    put("model.energy_scale", m.energy_scale.to_string());
    put("model.energy_shift", m.energy_shift.to_string());
    put(
        "model.atomic_ref_energies",
        match &m.atomic_ref_energies {
            None => "none".to_string(),
            Some(pairs) => format_pairs(pairs),
        },
    );
    put(
        "model.element_weights",
        if m.element_weights.is_empty() {
            "none".to_string()
        } else {
            format_pairs(&m.element_weights)
        },
    );
    put("train.batch_size", t.batch_size.to_string());
    put("train.lr_init", t.lr_init.to_string());
    put("train.warmup_steps", t.warmup_steps.to_string());
    put("train.plateau_patience", t.plateau_patience.to_string());
    put("train.plateau_factor", t.plateau_factor.to_string());
    put("train.lr_min", t.lr_min.to_string());
    put("train.ema_weight", t.ema_weight.to_string());
    put("train.grad_clip_norm", t.grad_clip_norm.to_string());
    put("train.max_epochs", t.max_epochs.to_string());
    put("train.early_stop_patience", t.early_stop_patience.to_string());
    put("train.val_fraction", t.val_fraction.to_string());
    put("train.seed", t.seed.to_string());
    for (name, weight) in t.loss_weights.entries() {
        put(&format!("train.loss.{name}"), weight.to_string());
    }
    for (k, v) in &cfg.metrics {
        put(&format!("metric.{k}"), v.clone());
    }
    out
}

fn format_pairs(pairs: &[(u32, Real)]) -> String {
    pairs.iter().map(|(z, v)| format!("{z}:{v}")).collect::<Vec<_>>().join(",")
}

fn apply_key(cfg: &mut FullConfig, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
    let bad = |reason: String| ConfigError::BadValue {
        line,
        key: key.to_string(),
        reason,
    };
    macro_rules! num {
        ($ty:ty) => {
            value.parse::<$ty>().map_err(|e| bad(format!("`{value}` ({e})")))?
        };
    }
    let m = &mut cfg.model;
    let t = &mut cfg.train;
    match key {
        "model.seed" => cfg.init_seed = num!(u64),
        "model.n_channels" => m.n_channels = num!(usize),
        "model.n_rbf" => m.n_rbf = num!(usize),
        "model.cutoff" => m.cutoff = num!(Real),
        "model.n_interaction_layers" => m.n_interaction_layers = num!(usize),
        "model.equivariance_group" => {
            m.equivariance_group = match value {
                "O3" => EquivarianceGroup::O3,
                "SO3" => EquivarianceGroup::SO3,
                other => return Err(bad(format!("`{other}` is not O3 or SO3"))),
            }
        }
        "model.max_atomic_number" => m.max_atomic_number = num!(u32),
        "model.heads" => {
            let mut heads = Vec::new();
            for token in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let head = Head::ALL
                    .into_iter()
                    .find(|h| h.name() == token)
                    .ok_or_else(|| bad(format!("`{token}` is not a head name")))?;
                heads.push(head);
            }
            m.enabled_heads = heads;
        }
        "model.energy_scale" => m.energy_scale = num!(Real),
        "model.energy_shift" => m.energy_shift = num!(Real),
        "model.atomic_ref_energies" => {
            m.atomic_ref_energies = if value == "none" || value.is_empty() {
                None
            } else {
                Some(parse_pairs(value).map_err(bad)?)
            }
        }
        "model.element_weights" => {
            m.element_weights = if value == "none" || value.is_empty() {
                Vec::new()
            } else {
                parse_pairs(value).map_err(bad)?
            }
        }
        "train.batch_size" => t.batch_size = num!(usize),
        "train.lr_init" => t.lr_init = num!(Real),
        "train.warmup_steps" => t.warmup_steps = num!(usize),
        "train.plateau_patience" => t.plateau_patience = num!(usize),
        "train.plateau_factor" => t.plateau_factor = num!(Real),
        "train.lr_min" => t.lr_min = num!(Real),
        "train.ema_weight" => t.ema_weight = num!(Real),
        "train.grad_clip_norm" => t.grad_clip_norm = num!(Real),
        "train.max_epochs" => t.max_epochs = num!(usize),
        "train.early_stop_patience" => t.early_stop_patience = num!(usize),
        "train.val_fraction" => t.val_fraction = num!(Real),
        "train.seed" => t.seed = num!(u64),
        "train.loss.energy" => t.loss_weights.energy = num!(Real),
        "train.loss.forces" => t.loss_weights.forces = num!(Real),
        "train.loss.dipole" => t.loss_weights.dipole = num!(Real),
        "train.loss.polarizability" => t.loss_weights.polarizability = num!(Real),
        "train.loss.shielding" => t.loss_weights.shielding = num!(Real),
        _ => {
            if let Some(name) = key.strip_prefix("metric.") {
                cfg.metrics.push((name.to_string(), value.to_string()));
            } else {
                return Err(ConfigError::UnknownKey { line, key: key.to_string() });
            }
        }
    }
    Ok(())
}

fn parse_pairs(value: &str) -> Result<Vec<(u32, Real)>, String> {
    let mut pairs = Vec::new();
    for token in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (z, v) = token
            .split_once(':')
            .ok_or_else(|| format!("`{token}` is not of the form z:value"))?;
        let z = z.trim().parse::<u32>().map_err(|e| format!("`{z}` ({e})"))?;
        let v = v.trim().parse::<Real>().map_err(|e| format!("`{v}` ({e})"))?;
        pairs.push((z, v));
    }
    Ok(pairs)
}
