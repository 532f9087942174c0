//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Unknown and repeated keys are
//! errors, reported with their line number.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::shapes::{parse_list, ArchConfig, InputExtent, Variant};
use crate::synthdata::{GenSpec, LesionKind, DEFAULT_SPACING};
use crate::train::TrainConfig;

pub const ARCH_KEYS: &[&str] = &["n_dims", "target_dims", "depth", "base_channels", "blocks", "variant"];
pub const DATA_KEYS: &[&str] = &[
    "extent", "kind", "count_min", "count_max", "contrast", "noise", "seed", "spacing",
];
pub const TRAIN_KEYS: &[&str] = &[
    "iterations",
    "batch_size",
    "patch",
    "lr",
    "weight_decay",
    "decay_iteration",
    "decay_factor",
    "seed",
    "checkpoint_every",
];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}` (allowed: {allowed})")]
    UnknownKey { line: usize, key: String, allowed: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("line {line}: `{key}`: {msg}")]
    Value { line: usize, key: String, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Parsed key/value pairs with the line each came from.
#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (String, usize)>,
}

impl KeyValues {
    pub fn parse(text: &str, allowed: &[&str]) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                msg: format!("expected `key = value`, got `{content}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() || value.is_empty() {
                return Err(ConfigError::Syntax {
                    line,
                    msg: "empty key or value".into(),
                });
            }
            if !allowed.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.into(),
                    allowed: allowed.join(", "),
                });
            }
            if entries.insert(key.to_string(), (value.to_string(), line)).is_some() {
                return Err(ConfigError::Duplicate { line, key: key.into() });
            }
        }
        Ok(Self { entries })
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    /// Parses `key` with `f`, attaching the line number to failures.
    pub fn get_with<V>(&self, key: &str, f: impl FnOnce(&str) -> std::result::Result<V, String>) -> Result<Option<V>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => f(v).map(Some).map_err(|msg| ConfigError::Value {
                line: *line,
                key: key.into(),
                msg,
            }),
        }
    }

    pub fn get<V: FromStr>(&self, key: &str) -> Result<Option<V>>
    where
        V::Err: Display,
    {
        self.get_with(key, |s| s.parse::<V>().map_err(|e| e.to_string()))
    }

    pub fn require<V: FromStr>(&self, key: &str) -> Result<V>
    where
        V::Err: Display,
    {
        self.get(key)?.ok_or_else(|| ConfigError::Missing(key.into()))
    }
}

pub fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// `blocks` may be a comma list or a single count repeated over all levels.
pub fn parse_arch(text: &str) -> Result<ArchConfig> {
    let kv = KeyValues::parse(text, ARCH_KEYS)?;
    let n_dims: usize = kv.require("n_dims")?;
    let target_dims: usize = kv.require("target_dims")?;
    let base_channels: usize = kv.require("base_channels")?;
    let depth: Option<usize> = kv.get("depth")?;
    let mut blocks = kv.get_with("blocks", parse_list)?.unwrap_or_else(|| vec![1]);
    match depth {
        Some(d) if blocks.len() == 1 && d != 1 => blocks = vec![blocks[0]; d],
        Some(d) if blocks.len() != d => {
            return Err(ConfigError::Invalid(format!(
                "depth {d} but {} block counts given",
                blocks.len()
            )))
        }
        _ => {}
    }
    let variant = kv.get::<Variant>("variant")?.unwrap_or(Variant::Proposed);
    Ok(ArchConfig::new(n_dims, target_dims, base_channels, blocks, variant))
}

pub fn parse_data(text: &str) -> Result<GenSpec> {
    let kv = KeyValues::parse(text, DATA_KEYS)?;
    let extent: InputExtent = kv.require("extent")?;
    let spacing = match kv.get_with("spacing", parse_floats)? {
        None => DEFAULT_SPACING,
        Some(v) if v.len() == 3 => [v[0], v[1], v[2]],
        Some(v) => return Err(ConfigError::Invalid(format!("spacing needs 3 values, got {}", v.len()))),
    };
    let spec = GenSpec {
        extent: extent.0,
        kind: kv.get::<LesionKind>("kind")?.unwrap_or(LesionKind::Blob),
        count_min: kv.get("count_min")?.unwrap_or(1),
        count_max: kv.get("count_max")?.unwrap_or(3),
        contrast: kv.get("contrast")?.unwrap_or(0.5),
        noise: kv.get("noise")?.unwrap_or(0.05),
        seed: kv.get("seed")?.unwrap_or(0),
        spacing,
    };
    spec.check().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(spec)
}

/// Missing keys take the geographic-atrophy schedule defaults.
pub fn parse_train(text: &str) -> Result<TrainConfig> {
    let kv = KeyValues::parse(text, TRAIN_KEYS)?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        iterations: kv.get("iterations")?.unwrap_or(d.iterations),
        batch_size: kv.get("batch_size")?.unwrap_or(d.batch_size),
        patch: kv.get::<InputExtent>("patch")?.map_or(d.patch, |e| e.0),
        lr: kv.get("lr")?.unwrap_or(d.lr),
        weight_decay: kv.get("weight_decay")?.unwrap_or(d.weight_decay),
        decay_iteration: kv.get("decay_iteration")?.unwrap_or(d.decay_iteration),
        decay_factor: kv.get("decay_factor")?.unwrap_or(d.decay_factor),
        seed: kv.get("seed")?.unwrap_or(d.seed),
        checkpoint_every: kv.get("checkpoint_every")?.unwrap_or(d.checkpoint_every),
    };
    cfg.check().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(cfg)
}

fn parse_floats(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split([',', 'x'])
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_file() {
        let text = "# reference network\nn_dims = 3\ntarget_dims = 2\ndepth = 3\nbase_channels = 2\nblocks = 1\n";
        let cfg = parse_arch(text).unwrap();
        assert_eq!(cfg.channels, vec![2, 4, 8]);
        assert_eq!(cfg.blocks, vec![1, 1, 1]);
        assert_eq!(cfg.variant, Variant::Proposed);
        let cfg = parse_arch("n_dims=3\ntarget_dims=2\nbase_channels=4\nblocks=1,2\nvariant=3d2d").unwrap();
        assert_eq!(cfg.depth, 2);
        assert_eq!(cfg.variant, Variant::ThreeDTwoD);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse_arch("n_dims = 3\n\nchannels = 4\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { line: 3, .. }), "{err}");
        let err = parse_arch("n_dims = 3\ntarget_dims = two\n").unwrap_err();
        assert!(matches!(err, ConfigError::Value { line: 2, .. }), "{err}");
        let err = parse_arch("n_dims 3\n").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 1, .. }));
        let err = parse_arch("n_dims = 3\nn_dims = 3\n").unwrap_err();
        assert!(matches!(err, ConfigError::Duplicate { line: 2, .. }));
        assert!(matches!(parse_arch("n_dims = 3\n").unwrap_err(), ConfigError::Missing(_)));
        let err = parse_arch("n_dims=3\ntarget_dims=2\nbase_channels=2\ndepth=3\nblocks=1,1\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
    }

    #[test]
    fn train_file() {
        let text = "iterations = 2000\nbatch_size = 4\npatch = 16x16x16\nlr = 1e-3\nweight_decay = 1e-5\n\
                    decay_iteration = 2000\ndecay_factor = 10\nseed = 7\ncheckpoint_every = 500\n";
        let cfg = parse_train(text).unwrap();
        assert_eq!(cfg.patch, vec![16, 16, 16]);
        assert_eq!(cfg.seed, 7);
        assert!(parse_train("loss = dice\n").is_err());
        assert!(parse_train("iterations = 10\ndecay_iteration = 20\n").is_err());
    }

    #[test]
    fn data_file() {
        let spec = parse_data("extent = 16x16x8\nnoise = 0\ncontrast = 1\nspacing = 1,1,1\nkind = vessel\n").unwrap();
        assert_eq!(spec.extent, vec![16, 16, 8]);
        assert_eq!(spec.spacing, [1.0, 1.0, 1.0]);
        assert_eq!(spec.kind, LesionKind::Vessel);
        assert!(parse_data("extent = 16x16x8\ncontrast = 0.1\nnoise = 0.1\n").is_err());
    }
}
