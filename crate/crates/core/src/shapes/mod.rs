//! Shape calculus for the projective-skip architecture family.
//!
//! Dimensions are numbered `1..=N` in the public API. Target dimensions are
//! the prefix `d <= M`; the rest are reducible. Levels are numbered `1..=l`,
//! level 1 being full resolution.

mod receptive;

pub use receptive::{receptive_field, receptive_field_of, support_box, ReceptiveField};

use std::fmt;
use std::str::FromStr;

/// Network family member.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Decoder keeps reducible axes at bottleneck resolution; projective skips.
    Proposed,
    /// Ablation: reducible axes are globally pooled at every skip and at the
    /// bottleneck, giving an M-dimensional decoder.
    ThreeDTwoD,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Proposed => "proposed",
            Variant::ThreeDTwoD => "3d2d",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "proposed" => Ok(Variant::Proposed),
            "3d2d" => Ok(Variant::ThreeDTwoD),
            other => Err(format!("unknown variant `{other}` (expected proposed or 3d2d)")),
        }
    }
}

/// Everything that determines a network's topology.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ArchConfig {
    pub n_dims: usize,
    pub target_dims: usize,
    pub depth: usize,
    pub base_channels: usize,
    /// Channels per level; `channels[i - 1] == base_channels * 2^(i - 1)`.
    pub channels: Vec<usize>,
    /// Residual blocks per level.
    pub blocks: Vec<usize>,
    pub variant: Variant,
}

impl ArchConfig {
    /// Config following the channel-doubling rule.
    pub fn new(
        n_dims: usize,
        target_dims: usize,
        base_channels: usize,
        blocks: Vec<usize>,
        variant: Variant,
    ) -> Self {
        let depth = blocks.len();
        let channels = (0..depth).map(|i| base_channels << i).collect();
        Self {
            n_dims,
            target_dims,
            depth,
            base_channels,
            channels,
            blocks,
            variant,
        }
    }

    pub fn is_target(&self, d: usize) -> bool {
        d <= self.target_dims
    }

    /// One-line `key=value` form used in checkpoint headers.
    pub fn to_line(&self) -> String {
        let blocks: Vec<String> = self.blocks.iter().map(ToString::to_string).collect();
        format!(
            "n_dims={} target_dims={} depth={} base_channels={} blocks={} variant={}",
            self.n_dims,
            self.target_dims,
            self.depth,
            self.base_channels,
            blocks.join(","),
            self.variant
        )
    }

    pub fn from_line(line: &str) -> Result<Self, String> {
        let mut fields = std::collections::BTreeMap::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| format!("malformed field `{tok}`"))?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| format!("missing `{k}`"));
        let num = |k: &str| -> Result<usize, String> {
            get(k)?.parse().map_err(|e| format!("`{k}`: {e}"))
        };
        let blocks = parse_list(get("blocks")?)?;
        let cfg = Self::new(
            num("n_dims")?,
            num("target_dims")?,
            num("base_channels")?,
            blocks,
            get("variant")?.parse()?,
        );
        if cfg.depth != num("depth")? {
            return Err("depth disagrees with blocks".into());
        }
        Ok(cfg)
    }
}

pub(crate) fn parse_list(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|t| t.trim().parse().map_err(|e| format!("`{t}`: {e}")))
        .collect()
}

/// Input extent per dimension, in voxels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct InputExtent(pub Vec<usize>);

impl InputExtent {
    pub fn dims(&self) -> &[usize] {
        &self.0
    }
}

impl fmt::Display for InputExtent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_extent(&self.0))
    }
}

impl FromStr for InputExtent {
    type Err = String;

    /// Parses `64x128x256`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split(['x', 'X', '×'])
            .map(|t| t.trim().parse::<usize>().map_err(|e| format!("extent `{s}`: {e}")))
            .collect::<Result<Vec<_>, _>>()
            .map(InputExtent)
    }
}

/// `64×128×64`; an empty extent prints as `scalar`.
pub fn format_extent(e: &[usize]) -> String {
    if e.is_empty() {
        return "scalar".into();
    }
    e.iter().map(ToString::to_string).collect::<Vec<_>>().join("×")
}

/// A violated configuration invariant. Dimensions and levels are 1-based.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ShapeError {
    #[error("DivisibilityError: extent {extent} of dimension {dim} is not divisible by 2^({depth}-1)")]
    Divisibility { dim: usize, extent: usize, depth: usize },
    #[error("ChannelRuleError: level {level} channels break C_i = c0*2^(i-1)")]
    ChannelRule { level: usize },
    #[error("RangeError: target dims {target} outside 0..={n_dims}")]
    Range { target: usize, n_dims: usize },
    #[error("depth must be at least 1")]
    ZeroDepth,
    #[error("channels/blocks lengths {channels}/{blocks} disagree with depth {depth}")]
    LengthMismatch { depth: usize, channels: usize, blocks: usize },
    #[error("level {level} needs at least one block and one channel")]
    EmptyLevel { level: usize },
    #[error("n_dims must be at least 1")]
    ZeroDims,
    #[error("extent has {got} dimensions, config has {expected}")]
    ExtentRank { expected: usize, got: usize },
    #[error("extent of dimension {dim} is zero")]
    ZeroExtent { dim: usize },
    #[error("3d2d variant needs at least one reducible dimension (M < N)")]
    AblationUndefined,
    #[error("level {level} outside 1..={depth}")]
    LevelOutOfRange { level: usize, depth: usize },
}

/// Collects every violated invariant; empty means valid.
pub fn validate(config: &ArchConfig, extent: &InputExtent) -> Result<(), Vec<ShapeError>> {
    let mut errs = Vec::new();
    if config.n_dims == 0 {
        errs.push(ShapeError::ZeroDims);
    }
    if config.target_dims > config.n_dims {
        errs.push(ShapeError::Range {
            target: config.target_dims,
            n_dims: config.n_dims,
        });
    }
    if config.variant == Variant::ThreeDTwoD && config.target_dims >= config.n_dims {
        errs.push(ShapeError::AblationUndefined);
    }
    if config.depth == 0 {
        errs.push(ShapeError::ZeroDepth);
    }
    if config.channels.len() != config.depth || config.blocks.len() != config.depth {
        errs.push(ShapeError::LengthMismatch {
            depth: config.depth,
            channels: config.channels.len(),
            blocks: config.blocks.len(),
        });
    }
    for (i, (&c, &b)) in config.channels.iter().zip(&config.blocks).enumerate() {
        if c == 0 || b == 0 {
            errs.push(ShapeError::EmptyLevel { level: i + 1 });
        } else if config.base_channels.checked_shl(i as u32) != Some(c) {
            errs.push(ShapeError::ChannelRule { level: i + 1 });
        }
    }
    if extent.0.len() != config.n_dims {
        errs.push(ShapeError::ExtentRank {
            expected: config.n_dims,
            got: extent.0.len(),
        });
    }
    let factor = 1usize.checked_shl(config.depth.saturating_sub(1) as u32).unwrap_or(0);
    for (i, &n) in extent.0.iter().enumerate() {
        if n == 0 {
            errs.push(ShapeError::ZeroExtent { dim: i + 1 });
        } else if factor == 0 || n % factor != 0 {
            errs.push(ShapeError::Divisibility {
                dim: i + 1,
                extent: n,
                depth: config.depth,
            });
        }
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(errs)
    }
}

fn check_level(config: &ArchConfig, level: usize) -> Result<(), ShapeError> {
    if (1..=config.depth).contains(&level) {
        Ok(())
    } else {
        Err(ShapeError::LevelOutOfRange {
            level,
            depth: config.depth,
        })
    }
}

/// Encoder feature-map extent at `level`: every dimension halves per level.
pub fn encoder_shape(config: &ArchConfig, extent: &InputExtent, level: usize) -> Result<Vec<usize>, ShapeError> {
    check_level(config, level)?;
    Ok(extent.0.iter().map(|n| n >> (level - 1)).collect())
}

/// Decoder feature-map extent at `level`: target dimensions follow the
/// encoder, reducible dimensions stay at bottleneck resolution.
pub fn decoder_shape(config: &ArchConfig, extent: &InputExtent, level: usize) -> Result<Vec<usize>, ShapeError> {
    check_level(config, level)?;
    Ok(extent
        .0
        .iter()
        .enumerate()
        .map(|(i, n)| {
            if config.is_target(i + 1) {
                n >> (level - 1)
            } else {
                n >> (config.depth - 1)
            }
        })
        .collect())
}

/// Projective skip pooling kernel (and stride) at `level`.
pub fn skip_kernel(config: &ArchConfig, level: usize) -> Result<Vec<usize>, ShapeError> {
    check_level(config, level)?;
    Ok((1..=config.n_dims)
        .map(|d| {
            if config.is_target(d) {
                1
            } else {
                1 << (config.depth - level)
            }
        })
        .collect())
}

/// Upsampling stride from `level + 1` into decoder `level`.
pub fn upsample_stride(config: &ArchConfig) -> Vec<usize> {
    (1..=config.n_dims)
        .map(|d| if config.is_target(d) { 2 } else { 1 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_net() -> ArchConfig {
        ArchConfig::new(3, 2, 2, vec![1, 1, 1], Variant::Proposed)
    }

    fn ext(v: &[usize]) -> InputExtent {
        InputExtent(v.to_vec())
    }

    #[test]
    fn validate_examples() {
        let cfg = reference_net();
        assert_eq!(cfg.channels, vec![2, 4, 8]);
        assert!(validate(&cfg, &ext(&[64, 128, 256])).is_ok());

        let l1 = ArchConfig::new(3, 2, 4, vec![1], Variant::Proposed);
        assert!(validate(&l1, &ext(&[7, 13, 1])).is_ok());

        let l4 = ArchConfig::new(3, 2, 2, vec![1; 4], Variant::Proposed);
        let errs = validate(&l4, &ext(&[60, 128, 256])).unwrap_err();
        assert_eq!(
            errs,
            vec![ShapeError::Divisibility {
                dim: 1,
                extent: 60,
                depth: 4
            }]
        );
    }

    #[test]
    fn validate_reports_every_violation() {
        let mut cfg = ArchConfig::new(3, 4, 2, vec![1, 1], Variant::Proposed);
        cfg.channels[1] = 5;
        let errs = validate(&cfg, &ext(&[3, 4, 4])).unwrap_err();
        assert!(errs.contains(&ShapeError::Range { target: 4, n_dims: 3 }));
        assert!(errs.contains(&ShapeError::ChannelRule { level: 2 }));
        assert!(errs.contains(&ShapeError::Divisibility {
            dim: 1,
            extent: 3,
            depth: 2
        }));
    }

    #[test]
    fn ablation_needs_reducible_dims() {
        let cfg = ArchConfig::new(2, 2, 2, vec![1], Variant::ThreeDTwoD);
        let errs = validate(&cfg, &ext(&[4, 4])).unwrap_err();
        assert_eq!(errs, vec![ShapeError::AblationUndefined]);
    }

    #[test]
    fn encoder_shape_examples() {
        let cfg = reference_net();
        let e = ext(&[64, 128, 256]);
        assert_eq!(encoder_shape(&cfg, &e, 1).unwrap(), vec![64, 128, 256]);
        assert_eq!(encoder_shape(&cfg, &e, 3).unwrap(), vec![16, 32, 64]);
        let l4 = ArchConfig::new(3, 2, 2, vec![1; 4], Variant::Proposed);
        assert_eq!(encoder_shape(&l4, &ext(&[32, 128, 256]), 4).unwrap(), vec![4, 16, 32]);
        assert!(encoder_shape(&cfg, &e, 0).is_err());
        assert!(encoder_shape(&cfg, &e, 4).is_err());
    }

    #[test]
    fn decoder_shape_examples() {
        let cfg = reference_net();
        let e = ext(&[64, 128, 256]);
        assert_eq!(decoder_shape(&cfg, &e, 1).unwrap(), vec![64, 128, 64]);
        assert_eq!(decoder_shape(&cfg, &e, 3).unwrap(), vec![16, 32, 64]);
        let full = ArchConfig::new(3, 3, 2, vec![1, 1, 1], Variant::Proposed);
        assert_eq!(decoder_shape(&full, &e, 2).unwrap(), vec![32, 64, 128]);
    }

    #[test]
    fn skip_kernel_examples() {
        let cfg = reference_net();
        assert_eq!(skip_kernel(&cfg, 1).unwrap(), vec![1, 1, 4]);
        assert_eq!(skip_kernel(&cfg, 2).unwrap(), vec![1, 1, 2]);
        assert_eq!(skip_kernel(&cfg, 3).unwrap(), vec![1, 1, 1]);
        let m0 = ArchConfig::new(3, 0, 2, vec![1, 1, 1], Variant::Proposed);
        assert_eq!(skip_kernel(&m0, 2).unwrap(), vec![2, 2, 2]);
    }

    #[test]
    fn config_line_round_trip() {
        let cfg = ArchConfig::new(3, 2, 8, vec![1, 2, 1], Variant::ThreeDTwoD);
        assert_eq!(ArchConfig::from_line(&cfg.to_line()).unwrap(), cfg);
        assert!(ArchConfig::from_line("n_dims=3").is_err());
    }

    #[test]
    fn extent_parsing() {
        assert_eq!("64x128x256".parse::<InputExtent>().unwrap(), ext(&[64, 128, 256]));
        assert!("64x?".parse::<InputExtent>().is_err());
        assert_eq!(format_extent(&[64, 128, 64]), "64×128×64");
    }
}
