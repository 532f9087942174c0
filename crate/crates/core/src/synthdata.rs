//! Synthetic 3D -> 2D segmentation tasks with a known en-face ground truth.
//!
//! Volumes have extent `(n_1, n_2, n_3)` with dimension 3 the depth axis.
//! The background is a smooth intensity profile along depth. Inside the 2D
//! mask, every depth column is brightened below a membrane depth (`Blob`,
//! GA-like hypertransmission) or darkened below a shallow depth (`Vessel`,
//! shadow-like). Gaussian noise is added last.
//!
//! All randomness comes from [`SplitMix64`] seeded by the spec, in a fixed
//! draw order: mask shapes first, then one normal per voxel in row-major
//! order.

use std::f64::consts::PI;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{self, read_ndt, write_ndt, Tensor, TensorError};

/// Membrane depth as a fraction of the depth extent.
pub const MEMBRANE_FRACTION: f64 = 0.6;
/// Depth below which vessel shadows start, as a fraction of the depth extent.
pub const SHADOW_FRACTION: f64 = 0.2;
/// Resampled OCT spacing in mm: B-scan distance, A-scan distance, depth.
pub const DEFAULT_SPACING: [f64; 3] = [0.119105, 0.005671, 0.00387];
pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("degenerate extent {0:?}: need three positive extents")]
    Degenerate(Vec<usize>),
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("patch {patch:?} larger than volume {volume:?}")]
    PatchTooLarge { patch: Vec<usize>, volume: Vec<usize> },
    #[error("dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LesionKind {
    Blob,
    Vessel,
}

impl fmt::Display for LesionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LesionKind::Blob => "blob",
            LesionKind::Vessel => "vessel",
        })
    }
}

impl FromStr for LesionKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "blob" => Ok(LesionKind::Blob),
            "vessel" | "vessel-tree" => Ok(LesionKind::Vessel),
            other => Err(format!("unknown lesion kind `{other}` (expected blob or vessel)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenSpec {
    pub extent: Vec<usize>,
    pub kind: LesionKind,
    pub count_min: usize,
    pub count_max: usize,
    /// Lesion contrast, in `(0, 1]`.
    pub contrast: f64,
    /// Noise standard deviation.
    pub noise: f64,
    pub seed: u64,
    pub spacing: [f64; 3],
}

impl GenSpec {
    pub fn blob(extent: &[usize], contrast: f64, noise: f64, seed: u64) -> Self {
        Self {
            extent: extent.to_vec(),
            kind: LesionKind::Blob,
            count_min: 1,
            count_max: 3,
            contrast,
            noise,
            seed,
            spacing: DEFAULT_SPACING,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.extent.len() != 3 || self.extent.contains(&0) {
            return Err(SynthError::Degenerate(self.extent.clone()));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(SynthError::Spec(format!("contrast {} outside (0, 1]", self.contrast)));
        }
        if self.noise < 0.0 || self.contrast <= 2.0 * self.noise {
            return Err(SynthError::Spec(format!(
                "contrast {} must exceed twice the noise {}",
                self.contrast, self.noise
            )));
        }
        if self.count_min == 0 || self.count_min > self.count_max {
            return Err(SynthError::Spec(format!(
                "count range {}..={} is empty",
                self.count_min, self.count_max
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(SynthError::Spec("spacing must be positive".into()));
        }
        Ok(())
    }

    /// Spec for the `index`-th sample of a dataset.
    pub fn for_index(&self, index: usize) -> GenSpec {
        GenSpec {
            seed: derive_seed(self.seed, index as u64),
            ..self.clone()
        }
    }
}

/// One volume with its en-face mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: String,
    /// `[n_1, n_2, n_3]`, depth last.
    pub volume: Tensor<f32>,
    /// `[n_1, n_2]`, values in {0, 1}.
    pub mask: Tensor<f32>,
    /// mm per voxel.
    pub spacing: [f64; 3],
    pub seed: u64,
}

/// Background intensity at depth `z` of `depth`.
pub fn background(z: usize, depth: usize) -> f64 {
    0.4 + 0.2 * (PI * (z as f64 + 0.5) / depth as f64).sin()
}

pub fn membrane_depth(depth: usize) -> usize {
    (MEMBRANE_FRACTION * depth as f64) as usize
}

pub fn shadow_depth(depth: usize) -> usize {
    (SHADOW_FRACTION * depth as f64) as usize
}

/// First depth index affected by a lesion of `kind`.
pub fn lesion_start(kind: LesionKind, depth: usize) -> usize {
    match kind {
        LesionKind::Blob => membrane_depth(depth),
        LesionKind::Vessel => shadow_depth(depth),
    }
}

pub fn generate(spec: &GenSpec) -> Result<SegSample> {
    spec.check()?;
    let (n1, n2, n3) = (spec.extent[0], spec.extent[1], spec.extent[2]);
    let mut rng = SplitMix64::new(spec.seed);
    let count = rng.range_inclusive(spec.count_min, spec.count_max);
    let mut mask = vec![0f32; n1 * n2];
    for _ in 0..count {
        match spec.kind {
            LesionKind::Blob => draw_ellipse(&mut rng, &mut mask, n1, n2),
            LesionKind::Vessel => draw_vessel(&mut rng, &mut mask, n1, n2),
        }
    }

    let start = lesion_start(spec.kind, n3);
    let sign = match spec.kind {
        LesionKind::Blob => 1.0,
        LesionKind::Vessel => -1.0,
    };
    let profile: Vec<f64> = (0..n3).map(|z| background(z, n3)).collect();
    let mut volume = Vec::with_capacity(n1 * n2 * n3);
    for i in 0..n1 {
        for j in 0..n2 {
            let inside = mask[i * n2 + j] > 0.0;
            for (z, &b) in profile.iter().enumerate() {
                let lesion = if inside && z >= start { sign * spec.contrast } else { 0.0 };
                volume.push((b + lesion + spec.noise * rng.normal()) as f32);
            }
        }
    }
    Ok(SegSample {
        id: String::new(),
        volume: Tensor::new(vec![n1, n2, n3], volume)?,
        mask: Tensor::new(vec![n1, n2], mask)?,
        spacing: spec.spacing,
        seed: spec.seed,
    })
}

fn draw_ellipse(rng: &mut SplitMix64, mask: &mut [f32], n1: usize, n2: usize) {
    let ci = rng.uniform(0.0, n1 as f64);
    let cj = rng.uniform(0.0, n2 as f64);
    let a = rng.uniform(0.1, 0.3) * n1 as f64;
    let b = rng.uniform(0.1, 0.3) * n2 as f64;
    let theta = rng.uniform(0.0, PI);
    let (s, c) = theta.sin_cos();
    for i in 0..n1 {
        for j in 0..n2 {
            let (di, dj) = (i as f64 + 0.5 - ci, j as f64 + 0.5 - cj);
            let u = (di * c + dj * s) / a;
            let v = (-di * s + dj * c) / b;
            if u * u + v * v <= 1.0 {
                mask[i * n2 + j] = 1.0;
            }
        }
    }
}

/// Random-walk polyline from a border point, dilated by a square brush of
/// width 1..=3.
fn draw_vessel(rng: &mut SplitMix64, mask: &mut [f32], n1: usize, n2: usize) {
    let width = rng.range_inclusive(1, 3) as i64;
    let (mut p, mut q, mut angle) = match rng.below(4) {
        0 => (0.0, rng.uniform(0.0, n2 as f64), 0.0),
        1 => (n1 as f64 - 1e-9, rng.uniform(0.0, n2 as f64), PI),
        2 => (rng.uniform(0.0, n1 as f64), 0.0, PI / 2.0),
        _ => (rng.uniform(0.0, n1 as f64), n2 as f64 - 1e-9, -PI / 2.0),
    };
    let steps = 2 * (n1 + n2);
    for _ in 0..steps {
        let (ci, cj) = (p.floor() as i64, q.floor() as i64);
        let lo = -(width - 1) / 2;
        for di in lo..lo + width {
            for dj in lo..lo + width {
                let (i, j) = (ci + di, cj + dj);
                if (0..n1 as i64).contains(&i) && (0..n2 as i64).contains(&j) {
                    mask[i as usize * n2 + j as usize] = 1.0;
                }
            }
        }
        angle += 0.3 * rng.normal();
        p += 0.5 * angle.cos();
        q += 0.5 * angle.sin();
        if p < 0.0 || q < 0.0 || p >= n1 as f64 || q >= n2 as f64 {
            break;
        }
    }
}

/// Reference detector: thresholds the mean of each depth column below the
/// lesion start at half the contrast away from the known background.
pub fn oracle_mask(volume: &Tensor<f32>, kind: LesionKind, contrast: f64) -> Tensor<f32> {
    let s = volume.shape();
    let (n1, n2, n3) = (s[0], s[1], s[2]);
    let start = lesion_start(kind, n3);
    let bg = (start..n3).map(|z| background(z, n3)).sum::<f64>() / (n3 - start) as f64;
    let mut out = Vec::with_capacity(n1 * n2);
    for col in volume.data().chunks_exact(n3) {
        let m = col[start..].iter().map(|&v| v as f64).sum::<f64>() / (n3 - start) as f64;
        let hit = match kind {
            LesionKind::Blob => m > bg + contrast / 2.0,
            LesionKind::Vessel => m < bg - contrast / 2.0,
        };
        out.push(if hit { 1.0 } else { 0.0 });
    }
    Tensor::new(vec![n1, n2], out).expect("one value per column")
}

/// Z-score normalization of every cross-sectional slice (fixed index along
/// dimension 1).
pub fn zscore_bscan(volume: &Tensor<f32>) -> Tensor<f32> {
    let n1 = volume.shape()[0];
    let slice = volume.numel() / n1.max(1);
    let mut out = Vec::with_capacity(volume.numel());
    for s in volume.data().chunks_exact(slice.max(1)) {
        let n = s.len() as f64;
        let mean = s.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = s.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let denom = var.sqrt() + 1e-8;
        out.extend(s.iter().map(|&v| ((v as f64 - mean) / denom) as f32));
    }
    Tensor::new(volume.shape().to_vec(), out).expect("same shape")
}

/// Mean projection over the given 0-based axes.
pub fn mean_project(volume: &Tensor<f32>, axes: &[usize]) -> Result<Tensor<f32>> {
    let mut tape = tensor::Tape::<f32>::new();
    let v = tape.leaf(volume.clone(), false);
    let p = tape.global_avg_pool(v, axes)?;
    Ok(tape.value(p).clone())
}

/// Random aligned crop. The mask is cropped with the same offsets in the two
/// target dimensions; the depth offset applies to the volume only.
pub fn crop_patch(sample: &SegSample, patch: &[usize], rng: &mut SplitMix64) -> Result<SegSample> {
    let vs = sample.volume.shape();
    if patch.len() != 3 || patch.iter().zip(vs).any(|(p, v)| p > v || *p == 0) {
        return Err(SynthError::PatchTooLarge {
            patch: patch.to_vec(),
            volume: vs.to_vec(),
        });
    }
    let start: Vec<usize> = patch.iter().zip(vs).map(|(&p, &v)| rng.below(v - p + 1)).collect();
    Ok(SegSample {
        id: sample.id.clone(),
        volume: sample.volume.crop(&start, patch)?,
        mask: sample.mask.crop(&start[..2], &patch[..2])?,
        spacing: sample.spacing,
        seed: sample.seed,
    })
}

/// Generates `count` samples named `sample_000`, `sample_001`, ...
pub fn generate_dataset(spec: &GenSpec, count: usize) -> Result<Vec<SegSample>> {
    (0..count)
        .map(|i| {
            let mut s = generate(&spec.for_index(i))?;
            s.id = format!("sample_{i:03}");
            Ok(s)
        })
        .collect()
}

/// Binary PGM (P5, maxval 255); foreground is 255. Rows run along dimension 1.
pub fn write_pgm<W: Write>(w: &mut W, mask: &Tensor<f32>) -> Result<()> {
    let (h, wd) = (mask.shape()[0], mask.shape()[1]);
    write!(w, "P5\n{wd} {h}\n255\n")?;
    let bytes: Vec<u8> = mask.data().iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_pgm<R: Read>(r: &mut R) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let begin = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if begin == pos {
            return Err(SynthError::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[begin..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(SynthError::Format(format!("unsupported PGM magic {}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|e| SynthError::Format(format!("PGM header: {e}")));
    let (w, h, max) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if max == 0 || max > 255 || bytes.len() < pos + w * h {
        return Err(SynthError::Format("bad PGM payload".into()));
    }
    let data = bytes[pos..pos + w * h]
        .iter()
        .map(|&b| if 2 * b as usize > max { 1.0 } else { 0.0 })
        .collect();
    Ok(Tensor::new(vec![h, w], data)?)
}

/// Writes `<id>.vol.ndt`, `<id>.mask.pgm` and the manifest.
pub fn save_dataset(dir: &Path, samples: &[SegSample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = BufWriter::new(File::create(dir.join(MANIFEST))?);
    writeln!(manifest, "# id seed spacing_1 spacing_2 spacing_3")?;
    for s in samples {
        write_ndt(&dir.join(format!("{}.vol.ndt", s.id)), &s.volume)?;
        let mut w = BufWriter::new(File::create(dir.join(format!("{}.mask.pgm", s.id)))?);
        write_pgm(&mut w, &s.mask)?;
        w.flush()?;
        writeln!(
            manifest,
            "{} {} {} {} {}",
            s.id, s.seed, s.spacing[0], s.spacing[1], s.spacing[2]
        )?;
    }
    manifest.flush()?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SegSample>> {
    let manifest = BufReader::new(File::open(dir.join(MANIFEST))?);
    let mut out = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| SynthError::Format(format!("{MANIFEST}:{}: {msg}", lineno + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(bad(format!("expected 5 fields, got {}", f.len())));
        }
        let seed = f[1].parse().map_err(|e| bad(format!("seed: {e}")))?;
        let mut spacing = [0.0; 3];
        for (k, s) in spacing.iter_mut().enumerate() {
            *s = f[2 + k].parse().map_err(|e| bad(format!("spacing: {e}")))?;
        }
        let id = f[0].to_string();
        let volume: Tensor<f32> = read_ndt(&dir.join(format!("{id}.vol.ndt")))?;
        let mask = read_pgm(&mut BufReader::new(File::open(dir.join(format!("{id}.mask.pgm")))?))?;
        if volume.rank() != 3 || volume.shape()[..2] != *mask.shape() {
            return Err(bad(format!(
                "volume {:?} and mask {:?} disagree",
                volume.shape(),
                mask.shape()
            )));
        }
        out.push(SegSample {
            id,
            volume,
            mask,
            spacing,
            seed,
        });
    }
    if out.is_empty() {
        return Err(SynthError::Format("empty dataset".into()));
    }
    Ok(out)
}
