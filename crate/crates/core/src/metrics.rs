//! Segmentation metrics, paired significance testing and tiled evaluation.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use statrs::distribution::{ContinuousCDF, Normal};

use crate::netbuild::{forward, NetError, NetGraph, ParamStore};
use crate::shapes::InputExtent;
use crate::synthdata::{zscore_bscan, SegSample};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("extent mismatch: {0:?} vs {1:?}")]
    Extent(Vec<usize>, Vec<usize>),
    #[error("need at least {min} non-zero paired differences, got {got}")]
    TooFewPairs { min: usize, got: usize },
    #[error("paired samples differ: {0}")]
    Pairing(String),
    #[error("report: {0}")]
    Format(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Largest number of non-zero differences tested with the exact null.
pub const EXACT_MAX_N: usize = 20;
pub const MIN_PAIRS: usize = 5;

fn check_2d(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<(usize, usize)> {
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(MetricsError::Extent(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok((a.shape()[0], a.shape()[1]))
}

fn fg(v: f32) -> bool {
    v > 0.5
}

/// `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dice(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
    check_2d(pred, gt)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (fg(p), fg(g));
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    }
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

/// Foreground pixels 4-adjacent to background or to the image edge.
pub fn boundary(mask: &Tensor<f32>) -> Vec<(usize, usize)> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let at = |i: usize, j: usize| fg(mask.data()[i * w + j]);
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if !at(i, j) {
                continue;
            }
            let edge = i == 0 || j == 0 || i + 1 == h || j + 1 == w;
            if edge || !at(i - 1, j) || !at(i + 1, j) || !at(i, j - 1) || !at(i, j + 1) {
                out.push((i, j));
            }
        }
    }
    out
}

/// Squared distance transform of a 1D sampled function along a line with
/// sample spacing `s` (lower envelope of parabolas).
fn edt_1d(f: &[f64], s: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let s2 = s * s;
    let mut k = 0usize;
    let mut first = None;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        match first {
            None => {
                first = Some(q);
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
            }
            Some(_) => loop {
                let p = v[k];
                let (qf, pf) = (q as f64, p as f64);
                let sep = ((f[q] + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf));
                // z[0] is -inf, so k never underflows.
                if sep <= z[k] {
                    k -= 1;
                    continue;
                }
                k += 1;
                v[k] = q;
                z[k] = sep;
                z[k + 1] = f64::INFINITY;
                break;
            },
        }
    }
    if first.is_none() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = s2 * d * d + f[v[k]];
    }
}

/// Squared Euclidean distance (in physical units) from every pixel to the
/// nearest site.
fn squared_edt(h: usize, w: usize, sites: &[(usize, usize)], spacing: [f64; 2]) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; h * w];
    for &(i, j) in sites {
        grid[i * w + j] = 0.0;
    }
    let n = h.max(w);
    let (mut v, mut z) = (vec![0usize; n], vec![0f64; n + 1]);
    let mut line = vec![0f64; n];
    let mut out = vec![0f64; n];
    for j in 0..w {
        for i in 0..h {
            line[i] = grid[i * w + j];
        }
        edt_1d(&line[..h], spacing[0], &mut out[..h], &mut v, &mut z);
        for i in 0..h {
            grid[i * w + j] = out[i];
        }
    }
    for i in 0..h {
        line[..w].copy_from_slice(&grid[i * w..(i + 1) * w]);
        edt_1d(&line[..w], spacing[1], &mut out[..w], &mut v, &mut z);
        grid[i * w..(i + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// Distances from each boundary pixel of `from` to the boundary of `to`.
pub fn directed_distances(from: &Tensor<f32>, to: &Tensor<f32>, spacing: [f64; 2]) -> Result<Vec<f64>> {
    let (h, w) = check_2d(from, to)?;
    let field = squared_edt(h, w, &boundary(to), spacing);
    Ok(boundary(from).into_iter().map(|(i, j)| field[i * w + j].sqrt()).collect())
}

/// Percentile `q` in `[0, 100]` by linear interpolation between order
/// statistics.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let h = (values.len() - 1) as f64 * q / 100.0;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(values.len() - 1);
    values[lo] + (h - lo as f64) * (values[hi] - values[lo])
}

/// Symmetric 95th-percentile Hausdorff distance in mm over the pooled
/// directed boundary distances. One empty mask gives the image diagonal;
/// two give 0.
pub fn hd95(pred: &Tensor<f32>, gt: &Tensor<f32>, spacing: [f64; 2]) -> Result<f64> {
    let (h, w) = check_2d(pred, gt)?;
    let (a_empty, b_empty) = (!pred.data().iter().any(|&v| fg(v)), !gt.data().iter().any(|&v| fg(v)));
    match (a_empty, b_empty) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => {
            return Ok(((h as f64 * spacing[0]).powi(2) + (w as f64 * spacing[1]).powi(2)).sqrt())
        }
        _ => {}
    }
    let mut pooled = directed_distances(pred, gt, spacing)?;
    pooled.extend(directed_distances(gt, pred, spacing)?);
    Ok(percentile(&mut pooled, 95.0))
}

/// Average ranks (1-based) of `values`, ties sharing the mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test of paired samples.
///
/// Zero differences are dropped and tied magnitudes get average ranks. Up to
/// [`EXACT_MAX_N`] pairs the null distribution of the positive rank sum is
/// enumerated exactly; beyond that a normal approximation with tie and
/// continuity corrections is used.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MetricsError::Pairing(format!("{} vs {} values", a.len(), b.len())));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|&d| d != 0.0).collect();
    let n = diffs.len();
    if n < MIN_PAIRS {
        return Err(MetricsError::TooFewPairs { min: MIN_PAIRS, got: n });
    }
    let mags: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&mags);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();

    let p = if n <= EXACT_MAX_N {
        // Doubled ranks are integers, so the sum distribution is a count table.
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut counts = vec![0u64; max + 1];
        counts[0] = 1;
        for &r in &doubled {
            for s in (r..=max).rev() {
                counts[s] += counts[s - r];
            }
        }
        let w2 = (2.0 * w_plus).round() as usize;
        let total = (1u64 << n) as f64;
        let lower: u64 = counts[..=w2].iter().sum();
        let upper: u64 = counts[w2..].iter().sum();
        2.0 * lower.min(upper) as f64 / total
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut ties = 0.0;
        let mut sorted = mags.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < n {
            let j = sorted[i..].iter().take_while(|&&v| v == sorted[i]).count();
            let t = j as f64;
            ties += t * t * t - t;
            i += j;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
        let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::standard();
        2.0 * (1.0 - normal.cdf(z))
    };
    Ok(p.min(1.0))
}

/// `*` for p <= 0.05, `**` for p <= 1e-5, `***` for p <= 1e-10.
pub fn significance_stars(p: f64) -> &'static str {
    if p <= 1e-10 {
        "***"
    } else if p <= 1e-5 {
        "**"
    } else if p <= 0.05 {
        "*"
    } else {
        ""
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub id: String,
    pub dice: f64,
    pub hd95_mm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub other: String,
    pub p_dice: f64,
    pub p_hd95: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub records: Vec<SampleMetrics>,
    pub mean_dice: f64,
    pub mean_hd95: f64,
    pub comparison: Option<Comparison>,
}

impl MetricsReport {
    pub fn from_records(records: Vec<SampleMetrics>) -> Self {
        let n = records.len().max(1) as f64;
        let mean_dice = records.iter().map(|r| r.dice).sum::<f64>() / n;
        let mean_hd95 = records.iter().map(|r| r.hd95_mm).sum::<f64>() / n;
        Self {
            records,
            mean_dice,
            mean_hd95,
            comparison: None,
        }
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "id,dice,hd95_mm")?;
        for r in &self.records {
            writeln!(w, "{},{},{}", r.id, r.dice, r.hd95_mm)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if i == 0 {
                if line != "id,dice,hd95_mm" {
                    return Err(MetricsError::Format(format!("unexpected header `{line}`")));
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let bad = |m: String| MetricsError::Format(format!("line {}: {m}", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(bad(format!("expected 3 fields, got {}", f.len())));
            }
            records.push(SampleMetrics {
                id: f[0].to_string(),
                dice: f[1].parse().map_err(|e| bad(format!("dice: {e}")))?,
                hd95_mm: f[2].parse().map_err(|e| bad(format!("hd95_mm: {e}")))?,
            });
        }
        if records.is_empty() {
            return Err(MetricsError::Format("no records".into()));
        }
        Ok(Self::from_records(records))
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples: {}", self.records.len());
        let _ = writeln!(s, "mean dice: {:.4}", self.mean_dice);
        let _ = writeln!(s, "mean hd95: {:.4} mm", self.mean_hd95);
        if let Some(c) = &self.comparison {
            let _ = writeln!(s, "vs {}: p(dice) = {:.3e}{}", c.other, c.p_dice, significance_stars(c.p_dice));
            let _ = writeln!(s, "vs {}: p(hd95) = {:.3e}{}", c.other, c.p_hd95, significance_stars(c.p_hd95));
        }
        s
    }
}

/// Pairs two reports by sample id and tests both metrics.
pub fn compare_reports(a: &MetricsReport, b: &MetricsReport, other: &str) -> Result<Comparison> {
    let ids_a: Vec<&str> = a.records.iter().map(|r| r.id.as_str()).collect();
    let mut paired = Vec::with_capacity(ids_a.len());
    for ra in &a.records {
        let rb = b
            .records
            .iter()
            .find(|r| r.id == ra.id)
            .ok_or_else(|| MetricsError::Pairing(format!("`{}` missing from second report", ra.id)))?;
        paired.push((ra, rb));
    }
    if b.records.len() != a.records.len() {
        return Err(MetricsError::Pairing(format!(
            "{} vs {} samples",
            a.records.len(),
            b.records.len()
        )));
    }
    let col = |f: fn(&SampleMetrics) -> f64| -> (Vec<f64>, Vec<f64>) {
        paired.iter().map(|(x, y)| (f(x), f(y))).unzip()
    };
    let (da, db) = col(|r| r.dice);
    let (ha, hb) = col(|r| r.hd95_mm);
    Ok(Comparison {
        other: other.to_string(),
        p_dice: wilcoxon_signed_rank(&da, &db)?,
        p_hd95: wilcoxon_signed_rank(&ha, &hb)?,
    })
}

/// Tile origins covering `n` with windows of `p` at stride `p / 2`, the last
/// window flush with the end.
pub fn tile_starts(n: usize, p: usize) -> Vec<usize> {
    if p >= n {
        return vec![0];
    }
    let stride = (p / 2).max(1);
    let mut starts: Vec<usize> = (0..=n - p).step_by(stride).collect();
    if *starts.last().expect("non-empty") != n - p {
        starts.push(n - p);
    }
    starts
}

/// Probability map `[n_1, n_2]` for a preprocessed volume `[n_1, n_2, n_3]`.
///
/// Tiles cover the two target dimensions; the depth axis is fed whole. The
/// network is rebuilt for the tile extent, and overlapping tiles are averaged.
pub fn predict_volume(graph: &NetGraph, params: &ParamStore<f32>, volume: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = volume.shape();
    let (n1, n2, n3) = (s[0], s[1], s[2]);
    let (p1, p2) = (graph.extent.0[0].min(n1), graph.extent.0[1].min(n2));
    let tile_graph = graph.with_extent(&InputExtent(vec![p1, p2, n3]))?;
    let mut sum = vec![0f64; n1 * n2];
    let mut count = vec![0u32; n1 * n2];
    for &i0 in &tile_starts(n1, p1) {
        for &j0 in &tile_starts(n2, p2) {
            let tile = volume.crop(&[i0, j0, 0], &[p1, p2, n3])?.reshape(&[1, 1, p1, p2, n3])?;
            let prob = forward(&tile_graph, params, tile)?;
            for i in 0..p1 {
                for j in 0..p2 {
                    let k = (i0 + i) * n2 + j0 + j;
                    sum[k] += prob.data()[i * p2 + j] as f64;
                    count[k] += 1;
                }
            }
        }
    }
    let data = sum.iter().zip(&count).map(|(&s, &c)| (s / c as f64) as f32).collect();
    Ok(Tensor::new(vec![n1, n2], data)?)
}

/// Binary mask; ties at 0.5 go to background.
pub fn threshold(prob: &Tensor<f32>) -> Tensor<f32> {
    prob.map(|p| if p > 0.5 { 1.0 } else { 0.0 })
}

pub fn score(id: &str, pred: &Tensor<f32>, gt: &Tensor<f32>, spacing: [f64; 2]) -> Result<SampleMetrics> {
    Ok(SampleMetrics {
        id: id.to_string(),
        dice: dice(pred, gt)?,
        hd95_mm: hd95(pred, gt, spacing)?,
    })
}

pub struct Evaluation {
    pub report: MetricsReport,
    /// Thresholded masks, one per sample.
    pub predictions: Vec<Tensor<f32>>,
}

/// Whole-volume inference and scoring of every sample.
pub fn evaluate(graph: &NetGraph, params: &ParamStore<f32>, samples: &[SegSample]) -> Result<Evaluation> {
    let mut records = Vec::with_capacity(samples.len());
    let mut predictions = Vec::with_capacity(samples.len());
    for s in samples {
        let prob = predict_volume(graph, params, &zscore_bscan(&s.volume))?;
        let mask = threshold(&prob);
        records.push(score(&s.id, &mask, &s.mask, [s.spacing[0], s.spacing[1]])?);
        predictions.push(mask);
    }
    Ok(Evaluation {
        report: MetricsReport::from_records(records),
        predictions,
    })
}

pub const TP_COLOR: [u8; 3] = [0, 200, 0];
pub const FP_COLOR: [u8; 3] = [255, 165, 0];
pub const FN_COLOR: [u8; 3] = [139, 0, 0];

/// PPM P6 overlay: true positives green, false positives orange, false
/// negatives dark red, true negatives black.
pub fn write_overlay_ppm<W: Write>(w: &mut W, pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<()> {
    let (h, wd) = check_2d(pred, gt)?;
    write!(w, "P6\n{wd} {h}\n255\n")?;
    let mut bytes = Vec::with_capacity(3 * h * wd);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        bytes.extend_from_slice(&match (fg(p), fg(g)) {
            (true, true) => TP_COLOR,
            (true, false) => FP_COLOR,
            (false, true) => FN_COLOR,
            (false, false) => [0, 0, 0],
        });
    }
    w.write_all(&bytes)?;
    Ok(())
}
