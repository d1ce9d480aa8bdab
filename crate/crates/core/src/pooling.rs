//! Regional label pooling.
//!
//! A crop's target is the label map averaged over the crop rectangle, then
//! normalized to a probability vector. The average is RoIAlign with a 1x1
//! output: the map is treated as a bilinear surface through the pixel
//! centers `(i + 0.5, j + 0.5)`, held constant beyond the outermost centers,
//! and that surface is averaged over the region. The average is computed
//! exactly (the limit of RoIAlign as the sampling ratio grows), which makes
//! the full-image pool identical to global average pooling.
//!
//! Normalization depends on what the map holds: raw scores go through a
//! softmax after pooling; probability maps (including every sparse map) are
//! renormalized to sum to one, falling back to uniform when the region holds
//! no stored mass.

use std::fmt;
use std::str::FromStr;

use crate::augment::CropRegion;
use crate::label_map::{argmax, log_sum_exp, softmax, DenseLabelMap, ValueMode};
use crate::sparse::SparseLabelMap;
use crate::{Error, Result};

/// Tolerance on the sum of a [`PooledTarget`].
pub const TARGET_SUM_TOL: f64 = 1e-6;

/// A probability vector over classes.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledTarget {
    probs: Vec<f64>,
}

impl PooledTarget {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidParameter("target must have at least one class".into()));
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "target entry {i} = {} is not a probability",
                probs[i]
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > TARGET_SUM_TOL {
            return Err(Error::InvalidParameter(format!("target sums to {sum}")));
        }
        Ok(PooledTarget { probs })
    }

    pub fn uniform(num_classes: usize) -> Self {
        PooledTarget {
            probs: vec![1.0 / num_classes as f64; num_classes],
        }
    }

    pub fn one_hot(class: usize, num_classes: usize) -> Self {
        let mut probs = vec![0.0; num_classes];
        probs[class] = 1.0;
        PooledTarget { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Largest probability, the label's confidence.
    pub fn confidence(&self) -> f64 {
        self.probs.iter().copied().fold(0.0, f64::max)
    }

    /// Most probable class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }
}

/// The four label constructions crossing {localized, global} x {multi, single}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LabelVariant {
    LocMulti,
    LocSingle,
    GlobMulti,
    GlobSingle,
}

impl LabelVariant {
    pub const ALL: [LabelVariant; 4] = [
        LabelVariant::LocMulti,
        LabelVariant::LocSingle,
        LabelVariant::GlobMulti,
        LabelVariant::GlobSingle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LabelVariant::LocMulti => "loc_multi",
            LabelVariant::LocSingle => "loc_single",
            LabelVariant::GlobMulti => "glob_multi",
            LabelVariant::GlobSingle => "glob_single",
        }
    }
}

impl fmt::Display for LabelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LabelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LabelVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "unknown label variant `{s}` (expected loc_multi, loc_single, glob_multi or glob_single)"
                ))
            })
    }
}

/// Anything that can be pooled: a dense map or a sparse top-k map.
#[derive(Debug, Clone, Copy)]
pub enum LabelSource<'a> {
    Dense(&'a DenseLabelMap),
    Sparse(&'a SparseLabelMap),
}

impl<'a> From<&'a DenseLabelMap> for LabelSource<'a> {
    fn from(m: &'a DenseLabelMap) -> Self {
        LabelSource::Dense(m)
    }
}

impl<'a> From<&'a SparseLabelMap> for LabelSource<'a> {
    fn from(m: &'a SparseLabelMap) -> Self {
        LabelSource::Sparse(m)
    }
}

impl LabelSource<'_> {
    fn dims(&self) -> (usize, usize, usize) {
        match self {
            LabelSource::Dense(m) => (m.height(), m.width(), m.num_classes()),
            LabelSource::Sparse(m) => (m.height(), m.width(), m.num_classes()),
        }
    }

    fn value_mode(&self) -> ValueMode {
        match self {
            LabelSource::Dense(m) => m.value_mode(),
            LabelSource::Sparse(m) => m.value_mode(),
        }
    }
}

/// Per-pixel weights of the exact area average along one axis.
///
/// `lo..hi` is the region in grid units (`0..n` covers the whole axis). The
/// interpolant is piecewise linear between pixel centers and constant in the
/// outer half pixels, so each piece integrates in closed form.
pub fn axis_weights(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    debug_assert!(n > 0 && hi > lo);
    let mut weights = vec![0.0; n];
    let mut add_segment = |s: f64, e: f64| {
        let u = 0.5 * (s + e) - 0.5;
        if u <= 0.0 {
            weights[0] += e - s;
        } else if u >= (n - 1) as f64 {
            weights[n - 1] += e - s;
        } else {
            let i = u.floor() as usize;
            let center = i as f64 + 0.5;
            let right = 0.5 * ((e - center).powi(2) - (s - center).powi(2));
            weights[i + 1] += right;
            weights[i] += (e - s) - right;
        }
    };

    let first_center = (lo - 0.5).floor() as i64 + 1;
    let mut s = lo;
    let mut i = first_center.max(0);
    while (i as f64 + 0.5) < hi && (i as usize) < n {
        let c = i as f64 + 0.5;
        if c > s {
            add_segment(s, c);
            s = c;
        }
        i += 1;
    }
    add_segment(s, hi);

    let extent = hi - lo;
    weights.iter_mut().for_each(|w| *w /= extent);
    weights
}

/// Row and column weights for `region` on a `height x width` grid.
fn region_weights(region: &CropRegion, height: usize, width: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    region.validate()?;
    let (h, w) = (height as f64, width as f64);
    let (y0, y1) = (region.y * h, region.y1() * h);
    let (x0, x1) = (region.x * w, region.x1() * w);
    if y1 <= y0 || x1 <= x0 {
        return Err(Error::DegenerateRegion(format!(
            "region {region:?} has no extent on a {height}x{width} grid"
        )));
    }
    Ok((axis_weights(height, y0, y1), axis_weights(width, x0, x1)))
}

fn pooled_values(source: LabelSource<'_>, region: &CropRegion) -> Result<Vec<f64>> {
    let (height, width, classes) = source.dims();
    let (row_w, col_w) = region_weights(region, height, width)?;
    let mut out = vec![0.0; classes];
    for (r, &wr) in row_w.iter().enumerate() {
        if wr == 0.0 {
            continue;
        }
        for (c, &wc) in col_w.iter().enumerate() {
            let weight = wr * wc;
            if weight == 0.0 {
                continue;
            }
            match source {
                LabelSource::Dense(m) => {
                    for (o, v) in out.iter_mut().zip(m.pixel(r, c)) {
                        *o += weight * v;
                    }
                }
                // Equivalent to densifying the enclosing window: classes
                // that were not stored contribute zero.
                LabelSource::Sparse(m) => {
                    for (class, v) in m.pixel_entries(r, c) {
                        out[class] += weight * v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// RoIAlign with a 1x1 output: the region average of each class channel.
pub fn roi_align_1x1(map: &DenseLabelMap, region: &CropRegion) -> Result<Vec<f64>> {
    pooled_values(LabelSource::Dense(map), region)
}

/// Same as [`roi_align_1x1`] over a sparse map, reading stored pairs directly.
pub fn roi_align_1x1_sparse(map: &SparseLabelMap, region: &CropRegion) -> Result<Vec<f64>> {
    pooled_values(LabelSource::Sparse(map), region)
}

/// Divides by the total; an all-zero vector becomes uniform.
pub fn renormalize(mut values: Vec<f64>) -> Vec<f64> {
    let sum: f64 = values.iter().sum();
    if sum <= 0.0 {
        let n = values.len() as f64;
        values.iter_mut().for_each(|v| *v = 1.0 / n);
    } else {
        values.iter_mut().for_each(|v| *v /= sum);
    }
    values
}

fn normalize(values: Vec<f64>, mode: ValueMode) -> Vec<f64> {
    match mode {
        ValueMode::RawScores => softmax(&values),
        ValueMode::Probabilities => renormalize(values),
    }
}

/// The training target for one crop.
pub fn pool_label<'a>(source: impl Into<LabelSource<'a>>, region: &CropRegion) -> Result<PooledTarget> {
    let source = source.into();
    if matches!(source, LabelSource::Sparse(_)) && source.value_mode() == ValueMode::RawScores {
        return Err(Error::WrongValueMode(
            "sparse raw-score maps have no fill value for dropped classes; store probabilities".into(),
        ));
    }
    let pooled = pooled_values(source, region)?;
    Ok(PooledTarget {
        probs: normalize(pooled, source.value_mode()),
    })
}

/// One of the four factor-analysis label constructions.
pub fn label_variant(map: &DenseLabelMap, region: &CropRegion, variant: LabelVariant) -> Result<PooledTarget> {
    region.validate()?;
    let mode = map.value_mode();
    let c = map.num_classes();
    Ok(match variant {
        LabelVariant::LocMulti => pool_label(map, region)?,
        LabelVariant::LocSingle => PooledTarget::one_hot(argmax(&roi_align_1x1(map, region)?), c),
        LabelVariant::GlobMulti => PooledTarget {
            probs: normalize(map.spatial_mean(), mode),
        },
        LabelVariant::GlobSingle => PooledTarget::one_hot(argmax(&map.spatial_mean()), c),
    })
}

fn mix(a: &PooledTarget, b: &PooledTarget, weight: f64, what: &str) -> Result<PooledTarget> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::InvalidParameter(format!("{what} {weight} outside [0, 1]")));
    }
    if a.num_classes() != b.num_classes() {
        return Err(Error::LengthMismatch {
            expected: a.num_classes(),
            actual: b.num_classes(),
        });
    }
    let probs = a
        .probs
        .iter()
        .zip(&b.probs)
        .map(|(x, y)| weight * x + (1.0 - weight) * y)
        .collect();
    Ok(PooledTarget { probs })
}

/// `w * ours + (1 - w) * gt`.
pub fn combine_labels(ours: &PooledTarget, gt: &PooledTarget, w: f64) -> Result<PooledTarget> {
    mix(ours, gt, w, "combination weight")
}

/// CutMix target: `lambda * t1 + (1 - lambda) * t2`.
pub fn cutmix_targets(t1: &PooledTarget, t2: &PooledTarget, lambda: f64) -> Result<PooledTarget> {
    mix(t1, t2, lambda, "CutMix lambda")
}

/// Soft-target cross-entropy `-sum_c target[c] * log softmax(pred)[c]`.
pub fn cross_entropy(pred_scores: &[f64], target: &PooledTarget) -> Result<f64> {
    if pred_scores.len() != target.num_classes() {
        return Err(Error::LengthMismatch {
            expected: target.num_classes(),
            actual: pred_scores.len(),
        });
    }
    if let Some(i) = pred_scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let lse = log_sum_exp(pred_scores);
    let loss: f64 = target
        .probs
        .iter()
        .zip(pred_scores)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, s)| t * (lse - s))
        .sum();
    Ok(loss.max(0.0))
}
