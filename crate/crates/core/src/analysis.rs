//! Crop statistics: how much random crops overlap the annotated objects, and
//! how confident the pooled labels are as a function of that overlap.
//!
//! Image `i` (in input order) draws its crops from random stream `i` under
//! the run seed, so tables do not depend on how work is split across threads.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::augment::{iou, BBox, CropParams, CropRegion, CropSampler, ImageSize};
use crate::pooling::pool_label;
use crate::store::LabelStore;
use crate::{Error, Result};

/// Number of points on the IoU threshold grid `{0, 0.01, ..., 1}`.
pub const CDF_POINTS: usize = 101;
/// Number of uniform IoU bins in a [`ConfidenceProfile`].
pub const CONFIDENCE_BINS: usize = 10;

/// Ground-truth boxes of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBoxes {
    pub image_id: String,
    pub boxes: Vec<BBox>,
}

/// Largest IoU between `region` and any of `boxes` (0 when there are none).
pub fn max_iou(region: &CropRegion, boxes: &[BBox]) -> f64 {
    let r = region.to_bbox();
    boxes.iter().map(|b| iou(&r, b)).fold(0.0, f64::max)
}

/// One sampled crop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropOverlap {
    /// Index into the input box lists.
    pub image: usize,
    pub region: CropRegion,
    pub iou: f64,
}

/// Samples `crops_per_image` crops for every image with at least one box.
///
/// Returns the crops in image order and the number of images skipped for
/// having no boxes.
pub fn sample_crop_overlaps(
    gt_boxes: &[ImageBoxes],
    params: &CropParams,
    crops_per_image: usize,
    seed: u64,
) -> Result<(Vec<CropOverlap>, usize)> {
    params.validate()?;
    if crops_per_image == 0 {
        return Err(Error::InvalidParameter("crops_per_image must be positive".into()));
    }
    let skipped = gt_boxes.iter().filter(|b| b.boxes.is_empty()).count();
    if gt_boxes.len() == skipped {
        return Err(Error::NoImages("no image has a ground-truth box".into()));
    }
    let per_image: Vec<Vec<CropOverlap>> = gt_boxes
        .par_iter()
        .enumerate()
        .filter(|(_, img)| !img.boxes.is_empty())
        .map(|(i, img)| {
            let mut sampler = CropSampler::with_stream(seed, i as u64, *params, ImageSize::square())
                .expect("params validated above");
            (0..crops_per_image)
                .map(|_| {
                    let region = sampler.sample().region;
                    CropOverlap {
                        image: i,
                        region,
                        iou: max_iou(&region, &img.boxes),
                    }
                })
                .collect()
        })
        .collect();
    Ok((per_image.into_iter().flatten().collect(), skipped))
}

/// Empirical CDF of crop IoU on the grid `{0, 0.01, ..., 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CdfTable {
    pub thresholds: Vec<f64>,
    /// Fraction of crops with IoU `<=` the threshold.
    pub cumulative_fraction: Vec<f64>,
    pub sample_count: usize,
    /// Fraction of crops that do not touch any box.
    pub fraction_zero: f64,
    /// Fraction of crops with IoU above 0.5.
    pub fraction_above_half: f64,
    /// Images without boxes, left out of the table.
    pub skipped_images: usize,
}

impl CdfTable {
    pub fn from_ious(ious: &[f64], skipped_images: usize) -> Result<Self> {
        if ious.is_empty() {
            return Err(Error::NoImages("no crop samples".into()));
        }
        let mut sorted = ious.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let thresholds: Vec<f64> = (0..CDF_POINTS).map(|i| i as f64 / (CDF_POINTS - 1) as f64).collect();
        let cumulative_fraction = thresholds
            .iter()
            .map(|t| sorted.partition_point(|v| v <= t) as f64 / n)
            .collect();
        Ok(CdfTable {
            thresholds,
            cumulative_fraction,
            sample_count: sorted.len(),
            fraction_zero: sorted.iter().filter(|v| **v == 0.0).count() as f64 / n,
            fraction_above_half: sorted.iter().filter(|v| **v > 0.5).count() as f64 / n,
            skipped_images,
        })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iou_threshold", "cumulative_fraction"])?;
        for (t, f) in self.thresholds.iter().zip(&self.cumulative_fraction) {
            w.write_record([format!("{t:.2}"), format!("{f:.6}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// CDF of the best-box IoU over `crops_per_image` random crops per image.
pub fn crop_iou_cdf(
    gt_boxes: &[ImageBoxes],
    params: &CropParams,
    crops_per_image: usize,
    seed: u64,
) -> Result<CdfTable> {
    let (crops, skipped) = sample_crop_overlaps(gt_boxes, params, crops_per_image, seed)?;
    let ious: Vec<f64> = crops.iter().map(|c| c.iou).collect();
    CdfTable::from_ious(&ious, skipped)
}

/// Label confidence binned by crop IoU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceProfile {
    /// `[lo, hi)` per bin; the last bin also holds IoU = 1.
    pub iou_bins: Vec<(f64, f64)>,
    /// NaN for empty bins.
    pub mean_confidence: Vec<f64>,
    /// Population standard deviation; NaN for empty bins.
    pub std_confidence: Vec<f64>,
    pub counts: Vec<usize>,
    pub sample_count: usize,
}

impl ConfidenceProfile {
    fn from_samples(samples: &[(f64, f64)]) -> Self {
        let bins = CONFIDENCE_BINS;
        let mut sum = vec![0.0; bins];
        let mut sum_sq = vec![0.0; bins];
        let mut counts = vec![0usize; bins];
        for &(iou, conf) in samples {
            let b = bin_of(iou);
            sum[b] += conf;
            sum_sq[b] += conf * conf;
            counts[b] += 1;
        }
        let mean: Vec<f64> = (0..bins)
            .map(|b| if counts[b] == 0 { f64::NAN } else { sum[b] / counts[b] as f64 })
            .collect();
        let std = (0..bins)
            .map(|b| {
                if counts[b] == 0 {
                    f64::NAN
                } else {
                    (sum_sq[b] / counts[b] as f64 - mean[b] * mean[b]).max(0.0).sqrt()
                }
            })
            .collect();
        ConfidenceProfile {
            iou_bins: (0..bins)
                .map(|b| (b as f64 / bins as f64, (b + 1) as f64 / bins as f64))
                .collect(),
            mean_confidence: mean,
            std_confidence: std,
            counts,
            sample_count: samples.len(),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iou_lo", "iou_hi", "count", "mean_confidence", "std_confidence"])?;
        for b in 0..self.counts.len() {
            let (lo, hi) = self.iou_bins[b];
            w.write_record([
                format!("{lo:.1}"),
                format!("{hi:.1}"),
                self.counts[b].to_string(),
                format!("{:.6}", self.mean_confidence[b]),
                format!("{:.6}", self.std_confidence[b]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn bin_of(iou: f64) -> usize {
    ((iou * CONFIDENCE_BINS as f64).floor() as usize).min(CONFIDENCE_BINS - 1)
}

/// Pools the stored label over random crops and bins its confidence by IoU.
///
/// `samples_total` crops are spread round-robin over the images that have
/// boxes; each of them must be present in `store`.
pub fn confidence_vs_iou(
    store: &LabelStore,
    gt_boxes: &[ImageBoxes],
    params: &CropParams,
    samples_total: usize,
    seed: u64,
) -> Result<ConfidenceProfile> {
    params.validate()?;
    let images: Vec<(usize, &ImageBoxes)> = gt_boxes
        .iter()
        .enumerate()
        .filter(|(_, b)| !b.boxes.is_empty())
        .collect();
    if images.is_empty() {
        return Err(Error::NoImages("no image has a ground-truth box".into()));
    }
    if let Some((_, missing)) = images.iter().find(|(_, b)| !store.contains(&b.image_id)) {
        return Err(Error::UnknownImage(missing.image_id.clone()));
    }
    let n = images.len();
    let per_image: Vec<Vec<(f64, f64)>> = images
        .par_iter()
        .enumerate()
        .map(|(slot, (i, img))| -> Result<Vec<(f64, f64)>> {
            let count = samples_total / n + usize::from(slot < samples_total % n);
            if count == 0 {
                return Ok(Vec::new());
            }
            let map = store.get_map(&img.image_id)?;
            let mut sampler = CropSampler::with_stream(seed, *i as u64, *params, ImageSize::square())?;
            (0..count)
                .map(|_| {
                    let region = sampler.sample().region;
                    let target = pool_label(&map, &region)?;
                    Ok((max_iou(&region, &img.boxes), target.confidence()))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let samples: Vec<(f64, f64)> = per_image.into_iter().flatten().collect();
    Ok(ConfidenceProfile::from_samples(&samples))
}

/// Reads `image_id,x0,y0,x1,y1` rows (normalized, with a header row).
///
/// Rows of the same image are grouped, keeping first-appearance order. A row
/// with an empty box (`x0,y0,x1,y1` left blank) registers an image with no
/// boxes.
pub fn read_boxes_csv<R: Read>(input: R) -> Result<Vec<ImageBoxes>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut out: Vec<ImageBoxes> = Vec::new();
    let mut index = std::collections::HashMap::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let row = line + 2;
        if record.len() != 5 {
            return Err(Error::Format(format!("boxes row {row}: expected 5 fields, got {}", record.len())));
        }
        let id = record[0].to_string();
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            out.push(ImageBoxes {
                image_id: id,
                boxes: Vec::new(),
            });
            out.len() - 1
        });
        if (1..5).all(|i| record[i].is_empty()) {
            continue;
        }
        let mut v = [0.0; 4];
        for (slot_v, field) in v.iter_mut().zip(record.iter().skip(1)) {
            *slot_v = field
                .parse()
                .map_err(|e| Error::Format(format!("boxes row {row}: `{field}`: {e}")))?;
        }
        let b = BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| Error::Format(format!("boxes row {row}: {e}")))?;
        out[slot].boxes.push(b);
    }
    Ok(out)
}
