//! Per-pixel top-k sparse label maps.

use std::ops::Range;

use crate::augment::CropRegion;
use crate::label_map::{softmax, DenseLabelMap, ValueMode};
use crate::quant::QuantFormat;
use crate::{Error, Result};

/// Slack on the per-pixel sum of stored probabilities, before quantization widening.
pub const SPARSE_SUM_TOL: f64 = 1e-4;

/// Largest supported class count; indices are stored as `u16`.
pub const MAX_CLASSES: usize = u16::MAX as usize;

/// Top-k classes per pixel, `(row, col, slot)` row-major.
///
/// Values are stored as quantized bit patterns; per pixel the decoded values
/// are non-increasing and the indices distinct.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseLabelMap {
    height: usize,
    width: usize,
    num_classes: usize,
    k: usize,
    indices: Vec<u16>,
    values: Vec<u32>,
    quant: QuantFormat,
    value_mode: ValueMode,
}

#[allow(clippy::too_many_arguments)]
impl SparseLabelMap {
    /// Assembles a map from raw parts, checking every invariant.
    pub fn from_parts(
        height: usize,
        width: usize,
        num_classes: usize,
        k: usize,
        indices: Vec<u16>,
        values: Vec<u32>,
        quant: QuantFormat,
        value_mode: ValueMode,
    ) -> Result<Self> {
        if height == 0 || width == 0 || num_classes == 0 {
            return Err(Error::InvalidShape(format!(
                "sparse map dimensions must be positive, got {height}x{width}x{num_classes}"
            )));
        }
        if num_classes > MAX_CLASSES {
            return Err(Error::InvalidShape(format!(
                "{num_classes} classes exceed the 16-bit index limit"
            )));
        }
        if k == 0 || k > num_classes {
            return Err(Error::KOutOfRange {
                k,
                classes: num_classes,
            });
        }
        let expected = height * width * k;
        for len in [indices.len(), values.len()] {
            if len != expected {
                return Err(Error::LengthMismatch {
                    expected,
                    actual: len,
                });
            }
        }
        let map = SparseLabelMap {
            height,
            width,
            num_classes,
            k,
            indices,
            values,
            quant,
            value_mode,
        };
        map.validate()?;
        Ok(map)
    }

    fn validate(&self) -> Result<()> {
        let sum_tol = SPARSE_SUM_TOL + self.k as f64 * self.quant.relative_bound();
        let mut seen = vec![false; self.num_classes];
        for p in 0..self.height * self.width {
            let (idx, vals) = self.pixel_raw(p);
            for &i in idx {
                let i = i as usize;
                if i >= self.num_classes {
                    return Err(Error::Format(format!(
                        "pixel {p}: class index {i} >= {}",
                        self.num_classes
                    )));
                }
                if seen[i] {
                    return Err(Error::Format(format!("pixel {p}: duplicate class index {i}")));
                }
                seen[i] = true;
            }
            idx.iter().for_each(|&i| seen[i as usize] = false);

            let decoded: Vec<f64> = vals.iter().map(|&b| self.quant.decode(b) as f64).collect();
            if decoded.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("pixel {p}: non-finite value")));
            }
            if decoded.windows(2).any(|w| w[0] < w[1]) {
                return Err(Error::Format(format!("pixel {p}: values not sorted non-increasing")));
            }
            if self.value_mode == ValueMode::Probabilities {
                let sum: f64 = decoded.iter().sum();
                if decoded.iter().any(|v| *v < 0.0) || sum > 1.0 + sum_tol {
                    return Err(Error::Format(format!(
                        "pixel {p}: probabilities are negative or sum to {sum}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn quant(&self) -> QuantFormat {
        self.quant
    }

    pub fn value_mode(&self) -> ValueMode {
        self.value_mode
    }

    pub fn indices(&self) -> &[u16] {
        &self.indices
    }

    /// Quantized value bit patterns.
    pub fn raw_values(&self) -> &[u32] {
        &self.values
    }

    fn pixel_raw(&self, p: usize) -> (&[u16], &[u32]) {
        let s = p * self.k;
        (&self.indices[s..s + self.k], &self.values[s..s + self.k])
    }

    /// Stored `(class, value)` pairs at one pixel, highest value first.
    pub fn pixel_entries(&self, row: usize, col: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (idx, vals) = self.pixel_raw(row * self.width + col);
        idx.iter()
            .zip(vals)
            .map(|(&i, &b)| (i as usize, self.quant.decode(b) as f64))
    }

    /// Dense copy of the whole map.
    pub fn densify(&self) -> DenseLabelMap {
        self.densify_window(0..self.height, 0..self.width)
            .expect("full window is never empty")
    }

    /// Dense `rows x cols` sub-map; classes that were not stored are 0.
    pub fn densify_window(&self, rows: Range<usize>, cols: Range<usize>) -> Result<DenseLabelMap> {
        let rows = rows.start..rows.end.min(self.height);
        let cols = cols.start..cols.end.min(self.width);
        if rows.is_empty() || cols.is_empty() {
            return Err(Error::EmptyIntersection);
        }
        let (h, w, c) = (rows.len(), cols.len(), self.num_classes);
        let mut values = vec![0.0; h * w * c];
        for (wr, r) in rows.clone().enumerate() {
            for (wc, col) in cols.clone().enumerate() {
                let base = (wr * w + wc) * c;
                for (class, v) in self.pixel_entries(r, col) {
                    values[base + class] = v;
                }
            }
        }
        // Quantized probabilities need not sum to exactly 1, so the window
        // skips the probability-sum check.
        Ok(DenseLabelMap::from_raw_parts(h, w, c, values, self.value_mode))
    }
}

/// Pixel rows/cols of the smallest integer window enclosing `region` on an
/// `height x width` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelWindow {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

impl PixelWindow {
    pub fn enclosing(region: &CropRegion, height: usize, width: usize) -> Result<Self> {
        let span = |start: f64, extent: f64, n: usize| {
            let lo = (start * n as f64).floor().max(0.0) as usize;
            let hi = (((start + extent) * n as f64).ceil().max(0.0) as usize).min(n);
            lo..hi
        };
        let rows = span(region.y, region.h, height);
        let cols = span(region.x, region.w, width);
        if rows.is_empty() || cols.is_empty() {
            return Err(Error::EmptyIntersection);
        }
        Ok(PixelWindow { rows, cols })
    }

    /// The window grown by `margin` pixels on each side, clipped to the grid.
    pub fn padded(&self, margin: usize, height: usize, width: usize) -> Self {
        PixelWindow {
            rows: self.rows.start.saturating_sub(margin)..(self.rows.end + margin).min(height),
            cols: self.cols.start.saturating_sub(margin)..(self.cols.end + margin).min(width),
        }
    }
}

/// Dense sub-map covering the minimal pixel window that encloses `region`.
pub fn densify_region(sparse: &SparseLabelMap, region: &CropRegion) -> Result<DenseLabelMap> {
    region.validate()?;
    let window = PixelWindow::enclosing(region, sparse.height(), sparse.width())?;
    sparse.densify_window(window.rows, window.cols)
}

/// Keeps the `k` most probable classes of every pixel.
///
/// Raw-score maps are converted with a per-pixel softmax first; probability
/// maps are used as is. Ties go to the lower class index.
pub fn encode_sparse(dense: &DenseLabelMap, k: usize, quant: QuantFormat) -> Result<SparseLabelMap> {
    let c = dense.num_classes();
    if k == 0 || k > c {
        return Err(Error::KOutOfRange { k, classes: c });
    }
    if c > MAX_CLASSES {
        return Err(Error::InvalidShape(format!("{c} classes exceed the 16-bit index limit")));
    }
    if let Some(i) = dense.first_non_finite() {
        return Err(Error::NonFinite(i));
    }

    let n_pixels = dense.height() * dense.width();
    let mut indices = Vec::with_capacity(n_pixels * k);
    let mut values = Vec::with_capacity(n_pixels * k);
    let mut order: Vec<usize> = Vec::with_capacity(c);
    for pixel in dense.pixels() {
        let probs = match dense.value_mode() {
            ValueMode::RawScores => softmax(pixel),
            ValueMode::Probabilities => pixel.to_vec(),
        };
        order.clear();
        order.extend(0..c);
        let by_prob = |a: &usize, b: &usize| probs[*b].total_cmp(&probs[*a]).then(a.cmp(b));
        if k < c {
            order.select_nth_unstable_by(k - 1, by_prob);
        }
        order[..k].sort_unstable_by(by_prob);
        for &class in &order[..k] {
            indices.push(class as u16);
            values.push(quant.encode(probs[class] as f32));
        }
    }
    SparseLabelMap::from_parts(
        dense.height(),
        dense.width(),
        c,
        k,
        indices,
        values,
        quant,
        ValueMode::Probabilities,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(h: usize, w: usize, c: usize, v: Vec<f64>) -> DenseLabelMap {
        DenseLabelMap::new(h, w, c, v, ValueMode::RawScores).unwrap()
    }

    #[test]
    fn peaked_pixel_keeps_top_class() {
        let s = encode_sparse(&raw(1, 1, 3, vec![10.0, 0.0, 0.0]), 1, QuantFormat::F32).unwrap();
        let entries: Vec<_> = s.pixel_entries(0, 0).collect();
        // 1 / (1 + 2 e^-10), evaluated independently
        let expected = 1.0 / (1.0 + 2.0 * (-10f64).exp());
        assert_eq!(entries[0].0, 0);
        assert!((entries[0].1 - expected).abs() < 1e-7);
        assert!((entries[0].1 - 0.99990).abs() < 1e-5);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let s = encode_sparse(&raw(1, 1, 4, vec![1.0; 4]), 2, QuantFormat::F32).unwrap();
        let entries: Vec<_> = s.pixel_entries(0, 0).collect();
        assert_eq!(entries, vec![(0, 0.25), (1, 0.25)]);
    }

    #[test]
    fn lossless_case_reproduces_softmax_bitwise() {
        let vals: Vec<f64> = (0..2 * 3 * 5).map(|i| ((i * 37 % 11) as f64) * 0.7 - 3.0).collect();
        let dense = raw(2, 3, 5, vals);
        let s = encode_sparse(&dense, 5, QuantFormat::F32).unwrap();
        let back = s.densify();
        for r in 0..2 {
            for c in 0..3 {
                let sm = softmax(dense.pixel(r, c));
                for (k, p) in sm.iter().enumerate() {
                    assert_eq!(back.get(r, c, k), *p as f32 as f64);
                    assert!((back.get(r, c, k) - p).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn errors() {
        let d = raw(1, 1, 3, vec![0.0, 1.0, f64::NAN]);
        assert!(matches!(encode_sparse(&d, 1, QuantFormat::F32), Err(Error::NonFinite(2))));
        let d = raw(1, 1, 3, vec![0.0; 3]);
        assert!(matches!(encode_sparse(&d, 0, QuantFormat::F32), Err(Error::KOutOfRange { .. })));
        assert!(matches!(encode_sparse(&d, 4, QuantFormat::F32), Err(Error::KOutOfRange { .. })));
    }

    #[test]
    fn from_parts_rejects_broken_invariants() {
        let q = QuantFormat::F32;
        let v = |x: f32| q.encode(x);
        let mode = ValueMode::Probabilities;
        // duplicate index
        assert!(SparseLabelMap::from_parts(1, 1, 3, 2, vec![1, 1], vec![v(0.5), v(0.4)], q, mode).is_err());
        // unsorted values
        assert!(SparseLabelMap::from_parts(1, 1, 3, 2, vec![0, 1], vec![v(0.2), v(0.4)], q, mode).is_err());
        // index out of range
        assert!(SparseLabelMap::from_parts(1, 1, 3, 1, vec![3], vec![v(0.2)], q, mode).is_err());
        // sum above one
        assert!(SparseLabelMap::from_parts(1, 1, 3, 2, vec![0, 1], vec![v(0.7), v(0.6)], q, mode).is_err());
        assert!(SparseLabelMap::from_parts(1, 1, 3, 2, vec![0, 1], vec![v(0.6), v(0.4)], q, mode).is_ok());
    }

    #[test]
    fn single_pixel_window_scatter() {
        let q = QuantFormat::F32;
        let s = SparseLabelMap::from_parts(
            2,
            2,
            10,
            1,
            vec![1, 7, 2, 3],
            vec![q.encode(0.5), q.encode(0.9), q.encode(0.5), q.encode(0.5)],
            q,
            ValueMode::Probabilities,
        )
        .unwrap();
        let region = CropRegion::new(0.6, 0.1, 0.3, 0.3).unwrap();
        let d = densify_region(&s, &region).unwrap();
        assert_eq!((d.height(), d.width()), (1, 1));
        let mut expected = [0.0; 10];
        expected[7] = 0.9f32 as f64;
        assert_eq!(d.pixel(0, 0), &expected[..]);
    }

    #[test]
    fn enclosing_window() {
        let r = CropRegion::new(0.1, 0.5, 0.25, 0.5).unwrap();
        let w = PixelWindow::enclosing(&r, 10, 10).unwrap();
        assert_eq!(w, PixelWindow { rows: 5..10, cols: 1..4 });
        let r = CropRegion::new(1.0, 0.0, 1e-10, 0.5).unwrap();
        assert!(matches!(PixelWindow::enclosing(&r, 10, 10), Err(Error::EmptyIntersection)));
    }
}
