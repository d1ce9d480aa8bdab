//! Dense label maps and the softmax helpers shared by the rest of the crate.

use crate::{Error, Result};

/// Tolerance on the per-pixel sum of a `Probabilities` map.
pub const PROBABILITY_SUM_TOL: f64 = 1e-5;

/// What the stored values of a label map mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ValueMode {
    /// Raw class scores (logits) as produced by the classifier head.
    RawScores,
    /// Per-pixel class probabilities.
    Probabilities,
}

impl ValueMode {
    pub fn code(self) -> u8 {
        match self {
            ValueMode::RawScores => 0,
            ValueMode::Probabilities => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ValueMode::RawScores),
            1 => Some(ValueMode::Probabilities),
            _ => None,
        }
    }
}

/// An `H x W x C` map of class scores, stored row-major as `(row, col, class)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLabelMap {
    height: usize,
    width: usize,
    num_classes: usize,
    values: Vec<f64>,
    value_mode: ValueMode,
}

impl DenseLabelMap {
    pub fn new(
        height: usize,
        width: usize,
        num_classes: usize,
        values: Vec<f64>,
        value_mode: ValueMode,
    ) -> Result<Self> {
        if height == 0 || width == 0 || num_classes == 0 {
            return Err(Error::InvalidShape(format!(
                "label map dimensions must be positive, got {height}x{width}x{num_classes}"
            )));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(num_classes))
            .ok_or_else(|| Error::Overflow("label map element count".into()))?;
        if values.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: values.len(),
            });
        }
        let map = DenseLabelMap {
            height,
            width,
            num_classes,
            values,
            value_mode,
        };
        if value_mode == ValueMode::Probabilities {
            for (p, pixel) in map.values.chunks_exact(num_classes).enumerate() {
                if let Some(i) = pixel.iter().position(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::InvalidParameter(format!(
                        "probability out of [0,1] at pixel {p}, class {i}"
                    )));
                }
                let sum: f64 = pixel.iter().sum();
                if (sum - 1.0).abs() > PROBABILITY_SUM_TOL {
                    return Err(Error::InvalidParameter(format!(
                        "pixel {p} probabilities sum to {sum}"
                    )));
                }
            }
        }
        Ok(map)
    }

    /// Unchecked constructor for values produced inside the crate.
    pub(crate) fn from_raw_parts(
        height: usize,
        width: usize,
        num_classes: usize,
        values: Vec<f64>,
        value_mode: ValueMode,
    ) -> Self {
        debug_assert_eq!(values.len(), height * width * num_classes);
        DenseLabelMap {
            height,
            width,
            num_classes,
            values,
            value_mode,
        }
    }

    /// Map filled with a single value.
    pub fn filled(
        height: usize,
        width: usize,
        num_classes: usize,
        value: f64,
        value_mode: ValueMode,
    ) -> Result<Self> {
        Self::new(
            height,
            width,
            num_classes,
            vec![value; height * width * num_classes],
            value_mode,
        )
    }

    /// Builds a map by evaluating `f(row, col, class)` at every entry.
    pub fn from_fn(
        height: usize,
        width: usize,
        num_classes: usize,
        value_mode: ValueMode,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width * num_classes);
        for r in 0..height {
            for c in 0..width {
                for k in 0..num_classes {
                    values.push(f(r, c, k));
                }
            }
        }
        Self::new(height, width, num_classes, values, value_mode)
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

    pub fn value_mode(&self) -> ValueMode {
        self.value_mode
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize, class: usize) -> f64 {
        self.values[(row * self.width + col) * self.num_classes + class]
    }

    /// The C-vector at one pixel.
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.num_classes;
        &self.values[start..start + self.num_classes]
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.num_classes)
    }

    /// Index of the first non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.values.iter().position(|v| !v.is_finite())
    }

    /// Per-class arithmetic mean over all pixels (global average pooling).
    pub fn spatial_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.num_classes];
        for pixel in self.pixels() {
            for (m, v) in mean.iter_mut().zip(pixel) {
                *m += v;
            }
        }
        let n = (self.height * self.width) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// Returns a copy with every value shifted by `delta`.
    pub fn shifted(&self, delta: f64) -> Self {
        DenseLabelMap {
            values: self.values.iter().map(|v| v + delta).collect(),
            ..self.clone()
        }
    }
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// `log(sum(exp(scores)))` with max subtraction.
pub fn log_sum_exp(scores: &[f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
