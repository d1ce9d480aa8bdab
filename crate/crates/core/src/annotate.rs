//! Label-map generation from a classifier's spatial features.
//!
//! Dropping global average pooling and applying the classification head at
//! every spatial position (a 1x1 convolution) turns an `H x W x d` feature
//! map into an `H x W x C` label map. Because the head is linear, the spatial
//! mean of that label map equals the head applied to the pooled features.
//!
//! Inputs are exchanged as `.rlft` files, all values little-endian:
//!
//! ```text
//! "RLFT" | u16 version=1 | u8 kind | u8 flags
//! kind 0 (feature maps) / 2 (dense label maps):
//!     u16 H | u16 W | u32 channels | u64 count
//!     count x ( u16 id_len | id bytes | H*W*channels f32, row-major (row, col, channel) )
//! kind 1 (classifier head):
//!     u32 d | u32 C | d*C f32 weights, row-major (feature, class)
//!     | C f32 bias if flags & 1
//! ```

use std::fs;
use std::path::Path;

use crate::label_map::{softmax, DenseLabelMap, ValueMode};
use crate::pooling::PooledTarget;
use crate::{Error, Result};

pub const RLFT_MAGIC: [u8; 4] = *b"RLFT";
pub const RLFT_VERSION: u16 = 1;

/// An `H x W x d` feature map, row-major `(row, col, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidShape(format!(
                "feature map dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::LengthMismatch {
                expected: height * width * channels,
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(FeatureMap {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let s = (row * self.width + col) * self.channels;
        &self.values[s..s + self.channels]
    }

    /// Global average pooling over the spatial positions.
    pub fn spatial_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.channels];
        for px in self.values.chunks_exact(self.channels) {
            mean.iter_mut().zip(px).for_each(|(m, v)| *m += v);
        }
        let n = (self.height * self.width) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

/// A fully-connected classification head: `d x C` weights plus a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    in_features: usize,
    num_classes: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ClassifierHead {
    /// `weights` is row-major `(feature, class)`; a missing bias means zeros.
    pub fn new(in_features: usize, num_classes: usize, weights: Vec<f64>, bias: Option<Vec<f64>>) -> Result<Self> {
        if in_features == 0 || num_classes == 0 {
            return Err(Error::InvalidShape(format!(
                "head dimensions must be positive, got {in_features}x{num_classes}"
            )));
        }
        if weights.len() != in_features * num_classes {
            return Err(Error::LengthMismatch {
                expected: in_features * num_classes,
                actual: weights.len(),
            });
        }
        let bias = bias.unwrap_or_else(|| vec![0.0; num_classes]);
        if bias.len() != num_classes {
            return Err(Error::LengthMismatch {
                expected: num_classes,
                actual: bias.len(),
            });
        }
        if let Some(i) = weights.iter().chain(&bias).position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(ClassifierHead {
            in_features,
            num_classes,
            weights,
            bias,
        })
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// `x . W + b` for one feature vector.
    pub fn apply(&self, features: &[f64]) -> Vec<f64> {
        debug_assert_eq!(features.len(), self.in_features);
        let mut out = self.bias.clone();
        for (x, row) in features.iter().zip(self.weights.chunks_exact(self.num_classes)) {
            if *x == 0.0 {
                continue;
            }
            out.iter_mut().zip(row).for_each(|(o, w)| *o += x * w);
        }
        out
    }
}

/// Applies `head` at every spatial position of `features`.
pub fn fc_to_pointwise_conv(features: &FeatureMap, head: &ClassifierHead) -> Result<DenseLabelMap> {
    if features.channels != head.in_features {
        return Err(Error::DimensionMismatch(format!(
            "features have {} channels, head expects {}",
            features.channels, head.in_features
        )));
    }
    let values: Vec<f64> = features
        .values
        .chunks_exact(features.channels)
        .flat_map(|px| head.apply(px))
        .collect();
    DenseLabelMap::new(
        features.height,
        features.width,
        head.num_classes,
        values,
        ValueMode::RawScores,
    )
}

/// Image-level label: softmax of the spatially averaged scores.
pub fn global_label(map: &DenseLabelMap) -> Result<PooledTarget> {
    if map.value_mode() != ValueMode::RawScores {
        return Err(Error::WrongValueMode(
            "global_label expects raw scores; use pooling::label_variant for probability maps".into(),
        ));
    }
    PooledTarget::new(softmax(&map.spatial_mean()))
}

/// Payload kind of an `.rlft` file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RlftKind {
    FeatureMaps,
    Head,
    LabelMaps,
}

impl RlftKind {
    fn code(self) -> u8 {
        match self {
            RlftKind::FeatureMaps => 0,
            RlftKind::Head => 1,
            RlftKind::LabelMaps => 2,
        }
    }
}

/// Writes named `H x W x channels` arrays as an `.rlft` file of kind 0 or 2.
fn encode_maps<'a>(
    kind: RlftKind,
    dims: (usize, usize, usize),
    entries: impl Iterator<Item = (&'a str, &'a [f64])>,
) -> Result<Vec<u8>> {
    let (h, w, c) = dims;
    if h > u16::MAX as usize || w > u16::MAX as usize || c > u32::MAX as usize {
        return Err(Error::InvalidShape(format!("{h}x{w}x{c} does not fit the header")));
    }
    let mut body = Vec::new();
    let mut count = 0u64;
    for (id, values) in entries {
        if id.len() > u16::MAX as usize {
            return Err(Error::InvalidParameter(format!("id too long ({} bytes)", id.len())));
        }
        if values.len() != h * w * c {
            return Err(Error::HeterogeneousShapes(format!(
                "`{id}` has {} values, expected {}",
                values.len(),
                h * w * c
            )));
        }
        body.extend_from_slice(&(id.len() as u16).to_le_bytes());
        body.extend_from_slice(id.as_bytes());
        for v in values {
            body.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        count += 1;
    }
    let mut out = rlft_preamble(kind, 0);
    out.extend_from_slice(&(h as u16).to_le_bytes());
    out.extend_from_slice(&(w as u16).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

fn rlft_preamble(kind: RlftKind, flags: u8) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&RLFT_MAGIC);
    out.extend_from_slice(&RLFT_VERSION.to_le_bytes());
    out.push(kind.code());
    out.push(flags);
    out
}

struct MapsFile {
    dims: (usize, usize, usize),
    entries: Vec<(String, Vec<f64>)>,
}

fn decode_maps(bytes: &[u8], kind: RlftKind) -> Result<MapsFile> {
    let mut r = Cursor::new(bytes);
    r.preamble(kind)?;
    let h = r.u16()? as usize;
    let w = r.u16()? as usize;
    let c = r.u32()? as usize;
    let count = r.u64()?;
    let n = h * w * c;
    let mut entries = Vec::new();
    for i in 0..count {
        let id_len = r.u16()? as usize;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|e| Error::Format(format!("entry {i}: id is not UTF-8: {e}")))?
            .to_string();
        let values = r.f32s(n)?;
        entries.push((id, values));
    }
    if !r.at_end() {
        return Err(Error::Format("trailing bytes after last entry".into()));
    }
    Ok(MapsFile {
        dims: (h, w, c),
        entries,
    })
}

pub fn write_feature_maps(path: impl AsRef<Path>, maps: &[(String, FeatureMap)]) -> Result<()> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidParameter("no feature maps to write".into()))?;
    let dims = (first.1.height, first.1.width, first.1.channels);
    if let Some((id, _)) = maps
        .iter()
        .find(|(_, m)| (m.height, m.width, m.channels) != dims)
    {
        return Err(Error::HeterogeneousShapes(format!("`{id}` differs from the first map")));
    }
    let bytes = encode_maps(
        RlftKind::FeatureMaps,
        dims,
        maps.iter().map(|(id, m)| (id.as_str(), m.values.as_slice())),
    )?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_feature_maps(path: impl AsRef<Path>) -> Result<Vec<(String, FeatureMap)>> {
    let bytes = read_file(path.as_ref())?;
    let file = decode_maps(&bytes, RlftKind::FeatureMaps)?;
    let (h, w, c) = file.dims;
    file.entries
        .into_iter()
        .map(|(id, v)| {
            let m = FeatureMap::new(h, w, c, v).map_err(|e| Error::Format(format!("`{id}`: {e}")))?;
            Ok((id, m))
        })
        .collect()
}

/// Dense raw-score label maps, for stores built outside the annotate step.
pub fn write_label_maps(path: impl AsRef<Path>, maps: &[(String, DenseLabelMap)]) -> Result<()> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidParameter("no label maps to write".into()))?;
    let dims = (first.1.height(), first.1.width(), first.1.num_classes());
    if let Some((id, _)) = maps
        .iter()
        .find(|(_, m)| (m.height(), m.width(), m.num_classes()) != dims)
    {
        return Err(Error::HeterogeneousShapes(format!("`{id}` differs from the first map")));
    }
    let bytes = encode_maps(
        RlftKind::LabelMaps,
        dims,
        maps.iter().map(|(id, m)| (id.as_str(), m.values())),
    )?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_label_maps(path: impl AsRef<Path>) -> Result<Vec<(String, DenseLabelMap)>> {
    let bytes = read_file(path.as_ref())?;
    let file = decode_maps(&bytes, RlftKind::LabelMaps)?;
    let (h, w, c) = file.dims;
    file.entries
        .into_iter()
        .map(|(id, v)| {
            let m = DenseLabelMap::new(h, w, c, v, ValueMode::RawScores)
                .map_err(|e| Error::Format(format!("`{id}`: {e}")))?;
            Ok((id, m))
        })
        .collect()
}

pub fn write_head(path: impl AsRef<Path>, head: &ClassifierHead) -> Result<()> {
    let mut out = rlft_preamble(RlftKind::Head, 1);
    out.extend_from_slice(&(head.in_features as u32).to_le_bytes());
    out.extend_from_slice(&(head.num_classes as u32).to_le_bytes());
    for v in head.weights.iter().chain(&head.bias) {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_head(path: impl AsRef<Path>) -> Result<ClassifierHead> {
    let bytes = read_file(path.as_ref())?;
    let mut r = Cursor::new(&bytes);
    let flags = r.preamble(RlftKind::Head)?;
    let d = r.u32()? as usize;
    let c = r.u32()? as usize;
    let weights = r.f32s(d * c)?;
    let bias = if flags & 1 != 0 { Some(r.f32s(c)?) } else { None };
    if !r.at_end() {
        return Err(Error::Format("trailing bytes after head".into()));
    }
    ClassifierHead::new(d, c, weights, bias).map_err(|e| Error::Format(format!("head: {e}")))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    /// Checks magic, version and kind; returns the flags byte.
    fn preamble(&mut self, kind: RlftKind) -> Result<u8> {
        if self.take(4)? != RLFT_MAGIC {
            return Err(Error::Format("bad magic, expected \"RLFT\"".into()));
        }
        let version = self.u16()?;
        if version != RLFT_VERSION {
            return Err(Error::Format(format!("unsupported RLFT version {version}")));
        }
        let k = self.take(1)?[0];
        if k != kind.code() {
            return Err(Error::Format(format!("file holds kind {k}, expected {}", kind.code())));
        }
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect())
    }
}
