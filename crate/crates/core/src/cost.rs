//! Storage arithmetic for label-map layouts.

use crate::quant::QuantFormat;
use crate::store::{HEADER_LEN, MANIFEST_ENTRY_FIXED_LEN};
use crate::{Error, Result};

/// Width of a stored class index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexWidth {
    U16,
    U32,
}

impl IndexWidth {
    pub fn bytes(self) -> u64 {
        match self {
            IndexWidth::U16 => 2,
            IndexWidth::U32 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Every class score of every pixel.
    Dense { classes: u64 },
    /// Top-k `(index, value)` pairs per pixel, as written by the label store.
    Sparse { k: u64, index_width: IndexWidth },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StorageCost {
    pub payload_bytes: u64,
    /// Store header plus manifest; zero for the dense layout, which has no container.
    pub overhead_bytes: u64,
}

impl StorageCost {
    pub fn total_bytes(&self) -> u64 {
        self.payload_bytes + self.overhead_bytes
    }
}

/// Bytes needed to keep label maps for `num_images` images of `height x width`.
///
/// `id_len` is the average image-id length in bytes, used for the manifest.
pub fn storage_cost(
    num_images: u64,
    height: u64,
    width: u64,
    layout: Layout,
    quant: QuantFormat,
    id_len: u64,
) -> Result<StorageCost> {
    let overflow = || Error::Overflow("storage cost exceeds u64".into());
    if num_images == 0 || height == 0 || width == 0 {
        return Err(Error::InvalidParameter(
            "image count and map dimensions must be positive".into(),
        ));
    }
    let value_bytes = quant.bytes() as u64;
    let (per_pixel, overhead) = match layout {
        Layout::Dense { classes } => {
            if classes == 0 {
                return Err(Error::InvalidParameter("class count must be positive".into()));
            }
            (classes.checked_mul(value_bytes).ok_or_else(overflow)?, 0)
        }
        Layout::Sparse { k, index_width } => {
            if k == 0 {
                return Err(Error::InvalidParameter("k must be positive".into()));
            }
            let per_pixel = k
                .checked_mul(value_bytes + index_width.bytes())
                .ok_or_else(overflow)?;
            let per_record = MANIFEST_ENTRY_FIXED_LEN
                .checked_add(id_len)
                .ok_or_else(overflow)?;
            let overhead = num_images
                .checked_mul(per_record)
                .and_then(|m| m.checked_add(HEADER_LEN))
                .ok_or_else(overflow)?;
            (per_pixel, overhead)
        }
    };
    let payload = num_images
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .and_then(|v| v.checked_mul(per_pixel))
        .ok_or_else(overflow)?;
    payload.checked_add(overhead).ok_or_else(overflow)?;
    Ok(StorageCost {
        payload_bytes: payload,
        overhead_bytes: overhead,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_imagenet_figure() {
        let c = storage_cost(1_280_000, 15, 15, Layout::Dense { classes: 1000 }, QuantFormat::F32, 0).unwrap();
        assert_eq!(c.payload_bytes, 1_152_000_000_000);
        assert_eq!(c.overhead_bytes, 0);
        // more than 1 TiB
        assert!(c.payload_bytes as f64 / 2f64.powi(40) > 1.04);
    }

    #[test]
    fn sparse_top5() {
        let sparse = |w| Layout::Sparse { k: 5, index_width: w };
        let c = storage_cost(1_280_000, 15, 15, sparse(IndexWidth::U16), QuantFormat::F32, 0).unwrap();
        assert_eq!(c.payload_bytes, 8_640_000_000);
        assert_eq!(c.overhead_bytes, HEADER_LEN + 1_280_000 * MANIFEST_ENTRY_FIXED_LEN);
        let c = storage_cost(1_280_000, 15, 15, sparse(IndexWidth::U32), QuantFormat::F32, 0).unwrap();
        assert_eq!(c.payload_bytes, 11_520_000_000);
    }

    #[test]
    fn unit_case_and_errors() {
        let c = storage_cost(1, 1, 1, Layout::Dense { classes: 1 }, QuantFormat::F32, 0).unwrap();
        assert_eq!(c.payload_bytes, 4);
        assert!(storage_cost(0, 1, 1, Layout::Dense { classes: 1 }, QuantFormat::F32, 0).is_err());
        assert!(matches!(
            storage_cost(u64::MAX, 2, 2, Layout::Dense { classes: 2 }, QuantFormat::F32, 0),
            Err(Error::Overflow(_))
        ));
    }
}
