use crate::{Error, Result};

/// Slack allowed on the `x + w <= 1` containment check.
pub const CONTAINMENT_TOL: f64 = 1e-9;

/// A crop rectangle in normalized coordinates: top-left `(x, y)`, extent `(w, h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropRegion {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl CropRegion {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let region = CropRegion { x, y, w, h };
        region.validate()?;
        Ok(region)
    }

    /// The whole image.
    pub fn full() -> Self {
        CropRegion {
            x: 0.0,
            y: 0.0,
            w: 1.0,
            h: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let CropRegion { x, y, w, h } = *self;
        if ![x, y, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::DegenerateRegion(format!("non-finite region {self:?}")));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::DegenerateRegion(format!(
                "extent must be positive, got w={w}, h={h}"
            )));
        }
        if x < 0.0 || y < 0.0 || x + w > 1.0 + CONTAINMENT_TOL || y + h > 1.0 + CONTAINMENT_TOL {
            return Err(Error::DegenerateRegion(format!(
                "region {self:?} is not contained in the unit square"
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn x1(&self) -> f64 {
        self.x + self.w
    }

    pub fn y1(&self) -> f64 {
        self.y + self.h
    }

    pub fn to_bbox(&self) -> BBox {
        BBox {
            x0: self.x,
            y0: self.y,
            x1: self.x1().min(1.0),
            y1: self.y1().min(1.0),
        }
    }
}

impl std::str::FromStr for CropRegion {
    type Err = Error;

    /// Parses `x,y,w,h`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidParameter(format!("region `{s}`: {e}")))?;
        match parts[..] {
            [x, y, w, h] => CropRegion::new(x, y, w, h),
            _ => Err(Error::InvalidParameter(format!(
                "region `{s}` must have four comma-separated values x,y,w,h"
            ))),
        }
    }
}

/// Axis-aligned box in normalized coordinates, `x0 < x1`, `y0 < y1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = BBox { x0, y0, x1, y1 };
        let inside = |v: f64| (0.0..=1.0).contains(&v);
        if !(x0 < x1 && y0 < y1) || ![x0, y0, x1, y1].into_iter().all(inside) {
            return Err(Error::InvalidParameter(format!("invalid box {b:?}")));
        }
        Ok(b)
    }

    pub fn full() -> Self {
        BBox {
            x0: 0.0,
            y0: 0.0,
            x1: 1.0,
            y1: 1.0,
        }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x1.min(other.x1) - self.x0.max(other.x0);
        let h = self.y1.min(other.y1) - self.y0.max(other.y0);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn to_region(&self) -> CropRegion {
        CropRegion {
            x: self.x0,
            y: self.y0,
            w: self.width(),
            h: self.height(),
        }
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}
