//! Random-resized-crop sampling.
//!
//! Each attempt consumes four uniform `f64` draws from the stream, in order:
//! area fraction, log-aspect, x placement, y placement. The first two are
//! always drawn; placement draws happen only when the candidate fits. After
//! `max_attempts` rejections the sampler returns the largest centered crop
//! whose aspect ratio is clamped to `aspect_range`.

use std::str::FromStr;

use rand::Rng;

use super::geometry::CropRegion;
use super::rng::{seeded_stream, SeededRng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropParams {
    /// Fraction of the image area, `[lo, hi] ⊆ (0, 1]`.
    pub area_range: (f64, f64),
    /// Width / height in pixels, `[lo, hi]`.
    pub aspect_range: (f64, f64),
    pub max_attempts: u32,
}

impl Default for CropParams {
    fn default() -> Self {
        CropParams {
            area_range: (0.08, 1.0),
            aspect_range: (3.0 / 4.0, 4.0 / 3.0),
            max_attempts: 10,
        }
    }
}

impl CropParams {
    pub fn new(area_range: (f64, f64), aspect_range: (f64, f64), max_attempts: u32) -> Result<Self> {
        let p = CropParams {
            area_range,
            aspect_range,
            max_attempts,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (alo, ahi) = self.area_range;
        if !(alo > 0.0 && alo <= ahi && ahi <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "area range [{alo}, {ahi}] must satisfy 0 < lo <= hi <= 1"
            )));
        }
        let (rlo, rhi) = self.aspect_range;
        if !(rlo > 0.0 && rlo <= rhi && rhi.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "aspect range [{rlo}, {rhi}] must satisfy 0 < lo <= hi"
            )));
        }
        Ok(())
    }
}

impl FromStr for CropParams {
    type Err = Error;

    /// Parses `area=LO:HI,aspect=LO:HI[,attempts=N]`; omitted keys keep defaults.
    fn from_str(s: &str) -> Result<Self> {
        let mut params = CropParams::default();
        let bad = |msg: String| Error::InvalidParameter(format!("crop params `{s}`: {msg}"));
        let range = |v: &str| -> Result<(f64, f64)> {
            let (lo, hi) = v
                .split_once(':')
                .ok_or_else(|| bad(format!("`{v}` is not LO:HI")))?;
            let parse = |t: &str| t.trim().parse::<f64>().map_err(|e| bad(format!("`{t}`: {e}")));
            Ok((parse(lo)?, parse(hi)?))
        };
        for item in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| bad(format!("`{item}` is not key=value")))?;
            match key.trim() {
                "area" => params.area_range = range(value)?,
                "aspect" => params.aspect_range = range(value)?,
                "attempts" => {
                    params.max_attempts = value
                        .trim()
                        .parse()
                        .map_err(|e| bad(format!("attempts: {e}")))?
                }
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }
        params.validate()?;
        Ok(params)
    }
}

/// Pixel dimensions of the source image; only the ratio matters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageSize {
    pub width: f64,
    pub height: f64,
}

impl ImageSize {
    pub fn new(width: f64, height: f64) -> Result<Self> {
        if !(width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "image size must be positive, got {width}x{height}"
            )));
        }
        Ok(ImageSize { width, height })
    }

    pub fn square() -> Self {
        ImageSize {
            width: 1.0,
            height: 1.0,
        }
    }
}

impl Default for ImageSize {
    fn default() -> Self {
        Self::square()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropSample {
    pub region: CropRegion,
    /// True when every attempt was rejected and the centered crop was used.
    pub fallback: bool,
}

pub fn sample_crop<R: Rng + ?Sized>(rng: &mut R, params: &CropParams, image: ImageSize) -> CropRegion {
    sample_crop_detailed(rng, params, image).region
}

pub fn sample_crop_detailed<R: Rng + ?Sized>(
    rng: &mut R,
    params: &CropParams,
    image: ImageSize,
) -> CropSample {
    let ImageSize { width, height } = image;
    let area = width * height;
    let (alo, ahi) = params.area_range;
    let (log_rlo, log_rhi) = (params.aspect_range.0.ln(), params.aspect_range.1.ln());

    for _ in 0..params.max_attempts {
        let target_area = area * (alo + (ahi - alo) * rng.random::<f64>());
        let aspect = (log_rlo + (log_rhi - log_rlo) * rng.random::<f64>()).exp();
        let w = (target_area * aspect).sqrt();
        let h = (target_area / aspect).sqrt();
        if w <= width && h <= height {
            let x = (width - w) * rng.random::<f64>();
            let y = (height - h) * rng.random::<f64>();
            return CropSample {
                region: normalized(x, y, w, h, image),
                fallback: false,
            };
        }
    }

    let in_ratio = width / height;
    let (w, h) = if in_ratio < params.aspect_range.0 {
        (width, width / params.aspect_range.0)
    } else if in_ratio > params.aspect_range.1 {
        (height * params.aspect_range.1, height)
    } else {
        (width, height)
    };
    CropSample {
        region: normalized((width - w) / 2.0, (height - h) / 2.0, w, h, image),
        fallback: true,
    }
}

fn normalized(x: f64, y: f64, w: f64, h: f64, image: ImageSize) -> CropRegion {
    let nw = (w / image.width).min(1.0);
    let nh = (h / image.height).min(1.0);
    let nx = (x / image.width).clamp(0.0, 1.0 - nw);
    let ny = (y / image.height).clamp(0.0, 1.0 - nh);
    CropRegion {
        x: nx,
        y: ny,
        w: nw,
        h: nh,
    }
}

/// A crop sampler that owns its random stream.
#[derive(Debug, Clone)]
pub struct CropSampler {
    rng: SeededRng,
    params: CropParams,
    image: ImageSize,
}

impl CropSampler {
    pub fn new(seed: u64, params: CropParams, image: ImageSize) -> Result<Self> {
        Self::with_stream(seed, 0, params, image)
    }

    /// Sampler on an independent sub-stream of `seed`.
    pub fn with_stream(seed: u64, stream_id: u64, params: CropParams, image: ImageSize) -> Result<Self> {
        params.validate()?;
        Ok(CropSampler {
            rng: seeded_stream(seed, stream_id),
            params,
            image,
        })
    }

    pub fn params(&self) -> &CropParams {
        &self.params
    }

    pub fn sample(&mut self) -> CropSample {
        sample_crop_detailed(&mut self.rng, &self.params, self.image)
    }
}

impl Iterator for CropSampler {
    type Item = CropRegion;

    fn next(&mut self) -> Option<CropRegion> {
        Some(self.sample().region)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forced_geometry_gives_full_image() {
        let params = CropParams::new((1.0, 1.0), (1.0, 1.0), 10).unwrap();
        let mut s = CropSampler::new(3, params, ImageSize::square()).unwrap();
        for _ in 0..10 {
            let c = s.sample();
            assert!(!c.fallback);
            assert_eq!(c.region, CropRegion::full());
        }
    }

    #[test]
    fn fallback_is_centered_and_clamped() {
        // Wide image, aspect capped at 1: fallback is the centered square.
        let params = CropParams::new((1.0, 1.0), (1.0, 1.0), 3).unwrap();
        let image = ImageSize::new(200.0, 100.0).unwrap();
        let mut s = CropSampler::new(1, params, image).unwrap();
        let c = s.sample();
        assert!(c.fallback);
        assert!((c.region.x - 0.25).abs() < 1e-12);
        assert!((c.region.w - 0.5).abs() < 1e-12);
        assert_eq!((c.region.y, c.region.h), (0.0, 1.0));
    }

    #[test]
    fn zero_attempts_always_falls_back() {
        let params = CropParams::new((0.08, 1.0), (0.75, 4.0 / 3.0), 0).unwrap();
        let mut s = CropSampler::new(1, params, ImageSize::square()).unwrap();
        let c = s.sample();
        assert!(c.fallback);
        assert_eq!(c.region, CropRegion::full());
    }

    #[test]
    fn aspect_measured_on_pixel_grid() {
        let params = CropParams::new((0.1, 0.3), (2.0, 2.0), 10).unwrap();
        let image = ImageSize::new(300.0, 100.0).unwrap();
        let mut s = CropSampler::new(9, params, image).unwrap();
        for _ in 0..200 {
            let c = s.sample();
            assert!(!c.fallback);
            let pixel_aspect = (c.region.w * 300.0) / (c.region.h * 100.0);
            assert!((pixel_aspect - 2.0).abs() < 1e-9);
            c.region.validate().unwrap();
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        let p = CropParams::default();
        let a: Vec<_> = CropSampler::new(42, p, ImageSize::square()).unwrap().take(50).collect();
        let b: Vec<_> = CropSampler::new(42, p, ImageSize::square()).unwrap().take(50).collect();
        let c: Vec<_> = CropSampler::new(43, p, ImageSize::square()).unwrap().take(50).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn params_parse() {
        let p: CropParams = "area=0.08:1.0,aspect=0.75:1.333".parse().unwrap();
        assert_eq!(p.area_range, (0.08, 1.0));
        assert_eq!(p.aspect_range, (0.75, 1.333));
        assert_eq!(p.max_attempts, 10);
        let p: CropParams = "attempts=3".parse().unwrap();
        assert_eq!(p.max_attempts, 3);
        assert!("area=0.5:0.1".parse::<CropParams>().is_err());
        assert!("area=0:1".parse::<CropParams>().is_err());
        assert!("size=1:2".parse::<CropParams>().is_err());
        assert!("area=0.5".parse::<CropParams>().is_err());
    }
}
