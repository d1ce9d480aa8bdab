//! CutMix box sampling.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use super::geometry::BBox;
use crate::{Error, Result};

/// A pasted box and the area-corrected mixing weight of the *base* image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutMix {
    /// `None` when the clipped box has no area.
    pub cut: Option<BBox>,
    /// `1 - area(cut)`.
    pub lambda: f64,
}

/// Draws `λ ~ Beta(alpha, alpha)`, then the box center uniformly in the image.
pub fn cutmix_box<R: Rng + ?Sized>(rng: &mut R, alpha: f64) -> Result<CutMix> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidParameter(format!("CutMix alpha must be > 0, got {alpha}")));
    }
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::InvalidParameter(format!("CutMix alpha {alpha}: {e}")))?;
    let lambda = beta.sample(rng);
    let cx = rng.random::<f64>();
    let cy = rng.random::<f64>();
    Ok(cutmix_from_draw(lambda, cx, cy))
}

/// Deterministic part of [`cutmix_box`]: a square of side `sqrt(1 - λ)`
/// centered at `(cx, cy)`, clipped to the unit square.
pub fn cutmix_from_draw(lambda: f64, cx: f64, cy: f64) -> CutMix {
    let side = (1.0 - lambda).max(0.0).sqrt();
    let x0 = (cx - side / 2.0).clamp(0.0, 1.0);
    let x1 = (cx + side / 2.0).clamp(0.0, 1.0);
    let y0 = (cy - side / 2.0).clamp(0.0, 1.0);
    let y1 = (cy + side / 2.0).clamp(0.0, 1.0);
    if x1 <= x0 || y1 <= y0 {
        return CutMix {
            cut: None,
            lambda: 1.0,
        };
    }
    let cut = BBox { x0, y0, x1, y1 };
    CutMix {
        lambda: 1.0 - cut.area(),
        cut: Some(cut),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::rng::seeded_stream;

    #[test]
    fn boundary_draws() {
        let m = cutmix_from_draw(1.0, 0.3, 0.7);
        assert_eq!(m.cut, None);
        assert_eq!(m.lambda, 1.0);

        let m = cutmix_from_draw(0.0, 0.5, 0.5);
        assert_eq!(m.cut, Some(BBox::full()));
        assert_eq!(m.lambda, 0.0);

        // Off-center full-size cut is clipped; lambda accounts for the clip.
        let m = cutmix_from_draw(0.0, 0.0, 0.0);
        assert_eq!(m.cut.unwrap().area(), 0.25);
        assert_eq!(m.lambda, 0.75);
    }

    #[test]
    fn lambda_matches_box_area() {
        let mut rng = seeded_stream(5, 0);
        for _ in 0..1000 {
            let m = cutmix_box(&mut rng, 1.0).unwrap();
            let area = m.cut.map_or(0.0, |b| b.area());
            assert!((m.lambda - (1.0 - area)).abs() < 1e-15);
            assert!((0.0..=1.0).contains(&m.lambda));
        }
    }

    #[test]
    fn rejects_bad_alpha() {
        let mut rng = seeded_stream(5, 0);
        assert!(cutmix_box(&mut rng, 0.0).is_err());
        assert!(cutmix_box(&mut rng, -1.0).is_err());
        assert!(cutmix_box(&mut rng, f64::NAN).is_err());
    }
}
