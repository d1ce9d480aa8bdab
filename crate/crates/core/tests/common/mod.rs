#![allow(dead_code)]

use rand::{Rng, RngCore, SeedableRng};
use rand::rngs::StdRng;

use relabel::augment::{BBox, CropParams, CropRegion};
use relabel::{DenseLabelMap, ValueMode};

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

pub fn raw_map(rng: &mut impl Rng, h: usize, w: usize, c: usize, scale: f64) -> DenseLabelMap {
    DenseLabelMap::from_fn(h, w, c, ValueMode::RawScores, |_, _, _| rng.random_range(-scale..scale)).unwrap()
}

/// Raw scores whose per-pixel softmax puts at least 0.9 on one class.
pub fn peaked_map(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> DenseLabelMap {
    let lift = 1.5 + (9.0 * (c - 1) as f64).ln();
    let mut values = Vec::with_capacity(h * w * c);
    for _ in 0..h * w {
        let top = rng.random_range(0..c);
        for k in 0..c {
            let v = rng.random_range(-1.0..1.0);
            values.push(if k == top { v + lift } else { v });
        }
    }
    DenseLabelMap::new(h, w, c, values, ValueMode::RawScores).unwrap()
}

pub fn region(rng: &mut impl Rng) -> CropRegion {
    let w = rng.random_range(0.02..=1.0);
    let h = rng.random_range(0.02..=1.0);
    let x = rng.random_range(0.0..=1.0 - w);
    let y = rng.random_range(0.0..=1.0 - h);
    CropRegion::new(x, y, w, h).unwrap()
}

pub fn bbox(rng: &mut impl Rng) -> BBox {
    region(rng).to_bbox()
}

/// Bilinear value of channel `k` at continuous pixel coordinates, with pixel
/// centers at `i + 0.5` and clamping at the border.
pub fn bilinear(map: &DenseLabelMap, px: f64, py: f64, k: usize) -> f64 {
    let axis = |p: f64, n: usize| {
        let u = (p - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = u.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, u - i0 as f64)
    };
    let (c0, c1, tx) = axis(px, map.width());
    let (r0, r1, ty) = axis(py, map.height());
    let top = map.get(r0, c0, k) * (1.0 - tx) + map.get(r0, c1, k) * tx;
    let bottom = map.get(r1, c0, k) * (1.0 - tx) + map.get(r1, c1, k) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Midpoint-rule average of the bilinear surface over `region` on an
/// `n x n` grid.
pub fn grid_integral(map: &DenseLabelMap, region: &CropRegion, n: usize) -> Vec<f64> {
    let (w, h) = (map.width() as f64, map.height() as f64);
    let mut acc = vec![0.0; map.num_classes()];
    for j in 0..n {
        let py = (region.y + region.h * (j as f64 + 0.5) / n as f64) * h;
        for i in 0..n {
            let px = (region.x + region.w * (i as f64 + 0.5) / n as f64) * w;
            for (k, a) in acc.iter_mut().enumerate() {
                *a += bilinear(map, px, py, k);
            }
        }
    }
    acc.iter().map(|a| a / (n * n) as f64).collect()
}

/// Straightforward random-resized-crop on a square image, independent of the
/// library sampler. Returns `None` on fallback.
pub fn reference_crop(rng: &mut impl RngCore, params: &CropParams) -> Option<(f64, f64, f64, f64)> {
    let (a0, a1) = params.area_range;
    let (r0, r1) = params.aspect_range;
    for _ in 0..params.max_attempts {
        let area = a0 + (a1 - a0) * rand::Rng::random::<f64>(rng);
        let ratio = (r0.ln() + (r1.ln() - r0.ln()) * rand::Rng::random::<f64>(rng)).exp();
        let w = (area * ratio).sqrt();
        let h = (area / ratio).sqrt();
        if w <= 1.0 && h <= 1.0 {
            let x = (1.0 - w) * rand::Rng::random::<f64>(rng);
            let y = (1.0 - h) * rand::Rng::random::<f64>(rng);
            return Some((x, y, w, h));
        }
    }
    None
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn softmax_ref(scores: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}
