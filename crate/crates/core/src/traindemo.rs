//! Small synthetic training experiments.
//!
//! Scenes are grids of class ids with rectangular objects painted over a
//! background (class 0). Their one-hot label maps stand in for a machine
//! annotator, and a linear softmax model over crop class histograms stands in
//! for the classifier.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;

use crate::augment::{sample_crop, seeded_stream, BBox, CropParams, CropRegion, ImageSize};
use crate::label_map::{argmax, log_sum_exp, softmax, DenseLabelMap, ValueMode};
use crate::pooling::{label_variant, pool_label, LabelVariant, PooledTarget};
use crate::{Error, Result};

/// Shape of a generated dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneConfig {
    pub n_scenes: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub objects_per_scene: usize,
    /// Range of object side lengths as fractions of the grid side.
    pub object_size: (f64, f64),
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_scenes: 60,
            height: 16,
            width: 16,
            num_classes: 6,
            objects_per_scene: 3,
            object_size: (0.3, 0.6),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidParameter("scenes need at least 2 classes".into()));
        }
        if self.n_scenes == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidShape("scene count and grid size must be positive".into()));
        }
        if self.objects_per_scene >= self.num_classes {
            return Err(Error::InvalidParameter(format!(
                "{} objects need {} distinct non-background classes, only {} available",
                self.objects_per_scene,
                self.objects_per_scene,
                self.num_classes - 1
            )));
        }
        let (lo, hi) = self.object_size;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "object size range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"
            )));
        }
        Ok(())
    }
}

/// A class-id grid with its derived annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    height: usize,
    width: usize,
    grid: Vec<usize>,
    gt_boxes: Vec<(usize, BBox)>,
    oracle_map: DenseLabelMap,
    single_label: usize,
}

impl SyntheticScene {
    /// Derives boxes, oracle map and majority label from `grid` (row-major).
    pub fn from_grid(height: usize, width: usize, num_classes: usize, grid: Vec<usize>) -> Result<Self> {
        if grid.len() != height * width {
            return Err(Error::LengthMismatch {
                expected: height * width,
                actual: grid.len(),
            });
        }
        if let Some(bad) = grid.iter().find(|g| **g >= num_classes) {
            return Err(Error::InvalidParameter(format!("class id {bad} >= {num_classes}")));
        }
        let oracle_map = DenseLabelMap::from_fn(height, width, num_classes, ValueMode::Probabilities, |r, c, k| {
            f64::from(u8::from(grid[r * width + c] == k))
        })?;
        let mut counts = vec![0.0; num_classes];
        // (min_row, min_col, max_row, max_col) per class
        let mut extent: Vec<Option<(usize, usize, usize, usize)>> = vec![None; num_classes];
        for r in 0..height {
            for c in 0..width {
                let k = grid[r * width + c];
                counts[k] += 1.0;
                let e = extent[k].get_or_insert((r, c, r, c));
                *e = (e.0.min(r), e.1.min(c), e.2.max(r), e.3.max(c));
            }
        }
        let gt_boxes = extent
            .iter()
            .enumerate()
            .skip(1)
            .filter_map(|(k, e)| e.map(|e| (k, e)))
            .map(|(k, (r0, c0, r1, c1))| {
                let b = BBox::new(
                    c0 as f64 / width as f64,
                    r0 as f64 / height as f64,
                    (c1 + 1) as f64 / width as f64,
                    (r1 + 1) as f64 / height as f64,
                )?;
                Ok((k, b))
            })
            .collect::<Result<_>>()?;
        Ok(SyntheticScene {
            height,
            width,
            single_label: argmax(&counts),
            grid,
            gt_boxes,
            oracle_map,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.oracle_map.num_classes()
    }

    pub fn grid(&self) -> &[usize] {
        &self.grid
    }

    /// Normalized bounding box of every visible object class.
    pub fn gt_boxes(&self) -> &[(usize, BBox)] {
        &self.gt_boxes
    }

    pub fn oracle_map(&self) -> &DenseLabelMap {
        &self.oracle_map
    }

    /// Most frequent class in the grid (lowest id on ties).
    pub fn single_label(&self) -> usize {
        self.single_label
    }

    /// Normalized class histogram of the cells whose centers lie in `region`.
    ///
    /// Falls back to the cell nearest the region center when no center is
    /// covered.
    pub fn crop_features(&self, region: &CropRegion) -> Vec<f64> {
        let mut hist = vec![0.0; self.num_classes()];
        let (h, w) = (self.height as f64, self.width as f64);
        let rows = (0..self.height).filter(|r| {
            let y = (*r as f64 + 0.5) / h;
            y >= region.y && y < region.y1()
        });
        let mut total = 0.0;
        for r in rows {
            for c in 0..self.width {
                let x = (c as f64 + 0.5) / w;
                if x >= region.x && x < region.x1() {
                    hist[self.grid[r * self.width + c]] += 1.0;
                    total += 1.0;
                }
            }
        }
        if total == 0.0 {
            let r = (((region.y + region.h / 2.0) * h) as usize).min(self.height - 1);
            let c = (((region.x + region.w / 2.0) * w) as usize).min(self.width - 1);
            hist[self.grid[r * self.width + c]] = 1.0;
            return hist;
        }
        hist.iter_mut().for_each(|v| *v /= total);
        hist
    }

    /// Class that dominates `region` under the oracle map.
    pub fn crop_label(&self, region: &CropRegion) -> Result<usize> {
        Ok(pool_label(&self.oracle_map, region)?.argmax())
    }
}

/// Generates `config.n_scenes` scenes from `seed`.
///
/// Objects take distinct classes from `1..num_classes` and are painted in
/// order, so later objects occlude earlier ones.
pub fn make_synthetic_dataset(seed: u64, config: &SceneConfig) -> Result<Vec<SyntheticScene>> {
    config.validate()?;
    let (h, w, c) = (config.height, config.width, config.num_classes);
    let side = |n: usize, frac: f64| ((frac * n as f64).round() as usize).clamp(1, n);
    let mut rng = seeded_stream(seed, 0);
    (0..config.n_scenes)
        .map(|_| {
            let mut grid = vec![0usize; h * w];
            let mut classes: Vec<usize> = (1..c).collect();
            for i in 0..config.objects_per_scene {
                let j = rng.random_range(i..classes.len());
                classes.swap(i, j);
                let (lo, hi) = config.object_size;
                let oh = side(h, rng.random_range(lo..=hi));
                let ow = side(w, rng.random_range(lo..=hi));
                let r0 = rng.random_range(0..=h - oh);
                let c0 = rng.random_range(0..=w - ow);
                for r in r0..r0 + oh {
                    grid[r * w + c0..r * w + c0 + ow].fill(classes[i]);
                }
            }
            SyntheticScene::from_grid(h, w, c, grid)
        })
        .collect()
}

/// Linear softmax classifier: `scores = W^T x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyModel {
    in_features: usize,
    num_classes: usize,
    /// `in_features * num_classes` weights, `(feature, class)` row-major,
    /// followed by `num_classes` biases.
    params: Vec<f64>,
}

impl TinyModel {
    pub fn zeros(in_features: usize, num_classes: usize) -> Self {
        TinyModel {
            in_features,
            num_classes,
            params: vec![0.0; (in_features + 1) * num_classes],
        }
    }

    pub fn from_params(in_features: usize, num_classes: usize, params: Vec<f64>) -> Result<Self> {
        let expected = (in_features + 1) * num_classes;
        if params.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: params.len(),
            });
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(TinyModel {
            in_features,
            num_classes,
            params,
        })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let c = self.num_classes;
        let mut out = self.params[self.in_features * c..].to_vec();
        for (i, xi) in x.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(&self.params[i * c..(i + 1) * c]) {
                *o += xi * w;
            }
        }
        out
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.scores(x))
    }

    /// Cross-entropy against `target` and its gradient with respect to the
    /// parameters.
    pub fn loss_and_grad(&self, x: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
        let scores = self.scores(x);
        let lse = log_sum_exp(&scores);
        let loss = target.iter().zip(&scores).map(|(t, s)| t * (lse - s)).sum();
        let p = softmax(&scores);
        let t_sum: f64 = target.iter().sum();
        let delta: Vec<f64> = p.iter().zip(target).map(|(p, t)| t_sum * p - t).collect();
        let mut grad = Vec::with_capacity(self.params.len());
        for xi in x {
            grad.extend(delta.iter().map(|d| xi * d));
        }
        grad.extend_from_slice(&delta);
        (loss, grad)
    }

    /// One gradient step; fails if any parameter becomes non-finite.
    pub fn step(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        for (p, g) in self.params.iter_mut().zip(grad) {
            *p -= lr * g;
        }
        match self.params.iter().position(|p| !p.is_finite()) {
            Some(i) => Err(Error::Divergence(format!("parameter {i} became non-finite"))),
            None => Ok(()),
        }
    }
}

fn check_lr(lr: f64) -> Result<()> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("learning rate must be positive, got {lr}")))
    }
}

/// Output distribution after each update of a [`conflicting_labels`] run.
#[derive(Debug, Clone, PartialEq)]
pub struct ConflictRun {
    pub trajectory: Vec<Vec<f64>>,
}

impl ConflictRun {
    pub fn final_probs(&self) -> &[f64] {
        self.trajectory.last().expect("at least one step")
    }
}

/// Trains a softmax classifier on one fixed input whose label cycles through
/// `presentations`.
///
/// Each step applies the mean gradient of one full cycle. The model starts
/// biased toward the last class.
pub fn conflicting_labels(presentations: &[usize], num_classes: usize, steps: usize, lr: f64) -> Result<ConflictRun> {
    if steps == 0 {
        return Err(Error::InvalidParameter("steps must be at least 1".into()));
    }
    check_lr(lr)?;
    if num_classes < 2 || presentations.is_empty() {
        return Err(Error::InvalidParameter("need at least 2 classes and one presentation".into()));
    }
    if let Some(bad) = presentations.iter().find(|p| **p >= num_classes) {
        return Err(Error::InvalidParameter(format!("label {bad} >= {num_classes}")));
    }
    let mut bias = vec![0.0; num_classes];
    bias[num_classes - 1] = 2.0;
    let mut params = vec![0.0; num_classes];
    params.extend(bias);
    let mut model = TinyModel::from_params(1, num_classes, params)?;
    let x = [1.0];
    let mut trajectory = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut grad = vec![0.0; 2 * num_classes];
        for &label in presentations {
            let target = PooledTarget::one_hot(label, num_classes);
            let (_, g) = model.loss_and_grad(&x, target.probs());
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        grad.iter_mut().for_each(|g| *g /= presentations.len() as f64);
        model.step(&grad, lr)?;
        trajectory.push(model.predict(&x));
    }
    Ok(ConflictRun { trajectory })
}

/// Two classes presented alternately on the same input.
pub fn conflicting_label_demo(steps: usize, lr: f64) -> Result<Vec<f64>> {
    Ok(conflicting_labels(&[0, 1], 2, steps, lr)?.final_probs().to_vec())
}

/// Where crop targets come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Supervision {
    /// One-hot of the scene's majority class, whatever the crop shows.
    OriginalSingle,
    Variant(LabelVariant),
}

impl Supervision {
    pub const ALL: [Supervision; 5] = [
        Supervision::OriginalSingle,
        Supervision::Variant(LabelVariant::LocMulti),
        Supervision::Variant(LabelVariant::LocSingle),
        Supervision::Variant(LabelVariant::GlobMulti),
        Supervision::Variant(LabelVariant::GlobSingle),
    ];

    pub fn name(self) -> &'static str {
        match self {
            Supervision::OriginalSingle => "original_single",
            Supervision::Variant(v) => v.name(),
        }
    }

    fn target(self, scene: &SyntheticScene, region: &CropRegion) -> Result<PooledTarget> {
        match self {
            Supervision::OriginalSingle => Ok(PooledTarget::one_hot(scene.single_label, scene.num_classes())),
            Supervision::Variant(v) => label_variant(&scene.oracle_map, region, v),
        }
    }
}

impl fmt::Display for Supervision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "original_single" {
            return Ok(Supervision::OriginalSingle);
        }
        s.parse().map(Supervision::Variant)
    }
}

/// Trainer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub crop_params: CropParams,
    /// Crops drawn from the held-out scenes for evaluation.
    pub eval_crops: usize,
    /// Fraction of scenes held out (at least one scene either way).
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 4000,
            lr: 0.5,
            crop_params: CropParams::default(),
            eval_crops: 2000,
            holdout_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub supervision: Supervision,
    pub seed: u64,
    pub steps: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// Mean training loss over the last tenth of the steps.
    pub final_train_loss: f64,
    pub eval_crops: usize,
    /// Fraction of held-out crops whose predicted class matches the crop label.
    pub accuracy: f64,
}

impl TrainReport {
    pub const CSV_HEADER: [&'static str; 8] = [
        "supervision",
        "seed",
        "steps",
        "train_scenes",
        "eval_scenes",
        "final_train_loss",
        "eval_crops",
        "accuracy",
    ];

    pub fn csv_record(&self) -> [String; 8] {
        [
            self.supervision.to_string(),
            self.seed.to_string(),
            self.steps.to_string(),
            self.train_scenes.to_string(),
            self.eval_scenes.to_string(),
            format!("{:.6}", self.final_train_loss),
            self.eval_crops.to_string(),
            format!("{:.6}", self.accuracy),
        ]
    }
}

/// Writes reports as CSV with a header row.
pub fn write_reports_csv<W: Write>(out: W, reports: &[TrainReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TrainReport::CSV_HEADER)?;
    for r in reports {
        w.write_record(r.csv_record())?;
    }
    w.flush()?;
    Ok(())
}

/// Trains a [`TinyModel`] on random crops and scores it on held-out scenes.
///
/// The last `holdout_fraction` of the scenes is held out. Training draws from
/// random stream 0 of `seed` and evaluation from stream 1, so runs with
/// different supervision see the same crops.
pub fn train(dataset: &[SyntheticScene], supervision: Supervision, config: &TrainConfig, seed: u64) -> Result<TrainReport> {
    if dataset.len() < 2 {
        return Err(Error::NoImages("training needs at least 2 scenes (one held out)".into()));
    }
    if config.steps == 0 || config.eval_crops == 0 {
        return Err(Error::InvalidParameter("steps and eval_crops must be positive".into()));
    }
    if !(0.0..1.0).contains(&config.holdout_fraction) {
        return Err(Error::InvalidParameter("holdout_fraction must lie in [0, 1)".into()));
    }
    check_lr(config.lr)?;
    config.crop_params.validate()?;
    let c = dataset[0].num_classes();
    let (h, w) = (dataset[0].height, dataset[0].width);
    if dataset.iter().any(|s| s.num_classes() != c || s.height != h || s.width != w) {
        return Err(Error::HeterogeneousShapes("scenes differ in grid size or class count".into()));
    }
    let n_eval = ((dataset.len() as f64 * config.holdout_fraction).round() as usize).clamp(1, dataset.len() - 1);
    let (train_set, eval_set) = dataset.split_at(dataset.len() - n_eval);
    let image = ImageSize::new(w as f64, h as f64)?;

    let mut model = TinyModel::zeros(c, c);
    let mut rng = seeded_stream(seed, 0);
    let tail = (config.steps / 10).max(1);
    let mut tail_loss = 0.0;
    for step in 0..config.steps {
        let scene = &train_set[rng.random_range(0..train_set.len())];
        let region = sample_crop(&mut rng, &config.crop_params, image);
        let target = supervision.target(scene, &region)?;
        let (loss, grad) = model.loss_and_grad(&scene.crop_features(&region), target.probs());
        if step >= config.steps - tail {
            tail_loss += loss;
        }
        model.step(&grad, config.lr)?;
    }

    let mut rng = seeded_stream(seed, 1);
    let mut correct = 0usize;
    for _ in 0..config.eval_crops {
        let scene = &eval_set[rng.random_range(0..eval_set.len())];
        let region = sample_crop(&mut rng, &config.crop_params, image);
        let predicted = argmax(&model.scores(&scene.crop_features(&region)));
        correct += usize::from(predicted == scene.crop_label(&region)?);
    }
    Ok(TrainReport {
        supervision,
        seed,
        steps: config.steps,
        train_scenes: train_set.len(),
        eval_scenes: eval_set.len(),
        final_train_loss: tail_loss / tail as f64,
        eval_crops: config.eval_crops,
        accuracy: correct as f64 / config.eval_crops as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_coverage_object() {
        let config = SceneConfig {
            n_scenes: 3,
            height: 4,
            width: 5,
            num_classes: 3,
            objects_per_scene: 1,
            object_size: (1.0, 1.0),
        };
        for scene in make_synthetic_dataset(7, &config).unwrap() {
            let k = scene.single_label();
            assert_ne!(k, 0);
            assert!(scene.grid().iter().all(|g| *g == k));
            assert_eq!(scene.gt_boxes(), &[(k, BBox::full())]);
        }
    }

    #[test]
    fn infeasible_geometry_is_rejected() {
        let mut config = SceneConfig {
            objects_per_scene: 6,
            ..SceneConfig::default()
        };
        assert!(make_synthetic_dataset(1, &config).is_err());
        config.objects_per_scene = 2;
        config.object_size = (0.0, 0.5);
        assert!(make_synthetic_dataset(1, &config).is_err());
        config.object_size = (0.5, 1.5);
        assert!(make_synthetic_dataset(1, &config).is_err());
        config.object_size = (0.5, 0.5);
        config.num_classes = 1;
        assert!(make_synthetic_dataset(1, &config).is_err());
    }

    #[test]
    fn crop_features_count_cell_centers() {
        let scene = SyntheticScene::from_grid(2, 2, 3, vec![0, 1, 2, 2]).unwrap();
        assert_eq!(scene.crop_features(&CropRegion::full()), vec![0.25, 0.25, 0.5]);
        let left = CropRegion::new(0.0, 0.0, 0.5, 1.0).unwrap();
        assert_eq!(scene.crop_features(&left), vec![0.5, 0.0, 0.5]);
        // covers no center: nearest cell is (0, 1)
        let tiny = CropRegion::new(0.6, 0.1, 0.1, 0.1).unwrap();
        assert_eq!(scene.crop_features(&tiny), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn conflict_demo_settles_on_the_mean() {
        let p = conflicting_label_demo(2000, 0.5).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-2 && (p[1] - 0.5).abs() < 1e-2, "{p:?}");
        assert!(conflicting_label_demo(0, 0.5).is_err());
        assert!(conflicting_label_demo(10, -1.0).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut m = TinyModel::zeros(1, 2);
        assert!(matches!(m.step(&[f64::INFINITY, 0.0, 0.0, 0.0], 1.0), Err(Error::Divergence(_))));
    }

    #[test]
    fn supervision_names_round_trip() {
        for s in Supervision::ALL {
            assert_eq!(s.name().parse::<Supervision>().unwrap(), s);
        }
        assert!("nope".parse::<Supervision>().is_err());
    }
}
