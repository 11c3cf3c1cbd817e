//! Staged training, prototype projection, last-layer optimization and
//! evaluation.
//!
//! Per-image forward/backward work runs on a rayon pool of `jobs` threads,
//! but results are collected in image order and reduced sequentially, so the
//! outcome is bit-identical for any thread count.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::deform::{part_contributions, sample_position};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, image_objective, last_layer_loss, orthogonality_loss, LossWeights};
use crate::model::{argmax_first, Group, Model, ModelGrads};
use crate::sphere::norm_preserving_interpolate;

/// Stage-1 sub-phase of an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Prototypes only.
    Warmup1,
    /// Prototypes and backbone.
    Warmup2,
    /// Backbone, prototypes and offset branch.
    Joint,
}

impl Stage {
    pub fn groups(self) -> &'static [Group] {
        match self {
            Stage::Warmup1 => &[Group::Prototypes],
            Stage::Warmup2 => &[Group::Prototypes, Group::Backbone],
            Stage::Joint => &[Group::Prototypes, Group::Backbone, Group::Offsets],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Warmup1 => "warmup1",
            Stage::Warmup2 => "warmup2",
            Stage::Joint => "joint",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub warmup1_epochs: usize,
    pub warmup2_epochs: usize,
    pub joint_epochs: usize,
    pub lr_backbone: f64,
    pub lr_prototypes: f64,
    pub lr_offsets: f64,
    pub lr_last: f64,
    /// Multiplier applied every `lr_decay_every` joint epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub momentum: f64,
    pub batch_size: usize,
    /// 1-based epochs after which prototypes are projected and the last
    /// layer is trained.
    pub projection_epochs: Vec<usize>,
    pub last_layer_epochs: usize,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
    pub jobs: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            warmup1_epochs: 5,
            warmup2_epochs: 5,
            joint_epochs: 20,
            lr_backbone: 3e-2,
            lr_prototypes: 1e-1,
            lr_offsets: 1e-2,
            lr_last: 0.1,
            lr_decay: 0.1,
            lr_decay_every: 10,
            momentum: 0.9,
            batch_size: 10,
            projection_epochs: vec![20, 30],
            last_layer_epochs: 20,
            seed: 0,
            jobs: 1,
        }
    }
}

impl TrainSchedule {
    pub fn total_epochs(&self) -> usize {
        self.warmup1_epochs + self.warmup2_epochs + self.joint_epochs
    }

    /// Sub-phase of the 0-based `epoch`.
    pub fn stage(&self, epoch: usize) -> Stage {
        if epoch < self.warmup1_epochs {
            Stage::Warmup1
        } else if epoch < self.warmup1_epochs + self.warmup2_epochs {
            Stage::Warmup2
        } else {
            Stage::Joint
        }
    }

    /// Learning rate of `group` in the 0-based `epoch`. Decay applies only
    /// inside the joint phase.
    pub fn lr(&self, group: Group, epoch: usize) -> f64 {
        let base = match group {
            Group::Backbone => self.lr_backbone,
            Group::Prototypes => self.lr_prototypes,
            Group::Offsets => self.lr_offsets,
            Group::Last => self.lr_last,
        };
        let joint_start = self.warmup1_epochs + self.warmup2_epochs;
        if group == Group::Last || epoch < joint_start || self.lr_decay_every == 0 {
            return base;
        }
        base * self.lr_decay.powi(((epoch - joint_start) / self.lr_decay_every) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let lrs = [self.lr_backbone, self.lr_prototypes, self.lr_offsets, self.lr_last];
        if lrs.iter().any(|&l| !(l.is_finite() && l > 0.0)) {
            return Err(Error::Config(format!("learning rates must be positive, got {lrs:?}")));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return Err(Error::Config(format!("lr_decay must be positive, got {}", self.lr_decay)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be positive".into()));
        }
        if let Some(&e) = self.projection_epochs.iter().find(|&&e| e == 0 || e > self.total_epochs()) {
            return Err(Error::Config(format!(
                "projection epoch {e} outside 1..={}",
                self.total_epochs()
            )));
        }
        Ok(())
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {} worker threads: {e}", self.jobs)))
    }
}

/// Running extremes of pooled scores and per-part contributions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub score_min: f64,
    pub score_max: f64,
    pub part_min: f64,
    pub part_max: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            score_min: f64::INFINITY,
            score_max: f64::NEG_INFINITY,
            part_min: f64::INFINITY,
            part_max: f64::NEG_INFINITY,
        }
    }
}

impl Bounds {
    pub fn merge(&mut self, o: &Bounds) {
        self.score_min = self.score_min.min(o.score_min);
        self.score_max = self.score_max.max(o.score_max);
        self.part_min = self.part_min.min(o.part_min);
        self.part_max = self.part_max.max(o.part_max);
    }

    fn score(&mut self, s: f64) {
        self.score_min = self.score_min.min(s);
        self.score_max = self.score_max.max(s);
    }

    fn part(&mut self, s: f64) {
        self.part_min = self.part_min.min(s);
        self.part_max = self.part_max.max(s);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub stage: Stage,
    pub loss: f64,
    pub ce: f64,
    pub sep: f64,
    pub clst: f64,
    pub ortho: f64,
    /// Accuracy of the pre-update predictions seen during the epoch.
    pub train_accuracy: f64,
    pub bounds: Bounds,
}

impl fmt::Display for EpochMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} stage={} loss={:.6} ce={:.6} sep={:.6} clst={:.6} ortho={:.6} train_acc={:.4} \
             score_min={:.6} score_max={:.6} part_min={:.6} part_max={:.6}",
            self.epoch,
            self.stage,
            self.loss,
            self.ce,
            self.sep,
            self.clst,
            self.ortho,
            self.train_accuracy,
            self.bounds.score_min,
            self.bounds.score_max,
            self.bounds.part_min,
            self.bounds.part_max
        )
    }
}

struct ImageStep {
    ce: f64,
    sep: f64,
    clst: f64,
    correct: bool,
    bounds: Bounds,
    grads: ModelGrads,
}

fn image_step(model: &Model, dataset: &Dataset, i: usize, weights: &LossWeights, classes: &[usize]) -> Result<ImageStep> {
    let fwd = model.forward(&dataset.images[i])?;
    let label = dataset.labels[i];
    let obj = image_objective(&fwd.layer.maps, label, classes, &model.last, weights)?;
    let grads = model.backward(&fwd, &obj.grads)?;
    let mut bounds = Bounds::default();
    obj.scores.iter().for_each(|&s| bounds.score(s));
    let grid = fwd.zhat.grid(0);
    let offsets = fwd.layer.offsets().map(|o| (o, 0));
    for proto in &model.layer.prototypes {
        for a in 0..fwd.zhat.height() {
            for b in 0..fwd.zhat.width() {
                part_contributions(&grid, proto, offsets, a, b)
                    .into_iter()
                    .for_each(|c| bounds.part(c as f64));
            }
        }
    }
    Ok(ImageStep {
        ce: obj.ce,
        sep: obj.sep,
        clst: obj.clst,
        correct: argmax_first(&model.logits(&fwd)) == label,
        bounds,
        grads,
    })
}

/// Optimizer state for the stage-1 groups.
#[derive(Clone, Debug)]
pub struct Optimizer {
    velocity: ModelGrads,
}

impl Optimizer {
    pub fn new(model: &Model) -> Self {
        Self {
            velocity: ModelGrads::zeros_like(model),
        }
    }
}

/// One pass over `dataset` in a seeded shuffled order, updating only the
/// groups of `stage`.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &mut Model,
    dataset: &Dataset,
    schedule: &TrainSchedule,
    weights: &LossWeights,
    epoch: usize,
    opt: &mut Optimizer,
    pool: &rayon::ThreadPool,
) -> Result<EpochMetrics> {
    let stage = schedule.stage(epoch);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(schedule.seed.wrapping_add(epoch as u64)));
    let classes = model.proto_classes();
    let n_total = dataset.len() as f64;
    let (mut ce, mut sep, mut clst, mut ortho_acc, mut correct) = (0.0, 0.0, 0.0, 0.0, 0usize);
    let mut bounds = Bounds::default();
    let mut steps = 0usize;
    for batch in order.chunks(schedule.batch_size) {
        let results: Vec<Result<ImageStep>> = {
            let m = &*model;
            pool.install(|| batch.par_iter().map(|&i| image_step(m, dataset, i, weights, &classes)).collect())
        };
        let n = batch.len() as f32;
        let mut grads = ModelGrads::zeros_like(model);
        for r in results {
            let r = r?;
            ce += r.ce / n_total;
            sep += r.sep / n_total;
            clst += r.clst / n_total;
            correct += r.correct as usize;
            bounds.merge(&r.bounds);
            let mut g = r.grads;
            g.scale(1.0 / n);
            grads.add_assign(&g);
        }
        let (ortho, og) = orthogonality_loss(&model.layer.prototypes);
        ortho_acc += ortho;
        steps += 1;
        for (dst, src) in grads.parts.iter_mut().zip(og) {
            dst.iter_mut()
                .zip(src)
                .for_each(|(d, s)| *d += (weights.lambda_ortho * s) as f32);
        }
        for &group in stage.groups() {
            let lr = schedule.lr(group, epoch) as f32;
            model.sgd_group(group, &grads, &mut opt.velocity, lr, schedule.momentum as f32);
        }
    }
    let ortho = ortho_acc / steps.max(1) as f64;
    Ok(EpochMetrics {
        epoch: epoch + 1,
        stage,
        loss: ce + weights.lambda_sep * sep + weights.lambda_clst * clst + weights.lambda_ortho * ortho,
        ce,
        sep,
        clst,
        ortho,
        train_accuracy: correct as f64 / n_total,
        bounds,
    })
}

fn check_dataset(model: &Model, dataset: &Dataset) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("dataset is empty".into()));
    }
    if dataset.num_classes != model.config.num_classes {
        return Err(Error::InvalidInput(format!(
            "dataset has {} classes, model {}",
            dataset.num_classes, model.config.num_classes
        )));
    }
    Ok(())
}

/// All stage-1 epochs without projection or last-layer training.
pub fn train_stage1(model: &mut Model, dataset: &Dataset, schedule: &TrainSchedule, weights: &LossWeights) -> Result<Vec<EpochMetrics>> {
    schedule.validate()?;
    weights.validate()?;
    check_dataset(model, dataset)?;
    let pool = schedule.pool()?;
    let mut opt = Optimizer::new(model);
    (0..schedule.total_epochs())
        .map(|e| run_epoch(model, dataset, schedule, weights, e, &mut opt, &pool))
        .collect()
}

/// Where a prototype was projected.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionRecord {
    pub prototype: usize,
    /// Index into the training set.
    pub image: usize,
    /// Name of that image (its manifest path).
    pub source: String,
    pub center: (usize, usize),
    /// Per-part `(Δ₁, Δ₂)` at the source center.
    pub deltas: Vec<(f32, f32)>,
    /// Similarity of the projected prototype at its source.
    pub cosine: f32,
}

/// Moves every prototype onto the deformed features of its best-matching
/// configuration among training images of its own class.
///
/// Candidates are eligible centers whose deformed sampling positions are
/// all fully supported by the grid, so the projected parts keep norm `r`
/// exactly. If no such configuration exists for a class, every eligible
/// center is allowed and the parts are renormalized.
pub fn project_prototypes(model: &mut Model, dataset: &Dataset, jobs: usize) -> Result<Vec<ProjectionRecord>> {
    check_dataset(model, dataset)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let forwards: Vec<_> = {
        let m = &*model;
        pool.install(|| {
            dataset
                .images
                .par_iter()
                .map(|x| {
                    let (_, _, _, zhat) = m.embed(x)?;
                    let cache = m.layer.forward(&zhat)?;
                    Ok((zhat, cache))
                })
                .collect::<Result<Vec<_>>>()
        })?
    };
    let grid = model.layer.grid;
    let rho = grid.rho();
    let mut records = Vec::with_capacity(model.num_prototypes());
    for p in 0..model.num_prototypes() {
        let class = model.layer.prototypes[p].class_id;
        let images = dataset.of_class(class);
        if images.is_empty() {
            return Err(Error::InvalidInput(format!("class {class} has no training images to project onto")));
        }
        let mut best: Option<(f32, usize, (usize, usize), bool)> = None;
        for strict in [true, false] {
            for &i in &images {
                let (zhat, cache) = &forwards[i];
                let fg = zhat.grid(0);
                let offsets = cache.offsets().map(|o| (o, 0));
                let map = &cache.maps[p];
                for (idx, (&v, &ok)) in map.values.iter().zip(&map.eligible).enumerate() {
                    let (a, b) = (idx / map.width, idx % map.width);
                    if !ok || best.is_some_and(|(bv, ..)| v <= bv) {
                        continue;
                    }
                    if strict
                        && !(0..rho).all(|k| {
                            let (x, y) = sample_position(&grid, offsets, k, a, b);
                            fg.fully_supported(x, y)
                        })
                    {
                        continue;
                    }
                    best = Some((v, i, (a, b), strict));
                }
            }
            if best.is_some() {
                break;
            }
        }
        let (_, image, (a, b), strict) =
            best.ok_or_else(|| Error::Config("no eligible projection center; latent grid too small".into()))?;
        let (zhat, cache) = &forwards[image];
        let offsets = cache.offsets().map(|o| (o, 0));
        let proto = &mut model.layer.prototypes[p];
        let mut deltas = Vec::with_capacity(rho);
        for k in 0..rho {
            let (x, y) = sample_position(&grid, offsets, k, a, b);
            let v = norm_preserving_interpolate(zhat, 0, x, y);
            proto.part_mut(k).copy_from_slice(&v);
            deltas.push(offsets.map_or((0.0, 0.0), |(o, n)| o.delta(n, k, a, b)));
        }
        if !strict {
            log::warn!("prototype {p}: no fully supported configuration, projected onto a boundary center and renormalized");
            proto.renormalize();
        }
        let cosine = part_contributions(&zhat.grid(0), proto, offsets, a, b)
            .iter()
            .map(|&c| c as f64)
            .sum::<f64>() as f32;
        records.push(ProjectionRecord {
            prototype: p,
            image,
            source: dataset.names[image].clone(),
            center: (a, b),
            deltas,
            cosine,
        });
    }
    Ok(records)
}

/// Pooled scores of every image, in dataset order.
pub fn dataset_scores(model: &Model, dataset: &Dataset, jobs: usize) -> Result<Vec<Vec<f64>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| {
        dataset
            .images
            .par_iter()
            .map(|x| Ok(model.forward(x)?.scores().iter().map(|&s| s as f64).collect()))
            .collect()
    })
}

/// Optimizes the last layer alone on `CE + λ·L1(off-class)` with proximal
/// gradient steps: a gradient step on the cross entropy, then
/// soft-thresholding of the off-class entries by `lr·λ`. Returns the
/// objective after each epoch.
pub fn train_last_layer(
    model: &mut Model,
    dataset: &Dataset,
    schedule: &TrainSchedule,
    weights: &LossWeights,
) -> Result<Vec<f64>> {
    check_dataset(model, dataset)?;
    if schedule.last_layer_epochs == 0 {
        return Ok(Vec::new());
    }
    let scores = dataset_scores(model, dataset, schedule.jobs)?;
    let classes = model.proto_classes();
    let k = model.config.num_classes;
    let lr = schedule.lr_last;
    let shrink = lr * weights.lambda_l1_last;
    log::info!(
        "last layer: {} epochs of proximal SGD (lr={lr}, off-class soft threshold {shrink})",
        schedule.last_layer_epochs
    );
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed ^ 0x6c61_7374);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(schedule.last_layer_epochs);
    for _ in 0..schedule.last_layer_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(schedule.batch_size) {
            let s: Vec<Vec<f64>> = batch.iter().map(|&i| scores[i].clone()).collect();
            let y: Vec<usize> = batch.iter().map(|&i| dataset.labels[i]).collect();
            let (_, _, grad) = cross_entropy(&s, &model.last, &y)?;
            for (idx, (w, g)) in model.last.weights.iter_mut().zip(grad).enumerate() {
                let mut v = *w as f64 - lr * g;
                if classes[idx / k] != idx % k {
                    v = v.signum() * (v.abs() - shrink).max(0.0);
                }
                *w = v as f32;
            }
        }
        let (loss, _) = last_layer_loss(&scores, &model.last, &dataset.labels, &classes, weights.lambda_l1_last)?;
        history.push(loss);
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub predicted: usize,
    pub logits: Vec<f64>,
}

impl Prediction {
    pub fn top_score(&self) -> f64 {
        self.logits[self.predicted]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub predictions: Vec<Prediction>,
}

/// Standard (no-margin) predictions; ties go to the lowest class index.
pub fn evaluate(model: &Model, dataset: &Dataset, jobs: usize) -> Result<Evaluation> {
    check_dataset(model, dataset)?;
    let scores = dataset_scores(model, dataset, jobs)?;
    let predictions: Vec<Prediction> = scores
        .iter()
        .zip(&dataset.labels)
        .map(|(s, &label)| {
            let logits = model.last.logits_f64(s);
            Prediction {
                label,
                predicted: argmax_first(&logits),
                logits,
            }
        })
        .collect();
    let correct = predictions.iter().filter(|p| p.predicted == p.label).count();
    Ok(Evaluation {
        accuracy: correct as f64 / predictions.len() as f64,
        predictions,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    /// From the most recent projection (empty if none happened).
    pub projections: Vec<ProjectionRecord>,
    /// Last-layer objective per epoch, one list per projection.
    pub last_layer: Vec<Vec<f64>>,
}

/// Stage 1 with projection and last-layer training after each configured
/// projection epoch. `on_epoch` sees every epoch's metrics as they finish.
pub fn train(
    model: &mut Model,
    dataset: &Dataset,
    schedule: &TrainSchedule,
    weights: &LossWeights,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    schedule.validate()?;
    weights.validate()?;
    check_dataset(model, dataset)?;
    let pool = schedule.pool()?;
    let mut opt = Optimizer::new(model);
    let mut out = TrainOutcome {
        metrics: Vec::new(),
        projections: Vec::new(),
        last_layer: Vec::new(),
    };
    for epoch in 0..schedule.total_epochs() {
        let m = run_epoch(model, dataset, schedule, weights, epoch, &mut opt, &pool)?;
        log::info!("{m}");
        on_epoch(&m);
        out.metrics.push(m);
        if schedule.projection_epochs.contains(&(epoch + 1)) {
            out.projections = project_prototypes(model, dataset, schedule.jobs)?;
            let hist = train_last_layer(model, dataset, schedule, weights)?;
            if let Some(l) = hist.last() {
                log::info!("epoch={} projected; last-layer loss={l:.6}", epoch + 1);
            }
            out.last_layer.push(hist);
            // momentum from before the jump would drag prototypes off their projection
            opt = Optimizer::new(model);
        }
    }
    Ok(out)
}
