//! Synthetic scene pairs, ground-truth correspondences, the matching loss and
//! the training loop.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::inlier_precision;
use crate::geom::{Point3, PointCloud, RigidTransform};
use crate::graph::{build_graph, InstanceGraph};
use crate::instances::{extract_instances, CategoryConfig, SemanticInstance, SemanticPointCloud};
use crate::matching::{forward_pair, hard_assign, SinkhornConfig, SoftAssignment};
use crate::nets::{Model, SceneInput};
use crate::tensor::{Momentum, Tape, Tensor, Var};

/// Size and raw label of one synthetic object class.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeClass {
    pub raw_label: u32,
    pub weight: f64,
    pub radius: (f64, f64),
    pub height: (f64, f64),
}

/// Parameters of [`generate_scene_pair`].
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGenConfig {
    pub instances: (usize, usize),
    pub classes: Vec<ShapeClass>,
    pub points_per_instance: (usize, usize),
    pub point_noise: f64,
    /// Horizontal per-axis standard deviation of the object shift in Y.
    pub centroid_jitter: f64,
    pub dropout: f64,
    /// Rotation about z is drawn from `±rotation_deg`.
    pub rotation_deg: f64,
    /// Tilt of the rotation axis away from z is drawn from `±tilt_deg`.
    pub tilt_deg: f64,
    pub max_translation: f64,
    /// Objects are placed in `[-extent, extent]²`.
    pub scene_extent: f64,
    /// Free space kept between object footprints.
    pub min_gap: f64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        // (raw label, radius range, height range), ordered like the default category table
        let table: [(u32, (f64, f64), (f64, f64)); 12] = [
            (10, (0.9, 1.3), (1.3, 1.7)),
            (11, (0.4, 0.6), (0.9, 1.2)),
            (15, (0.5, 0.8), (1.0, 1.4)),
            (18, (1.3, 1.8), (2.5, 3.5)),
            (20, (1.2, 1.6), (2.0, 3.0)),
            (50, (2.5, 4.0), (5.0, 10.0)),
            (51, (1.0, 2.5), (1.0, 1.8)),
            (70, (1.0, 2.5), (1.5, 4.0)),
            (71, (0.15, 0.35), (2.0, 4.0)),
            (72, (1.5, 3.0), (0.2, 0.5)),
            (80, (0.08, 0.15), (3.0, 6.0)),
            (81, (0.2, 0.4), (2.0, 3.0)),
        ];
        SceneGenConfig {
            instances: (15, 35),
            classes: table
                .iter()
                .map(|&(raw_label, radius, height)| ShapeClass {
                    raw_label,
                    weight: 1.0,
                    radius,
                    height,
                })
                .collect(),
            points_per_instance: (150, 300),
            point_noise: 0.01,
            centroid_jitter: 0.2,
            dropout: 0.2,
            rotation_deg: 180.0,
            tilt_deg: 0.0,
            max_translation: 10.0,
            scene_extent: 40.0,
            min_gap: 3.0,
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::validation(format!("scene generator: {m}")));
        if self.instances.0 == 0 || self.instances.0 > self.instances.1 {
            return bad("instance range must satisfy 1 <= min <= max");
        }
        if self.points_per_instance.0 == 0 || self.points_per_instance.0 > self.points_per_instance.1 {
            return bad("point range must satisfy 1 <= min <= max");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.classes.is_empty() || self.classes.iter().all(|c| c.weight <= 0.0) {
            return bad("no object classes with positive weight");
        }
        for c in &self.classes {
            if !(c.radius.0 > 0.0 && c.radius.0 <= c.radius.1 && c.height.0 > 0.0 && c.height.0 <= c.height.1) {
                return bad("object size ranges must be positive and ordered");
            }
        }
        let nonneg = [
            self.point_noise,
            self.centroid_jitter,
            self.rotation_deg,
            self.tilt_deg,
            self.max_translation,
            self.min_gap,
        ];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || !(self.scene_extent > 0.0) {
            return bad("noise, angle and distance settings must be finite and non-negative");
        }
        Ok(())
    }
}

/// Ground truth of one planted object.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlantedInstance {
    pub raw_label: u32,
    pub radius: f64,
    pub height: f64,
    /// Center of the object base in the X frame.
    pub base: Point3,
    /// Horizontal shift applied in Y before the rigid motion.
    pub jitter: Point3,
    pub in_x: bool,
    pub in_y: bool,
    /// Position of the object in Y's permuted emission order.
    pub y_slot: Option<usize>,
}

/// Output of [`generate_scene_pair`]. Ground truth maps X onto Y.
#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub x: SemanticPointCloud,
    pub y: SemanticPointCloud,
    pub gt: RigidTransform,
    pub planted: Vec<PlantedInstance>,
}

fn sample_cylinder(rng: &mut impl Rng, base: Point3, radius: f64, height: f64, n: usize, noise: f64) -> Vec<Point3> {
    let side = 2.0 * PI * radius * height;
    let cap = PI * radius * radius;
    let gauss = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    (0..n)
        .map(|_| {
            let theta = rng.random_range(0.0..2.0 * PI);
            let (r, z) = if rng.random_range(0.0..side + cap) < side {
                (radius, rng.random_range(0.0..height))
            } else {
                (radius * rng.random::<f64>().sqrt(), height)
            };
            let mut p = Point3::new(base.x + r * theta.cos(), base.y + r * theta.sin(), base.z + z);
            if noise > 0.0 {
                p = Point3::new(p.x + gauss.sample(rng), p.y + gauss.sample(rng), p.z + gauss.sample(rng));
            }
            p
        })
        .collect()
}

fn random_motion(rng: &mut impl Rng, cfg: &SceneGenConfig) -> RigidTransform {
    let yaw = rng.random_range(-1.0..=1.0) * cfg.rotation_deg.to_radians();
    let tilt = rng.random_range(-1.0..=1.0) * cfg.tilt_deg.to_radians();
    let tilt_dir = rng.random_range(0.0..2.0 * PI);
    let axis = Vector3::new(tilt.sin() * tilt_dir.cos(), tilt.sin() * tilt_dir.sin(), tilt.cos());
    let rot = RigidTransform::from_axis_angle(axis, yaw, Vector3::zeros());
    // translation: uniform in a disc, small vertical part, total norm capped
    let r = cfg.max_translation * rng.random::<f64>().sqrt();
    let phi = rng.random_range(0.0..2.0 * PI);
    let mut t = Vector3::new(r * phi.cos(), r * phi.sin(), rng.random_range(-0.2..=0.2) * cfg.max_translation.min(1.0));
    if t.norm() > cfg.max_translation {
        t *= cfg.max_translation / t.norm();
    }
    RigidTransform::new(*rot.rotation(), t).expect("axis-angle rotation is proper")
}

/// Plants objects, builds scene X, then derives Y by per-side dropout,
/// resampling, jitter, noise, instance shuffling and a random rigid motion.
pub fn generate_scene_pair(rng: &mut impl Rng, cfg: &SceneGenConfig) -> Result<SyntheticPair> {
    cfg.validate()?;
    let total_weight: f64 = cfg.classes.iter().map(|c| c.weight.max(0.0)).sum();
    let count = rng.random_range(cfg.instances.0..=cfg.instances.1);
    let mut planted: Vec<PlantedInstance> = Vec::with_capacity(count);
    let mut attempts = 0;
    while planted.len() < count {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::validation("scene too crowded to place all objects"));
        }
        let mut pick = rng.random_range(0.0..total_weight);
        let class = cfg
            .classes
            .iter()
            .find(|c| {
                pick -= c.weight.max(0.0);
                pick < 0.0
            })
            .unwrap_or(&cfg.classes[cfg.classes.len() - 1]);
        let radius = rng.random_range(class.radius.0..=class.radius.1);
        let height = rng.random_range(class.height.0..=class.height.1);
        let e = cfg.scene_extent;
        let base = Point3::new(rng.random_range(-e..=e), rng.random_range(-e..=e), 0.0);
        let clear = planted.iter().all(|o| {
            let d = ((o.base.x - base.x).powi(2) + (o.base.y - base.y).powi(2)).sqrt();
            d >= o.radius + radius + cfg.min_gap
        });
        if !clear {
            continue;
        }
        planted.push(PlantedInstance {
            raw_label: class.raw_label,
            radius,
            height,
            base,
            jitter: Point3::ORIGIN,
            in_x: true,
            in_y: true,
            y_slot: None,
        });
    }

    let gt = random_motion(rng, cfg);
    let jitter = Normal::new(0.0, cfg.centroid_jitter.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let (mut x_pts, mut x_lab) = (Vec::new(), Vec::new());
    let mut y_objects = Vec::new();
    for (idx, obj) in planted.iter_mut().enumerate() {
        obj.in_x = rng.random::<f64>() >= cfg.dropout;
        obj.in_y = rng.random::<f64>() >= cfg.dropout;
        if cfg.centroid_jitter > 0.0 {
            obj.jitter = Point3::new(jitter.sample(rng), jitter.sample(rng), 0.0);
        }
        let (lo, hi) = cfg.points_per_instance;
        if obj.in_x {
            let n = rng.random_range(lo..=hi);
            x_pts.extend(sample_cylinder(rng, obj.base, obj.radius, obj.height, n, cfg.point_noise));
            x_lab.extend(std::iter::repeat_n(obj.raw_label, n));
        }
        if obj.in_y {
            let n = rng.random_range(lo..=hi);
            let shifted = obj.base + obj.jitter;
            let pts = sample_cylinder(rng, shifted, obj.radius, obj.height, n, cfg.point_noise);
            y_objects.push((idx, pts));
        }
    }
    y_objects.shuffle(rng);
    let (mut y_pts, mut y_lab) = (Vec::new(), Vec::new());
    for (slot, (idx, pts)) in y_objects.into_iter().enumerate() {
        planted[idx].y_slot = Some(slot);
        y_lab.extend(std::iter::repeat_n(planted[idx].raw_label, pts.len()));
        y_pts.extend(pts.iter().map(|p| gt.apply_point(p)));
    }
    Ok(SyntheticPair {
        x: SemanticPointCloud::new(PointCloud::new(x_pts), x_lab)?,
        y: SemanticPointCloud::new(PointCloud::new(y_pts), y_lab)?,
        gt,
        planted,
    })
}

/// Ground-truth pairing with the instances left over on each side.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GtCorrespondences {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_x: Vec<usize>,
    pub unmatched_y: Vec<usize>,
}

fn nearest(from: &Point3, to: &[Point3]) -> Option<(usize, f64)> {
    to.iter()
        .enumerate()
        .map(|(j, p)| (j, from.dist2(p)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
}

/// Pairs `(i, j)` of the same category that are mutual nearest neighbors
/// after mapping X by `gt`, with centroid distance below `beta`.
pub fn label_gt_correspondences(
    instances_x: &[SemanticInstance],
    instances_y: &[SemanticInstance],
    gt: &RigidTransform,
    beta: f64,
) -> Result<GtCorrespondences> {
    if !(beta > 0.0) {
        return Err(Error::validation("beta must be > 0"));
    }
    let moved: Vec<Point3> = instances_x.iter().map(|i| gt.apply_point(&i.centroid)).collect();
    let ys: Vec<Point3> = instances_y.iter().map(|i| i.centroid).collect();
    let mut out = GtCorrespondences::default();
    let mut used_y = vec![false; ys.len()];
    for (i, p) in moved.iter().enumerate() {
        let accepted = nearest(p, &ys).and_then(|(j, d2)| {
            let mutual = nearest(&ys[j], &moved).map(|(back, _)| back) == Some(i);
            let same = instances_x[i].category_index == instances_y[j].category_index;
            (mutual && same && d2.sqrt() < beta).then_some(j)
        });
        match accepted {
            Some(j) => {
                out.pairs.push((i, j));
                used_y[j] = true;
            }
            None => out.unmatched_x.push(i),
        }
    }
    out.unmatched_y = (0..ys.len()).filter(|&j| !used_y[j]).collect();
    Ok(out)
}

/// `−Σ_{(i,j)∈Θ} log P_ij`, optionally plus `−log` of the dustbin cell of
/// every ground-truth-unmatched instance. An empty pairing gives zero.
pub fn matching_loss<'t>(
    assignment: &SoftAssignment<'t>,
    gt: &GtCorrespondences,
    include_dustbins: bool,
) -> Result<Var<'t>> {
    let lp = assignment.log_plan;
    let s = lp.shape();
    let (rows, cols) = (s[0], s[1]);
    let (m, n) = (rows - 1, cols - 1);
    let mut cells: Vec<usize> = Vec::new();
    for &(i, j) in &gt.pairs {
        if i >= m || j >= n {
            return Err(Error::validation(format!("pair ({i}, {j}) outside {m}×{n} assignment")));
        }
        cells.push(i * cols + j);
    }
    if include_dustbins {
        cells.extend(gt.unmatched_x.iter().filter(|&&i| i < m).map(|&i| i * cols + n));
        cells.extend(gt.unmatched_y.iter().filter(|&&j| j < n).map(|&j| m * cols + j));
    }
    let tape = lp.tape();
    if cells.is_empty() {
        log::warn!("scene pair without ground-truth correspondences contributes no loss");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    Ok(lp.reshape(&[rows * cols])?.gather_rows(&cells)?.sum().scale(-1.0))
}

/// Hyperparameters of [`train`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub threshold: f64,
    pub shape_points: usize,
    pub graph_k: usize,
    pub beta: f64,
    pub seed: u64,
    pub dustbin_loss: bool,
    pub sinkhorn: SinkhornConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-4,
            lr_decay: 0.98,
            momentum: 0.9,
            epochs: 50,
            threshold: 0.7,
            shape_points: 128,
            graph_k: 10,
            beta: 1.0,
            seed: 0,
            dustbin_loss: false,
            sinkhorn: SinkhornConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.learning_rate, self.lr_decay, self.beta];
        if self.batch_size == 0 || self.shape_points == 0 || self.graph_k == 0 {
            return Err(Error::validation("batch_size, shape_points and graph_k must be >= 1"));
        }
        if positive.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || self.beta <= 0.0 {
            return Err(Error::validation("learning rate, decay and beta must be finite, beta > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation("momentum must be in [0, 1)"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::validation("threshold must be in (0, 1)"));
        }
        Ok(())
    }
}

/// A scene pair prepared for the network, with its ground truth.
#[derive(Clone, Debug)]
pub struct ScenePair {
    pub instances_x: Vec<SemanticInstance>,
    pub instances_y: Vec<SemanticInstance>,
    pub graph_x: InstanceGraph,
    pub graph_y: InstanceGraph,
    pub input_x: SceneInput,
    pub input_y: SceneInput,
    pub gt: RigidTransform,
    pub correspondences: GtCorrespondences,
    /// Seed that generated the pair, reported on divergence.
    pub seed: u64,
}

impl ScenePair {
    pub fn new(
        instances_x: Vec<SemanticInstance>,
        instances_y: Vec<SemanticInstance>,
        gt: RigidTransform,
        model: &Model,
        graph_k: usize,
        beta: f64,
        seed: u64,
    ) -> Result<Self> {
        let graph_x = build_graph(&instances_x, graph_k)?;
        let graph_y = build_graph(&instances_y, graph_k)?;
        let input_x = SceneInput::new(&instances_x, &graph_x, &model.config)?;
        let input_y = SceneInput::new(&instances_y, &graph_y, &model.config)?;
        let correspondences = label_gt_correspondences(&instances_x, &instances_y, &gt, beta)?;
        Ok(ScenePair {
            instances_x,
            instances_y,
            graph_x,
            graph_y,
            input_x,
            input_y,
            gt,
            correspondences,
            seed,
        })
    }

    /// Extracts instances from both clouds and prepares the pair.
    pub fn from_clouds(
        x: &SemanticPointCloud,
        y: &SemanticPointCloud,
        gt: RigidTransform,
        categories: &CategoryConfig,
        model: &Model,
        graph_k: usize,
        beta: f64,
        seed: u64,
    ) -> Result<Self> {
        let k = model.config.shape_points;
        let ix = extract_instances(x, categories, k)?;
        let iy = extract_instances(y, categories, k)?;
        Self::new(ix, iy, gt, model, graph_k, beta, seed)
    }
}

/// Base seed of a data split, so training, validation and held-out sets drawn
/// from one run seed never share pairs.
pub fn split_seed(seed: u64, split: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (split << 40)
}

/// Generates `count` pairs with per-pair seeds `base_seed + index`, dropping
/// pairs where either side yields no instances.
pub fn synthetic_pairs(
    count: usize,
    base_seed: u64,
    gen: &SceneGenConfig,
    categories: &CategoryConfig,
    model: &Model,
    graph_k: usize,
    beta: f64,
) -> Result<Vec<ScenePair>> {
    let made: Vec<Result<Option<ScenePair>>> = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let seed = base_seed.wrapping_add(i);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = generate_scene_pair(&mut rng, gen)?;
            let k = model.config.shape_points;
            let ix = extract_instances(&s.x, categories, k)?;
            let iy = extract_instances(&s.y, categories, k)?;
            if ix.is_empty() || iy.is_empty() {
                return Ok(None);
            }
            ScenePair::new(ix, iy, s.gt, model, graph_k, beta, seed).map(Some)
        })
        .collect();
    let mut out = Vec::with_capacity(count);
    for r in made {
        if let Some(p) = r? {
            out.push(p);
        }
    }
    Ok(out)
}

/// Loss and per-parameter gradients of one pair.
pub fn pair_gradient(model: &Model, pair: &ScenePair, cfg: &TrainConfig) -> Result<(f64, Vec<Option<Tensor>>)> {
    let tape = Tape::new();
    let fwd = match forward_pair(model, &tape, &pair.input_x, &pair.input_y, &cfg.sinkhorn) {
        Ok(f) => f,
        Err(Error::NonFinite(_)) => return Err(Error::Divergence { seed: pair.seed }),
        Err(e) => return Err(e),
    };
    let loss = matching_loss(&fwd.assignment, &pair.correspondences, cfg.dustbin_loss)?;
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::Divergence { seed: pair.seed });
    }
    let mut grads: Vec<Option<Tensor>> = vec![None; model.params.len()];
    if tape.len() > 1 {
        let g = tape.backward(loss)?;
        for (pid, grad) in g.params() {
            grads[pid.0] = grad.cloned();
        }
    }
    Ok((value, grads))
}

/// Predicted correspondences for a prepared pair.
pub fn predict(model: &Model, pair: &ScenePair, cfg: &TrainConfig) -> Result<crate::matching::CorrespondenceSet> {
    let tape = Tape::new();
    let fwd = forward_pair(model, &tape, &pair.input_x, &pair.input_y, &cfg.sinkhorn)?;
    hard_assign(&fwd.assignment.trimmed(), cfg.threshold)
}

/// Mean inlier precision and recall over `pairs` (`None` when undefined everywhere).
pub fn validation_scores(model: &Model, pairs: &[ScenePair], cfg: &TrainConfig) -> Result<(Option<f64>, Option<f64>)> {
    let scores: Vec<Result<(Option<f64>, Option<f64>)>> = pairs
        .par_iter()
        .map(|pair| {
            let c = predict(model, pair, cfg)?;
            let cx: Vec<Point3> = pair.instances_x.iter().map(|i| i.centroid).collect();
            let cy: Vec<Point3> = pair.instances_y.iter().map(|i| i.centroid).collect();
            let pts: Vec<(Point3, Point3)> = c.pairs().iter().map(|&(i, j)| (cx[i], cy[j])).collect();
            let (ip, defined) = inlier_precision(&pts, &pair.gt, cfg.beta)?;
            let ir = crate::eval::inlier_recall(&c.pairs(), &pair.correspondences.pairs, &cx, &cy, &pair.gt, cfg.beta)?;
            Ok((defined.then_some(ip), ir))
        })
        .collect();
    let (mut ips, mut irs) = (Vec::new(), Vec::new());
    for s in scores {
        let (ip, ir) = s?;
        ips.extend(ip);
        irs.extend(ir);
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok((mean(&ips), mean(&irs)))
}

/// One line of training history.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_ip: Option<f64>,
    pub val_ir: Option<f64>,
    pub lr: f64,
}

/// Mini-batch momentum training. Batch gradients are the mean over the
/// batch's pairs; the learning rate decays after every epoch.
pub fn train(
    model: &mut Model,
    pairs: &[ScenePair],
    validation: &[ScenePair],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::validation("no training pairs"));
    }
    let mut opt = Momentum::new(cfg.learning_rate, cfg.momentum, cfg.lr_decay);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(f64, Vec<Option<Tensor>>)>> = batch
                .par_iter()
                .map(|&i| pair_gradient(model, &pairs[i], cfg))
                .collect();
            model.params.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for r in results {
                let (loss, grads) = r?;
                loss_sum += loss;
                for (idx, g) in grads.iter().enumerate() {
                    if let Some(g) = g {
                        model.params.accumulate_grad(crate::tensor::ParamId(idx), g, scale)?;
                    }
                }
            }
            if !model.params.grads_finite() {
                return Err(Error::Divergence { seed: pairs[batch[0]].seed });
            }
            opt.step(&mut model.params);
        }
        let (val_ip, val_ir) = if validation.is_empty() {
            (None, None)
        } else {
            validation_scores(model, validation, cfg)?
        };
        let rec = EpochRecord {
            epoch,
            mean_loss: loss_sum / pairs.len() as f64,
            val_ip,
            val_ir,
            lr: opt.lr,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} val IP {:?} IR {:?}",
            rec.mean_loss,
            rec.val_ip,
            rec.val_ir
        );
        on_epoch(&rec);
        history.push(rec);
        opt.end_epoch();
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::centroid;
    use crate::instances::DEFAULT_K;
    use crate::nets::ModelConfig;

    fn quiet(mut cfg: SceneGenConfig) -> SceneGenConfig {
        cfg.dropout = 0.0;
        cfg.point_noise = 0.0;
        cfg.centroid_jitter = 0.0;
        cfg
    }

    #[test]
    fn generator_is_deterministic() {
        let cfg = SceneGenConfig::default();
        let a = generate_scene_pair(&mut ChaCha8Rng::seed_from_u64(5), &cfg).unwrap();
        let b = generate_scene_pair(&mut ChaCha8Rng::seed_from_u64(5), &cfg).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
        assert_eq!(a.gt, b.gt);
        assert_eq!(a.planted, b.planted);
    }

    #[test]
    fn planted_objects_are_recovered() {
        let cfg = SceneGenConfig { instances: (25, 25), ..quiet(SceneGenConfig::default()) };
        let categories = CategoryConfig::default();
        let s = generate_scene_pair(&mut ChaCha8Rng::seed_from_u64(9), &cfg).unwrap();
        let ix = extract_instances(&s.x, &categories, DEFAULT_K).unwrap();
        let iy = extract_instances(&s.y, &categories, DEFAULT_K).unwrap();
        assert_eq!(ix.len(), 25);
        assert_eq!(iy.len(), 25);
        // every planted object has an extracted centroid close to its sampled shape center
        for obj in &s.planted {
            let expected_z = obj.height / 2.0;
            let close = ix.iter().any(|i| {
                let dx = i.centroid.x - obj.base.x;
                let dy = i.centroid.y - obj.base.y;
                (dx * dx + dy * dy).sqrt() < 0.5 * obj.radius + 0.05 && (i.centroid.z - expected_z).abs() < obj.height
            });
            assert!(close, "planted object at {:?} not found", obj.base);
        }
        let gt = label_gt_correspondences(&ix, &iy, &s.gt, 1.0).unwrap();
        assert_eq!(gt.pairs.len(), 25);
        assert!(gt.unmatched_x.is_empty() && gt.unmatched_y.is_empty());
    }

    #[test]
    fn exact_copy_pairs_by_identity() {
        let cfg = quiet(SceneGenConfig::default());
        let categories = CategoryConfig::default();
        let s = generate_scene_pair(&mut ChaCha8Rng::seed_from_u64(2), &cfg).unwrap();
        let ix = extract_instances(&s.x, &categories, 16).unwrap();
        let moved: Vec<SemanticInstance> = ix
            .iter()
            .map(|i| SemanticInstance { centroid: s.gt.apply_point(&i.centroid), ..i.clone() })
            .collect();
        let gt = label_gt_correspondences(&ix, &moved, &s.gt, 1.0).unwrap();
        assert_eq!(gt.pairs, (0..ix.len()).map(|i| (i, i)).collect::<Vec<_>>());

        let mut dropped = moved.clone();
        dropped.remove(3);
        let gt = label_gt_correspondences(&ix, &dropped, &s.gt, 1.0).unwrap();
        assert_eq!(gt.unmatched_x, vec![3]);
        assert_eq!(gt.pairs.len(), ix.len() - 1);
    }

    /// All-pairs search for mutual nearest neighbors.
    fn mutual_oracle(x: &[SemanticInstance], y: &[SemanticInstance], gt: &RigidTransform, beta: f64) -> Vec<(usize, usize)> {
        let d = |i: usize, j: usize| gt.apply_point(&x[i].centroid).dist(&y[j].centroid);
        let mut out = Vec::new();
        for i in 0..x.len() {
            for j in 0..y.len() {
                let row_best = (0..y.len()).all(|jj| d(i, j) < d(i, jj) || (d(i, j) == d(i, jj) && j <= jj));
                let col_best = (0..x.len()).all(|ii| d(i, j) < d(ii, j) || (d(i, j) == d(ii, j) && i <= ii));
                if row_best && col_best && d(i, j) < beta && x[i].category_index == y[j].category_index {
                    out.push((i, j));
                }
            }
        }
        out
    }

    #[test]
    fn labeling_matches_oracle_and_is_symmetric() {
        let cfg = SceneGenConfig::default();
        let categories = CategoryConfig::default();
        for seed in 0..5 {
            let s = generate_scene_pair(&mut ChaCha8Rng::seed_from_u64(seed), &cfg).unwrap();
            let ix = extract_instances(&s.x, &categories, 8).unwrap();
            let iy = extract_instances(&s.y, &categories, 8).unwrap();
            let gt = label_gt_correspondences(&ix, &iy, &s.gt, 1.0).unwrap();
            assert_eq!(gt.pairs, mutual_oracle(&ix, &iy, &s.gt, 1.0));
            let back = label_gt_correspondences(&iy, &ix, &s.gt.inverse(), 1.0).unwrap();
            let mut transposed: Vec<(usize, usize)> = back.pairs.iter().map(|&(j, i)| (i, j)).collect();
            transposed.sort_unstable();
            assert_eq!(gt.pairs, transposed);
        }
    }

    #[test]
    fn dropout_thins_pairs_binomially() {
        let cfg = SceneGenConfig { dropout: 0.3, ..SceneGenConfig::default() };
        let (mut kept, mut total) = (0usize, 0usize);
        for seed in 0..200 {
            let s = generate_scene_pair(&mut ChaCha8Rng::seed_from_u64(1000 + seed), &cfg).unwrap();
            total += s.planted.len();
            kept += s.planted.iter().filter(|o| o.in_x && o.in_y).count();
        }
        let p = 0.49;
        let mean = p * total as f64;
        let sd = (total as f64 * p * (1.0 - p)).sqrt();
        assert!((kept as f64 - mean).abs() < 3.0 * sd, "{kept} vs {mean} ± {sd}");
    }

    #[test]
    fn loss_values() {
        let tape = Tape::new();
        // log-plan with P_00 = 1 and P_11 = e⁻¹
        let lp = Tensor::new(vec![3, 3], vec![0.0, -50.0, -50.0, -50.0, -1.0, -50.0, -50.0, -50.0, 0.0]).unwrap();
        let a = SoftAssignment { log_plan: tape.constant(lp), iterations: 1, residual: 0.0 };
        let one = GtCorrespondences { pairs: vec![(0, 0)], ..Default::default() };
        assert_eq!(matching_loss(&a, &one, false).unwrap().item(), 0.0);
        let two = GtCorrespondences { pairs: vec![(1, 1)], ..Default::default() };
        assert_eq!(matching_loss(&a, &two, false).unwrap().item(), 1.0);
        let empty = GtCorrespondences::default();
        assert_eq!(matching_loss(&a, &empty, false).unwrap().item(), 0.0);
        let bad = GtCorrespondences { pairs: vec![(2, 0)], ..Default::default() };
        assert!(matching_loss(&a, &bad, false).is_err());
        let with_bins = GtCorrespondences { pairs: vec![], unmatched_x: vec![1], unmatched_y: vec![0] };
        assert_eq!(matching_loss(&a, &with_bins, true).unwrap().item(), 100.0);
    }

    #[test]
    fn loss_matches_direct_sum_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::new(vec![4, 5], (0..20).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let gt = GtCorrespondences { pairs: vec![(0, 1), (2, 3), (1, 0)], unmatched_x: vec![], unmatched_y: vec![] };
        let cfg = SinkhornConfig { max_iters: 20, tol: 1e-300 };
        let tape = Tape::new();
        let s = crate::matching::sinkhorn(&tape.constant(a.clone()), &cfg).unwrap();
        let p = s.plan();
        let direct: f64 = gt.pairs.iter().map(|&(i, j)| -p.at2(i, j).ln()).sum();
        assert!((matching_loss(&s, &gt, false).unwrap().item() - direct).abs() < 1e-12);
        let err = crate::tensor::grad_check(
            |_, x| {
                let s = crate::matching::sinkhorn(&x, &cfg)?;
                matching_loss(&s, &gt, false)
            },
            &a,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "{err}");
    }

    fn tiny_model() -> Model {
        let cfg = ModelConfig {
            shape_points: 8,
            gcn_dims: [8, 8, 8],
            shape_dims: [8, 8, 8],
            tnet_hidden: [4, 4],
            ..ModelConfig::default()
        };
        Model::new(cfg, 3).unwrap()
    }

    fn tiny_pairs(model: &Model, n: usize) -> Vec<ScenePair> {
        let gen = SceneGenConfig { instances: (6, 8), ..SceneGenConfig::default() };
        synthetic_pairs(n, 50, &gen, &CategoryConfig::default(), model, 4, 1.0).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let mut model = tiny_model();
        let before = model.params.clone();
        let pairs = tiny_pairs(&model, 3);
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 2, batch_size: 2, shape_points: 8, graph_k: 4, ..TrainConfig::default() };
        train(&mut model, &pairs, &[], &cfg, |_| {}).unwrap();
        for ((_, a), (_, b)) in model.params.iter().zip(before.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn training_is_reproducible_and_learns() {
        let pairs = tiny_pairs(&tiny_model(), 4);
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            epochs: 3,
            batch_size: 2,
            shape_points: 8,
            graph_k: 4,
            seed: 11,
            ..TrainConfig::default()
        };
        let mut a = tiny_model();
        let mut b = tiny_model();
        let ha = train(&mut a, &pairs, &pairs[..1], &cfg, |_| {}).unwrap();
        let hb = train(&mut b, &pairs, &pairs[..1], &cfg, |_| {}).unwrap();
        assert_eq!(ha, hb);
        for ((_, x), (_, y)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(x.value, y.value);
        }
        assert!(ha.last().unwrap().mean_loss < ha[0].mean_loss);
    }

    #[test]
    fn planted_centroids_match_shape_means() {
        let cfg = quiet(SceneGenConfig { instances: (5, 5), ..SceneGenConfig::default() });
        let s = generate_scene_pair(&mut ChaCha8Rng::seed_from_u64(1), &cfg).unwrap();
        let ix = extract_instances(&s.x, &CategoryConfig::default(), 8).unwrap();
        for inst in &ix {
            assert!(centroid(&inst.shape_points).is_some());
        }
    }
}
