//! Label assignment, the joint classification/regression loss, SGD with
//! momentum and the end-to-end training loop.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{AnnotationRecord, Scene};
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::geometry::{encode_deltas, iou, BBox, Delta};
use crate::model::{detect_all, DetectConfig, DetectionModel};
use crate::mrp::{self, delta_index, logit_index};
use crate::params::ParamStore;
use crate::tensor::{Graph, NodeId, RegressionTerm, LOG_EPS};

/// Regions overlapping a ground truth by more than this are foreground.
pub const FG_IOU: f32 = 0.5;
/// Regions overlapping every ground truth by less than this are not sampled.
pub const BG_IOU_LOW: f32 = 0.1;

/// `0.5 z^2` for `|z| <= 1`, `|z| - 0.5` otherwise.
pub fn smooth_l1(z: f32) -> f32 {
    let a = z.abs();
    if a <= 1.0 {
        0.5 * z * z
    } else {
        a - 0.5
    }
}

/// A region with its training label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledRoi {
    pub bbox: BBox,
    /// 0 for background, otherwise the class of the matched ground truth.
    pub label: usize,
    /// Regression target; present exactly for foreground regions.
    pub target: Option<Delta>,
    /// Ground truth with the highest IoU (lowest index on ties).
    pub matched_gt: Option<usize>,
    pub iou: f32,
}

/// Labels every region against `gts`: foreground above [`FG_IOU`],
/// background within `[BG_IOU_LOW, FG_IOU]`; regions below
/// [`BG_IOU_LOW`] are left out.
pub fn assign_labels(rois: &[BBox], gts: &[(BBox, usize)]) -> Vec<LabeledRoi> {
    rois.iter()
        .filter_map(|roi| {
            let mut best: Option<(usize, f32)> = None;
            for (j, (g, _)) in gts.iter().enumerate() {
                let v = iou(roi, g);
                if best.map_or(true, |(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            let (j, v) = best?;
            if v > FG_IOU {
                let target = encode_deltas(roi, &gts[j].0).ok()?;
                Some(LabeledRoi {
                    bbox: *roi,
                    label: gts[j].1,
                    target: Some(target),
                    matched_gt: Some(j),
                    iou: v,
                })
            } else if v >= BG_IOU_LOW {
                Some(LabeledRoi {
                    bbox: *roi,
                    label: 0,
                    target: None,
                    matched_gt: Some(j),
                    iou: v,
                })
            } else {
                None
            }
        })
        .collect()
}

/// Loss of one region: `-ln p[label] + lambda [label >= 1] sum_v smooth_l1(t_v - t*_v)`,
/// where `pred` holds `4(cls+1)` class-specific deltas and the regression
/// uses the slice of `label`.
pub fn multitask_loss(probs: &[f32], label: usize, pred: &[f32], target: Option<&Delta>, lambda: f32) -> Result<f32> {
    if label >= probs.len() || pred.len() != 4 * probs.len() {
        return Err(Error::LengthMismatch(format!(
            "label {label}, {} probabilities, {} deltas",
            probs.len(),
            pred.len()
        )));
    }
    let cls = -probs[label].max(LOG_EPS).ln();
    if label == 0 {
        return Ok(cls);
    }
    let t = target.ok_or_else(|| Error::LengthMismatch("foreground region without a target".into()))?;
    let reg: f32 = t
        .to_array()
        .iter()
        .enumerate()
        .map(|(v, tv)| smooth_l1(pred[4 * label + v] - tv))
        .sum();
    Ok(cls + lambda * reg)
}

/// `v <- momentum v + g`, `theta <- theta - lr v`.
pub fn sgd_momentum_step(
    params: &mut [f32],
    grads: &[f32],
    velocity: &mut [f32],
    lr: f32,
    momentum: f32,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::LengthMismatch(format!(
            "{} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum SGD over a whole [`ParamStore`], with optional L2 decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f32, weight_decay: f32) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }

    /// Applies the accumulated gradients (scaled by `grad_scale`) and clears them.
    pub fn step(&mut self, store: &mut ParamStore, lr: f32, grad_scale: f32) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for (id, vel) in ids.into_iter().zip(&mut self.velocity) {
            let t = store.get_mut(id);
            let mut grad: Vec<f32> = match t.grad() {
                Some(g) => g.iter().map(|g| g * grad_scale).collect(),
                None => vec![0.0; t.numel()],
            };
            if self.weight_decay > 0.0 {
                for (g, p) in grad.iter_mut().zip(t.data()) {
                    *g += self.weight_decay * p;
                }
            }
            sgd_momentum_step(t.data_mut(), &grad, vel, lr, self.momentum)?;
            t.zero_grad();
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the regression terms.
    pub lambda: f32,
    /// `(iterations, learning rate)` phases run in order.
    pub schedule: Vec<(usize, f32)>,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_grad_norm: f32,
    /// Seed of image order and RoI/anchor sampling.
    pub seed: u64,
    /// Stop after this many iterations even if the schedule is longer.
    pub max_iterations: Option<usize>,
    /// Validation mAP every this many iterations (0 disables).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            schedule: vec![(3000, 1e-2), (2000, 1e-3)],
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_grad_norm: 2.0,
            seed: 0,
            max_iterations: None,
            val_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("training.lambda must be >= 0".into()));
        }
        if self.schedule.is_empty() || self.schedule.iter().any(|(_, lr)| !(*lr > 0.0)) {
            return Err(Error::Config(
                "training.schedule needs phases with positive rates".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) || !(self.clip_grad_norm >= 0.0) {
            return Err(Error::Config(
                "training.momentum must be in [0, 1), decay and clipping >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        let planned: usize = self.schedule.iter().map(|(n, _)| n).sum();
        self.max_iterations.map_or(planned, |m| m.min(planned))
    }

    /// Learning rate of 0-based iteration `it`.
    pub fn lr_at(&self, it: usize) -> f32 {
        let mut end = 0;
        for &(n, lr) in &self.schedule {
            end += n;
            if it < end {
                return lr;
            }
        }
        self.schedule.last().map_or(0.0, |p| p.1)
    }
}

/// Loss components of one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub rpn_cls: f32,
    pub rpn_reg: f32,
    pub rda_cls: f32,
    pub rda_reg: f32,
    pub total: f32,
}

/// Graph of one training iteration with its scalar loss node.
pub struct TrainStep {
    pub graph: Graph,
    pub loss: NodeId,
    pub losses: StepLosses,
    pub num_rois: usize,
    pub num_fg: usize,
    /// Label of each sampled region, 0 for background.
    pub roi_labels: Vec<usize>,
    /// `n x 4(cls+1)` predicted deltas of the sampled regions; their
    /// gradient is kept after backward.
    pub rda_deltas: Option<NodeId>,
}

/// Builds the forward graph of one iteration on `scene`: anchor and RoI
/// sampling, both proposal losses and both detection losses.
pub fn build_train_step(model: &DetectionModel, scene: &Scene, lambda: f32, rng: &mut ChaCha8Rng) -> Result<TrainStep> {
    let cfg = &model.config().mrp;
    let store = &model.store;
    let gts = scene.ground_truths();
    let s = scene.image.shape();
    let (img_w, img_h) = (s.w as f32, s.h as f32);
    let mut g = Graph::new();
    let feat = model.backbone().forward(&mut g, store, &scene.image)?;
    let fs = g.shape(feat);
    let (fh, fw) = (fs.h, fs.w);
    let a = model.rpn().anchors_per_cell();
    let rpn = model.rpn().forward(&mut g, store, feat)?;
    let anchors = mrp::anchors_for(fh, fw, model.stride(), cfg)?;

    let targets = mrp::sample_anchor_targets(&anchors, &gts, cfg, rng)?;
    let flat = |i: usize| (i % a, (i / a) / fw, (i / a) % fw);
    let picks: Vec<(usize, bool)> = targets
        .labels
        .iter()
        .map(|&(i, pos)| {
            let (ai, row, col) = flat(i);
            (logit_index(ai, row, col, fh, fw), pos)
        })
        .collect();
    let n_anchor = picks.len().max(1) as f32;
    let rpn_cls = g.sigmoid_cross_entropy(rpn.logits, &picks, 1.0 / n_anchor)?;
    let rpn_terms = targets
        .deltas
        .iter()
        .map(|&(i, d)| {
            let (ai, row, col) = flat(i);
            RegressionTerm {
                offset: delta_index(ai, 0, row, col, fh, fw),
                stride: fh * fw,
                target: d.to_array(),
                weight: lambda / n_anchor,
            }
        })
        .collect();
    let rpn_reg = g.smooth_l1(rpn.deltas, rpn_terms)?;

    // proposals are treated as constants
    let (scores, deltas) = mrp::decode_rpn_outputs(g.value(rpn.logits), g.value(rpn.deltas), a)?;
    let proposals = mrp::generate_proposals(&scores, &deltas, &anchors, img_w, img_h, cfg)?;
    let candidates = mrp::training_candidates(&proposals, &gts, img_w, img_h, cfg)?;
    let sample = mrp::sample_rois(&candidates, &gts, cfg.rda_batch, cfg.fg_fraction, rng)?;

    let mut parts = vec![rpn_cls, rpn_reg];
    let (mut rda_cls_v, mut rda_reg_v) = (0.0, 0.0);
    let mut rda_deltas = None;
    if !sample.rois.is_empty() {
        let boxes: Vec<BBox> = sample.rois.iter().map(|r| r.bbox).collect();
        let heads = model.rda().forward(&mut g, store, feat, &boxes, model.stride())?;
        let n = boxes.len() as f32;
        let labels: Vec<usize> = sample.rois.iter().map(|r| r.label).collect();
        let rda_cls = g.softmax_cross_entropy(heads.logits, &labels, 1.0 / n)?;
        let k = 4 * (model.num_classes() + 1);
        let terms = sample
            .rois
            .iter()
            .enumerate()
            .filter_map(|(r, roi)| {
                roi.target.map(|t| RegressionTerm {
                    offset: r * k + 4 * roi.label,
                    stride: 1,
                    target: t.to_array(),
                    weight: lambda / n,
                })
            })
            .collect();
        let rda_reg = g.smooth_l1(heads.deltas, terms)?;
        g.retain_grad(heads.deltas);
        rda_deltas = Some(heads.deltas);
        rda_cls_v = g.scalar(rda_cls);
        rda_reg_v = g.scalar(rda_reg);
        parts.extend([rda_cls, rda_reg]);
    }
    let mut loss = parts[0];
    for &p in &parts[1..] {
        loss = g.add(loss, p)?;
    }
    let losses = StepLosses {
        rpn_cls: g.scalar(rpn_cls),
        rpn_reg: g.scalar(rpn_reg),
        rda_cls: rda_cls_v,
        rda_reg: rda_reg_v,
        total: g.scalar(loss),
    };
    Ok(TrainStep {
        graph: g,
        loss,
        losses,
        num_rois: sample.rois.len(),
        num_fg: sample.num_fg,
        roi_labels: sample.rois.iter().map(|r| r.label).collect(),
        rda_deltas,
    })
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub losses: StepLosses,
    pub val_map: Option<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "iteration,rpn_cls,rpn_reg,rda_cls,rda_reg,total,val_map";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let l = &r.losses;
            let _ = write!(
                s,
                "{},{},{},{},{},{},",
                r.iteration, l.rpn_cls, l.rpn_reg, l.rda_cls, l.rda_reg, l.total
            );
            if let Some(m) = r.val_map {
                let _ = write!(s, "{m}");
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn totals(&self) -> Vec<f32> {
        self.rows.iter().map(|r| r.losses.total).collect()
    }
}

/// Mean AP of `model` on `scenes` at the IoU threshold of `detect`.
pub fn evaluate_map(model: &DetectionModel, scenes: &[Scene], detect: &DetectConfig) -> Result<Option<f32>> {
    let dets = detect_all(model, scenes, detect)?;
    let gts: Vec<AnnotationRecord> = scenes
        .iter()
        .flat_map(|s| {
            s.annotations.iter().map(|a| AnnotationRecord {
                image_id: s.image_id,
                class: a.class,
                bbox: a.bbox,
                occlusion: a.occlusion,
            })
        })
        .collect();
    Ok(evaluate(&dets, &gts, model.num_classes(), detect.iou_threshold).map)
}

fn grad_norm(store: &ParamStore) -> f32 {
    store
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|g| (*g as f64) * (*g as f64))
        .sum::<f64>()
        .sqrt() as f32
}

/// Trains `model` in place on `train`, one image per iteration, visiting
/// images in a freshly shuffled order every epoch. `val` is evaluated every
/// `cfg.val_every` iterations and after the last one.
pub fn train(
    model: &mut DetectionModel,
    train: &[Scene],
    val: &[Scene],
    cfg: &TrainConfig,
    detect: &DetectConfig,
    mut progress: impl FnMut(&LogRow),
) -> Result<TrainLog> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new(&model.store, cfg.momentum, cfg.weight_decay);
    let total = cfg.total_iterations();
    let mut order: Vec<usize> = Vec::new();
    let mut log = TrainLog::default();
    for it in 0..total {
        if order.is_empty() {
            order = (0..train.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let scene = &train[order.pop().expect("refilled above")];
        let diverged = |reason: String| Error::Diverged { iteration: it, reason };
        let mut step = build_train_step(model, scene, cfg.lambda, &mut rng)
            .map_err(|e| diverged(format!("forward pass on image {}: {e}", scene.image_id)))?;
        if !step.losses.total.is_finite() {
            return Err(diverged(format!("loss {:?} on image {}", step.losses, scene.image_id)));
        }
        step.graph.backward(step.loss)?;
        model.store.accumulate_grads(&step.graph);
        let norm = grad_norm(&model.store);
        if !norm.is_finite() {
            return Err(diverged(format!("gradient norm {norm}, losses {:?}", step.losses)));
        }
        let scale = if cfg.clip_grad_norm > 0.0 && norm > cfg.clip_grad_norm {
            cfg.clip_grad_norm / norm
        } else {
            1.0
        };
        sgd.step(&mut model.store, cfg.lr_at(it), scale)?;
        if let Some(name) = model.store.first_non_finite() {
            return Err(diverged(format!("parameter {name} became non-finite")));
        }
        let last = it + 1 == total;
        let val_map = if !val.is_empty() && ((cfg.val_every > 0 && (it + 1) % cfg.val_every == 0) || last) {
            evaluate_map(model, val, detect)?
        } else {
            None
        };
        let row = LogRow {
            iteration: it + 1,
            losses: step.losses,
            val_map,
        };
        progress(&row);
        log.rows.push(row);
    }
    Ok(log)
}
