//! The complete detector: backbone, proposal network and RDA head sharing
//! one parameter store, plus the inference pipeline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::evaluation::Detection;
use crate::geometry::{decode_deltas, nms, BBox, Delta};
use crate::mrp::{self, MrpConfig, Proposal, RpnHead};
use crate::params::ParamStore;
use crate::rda::{RdaConfig, RdaHead};
use crate::tensor::{kernels, Graph, Tensor};

/// Post-processing of detections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    /// Class scores below this are dropped before per-class NMS.
    pub score_threshold: f32,
    pub nms_threshold: f32,
    pub max_detections: usize,
    /// IoU threshold of the headline mAP.
    pub iou_threshold: f32,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            score_threshold: 0.05,
            nms_threshold: 0.3,
            max_detections: 100,
            iou_threshold: 0.5,
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.nms_threshold) {
            return Err(Error::Config("eval thresholds must be in [0, 1]".into()));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config("eval.iou_threshold must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Architecture of a detector, enough to rebuild it around a checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub mrp: MrpConfig,
    pub rda: RdaConfig,
    pub num_classes: usize,
}

#[derive(Clone, Debug)]
pub struct DetectionModel {
    pub store: ParamStore,
    cfg: ModelConfig,
    backbone: Backbone,
    rpn: RpnHead,
    rda: RdaHead,
}

/// Per-region class probabilities and deltas, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiScores {
    /// `n x (cls+1)`.
    pub probs: Vec<f32>,
    /// `n x 4(cls+1)`.
    pub deltas: Vec<f32>,
}

impl DetectionModel {
    /// Fresh parameters drawn from `cfg.backbone.seed`.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.mrp.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.backbone.seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&cfg.backbone, &mut store, &mut rng)?;
        let rpn = RpnHead::new(
            &mut store,
            backbone.out_channels(),
            cfg.mrp.anchors_per_cell(),
            &mut rng,
        )?;
        let rda = RdaHead::new(&cfg.rda, backbone.out_channels(), cfg.num_classes, &mut store, &mut rng)?;
        Ok(DetectionModel {
            store,
            cfg: cfg.clone(),
            backbone,
            rpn,
            rda,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn rpn(&self) -> &RpnHead {
        &self.rpn
    }

    pub fn rda(&self) -> &RdaHead {
        &self.rda
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    pub fn stride(&self) -> f32 {
        self.backbone.stride() as f32
    }

    fn check_params(&self) -> Result<()> {
        match self.store.first_non_finite() {
            Some(_) => Err(Error::NonFinite { op: "model parameters" }),
            None => Ok(()),
        }
    }

    /// Backbone map and the ranked RPN proposals of `image`.
    pub fn propose(&self, image: &Tensor) -> Result<(Tensor, Vec<Proposal>)> {
        let mut g = Graph::new();
        let feat = self.backbone.forward(&mut g, &self.store, image)?;
        let out = self.rpn.forward(&mut g, &self.store, feat)?;
        let fs = g.shape(feat);
        let anchors = mrp::anchors_for(fs.h, fs.w, self.stride(), &self.cfg.mrp)?;
        let (scores, deltas) =
            mrp::decode_rpn_outputs(g.value(out.logits), g.value(out.deltas), self.rpn.anchors_per_cell())?;
        let s = image.shape();
        let props = mrp::generate_proposals(&scores, &deltas, &anchors, s.w as f32, s.h as f32, &self.cfg.mrp)?;
        Ok((g.value(feat).clone(), props))
    }

    /// Regions classified at inference: the proposals, rescaled by every
    /// factor of the scale set when inference expansion is enabled.
    pub fn inference_rois(&self, proposals: &[Proposal], image_w: f32, image_h: f32) -> Result<Vec<BBox>> {
        let props = if self.cfg.mrp.expand_at_inference {
            let expanded = mrp::multiscale_expand(proposals, &self.cfg.mrp.scale_set)?;
            mrp::clip_proposals(&expanded, image_w, image_h, self.cfg.mrp.min_side)
        } else {
            proposals.to_vec()
        };
        Ok(props.into_iter().map(|p| p.bbox).collect())
    }

    /// Runs the RDA network on `rois` in fixed-size chunks.
    pub fn classify_rois(&self, feat: &Tensor, rois: &[BBox]) -> Result<RoiScores> {
        let chunk = self.cfg.rda.chunk_size;
        let parts: Vec<Result<(Vec<f32>, Vec<f32>)>> = rois
            .par_chunks(chunk.max(1))
            .map(|batch| {
                let mut g = Graph::new();
                let f = g.input(feat.clone());
                let out = self.rda.forward(&mut g, &self.store, f, batch, self.stride())?;
                let probs = kernels::softmax(g.value(out.logits));
                Ok((probs.into_data(), g.value(out.deltas).data().to_vec()))
            })
            .collect();
        let mut scores = RoiScores {
            probs: Vec::with_capacity(rois.len() * (self.num_classes() + 1)),
            deltas: Vec::with_capacity(rois.len() * 4 * (self.num_classes() + 1)),
        };
        for part in parts {
            let (p, d) = part?;
            scores.probs.extend(p);
            scores.deltas.extend(d);
        }
        Ok(scores)
    }

    /// Full inference on one `1 x 3 x H x W` image.
    pub fn detect(&self, image: &Tensor, image_id: usize, cfg: &DetectConfig) -> Result<Vec<Detection>> {
        self.check_params()?;
        image.check_finite("detect input")?;
        let s = image.shape();
        let (w, h) = (s.w as f32, s.h as f32);
        let (feat, proposals) = self.propose(image)?;
        let rois = self.inference_rois(&proposals, w, h)?;
        let scores = self.classify_rois(&feat, &rois)?;
        Ok(postprocess(&rois, &scores, self.num_classes(), w, h, image_id, cfg))
    }
}

/// Per-class decoding, clipping, thresholding and NMS; detections of all
/// classes sorted by descending score and capped.
pub fn postprocess(
    rois: &[BBox],
    scores: &RoiScores,
    num_classes: usize,
    image_w: f32,
    image_h: f32,
    image_id: usize,
    cfg: &DetectConfig,
) -> Vec<Detection> {
    let k = num_classes + 1;
    let mut out = Vec::new();
    for class in 1..=num_classes {
        let mut boxes = Vec::new();
        let mut conf = Vec::new();
        for (r, roi) in rois.iter().enumerate() {
            let p = scores.probs[r * k + class];
            if p < cfg.score_threshold {
                continue;
            }
            let d = Delta::from_slice(&scores.deltas[r * 4 * k + 4 * class..r * 4 * k + 4 * class + 4]);
            if let Some(b) = decode_deltas(roi, &d).clip(image_w, image_h) {
                boxes.push(b);
                conf.push(p);
            }
        }
        let keep = nms(&boxes, &conf, cfg.nms_threshold).expect("aligned boxes and scores");
        out.extend(keep.into_iter().map(|i| Detection {
            image_id,
            class,
            score: conf[i],
            bbox: boxes[i],
        }));
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(cfg.max_detections);
    out
}

/// Detections for every scene, images processed in order.
pub fn detect_all(
    model: &DetectionModel,
    scenes: &[crate::datagen::Scene],
    cfg: &DetectConfig,
) -> Result<Vec<Detection>> {
    let mut dets = Vec::new();
    for scene in scenes {
        dets.extend(model.detect(&scene.image, scene.image_id, cfg)?);
    }
    Ok(dets)
}
