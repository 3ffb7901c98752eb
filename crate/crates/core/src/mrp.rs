//! Multi-scale region proposal: the RPN head, proposal decoding/filtering,
//! rescaled copies of every proposal, and balanced RoI sampling.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, decode_deltas, encode_deltas, iou, nms, rescale_box, AnchorConfig, BBox, Delta};
use crate::layers::{Conv2d, Init};
use crate::params::ParamStore;
use crate::tensor::{kernels::sigmoid, ConvParams, Graph, NodeId, Tensor};
use crate::training::{assign_labels, LabeledRoi};

/// Scale factors applied to every proposal by default.
pub const DEFAULT_SCALES: [f32; 5] = [0.5, 0.7, 1.0, 1.2, 1.5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MrpConfig {
    /// Rescaling factors `s`; must contain 1.0.
    pub scale_set: Vec<f32>,
    /// Anchor side lengths in pixels.
    pub anchor_scales: Vec<f32>,
    /// Anchor height/width ratios.
    pub anchor_ratios: Vec<f32>,
    pub pre_nms_top_n: usize,
    pub post_nms_top_n: usize,
    pub nms_threshold: f32,
    /// Anchors per image in the RPN loss.
    pub rpn_batch: usize,
    /// Sampled RoIs per image in the detection loss.
    pub rda_batch: usize,
    /// Target share of foreground samples in both batches.
    pub fg_fraction: f32,
    /// Proposals scoring below this are discarded.
    pub min_score: f32,
    /// Proposals with a side shorter than this (pixels) are discarded.
    pub min_side: f32,
    /// Training proposals overlapping every ground truth less than this are discarded.
    pub min_gt_overlap: f32,
    pub rpn_fg_iou: f32,
    pub rpn_bg_iou: f32,
    /// Apply the scale set at inference as well as in training.
    pub expand_at_inference: bool,
    /// Add ground-truth boxes to the training proposals before expansion.
    pub include_gt_rois: bool,
}

impl Default for MrpConfig {
    fn default() -> Self {
        MrpConfig {
            scale_set: DEFAULT_SCALES.to_vec(),
            anchor_scales: vec![16.0, 24.0, 32.0, 48.0],
            anchor_ratios: vec![1.0],
            pre_nms_top_n: 1000,
            post_nms_top_n: 300,
            nms_threshold: 0.7,
            rpn_batch: 256,
            rda_batch: 64,
            fg_fraction: 0.5,
            min_score: 0.0,
            min_side: 4.0,
            min_gt_overlap: 0.1,
            rpn_fg_iou: 0.7,
            rpn_bg_iou: 0.3,
            expand_at_inference: true,
            include_gt_rois: true,
        }
    }
}

impl MrpConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.scale_set.contains(&1.0) {
            return Err(Error::Config("mrp.scale_set must contain 1.0".into()));
        }
        if self.scale_set.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("mrp.scale_set entries must be positive".into()));
        }
        if self.rpn_batch < 2 || self.rda_batch < 2 {
            return Err(Error::Config("mrp batch sizes must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.fg_fraction) {
            return Err(Error::Config("mrp.fg_fraction must be in [0, 1]".into()));
        }
        if self.anchor_scales.is_empty() || self.anchor_ratios.is_empty() {
            return Err(Error::Config("mrp anchors need at least one scale and ratio".into()));
        }
        Ok(())
    }

    pub fn anchors(&self, stride: f32) -> AnchorConfig {
        AnchorConfig {
            stride,
            scales: self.anchor_scales.clone(),
            ratios: self.anchor_ratios.clone(),
        }
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }
}

/// A candidate object box with its objectness and the scale that produced it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f32,
    pub scale_tag: f32,
}

/// 3x3 convolution trunk with 1x1 objectness and box-delta heads.
#[derive(Clone, Debug)]
pub struct RpnHead {
    trunk: Conv2d,
    cls: Conv2d,
    reg: Conv2d,
    anchors_per_cell: usize,
}

/// Graph nodes of the two RPN heads: `1 x A x H x W` logits, `1 x 4A x H x W` deltas.
#[derive(Clone, Copy, Debug)]
pub struct RpnNodes {
    pub logits: NodeId,
    pub deltas: NodeId,
}

impl RpnHead {
    /// Registers parameters under `mrp.*`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        channels: usize,
        anchors_per_cell: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let trunk = Conv2d::new(
            store,
            "mrp.conv",
            channels,
            channels,
            3,
            ConvParams::new(1, 1),
            Init::He,
            rng,
        )?;
        let cls = Conv2d::new(
            store,
            "mrp.cls",
            channels,
            anchors_per_cell,
            1,
            ConvParams::valid(),
            Init::Gaussian(0.01),
            rng,
        )?;
        let reg = Conv2d::new(
            store,
            "mrp.reg",
            channels,
            4 * anchors_per_cell,
            1,
            ConvParams::valid(),
            Init::Gaussian(0.01),
            rng,
        )?;
        Ok(RpnHead {
            trunk,
            cls,
            reg,
            anchors_per_cell,
        })
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchors_per_cell
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, feat: NodeId) -> Result<RpnNodes> {
        if g.shape(feat).c != self.trunk.in_channels {
            return Err(Error::ShapeMismatch {
                op: "rpn_forward",
                left: g.shape(feat),
                right: store.get(self.trunk.weight).shape(),
            });
        }
        let h = self.trunk.forward_relu(g, store, feat)?;
        let logits = self.cls.forward(g, store, h)?;
        let deltas = self.reg.forward(g, store, h)?;
        Ok(RpnNodes { logits, deltas })
    }
}

/// Flat index of anchor `a` at cell `(row, col)` inside the logit map.
pub fn logit_index(a: usize, row: usize, col: usize, feat_h: usize, feat_w: usize) -> usize {
    (a * feat_h + row) * feat_w + col
}

/// Flat index of coordinate `v` of anchor `a` inside the delta map; the four
/// coordinates of an anchor sit `feat_h * feat_w` apart.
pub fn delta_index(a: usize, v: usize, row: usize, col: usize, feat_h: usize, feat_w: usize) -> usize {
    ((4 * a + v) * feat_h + row) * feat_w + col
}

/// Splits the head outputs into per-anchor sigmoid scores and deltas, in
/// the order produced by [`geometry::generate_anchors`].
pub fn decode_rpn_outputs(logits: &Tensor, deltas: &Tensor, anchors_per_cell: usize) -> Result<(Vec<f32>, Vec<Delta>)> {
    let (ls, ds) = (logits.shape(), deltas.shape());
    if ls.n != 1 || ls.c != anchors_per_cell || ds.c != 4 * anchors_per_cell || ls.h != ds.h || ls.w != ds.w {
        return Err(Error::ShapeMismatch {
            op: "rpn outputs",
            left: ls,
            right: ds,
        });
    }
    let (fh, fw) = (ls.h, ls.w);
    let total = fh * fw * anchors_per_cell;
    let mut scores = Vec::with_capacity(total);
    let mut out = Vec::with_capacity(total);
    for row in 0..fh {
        for col in 0..fw {
            for a in 0..anchors_per_cell {
                scores.push(sigmoid(logits.data()[logit_index(a, row, col, fh, fw)]));
                let d = |v| deltas.data()[delta_index(a, v, row, col, fh, fw)];
                out.push(Delta::new(d(0), d(1), d(2), d(3)));
            }
        }
    }
    Ok((scores, out))
}

/// Decodes, clips, filters, ranks and suppresses anchor predictions.
pub fn generate_proposals(
    scores: &[f32],
    deltas: &[Delta],
    anchors: &[BBox],
    image_w: f32,
    image_h: f32,
    cfg: &MrpConfig,
) -> Result<Vec<Proposal>> {
    if scores.len() != anchors.len() || deltas.len() != anchors.len() {
        return Err(Error::LengthMismatch(format!(
            "{} scores, {} deltas, {} anchors",
            scores.len(),
            deltas.len(),
            anchors.len()
        )));
    }
    let mut cands: Vec<(usize, Proposal)> = anchors
        .iter()
        .zip(deltas)
        .zip(scores)
        .enumerate()
        .filter_map(|(i, ((a, d), &score))| {
            let b = decode_deltas(a, d).clip(image_w, image_h)?;
            (b.w >= cfg.min_side && b.h >= cfg.min_side && score >= cfg.min_score).then_some((
                i,
                Proposal {
                    bbox: b,
                    score,
                    scale_tag: 1.0,
                },
            ))
        })
        .collect();
    cands.sort_by(|(ia, a), (ib, b)| b.score.total_cmp(&a.score).then(ia.cmp(ib)));
    cands.truncate(cfg.pre_nms_top_n);
    let boxes: Vec<BBox> = cands.iter().map(|(_, p)| p.bbox).collect();
    let sc: Vec<f32> = cands.iter().map(|(_, p)| p.score).collect();
    let keep = nms(&boxes, &sc, cfg.nms_threshold)?;
    Ok(keep.into_iter().take(cfg.post_nms_top_n).map(|i| cands[i].1).collect())
}

/// One rescaled copy of every proposal per factor, proposal-major.
pub fn multiscale_expand(proposals: &[Proposal], scale_set: &[f32]) -> Result<Vec<Proposal>> {
    if scale_set.is_empty() {
        return Err(Error::Config("scale set is empty".into()));
    }
    let mut out = Vec::with_capacity(proposals.len() * scale_set.len());
    for p in proposals {
        for &s in scale_set {
            out.push(Proposal {
                bbox: rescale_box(&p.bbox, s)?,
                score: p.score,
                scale_tag: s * p.scale_tag,
            });
        }
    }
    Ok(out)
}

/// Clips to the image and drops boxes with a side below `min_side`.
pub fn clip_proposals(proposals: &[Proposal], image_w: f32, image_h: f32, min_side: f32) -> Vec<Proposal> {
    proposals
        .iter()
        .filter_map(|p| {
            let b = p.bbox.clip(image_w, image_h)?;
            (b.w >= min_side && b.h >= min_side).then_some(Proposal { bbox: b, ..*p })
        })
        .collect()
}

/// A balanced batch of labeled regions.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiSample {
    /// Foregrounds first, then backgrounds.
    pub rois: Vec<LabeledRoi>,
    pub num_fg: usize,
    /// Fewer than `batch_size` regions could be drawn.
    pub short: bool,
}

/// Labels `candidates` against `gts` and draws up to `fg_fraction * batch`
/// foregrounds uniformly, filling the rest with backgrounds.
pub fn sample_rois<R: Rng + ?Sized>(
    candidates: &[BBox],
    gts: &[(BBox, usize)],
    batch_size: usize,
    fg_fraction: f32,
    rng: &mut R,
) -> Result<RoiSample> {
    if batch_size < 2 {
        return Err(Error::Config(format!("RoI batch must be >= 2, got {batch_size}")));
    }
    let labeled = assign_labels(candidates, gts);
    let (fg, bg): (Vec<_>, Vec<_>) = labeled.into_iter().partition(|r| r.label >= 1);
    let fg_quota = (fg_fraction * batch_size as f32).floor() as usize;
    let num_fg = fg_quota.min(fg.len());
    let num_bg = (batch_size - num_fg).min(bg.len());
    let mut rois = Vec::with_capacity(num_fg + num_bg);
    let pick = |pool: &[LabeledRoi], n: usize, rng: &mut R| {
        let mut idx = sample(rng, pool.len(), n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pool[i]).collect::<Vec<_>>()
    };
    rois.extend(pick(&fg, num_fg, rng));
    rois.extend(pick(&bg, num_bg, rng));
    Ok(RoiSample {
        short: rois.len() < batch_size,
        rois,
        num_fg,
    })
}

/// Anchors selected for the RPN loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnchorTargets {
    /// `(anchor index, is_object)` for every sampled anchor.
    pub labels: Vec<(usize, bool)>,
    /// Regression targets of the sampled object anchors.
    pub deltas: Vec<(usize, Delta)>,
}

/// Labels anchors as object (IoU >= `rpn_fg_iou`, or best anchor of a
/// ground truth) or background (IoU < `rpn_bg_iou`) and samples a balanced
/// batch of `rpn_batch` anchors.
pub fn sample_anchor_targets<R: Rng + ?Sized>(
    anchors: &[BBox],
    gts: &[(BBox, usize)],
    cfg: &MrpConfig,
    rng: &mut R,
) -> Result<AnchorTargets> {
    let mut best_iou = vec![0.0f32; anchors.len()];
    let mut best_gt = vec![usize::MAX; anchors.len()];
    let mut gt_best = vec![0.0f32; gts.len()];
    for (i, a) in anchors.iter().enumerate() {
        for (j, (g, _)) in gts.iter().enumerate() {
            let v = iou(a, g);
            if v > best_iou[i] {
                best_iou[i] = v;
                best_gt[i] = j;
            }
            gt_best[j] = gt_best[j].max(v);
        }
    }
    let mut positive = vec![false; anchors.len()];
    for i in 0..anchors.len() {
        if best_iou[i] >= cfg.rpn_fg_iou {
            positive[i] = true;
        }
    }
    for (j, (g, _)) in gts.iter().enumerate() {
        if gt_best[j] <= 0.0 {
            continue;
        }
        for (i, a) in anchors.iter().enumerate() {
            if iou(a, g) == gt_best[j] {
                positive[i] = true;
                // the anchor regresses towards this ground truth when it is its best match
                if best_iou[i] == gt_best[j] {
                    best_gt[i] = best_gt[i].min(j);
                }
            }
        }
    }
    let fg: Vec<usize> = (0..anchors.len()).filter(|&i| positive[i]).collect();
    let bg: Vec<usize> = (0..anchors.len())
        .filter(|&i| !positive[i] && best_iou[i] < cfg.rpn_bg_iou)
        .collect();
    let num_fg = ((cfg.fg_fraction * cfg.rpn_batch as f32).floor() as usize).min(fg.len());
    let num_bg = (cfg.rpn_batch - num_fg).min(bg.len());
    let mut fg_pick: Vec<usize> = sample(rng, fg.len(), num_fg).into_iter().map(|i| fg[i]).collect();
    let mut bg_pick: Vec<usize> = sample(rng, bg.len(), num_bg).into_iter().map(|i| bg[i]).collect();
    fg_pick.sort_unstable();
    bg_pick.sort_unstable();
    let mut targets = AnchorTargets::default();
    for &i in &fg_pick {
        targets.labels.push((i, true));
        targets
            .deltas
            .push((i, encode_deltas(&anchors[i], &gts[best_gt[i]].0)?));
    }
    targets.labels.extend(bg_pick.into_iter().map(|i| (i, false)));
    Ok(targets)
}

/// Proposal boxes for training: RPN proposals (optionally plus the ground
/// truths), rescaled by every factor, clipped, and stripped of boxes that
/// barely touch any object.
pub fn training_candidates(
    proposals: &[Proposal],
    gts: &[(BBox, usize)],
    image_w: f32,
    image_h: f32,
    cfg: &MrpConfig,
) -> Result<Vec<BBox>> {
    let mut base = proposals.to_vec();
    if cfg.include_gt_rois {
        base.extend(gts.iter().map(|(b, _)| Proposal {
            bbox: *b,
            score: 1.0,
            scale_tag: 1.0,
        }));
    }
    let expanded = multiscale_expand(&base, &cfg.scale_set)?;
    Ok(clip_proposals(&expanded, image_w, image_h, cfg.min_side)
        .into_iter()
        .map(|p| p.bbox)
        .filter(|b| gts.iter().any(|(g, _)| iou(b, g) >= cfg.min_gt_overlap))
        .collect())
}

/// Convenience wrapper over [`geometry::generate_anchors`] for a feature map.
pub fn anchors_for(feat_h: usize, feat_w: usize, stride: f32, cfg: &MrpConfig) -> Result<Vec<BBox>> {
    geometry::generate_anchors(feat_h, feat_w, &cfg.anchors(stride))
}
