//! Box algebra: rescaling, part decomposition, overlap, suppression, anchors
//! and the log-space regression parameterization.
//!
//! Boxes are center-parameterized `(x, y, w, h)` in image pixels. Corner
//! form only appears at the edges (clipping, pooling, file formats).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Center-parameterized axis-aligned rectangle in image pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f32; 4]", into = "[f32; 4]")]
pub struct BBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

impl From<[f32; 4]> for BBox {
    fn from(v: [f32; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f32; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub const fn new(x: f32, y: f32, w: f32, h: f32) -> Self {
        BBox { x, y, w, h }
    }

    pub fn from_corners(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        BBox {
            x: 0.5 * (x1 + x2),
            y: 0.5 * (y1 + y2),
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f32, f32, f32, f32) {
        let (hw, hh) = (0.5 * self.w, 0.5 * self.h);
        (self.x - hw, self.y - hh, self.x + hw, self.y + hh)
    }

    pub fn area(&self) -> f32 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::InvalidBox(format!("{self:?}")))
        }
    }

    /// Closed containment test.
    pub fn contains(&self, px: f32, py: f32) -> bool {
        let (x1, y1, x2, y2) = self.corners();
        px >= x1 && px <= x2 && py >= y1 && py <= y2
    }

    /// Intersection with the image `[0, width] x [0, height]`; `None` when
    /// nothing of positive area remains.
    pub fn clip(&self, width: f32, height: f32) -> Option<BBox> {
        let (x1, y1, x2, y2) = self.corners();
        let (x1, x2) = (x1.clamp(0.0, width), x2.clamp(0.0, width));
        let (y1, y2) = (y1.clamp(0.0, height), y2.clamp(0.0, height));
        let clipped = BBox::from_corners(x1, y1, x2, y2);
        clipped.is_valid().then_some(clipped)
    }
}

/// Same center, extents multiplied by `s`.
pub fn rescale_box(d: &BBox, s: f32) -> Result<BBox> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::InvalidBox(format!("scale factor must be positive, got {s}")));
    }
    Ok(BBox::new(d.x, d.y, d.w * s, d.h * s))
}

/// The four half-regions of a box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Parts {
    pub left: BBox,
    pub right: BBox,
    pub upper: BBox,
    pub bottom: BBox,
}

impl Parts {
    pub fn as_array(&self) -> [BBox; 4] {
        [self.left, self.right, self.upper, self.bottom]
    }
}

/// Splits `d` into left/right halves along x and upper/bottom halves along y.
/// The upper half has the smaller y (image rows grow downwards).
pub fn decompose_region(d: &BBox) -> Parts {
    let (qw, qh) = (0.25 * d.w, 0.25 * d.h);
    Parts {
        left: BBox::new(d.x - qw, d.y, 0.5 * d.w, d.h),
        right: BBox::new(d.x + qw, d.y, 0.5 * d.w, d.h),
        upper: BBox::new(d.x, d.y - qh, d.w, 0.5 * d.h),
        bottom: BBox::new(d.x, d.y + qh, d.w, 0.5 * d.h),
    }
}

pub fn intersection(a: &BBox, b: &BBox) -> f32 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    iw * ih
}

/// Intersection over union, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let inter = intersection(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy non-maximum suppression. Returns kept indices by descending
/// score; equal scores keep the lower index first.
pub fn nms(boxes: &[BBox], scores: &[f32], iou_threshold: f32) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::LengthMismatch(format!(
            "{} boxes vs {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    Ok(keep)
}

/// Anchor layout tiled over a feature map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorConfig {
    /// Image pixels per feature cell.
    pub stride: f32,
    /// Anchor side lengths (square-root of the area), in pixels.
    pub scales: Vec<f32>,
    /// Height / width ratios.
    pub ratios: Vec<f32>,
}

impl AnchorConfig {
    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    /// Four scales (64..512) by three ratios: twelve anchors per cell.
    pub fn coco(stride: f32) -> Self {
        AnchorConfig {
            stride,
            scales: vec![64.0, 128.0, 256.0, 512.0],
            ratios: vec![1.0, 0.5, 2.0],
        }
    }
}

/// All anchors of a `feat_h x feat_w` map, row-major over cells and
/// `(scale, ratio)` order inside each cell. Centers sit at cell centers.
pub fn generate_anchors(feat_h: usize, feat_w: usize, cfg: &AnchorConfig) -> Result<Vec<BBox>> {
    if feat_h == 0 || feat_w == 0 || cfg.per_cell() == 0 || !(cfg.stride > 0.0) {
        return Err(Error::Config(format!(
            "anchor grid {feat_h}x{feat_w} with {} scales, {} ratios, stride {}",
            cfg.scales.len(),
            cfg.ratios.len(),
            cfg.stride
        )));
    }
    let shapes: Vec<(f32, f32)> = cfg
        .scales
        .iter()
        .flat_map(|&s| {
            cfg.ratios.iter().map(move |&r| {
                let root = r.sqrt();
                (s / root, s * root)
            })
        })
        .collect();
    let mut anchors = Vec::with_capacity(feat_h * feat_w * shapes.len());
    for row in 0..feat_h {
        for col in 0..feat_w {
            let cx = (col as f32 + 0.5) * cfg.stride;
            let cy = (row as f32 + 0.5) * cfg.stride;
            anchors.extend(shapes.iter().map(|&(w, h)| BBox::new(cx, cy, w, h)));
        }
    }
    Ok(anchors)
}

/// Regression offsets of a box relative to a reference box.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub tx: f32,
    pub ty: f32,
    pub tw: f32,
    pub th: f32,
}

impl Delta {
    pub const fn new(tx: f32, ty: f32, tw: f32, th: f32) -> Self {
        Delta { tx, ty, tw, th }
    }

    pub fn to_array(self) -> [f32; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_slice(v: &[f32]) -> Self {
        Delta::new(v[0], v[1], v[2], v[3])
    }
}

/// Upper bound on decoded log-scale offsets, so `exp` cannot overflow.
pub const MAX_LOG_SCALE: f32 = 4.135_166_6; // ln(1000 / 16)

/// `t_x = (x' - x) / w`, `t_y = (y' - y) / h`, `t_w = ln(w' / w)`, `t_h = ln(h' / h)`.
pub fn encode_deltas(reference: &BBox, target: &BBox) -> Result<Delta> {
    reference.validate()?;
    target.validate()?;
    Ok(Delta {
        tx: (target.x - reference.x) / reference.w,
        ty: (target.y - reference.y) / reference.h,
        tw: (target.w / reference.w).ln(),
        th: (target.h / reference.h).ln(),
    })
}

/// Inverse of [`encode_deltas`]; log-scale offsets are capped at [`MAX_LOG_SCALE`].
pub fn decode_deltas(reference: &BBox, t: &Delta) -> BBox {
    BBox {
        x: reference.x + t.tx * reference.w,
        y: reference.y + t.ty * reference.h,
        w: reference.w * t.tw.min(MAX_LOG_SCALE).exp(),
        h: reference.h * t.th.min(MAX_LOG_SCALE).exp(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rescale_examples() {
        let d = BBox::new(10.0, 10.0, 4.0, 6.0);
        assert_eq!(rescale_box(&d, 1.0).unwrap(), d);
        assert_eq!(rescale_box(&d, 0.5).unwrap(), BBox::new(10.0, 10.0, 2.0, 3.0));
        assert!(rescale_box(&d, 0.0).is_err());
        assert!(rescale_box(&d, -1.0).is_err());
        let set = [0.5, 0.7, 1.0, 1.2, 1.5];
        let boxes: Vec<_> = set.iter().map(|s| rescale_box(&d, *s).unwrap()).collect();
        assert_eq!(boxes.len(), 5);
        assert!(boxes.iter().all(|b| b.x == d.x && b.y == d.y));
        assert!(boxes.windows(2).all(|w| w[0].w < w[1].w));
    }

    #[test]
    fn decomposition_example() {
        let parts = decompose_region(&BBox::new(0.0, 0.0, 4.0, 4.0));
        assert_eq!(parts.left, BBox::new(-1.0, 0.0, 2.0, 4.0));
        assert_eq!(parts.right, BBox::new(1.0, 0.0, 2.0, 4.0));
        assert_eq!(parts.upper, BBox::new(0.0, -1.0, 4.0, 2.0));
        assert_eq!(parts.bottom, BBox::new(0.0, 1.0, 4.0, 2.0));
        for p in parts.as_array() {
            assert_eq!(p.area(), 8.0);
        }
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(10.0, 0.0, 2.0, 2.0)), 0.0);
        assert!((iou(&a, &BBox::new(1.0, 0.0, 2.0, 2.0)) - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn nms_examples() {
        let b = BBox::new(5.0, 5.0, 4.0, 4.0);
        assert_eq!(nms(&[b], &[0.3], 0.5).unwrap(), vec![0]);
        assert_eq!(nms(&[b, b], &[0.8, 0.9], 0.5).unwrap(), vec![1]);
        assert_eq!(nms(&[b, b], &[0.5, 0.5], 0.5).unwrap(), vec![0]);
        assert!(nms(&[b], &[0.1, 0.2], 0.5).is_err());
    }

    #[test]
    fn anchor_counts_and_centers() {
        let voc = AnchorConfig {
            stride: 16.0,
            scales: vec![128.0, 256.0, 512.0],
            ratios: vec![0.5, 1.0, 2.0],
        };
        let anchors = generate_anchors(38, 63, &voc).unwrap();
        assert_eq!(anchors.len(), 63 * 38 * 9);
        // with five rescaled copies per proposal
        assert_eq!(anchors.len() * 5, 63 * 38 * 9 * 5);
        assert_eq!(AnchorConfig::coco(16.0).per_cell(), 12);

        let single = AnchorConfig {
            stride: 8.0,
            scales: vec![16.0],
            ratios: vec![1.0],
        };
        assert_eq!(
            generate_anchors(1, 1, &single).unwrap(),
            vec![BBox::new(4.0, 4.0, 16.0, 16.0)]
        );
        let grid = generate_anchors(2, 3, &single).unwrap();
        assert_eq!(grid[4], BBox::new(12.0, 12.0, 16.0, 16.0));
    }

    #[test]
    fn delta_examples() {
        let r = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(encode_deltas(&r, &r).unwrap(), Delta::default());
        let t = encode_deltas(&r, &BBox::new(5.0, 0.0, 20.0, 10.0)).unwrap();
        assert_eq!(t, Delta::new(0.5, 0.0, 2f32.ln(), 0.0));
        assert!(encode_deltas(&r, &BBox::new(0.0, 0.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn clipping_drops_outside_boxes() {
        assert_eq!(BBox::new(-10.0, 5.0, 4.0, 4.0).clip(32.0, 32.0), None);
        let c = BBox::new(0.0, 0.0, 4.0, 4.0).clip(32.0, 32.0).unwrap();
        assert_eq!(c, BBox::new(1.0, 1.0, 2.0, 2.0));
    }
}
