//! Shared test helpers: a finite-difference gradient checker and slow,
//! obviously-correct reference implementations.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdad::datagen::AnnotationRecord;
use rdad::geometry::BBox;
use rdad::params::ParamStore;
use rdad::tensor::{ConvParams, Graph, NodeId, Tensor};

pub mod grad_cases;
pub mod oracle_cases;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// finite differences

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Central-difference half step.
    pub step: f32,
    pub coords: usize,
    pub tol: f64,
    /// Denominator floor of the relative error as a fraction of the RMS
    /// gradient of the tensor being probed. Near-zero coordinates are thus
    /// compared against the tensor's own scale, which is also the scale of
    /// the f32 rounding noise in the difference quotient.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-3,
            coords: 100,
            tol: 1e-3,
            floor: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub checked: usize,
    /// Coordinates redrawn because a perturbation crossed a kink.
    pub resampled: usize,
    pub max_rel: f64,
    pub worst: Option<(usize, usize, f32, f64)>,
}

impl GradReport {
    pub fn passed(&self, cfg: &GradCheck) -> bool {
        self.checked >= cfg.coords && self.max_rel <= cfg.tol
    }
}

struct Probe {
    value: f64,
    signature: u64,
}

fn project(g: &Graph, out: NodeId, weights: &[f32]) -> f64 {
    g.value(out)
        .data()
        .iter()
        .zip(weights)
        .map(|(y, r)| *y as f64 * *r as f64)
        .sum()
}

fn drive(
    sizes: &[usize],
    analytic: &[Vec<f32>],
    base_signature: u64,
    cfg: &GradCheck,
    mut eval: impl FnMut(usize, usize, f32) -> (Probe, f32),
) -> GradReport {
    let mut rng = rng(cfg.seed ^ 0x9e37_79b9);
    let total: usize = sizes.iter().sum();
    let mut report = GradReport {
        checked: 0,
        resampled: 0,
        max_rel: 0.0,
        worst: None,
    };
    let floors: Vec<f64> = analytic
        .iter()
        .map(|a| {
            let ms = a.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / a.len().max(1) as f64;
            (cfg.floor * ms.sqrt()).max(1e-12)
        })
        .collect();
    let mut attempts = 0;
    while report.checked < cfg.coords && attempts < 50 * cfg.coords {
        attempts += 1;
        let mut flat = rng.random_range(0..total);
        let mut slot = 0;
        while flat >= sizes[slot] {
            flat -= sizes[slot];
            slot += 1;
        }
        let (plus, xp) = eval(slot, flat, cfg.step);
        let (minus, xm) = eval(slot, flat, -cfg.step);
        if plus.signature != base_signature || minus.signature != base_signature {
            report.resampled += 1;
            continue;
        }
        let numeric = (plus.value - minus.value) / (xp as f64 - xm as f64);
        let a = analytic[slot][flat] as f64;
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floors[slot]);
        report.checked += 1;
        if rel > report.max_rel || report.worst.is_none() {
            report.max_rel = report.max_rel.max(rel);
            report.worst = Some((slot, flat, a as f32, numeric));
        }
    }
    report
}

/// Checks the gradient of a random projection of `f`'s output with respect
/// to the inputs listed in `check`.
pub fn check_inputs(
    inputs: &[Tensor],
    check: &[usize],
    cfg: &GradCheck,
    f: impl Fn(&mut Graph, &[NodeId]) -> NodeId,
) -> GradReport {
    let build = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| g.input_with_grad(x.clone())).collect();
        let out = f(&mut g, &ids);
        (g, ids, out)
    };
    let (mut g, ids, out) = build(inputs);
    let mut r = rng(cfg.seed);
    let weights: Vec<f32> = (0..g.value(out).numel()).map(|_| r.random_range(-1.0..1.0)).collect();
    let base_signature = g.branch_signature();
    let loss = g.weighted_sum(out, weights.clone()).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f32>> = check.iter().map(|&i| g.grad(ids[i]).unwrap().to_vec()).collect();
    let sizes: Vec<usize> = check.iter().map(|&i| inputs[i].numel()).collect();
    let mut work = inputs.to_vec();
    drive(&sizes, &analytic, base_signature, cfg, |slot, idx, delta| {
        let input = check[slot];
        let orig = inputs[input].data()[idx];
        let moved = orig + delta;
        work[input].data_mut()[idx] = moved;
        let (g, _, out) = build(&work);
        work[input].data_mut()[idx] = orig;
        (
            Probe {
                value: project(&g, out, &weights),
                signature: g.branch_signature(),
            },
            moved,
        )
    })
}

/// Checks gradients with respect to the named parameters of `store`; `f`
/// builds the graph (using `Graph::param`) and returns its output.
pub fn check_params(
    store: &ParamStore,
    names: &[&str],
    cfg: &GradCheck,
    f: impl Fn(&mut Graph, &ParamStore) -> NodeId,
) -> GradReport {
    let ids: Vec<_> = names
        .iter()
        .map(|n| store.id(n).unwrap_or_else(|| panic!("no parameter {n}")))
        .collect();
    let mut g = Graph::new();
    let out = f(&mut g, store);
    let mut r = rng(cfg.seed);
    let weights: Vec<f32> = (0..g.value(out).numel()).map(|_| r.random_range(-1.0..1.0)).collect();
    let base_signature = g.branch_signature();
    let loss = g.weighted_sum(out, weights.clone()).unwrap();
    g.backward(loss).unwrap();
    let mut acc = store.clone();
    acc.zero_grad();
    acc.accumulate_grads(&g);
    let analytic: Vec<Vec<f32>> = ids.iter().map(|&id| acc.get(id).grad().unwrap().to_vec()).collect();
    let sizes: Vec<usize> = ids.iter().map(|&id| store.get(id).numel()).collect();
    let mut work = store.clone();
    drive(&sizes, &analytic, base_signature, cfg, |slot, idx, delta| {
        let id = ids[slot];
        let orig = store.get(id).data()[idx];
        let moved = orig + delta;
        work.get_mut(id).data_mut()[idx] = moved;
        let mut g = Graph::new();
        let out = f(&mut g, &work);
        work.get_mut(id).data_mut()[idx] = orig;
        (
            Probe {
                value: project(&g, out, &weights),
                signature: g.branch_signature(),
            },
            moved,
        )
    })
}

pub fn assert_grad(name: &str, report: &GradReport, cfg: &GradCheck) {
    assert!(
        report.passed(cfg),
        "{name}: checked {} (resampled {}), max rel err {:.3e}, worst {:?}",
        report.checked,
        report.resampled,
        report.max_rel,
        report.worst
    );
}

// ---------------------------------------------------------------------------
// reference implementations

/// Direct seven-loop convolution in `f64`.
pub fn naive_conv2d(x: &Tensor, w: &Tensor, b: &Tensor, p: ConvParams) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let span = p.dilation * (ws.h - 1) + 1;
    let oh = (xs.h + 2 * p.padding - span) / p.stride + 1;
    let ow = (xs.w + 2 * p.padding - span) / p.stride + 1;
    Tensor::from_fn([xs.n, ws.n, oh, ow], |n, o, oy, ox| {
        let mut acc = b.data()[o] as f64;
        for c in 0..xs.c {
            for ky in 0..ws.h {
                for kx in 0..ws.w {
                    let iy = (oy * p.stride + ky * p.dilation) as i64 - p.padding as i64;
                    let ix = (ox * p.stride + kx * p.dilation) as i64 - p.padding as i64;
                    if iy < 0 || ix < 0 || iy >= xs.h as i64 || ix >= xs.w as i64 {
                        continue;
                    }
                    acc += x.at(n, c, iy as usize, ix as usize) as f64 * w.at(o, c, ky, kx) as f64;
                }
            }
        }
        acc as f32
    })
}

/// Bilinear 2x upsampling written from the sampling-position formula
/// `src = (dst + 0.5) / 2 - 0.5`, edge-clamped.
pub fn closed_form_upsample(x: &Tensor) -> Tensor {
    let s = x.shape();
    Tensor::from_fn([s.n, s.c, 2 * s.h, 2 * s.w], |n, c, y, xx| {
        let sy = ((y as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (s.h - 1) as f64);
        let sx = ((xx as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (s.w - 1) as f64);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(s.h - 1), (x0 + 1).min(s.w - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let v = |yy, xv| x.at(n, c, yy, xv) as f64;
        let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
        let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
        (top * (1.0 - fy) + bot * fy) as f32
    })
}

/// Exhaustive per-bin maximum: every feature cell is tested for membership
/// in every bin.
pub fn brute_roi_pool(feat: &Tensor, roi: &BBox, out_h: usize, out_w: usize, stride: f32) -> Tensor {
    let s = feat.shape();
    let (x1, y1, x2, y2) = roi.corners();
    let sx = (x1 / stride).round() as i64;
    let sy = (y1 / stride).round() as i64;
    let lw = ((x2 / stride).round() as i64 - sx).max(1);
    let lh = ((y2 / stride).round() as i64 - sy).max(1);
    Tensor::from_fn([1, s.c, out_h, out_w], |_, c, by, bx| {
        // bin b covers [start + floor(b*len/B), start + ceil((b+1)*len/B))
        let lo_y = sy + (by as i64 * lh) / out_h as i64;
        let hi_y = sy + ((by as i64 + 1) * lh + out_h as i64 - 1) / out_h as i64;
        let lo_x = sx + (bx as i64 * lw) / out_w as i64;
        let hi_x = sx + ((bx as i64 + 1) * lw + out_w as i64 - 1) / out_w as i64;
        let mut best: Option<f32> = None;
        for y in 0..s.h as i64 {
            for x in 0..s.w as i64 {
                if y >= lo_y && y < hi_y && x >= lo_x && x < hi_x {
                    let v = feat.at(0, c, y as usize, x as usize);
                    best = Some(best.map_or(v, |b: f32| b.max(v)));
                }
            }
        }
        best.unwrap_or(0.0)
    })
}

/// IoU by counting points of a regular lattice with `per_unit` points per
/// pixel. For axis-aligned boxes the lattice points inside a box are the
/// product of the points inside its two intervals, so each axis is counted
/// on its own.
pub fn raster_iou(a: &BBox, b: &BBox, per_unit: usize) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let count = |lo: f32, hi: f32, p: (f32, f32), q: (f32, f32)| {
        let step = 1.0 / per_unit as f64;
        let (mut np, mut nq, mut both) = (0u64, 0u64, 0u64);
        let mut t = lo as f64 + 0.5 * step;
        while t < hi as f64 {
            let ip = t >= p.0 as f64 && t < p.1 as f64;
            let iq = t >= q.0 as f64 && t < q.1 as f64;
            np += ip as u64;
            nq += iq as u64;
            both += (ip && iq) as u64;
            t += step;
        }
        (np, nq, both)
    };
    let (xa, xb, xi) = count(ax1.min(bx1), ax2.max(bx2), (ax1, ax2), (bx1, bx2));
    let (ya, yb, yi) = count(ay1.min(by1), ay2.max(by2), (ay1, ay2), (by1, by2));
    let inter = xi * yi;
    let union = xa * ya + xb * yb - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Textbook greedy suppression: repeatedly keep the best remaining box and
/// delete everything overlapping it by more than `thr`.
pub fn reference_nms(boxes: &[BBox], scores: &[f32], thr: f32) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..boxes.len()).collect();
    let mut keep = Vec::new();
    while !alive.is_empty() {
        let mut best = 0;
        for k in 1..alive.len() {
            let (i, j) = (alive[k], alive[best]);
            if scores[i] > scores[j] || (scores[i] == scores[j] && i < j) {
                best = k;
            }
        }
        let top = alive.remove(best);
        keep.push(top);
        alive.retain(|&i| rdad::geometry::iou(&boxes[top], &boxes[i]) <= thr);
    }
    keep
}

pub fn gt(image_id: usize, class: usize, bbox: BBox) -> AnnotationRecord {
    AnnotationRecord {
        image_id,
        class,
        bbox,
        occlusion: 0.0,
    }
}

pub fn random_box<R: Rng>(rng: &mut R, extent: f32) -> BBox {
    let w = rng.random_range(2.0..extent / 2.0);
    let h = rng.random_range(2.0..extent / 2.0);
    let x = rng.random_range(w / 2.0..extent - w / 2.0);
    let y = rng.random_range(h / 2.0..extent - h / 2.0);
    BBox::new(x, y, w, h)
}
