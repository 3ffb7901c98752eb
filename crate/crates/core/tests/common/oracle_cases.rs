//! Fast kernels against slow reference implementations.

use super::*;
use rand::Rng;
use rdad::evaluation::{ap_from_ranked, evaluate, voc_ap, Detection};
use rdad::geometry::{iou, nms, BBox};
use rdad::tensor::kernels;
use rdad::tensor::{ConvParams, Tensor};

pub fn conv2d_matches_direct_loops() {
    let mut r = rng(100);
    for case in 0..60 {
        let c_in = r.random_range(1..5);
        let c_out = r.random_range(1..6);
        let k = [1, 3, 5][case % 3];
        let p = ConvParams {
            stride: r.random_range(1..3),
            padding: r.random_range(0..3),
            dilation: r.random_range(1..3),
        };
        let span = p.dilation * (k - 1) + 1;
        let h = r.random_range(span.saturating_sub(2 * p.padding).max(1)..span + 9);
        let w = r.random_range(span.saturating_sub(2 * p.padding).max(1)..span + 9);
        let n = r.random_range(1..3);
        let x = Tensor::uniform([n, c_in, h, w], -1.0, 1.0, &mut r);
        let wt = Tensor::uniform([c_out, c_in, k, k], -1.0, 1.0, &mut r);
        let b = Tensor::uniform([1, c_out, 1, 1], -1.0, 1.0, &mut r);
        let fast = kernels::conv2d(&x, &wt, &b, p).unwrap();
        let slow = naive_conv2d(&x, &wt, &b, p);
        assert_eq!(fast.shape(), slow.shape(), "case {case}");
        let err = fast.max_abs_diff(&slow).unwrap();
        assert!(err <= 1e-5, "case {case} {p:?}: max abs diff {err}");
    }
}

pub fn upsample_matches_closed_form() {
    let mut r = rng(101);
    for (h, w) in [(1, 1), (1, 4), (3, 2), (7, 7), (5, 9)] {
        let x = Tensor::uniform([2, 3, h, w], -2.0, 2.0, &mut r);
        let err = kernels::upsample2x(&x)
            .unwrap()
            .max_abs_diff(&closed_form_upsample(&x))
            .unwrap();
        assert!(err <= 1e-6, "{h}x{w}: {err}");
    }
}

pub fn nms_matches_quadratic_reference() {
    let mut r = rng(102);
    for case in 0..1000 {
        let n = r.random_range(0..40);
        let boxes: Vec<BBox> = (0..n).map(|_| random_box(&mut r, 64.0)).collect();
        // coarse scores so that ties occur
        let scores: Vec<f32> = (0..n).map(|_| r.random_range(0..20) as f32 / 20.0).collect();
        let thr = [0.3, 0.5, 0.7][case % 3];
        assert_eq!(
            nms(&boxes, &scores, thr).unwrap(),
            reference_nms(&boxes, &scores, thr),
            "case {case}"
        );
    }
}

pub fn iou_matches_rasterization() {
    let mut r = rng(103);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let a = random_box(&mut r, 48.0);
        // half the pairs overlap by construction
        let b = if case % 2 == 0 {
            BBox::new(
                a.x + r.random_range(-0.5..0.5) * a.w,
                a.y + r.random_range(-0.5..0.5) * a.h,
                a.w * r.random_range(0.5..1.5),
                a.h * r.random_range(0.5..1.5),
            )
        } else {
            random_box(&mut r, 48.0)
        };
        let diff = (iou(&a, &b) as f64 - raster_iou(&a, &b, 1000)).abs();
        worst = worst.max(diff);
        assert!(diff <= 1e-2, "case {case}: {a:?} {b:?} diff {diff}");
    }
    println!("worst IoU deviation {worst:.2e}");
}

pub fn roi_pool_matches_exhaustive_max() {
    let mut r = rng(104);
    for case in 0..300 {
        let (h, w) = (r.random_range(1..14), r.random_range(1..14));
        let feat = Tensor::uniform([1, 2, h, w], -1.0, 1.0, &mut r);
        let stride = [4.0, 8.0, 16.0][case % 3];
        let extent = stride * h.max(w) as f32;
        let rois: Vec<BBox> = (0..5)
            .map(|_| {
                let bw = r.random_range(1.0..extent * 1.2);
                let bh = r.random_range(1.0..extent * 1.2);
                BBox::new(
                    r.random_range(-10.0..extent + 10.0),
                    r.random_range(-10.0..extent + 10.0),
                    bw,
                    bh,
                )
            })
            .collect();
        let (oh, ow) = [(7, 7), (14, 14), (3, 5)][case % 3];
        let out = kernels::roi_pool(&feat, &rois, oh, ow, stride).unwrap();
        for (i, roi) in rois.iter().enumerate() {
            let want = brute_roi_pool(&feat, roi, oh, ow, stride);
            let got = &out.output.data()[i * want.numel()..(i + 1) * want.numel()];
            assert_eq!(got, want.data(), "case {case} roi {roi:?}");
        }
    }
}

fn det(image_id: usize, score: f32, bbox: BBox) -> Detection {
    Detection {
        image_id,
        class: 1,
        score,
        bbox,
    }
}

/// Area under the all-points interpolated precision-recall staircase,
/// with each value worked out by hand.
pub fn ap_micro_cases() {
    let g0 = BBox::new(20.0, 20.0, 10.0, 10.0);
    let g1 = BBox::new(60.0, 60.0, 10.0, 10.0);
    let g2 = BBox::new(20.0, 60.0, 10.0, 10.0);
    let miss = BBox::new(100.0, 100.0, 10.0, 10.0);
    let cases: Vec<(&str, Vec<Detection>, Vec<BBox>, f64)> = vec![
        // single exact hit: precision 1 over the whole recall range
        ("exact", vec![det(0, 0.9, g0)], vec![g0], 1.0),
        // TP, FP, TP over 2 gts: 0.5 * 1 + 0.5 * 2/3
        (
            "tp-fp-tp",
            vec![det(0, 0.9, g0), det(0, 0.8, miss), det(0, 0.7, g1)],
            vec![g0, g1],
            5.0 / 6.0,
        ),
        // FP then TP, one gt of two found: 0.5 * 1/2
        ("fp-tp", vec![det(0, 0.9, miss), det(0, 0.8, g0)], vec![g0, g1], 0.25),
        // duplicate on the same gt is a FP; recall stops at 1/2
        ("duplicate", vec![det(0, 0.9, g0), det(0, 0.8, g0)], vec![g0, g1], 0.5),
        // FP TP TP FP TP over 3 gts: envelope 2/3, 2/3, 3/5 on thirds of recall
        (
            "envelope",
            vec![
                det(0, 0.9, miss),
                det(0, 0.8, g0),
                det(0, 0.7, g1),
                det(0, 0.6, miss),
                det(0, 0.5, g2),
            ],
            vec![g0, g1, g2],
            (2.0 / 3.0 + 2.0 / 3.0 + 0.6) / 3.0,
        ),
    ];
    for (name, dets, gts, want) in cases {
        let recs: Vec<_> = gts.iter().map(|b| gt(0, 1, *b)).collect();
        let got = voc_ap(&dets, &recs, 1, 0.5).unwrap() as f64;
        assert!((got - want).abs() <= 1e-6, "{name}: {got} vs {want}");
        let report = evaluate(&dets, &recs, 1, 0.5);
        assert!((report.map.unwrap() as f64 - want).abs() <= 1e-6, "{name}: mAP");
    }
    assert_eq!(ap_from_ranked(&[], 2), Some(0.0));
    assert_eq!(ap_from_ranked(&[true], 0), None);
}

/// Every case, by name.
pub const ALL: &[(&str, fn())] = &[
    ("conv2d_matches_direct_loops", conv2d_matches_direct_loops),
    ("upsample_matches_closed_form", upsample_matches_closed_form),
    ("nms_matches_quadratic_reference", nms_matches_quadratic_reference),
    ("iou_matches_rasterization", iou_matches_rasterization),
    ("roi_pool_matches_exhaustive_max", roi_pool_matches_exhaustive_max),
    ("ap_micro_cases", ap_micro_cases),
];
