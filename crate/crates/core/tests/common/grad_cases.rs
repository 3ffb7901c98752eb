//! Finite-difference checks of every differentiable op.

use super::*;
use rdad::geometry::BBox;
use rdad::mrp::{delta_index, logit_index};
use rdad::params::ParamStore;
use rdad::rda::{pool_multiregion, MergeKind, RabParams, RdaConfig};
use rdad::tensor::{ConvParams, RegressionTerm, Tensor};
use rdad::DetectionModel;

fn randn(shape: [usize; 4], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

pub fn conv2d() {
    let cfg = GradCheck::default();
    for (i, p) in [
        ConvParams::default(),
        ConvParams {
            stride: 2,
            padding: 1,
            dilation: 1,
        },
        ConvParams {
            stride: 1,
            padding: 2,
            dilation: 2,
        },
    ]
    .into_iter()
    .enumerate()
    {
        let x = randn([2, 3, 7, 6], 1 + i as u64);
        let w = randn([4, 3, 3, 3], 2);
        let b = randn([1, 4, 1, 1], 3);
        let r = check_inputs(&[x, w, b], &[0, 1, 2], &cfg, |g, v| {
            g.conv2d(v[0], v[1], v[2], p).unwrap()
        });
        assert_grad("conv2d", &r, &cfg);
    }
}

pub fn relu() {
    let cfg = GradCheck::default();
    let r = check_inputs(&[randn([2, 3, 5, 5], 4)], &[0], &cfg, |g, v| g.relu(v[0]).unwrap());
    assert_grad("relu", &r, &cfg);
}

pub fn linear() {
    let cfg = GradCheck::default();
    let x = randn([5, 6, 2, 2], 5);
    let w = randn([7, 24, 1, 1], 6);
    let b = randn([1, 7, 1, 1], 7);
    let r = check_inputs(&[x, w, b], &[0, 1, 2], &cfg, |g, v| g.linear(v[0], v[1], v[2]).unwrap());
    assert_grad("linear", &r, &cfg);
}

pub fn softmax() {
    let cfg = GradCheck::default();
    let r = check_inputs(&[randn([6, 5, 1, 1], 8)], &[0], &cfg, |g, v| g.softmax(v[0]).unwrap());
    assert_grad("softmax", &r, &cfg);
}

pub fn max_merge() {
    let cfg = GradCheck::default();
    let r = check_inputs(
        &[randn([2, 3, 4, 4], 9), randn([2, 3, 4, 4], 10)],
        &[0, 1],
        &cfg,
        |g, v| g.max_merge(v[0], v[1]).unwrap(),
    );
    assert_grad("max_merge", &r, &cfg);
}

pub fn upsample() {
    let cfg = GradCheck::default();
    let r = check_inputs(&[randn([2, 3, 4, 5], 11)], &[0], &cfg, |g, v| {
        g.upsample2x(v[0]).unwrap()
    });
    assert_grad("upsample", &r, &cfg);
}

pub fn roi_pool() {
    let cfg = GradCheck::default();
    let rois = [
        BBox::from_corners(3.0, 5.0, 60.0, 40.0),
        BBox::from_corners(20.0, 10.0, 50.0, 70.0),
        BBox::from_corners(0.0, 0.0, 12.0, 12.0),
    ];
    let r = check_inputs(&[randn([1, 3, 10, 10], 12)], &[0], &cfg, |g, v| {
        g.roi_pool(v[0], &rois, 7, 7, 8.0).unwrap().0
    });
    assert_grad("roi_pool", &r, &cfg);
}

pub fn max_pool() {
    let cfg = GradCheck::default();
    let r = check_inputs(&[randn([2, 2, 6, 7], 13)], &[0], &cfg, |g, v| {
        g.max_pool2x2(v[0]).unwrap()
    });
    assert_grad("max_pool2x2", &r, &cfg);
}

pub fn assembly_stage() {
    let cfg = GradCheck::default();
    for merge in [MergeKind::Max, MergeKind::Sum, MergeKind::Concat] {
        let mut store = ParamStore::new();
        let rab = RabParams::new(&mut store, "s", 1, 4, 5, 3, ConvParams::default(), &mut rng(14)).unwrap();
        let p = randn([2, 4, 7, 7], 15);
        let q = randn([2, 4, 7, 7], 16);
        let r = check_inputs(&[p.clone(), q.clone()], &[0, 1], &cfg, |g, v| {
            rab.forward(g, &store, v[0], v[1], merge).unwrap()
        });
        assert_grad("assembly stage inputs", &r, &cfg);
        let r = check_params(&store, &["s.p.w", "s.p.b", "s.q.w", "s.q.b"], &cfg, |g, st| {
            let (pi, qi) = (g.input(p.clone()), g.input(q.clone()));
            rab.forward(g, st, pi, qi, merge).unwrap()
        });
        assert_grad("assembly stage parameters", &r, &cfg);
    }
}

/// Per-region losses stacked into one vector, so that each probe perturbs
/// a single O(1) value rather than a batch sum.
pub fn multitask_loss() {
    let cfg = GradCheck::default();
    let classes = 3;
    let labels = [0, 2, 1, 3, 2];
    let targets = [
        [0.0; 4],
        [0.3, -0.2, 0.5, 0.1],
        [2.5, 0.0, -1.7, 0.4],
        [-0.1, 0.9, 0.2, -3.0],
        [0.7, -0.6, 0.05, 1.4],
    ];
    let mut inputs = Vec::new();
    for i in 0..labels.len() {
        inputs.push(randn([1, classes + 1, 1, 1], 17 + i as u64));
        inputs.push(randn([1, 4 * (classes + 1), 1, 1], 30 + i as u64));
    }
    let all: Vec<usize> = (0..inputs.len()).collect();
    let r = check_inputs(&inputs, &all, &cfg, |g, v| {
        let mut out = None;
        for (i, &label) in labels.iter().enumerate() {
            let ce = g.softmax_cross_entropy(v[2 * i], &[label], 1.0).unwrap();
            let terms = if label > 0 {
                vec![RegressionTerm {
                    offset: 4 * label,
                    stride: 1,
                    target: targets[i],
                    weight: 1.0,
                }]
            } else {
                Vec::new()
            };
            let reg = g.smooth_l1(v[2 * i + 1], terms).unwrap();
            let loss = g.add(ce, reg).unwrap();
            out = Some(match out {
                None => loss,
                Some(acc) => g.concat_channels(acc, loss).unwrap(),
            });
        }
        out.unwrap()
    });
    assert_grad("multitask loss", &r, &cfg);
}

pub fn sigmoid_cross_entropy() {
    let cfg = GradCheck::default();
    let picks = [(0, true), (3, false), (5, true), (11, false)];
    let r = check_inputs(&[randn([1, 3, 2, 2], 19)], &[0], &cfg, |g, v| {
        g.sigmoid_cross_entropy(v[0], &picks, 0.25).unwrap()
    });
    assert_grad("sigmoid cross entropy", &r, &cfg);
}

fn small_model() -> DetectionModel {
    let mut mc = rdad::RunConfig::default().model_config();
    mc.rda.k = 8;
    mc.backbone.seed = 3;
    DetectionModel::new(&mc).unwrap()
}

fn trainable(model: &DetectionModel, prefixes: &[&str]) -> Vec<String> {
    model
        .store
        .iter()
        .map(|(n, _)| n.to_string())
        .filter(|n| prefixes.iter().any(|p| n.starts_with(p)))
        .collect()
}

/// Region head outputs with respect to every backbone and head parameter:
/// backbone, pooling, all three assembly stages and both linear heads.
pub fn end_to_end_region_head() {
    let model = small_model();
    let image = Tensor::uniform([1, 3, 64, 64], 0.0, 1.0, &mut rng(20));
    let rois = [
        BBox::from_corners(4.0, 6.0, 40.0, 30.0),
        BBox::from_corners(20.0, 16.0, 62.0, 60.0),
        BBox::from_corners(10.0, 30.0, 30.0, 50.0),
    ];
    let names = trainable(&model, &["backbone.", "rda."]);
    let names: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    // deep f32 stacks: a 1e-3 step leaves rounding noise near the tolerance
    let cfg = GradCheck {
        step: 1e-2,
        ..GradCheck::default()
    };
    let r = check_params(&model.store, &names, &cfg, |g, store| {
        let feat = model.backbone().forward(g, store, &image).unwrap();
        let heads = model.rda().forward(g, store, feat, &rois, model.stride()).unwrap();
        g.concat_channels(heads.logits, heads.deltas).unwrap()
    });
    assert_grad("region head", &r, &cfg);
}

pub fn end_to_end_proposal_head() {
    let model = small_model();
    let image = Tensor::uniform([1, 3, 64, 64], 0.0, 1.0, &mut rng(21));
    let names = trainable(&model, &["backbone.", "mrp."]);
    let names: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    // deep f32 stacks: a 1e-3 step leaves rounding noise near the tolerance
    let cfg = GradCheck {
        step: 1e-2,
        ..GradCheck::default()
    };
    let r = check_params(&model.store, &names, &cfg, |g, store| {
        let feat = model.backbone().forward(g, store, &image).unwrap();
        let rpn = model.rpn().forward(g, store, feat).unwrap();
        g.concat_channels(rpn.logits, rpn.deltas).unwrap()
    });
    assert_grad("proposal head", &r, &cfg);
}

/// Anchor-level terms of the training loss, indexed as the trainer does.
pub fn proposal_losses() {
    let cfg = GradCheck::default();
    let (a, fh, fw) = (3, 4, 5);
    let logits = randn([1, a, fh, fw], 22);
    let deltas = randn([1, 4 * a, fh, fw], 23);
    let r = check_inputs(&[logits, deltas], &[0, 1], &cfg, |g, v| {
        let picks = [
            (logit_index(0, 1, 2, fh, fw), true),
            (logit_index(2, 3, 4, fh, fw), false),
        ];
        let cls = g.sigmoid_cross_entropy(v[0], &picks, 1.0).unwrap();
        let reg = g
            .smooth_l1(
                v[1],
                vec![RegressionTerm {
                    offset: delta_index(1, 0, 2, 3, fh, fw),
                    stride: fh * fw,
                    target: [0.2, -0.1, 0.3, 0.05],
                    weight: 1.0,
                }],
            )
            .unwrap();
        g.concat_channels(cls, reg).unwrap()
    });
    assert_grad("proposal losses", &r, &cfg);
}

pub fn multiregion_pooling() {
    let cfg = GradCheck::default();
    let rois = [
        BBox::from_corners(8.0, 8.0, 72.0, 56.0),
        BBox::from_corners(0.0, 16.0, 40.0, 80.0),
    ];
    let rc = RdaConfig::default();
    let x = randn([1, 2, 12, 12], 21);
    for upsample in [false, true] {
        for part in 0..5 {
            let r = check_inputs(&[x.clone()], &[0], &cfg, |g, v| {
                let (n, _) = pool_multiregion(g, v[0], &rois, rc.h_roi, rc.w_roi, 8.0, upsample).unwrap();
                [n.whole, n.left, n.right, n.upper, n.bottom][part]
            });
            assert_grad("multi-region pooling", &r, &cfg);
        }
    }
}

/// Every case, by name.
pub const ALL: &[(&str, fn())] = &[
    ("conv2d", conv2d),
    ("relu", relu),
    ("linear", linear),
    ("softmax", softmax),
    ("max_merge", max_merge),
    ("upsample", upsample),
    ("roi_pool", roi_pool),
    ("max_pool", max_pool),
    ("assembly_stage", assembly_stage),
    ("multitask_loss", multitask_loss),
    ("sigmoid_cross_entropy", sigmoid_cross_entropy),
    ("end_to_end_region_head", end_to_end_region_head),
    ("end_to_end_proposal_head", end_to_end_proposal_head),
    ("proposal_losses", proposal_losses),
    ("multiregion_pooling", multiregion_pooling),
];
